"""Toolkit for spatially grounded, multi-round visual chain-of-thought:
trace generation around a vision-language endpoint, a zoom-tool evaluation
harness, grounding-annotation parsing, and localization/grounding metrics.
"""

__version__ = "0.1.0"
