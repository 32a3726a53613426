"""Batch adapter that runs monocular depth estimation and instance
segmentation over a directory of images and exports the results as DPR1
depth rasters and RLE mask JSON files.

The adapter only performs inference and export; region merging, depth
ranking, and every other downstream transform belong to the consumer.
"""

__version__ = "0.1.0"
