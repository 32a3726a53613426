#!/usr/bin/env python3
"""Regenerate the committed test fixtures.

Deterministic by construction (fixed seeds, fixed content). Outputs:

  tests/data/images/          50 small PNGs
  tests/data/raw_samples.jsonl   ingest input (xywh boxes)
  tests/data/depth/           one DPR1 raster per image
  tests/data/masks/           one mask JSON per image
  tests/data/oracle_script.jsonl scripted generator for gen-trace
  tests/data/turns/turns.jsonl   scripted model turns for eval-bench
  tests/data/grounding_cases.jsonl  50 parser cases with expected outputs
  tests/data/golden/cases.jsonl     protocol replay inputs
  tests/data/golden/episodes.jsonl  expected serialized episodes
  adapter/tests/data/images/  5 PNGs for the model-adapter boundary test

Golden episode expectations are produced by the current protocol
implementation and then frozen; every other expectation here is stated
literally or computed with independent arithmetic.
"""

import json
import sys
from pathlib import Path

import numpy as np
from PIL import Image

ROOT = Path(__file__).resolve().parent.parent
DATA = ROOT / "tests" / "data"

sys.path.insert(0, str(ROOT / "src"))

from zoomcot import store  # noqa: E402
from zoomcot.imaging import load_image  # noqa: E402
from zoomcot.protocol import ScriptedTurnModel, run_episode  # noqa: E402
from zoomcot.scene3d import DepthRaster, InstanceMask  # noqa: E402


def tool_turn(bbox):
    call = json.dumps({"name": "image_zoom_in_tool", "arguments": {"bbox_2d": bbox}})
    return f"<think>zooming</think><tool_call>{call}</tool_call>"


def answer_turn(text):
    return f"<think>deciding</think><answer>{text}</answer>"


def make_image(rng, w, h):
    yy, xx = np.mgrid[0:h, 0:w]
    base = np.stack(
        [
            (xx * 255 // max(w - 1, 1)).astype(np.uint8),
            (yy * 255 // max(h - 1, 1)).astype(np.uint8),
            ((xx // 8 + yy // 8) % 2 * 180 + 40).astype(np.uint8),
        ],
        axis=-1,
    )
    noise = rng.integers(0, 30, size=base.shape, dtype=np.uint8)
    return np.clip(base.astype(np.int16) + noise, 0, 255).astype(np.uint8)


def write_sample_images(n=50, w=96, h=64):
    rng = np.random.default_rng(2024)
    images_dir = DATA / "images"
    images_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for i in range(n):
        name = f"s{i:03d}.png"
        Image.fromarray(make_image(rng, w, h)).save(images_dir / name)
        # alternate small / large targets; every 7th is large enough to
        # trigger the single-step skip rule (>30% of the frame)
        if i % 7 == 0:
            bw, bh = 64, 40  # 2560 px of 6144 = 41.7%
            x, y = 8 + (i % 3) * 4, 8
        else:
            bw, bh = 10 + (i % 5) * 2, 8 + (i % 4) * 2
            x, y = (i * 11) % (w - bw - 1), (i * 7) % (h - bh - 1)
        records.append(
            {
                "id": f"s{i:03d}",
                "image": name,
                "question": f"What sits at position {i}?",
                "short_answer": f"object-{i}",
                "long_answer": f"The target object {i} is visible there.",
                "bbox": [x, y, bw, bh],
                "bbox_format": "xywh",
                "source": ["alpha", "beta", "gamma"][i % 3],
                "width": w,
                "height": h,
            }
        )
    with open(DATA / "raw_samples.jsonl", "w") as fh:
        for record in records:
            fh.write(json.dumps(record) + "\n")
    return records


def write_depth_and_masks(records, w=96, h=64):
    depth_dir = DATA / "depth"
    masks_dir = DATA / "masks"
    depth_dir.mkdir(parents=True, exist_ok=True)
    masks_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(7)
    categories = ["cup", "plate", "lamp", "book", "vase", "clock"]
    for record in records:
        stem = Path(record["image"]).stem
        yy = np.mgrid[0:h, 0:w][0]
        depth = (yy / (h - 1)) * 0.6 + 0.2  # base gradient in [0.2, 0.8]
        masks = []
        n_objects = 2 + int(rng.integers(0, 3))
        for k in range(n_objects):
            mw = int(rng.integers(8, 24))
            mh = int(rng.integers(6, 18))
            x = int(rng.integers(0, w - mw))
            y = int(rng.integers(0, h - mh))
            level = float(rng.uniform(0.05, 0.95))
            depth[y : y + mh, x : x + mw] = level
            mask = np.zeros((h, w), dtype=bool)
            mask[y : y + mh, x : x + mw] = True
            masks.append(
                InstanceMask.from_bool(k + 1, categories[k % len(categories)], mask)
            )
        store.write_depth_raster(
            depth_dir / f"{stem}.dpr",
            DepthRaster(w, h, np.clip(depth, 0.0, 1.0).astype(np.float32)),
        )
        store.save_masks(masks_dir / f"{stem}.json", masks)


def write_oracle_script():
    # One entry: repeated for every call, so the shared-oracle pipeline is
    # order-independent under the worker pool.
    entry = {
        "description": "A cluttered scene with several small objects.",
        "aoi": [0.25, 0.25, 0.75, 0.75],
        "reasoning": "The queried object sits near the middle of the view.",
    }
    with open(DATA / "oracle_script.jsonl", "w") as fh:
        fh.write(json.dumps(entry) + "\n")


def write_turn_scripts(records):
    turns_dir = DATA / "turns"
    turns_dir.mkdir(parents=True, exist_ok=True)
    with open(turns_dir / "turns.jsonl", "w") as fh:
        for i, record in enumerate(records[:10]):
            if i % 3 == 0:
                turns = [answer_turn(record["short_answer"])]
            elif i % 3 == 1:
                turns = [
                    tool_turn([0.25, 0.25, 0.75, 0.75]),
                    answer_turn(record["short_answer"]),
                ]
            else:
                turns = [
                    tool_turn([0.5, 0.0, 1.0, 0.5]),
                    answer_turn("wrong guess"),
                ]
            fh.write(json.dumps({"id": record["id"], "turns": turns}) + "\n")


def grounding_cases():
    """50 parser cases; expected outputs are literal or plain arithmetic."""
    cases = []

    def case(text, expect, frame=None, min_diagnostics=0):
        cases.append(
            {
                "text": text,
                "frame": frame,
                "expect": expect,
                "min_diagnostics": min_diagnostics,
            }
        )

    def e(bbox, depth=None):
        return {"bbox": bbox, "depth": depth}

    # -- ratio boxes, numeric depths
    case("car: ([0.1, 0.2, 0.4, 0.6], 0.3)", {"car": e([0.1, 0.2, 0.4, 0.6], 0.3)})
    case("lamp: ([0.0, 0.0, 1.0, 1.0], 0.9)", {"lamp": e([0.0, 0.0, 1.0, 1.0], 0.9)})
    case("mug: ([0.55, 0.6, 0.7, 0.85], 0.05)", {"mug": e([0.55, 0.6, 0.7, 0.85], 0.05)})
    case("dog: ([0.12,0.34,0.56,0.78], 0.5)", {"dog": e([0.12, 0.34, 0.56, 0.78], 0.5)})
    case("tv: ([.1, .2, .3, .4], .6)", {"tv": e([0.1, 0.2, 0.3, 0.4], 0.6)})
    # -- symbolic depths
    case("tree: ([0.5, 0.1, 0.9, 0.8], near)", {"tree": e([0.5, 0.1, 0.9, 0.8], 0.2)})
    case("hill: ([0.2, 0.2, 0.8, 0.6], mid)", {"hill": e([0.2, 0.2, 0.8, 0.6], 0.5)})
    case("tower: ([0.4, 0.0, 0.6, 0.5], middle)", {"tower": e([0.4, 0.0, 0.6, 0.5], 0.5)})
    case("cloud: ([0.1, 0.0, 0.9, 0.2], far)", {"cloud": e([0.1, 0.0, 0.9, 0.2], 0.8)})
    case("moon: ([0.8, 0.05, 0.95, 0.2], FAR)", {"moon": e([0.8, 0.05, 0.95, 0.2], 0.8)})
    case("post: ([0.3, 0.3, 0.4, 0.9], Near)", {"post": e([0.3, 0.3, 0.4, 0.9], 0.2)})
    # -- percent boxes
    case("tree: ([10, 20, 40, 60], near)", {"tree": e([0.1, 0.2, 0.4, 0.6], 0.2)})
    case("bus: ([25, 10, 75, 90], 0.4)", {"bus": e([0.25, 0.1, 0.75, 0.9], 0.4)})
    case("sign: ([5, 5, 95, 50])", {"sign": e([0.05, 0.05, 0.95, 0.5], None)})
    case("bench: ([33, 40, 66, 80], 70)", {"bench": e([0.33, 0.4, 0.66, 0.8], 0.7)})
    case("kite: ([2, 3, 4, 5], 0.1)", {"kite": e([0.02, 0.03, 0.04, 0.05], 0.1)})
    # -- pixel boxes with frame dims
    case(
        "door: ([320, 100, 640, 480], 0.4)",
        {"door": e([0.5, 100 / 480, 1.0, 1.0], 0.4)},
        frame=[640, 480],
    )
    case(
        "window: ([160, 0, 320, 240], far)",
        {"window": e([0.25, 0.0, 0.5, 0.5], 0.8)},
        frame=[640, 480],
    )
    case(
        "rug: ([200, 300, 600, 400])",
        {"rug": e([200 / 800, 0.5, 0.75, 400 / 600], None)},
        frame=[800, 600],
    )
    # -- pixel boxes without frame dims: skipped with a diagnostic
    case("ghost: ([320, 100, 640, 480], 0.4)", {}, min_diagnostics=1)
    case("wall: ([500, 80, 900, 200])", {}, min_diagnostics=1)
    # -- separators
    case("cat: ([0.1; 0.2; 0.4; 0.6], 0.3)", {"cat": e([0.1, 0.2, 0.4, 0.6], 0.3)})
    case("cat: ([0.1 0.2 0.4 0.6], 0.3)", {"cat": e([0.1, 0.2, 0.4, 0.6], 0.3)})
    case("cat: ([0.1 , 0.2 ; 0.4  0.6]; 0.3)", {"cat": e([0.1, 0.2, 0.4, 0.6], 0.3)})
    case("cat:([0.1,0.2,0.4,0.6],0.3)", {"cat": e([0.1, 0.2, 0.4, 0.6], 0.3)})
    case("cat : ([ 0.1 , 0.2 , 0.4 , 0.6 ] , 0.3 )", {"cat": e([0.1, 0.2, 0.4, 0.6], 0.3)})
    # -- inverted / out-of-range coordinates
    case("flag: ([0.9, 0.8, 0.1, 0.2], 0.5)", {"flag": e([0.1, 0.2, 0.9, 0.8], 0.5)})
    case("boat: ([0.2, 1.4, 0.6, 0.3], 0.5)", {"boat": e([0.2, 0.3, 0.6, 1.0], 0.5)})
    case("crate: ([-0.2, 0.1, 0.5, 0.9])", {"crate": e([0.0, 0.1, 0.5, 0.9], None)})
    case("chip: ([1.2, 0.1, 1.4, 0.9], 0.5)", {}, min_diagnostics=1)
    case("line: ([0.5, 0.1, 0.5, 0.9], 0.5)", {}, min_diagnostics=1)
    # -- depth edge cases
    case("box: ([0.1, 0.1, 0.3, 0.3], 35)", {"box": e([0.1, 0.1, 0.3, 0.3], 0.35)})
    case("jar: ([0.1, 0.1, 0.3, 0.3], 250)", {"jar": e([0.1, 0.1, 0.3, 0.3], 1.0)})
    case("pot: ([0.1, 0.1, 0.3, 0.3], -0.4)", {"pot": e([0.1, 0.1, 0.3, 0.3], 0.0)})
    case("urn: ([0.1, 0.1, 0.3, 0.3], 1.0)", {"urn": e([0.1, 0.1, 0.3, 0.3], 1.0)})
    case(
        "fan: ([0.1, 0.1, 0.3, 0.3], somewhere)",
        {"fan": e([0.1, 0.1, 0.3, 0.3], None)},
        min_diagnostics=1,
    )
    case("vent: ([0.1, 0.1, 0.3, 0.3], nan)", {"vent": e([0.1, 0.1, 0.3, 0.3], None)}, min_diagnostics=1)
    # -- names: case folding, articles, missing colon, multiword
    case("CAR: ([0.1, 0.2, 0.4, 0.6], 0.3)", {"car": e([0.1, 0.2, 0.4, 0.6], 0.3)})
    case("The Traffic Light: ([0.5, 0.1, 0.6, 0.4], far)", {"traffic light": e([0.5, 0.1, 0.6, 0.4], 0.8)})
    case(
        "I see the red car ([0.1, 0.2, 0.4, 0.6], 0.3) parked.",
        {"car": e([0.1, 0.2, 0.4, 0.6], 0.3)},
    )
    case("fire hydrant: ([0.7, 0.6, 0.8, 0.9], 0.25)", {"fire hydrant": e([0.7, 0.6, 0.8, 0.9], 0.25)})
    # -- duplicates: the last mention wins
    case(
        "car: ([0.0, 0.0, 0.5, 0.5], 0.9) and later car: ([0.2, 0.2, 0.4, 0.4], 0.1)",
        {"car": e([0.2, 0.2, 0.4, 0.4], 0.1)},
    )
    case(
        "Cat: ([0.1, 0.1, 0.2, 0.2]) cat: ([0.3, 0.3, 0.6, 0.6], mid)",
        {"cat": e([0.3, 0.3, 0.6, 0.6], 0.5)},
    )
    # -- several entries in one text
    case(
        "car: ([0.1, 0.2, 0.4, 0.6], 0.3); tree: ([0.5, 0.1, 0.9, 0.8], far)",
        {
            "car": e([0.1, 0.2, 0.4, 0.6], 0.3),
            "tree": e([0.5, 0.1, 0.9, 0.8], 0.8),
        },
    )
    case(
        "The lamp ([0.05, 0.1, 0.2, 0.5], 0.6) stands behind the sofa ([0.3, 0.4, 0.9, 0.95], 0.3).",
        {
            "lamp": e([0.05, 0.1, 0.2, 0.5], 0.6),
            "sofa": e([0.3, 0.4, 0.9, 0.95], 0.3),
        },
    )
    # -- garbage and near-misses
    case("no annotations at all here", {})
    case("almost: [0.1, 0.2, 0.3, 0.4]", {})  # bare vector, not the pattern
    case("weird: ([0.1, 0.2, 0.3], 0.5)", {})  # only three coordinates
    case("empty: ([], 0.5)", {})
    case("just text (with parens) and [brackets] apart", {})
    assert len(cases) == 50, len(cases)
    return cases


def write_grounding_cases():
    with open(DATA / "grounding_cases.jsonl", "w") as fh:
        for case in grounding_cases():
            fh.write(json.dumps(case) + "\n")


def golden_cases():
    """Protocol conformance corpus: inputs per case; >= 30 cases total."""
    cases = []

    def case(name, image, r_max, turns):
        cases.append({"sample_id": name, "image": image, "r_max": r_max, "turns": turns})

    img = "s000.png"
    alt = "s001.png"
    # answer-first (6)
    for i in range(6):
        case(f"answer_first_{i}", img if i % 2 else alt, 5, [answer_turn(f"value-{i}")])
    # multi-zoom chains (8)
    zooms = [
        [0.5, 0.5, 1.0, 1.0],
        [0.0, 0.0, 0.5, 0.5],
        [0.25, 0.25, 0.75, 0.75],
        [0.1, 0.2, 0.9, 0.8],
    ]
    for i in range(8):
        chain = [tool_turn(zooms[(i + j) % len(zooms)]) for j in range(1 + i % 3)]
        case(f"multi_zoom_{i}", img, 5, chain + [answer_turn(f"found-{i}")])
    # mixed-tag violations (5)
    for i in range(5):
        mixed = tool_turn([0.2, 0.2, 0.8, 0.8]) + f"<answer>mixed-{i}</answer>"
        case(f"mixed_tag_{i}", alt, 5, [mixed, answer_turn(f"clean-{i}")])
    # invalid boxes (6): order, range, count, wrong tool, bad json, no think
    case("invalid_box_order", img, 5, [tool_turn([0.9, 0.1, 0.2, 0.5]), answer_turn("x")])
    case("invalid_box_range", img, 5, [tool_turn([0.1, 0.1, 1.2, 0.9]), answer_turn("x")])
    case("invalid_box_count", img, 5, [tool_turn([0.1, 0.1, 0.9]), answer_turn("x")])
    case("wrong_tool_name", img, 5, [
        '<think>t</think><tool_call>{"name":"other_tool","arguments":{"bbox_2d":[0.1,0.1,0.5,0.5]}}</tool_call>',
        answer_turn("x"),
    ])
    case("bad_tool_json", img, 5, ["<think>t</think><tool_call>{oops</tool_call>", answer_turn("x")])
    case("missing_think", img, 5, ["<answer>bare</answer>"])
    # budget exhaustion at both documented caps (6)
    spin = tool_turn([0.25, 0.25, 0.75, 0.75])
    for r_max in (5, 6):
        case(f"budget_exhaust_rmax{r_max}", img, r_max, [spin] * (r_max + 3))
        case(f"budget_violations_rmax{r_max}", alt, r_max, ["<think>only thinking</think>"] * (r_max + 1))
        case(
            f"budget_then_untagged_rmax{r_max}",
            img,
            r_max,
            [spin] * (r_max - 1) + ["<think>h</think>The answer is 7."] * 2,
        )
    assert len(cases) >= 30, len(cases)
    return cases


def write_golden():
    golden_dir = DATA / "golden"
    golden_dir.mkdir(parents=True, exist_ok=True)
    cases = golden_cases()
    with open(golden_dir / "cases.jsonl", "w") as fh:
        for case in cases:
            fh.write(json.dumps(case) + "\n")
    episodes = []
    for case in cases:
        image = load_image(DATA / "images" / case["image"])
        episode = run_episode(
            case["sample_id"],
            image,
            "golden question",
            ScriptedTurnModel(case["turns"]),
            r_max=case["r_max"],
        )
        episodes.append(episode)
    store.save_episodes(golden_dir / "episodes.jsonl", episodes)


def write_adapter_images():
    out = ROOT / "adapter" / "tests" / "data" / "images"
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(99)
    for i in range(5):
        w, h = 64 + 8 * i, 48 + 4 * i
        arr = make_image(rng, w, h)
        # paint a couple of flat color regions for the stand-in segmenter
        arr[5 : 5 + 12, 5 : 5 + 16] = (220, 40, 40)
        arr[20 : 20 + 14, 30 : 30 + 20] = (40, 200, 60)
        Image.fromarray(arr).save(out / f"img{i}.png")


def main():
    DATA.mkdir(parents=True, exist_ok=True)
    records = write_sample_images()
    write_depth_and_masks(records)
    write_oracle_script()
    write_turn_scripts(records)
    write_grounding_cases()
    write_golden()
    write_adapter_images()
    print(f"fixtures written under {DATA} and adapter/tests/data")


if __name__ == "__main__":
    main()
