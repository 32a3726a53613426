"""Persistence round trips, schema guards, manifests, config, and the CLI."""

import json

import numpy as np
import pytest
from PIL import Image

from zoomcot import store
from zoomcot.cli import cli_dispatch
from zoomcot.geometry import BoxPx
from zoomcot.protocol import ScriptedTurnModel, run_episode
from zoomcot.scene3d import DepthRaster, InstanceMask, SceneObject
from zoomcot.trace_gen import CoTRound, TraceRecord


def sample(i=0, w=96, h=64):
    return store.SampleRecord(
        id=f"s{i}",
        image_path=f"s{i}.png",
        question="what color?",
        short_answer="red",
        gt_box=BoxPx(10, 10, 30, 30, w, h),
        long_answer="it is red",
        box_convention_src="xywh",
        source="fixture",
    )


def trace(i=0):
    return TraceRecord(
        id=f"t{i}",
        image=f"s{i}.png",
        question="q",
        short_answer="a",
        gt_box=BoxPx(5, 5, 25, 25, 96, 64),
        rounds=[
            CoTRound("halves", BoxPx(0, 0, 48, 32, 96, 64), "looking left", 1),
            CoTRound("closer", BoxPx(4, 4, 28, 28, 96, 64), "tight now", 2),
        ],
        final_justification="the target is visible",
        extras={"custom_field": {"kept": True}},
    )


class TestSamples:
    def test_round_trip(self, tmp_path):
        path = tmp_path / "samples.jsonl"
        originals = [sample(i) for i in range(3)]
        store.save_samples(path, originals)
        loaded, diags = store.load_samples(path)
        assert diags == []
        assert loaded == originals

    def test_corrupt_line_isolated(self, tmp_path):
        path = tmp_path / "samples.jsonl"
        store.save_samples(path, [sample(0), sample(1)])
        lines = path.read_text().splitlines()
        lines.insert(1, "{broken json")
        path.write_text("\n".join(lines) + "\n")
        loaded, diags = store.load_samples(path)
        assert len(loaded) == 2
        assert len(diags) == 1 and ":2:" in diags[0]

    def test_save_load_save_byte_stable(self, tmp_path):
        p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        store.save_samples(p1, [sample(0), sample(1)])
        loaded, _ = store.load_samples(p1)
        store.save_samples(p2, loaded)
        assert p1.read_bytes() == p2.read_bytes()

    def test_higher_major_rejected(self, tmp_path):
        path = tmp_path / "samples.jsonl"
        record = store.sample_to_json(sample(0))
        record["schema"] = "visreason-sample/2"
        path.write_text(store.canonical_json(record) + "\n")
        loaded, diags = store.load_samples(path)
        assert loaded == [] and "unsupported schema major" in diags[0]

    def test_normalize_xywh(self):
        box, flags = store.normalize_gt_box([10, 10, 30, 40], "xywh", 100, 100)
        assert box.as_list() == [10, 10, 40, 50]
        assert flags == []

    def test_normalize_xyxy_passthrough(self):
        box, flags = store.normalize_gt_box([10, 10, 40, 50], "xyxy", 100, 100)
        assert box.as_list() == [10, 10, 40, 50]

    def test_inverted_box_repaired_and_flagged(self):
        box, flags = store.normalize_gt_box([40, 50, 10, 10], "xyxy", 100, 100)
        assert box.as_list() == [10, 10, 40, 50]
        assert "box_inverted_repaired" in flags


class TestTraces:
    def test_round_trip_structural_equality(self, tmp_path):
        path = tmp_path / "traces.jsonl"
        originals = [trace(i) for i in range(3)]
        store.save_traces(path, originals)
        loaded, diags = store.load_traces(path)
        assert diags == []
        assert loaded == originals

    def test_unknown_fields_preserved(self, tmp_path):
        path = tmp_path / "traces.jsonl"
        store.save_traces(path, [trace(0)])
        raw = json.loads(path.read_text())
        assert raw["custom_field"] == {"kept": True}
        loaded, _ = store.load_traces(path)
        assert loaded[0].extras["custom_field"] == {"kept": True}

    def test_save_load_save_byte_stable(self, tmp_path):
        p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        store.save_traces(p1, [trace(0)])
        loaded, _ = store.load_traces(p1)
        store.save_traces(p2, loaded)
        assert p1.read_bytes() == p2.read_bytes()

    def test_empty_round_trip(self, tmp_path):
        path = tmp_path / "empty.jsonl"
        store.save_traces(path, [])
        assert path.read_text() == ""
        loaded, diags = store.load_traces(path)
        assert loaded == [] and diags == []

    def test_corrupt_line_isolated(self, tmp_path):
        path = tmp_path / "traces.jsonl"
        store.save_traces(path, [trace(0), trace(1), trace(2)])
        lines = path.read_text().splitlines()
        lines[1] = '{"schema": "visreason-trace/1", "id": "broken"}'
        path.write_text("\n".join(lines) + "\n")
        loaded, diags = store.load_traces(path)
        assert len(loaded) == 2 and len(diags) == 1

    def test_out_of_frame_roi_survives_load_for_repair(self, tmp_path):
        from zoomcot.trace_gen import consistency_fix

        t = trace(0)
        path = tmp_path / "traces.jsonl"
        store.save_traces(path, [t])
        raw = json.loads(path.read_text())
        raw["rounds"][0]["roi"] = [-10, -5, 120, 80]  # outside the 96x64 frame
        path.write_text(store.canonical_json(raw) + "\n")
        loaded, diags = store.load_traces(path)
        assert diags == []
        assert not loaded[0].rounds[0].roi.in_frame
        fixed = consistency_fix(loaded[0])
        assert fixed.rounds[0].roi.in_frame
        assert any("clipped" in r for r in fixed.repairs)

    def test_out_of_frame_gt_rejected_at_load(self, tmp_path):
        path = tmp_path / "samples.jsonl"
        record = store.sample_to_json(sample(0))
        record["gt_box"] = [90, 60, 120, 80]
        path.write_text(store.canonical_json(record) + "\n")
        loaded, diags = store.load_samples(path)
        assert loaded == [] and "outside" in diags[0]

    def test_scene_embedded(self, tmp_path):
        t = trace(0)
        t.scene = [SceneObject(1, "cup", BoxPx(2, 2, 10, 10, 96, 64), 0.4, 1)]
        path = tmp_path / "traces.jsonl"
        store.save_traces(path, [t])
        loaded, _ = store.load_traces(path)
        assert loaded[0].scene == t.scene


class TestEpisodes:
    def test_round_trip(self, tmp_path, checker_image):
        model = ScriptedTurnModel(
            [
                '<think>zoom</think><tool_call>{"name":"image_zoom_in_tool",'
                '"arguments":{"bbox_2d":[0.25,0.25,0.75,0.75]}}</tool_call>',
                "<think>ok</think><answer>blue</answer>",
            ]
        )
        episode = run_episode("e0", checker_image(128, 96), "q", model)
        path = tmp_path / "episodes.jsonl"
        store.save_episodes(path, [episode])
        loaded, diags = store.load_episodes(path)
        assert diags == []
        assert store.canonical_json(store.episode_to_json(loaded[0])) == store.canonical_json(
            store.episode_to_json(episode)
        )
        again = tmp_path / "episodes2.jsonl"
        store.save_episodes(again, loaded)
        assert again.read_bytes() == path.read_bytes()


class TestDepthRaster:
    def test_round_trip(self, tmp_path):
        values = np.linspace(0, 1, 4, dtype=np.float32).reshape(2, 2)
        raster = DepthRaster(2, 2, values)
        path = tmp_path / "d.dpr"
        store.write_depth_raster(path, raster)
        loaded, clamped = store.load_depth_raster(path)
        assert clamped == 0
        assert loaded.width == 2 and loaded.height == 2
        assert np.array_equal(loaded.values, values)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.dpr"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(store.StoreError):
            store.load_depth_raster(path)

    def test_truncated_payload(self, tmp_path):
        values = np.zeros((4, 4), dtype=np.float32)
        path = tmp_path / "t.dpr"
        store.write_depth_raster(path, DepthRaster(4, 4, values))
        data = path.read_bytes()
        path.write_bytes(data[:-8])
        with pytest.raises(store.StoreError):
            store.load_depth_raster(path)

    def test_out_of_range_clamped_and_counted(self, tmp_path):
        import struct

        w, h = 2, 1
        payload = store.DEPTH_MAGIC + struct.pack("<II", w, h)
        payload += struct.pack("<2f", -0.1, 1.2)
        path = tmp_path / "c.dpr"
        path.write_bytes(payload)
        raster, clamped = store.load_depth_raster(path)
        assert clamped == 2
        assert raster.values.min() >= 0.0 and raster.values.max() <= 1.0


class TestMasks:
    def test_round_trip(self, tmp_path):
        mask = InstanceMask.from_bool(3, "cat", np.eye(5, dtype=bool))
        path = tmp_path / "m.json"
        store.save_masks(path, [mask])
        loaded, diags = store.load_masks(path, 5, 5)
        assert diags == []
        assert loaded == [mask]

    def test_out_of_bounds_skipped(self, tmp_path):
        path = tmp_path / "m.json"
        path.write_text(json.dumps([{"object_id": 1, "category": "x", "rle": [24, 5]}]))
        loaded, diags = store.load_masks(path, 5, 5)
        assert loaded == [] and len(diags) == 1


class TestManifest:
    def test_build_and_verify(self, tmp_path):
        f = tmp_path / "data.bin"
        f.write_bytes(b"payload")
        manifest = store.build_manifest({"fixture": 1}, {"blobs": [f]})
        assert store.verify_manifest(manifest) == []
        f.write_bytes(b"tampered")
        problems = store.verify_manifest(manifest)
        assert problems and "hash mismatch" in problems[0]

    def test_absent_files_marked(self, tmp_path):
        manifest = store.build_manifest({}, {"blobs": [tmp_path / "missing.bin"]})
        assert manifest["files"]["blobs"][0]["absent"] is True
        assert store.verify_manifest(manifest) == []


class TestConfig:
    def test_defaults_match_documented_values(self):
        config = store.Config()
        assert config.min_pixels == 12_544
        assert config.max_pixels == 262_144
        assert config.r_max_2d == 3 and config.r_max_3d == 4
        assert config.area_ratio_n == 2.0 and config.tau_large == 0.30

    def test_parse_and_comments(self):
        text = """
        # endpoint
        endpoint_base_url = https://api.example.test/v1
        endpoint_model = some-model
        r_max_2d = 2          # fewer rounds
        tau_large = 0.4
        """
        config = store.parse_config(text)
        assert config.endpoint_base_url == "https://api.example.test/v1"
        assert config.r_max_2d == 2
        assert config.tau_large == pytest.approx(0.4)

    def test_unknown_key_rejected(self):
        with pytest.raises(store.StoreError):
            store.parse_config("mystery = 1")

    def test_out_of_range_rejected(self):
        with pytest.raises(store.StoreError):
            store.parse_config("tau_large = 1.5")


def write_image(path, w=96, h=64):
    rng = np.random.default_rng(7)
    arr = rng.integers(0, 255, size=(h, w, 3), dtype=np.uint8)
    Image.fromarray(arr).save(path)


class TestCli:
    def test_no_args_usage_error(self, capsys):
        assert cli_dispatch([]) == 2
        assert "usage" in capsys.readouterr().err

    def test_unknown_subcommand(self):
        assert cli_dispatch(["frobnicate"]) == 2

    def test_help_exits_zero(self):
        assert cli_dispatch(["--help"]) == 0

    def test_stats_on_fixture(self, tmp_path, capsys):
        path = tmp_path / "traces.jsonl"
        store.save_traces(path, [trace(0), trace(1)])
        assert cli_dispatch(["stats", "--traces", str(path)]) == 0
        report = json.loads(capsys.readouterr().out)
        assert report["sample_count"] == 2
        assert report["round_histogram"]["2"] == 2

    def test_stats_missing_file_operational_error(self, tmp_path):
        assert cli_dispatch(["stats", "--traces", str(tmp_path / "nope.jsonl")]) == 1

    def test_ingest_normalizes(self, tmp_path, capsys):
        images = tmp_path / "images"
        images.mkdir()
        write_image(images / "a.png")
        raw = tmp_path / "raw.jsonl"
        raw.write_text(
            json.dumps(
                {
                    "id": "a",
                    "image": "a.png",
                    "question": "q",
                    "short_answer": "x",
                    "bbox": [10, 10, 30, 40],
                    "bbox_format": "xywh",
                    "source": "demo",
                }
            )
            + "\n"
        )
        out = tmp_path / "samples.jsonl"
        code = cli_dispatch(
            ["ingest", "--input", str(raw), "--images-root", str(images), "--out", str(out)]
        )
        assert code == 0
        samples, _ = store.load_samples(out)
        assert samples[0].gt_box.as_list() == [10, 10, 40, 50]
        assert samples[0].box_convention_src == "xywh"

    def test_eval_roi_from_traces(self, tmp_path, capsys):
        path = tmp_path / "traces.jsonl"
        store.save_traces(path, [trace(0)])
        assert cli_dispatch(["eval-roi", "--traces", str(path)]) == 0
        report = json.loads(capsys.readouterr().out)
        assert report["n"] == 1
        assert "IoU@0.5" in report["accuracy"]

    def test_parse_ground_filter_mode(self, tmp_path, capsys):
        code = cli_dispatch(
            ["parse-ground", "--text", "car: ([0.1, 0.2, 0.4, 0.6], near)"]
        )
        assert code == 0
        entries = json.loads(capsys.readouterr().out)
        assert entries == {"car": {"bbox_ratio": [0.1, 0.2, 0.4, 0.6], "depth01": 0.2}}

    def test_parse_ground_pixel_frame(self, tmp_path, capsys):
        src = tmp_path / "think.txt"
        src.write_text("door: ([320, 120, 480, 360], far)")
        code = cli_dispatch(
            ["parse-ground", "--input", str(src), "--frame", "640", "480"]
        )
        assert code == 0
        entries = json.loads(capsys.readouterr().out)
        assert entries["door"]["depth01"] == 0.8
        assert entries["door"]["bbox_ratio"] == [0.5, 0.25, 0.75, 0.75]

    def test_judge_offline(self, tmp_path, capsys):
        raw = tmp_path / "judge.jsonl"
        raw.write_text(
            "\n".join(
                [
                    json.dumps({"id": "a", "judge_output": "score: 0.85"}),
                    json.dumps({"id": "b", "judge_output": "score: 1.00"}),
                    json.dumps({"id": "c", "judge_output": "no score here"}),
                ]
            )
            + "\n"
        )
        out = tmp_path / "scores.jsonl"
        assert cli_dispatch(["judge", "--raw", str(raw), "--out", str(out)]) == 0
        report = json.loads(capsys.readouterr().out)
        assert report["scored"] == 2 and report["failed"] == 1
        assert report["mean"] == pytest.approx((0.85 + 1.0) / 2)
