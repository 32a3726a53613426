"""Metric arithmetic against hand-computed fixtures."""

import pytest

from zoomcot.geometry import BoxPx, BoxRatio, iou
from zoomcot.grounding_parser import GroundingEntry
from zoomcot.metrics import (
    JudgeParseError,
    dataset_stats,
    depth_abs_err,
    grounding_metrics,
    macro_average,
    match_groundings,
    normalize_answer,
    parse_judge_score,
    render_grounding_table,
    render_roi_table,
    roi_accuracy,
)
from zoomcot.trace_gen import CoTRound, TraceRecord


def box(x1, y1, x2, y2, w=100, h=100):
    return BoxPx(x1, y1, x2, y2, w, h)


def boxes_with_iou(target: float):
    """A (pred, gt) pair whose IoU equals target exactly.

    pred sits inside gt sharing its corner and height, so the union is gt
    and IoU = pred_width / gt_width = target for multiple-of-0.02 targets.
    """
    gt = box(0, 0, 50, 20)
    pred = box(0, 0, round(50 * target), 20)
    return pred, gt


class TestRoiAccuracy:
    def test_perfect_predictions(self):
        pairs = [(box(1, 1, 9, 9), box(1, 1, 9, 9)) for _ in range(4)]
        report = roi_accuracy(pairs)
        assert report.accuracy[0.5] == 1.0
        assert report.accuracy[0.75] == 1.0

    def test_all_missing(self):
        pairs = [(None, box(1, 1, 9, 9)) for _ in range(3)]
        report = roi_accuracy(pairs)
        assert report.per_sample_iou == [0.0, 0.0, 0.0]
        assert report.accuracy[0.5] == 0.0

    def test_hand_computed_thresholds(self):
        # IoUs {0.6, 0.8, 0.2}: acc@0.5 = 2/3, acc@0.75 = 1/3
        pairs = [boxes_with_iou(0.6), boxes_with_iou(0.8), boxes_with_iou(0.2)]
        report = roi_accuracy(pairs)
        assert report.per_sample_iou == pytest.approx([0.6, 0.8, 0.2])
        assert report.accuracy[0.5] == pytest.approx(2 / 3)
        assert report.accuracy[0.75] == pytest.approx(1 / 3)

    def test_strict_threshold_tie_does_not_count(self):
        pairs = [boxes_with_iou(0.5)]
        report = roi_accuracy(pairs)
        assert report.per_sample_iou == pytest.approx([0.5])
        assert report.accuracy[0.5] == 0.0

    def test_monotone_in_threshold(self):
        pairs = [boxes_with_iou(v) for v in (0.2, 0.4, 0.6, 0.8)]
        report = roi_accuracy(pairs, thresholds=(0.25, 0.5, 0.75))
        assert report.accuracy[0.25] >= report.accuracy[0.5] >= report.accuracy[0.75]


class TestMatchGroundings:
    def test_identical(self):
        entries = {"car": 1, "tree": 2}
        matched, missed = match_groundings(entries, entries)
        assert matched == {"car", "tree"} and missed == set()

    def test_disjoint(self):
        matched, missed = match_groundings({"a": 1}, {"b": 2})
        assert matched == set() and missed == {"b"}

    def test_partial(self):
        matched, missed = match_groundings({"car": 1, "dog": 2}, {"car": 3, "tree": 4})
        assert matched == {"car"} and missed == {"tree"}


def entry(x1, y1, x2, y2, depth=None):
    return GroundingEntry("e", BoxRatio(x1, y1, x2, y2), depth)


class TestGroundingMetrics:
    def test_everything_matched_perfectly(self):
        gt = {"car": entry(0.1, 0.1, 0.5, 0.5, 0.3)}
        report = grounding_metrics([(gt, gt)])
        assert report.grounded_ratio == 1.0
        assert report.mean_iou == 1.0
        assert report.mean_depth_err == 0.0

    def test_nothing_grounded(self):
        gt = {"car": entry(0.1, 0.1, 0.5, 0.5, 0.3)}
        report = grounding_metrics([({}, gt)])
        assert report.grounded_ratio == 0.0
        assert report.mean_iou is None
        assert report.mean_depth_err is None

    def test_two_sample_pooled_means(self):
        # sample 1: gt {car, tree}; pred matches car only, IoU 0.5, depth err 0.2
        pred_car = entry(0.0, 0.0, 0.5, 0.5, 0.4)
        gt_car = entry(0.25, 0.0, 0.75, 0.5, 0.6)  # IoU = 0.25/0.75 = 1/3
        # sample 2: gt {dog}; matched exactly, depth absent on one side
        gt2 = {"dog": entry(0.2, 0.2, 0.4, 0.4, 0.5)}
        pred2 = {"dog": entry(0.2, 0.2, 0.4, 0.4, None)}
        report = grounding_metrics(
            [({"car": pred_car}, {"car": gt_car, "tree": entry(0.6, 0.6, 0.9, 0.9)}), (pred2, gt2)]
        )
        assert report.total_gt == 3 and report.total_missed == 1 and report.total_matched == 2
        assert report.grounded_ratio == pytest.approx(1 - 1 / 3)
        assert report.mean_iou == pytest.approx((1 / 3 + 1.0) / 2)
        assert report.mean_depth_err == pytest.approx(abs(0.4 - 0.6))  # dog excluded

    def test_ratio_identity(self):
        gt = {"a": entry(0.1, 0.1, 0.2, 0.2), "b": entry(0.3, 0.3, 0.4, 0.4)}
        report = grounding_metrics([({"a": gt["a"]}, gt)])
        assert report.grounded_ratio + report.total_missed / report.total_gt == pytest.approx(1.0)

    def test_empty_gt_reports_absent(self):
        report = grounding_metrics([({"x": entry(0.1, 0.1, 0.2, 0.2)}, {})])
        assert report.grounded_ratio is None


class TestDepthAbsErr:
    def test_values(self):
        assert depth_abs_err(0.3, 0.3) == 0.0
        assert depth_abs_err(0.2, 0.8) == pytest.approx(0.6)
        assert depth_abs_err(None, 0.5) is None
        assert depth_abs_err(0.5, None) is None


class TestParseJudgeScore:
    def test_exact_format(self):
        assert parse_judge_score("score: 1.00").value == 1.0
        assert parse_judge_score("score: 0.85").value == 0.85

    def test_embedded_score_is_lenient(self):
        score = parse_judge_score("the score: 0.8 overall")
        assert score.value == pytest.approx(0.8)
        assert score.lenient

    def test_last_token_wins(self):
        assert parse_judge_score("score: 0.2\nscore: 0.9").value == pytest.approx(0.9)

    def test_out_of_range_clamped(self):
        score = parse_judge_score("score: 1.75")
        assert score.value == 1.0 and score.clamped

    def test_missing_token_raises(self):
        with pytest.raises(JudgeParseError):
            parse_judge_score("I think this is great")


class TestMacroAverage:
    def test_single_dataset(self):
        assert macro_average({"a": [0.2, 0.4]}) == pytest.approx(0.3)

    def test_count_invariance(self):
        small = [0.2] * 10
        large = [0.8] * 1000
        assert macro_average({"s": small, "l": large}) == pytest.approx(0.5)

    def test_mean_of_means(self):
        per_dataset = {"a": 0.91, "b": 0.52, "c": 0.70}
        assert macro_average(per_dataset) == pytest.approx((0.91 + 0.52 + 0.70) / 3)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            macro_average({})


def make_trace(trace_id, gt, rounds, w=100, h=100):
    return TraceRecord(
        id=trace_id,
        image=f"{trace_id}.png",
        question="q",
        short_answer="a",
        gt_box=gt,
        rounds=rounds,
    )


class TestDatasetStats:
    def test_all_single_round(self):
        traces = [
            make_trace(
                f"t{i}",
                box(0, 0, 10, 10),
                [CoTRound("d", box(0, 0, 20, 20), "word " * 4, 1)],
            )
            for i in range(5)
        ]
        report = dataset_stats(traces)
        assert report.round_histogram[1] == 5
        assert sum(report.round_histogram.values()) == 5
        assert report.mean_gt_area_fraction == pytest.approx(0.01)
        assert report.mean_roi_area_fraction == pytest.approx(0.04)

    def test_known_mixture(self):
        t1 = make_trace(
            "a",
            box(0, 0, 50, 50),
            [
                CoTRound("d", box(0, 0, 100, 100), "x" * 10, 1),
                CoTRound("d", box(0, 0, 60, 60), "x" * 30, 2),
            ],
        )
        t2 = make_trace(
            "b", box(0, 0, 20, 20), [CoTRound("d", box(0, 0, 30, 30), "x" * 20, 1)]
        )
        report = dataset_stats([t1, t2])
        assert report.round_histogram[1] == 1 and report.round_histogram[2] == 1
        assert report.mean_gt_area_fraction == pytest.approx((0.25 + 0.04) / 2)
        assert report.mean_roi_area_fraction == pytest.approx((0.36 + 0.09) / 2)
        assert report.mean_response_length[1] == pytest.approx(15.0)
        assert report.mean_response_length[2] == pytest.approx(30.0)

    def test_empty_rationale_counts_as_zero(self):
        t = make_trace("c", box(0, 0, 10, 10), [CoTRound("d", box(0, 0, 10, 10), "", 1)])
        report = dataset_stats([t])
        assert report.mean_response_length[1] == 0.0

    def test_token_unit(self):
        t = make_trace(
            "d", box(0, 0, 10, 10), [CoTRound("d", box(0, 0, 10, 10), "three short words", 1)]
        )
        report = dataset_stats([t], length_unit="tokens")
        assert report.mean_response_length[1] == 3.0


class TestTables:
    def test_roi_table_layout(self):
        reports = {
            "base": roi_accuracy([boxes_with_iou(0.6)]),
            "ours": roi_accuracy([boxes_with_iou(0.8)]),
        }
        table = render_roi_table(reports)
        lines = table.splitlines()
        assert lines[0].split("|")[0].strip() == "Accuracy"
        assert "base" in lines[0] and "ours" in lines[0]
        assert lines[2].startswith("IoU@0.5")
        assert lines[3].startswith("IoU@0.75")

    def test_grounding_table_layout(self):
        gt = {"car": entry(0.1, 0.1, 0.5, 0.5, 0.3)}
        reports = {"ours": grounding_metrics([(gt, gt)])}
        lines = render_grounding_table(reports).splitlines()
        assert lines[2].startswith("Grounded Ratio")
        assert lines[3].startswith("BBox (IoU)")
        assert lines[4].startswith("Depth (Abs Diff)")

    def test_iou_single_code_path(self):
        a, gt = boxes_with_iou(0.6)
        report = roi_accuracy([(a, gt)])
        assert abs(report.per_sample_iou[0] - iou(a, gt).value) < 1e-9


class TestNormalizeAnswer:
    def test_folding(self):
        assert normalize_answer("  The CAT. ") == "the cat"
        assert normalize_answer("Seven") == normalize_answer("seven")
