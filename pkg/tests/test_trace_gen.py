"""Refinement loop behavior under scripted generators: termination, the
large-object skip, coverage, distillation, augmentation, and repair."""

from dataclasses import dataclass

import pytest

from zoomcot.generator_client import ScriptedOracle, TripletResponse
from zoomcot.geometry import BoxPx, BoxRatio, area, px_to_ratio
from zoomcot.grounding_parser import GroundingEntry, parse_groundings
from zoomcot.scene3d import SceneObject, rank_objects
from zoomcot.trace_gen import (
    ConsistencyError,
    CoTRound,
    DistillError,
    GenPolicy,
    TraceError,
    TraceRecord,
    augment_grounding,
    consistency_fix,
    distill_single_round,
    generate_trace_2d,
    generate_trace_3d,
    mentions_intermediate_crops,
    replace_trace,
    scene_grounding_entries,
)


@dataclass
class Sample:
    id: str
    question: str
    short_answer: str
    gt_box: BoxPx
    long_answer: str | None = None
    image_path: str = "img.png"


def triplet(box: BoxRatio, tag=""):
    return TripletResponse(f"scene {tag}", box, f"reason {tag}")


def covers(outer: BoxPx, inner: BoxPx) -> bool:
    return (
        outer.x1 <= inner.x1
        and outer.y1 <= inner.y1
        and outer.x2 >= inner.x2
        and outer.y2 >= inner.y2
    )


class TestGenerateTrace2d:
    def test_oracle_proposing_gt_terminates_first_round(self, checker_image):
        image = checker_image(96, 64)
        gt = BoxPx(12, 16, 24, 32, 96, 64)  # dyadic: exact ratio round trip
        oracle = ScriptedOracle([triplet(px_to_ratio(gt))])
        sample = Sample("s1", "what?", "that", gt)
        trace = generate_trace_2d(sample, image, GenPolicy(), oracle)
        assert len(trace.rounds) == 1
        assert trace.rounds[0].roi == gt
        assert trace.final_justification

    def test_large_object_skips_iteration(self, checker_image):
        image = checker_image(100, 100)
        gt = BoxPx(10, 10, 80, 70, 100, 100)  # 42% of the frame
        oracle = ScriptedOracle([triplet(BoxRatio(0.0, 0.0, 1.0, 1.0))])
        trace = generate_trace_2d(
            Sample("s2", "q", "a", gt), image, GenPolicy(tau_large=0.30), oracle
        )
        assert len(trace.rounds) == 1
        assert "large_object_skip" in trace.flags
        assert covers(trace.rounds[0].roi, gt)

    def test_converging_oracle_terminates_with_coverage(self, checker_image):
        image = checker_image(96, 64)
        gt = BoxPx(40, 28, 48, 34, 96, 64)  # about 1% of the frame
        script = [
            triplet(BoxRatio(0.25, 0.25, 0.75, 0.75), "r1"),
            triplet(BoxRatio(0.25, 0.25, 0.75, 0.75), "r2"),
            triplet(px_to_ratio(gt), "r3"),
        ]
        # later-round boxes are local ratios; proposing gt's exact local box
        # each time shrinks toward it
        oracle = ScriptedOracle(script)
        trace = generate_trace_2d(Sample("s3", "q", "a", gt), image, GenPolicy(), oracle)
        assert 1 <= len(trace.rounds) <= 3
        for r in trace.rounds:
            assert covers(r.roi, gt)
        final = trace.rounds[-1].roi
        assert area(final) <= 2 * area(gt) or len(trace.rounds) == 3

    def test_stubborn_oracle_exhausts_budget(self, checker_image):
        image = checker_image(96, 64)
        gt = BoxPx(40, 28, 44, 32, 96, 64)
        oracle = ScriptedOracle([triplet(BoxRatio(0.0, 0.0, 1.0, 1.0))])
        trace = generate_trace_2d(Sample("s4", "q", "a", gt), image, GenPolicy(), oracle)
        assert len(trace.rounds) == 3
        assert "round_budget_exhausted" in trace.flags
        assert all(covers(r.roi, gt) for r in trace.rounds)

    def test_unparseable_round_one_raises(self, checker_image):
        image = checker_image()
        oracle = ScriptedOracle(["not a triplet at all"])
        with pytest.raises(TraceError):
            generate_trace_2d(
                Sample("s5", "q", "a", BoxPx(1, 1, 5, 5, 96, 64)),
                image,
                GenPolicy(),
                oracle,
            )

    def test_failed_later_round_dropped_and_flagged(self, checker_image):
        image = checker_image(96, 64)
        gt = BoxPx(40, 28, 44, 32, 96, 64)
        script = [
            triplet(BoxRatio(0.2, 0.2, 0.9, 0.9), "ok"),
            "garbage", "garbage", "garbage",  # exhausts the 3 parse attempts
            triplet(px_to_ratio(gt), "recovered"),
        ]
        oracle = ScriptedOracle(script)
        trace = generate_trace_2d(Sample("s6", "q", "a", gt), image, GenPolicy(), oracle)
        assert "round_2_dropped" in trace.flags
        assert all(covers(r.roi, gt) for r in trace.rounds)


class TestGenerateTrace3d:
    def scene_for(self, frame_w, frame_h):
        objs = [
            SceneObject(1, "cup", BoxPx(5, 5, 20, 20, frame_w, frame_h), 0.2),
            SceneObject(2, "plate", BoxPx(30, 20, 60, 45, frame_w, frame_h), 0.5),
            SceneObject(3, "window", BoxPx(70, 5, 95, 60, frame_w, frame_h), 0.9),
        ]
        return rank_objects(objs)

    def test_default_round_budget_is_four(self):
        assert GenPolicy.depth_aware().r_max == 4

    def test_budget_exhaustion_flagged_with_coverage(self, checker_image):
        image = checker_image(96, 64)
        gt = BoxPx(40, 28, 44, 32, 96, 64)
        oracle = ScriptedOracle([triplet(BoxRatio(0.0, 0.0, 1.0, 1.0))])
        trace = generate_trace_3d(
            Sample("p1", "q", "a", gt),
            image,
            self.scene_for(96, 64),
            GenPolicy.depth_aware(),
            oracle,
        )
        assert len(trace.rounds) == 4
        assert "round_budget_exhausted" in trace.flags
        assert all(covers(r.roi, gt) for r in trace.rounds)
        assert trace.scene is not None

    def test_fresh_qa_from_generator(self, checker_image):
        from zoomcot.generator_client import QAResponse

        image = checker_image(96, 64)
        qa = QAResponse(
            "What sits in front of the plate?",
            "cup",
            "The cup is in front of the plate.",
            BoxRatio(0.05, 0.07, 0.21, 0.32),
        )
        oracle = ScriptedOracle([triplet(BoxRatio(0.0, 0.0, 0.5, 0.5))], qa=qa)
        trace = generate_trace_3d(
            Sample("p2", "", "", None),
            image,
            self.scene_for(96, 64),
            GenPolicy.depth_aware(),
            oracle,
            qa_gen=oracle,
        )
        assert trace.question == qa.question
        assert trace.short_answer == "cup"
        assert covers(trace.rounds[-1].roi, trace.gt_box)

    def test_empty_scene_context_logged(self, checker_image):
        image = checker_image(96, 64)
        gt = BoxPx(40, 28, 44, 32, 96, 64)
        oracle = ScriptedOracle([triplet(BoxRatio(0.0, 0.0, 1.0, 1.0))])
        trace = generate_trace_3d(
            Sample("p3", "q", "a", gt), image, [], GenPolicy.depth_aware(), oracle
        )
        assert "empty_scene_context" in trace.flags


class TestDistill:
    def trace(self, rounds):
        return TraceRecord(
            id="t", image="i.png", question="q", short_answer="a",
            gt_box=BoxPx(10, 10, 20, 20, 96, 64), rounds=rounds,
        )

    def rounds(self, n):
        return [
            CoTRound(f"d{i}", BoxPx(10 - i, 10 - i, 20 + i, 20 + i, 96, 64), f"r{i}", i + 1)
            for i in reversed(range(n))
        ]

    def test_single_round_roi_identical(self):
        trace = self.trace(self.rounds(1))
        oracle = ScriptedOracle([triplet(BoxRatio(0, 0, 1, 1))], distill_text="short take")
        distilled = distill_single_round(trace, oracle)
        assert distilled.roi == trace.rounds[-1].roi
        assert distilled.round_index == 1

    def test_multi_round_roi_pinned_to_final(self):
        trace = self.trace(self.rounds(3))
        oracle = ScriptedOracle([triplet(BoxRatio(0, 0, 1, 1))])
        distilled = distill_single_round(trace, oracle)
        assert distilled.roi == trace.rounds[-1].roi

    def test_crop_mention_rejected_then_retried(self):
        trace = self.trace(self.rounds(2))

        class FlakyOracle(ScriptedOracle):
            def complete(self, request):
                if request.template_id == "distill":
                    self.calls.append("distill")
                    if len([c for c in self.calls if c == "distill"]) == 1:
                        return "After zooming into the crop, the target is visible."
                    return "The target is visible at the highlighted spot."
                return super().complete(request)

        oracle = FlakyOracle([triplet(BoxRatio(0, 0, 1, 1))])
        distilled = distill_single_round(trace, oracle)
        assert not mentions_intermediate_crops(distilled.rationale)

    def test_persistent_crop_mentions_fail(self):
        trace = self.trace(self.rounds(2))
        oracle = ScriptedOracle(
            [triplet(BoxRatio(0, 0, 1, 1))],
            distill_text="first we zoom, then we crop again",
        )
        with pytest.raises(DistillError):
            distill_single_round(trace, oracle)


class TestAugmentGrounding:
    def entries(self):
        return [
            GroundingEntry("car", BoxRatio(0.1, 0.2, 0.4, 0.6), 0.3),
            GroundingEntry("tree", BoxRatio(0.5, 0.1, 0.9, 0.8), 0.7),
            GroundingEntry("bird", BoxRatio(0.4, 0.0, 0.6, 0.2), None),
        ]

    def test_untouched_without_mentions(self):
        text = "Nothing related appears in this sentence."
        assert augment_grounding(text, self.entries()) == text

    def test_mentions_annotated_in_place(self):
        text = "the red car is behind the tree"
        out = augment_grounding(text, self.entries())
        scan = parse_groundings(out)
        assert set(scan.entries) == {"car", "tree"}
        assert scan.entries["car"].bbox_ratio.as_list() == [0.1, 0.2, 0.4, 0.6]
        assert scan.entries["car"].depth01 == pytest.approx(0.3)
        assert scan.entries["tree"].depth01 == pytest.approx(0.7)

    def test_only_insertions(self):
        text = "the red car is behind the tree"
        out = augment_grounding(text, self.entries())
        # removing the inserted annotations restores the original exactly
        import re

        stripped = re.sub(r" \(\[[^)]*\](?:, [^)]*)?\)", "", out)
        assert stripped == text

    def test_missing_depth_gives_box_only(self):
        out = augment_grounding("a bird flies", self.entries())
        scan = parse_groundings(out)
        assert scan.entries["bird"].depth01 is None
        assert "(" in out and "]," not in out.split("bird")[1].split(")")[0] + ")"

    def test_word_boundaries_respected(self):
        out = augment_grounding("the carpet is clean", self.entries())
        assert out == "the carpet is clean"

    def test_every_mention_annotated(self):
        out = augment_grounding("a car next to a car", self.entries())
        assert out.count("([0.1, 0.2, 0.4, 0.6], 0.3)") == 2

    def test_scene_entries_conversion(self):
        scene = [SceneObject(1, "Cup", BoxPx(0, 0, 48, 32, 96, 64), 0.25, 1)]
        entries = scene_grounding_entries(scene, 96, 64)
        assert entries[0].name == "cup"
        assert entries[0].bbox_ratio.as_list() == [0.0, 0.0, 0.5, 0.5]
        assert entries[0].depth01 == 0.25


class TestConsistencyFix:
    def record(self, rounds, gt=None):
        return TraceRecord(
            id="c", image="i.png", question="q", short_answer="a",
            gt_box=gt or BoxPx(30, 30, 40, 40, 100, 100), rounds=rounds,
        )

    def test_consistent_trace_unchanged(self):
        rounds = [
            CoTRound("d1", BoxPx(10, 10, 90, 90, 100, 100), "r1", 1),
            CoTRound("d2", BoxPx(20, 20, 60, 60, 100, 100), "r2", 2),
        ]
        fixed = consistency_fix(self.record(rounds))
        assert [r.roi for r in fixed.rounds] == [r.roi for r in rounds]
        assert fixed.repairs == []

    def test_escaping_round_intersected_then_unioned(self):
        rounds = [
            CoTRound("d1", BoxPx(20, 20, 60, 60, 100, 100), "r1", 1),
            CoTRound("d2", BoxPx(50, 50, 95, 95, 100, 100), "r2", 2),  # escapes r1
        ]
        fixed = consistency_fix(self.record(rounds))
        r2 = fixed.rounds[1].roi
        prev = fixed.rounds[0].roi
        gt = BoxPx(30, 30, 40, 40, 100, 100)
        assert r2.x1 >= prev.x1 and r2.y1 >= prev.y1
        assert r2.x2 <= prev.x2 and r2.y2 <= prev.y2
        assert r2.x1 <= gt.x1 and r2.x2 >= gt.x2
        assert fixed.repairs

    def test_out_of_frame_round_clipped_and_logged(self):
        rounds = [CoTRound("d1", BoxPx(-20, -10, 150, 120, 100, 100), "r1", 1)]
        fixed = consistency_fix(self.record(rounds))
        assert fixed.rounds[0].roi.in_frame
        assert any("clipped" in r for r in fixed.repairs)

    def test_monotone_shrinkage_enforced(self):
        rounds = [
            CoTRound("d1", BoxPx(10, 10, 70, 70, 100, 100), "r1", 1),
            CoTRound("d2", BoxPx(5, 5, 95, 95, 100, 100), "r2", 2),
            CoTRound("d3", BoxPx(25, 25, 99, 99, 100, 100), "r3", 3),
        ]
        fixed = consistency_fix(self.record(rounds))
        for earlier, later in zip(fixed.rounds, fixed.rounds[1:]):
            assert covers(earlier.roi, later.roi)

    def test_distilled_repinned(self):
        rounds = [
            CoTRound("d1", BoxPx(10, 10, 70, 70, 100, 100), "r1", 1),
            CoTRound("d2", BoxPx(5, 5, 95, 95, 100, 100), "r2", 2),
        ]
        record = self.record(rounds)
        record.distilled = CoTRound("d", rounds[1].roi, "r", 1)
        fixed = consistency_fix(record)
        assert fixed.distilled.roi == fixed.rounds[-1].roi

    def test_gt_outside_frame_unrepairable(self):
        gt = BoxPx(90, 90, 120, 120, 100, 100)
        record = self.record([CoTRound("d", BoxPx(0, 0, 50, 50, 100, 100), "r", 1)], gt=gt)
        with pytest.raises(ConsistencyError):
            consistency_fix(record)

    def test_replace_trace_copies_collections(self):
        record = self.record([CoTRound("d", BoxPx(0, 0, 50, 50, 100, 100), "r", 1)])
        clone = replace_trace(record)
        clone.flags.append("x")
        assert record.flags == []
