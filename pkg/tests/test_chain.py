from __future__ import annotations

import json

import pytest

from conftest import make_message, message_json
from oracles import oracle_best_matching_min_iou, rasterize
from tamperscope.backends import BackendError
from tamperscope.chain import (
    ChainConfig,
    ChainError,
    ForensicResult,
    finalize,
    has_stabilized,
    init_step,
    run_chain,
    update_step,
)
from tamperscope.messages import BoundingBox, serialize_reasoning_message
from tamperscope.rulebase import RelevanceThreshold
from tamperscope.stubs import scripted_backend_set
from tamperscope.trace import Trace


def _box_entry(box, conf=0.8, note="suspect"):
    return {"box": list(box), "confidence": conf, "note": note}


def _config(**kwargs) -> ChainConfig:
    kwargs.setdefault("crop_margin", 0.0)
    return ChainConfig(**kwargs)


def _run(query, image, rule_set, config, backends, trace=None):
    return run_chain(
        query, image, rule_set, config, backends, trace=trace or Trace.deterministic()
    )


# ---------------------------------------------------------------------------
# init_step
# ---------------------------------------------------------------------------

class TestInitStep:
    def test_two_box_message_yields_matching_crops(self, gradient_image, rule_set):
        backends = scripted_backend_set(
            [message_json(boxes=[_box_entry((5, 5, 25, 20)), _box_entry((30, 10, 50, 40))])]
        )
        state = init_step(
            "q", gradient_image, list(rule_set.rules[:5]), _config(), backends,
            trace=Trace.deterministic(),
        )
        assert state.step == 0
        assert len(state.views[0]) == 2
        assert state.views[0][0].dims == (20, 15)
        assert state.views[0][1].dims == (20, 30)

    def test_crops_padded_with_context_margin(self, gradient_image, rule_set):
        backends = scripted_backend_set([message_json(boxes=[_box_entry((10, 10, 30, 30))])])
        state = init_step(
            "q", gradient_image, list(rule_set.rules[:5]),
            ChainConfig(crop_margin=0.1), backends, trace=Trace.deterministic(),
        )
        # 20x20 box padded by 2 per side.
        assert state.views[0][0].dims == (24, 24)

    def test_authentic_zero_boxes_flags_early_finalize(self, gradient_image, rule_set):
        backends = scripted_backend_set([message_json(boxes=[], label="authentic")])
        state = init_step(
            "q", gradient_image, list(rule_set.rules[:5]), _config(), backends,
            trace=Trace.deterministic(),
        )
        assert state.finalize_early
        assert state.views[0] == []

    def test_twelve_boxes_capped_to_eight_highest_confidence(self, gradient_image, rule_set):
        boxes = [_box_entry((i, 0, i + 4, 4), conf=round(0.2 + i * 0.05, 2)) for i in range(12)]
        backends = scripted_backend_set([message_json(boxes=boxes)])
        state = init_step(
            "q", gradient_image, list(rule_set.rules[:5]),
            _config(max_boxes_stage1=8), backends, trace=Trace.deterministic(),
        )
        assert len(state.views[0]) == 8
        kept_confs = [h.confidence for h in state.last_message.boxes]
        assert min(kept_confs) == pytest.approx(0.4)

    def test_parse_failure_carries_raw_text(self, gradient_image, rule_set):
        backends = scripted_backend_set(["no json here at all"])
        with pytest.raises(ChainError) as err:
            init_step(
                "q", gradient_image, list(rule_set.rules[:5]), _config(), backends,
                trace=Trace.deterministic(),
            )
        assert err.value.raw_text == "no json here at all"
        assert err.value.stage == "init"

    def test_empty_rule_list_rejected(self, gradient_image):
        backends = scripted_backend_set([])
        with pytest.raises(ValueError):
            init_step("q", gradient_image, [], _config(), backends)


# ---------------------------------------------------------------------------
# update_step
# ---------------------------------------------------------------------------

class TestUpdateStep:
    def test_narrowing_two_boxes_to_one(self, gradient_image, rule_set):
        backends = scripted_backend_set(
            [
                message_json(boxes=[_box_entry((5, 5, 25, 20)), _box_entry((30, 10, 50, 40))]),
                message_json(boxes=[_box_entry((6, 6, 24, 19))]),
            ]
        )
        config = _config()
        state = init_step(
            "q", gradient_image, list(rule_set.rules[:5]), config, backends,
            trace=Trace.deterministic(),
        )
        update_step(state, config, backends)
        assert len(state.messages) == 2
        assert len(state.views) == 2
        assert len(state.views[1]) == 1
        assert state.messages[1].step == 1

    def test_backend_timeout_propagates_as_chain_error(self, gradient_image, rule_set):
        backends = scripted_backend_set(
            [
                message_json(boxes=[_box_entry((5, 5, 25, 20))]),
                BackendError("timeout", "no reply after retries"),
            ]
        )
        config = _config()
        state = init_step(
            "q", gradient_image, list(rule_set.rules[:5]), config, backends,
            trace=Trace.deterministic(),
        )
        with pytest.raises(ChainError) as err:
            update_step(state, config, backends)
        assert err.value.backend_kind in ("timeout", "transport")

    def test_step_budget_enforced(self, gradient_image, rule_set):
        backends = scripted_backend_set(
            [
                message_json(boxes=[_box_entry((5, 5, 25, 20))]),
                message_json(boxes=[_box_entry((5, 5, 25, 20))]),
            ]
        )
        config = _config(n=1)
        state = init_step(
            "q", gradient_image, list(rule_set.rules[:5]), config, backends,
            trace=Trace.deterministic(),
        )
        update_step(state, config, backends)
        with pytest.raises(ValueError):
            update_step(state, config, backends)


# ---------------------------------------------------------------------------
# has_stabilized
# ---------------------------------------------------------------------------

class TestHasStabilized:
    def test_identical_lists_true_for_any_tau(self):
        msg = make_message(boxes=[(0, 0, 10, 10), (20, 20, 40, 40)])
        assert has_stabilized(msg, msg, tau=1.0)
        assert has_stabilized(msg, msg, tau=0.5)

    def test_disjoint_boxes_false(self):
        a = make_message(boxes=[(0, 0, 10, 10)])
        b = make_message(boxes=[(50, 30, 60, 40)])
        assert not has_stabilized(a, b, tau=0.01)

    def test_count_mismatch_false(self):
        a = make_message(boxes=[(0, 0, 10, 10), (20, 20, 30, 30)])
        b = make_message(boxes=[(0, 0, 10, 10)])
        assert not has_stabilized(a, b, tau=0.5)

    def test_two_vs_two_mixed_ious_fails_at_tau_09(self):
        # Pair IoUs are exactly {0.95, 0.7}; cross IoUs are 0.
        prev = make_message(boxes=[(0, 0, 20, 1), (0, 20, 10, 21)])
        curr = make_message(boxes=[(0, 0, 19, 1), (0, 20, 7, 21)])
        assert not has_stabilized(prev, curr, tau=0.9)
        best = oracle_best_matching_min_iou(
            [h.box.as_tuple() for h in prev.boxes],
            [h.box.as_tuple() for h in curr.boxes],
        )
        assert best == pytest.approx(0.7)
        assert has_stabilized(prev, curr, tau=0.7)

    def test_empty_side_rejected(self):
        a = make_message(boxes=[(0, 0, 10, 10)])
        empty = make_message(boxes=[])
        with pytest.raises(ValueError):
            has_stabilized(a, empty, tau=0.9)

    def test_greedy_true_implies_matching_exists(self, rng):
        for _ in range(100):
            n = int(rng.integers(1, 4))
            def rand_boxes():
                out = []
                for _ in range(n):
                    x1 = int(rng.integers(0, 20))
                    y1 = int(rng.integers(0, 20))
                    out.append((x1, y1, x1 + int(rng.integers(1, 8)), y1 + int(rng.integers(1, 8))))
                return out
            prev = make_message(boxes=rand_boxes())
            curr = make_message(boxes=rand_boxes())
            tau = float(rng.uniform(0.05, 0.95))
            if has_stabilized(prev, curr, tau):
                best = oracle_best_matching_min_iou(
                    [h.box.as_tuple() for h in prev.boxes],
                    [h.box.as_tuple() for h in curr.boxes],
                )
                assert best >= tau


# ---------------------------------------------------------------------------
# finalize
# ---------------------------------------------------------------------------

class TestFinalize:
    def _state(self, gradient_image, rule_set, backends, config):
        return init_step(
            "q", gradient_image, list(rule_set.rules[:5]), config, backends,
            trace=Trace.deterministic(),
        )

    def test_authentic_no_mask(self, gradient_image, rule_set):
        backends = scripted_backend_set([message_json(boxes=[], label="authentic")])
        config = _config()
        state = self._state(gradient_image, rule_set, backends, config)
        result = finalize(state, config, backends)
        assert result.label == "authentic"
        assert result.mask is None
        assert result.final_boxes == []

    def test_tampered_single_box_rectangle_area(self, gradient_image, rule_set):
        backends = scripted_backend_set(
            [message_json(boxes=[_box_entry((10, 5, 30, 25))], label="tampered")]
        )
        config = _config()
        state = self._state(gradient_image, rule_set, backends, config)
        result = finalize(state, config, backends)
        assert result.label == "tampered"
        assert result.mask.positive_count == 400  # 20 x 20 rectangle oracle

    def test_tampered_two_boxes_union_count(self, gradient_image, rule_set):
        boxes = [(0, 0, 10, 10), (5, 5, 15, 15)]
        backends = scripted_backend_set(
            [message_json(boxes=[_box_entry(b) for b in boxes], label="tampered")]
        )
        config = _config()
        state = self._state(gradient_image, rule_set, backends, config)
        result = finalize(state, config, backends)
        expected = len(rasterize(*boxes[0]) | rasterize(*boxes[1]))
        assert result.mask.positive_count == expected == 175

    def test_missing_label_triggers_one_consolidation_call(self, gradient_image, rule_set):
        backends = scripted_backend_set(
            [
                message_json(boxes=[_box_entry((10, 5, 30, 25))]),  # no label
                message_json(boxes=[_box_entry((10, 5, 30, 25))], label="tampered"),
            ]
        )
        config = _config()
        state = self._state(gradient_image, rule_set, backends, config)
        result = finalize(state, config, backends)
        assert result.label == "tampered"
        assert len(backends.chat.calls) == 2
        assert len(state.messages) == 2

    def test_missing_label_after_consolidation_is_error(self, gradient_image, rule_set):
        backends = scripted_backend_set(
            [
                message_json(boxes=[_box_entry((10, 5, 30, 25))]),
                message_json(boxes=[_box_entry((10, 5, 30, 25))]),  # still no label
            ]
        )
        config = _config()
        state = self._state(gradient_image, rule_set, backends, config)
        with pytest.raises(ChainError, match="label"):
            finalize(state, config, backends)

    def test_explanation_concatenates_step_analyses(self, gradient_image, rule_set):
        backends = scripted_backend_set(
            [
                message_json(boxes=[_box_entry((0, 0, 8, 8))], analysis="first pass"),
                message_json(
                    boxes=[_box_entry((0, 0, 8, 8))], analysis="final verdict", label="tampered"
                ),
            ]
        )
        config = _config(n=1)
        result = _run("q", gradient_image, rule_set, config, backends)
        assert "first pass" in result.explanation
        assert "final verdict" in result.explanation
        assert result.explanation.index("first pass") < result.explanation.index("final verdict")


# ---------------------------------------------------------------------------
# run_chain
# ---------------------------------------------------------------------------

class TestRunChain:
    def test_n2_nonstabilizing_produces_three_messages_one_segmentation(
        self, gradient_image, rule_set
    ):
        backends = scripted_backend_set(
            [
                message_json(boxes=[_box_entry((0, 0, 20, 20))]),
                message_json(boxes=[_box_entry((25, 0, 45, 20))]),
                message_json(boxes=[_box_entry((30, 20, 50, 40))], label="tampered"),
            ]
        )
        config = _config(n=2)
        trace = Trace.deterministic()
        result = _run("q", gradient_image, rule_set, config, backends, trace)
        steps = [e for e in trace.events if e.kind == "step"]
        assert [e.data["step"] for e in steps] == [0, 1, 2]
        assert backends.segment.call_count == 1
        assert len(backends.chat.calls) == 3  # init + 2 updates, no consolidation
        assert result.label == "tampered"

    def test_early_stop_on_repeated_boxes(self, gradient_image, rule_set):
        box = _box_entry((10, 10, 30, 30))
        backends = scripted_backend_set(
            [
                message_json(boxes=[_box_entry((0, 0, 20, 20)), _box_entry((30, 30, 50, 44))]),
                message_json(boxes=[box]),
                message_json(boxes=[box], label="tampered"),
                message_json(boxes=[box], label="tampered"),  # must never be consumed
                message_json(boxes=[box], label="tampered"),
            ]
        )
        config = _config(n=4)
        trace = Trace.deterministic()
        result = _run("q", gradient_image, rule_set, config, backends, trace)
        steps = [e for e in trace.events if e.kind == "step"]
        assert len(steps) == 3  # R0, R1, R2: early stop after the stabilized pair
        assert len(backends.chat.calls) == 3 < config.n + 1
        decisions = [e.data["what"] for e in trace.events if e.kind == "decision"]
        assert any("early stop" in d for d in decisions)
        assert result.label == "tampered"

    def test_authentic_short_circuit_mid_chain(self, gradient_image, rule_set):
        backends = scripted_backend_set(
            [
                message_json(boxes=[_box_entry((0, 0, 20, 20))]),
                message_json(boxes=[], label="authentic"),
            ]
        )
        config = _config(n=4)
        result = _run("q", gradient_image, rule_set, config, backends)
        assert result.label == "authentic"
        assert result.mask is None
        assert len(backends.chat.calls) == 2

    def test_n1_degenerate_pipeline(self, gradient_image, rule_set):
        backends = scripted_backend_set(
            [
                message_json(boxes=[_box_entry((0, 0, 20, 20))]),
                message_json(boxes=[_box_entry((2, 2, 18, 18))], label="tampered"),
            ]
        )
        config = _config(n=1)
        trace = Trace.deterministic()
        result = _run("q", gradient_image, rule_set, config, backends, trace)
        steps = [e for e in trace.events if e.kind == "step"]
        assert [e.data["step"] for e in steps] == [0, 1]
        assert backends.segment.call_count == 1
        assert result.mask.positive_count == 256

    def test_chat_budget_never_exceeds_n_plus_two(self, gradient_image, rule_set):
        backends = scripted_backend_set(
            [
                message_json(boxes=[_box_entry((0, 0, 20, 20))]),
                message_json(boxes=[_box_entry((25, 0, 45, 20))]),
                message_json(boxes=[_box_entry((30, 20, 50, 40))]),  # no label
                message_json(boxes=[_box_entry((30, 20, 50, 40))], label="tampered"),
            ]
        )
        config = _config(n=2)
        _run("q", gradient_image, rule_set, config, backends)
        assert len(backends.chat.calls) == config.n + 2  # incl. consolidation

    def test_deterministic_whole_result(self, gradient_image, rule_set):
        script = [
            message_json(boxes=[_box_entry((0, 0, 20, 20))]),
            message_json(boxes=[_box_entry((5, 5, 18, 18))]),
            message_json(boxes=[_box_entry((6, 6, 17, 17))], label="tampered"),
        ]
        outputs = []
        for _ in range(2):
            backends = scripted_backend_set(list(script))
            trace = Trace.deterministic()
            result = _run("q", gradient_image, rule_set, _config(n=2), backends, trace)
            outputs.append(
                (
                    json.dumps(result.to_dict(), sort_keys=True),
                    result.mask.bits.tobytes(),
                    trace.to_jsonl(),
                )
            )
        assert outputs[0] == outputs[1]

    def test_rule_filter_event_recorded(self, gradient_image, rule_set):
        backends = scripted_backend_set([message_json(boxes=[], label="authentic")])
        trace = Trace.deterministic()
        _run(
            "q", gradient_image, rule_set,
            _config(relevance_threshold=RelevanceThreshold(0.95)), backends, trace,
        )
        events = [e for e in trace.events if e.kind == "rule_filter"]
        assert len(events) == 1
        assert events[0].data["fallback"] is True  # nothing clears t=0.95 on hash stubs
        assert len(events[0].data["kept"]) == 5

    def test_result_invariant_enforced_by_type(self):
        with pytest.raises(ValueError):
            ForensicResult(
                label="tampered", mask=None, final_boxes=[BoundingBox(0, 0, 2, 2)],
                explanation="", trace=Trace.deterministic(),
            )
