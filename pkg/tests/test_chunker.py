import pytest

from conftest import MiB, SYNTHETIC_BINDINGS, synthetic_phase_template
from mosaic.chunker import (
    ChunkConfig,
    evaluate_peak,
    search_bottleneck,
    search_bruteforce,
)
from mosaic.workload import build_layer_template, toy_configs

TOY = toy_configs()["toy_gated"]


def test_chunk_config_validation():
    with pytest.raises(ValueError):
        ChunkConfig(0, 1)
    assert ChunkConfig().bump("ffn") == ChunkConfig(1, 2)


def test_toy_bottleneck_attribution():
    # closed forms: logits = M*V*elem, ffn = 2*L*d_ff*elem (gated)
    template = build_layer_template(TOY)
    r = evaluate_peak(template, {"L": 10, "M": 8}, ChunkConfig(1, 1))
    assert r.component_peaks["logits"] == 8 * 100 * 4 == 3200
    assert r.component_peaks["ffn"] == 2 * 10 * 32 * 4 == 2560
    assert r.bottleneck == "logits"
    r1 = evaluate_peak(template, {"L": 10, "M": 1}, ChunkConfig(1, 1))
    assert r1.component_peaks["logits"] == 400
    assert r1.bottleneck == "ffn"


def test_no_loop_template_ignores_chunk_counts():
    from mosaic.dims import const
    from mosaic.graph import new_template

    t = new_template(("K_logits", "K_FFN"))
    t.add_tensor("a", (const(64),), 4, tag="hidden")
    t.add_op("op", (), ("a",))
    r1 = evaluate_peak(t, {}, ChunkConfig(1, 1))
    r2 = evaluate_peak(t, {}, ChunkConfig(5, 7))
    assert r1 == r2


def test_synthetic_phase_peaks(phase_template):
    # disjoint phases: peak = max(96, 400/kl, 200/kf) MiB
    r = evaluate_peak(phase_template, SYNTHETIC_BINDINGS, ChunkConfig(1, 1))
    assert r.total_peak == 400 * MiB
    assert r.non_chunkable_peak == 96 * MiB
    r = evaluate_peak(phase_template, SYNTHETIC_BINDINGS, ChunkConfig(2, 1))
    assert r.total_peak == 200 * MiB
    r = evaluate_peak(phase_template, SYNTHETIC_BINDINGS, ChunkConfig(4, 2))
    assert r.total_peak == 100 * MiB


def test_bottleneck_search_worked_example(phase_template):
    # floor 96, logits(1) 400, ffn(1) 200, budget 250 -> (2,1) in two evaluations
    outcome = search_bottleneck(phase_template, SYNTHETIC_BINDINGS, 250 * MiB)
    assert outcome.feasible
    assert outcome.config == ChunkConfig(2, 1)
    assert outcome.final_peak == 200 * MiB
    assert outcome.evaluations == 2
    assert outcome.floor == 96 * MiB


def test_bottleneck_search_budget_below_floor(phase_template):
    outcome = search_bottleneck(phase_template, SYNTHETIC_BINDINGS, 90 * MiB)
    assert not outcome.feasible
    assert outcome.config is None
    assert outcome.floor == 96 * MiB > 90 * MiB
    assert outcome.reason == "floor"


def test_lazy_default_when_budget_suffices(phase_template):
    outcome = search_bottleneck(phase_template, SYNTHETIC_BINDINGS, 500 * MiB)
    assert outcome.feasible and outcome.config == ChunkConfig(1, 1)
    assert outcome.evaluations == 1
    assert outcome.overhead_score == 0.0


def test_bruteforce_matches_worked_example(phase_template):
    outcome = search_bruteforce(phase_template, SYNTHETIC_BINDINGS, 250 * MiB, k_max=8)
    assert outcome.feasible and outcome.config == ChunkConfig(2, 1)
    assert outcome.evaluations == 64
    below = search_bruteforce(phase_template, SYNTHETIC_BINDINGS, 90 * MiB, k_max=8)
    assert not below.feasible


def test_bruteforce_prefers_ffn_when_it_dominates():
    # ffn(1)=300, logits(1)=100, floor=50, budget=160 -> (1, 2)
    from mosaic.dims import const, sym
    from mosaic.graph import new_template

    t = new_template(("R_lg", "R_ff", "K_logits", "K_FFN"))
    t.add_tensor("base", (const(50), const(MiB)), 1, tag="other")
    t.add_op("base_make", (), ("base",))
    t.add_op("base_use", ("base",), ())
    t.add_tensor("lg", (sym("R_lg"), const(MiB)), 1, tag="logits")
    t.add_op("lg_make", (), ("lg",))
    t.add_op("lg_use", ("lg",), ())
    t.add_chunk_loop(("lg_make", "lg_use"), "K_logits", ("R_lg",))
    t.add_tensor("ff", (sym("R_ff"), const(MiB)), 1, tag="ffn")
    t.add_op("ff_make", (), ("ff",))
    t.add_op("ff_use", ("ff",), ())
    t.add_chunk_loop(("ff_make", "ff_use"), "K_FFN", ("R_ff",))
    bindings = {"R_lg": 100, "R_ff": 300}
    bf = search_bruteforce(t, bindings, 160 * MiB, k_max=8)
    assert bf.feasible and bf.config == ChunkConfig(1, 2)
    bt = search_bottleneck(t, bindings, 160 * MiB)
    assert bt.feasible and bt.config == ChunkConfig(1, 2)
    assert bt.evaluations == 2


def test_peak_monotone_in_each_k():
    template = build_layer_template(TOY)
    bindings = {"L": 1024, "M": 512}
    prev = None
    for k in range(1, 12):
        peak = evaluate_peak(template, bindings, ChunkConfig(k, 1)).total_peak
        if prev is not None:
            assert peak <= prev
        prev = peak
    prev = None
    for k in range(1, 12):
        peak = evaluate_peak(template, bindings, ChunkConfig(1, k)).total_peak
        if prev is not None:
            assert peak <= prev
        prev = peak


def test_minimality_up_to_no_effect_decrements():
    template = build_layer_template(TOY)
    bindings = {"L": 2048, "M": 1024}
    base = evaluate_peak(template, bindings, ChunkConfig(1, 1)).total_peak
    floor = evaluate_peak(template, bindings, ChunkConfig(1, 1)).non_chunkable_peak
    budget = floor + (base - floor) // 3
    outcome = search_bottleneck(template, bindings, budget)
    assert outcome.feasible
    kl, kf = outcome.config.k_logits, outcome.config.k_ffn
    for down in ((kl - 1, kf), (kl, kf - 1)):
        if down[0] < 1 or down[1] < 1:
            continue
        peak = evaluate_peak(template, bindings, ChunkConfig(*down)).total_peak
        assert peak > budget or peak == outcome.final_peak


def test_search_requires_positive_budget(phase_template):
    with pytest.raises(ValueError):
        search_bottleneck(phase_template, SYNTHETIC_BINDINGS, 0)
    with pytest.raises(ValueError):
        search_bruteforce(phase_template, SYNTHETIC_BINDINGS, -5)


def test_overhead_score_counts_extra_launches(phase_template):
    outcome = search_bottleneck(
        phase_template, SYNTHETIC_BINDINGS, 250 * MiB, launch_overhead=2.5
    )
    assert outcome.overhead_score == (2 + 1 - 2) * 2.5
