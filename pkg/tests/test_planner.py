import itertools
import random

import pytest

from mosaic.errors import TooLarge, ValidationError
from mosaic.liveness import LifetimeTable, StorageGroup, analyze, max_live
from mosaic.planner import MemoryPlan, PlanEntry, plan_exact, plan_first_fit, validate
from mosaic.randgen import random_concrete_graph, random_lifetime_table
from mosaic.workload import build_layer_template, toy_configs


def grp(gid, size, lo, hi, tag="other"):
    return StorageGroup(gid, size, tag, lo, hi, ((gid, None),))


def table_of(*groups):
    length = max((g.last_use_index for g in groups), default=0) + 1
    return LifetimeTable(tuple(groups), length)


THREE = table_of(grp("a", 128, 0, 2), grp("b", 64, 1, 3), grp("c", 128, 3, 4))


def test_first_fit_worked_example():
    # hand simulation: a at 0; b conflicts a -> 128; c conflicts b only -> 0
    plan = plan_first_fit(THREE, alignment=1)
    assert plan.offsets() == {"a": 0, "b": 128, "c": 0}
    assert plan.workspace_size == 192
    assert plan_exact(THREE, alignment=1).workspace_size == 192


def test_empty_table():
    empty = LifetimeTable((), 0)
    assert plan_first_fit(empty).workspace_size == 0
    assert plan_exact(empty).workspace_size == 0


def test_disjoint_lifetimes_share_offset_zero():
    t = table_of(grp("a", 512, 0, 1), grp("b", 512, 2, 3))
    plan = plan_first_fit(t, alignment=1)
    assert plan.offsets() == {"a": 0, "b": 0}
    assert plan.workspace_size == 512


def test_alignment_respected():
    t = table_of(grp("a", 100, 0, 2), grp("b", 100, 0, 2))
    plan = plan_first_fit(t, alignment=256)
    offs = plan.offsets()
    assert offs["a"] % 256 == 0 and offs["b"] % 256 == 0
    assert plan.workspace_size == 356  # second group lands on the aligned top
    with pytest.raises(ValueError):
        plan_first_fit(t, alignment=3)


def test_validate_detects_overlap_and_alignment():
    t = table_of(grp("a", 64, 0, 2), grp("b", 64, 1, 3))
    bad = MemoryPlan(
        alignment=4,
        workspace_size=67,
        entries=(
            PlanEntry("a", 0, 64, 0, 2, "other"),
            PlanEntry("b", 3, 64, 1, 3, "other"),
        ),
    )
    report = validate(bad, t)
    kinds = sorted(v.kind for v in report.violations)
    assert kinds == ["alignment", "overlap"]
    pair = next(v for v in report.violations if v.kind == "overlap")
    assert {pair.group_a, pair.group_b} == {"a", "b"}


def test_validate_missing_group():
    t = table_of(grp("a", 64, 0, 2))
    with pytest.raises(ValidationError):
        validate(MemoryPlan(1, 0, ()), t)


def test_first_fit_sound_on_random_tables():
    rng = random.Random(20)
    for _ in range(300):
        table = random_lifetime_table(rng)
        plan = plan_first_fit(table)
        assert validate(plan, table).ok
        assert plan.workspace_size >= max_live(table)


def test_first_fit_sound_on_random_graphs():
    rng = random.Random(21)
    for _ in range(200):
        table = analyze(random_concrete_graph(rng))
        assert validate(plan_first_fit(table), table).ok


def test_exact_dominance_and_validity():
    rng = random.Random(22)
    for _ in range(120):
        table = random_lifetime_table(rng, max_groups=8)
        ff = plan_first_fit(table)
        exact = plan_exact(table, limit=8)
        assert validate(exact, table).ok
        assert max_live(table) <= exact.workspace_size <= ff.workspace_size


def test_exact_matches_exhaustive_grid_oracle():
    """Independent optimality oracle: try every offset tuple on a unit grid."""

    def grid_optimum(table):
        gs = [g for g in table.groups if g.size > 0]
        total = sum(g.size for g in gs)
        best = None
        for offs in itertools.product(range(total + 1), repeat=len(gs)):
            ok = True
            for x in range(len(gs)):
                for y in range(x + 1, len(gs)):
                    a, b = gs[x], gs[y]
                    if a.def_index <= b.last_use_index and b.def_index <= a.last_use_index:
                        if offs[x] < offs[y] + b.size and offs[y] < offs[x] + a.size:
                            ok = False
                            break
                if not ok:
                    break
            if ok:
                ws = max((offs[i] + gs[i].size for i in range(len(gs))), default=0)
                best = ws if best is None else min(best, ws)
        return best or 0

    rng = random.Random(23)
    for _ in range(30):
        raw = random_lifetime_table(rng, max_groups=4)
        table = LifetimeTable(
            tuple(
                StorageGroup(g.id, g.size % 5 + 1, g.tag, g.def_index, g.last_use_index, g.members)
                for g in raw.groups
            ),
            raw.length,
        )
        assert plan_exact(table, alignment=1, limit=4).workspace_size == grid_optimum(table)


def test_exact_group_limit():
    rng = random.Random(24)
    table = random_lifetime_table(rng, max_groups=64)
    while len(table.groups) <= 12:
        table = random_lifetime_table(rng, max_groups=64)
    with pytest.raises(TooLarge):
        plan_exact(table, limit=12)


def test_chain_optimality_on_stack_templates():
    for cfg in toy_configs().values():
        template = build_layer_template(cfg)
        g = template.instantiate({"L": 128, "M": 64, "K_logits": 2, "K_FFN": 3})
        table = analyze(g)
        ff = plan_first_fit(table, alignment=1)
        exact = plan_exact(table, alignment=1, limit=len(table.groups))
        assert ff.workspace_size == max_live(table) == exact.workspace_size


def test_determinism_byte_for_byte():
    rng = random.Random(25)
    for _ in range(20):
        table = random_lifetime_table(rng, max_groups=12)
        a = plan_first_fit(table).to_json()
        b = plan_first_fit(table).to_json()
        assert a == b
        ea = plan_exact(table, limit=12).to_json()
        eb = plan_exact(table, limit=12).to_json()
        assert ea == eb


def test_workspace_bounded_by_total():
    rng = random.Random(26)
    for _ in range(100):
        table = random_lifetime_table(rng, max_groups=12)
        total = sum(g.size for g in table.groups)
        assert plan_exact(table, limit=12).workspace_size <= plan_first_fit(table).workspace_size <= total + 255 * len(table.groups)
