import pytest

from mosaic.dims import const, sym
from mosaic.graph import GraphTemplate, new_template

MiB = 1 << 20


def synthetic_phase_template() -> GraphTemplate:
    """Three temporally disjoint phases: a fixed 96 MiB base, a chunkable
    logits tensor of 400 MiB / K_logits, and a chunkable ffn tensor of
    200 MiB / K_FFN. Peaks: max(96, 400/kl, 200/kf) MiB.
    """
    t = new_template(("R_lg", "R_ff", "K_logits", "K_FFN"))
    t.add_tensor("base", (const(96), const(MiB)), 1, tag="other")
    t.add_op("base_make", (), ("base",), kind="alloc")
    t.add_op("base_use", ("base",), (), kind="misc")

    t.add_tensor("lg", (sym("R_lg"), const(MiB)), 1, tag="logits")
    t.add_op("lg_make", (), ("lg",), kind="logits")
    t.add_op("lg_use", ("lg",), (), kind="misc")
    t.add_chunk_loop(("lg_make", "lg_use"), "K_logits", ("R_lg",))

    t.add_tensor("ff", (sym("R_ff"), const(MiB)), 1, tag="ffn")
    t.add_op("ff_make", (), ("ff",), kind="ffn_up")
    t.add_op("ff_use", ("ff",), (), kind="misc")
    t.add_chunk_loop(("ff_make", "ff_use"), "K_FFN", ("R_ff",))
    return t.freeze()


SYNTHETIC_BINDINGS = {"R_lg": 400, "R_ff": 200}


@pytest.fixture
def phase_template() -> GraphTemplate:
    return synthetic_phase_template()
