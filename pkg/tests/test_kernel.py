import random

import numpy as np
import pytest

from mosaic.errors import InputError
from mosaic.kernel import (
    GatherGemmProblem,
    dense_then_discard,
    gather_gemm,
    gemm_reference,
)


def test_identity_weight_selects_rows():
    hidden = np.arange(12, dtype=np.float64).reshape(4, 3)
    weight = np.eye(3)
    out, _ = gather_gemm(GatherGemmProblem(hidden, weight, (2, 0)))
    assert np.array_equal(out, hidden[[2, 0], :])


def test_single_masked_row():
    hidden = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
    weight = np.array([[1.0, 0.0], [0.0, 1.0]])
    out, _ = gather_gemm(GatherGemmProblem(hidden, weight, (1,)))
    assert np.array_equal(out, np.array([[3.0, 4.0]]))


def test_reference_examples():
    assert np.array_equal(gemm_reference([[2.0]], [[3.0]]), np.array([[6.0]]))
    assert np.array_equal(
        gemm_reference(np.zeros((2, 3)), np.zeros((3, 4))), np.zeros((2, 4))
    )
    with pytest.raises(InputError):
        gemm_reference(np.zeros((2, 3)), np.zeros((4, 4)))


def test_random_problems_match_reference():
    rng = random.Random(50)
    for _ in range(500):
        n = rng.randint(1, 9)
        d = rng.randint(1, 7)
        vocab = rng.randint(1, 11)
        hidden = np.array([[rng.uniform(-3, 3) for _ in range(d)] for _ in range(n)])
        weight = np.array([[rng.uniform(-3, 3) for _ in range(vocab)] for _ in range(d)])
        m = rng.randint(1, n)
        idx = tuple(rng.sample(range(n), m))
        tiles = (rng.randint(1, 5), rng.randint(1, 5), rng.randint(1, 5))
        out, scratch = gather_gemm(GatherGemmProblem(hidden, weight, idx, *tiles))
        ref = gemm_reference(hidden[list(idx), :], weight)
        denom = np.maximum(np.abs(ref), 1e-30)
        assert np.max(np.abs(out - ref) / denom) <= 1e-12
        assert scratch.within_bound


def test_tile_size_invariance_is_bitwise():
    rng = np.random.default_rng(51)
    hidden = rng.standard_normal((23, 17))
    weight = rng.standard_normal((17, 29))
    idx = tuple(int(i) for i in rng.choice(23, size=11, replace=False))
    outputs = [
        gather_gemm(GatherGemmProblem(hidden, weight, idx, tm, td, tv))[0]
        for tm, td, tv in ((1, 1, 1), (2, 5, 3), (7, 7, 7), (16, 4, 32), (64, 64, 64))
    ]
    for other in outputs[1:]:
        assert np.array_equal(outputs[0], other)


def test_scratch_bound_fields():
    hidden = np.ones((8, 8))
    weight = np.ones((8, 8))
    _, scratch = gather_gemm(GatherGemmProblem(hidden, weight, tuple(range(8)), 4, 4, 4))
    assert scratch.bound == 4 * 4 + 4 * 4 + 4 * 4
    assert 0 < scratch.peak_elements <= scratch.bound


def test_full_mask_reproduces_dense_product():
    rng = np.random.default_rng(52)
    hidden = rng.standard_normal((13, 9))
    weight = rng.standard_normal((9, 21))
    idx = tuple(range(13))
    out, _ = gather_gemm(GatherGemmProblem(hidden, weight, idx))
    dense = dense_then_discard(hidden, weight, idx)
    assert np.allclose(out, dense, rtol=1e-12, atol=0)


def test_input_validation():
    hidden = np.zeros((4, 3))
    weight = np.zeros((3, 5))
    with pytest.raises(InputError):
        GatherGemmProblem(hidden, weight, (0, 0))  # duplicate index
    with pytest.raises(InputError):
        GatherGemmProblem(hidden, weight, (4,))  # out of range
    with pytest.raises(InputError):
        GatherGemmProblem(hidden, weight, (0,), tile_m=0)
    with pytest.raises(InputError):
        GatherGemmProblem(hidden, np.zeros((4, 5)), (0,))  # inner mismatch


def test_single_precision_mode():
    rng = np.random.default_rng(53)
    hidden = rng.standard_normal((10, 6)).astype(np.float32)
    weight = rng.standard_normal((6, 8)).astype(np.float32)
    idx = (1, 4, 7)
    out, _ = gather_gemm(GatherGemmProblem(hidden, weight, idx))
    assert out.dtype == np.float32
    ref = gemm_reference(hidden[list(idx), :], weight)
    denom = np.maximum(np.abs(ref), 1e-20)
    assert np.max(np.abs(out.astype(np.float64) - ref) / denom) <= 1e-5
