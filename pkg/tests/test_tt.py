"""Tensor-train core: contraction, decomposition, gradients.

Every numerical claim is checked against an independent oracle defined at
the top of this file: dense reconstruction via explicit mixed-radix
indexing, and central finite differences for gradients.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedtt.tt import (
    TensorShapePlan,
    TTWeight,
    full_rank_plan,
    max_ranks,
    mode_product,
    param_count,
    random_tt,
    reconstruct,
    shape_plan_for,
    tt_forward,
    tt_matvec,
    tt_svd,
    tt_vjp,
)


# ---------------------------------------------------------------- oracles


def dense_from_chain(w: TTWeight) -> np.ndarray:
    """Entry-by-entry chain evaluation, no shared code with reconstruct()."""
    out = np.zeros((w.rows, w.cols))
    for p in range(w.rows):
        for q in range(w.cols):
            digits = _digits(p, w.row_dims) + _digits(q, w.col_dims)
            acc = np.eye(1)
            for g, k in zip(w.factors, digits):
                acc = acc @ g[:, k, :]
            out[p, q] = acc[0, 0]
    return out


def _digits(index: int, dims: tuple) -> list:
    out = []
    for d in reversed(dims):
        out.append(index % d)
        index //= d
    return list(reversed(out))


def numeric_core_grads(w, x, dy, eps=1e-6):
    """Central finite differences of sum(dy * forward(w, x)) per core entry."""
    grads = []
    for j in range(w.chain_length):
        g = np.zeros_like(w.factors[j])
        it = np.nditer(w.factors[j], flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            w.factors[j][idx] += eps
            up = float(np.sum(dy * tt_forward(w, x)[0]))
            w.factors[j][idx] -= 2 * eps
            dn = float(np.sum(dy * tt_forward(w, x)[0]))
            w.factors[j][idx] += eps
            g[idx] = (up - dn) / (2 * eps)
        grads.append(g)
    return grads


def small_chain(seed, dims=(3, 2, 2, 4), split=2, rank=3) -> TTWeight:
    rng = np.random.default_rng(seed)
    ranks = [1] + [rank] * (len(dims) - 1) + [1]
    factors = [
        rng.normal(size=(ranks[j], dims[j], ranks[j + 1])) for j in range(len(dims))
    ]
    return TTWeight(factors, dims[:split], dims[split:])


# ----------------------------------------------------------- mode_product


def test_mode_product_matches_tensordot(rng):
    a = rng.normal(size=(3, 4, 5))
    b = rng.normal(size=(6, 4, 2))
    got = mode_product(a, b, 2, 2)
    assert got.shape == (3, 5, 6, 2)
    assert np.allclose(got, np.tensordot(a, b, axes=(1, 1)))


def test_mode_product_is_matmul_for_matrices(rng):
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4, 5))
    assert np.allclose(mode_product(a, b, 2, 1), a @ b)


@given(
    s=st.integers(min_value=1, max_value=3),
    t=st.integers(min_value=1, max_value=3),
    seed=st.integers(min_value=0, max_value=10_000),
)
@settings(max_examples=40, deadline=None)
def test_mode_product_axes_property(s, t, seed):
    rng = np.random.default_rng(seed)
    shape_a = [2, 3, 4]
    shape_b = [5, 6, 7]
    shape_b[t - 1] = shape_a[s - 1]
    a = rng.normal(size=shape_a)
    b = rng.normal(size=shape_b)
    got = mode_product(a, b, s, t)
    want = np.tensordot(a, b, axes=(s - 1, t - 1))
    assert got.shape == want.shape
    assert np.allclose(got, want)


def test_mode_product_rejects_out_of_range_axes(rng):
    a = rng.normal(size=(2, 3))
    b = rng.normal(size=(3, 2))
    with pytest.raises(ValueError):
        mode_product(a, b, 0, 1)
    with pytest.raises(ValueError):
        mode_product(a, b, 3, 1)
    with pytest.raises(ValueError):
        mode_product(a, b, 1, 5)


def test_mode_product_rejects_size_mismatch(rng):
    with pytest.raises(ValueError, match="disagree"):
        mode_product(rng.normal(size=(2, 3)), rng.normal(size=(4, 2)), 2, 1)


# ----------------------------------------------------------- TTWeight


def test_ttweight_validates_core_order():
    with pytest.raises(ValueError, match="order"):
        TTWeight([np.zeros((1, 2)), np.zeros((1, 2, 1))], (2,), (2,))


def test_ttweight_validates_rank_adjacency():
    bad = [np.zeros((1, 2, 3)), np.zeros((4, 2, 1))]
    with pytest.raises(ValueError, match="rank mismatch"):
        TTWeight(bad, (2,), (2,))


def test_ttweight_validates_boundary_ranks():
    bad = [np.zeros((2, 2, 1)), np.zeros((1, 2, 1))]
    with pytest.raises(ValueError, match="boundary"):
        TTWeight(bad, (2,), (2,))


def test_ttweight_validates_mode_sizes():
    bad = [np.zeros((1, 5, 1)), np.zeros((1, 2, 1))]
    with pytest.raises(ValueError, match="mode size"):
        TTWeight(bad, (2,), (2,))


def test_ttweight_properties():
    w = small_chain(0)
    assert w.dims == (3, 2, 2, 4)
    assert w.rows == 6 and w.cols == 8
    assert w.ranks == (1, 3, 3, 3, 1)
    assert w.chain_length == 4


def test_ttweight_copy_is_deep():
    w = small_chain(1)
    c = w.copy()
    c.factors[0][0, 0, 0] += 1.0
    assert w.factors[0][0, 0, 0] != c.factors[0][0, 0, 0]


# ----------------------------------------------------------- shape plans


def test_known_transformer_shapes_use_table_dims():
    plan = shape_plan_for(768, 64, 5)
    assert plan.dims == (8, 8, 12, 8, 8)
    assert plan.row_dims == (8, 8, 12)
    assert plan.col_dims == (8, 8)
    assert shape_plan_for(4096, 64, 5).dims == (16, 16, 16, 4, 4, 4)
    assert shape_plan_for(64, 4096, 5).dims == (4, 4, 4, 16, 16, 16)
    assert shape_plan_for(768, 768, 5).dims == (12, 8, 8, 8, 8, 12)


def test_param_count_hand_arithmetic():
    # 1*8*5 + 5*8*5 + 5*12*5 + 5*8*5 + 5*8*1 = 40+200+300+200+40
    assert param_count(shape_plan_for(768, 64, 5)) == 780
    assert param_count(shape_plan_for(64, 768, 5)) == 780
    # single mode: 1*k*1
    assert param_count(TensorShapePlan(4, 1, (4,), (1, 1))) == 4


def test_balanced_fallback_splits_each_side():
    plan = shape_plan_for(64, 64, 3)
    assert plan.row_dims == (8, 8)
    assert plan.col_dims == (8, 8)
    assert all(d <= 16 for d in plan.dims)
    plan = shape_plan_for(24, 32, 3)
    assert np.prod(plan.row_dims) == 24
    assert np.prod(plan.col_dims) == 32


def test_plan_for_unit_matrix():
    plan = shape_plan_for(1, 1, 5)
    assert plan.dims == (1,)
    assert plan.ranks == (1, 1)


def test_large_prime_side_sets_warning():
    plan = shape_plan_for(67, 4, 2)
    assert plan.warning is not None
    assert np.prod(plan.dims) == 268


def test_plan_rejects_bad_dims_product():
    with pytest.raises(ValueError, match="factorize"):
        TensorShapePlan(4, 4, (3, 5), (1, 2, 1))


def test_plan_rejects_bad_rank_boundary():
    with pytest.raises(ValueError, match="boundary"):
        TensorShapePlan(2, 2, (2, 2), (2, 2, 1))


def test_plan_rejects_unsplittable_rows():
    # no prefix of (4, 4) multiplies to 8
    with pytest.raises(ValueError, match="prefix"):
        TensorShapePlan(8, 2, (4, 4), (1, 2, 1))


def test_max_ranks_hand_case():
    assert max_ranks((2, 3, 4)) == (1, 2, 4, 1)
    assert max_ranks((8,)) == (1, 1)


def test_full_rank_plan_uses_attainable_ranks():
    plan = full_rank_plan(6, 8)
    assert plan.ranks == max_ranks(plan.dims)


# ----------------------------------------------------------- reconstruct


def test_reconstruct_matches_entrywise_oracle():
    for seed in range(5):
        w = small_chain(seed)
        assert np.allclose(reconstruct(w), dense_from_chain(w), atol=1e-12)


def test_reconstruct_single_mode_chain(rng):
    g = rng.normal(size=(1, 4, 1))
    w = TTWeight([g], (4,), ())
    assert np.allclose(reconstruct(w), g[0, :, 0].reshape(4, 1))


# ----------------------------------------------------------- tt_svd


def test_tt_svd_round_trips_at_full_rank(rng):
    for shape in [(6, 8), (1, 9), (9, 1), (16, 16), (12, 10)]:
        m = rng.normal(size=shape)
        w = tt_svd(m, full_rank_plan(*shape))
        err = np.linalg.norm(reconstruct(w) - m) / np.linalg.norm(m)
        assert err < 1e-12, shape


def test_tt_svd_recovers_low_rank_exactly(rng):
    # rank-2 matrix survives a rank-2 truncation
    m = rng.normal(size=(8, 2)) @ rng.normal(size=(2, 16))
    plan = shape_plan_for(8, 16, 2)
    w = tt_svd(m, plan)
    assert np.linalg.norm(reconstruct(w) - m) / np.linalg.norm(m) < 1e-10


def test_tt_svd_error_shrinks_with_rank(rng):
    m = rng.normal(size=(16, 16))
    errs = []
    for r in (1, 2, 4, 8, 16):
        base = shape_plan_for(16, 16, r)
        w = tt_svd(m, base)
        errs.append(np.linalg.norm(reconstruct(w) - m))
    assert all(a >= b - 1e-12 for a, b in zip(errs, errs[1:]))
    assert errs[-1] < 1e-10


def test_tt_svd_clamps_unattainable_ranks(rng):
    plan = TensorShapePlan(4, 4, (2, 2, 2, 2), (1, 9, 9, 9, 1))
    w = tt_svd(rng.normal(size=(4, 4)), plan)
    assert w.ranks == (1, 2, 4, 2, 1)  # clamp is visible, not silent padding


def test_tt_svd_zero_matrix_gives_zero_cores():
    plan = shape_plan_for(6, 4, 3)
    w = tt_svd(np.zeros((6, 4)), plan)
    assert all(not f.any() for f in w.factors)
    assert not reconstruct(w).any()


def test_tt_svd_rejects_shape_mismatch(rng):
    with pytest.raises(ValueError, match="does not match"):
        tt_svd(rng.normal(size=(3, 3)), shape_plan_for(6, 4, 2))


@given(
    rows=st.integers(min_value=1, max_value=12),
    cols=st.integers(min_value=1, max_value=12),
    seed=st.integers(min_value=0, max_value=10_000),
)
@settings(max_examples=30, deadline=None)
def test_tt_svd_full_rank_property(rows, cols, seed):
    m = np.random.default_rng(seed).normal(size=(rows, cols))
    w = tt_svd(m, full_rank_plan(rows, cols))
    assert np.linalg.norm(reconstruct(w) - m) <= 1e-10 * max(1.0, np.linalg.norm(m))


# ----------------------------------------------------------- forward


def test_forward_matches_dense_oracle(rng):
    for seed in range(4):
        w = small_chain(seed)
        x = rng.normal(size=(5, w.cols))
        y, _ = tt_forward(w, x)
        assert y.shape == (5, w.rows)
        assert np.allclose(y, x @ dense_from_chain(w).T, atol=1e-10)


def test_forward_all_column_chain(rng):
    # rows of 1 mean every mode belongs to the input side
    plan = shape_plan_for(1, 12, 2)
    w = random_tt(plan, rng)
    x = rng.normal(size=(3, 12))
    y, _ = tt_forward(w, x)
    assert np.allclose(y, x @ reconstruct(w).T)


def test_forward_rejects_wrong_width(rng):
    w = small_chain(2)
    with pytest.raises(ValueError, match="columns"):
        tt_forward(w, rng.normal(size=(4, w.cols + 1)))


def test_matvec_matches_dense(rng):
    w = small_chain(3)
    v = rng.normal(size=w.cols)
    assert np.allclose(tt_matvec(w, v), dense_from_chain(w) @ v, atol=1e-10)
    with pytest.raises(ValueError):
        tt_matvec(w, rng.normal(size=(2, w.cols)))


# ----------------------------------------------------------- vjp


def test_vjp_core_grads_match_finite_differences(rng):
    w = small_chain(7, dims=(2, 3, 2, 2), split=2, rank=2)
    x = rng.normal(size=(3, w.cols))
    dy = rng.normal(size=(3, w.rows))
    y, cache = tt_forward(w, x)
    got, _ = tt_vjp(w, cache, dy)
    want = numeric_core_grads(w, x, dy)
    for j in range(w.chain_length):
        assert np.allclose(got[j], want[j], atol=1e-7), f"core {j}"


def test_vjp_input_grad_matches_finite_differences(rng):
    w = small_chain(8)
    x = rng.normal(size=(2, w.cols))
    dy = rng.normal(size=(2, w.rows))
    _, cache = tt_forward(w, x)
    _, dx = tt_vjp(w, cache, dy)
    eps = 1e-6
    for i in range(2):
        for q in range(w.cols):
            x[i, q] += eps
            up = float(np.sum(dy * tt_forward(w, x)[0]))
            x[i, q] -= 2 * eps
            dn = float(np.sum(dy * tt_forward(w, x)[0]))
            x[i, q] += eps
            assert abs(dx[i, q] - (up - dn) / (2 * eps)) < 1e-7


def test_vjp_masked_cores_get_zero_grads(rng):
    w = small_chain(9)
    x = rng.normal(size=(4, w.cols))
    dy = rng.normal(size=(4, w.rows))
    _, cache = tt_forward(w, x)
    mask = [True, False, True, False]
    got, dx = tt_vjp(w, cache, dy, mask)
    full, dx_full = tt_vjp(w, cache, dy)
    for j, keep in enumerate(mask):
        if keep:
            assert np.allclose(got[j], full[j])
        else:
            assert got[j].shape == w.factors[j].shape
            assert not got[j].any()
    # input grad is independent of the mask
    assert np.allclose(dx, dx_full)


def test_vjp_single_mode_chain(rng):
    plan = shape_plan_for(1, 1, 1)
    w = random_tt(plan, rng)
    x = rng.normal(size=(2, 1))
    dy = rng.normal(size=(2, 1))
    y, cache = tt_forward(w, x)
    got, dx = tt_vjp(w, cache, dy)
    assert np.allclose(got[0][0, 0, 0], np.sum(dy * x))
    assert np.allclose(dx, dy * reconstruct(w)[0, 0])


# ----------------------------------------------------------- random_tt


def test_random_tt_matches_plan():
    plan = shape_plan_for(24, 32, 4)
    w = random_tt(plan, np.random.default_rng(0))
    assert w.dims == plan.dims
    assert w.ranks == plan.ranks
    assert w.rows == 24 and w.cols == 32


def test_random_tt_zero_last_is_exact_zero_matrix():
    plan = shape_plan_for(8, 8, 3)
    w = random_tt(plan, np.random.default_rng(0), zero_last=True)
    assert not reconstruct(w).any()
    # every other core is still populated
    assert all(f.any() for f in w.factors[:-1])
