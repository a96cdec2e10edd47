import warnings

import numpy as np
import pytest

from konvlina.attention import (
    AttentionConfig,
    NumericalQualityWarning,
    RegisterNystromAttention,
    Registers,
    RelPosEncoding,
    add_registers,
    apply_rel_pos,
    exact_attention,
    nystrom_attention,
    penrose_residual,
    pinv,
    select_landmarks,
    strip_registers,
)
from konvlina.core import Parameter, Tape, backward, check_gradients, make_rng, ops, track_allocations
from konvlina.core.tensor import ConfigurationError, DimensionError

# Enough Newton-Schulz steps to converge on the fixtures below.
CONVERGED = 60


def row_by_row_attention(Q, K, V):
    out = np.zeros((Q.shape[0], V.shape[1]))
    for i, q in enumerate(Q):
        logits = np.array([q @ k for k in K]) / np.sqrt(Q.shape[1])
        w = np.exp(logits - logits.max())
        w /= w.sum()
        out[i] = sum(wj * vj for wj, vj in zip(w, V))
    return out


def rel_frob(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


def row_softmax(x):
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------- exact attention

def test_exact_single_token():
    V = np.array([[1.5, -2.0, 0.25]])
    out = exact_attention(np.array([[0.3, 0.1]]), np.array([[2.0, -1.0]]), V).data
    np.testing.assert_array_equal(out, V)


def test_exact_zero_queries_average_values():
    rng = make_rng(1)
    K, V = rng.normal(size=(6, 3)), rng.normal(size=(6, 2))
    out = exact_attention(np.zeros((6, 3)), K, V).data
    np.testing.assert_allclose(out, np.broadcast_to(V.mean(axis=0), (6, 2)), atol=1e-12)


def test_exact_matches_row_by_row():
    rng = make_rng(2)
    Q, K, V = rng.normal(size=(8, 4)), rng.normal(size=(8, 4)), rng.normal(size=(8, 4))
    np.testing.assert_allclose(exact_attention(Q, K, V).data, row_by_row_attention(Q, K, V), atol=1e-12)


def test_exact_shape_mismatch():
    with pytest.raises(DimensionError):
        exact_attention(np.zeros((4, 3)), np.zeros((4, 2)), np.zeros((4, 2)))


# ---------------------------------------------------------------- landmarks

def test_full_strided_subset_is_identity():
    K = make_rng(3).normal(size=(7, 3))
    np.testing.assert_array_equal(select_landmarks(K, 7, "strided-subset").data, K)


def test_single_segment_mean():
    K = make_rng(4).normal(size=(9, 3))
    np.testing.assert_allclose(select_landmarks(K, 1, "segment-means").data, K.mean(axis=0, keepdims=True), atol=1e-15)


def test_two_segment_means():
    K = make_rng(5).normal(size=(6, 4))
    out = select_landmarks(K, 2).data
    np.testing.assert_allclose(out[0], K[0:3].mean(axis=0), atol=1e-15)
    np.testing.assert_allclose(out[1], K[3:6].mean(axis=0), atol=1e-15)


@pytest.mark.parametrize("n,m", [(10, 3), (17, 5), (64, 16), (20, 20)])
def test_segment_sizes_differ_by_at_most_one(n, m):
    K = np.arange(n, dtype=float)[:, None]
    means = select_landmarks(K, m).data[:, 0]
    # Reconstruct segment sizes from the means of consecutive integers.
    bounds = [0]
    for mu in means:
        lo = bounds[-1]
        size = int(round(2 * (mu - lo) + 1))
        bounds.append(lo + size)
    sizes = np.diff(bounds)
    assert bounds[-1] == n and sizes.max() - sizes.min() <= 1


def test_strided_indices():
    K = np.arange(10.0)[:, None]
    np.testing.assert_array_equal(select_landmarks(K, 4, "strided-subset").data[:, 0], [0, 2, 5, 7])


def test_too_many_landmarks():
    with pytest.raises(ValueError):
        select_landmarks(np.zeros((3, 2)), 4)


# ---------------------------------------------------------------- pinv

def test_pinv_identity_and_diagonal():
    np.testing.assert_allclose(pinv(np.eye(5), 12).data, np.eye(5), atol=1e-10)
    np.testing.assert_allclose(pinv(np.diag([2.0, 4.0]), 12).data, np.diag([0.5, 0.25]), atol=1e-8)


def landmark_like(seed, n=8):
    """Row-softmax with a dominant diagonal, as softmax(Km Km^T) tends to be."""
    return row_softmax(3.0 * np.eye(n) + 0.5 * make_rng(6, seed).normal(size=(n, n)))


@pytest.mark.parametrize("seed", range(5))
def test_pinv_penrose_residual_on_row_softmax(seed):
    A = landmark_like(seed)
    Z = pinv(A, 12).data
    assert penrose_residual(A, Z) < 1e-6
    # The remaining Penrose identities.
    assert np.linalg.norm(Z @ A @ Z - Z) / np.linalg.norm(Z) < 1e-6
    assert np.linalg.norm((A @ Z).T - A @ Z) < 1e-6
    assert np.linalg.norm((Z @ A).T - Z @ A) < 1e-6


@pytest.mark.parametrize("seed", range(5))
def test_pinv_converges_on_generic_row_softmax(seed):
    A = row_softmax(make_rng(24, seed).normal(size=(8, 8)))
    assert penrose_residual(A, pinv(A, CONVERGED).data) < 1e-6
    assert penrose_residual(A, pinv(A, 12).data) > penrose_residual(A, pinv(A, CONVERGED).data)


def test_pinv_rejects_nonfinite():
    with pytest.raises(ValueError):
        pinv(np.array([[1.0, np.nan], [0.0, 1.0]]))


def test_pinv_of_singular_matches_numpy():
    A = np.full((4, 4), 0.25)
    np.testing.assert_allclose(pinv(A, 30).data, np.linalg.pinv(A), atol=1e-10)


def test_pinv_gradient():
    # Distinct row and column sums keep both matrix norms away from ties.
    rng = make_rng(7)
    A = Parameter(np.eye(4) + 0.3 * rng.uniform(size=(4, 4)))
    w = rng.normal(size=(4, 4))
    errs = check_gradients(lambda: ops.sum(ops.mul(pinv(A, 6), w)), [A])
    assert errs[0] < 1e-4


def test_pinv_gradient_through_softmax():
    # Rows of a softmax always sum to one, so the inf-norm tie is harmless.
    rng = make_rng(25)
    X = Parameter(rng.normal(size=(5, 5)))
    w = rng.normal(size=(5, 5))
    errs = check_gradients(lambda: ops.sum(ops.mul(pinv(ops.softmax(X, axis=-1), 8), w)), [X])
    assert errs[0] < 1e-4


# ---------------------------------------------------------------- nystrom

@pytest.mark.parametrize("seed", range(10))
def test_nystrom_full_rank_is_exact(seed):
    rng = make_rng(8, seed)
    n = int(rng.integers(4, 65))
    d = int(rng.integers(2, 17))
    Q, K, V = (rng.normal(size=(n, d)) for _ in range(3))
    cfg = AttentionConfig(landmarks=n, landmark_mode="strided-subset", pinv_iterations=CONVERGED)
    approx = nystrom_attention(Q, K, V, cfg).data
    assert rel_frob(approx, exact_attention(Q, K, V).data) < 1e-5


def test_nystrom_single_token():
    V = np.array([[0.5, -1.0]])
    out = nystrom_attention(np.ones((1, 2)), np.ones((1, 2)), V, AttentionConfig(landmarks=1))
    np.testing.assert_array_equal(out.data, V)


def test_nystrom_error_shrinks_with_more_landmarks():
    rng = make_rng(9)
    Q, K, V = (rng.normal(size=(64, 8)) for _ in range(3))
    exact = exact_attention(Q, K, V).data
    errors = {}
    for m in (4, 8, 16, 32):
        cfg = AttentionConfig(landmarks=m, pinv_iterations=CONVERGED)
        errors[m] = rel_frob(nystrom_attention(Q, K, V, cfg).data, exact)
    assert errors[32] < errors[4], errors


def test_nystrom_flags_unconverged_pinv():
    rng = make_rng(10)
    Q, K, V = (rng.normal(size=(64, 4)) for _ in range(3))
    cfg = AttentionConfig(landmarks=64, landmark_mode="strided-subset", pinv_iterations=2, pinv_warn_tol=1e-6)
    with pytest.warns(NumericalQualityWarning):
        out = nystrom_attention(Q, K, V, cfg)
    assert out.meta["pinv_residual"] > 1e-6 and "warning" in out.meta


def test_nystrom_factor_rows_sum_to_one():
    rng = make_rng(11)
    K = rng.normal(size=(32, 8))
    Km = select_landmarks(K, 8).data
    right = ops.softmax(Km @ K.T / np.sqrt(8), axis=-1).data
    np.testing.assert_allclose(right.sum(axis=-1), 1.0, atol=1e-9)


@pytest.mark.parametrize("n", [64, 256, 1024])
def test_nystrom_never_allocates_n_squared(n):
    rng = make_rng(12)
    m, d = 16, 8
    Q, K, V = (rng.normal(size=(n, d)) for _ in range(3))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", NumericalQualityWarning)
        with track_allocations() as log:
            nystrom_attention(Q, K, V, AttentionConfig(landmarks=m))
    peak = max(int(np.prod(shape)) for _, shape in log)
    assert peak <= n * m + m * m + n * d
    assert peak < n * n or n <= m


def test_nystrom_batched_heads_match_loop():
    rng = make_rng(13)
    Q, K, V = (rng.normal(size=(2, 3, 20, 4)) for _ in range(3))
    cfg = AttentionConfig(landmarks=5)
    out = nystrom_attention(Q, K, V, cfg).data
    for b in range(2):
        for h in range(3):
            np.testing.assert_allclose(out[b, h], nystrom_attention(Q[b, h], K[b, h], V[b, h], cfg).data, atol=1e-12)


# ---------------------------------------------------------------- registers and positions

def test_registers_append_and_strip():
    X = make_rng(14).normal(size=(10, 6))
    assert add_registers(X, Registers(0, 6)).data is not None
    np.testing.assert_array_equal(add_registers(X, Registers(0, 6)).data, X)
    out = add_registers(X, Registers(4, 6, rng=make_rng(15)))
    assert out.shape == (14, 6)
    np.testing.assert_array_equal(out.data[:10], X)
    np.testing.assert_array_equal(strip_registers(out, 4).data, X)
    np.testing.assert_array_equal(strip_registers(X, 0).data, X)


@pytest.mark.parametrize("seed", range(5))
def test_register_round_trip_shapes(seed):
    rng = make_rng(16, seed)
    n, r, c = int(rng.integers(1, 30)), int(rng.integers(0, 6)), int(rng.integers(1, 8))
    X = rng.normal(size=(2, n, c))
    Y = add_registers(X, Registers(r, c, rng=rng))
    assert Y.shape == (2, n + r, c)
    assert strip_registers(Y, r).shape == (2, n, c)


def test_register_errors():
    with pytest.raises(DimensionError):
        add_registers(np.zeros((3, 5)), Registers(2, 4))
    with pytest.raises(ValueError):
        strip_registers(np.zeros((3, 5)), 3)


def test_rel_pos_zero_table_is_identity():
    enc = RelPosEncoding(2, 3, 10)
    enc.p_rel.assign(np.zeros((2, 3, 10)))
    Q = make_rng(17).normal(size=(2, 7, 3))
    np.testing.assert_array_equal(apply_rel_pos(Q, enc).data, Q)


def test_rel_pos_gradient_covers_used_slice_only():
    enc = RelPosEncoding(2, 3, 10, rng=make_rng(18))
    Q = make_rng(19).normal(size=(2, 7, 3))
    with Tape() as tape:
        loss = ops.sum(apply_rel_pos(Q, enc))
    g = backward(tape, loss)[enc.p_rel.id]
    np.testing.assert_array_equal(g[:, :, :7], 1.0)
    np.testing.assert_array_equal(g[:, :, 7:], 0.0)


def test_rel_pos_finite_difference():
    rng = make_rng(20)
    enc = RelPosEncoding(2, 3, 6, rng=rng)
    Q = Parameter(rng.normal(size=(2, 5, 3)))
    w = rng.normal(size=(2, 5, 3))
    errs = check_gradients(lambda: ops.sum(ops.mul(ops.exp(apply_rel_pos(Q, enc)), w)), [Q, enc.p_rel])
    assert max(errs) < 1e-6


def test_rel_pos_too_long():
    with pytest.raises(ValueError):
        apply_rel_pos(np.zeros((1, 11, 2)), RelPosEncoding(1, 2, 10))


# ---------------------------------------------------------------- full block

@pytest.mark.parametrize("n", [4, 16, 64])
def test_block_output_has_no_register_rows(n):
    cfg = AttentionConfig(heads=2, head_dim=4, landmarks=4, registers=4, max_len=128)
    block = RegisterNystromAttention(8, cfg, rng=make_rng(21))
    assert block(make_rng(22).normal(size=(n, 8))).shape == (n, 8)


def test_block_rejects_too_many_landmarks():
    cfg = AttentionConfig(heads=1, head_dim=4, landmarks=9, registers=4)
    with pytest.raises(ConfigurationError, match="L=4.*r=4"):
        RegisterNystromAttention(4, cfg)(np.zeros((4, 4)))


def test_block_gradients_reach_every_parameter():
    rng = make_rng(23)
    cfg = AttentionConfig(heads=2, head_dim=2, landmarks=3, registers=2, max_len=16, pinv_iterations=6,
                          pinv_warn_tol=1.0)
    block = RegisterNystromAttention(4, cfg, rng=rng)
    X = Parameter(rng.normal(size=(5, 4)))
    w = rng.normal(size=(5, 4))
    params = [X, *block.parameters()]
    f = lambda: ops.sum(ops.mul(block(X), w))  # noqa: E731
    from konvlina.core.gradcheck import analytic_grad
    grads = analytic_grad(f, params)
    assert all(np.any(g != 0) for g in grads)
    assert max(check_gradients(f, params)) < 1e-4
