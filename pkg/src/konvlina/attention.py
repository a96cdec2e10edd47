"""Softmax attention, its Nystrom landmark approximation, registers and
learned positional offsets.

All attention functions accept ``(..., N, d)`` operands so heads and batch
ride along as leading axes.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from konvlina.core import ops
from konvlina.core.layers import Linear, Module
from konvlina.core.tensor import ConfigurationError, DimensionError, Parameter, Tensor, as_tensor

LANDMARK_MODES = ("segment-means", "strided-subset")


class NumericalQualityWarning(RuntimeWarning):
    """The iterative pseudo-inverse did not reach its residual target."""


@dataclass
class AttentionConfig:
    heads: int = 4
    head_dim: int = 8
    landmarks: int = 16
    registers: int = 4
    landmark_mode: str = "segment-means"
    pinv_iterations: int = 12
    # Relative Penrose residual above which the result is flagged.
    pinv_warn_tol: float = 1e-2
    max_len: int = 1024

    def __post_init__(self):
        if self.landmarks < 1:
            raise ConfigurationError("landmark count m must be >= 1")
        if self.registers < 0:
            raise ConfigurationError("register count r must be >= 0")
        if self.landmark_mode not in LANDMARK_MODES:
            raise ConfigurationError(f"landmark_mode must be one of {LANDMARK_MODES}, got {self.landmark_mode!r}")

    @property
    def model_dim(self) -> int:
        return self.heads * self.head_dim


def _check_qkv(Q: Tensor, K: Tensor, V: Tensor) -> None:
    if Q.ndim < 2 or Q.shape[-1] != K.shape[-1] or K.shape[-2] != V.shape[-2] or Q.shape[:-2] != K.shape[:-2]:
        raise DimensionError(f"attention shapes disagree: Q{Q.shape} K{K.shape} V{V.shape}")


def exact_attention(Q, K, V) -> Tensor:
    """Dense ``softmax(Q K^T / sqrt(d_k)) V``; materialises the N x N matrix."""
    Q, K, V = as_tensor(Q), as_tensor(K), as_tensor(V)
    _check_qkv(Q, K, V)
    scale = 1.0 / math.sqrt(Q.shape[-1])
    attn = ops.softmax(ops.mul(ops.matmul(Q, ops.swapaxes(K, -1, -2)), scale), axis=-1)
    return ops.matmul(attn, V)


def segment_matrix(n: int, m: int) -> np.ndarray:
    """Row i averages rows [floor(i*n/m), floor((i+1)*n/m)) of an n-row input."""
    P = np.zeros((m, n))
    for i in range(m):
        lo, hi = (i * n) // m, ((i + 1) * n) // m
        P[i, lo:hi] = 1.0 / (hi - lo)
    return P


def select_landmarks(K, m: int, mode: str = "segment-means") -> Tensor:
    K = as_tensor(K)
    n = K.shape[-2]
    if not 1 <= m <= n:
        raise ValueError(f"landmark count m={m} must satisfy 1 <= m <= N={n}")
    if mode == "segment-means":
        return ops.matmul(segment_matrix(n, m), K)
    if mode == "strided-subset":
        return ops.take(K, (np.arange(m) * n) // m, axis=-2)
    raise ValueError(f"unknown landmark mode {mode!r}")


def pinv(A, iterations: int = 12) -> Tensor:
    """Moore-Penrose pseudo-inverse by Newton-Schulz iteration.

    ``Z0 = A^T / (||A||_1 ||A||_inf)``, then ``Z <- Z (2I - A Z)``. Every step
    is a recorded op, so gradients flow through the iteration itself.
    """
    A = as_tensor(A)
    if not np.all(np.isfinite(A.data)):
        raise ValueError("pinv input contains NaN or Inf")
    m = A.shape[-1]
    absA = ops.absolute(A)
    norm1 = ops.amax(ops.sum(absA, axis=-2), axis=-1, keepdims=True)
    norm_inf = ops.amax(ops.sum(absA, axis=-1), axis=-1, keepdims=True)
    scale = ops.reshape(ops.mul(norm1, norm_inf), (*A.shape[:-2], 1, 1))
    Z = ops.div(ops.swapaxes(A, -1, -2), scale)
    two_eye = 2.0 * np.eye(m)
    for _ in range(iterations):
        Z = ops.matmul(Z, ops.sub(two_eye, ops.matmul(A, Z)))
    return Z


def penrose_residual(A: np.ndarray, Z: np.ndarray) -> float:
    """Worst ``||A Z A - A||_F / ||A||_F`` over any leading batch axes."""
    A = np.asarray(A)
    Z = np.asarray(Z)
    num = np.linalg.norm(A @ Z @ A - A, axis=(-2, -1))
    den = np.maximum(np.linalg.norm(A, axis=(-2, -1)), 1e-300)
    return float(np.max(num / den))


def nystrom_attention(Q, K, V, cfg: AttentionConfig | None = None, *, landmarks: int | None = None,
                      mode: str | None = None, iterations: int | None = None) -> Tensor:
    """Landmark approximation of softmax attention.

    ``softmax(Q Km^T/s) pinv(softmax(Km Km^T/s)) softmax(Km K^T/s) V`` with
    ``s = sqrt(d_k)``, evaluated right-to-left so no N x N array is formed.
    The returned tensor carries ``meta["pinv_residual"]``.
    """
    cfg = cfg or AttentionConfig()
    m = cfg.landmarks if landmarks is None else landmarks
    mode = cfg.landmark_mode if mode is None else mode
    iterations = cfg.pinv_iterations if iterations is None else iterations
    Q, K, V = as_tensor(Q), as_tensor(K), as_tensor(V)
    _check_qkv(Q, K, V)
    scale = 1.0 / math.sqrt(Q.shape[-1])
    Km = select_landmarks(K, m, mode)
    KmT = ops.swapaxes(Km, -1, -2)
    left = ops.softmax(ops.mul(ops.matmul(Q, KmT), scale), axis=-1)
    core = ops.softmax(ops.mul(ops.matmul(Km, KmT), scale), axis=-1)
    right = ops.softmax(ops.mul(ops.matmul(Km, ops.swapaxes(K, -1, -2)), scale), axis=-1)
    core_inv = pinv(core, iterations)
    out = ops.matmul(left, ops.matmul(core_inv, ops.matmul(right, V)))
    residual = penrose_residual(core.data, core_inv.data)
    out.meta = {"pinv_residual": residual}
    if residual > cfg.pinv_warn_tol:
        out.meta["warning"] = f"pinv residual {residual:.3g} above {cfg.pinv_warn_tol:g}"
        warnings.warn(out.meta["warning"], NumericalQualityWarning, stacklevel=2)
    return out


class Registers(Module):
    """``r`` trainable tokens appended to the sequence before attention."""

    def __init__(self, count: int, dim: int, rng: np.random.Generator | None = None, std: float = 0.02):
        rng = rng or np.random.default_rng(0)
        self.count, self.dim = count, dim
        self.tokens = Parameter(rng.normal(0.0, std, size=(count, dim)))


def add_registers(X, regs: Registers) -> Tensor:
    X = as_tensor(X)
    if X.shape[-1] != regs.dim:
        raise DimensionError(f"register width {regs.dim} does not match token width {X.shape[-1]}")
    if regs.count == 0:
        return X
    R = regs.tokens if X.ndim == 2 else ops.broadcast_to(regs.tokens, (*X.shape[:-2], regs.count, regs.dim))
    return ops.concat([X, R], axis=-2)


def strip_registers(Y, r: int) -> Tensor:
    Y = as_tensor(Y)
    n = Y.shape[-2]
    if n <= r:
        raise ValueError(f"cannot strip {r} registers from a sequence of {n} rows")
    if r == 0:
        return Y
    return ops.slice_axis(Y, -2, 0, n - r)


class RelPosEncoding(Module):
    """Learned per-head, per-position offsets ``p_rel`` of shape (h, D_h, L_max)."""

    def __init__(self, heads: int, head_dim: int, max_len: int, rng: np.random.Generator | None = None,
                 std: float = 0.02):
        rng = rng or np.random.default_rng(0)
        self.max_len = max_len
        self.p_rel = Parameter(rng.normal(0.0, std, size=(heads, head_dim, max_len)))


def apply_rel_pos(Q, enc: RelPosEncoding) -> Tensor:
    """Add the first N positions of ``p_rel`` to ``Q`` of shape (..., h, N, D_h)."""
    Q = as_tensor(Q)
    n = Q.shape[-2]
    if n > enc.max_len:
        raise ValueError(f"sequence length {n} exceeds positional table length {enc.max_len}")
    pos = ops.swapaxes(ops.slice_axis(enc.p_rel, -1, 0, n), -1, -2)
    return ops.add(Q, pos)


class RegisterNystromAttention(Module):
    """Multi-head self-attention over ``(..., L, C)`` tokens.

    Registers are appended before the Q/K/V projections, positional offsets
    are added to Q, and register rows are dropped from the output.
    """

    def __init__(self, dim: int, cfg: AttentionConfig, rng: np.random.Generator | None = None,
                 exact: bool = False):
        if cfg.model_dim != dim:
            raise ConfigurationError(f"heads*head_dim = {cfg.model_dim} must equal token width {dim}")
        rng = rng or np.random.default_rng(0)
        self.cfg = cfg
        self.exact = exact
        self.q = Linear(dim, dim, rng=rng)
        self.k = Linear(dim, dim, rng=rng)
        self.v = Linear(dim, dim, rng=rng)
        self.registers = Registers(cfg.registers, dim, rng=rng)
        self.rel_pos = RelPosEncoding(cfg.heads, cfg.head_dim, cfg.max_len, rng=rng)

    def _split(self, x: Tensor) -> Tensor:
        *lead, n, _ = x.shape
        return ops.swapaxes(ops.reshape(x, (*lead, n, self.cfg.heads, self.cfg.head_dim)), -2, -3)

    def __call__(self, X) -> Tensor:
        X = as_tensor(X)
        L, r, m = X.shape[-2], self.cfg.registers, self.cfg.landmarks
        if not self.exact and m > L + r:
            raise ConfigurationError(f"landmarks m={m} exceed sequence length L={L} plus registers r={r}")
        XR = add_registers(X, self.registers)
        Q = apply_rel_pos(self._split(self.q(XR)), self.rel_pos)
        K, V = self._split(self.k(XR)), self._split(self.v(XR))
        if self.exact:
            Y = exact_attention(Q, K, V)
        else:
            Y = nystrom_attention(Q, K, V, self.cfg)
        *lead, h, n, d = Y.shape
        merged = ops.reshape(ops.swapaxes(Y, -2, -3), (*lead, n, h * d))
        return strip_registers(merged, r)
