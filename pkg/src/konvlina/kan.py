"""Spline-edge (Kolmogorov-Arnold) layers and convolutions.

Each edge carries its own univariate function

    phi(x) = w1 * sum_i c_i B_i(x) + w2 * silu(x)

where B_i are degree-k B-splines on a uniform grid over [lo, hi]. The spline
term sees x clamped to the grid range; the silu term does not.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np

from konvlina.core import ops
from konvlina.core.layers import Module
from konvlina.core.tensor import ConfigurationError, DimensionError, Parameter, Tensor, as_tensor, record


@dataclass(frozen=True)
class SplineBasis:
    degree: int = 3
    grid_size: int = 5
    lo: float = -1.0
    hi: float = 1.0

    def __post_init__(self):
        if self.degree < 0 or self.grid_size < 1 or not self.hi > self.lo:
            raise ConfigurationError(f"invalid spline basis {self}")

    @cached_property
    def knots(self) -> np.ndarray:
        """g+1 grid boundaries extended by ``degree`` knots on each side."""
        h = (self.hi - self.lo) / self.grid_size
        return self.lo + h * np.arange(-self.degree, self.grid_size + self.degree + 1)

    @property
    def n_basis(self) -> int:
        return self.grid_size + self.degree


def _cox_de_boor(x: np.ndarray, basis: SplineBasis) -> tuple[np.ndarray, np.ndarray | None]:
    """Degree-k and degree-(k-1) basis values at already-clamped ``x``."""
    t, k = basis.knots, basis.degree
    # x == hi is assigned to the last interior interval so the sum stays 1.
    j = np.clip(np.searchsorted(t, x, side="right") - 1, k, basis.grid_size + k - 1)
    B = np.zeros(x.shape + (len(t) - 1,))
    np.put_along_axis(B, j[..., None], 1.0, axis=-1)
    lower = None
    xe = x[..., None]
    for d in range(1, k + 1):
        n = len(t) - d - 1
        left = (xe - t[:n]) / (t[d:d + n] - t[:n]) * B[..., :n]
        right = (t[d + 1:d + 1 + n] - xe) / (t[d + 1:d + 1 + n] - t[1:n + 1]) * B[..., 1:n + 1]
        lower, B = B, left + right
    return B, lower


def basis_matrix(x, basis: SplineBasis, with_derivative: bool = False):
    """Evaluate all basis functions at every entry of ``x``.

    Returns an array of shape ``x.shape + (n_basis,)``; with
    ``with_derivative`` also the x-derivatives, zero where x was clamped.
    """
    x = np.asarray(x, dtype=np.float64)
    xc = np.clip(x, basis.lo, basis.hi)
    B, lower = _cox_de_boor(xc, basis)
    if not with_derivative:
        return B
    k, t, n = basis.degree, basis.knots, basis.n_basis
    if k == 0:
        return B, np.zeros_like(B)
    dB = k * (lower[..., :n] / (t[k:k + n] - t[:n])
              - lower[..., 1:n + 1] / (t[k + 1:k + 1 + n] - t[1:n + 1]))
    inside = ((x >= basis.lo) & (x <= basis.hi))[..., None]
    return B, dB * inside


def bspline_basis(x: float, basis: SplineBasis) -> np.ndarray:
    """The ``g + k`` basis values at scalar ``x`` (clamped to the grid)."""
    return basis_matrix(np.float64(x), basis)


def spline_basis(x, basis: SplineBasis) -> Tensor:
    """Differentiable basis expansion ``(...) -> (..., n_basis)``."""
    x = as_tensor(x)
    B, dB = basis_matrix(x.data, basis, with_derivative=True)
    return record("spline_basis", B, (x,), lambda g: ((g * dB).sum(axis=-1),))


def identity_coefficients(basis: SplineBasis) -> np.ndarray:
    """Coefficients whose spline reproduces y = x on [lo, hi].

    Solved as a least-squares fit on a dense sample; the spline space holds
    every polynomial of degree <= k, so the fit is exact.
    """
    xs = np.linspace(basis.lo, basis.hi, 8 * basis.n_basis + 1)
    coeffs, *_ = np.linalg.lstsq(basis_matrix(xs, basis), xs, rcond=None)
    return coeffs


class PhiEdge(Module):
    """One learnable edge function."""

    def __init__(self, basis: SplineBasis | None = None, coeffs=None, w1: float = 1.0, w2: float = 1.0,
                 rng: np.random.Generator | None = None):
        self.basis = basis or SplineBasis()
        if coeffs is None:
            rng = rng or np.random.default_rng(0)
            coeffs = rng.normal(0.0, 0.1, size=self.basis.n_basis)
        coeffs = np.asarray(coeffs, dtype=np.float64)
        if coeffs.shape != (self.basis.n_basis,):
            raise DimensionError(f"expected {self.basis.n_basis} coefficients, got {coeffs.shape}")
        self.w1 = Parameter(np.array(w1, dtype=np.float64))
        self.w2 = Parameter(np.array(w2, dtype=np.float64))
        self.coeffs = Parameter(coeffs)

    @classmethod
    def identity(cls, basis: SplineBasis | None = None) -> "PhiEdge":
        basis = basis or SplineBasis()
        return cls(basis, identity_coefficients(basis), w1=1.0, w2=0.0)

    @classmethod
    def zero(cls, basis: SplineBasis | None = None) -> "PhiEdge":
        basis = basis or SplineBasis()
        return cls(basis, np.zeros(basis.n_basis), w1=0.0, w2=0.0)


def phi_eval(x, edge: PhiEdge) -> Tensor:
    """Apply one edge function elementwise."""
    x = as_tensor(x)
    spline = ops.matmul(spline_basis(x, edge.basis), ops.reshape(edge.coeffs, (-1, 1)))
    spline = ops.reshape(spline, x.shape)
    return ops.add(ops.mul(edge.w1, spline), ops.mul(edge.w2, ops.silu(x)))


class _EdgeGrid(Module):
    """Dense ``out x in`` grid of edge functions stored as stacked parameters."""

    def __init__(self, n_in: int, n_out: int, basis: SplineBasis | None, rng: np.random.Generator | None,
                 coeff_std: float = 0.1):
        self.basis = basis or SplineBasis()
        self.n_in, self.n_out = n_in, n_out
        rng = rng or np.random.default_rng(0)
        self.coeffs = Parameter(rng.normal(0.0, coeff_std, size=(n_out, n_in, self.basis.n_basis)))
        self.w1 = Parameter(np.ones((n_out, n_in)))
        self.w2 = Parameter(np.ones((n_out, n_in)))

    def edge(self, q: int, p: int) -> PhiEdge:
        """Snapshot of edge (output q, input p) as a standalone PhiEdge."""
        return PhiEdge(self.basis, self.coeffs.data[q, p].copy(), float(self.w1.data[q, p]), float(self.w2.data[q, p]))

    def set_edge(self, q: int, p: int, edge: PhiEdge) -> None:
        for name in ("coeffs", "w1", "w2"):
            param = getattr(self, name)
            new = param.data.copy()
            new[q, p] = getattr(edge, name).data
            param.assign(new)

    def fill(self, edge: PhiEdge) -> None:
        """Set every edge to copies of ``edge``."""
        self.coeffs.assign(np.broadcast_to(edge.coeffs.data, self.coeffs.shape))
        self.w1.assign(np.full(self.w1.shape, float(edge.w1.data)))
        self.w2.assign(np.full(self.w2.shape, float(edge.w2.data)))

    def apply(self, x: Tensor) -> Tensor:
        """``(..., n_in) -> (..., n_out)`` with ``out_q = sum_p phi_qp(x_p)``."""
        if x.ndim == 1:
            return ops.reshape(self.apply(ops.reshape(x, (1, -1))), (self.n_out,))
        lead = x.shape[:-1]
        nb = self.basis.n_basis
        B = ops.reshape(spline_basis(x, self.basis), (*lead, self.n_in * nb))
        weighted = ops.mul(self.coeffs, ops.reshape(self.w1, (self.n_out, self.n_in, 1)))
        spline = ops.matmul(B, ops.swapaxes(ops.reshape(weighted, (self.n_out, self.n_in * nb)), 0, 1))
        base = ops.matmul(ops.silu(x), ops.swapaxes(self.w2, 0, 1))
        return ops.add(spline, base)

    def state_dict(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {}
        for q in range(self.n_out):
            for p in range(self.n_in):
                key = f"{prefix}edge.{q}.{p}"
                out[key + ".coeffs"] = self.coeffs.data[q, p]
                out[key + ".w1"] = self.w1.data[q, p]
                out[key + ".w2"] = self.w2.data[q, p]
        return out

    def load_state_dict(self, state: dict[str, np.ndarray], prefix: str = "") -> None:
        coeffs = np.empty(self.coeffs.shape)
        w1, w2 = np.empty(self.w1.shape), np.empty(self.w2.shape)
        for q in range(self.n_out):
            for p in range(self.n_in):
                key = f"{prefix}edge.{q}.{p}"
                coeffs[q, p] = state[key + ".coeffs"]
                w1[q, p] = state[key + ".w1"]
                w2[q, p] = state[key + ".w2"]
        self.coeffs.assign(coeffs)
        self.w1.assign(w1)
        self.w2.assign(w2)


class KanLayer(_EdgeGrid):
    """``in_dim -> out_dim`` layer; output q sums its incoming edges."""

    def __init__(self, in_dim: int, out_dim: int, basis: SplineBasis | None = None,
                 rng: np.random.Generator | None = None):
        super().__init__(in_dim, out_dim, basis, rng)

    @property
    def in_dim(self) -> int:
        return self.n_in

    @property
    def out_dim(self) -> int:
        return self.n_out

    def __call__(self, x) -> Tensor:
        return kan_linear_forward(x, self)


class KanConvKernel(_EdgeGrid):
    """``c_out x c_in x k x k`` grid of edge functions for KAN convolution.

    Input index p enumerates (channel, kernel row, kernel col) in that order.
    """

    def __init__(self, c_in: int, c_out: int, kernel_size: int = 1, basis: SplineBasis | None = None,
                 rng: np.random.Generator | None = None):
        self.c_in, self.c_out, self.kernel_size = c_in, c_out, kernel_size
        super().__init__(c_in * kernel_size * kernel_size, c_out, basis, rng)

    def __call__(self, x, stride: int = 1, padding: int = 0) -> Tensor:
        return kan_conv2d(x, self, stride, padding)


def kan_linear_forward(x, layer: KanLayer) -> Tensor:
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[-1] != layer.in_dim:
        raise ValueError(f"KAN layer expects last dim {layer.in_dim}, got shape {x.shape}")
    return layer.apply(x)


def kan_stack_forward(x, layers: Sequence[KanLayer]) -> Tensor:
    for a, b in zip(layers, layers[1:]):
        if a.out_dim != b.in_dim:
            raise ConfigurationError(f"KAN stack dims do not chain: {a.out_dim} -> {b.in_dim}")
    out = as_tensor(x)
    for layer in layers:
        out = kan_linear_forward(out, layer)
    return out


def kan_conv2d(x, kernel: KanConvKernel, stride: int = 1, padding: int = 0) -> Tensor:
    """Sliding-window KAN convolution on ``(..., C_in, H, W)``."""
    x = as_tensor(x)
    if x.ndim < 3 or x.shape[-3] != kernel.c_in:
        raise DimensionError(f"KAN conv expects {kernel.c_in} input channels, got shape {x.shape}")
    k = kernel.kernel_size
    H, W = x.shape[-2:]
    cols = ops.unfold(x, k, stride, padding)
    y = kernel.apply(cols)
    Ho, Wo = (H + 2 * padding - k) // stride + 1, (W + 2 * padding - k) // stride + 1
    return ops.reshape(ops.swapaxes(y, -1, -2), (*x.shape[:-3], kernel.c_out, Ho, Wo))
