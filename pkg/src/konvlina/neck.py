"""cKSPP and eNAU fusion blocks and the three-level top-down neck."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from konvlina.attention import AttentionConfig, RegisterNystromAttention
from konvlina.core import ops
from konvlina.core.layers import Conv2d, Deconv2d, Module
from konvlina.core.tensor import ConfigurationError, DimensionError, Tensor, as_tensor, check_finite
from konvlina.kan import KanConvKernel, SplineBasis, kan_conv2d

UPSAMPLERS = ("enau", "nearest")


@dataclass
class FeaturePyramid:
    """Three feature maps, finest first; each level half the size of the previous."""

    levels: tuple[Tensor, Tensor, Tensor]

    def __post_init__(self):
        self.levels = tuple(as_tensor(t) for t in self.levels)
        if len(self.levels) != 3:
            raise DimensionError(f"a pyramid has exactly three levels, got {len(self.levels)}")
        for fine, coarse in zip(self.levels, self.levels[1:]):
            fh, fw = fine.shape[-2:]
            ch, cw = coarse.shape[-2:]
            if (fh, fw) != (2 * ch, 2 * cw):
                raise DimensionError(f"pyramid levels {fine.shape} and {coarse.shape} are not a 2x step")

    def __iter__(self):
        return iter(self.levels)

    def __getitem__(self, i: int) -> Tensor:
        return self.levels[i]


class CKSPP(Module):
    """Multi-scale adaptive pooling, each branch refined by a 1x1 KAN conv."""

    def __init__(self, c_in: int, c_out: int, scales: Sequence[int] = (1, 2, 3, 6),
                 basis: SplineBasis | None = None, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.c_in, self.c_out = c_in, c_out
        self.scales = tuple(scales)
        self.branches = [KanConvKernel(c_in, c_out, 1, basis, rng=rng) for _ in self.scales]
        self.fuse = Conv2d(len(self.scales) * c_out + c_in, c_out, 1, rng=rng)

    def __call__(self, x) -> Tensor:
        return ckspp_forward(x, self)

    def identity_passthrough(self) -> None:
        """Zero the branch inputs of the fusion conv and copy X straight through."""
        if self.c_in != self.c_out:
            raise ConfigurationError("identity passthrough needs c_in == c_out")
        w = np.zeros(self.fuse.weight.shape)
        offset = len(self.scales) * self.c_out
        w[np.arange(self.c_out), offset + np.arange(self.c_in), 0, 0] = 1.0
        self.fuse.weight.assign(w)
        self.fuse.bias.assign(np.zeros(self.c_out))


def ckspp_forward(X, params: CKSPP) -> Tensor:
    X = as_tensor(X)
    if X.ndim < 3 or X.shape[-3] != params.c_in:
        raise ConfigurationError(f"cKSPP configured for {params.c_in} channels, got input {X.shape}")
    H, W = X.shape[-2:]
    parts = []
    for s, kernel in zip(params.scales, params.branches):
        pooled = ops.adaptive_avg_pool2d(X, s)
        parts.append(ops.resize_nearest(kan_conv2d(pooled, kernel), (H, W)))
    parts.append(X)
    return check_finite(params.fuse(ops.concat(parts, axis=-3)), "cKSPP output")


class ENAU(Module):
    """1x1 reduction, register Nystrom attention over pixels, 2x deconvolution."""

    def __init__(self, c_in: int, c_red: int, c_out: int, attention: AttentionConfig | None = None,
                 rng: np.random.Generator | None = None, stride: int = 2):
        rng = rng or np.random.default_rng(0)
        attention = attention or AttentionConfig(heads=4, head_dim=c_red // 4)
        self.c_in, self.c_red, self.c_out = c_in, c_red, c_out
        self.reduce = Conv2d(c_in, c_red, 1, rng=rng)
        self.attn = RegisterNystromAttention(c_red, attention, rng=rng)
        self.up = Deconv2d(c_red, c_out, stride=stride, rng=rng)

    def __call__(self, x) -> Tensor:
        return enau_forward(x, self)


def enau_forward(X, params: ENAU) -> Tensor:
    X = as_tensor(X)
    if X.ndim < 3 or X.shape[-3] != params.c_in:
        raise ConfigurationError(f"eNAU configured for {params.c_in} channels, got input {X.shape}")
    *lead, _, H, W = X.shape
    red = params.reduce(X)
    tokens = ops.swapaxes(ops.reshape(red, (*lead, params.c_red, H * W)), -1, -2)
    attended = params.attn(tokens)
    fmap = ops.reshape(ops.swapaxes(attended, -1, -2), (*lead, params.c_red, H, W))
    return check_finite(params.up(fmap), "eNAU output")


class NearestUp(Module):
    """Parameter-free 2x nearest-neighbour up-sampling (ablation baseline)."""

    def __call__(self, x) -> Tensor:
        x = as_tensor(x)
        H, W = x.shape[-2:]
        return ops.resize_nearest(x, (2 * H, 2 * W))


def fuse_add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"fuse_add needs identical shapes, got {a.shape} and {b.shape}")
    return ops.add(a, b)


@dataclass
class NeckConfig:
    c_out: int = 64
    c_red: int = 32
    scales: tuple[int, ...] = (1, 2, 3, 6)
    upsample: str = "enau"
    use_ckspp: bool = True
    attention: AttentionConfig = field(default_factory=lambda: AttentionConfig(heads=4, head_dim=8, landmarks=16,
                                                                               registers=4))
    basis: SplineBasis = field(default_factory=SplineBasis)

    def __post_init__(self):
        if self.upsample not in UPSAMPLERS:
            raise ConfigurationError(f"upsample must be one of {UPSAMPLERS}, got {self.upsample!r}")
        if self.upsample == "enau" and self.attention.model_dim != self.c_red:
            raise ConfigurationError(
                f"attention heads*head_dim = {self.attention.model_dim} must equal c_red = {self.c_red}")


class Neck(Module):
    """Top-down fusion: P3 = cKSPP(F3), P_l = cKSPP(F_l) + up(P_{l+1})."""

    def __init__(self, in_channels: Sequence[int], cfg: NeckConfig | None = None,
                 rng: np.random.Generator | None = None):
        cfg = cfg or NeckConfig()
        rng = rng or np.random.default_rng(0)
        if len(in_channels) != 3:
            raise ConfigurationError("the neck takes exactly three pyramid levels")
        self.cfg = cfg
        self.lateral = [Conv2d(c, cfg.c_out, 1, rng=rng) for c in in_channels]
        self.ckspp = ([CKSPP(cfg.c_out, cfg.c_out, cfg.scales, cfg.basis, rng=rng) for _ in range(3)]
                      if cfg.use_ckspp else [])
        if cfg.upsample == "enau":
            self.up = [ENAU(cfg.c_out, cfg.c_red, cfg.c_out, cfg.attention, rng=rng) for _ in range(2)]
        else:
            self.up = [NearestUp() for _ in range(2)]

    def _level(self, i: int, f: Tensor) -> Tensor:
        x = self.lateral[i](f)
        return self.ckspp[i](x) if self.ckspp else x

    def __call__(self, pyr: FeaturePyramid) -> FeaturePyramid:
        return neck_forward(pyr, self)


def neck_forward(pyr: FeaturePyramid, neck: Neck) -> FeaturePyramid:
    if not isinstance(pyr, FeaturePyramid):
        pyr = FeaturePyramid(tuple(pyr))
    f1, f2, f3 = pyr.levels
    p3 = neck._level(2, f3)
    p2 = fuse_add(neck._level(1, f2), neck.up[1](p3))
    p1 = fuse_add(neck._level(0, f1), neck.up[0](p2))
    return FeaturePyramid((p1, p2, p3))
