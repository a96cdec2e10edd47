"""Registry of parameterized ops for the finite-difference gradient suite.

Each entry builds a seeded fixture and returns ``(loss_fn, params)`` where
``loss_fn`` is a scalar-valued closure over the fixture. Every trainable
parameter group of the library appears in exactly one entry.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from konvlina.attention import (
    AttentionConfig,
    RegisterNystromAttention,
    Registers,
    RelPosEncoding,
    add_registers,
    apply_rel_pos,
    exact_attention,
    nystrom_attention,
    pinv,
    strip_registers,
)
from konvlina.core import ops
from konvlina.core.gradcheck import check_gradients
from konvlina.core.layers import Conv2d, Deconv2d, Linear
from konvlina.core.rng import make_rng
from konvlina.core.tensor import Parameter
from konvlina.kan import KanConvKernel, KanLayer, PhiEdge, SplineBasis, kan_stack_forward, phi_eval
from konvlina.neck import CKSPP, ENAU, FeaturePyramid, Neck, NeckConfig

Fixture = Callable[[np.random.Generator], tuple[Callable, list[Parameter]]]
REGISTRY: dict[str, Fixture] = {}


def register(name: str):
    def deco(fn: Fixture) -> Fixture:
        if name in REGISTRY:
            raise ValueError(f"gradient fixture {name!r} registered twice")
        REGISTRY[name] = fn
        return fn
    return deco


def _weighted(out_fn, shape_rng: np.random.Generator):
    """Scalar ``sum(w * out)`` with a fixed random ``w`` drawn on first use."""
    cache = {}

    def loss():
        out = out_fn()
        if "w" not in cache:
            cache["w"] = shape_rng.normal(size=out.shape)
        return ops.sum(ops.mul(out, cache["w"]))
    return loss


def _small_attention(**kw) -> AttentionConfig:
    base = dict(heads=2, head_dim=2, landmarks=3, registers=2, max_len=64, pinv_iterations=6, pinv_warn_tol=np.inf)
    base.update(kw)
    return AttentionConfig(**base)


@register("phi_edge")
def _phi(rng):
    edge = PhiEdge(SplineBasis(), rng=rng)
    x = Parameter(rng.uniform(-0.9, 0.9, size=7))
    return _weighted(lambda: phi_eval(x, edge), rng), [x, *edge.parameters()]


@register("kan_layer")
def _kan_layer(rng):
    layers = [KanLayer(3, 4, rng=rng), KanLayer(4, 2, rng=rng)]
    x = Parameter(rng.uniform(-0.9, 0.9, size=(5, 3)))
    params = [x] + [p for layer in layers for p in layer.parameters()]
    return _weighted(lambda: kan_stack_forward(x, layers), rng), params


@register("kan_conv2d")
def _kan_conv(rng):
    kernel = KanConvKernel(2, 2, 2, rng=rng)
    x = Parameter(rng.uniform(-0.9, 0.9, size=(2, 4, 4)))
    return _weighted(lambda: kernel(x, stride=1, padding=1), rng), [x, *kernel.parameters()]


@register("conv2d")
def _conv(rng):
    conv = Conv2d(2, 3, 3, stride=2, padding=1, rng=rng)
    x = Parameter(rng.normal(size=(2, 5, 5)))
    return _weighted(lambda: conv(x), rng), [x, *conv.parameters()]


@register("deconv2d")
def _deconv(rng):
    up = Deconv2d(2, 3, stride=2, kernel_size=4, padding=1, rng=rng)
    x = Parameter(rng.normal(size=(2, 3, 3)))
    return _weighted(lambda: up(x), rng), [x, *up.parameters()]


@register("linear")
def _linear(rng):
    lin = Linear(4, 3, rng=rng)
    x = Parameter(rng.normal(size=(5, 4)))
    return _weighted(lambda: lin(x), rng), [x, *lin.parameters()]


@register("pinv")
def _pinv(rng):
    A = Parameter(np.eye(4) + 0.3 * rng.uniform(size=(4, 4)))
    return _weighted(lambda: pinv(A, 8), rng), [A]


@register("exact_attention")
def _exact(rng):
    Q, K, V = (Parameter(rng.normal(size=(2, 6, 3))) for _ in range(3))
    return _weighted(lambda: exact_attention(Q, K, V), rng), [Q, K, V]


@register("nystrom_attention")
def _nystrom(rng):
    Q, K, V = (Parameter(rng.normal(size=(2, 8, 3))) for _ in range(3))
    cfg = _small_attention(heads=2, head_dim=3, landmarks=3)
    return _weighted(lambda: nystrom_attention(Q, K, V, cfg), rng), [Q, K, V]


@register("registers")
def _registers(rng):
    regs = Registers(3, 4, rng=rng, std=0.5)
    X = Parameter(rng.normal(size=(5, 4)))
    # Softmax mixing makes the register rows matter for the kept rows.
    fn = lambda: strip_registers(exact_attention(*(add_registers(X, regs),) * 3), 3)  # noqa: E731
    return _weighted(fn, rng), [X, *regs.parameters()]


@register("rel_pos")
def _rel_pos(rng):
    enc = RelPosEncoding(2, 3, 10, rng=rng, std=0.5)
    Q = Parameter(rng.normal(size=(2, 6, 3)))
    K = rng.normal(size=(2, 6, 3))
    return _weighted(lambda: exact_attention(apply_rel_pos(Q, enc), K, K), rng), [Q, *enc.parameters()]


@register("attention_block")
def _block(rng):
    block = RegisterNystromAttention(4, _small_attention(), rng=rng)
    X = Parameter(rng.normal(size=(6, 4)))
    return _weighted(lambda: block(X), rng), [X, *block.parameters()]


@register("ckspp")
def _ckspp(rng):
    block = CKSPP(2, 2, scales=(1, 2, 3), rng=rng)
    X = Parameter(rng.uniform(-0.9, 0.9, size=(2, 4, 4)))
    return _weighted(lambda: block(X), rng), [X, *block.parameters()]


@register("enau")
def _enau(rng):
    block = ENAU(3, 4, 2, _small_attention(), rng=rng)
    X = Parameter(rng.normal(size=(3, 2, 3)))
    return _weighted(lambda: block(X), rng), [X, *block.parameters()]


@register("neck")
def _neck(rng):
    cfg = NeckConfig(c_out=4, c_red=4, scales=(1, 2), attention=_small_attention(landmarks=2))
    neck = Neck((2, 2, 2), cfg, rng=rng)
    pyr = FeaturePyramid(tuple(rng.normal(size=(2, 8 // 2**i, 8 // 2**i)) for i in range(3)))
    ws = [rng.normal(size=(4, 8 // 2**i, 8 // 2**i)) for i in range(3)]

    def loss():
        out = neck(pyr)
        parts = [ops.sum(ops.mul(t, w)) for t, w in zip(out, ws)]
        return ops.add(ops.add(parts[0], parts[1]), parts[2])
    return loss, neck.parameters()


@register("detector_head")
def _head(rng):
    # Imported lazily: the toy package depends on this module's siblings.
    from konvlina.toy.model import DetectorHead, build_targets, detection_loss
    from konvlina.toy.scene import make_dataset

    head = DetectorHead(3, 2, rng=rng)
    for conv in head.convs:
        conv.weight.assign(rng.normal(size=conv.weight.shape))
    scenes = make_dataset(int(rng.integers(1 << 30)), "gradcheck", 2, size=32, num_classes=2)
    targets = build_targets(scenes, 2)
    pyr = FeaturePyramid(tuple(rng.normal(size=(2, 3, 32 // s, 32 // s)) for s in (4, 8, 16)))
    return (lambda: detection_loss(head(pyr), targets)), head.parameters()


@dataclass
class SuiteResult:
    name: str
    max_rel_error: float
    n_params: int


def run_suite(seed: int = 0, h: float = 1e-5, names=None) -> list[SuiteResult]:
    out = []
    for name in names or REGISTRY:
        fn, params = REGISTRY[name](make_rng(seed, "gradcheck", name))
        errs = check_gradients(fn, params, h)
        out.append(SuiteResult(name, float(max(errs)), int(sum(p.size for p in params))))
    return out
