"""Tiny encoder, neck and anchor-free head, plus targets, loss and decoding."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from konvlina.core import ops
from konvlina.core.layers import Conv2d, Module
from konvlina.core.rng import make_rng
from konvlina.core.tensor import Tensor, as_tensor
from konvlina.neck import FeaturePyramid, Neck, NeckConfig
from konvlina.toy.metrics import Detection
from konvlina.toy.scene import SyntheticScene, box_iou, size_band

STRIDES = (4, 8, 16)
# Objectness bias so the initial positive rate is about 1%.
OBJ_PRIOR = float(np.log(0.01 / 0.99))


class Encoder(Module):
    """Strided 3x3 conv stack giving features at strides 4, 8 and 16."""

    def __init__(self, widths: Sequence[int] = (8, 16, 16, 16), rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        c = [3, *widths]
        self.convs = [Conv2d(c[i], c[i + 1], 3, stride=2, padding=1, rng=rng) for i in range(4)]

    @property
    def out_channels(self) -> tuple[int, int, int]:
        return tuple(conv.weight.shape[0] for conv in self.convs[1:])

    def __call__(self, x) -> FeaturePyramid:
        feats = []
        h = as_tensor(x)
        for conv in self.convs:
            h = ops.relu(conv(h))
            feats.append(h)
        return FeaturePyramid(tuple(feats[1:]))


class DetectorHead(Module):
    """Per-level 1x1 conv: objectness, 4 box offsets, class logits."""

    def __init__(self, c_in: int, num_classes: int, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.num_classes = num_classes
        self.convs = [Conv2d(c_in, 5 + num_classes, 1, rng=rng) for _ in STRIDES]
        for conv in self.convs:
            conv.weight.assign(conv.weight.data * 0.1)
            b = np.zeros(5 + num_classes)
            b[0] = OBJ_PRIOR
            conv.bias.assign(b)

    @property
    def out_channels(self) -> int:
        return 5 + self.num_classes

    def __call__(self, pyr: FeaturePyramid) -> list[Tensor]:
        return [conv(p) for conv, p in zip(self.convs, pyr)]


class Detector(Module):
    def __init__(self, neck_cfg: NeckConfig, widths=(8, 16, 16, 16), num_classes: int = 4, seed: int = 0):
        # Separate init substreams so ablation modes share encoder and head weights.
        self.encoder = Encoder(widths, rng=make_rng(seed, "init", "encoder"))
        self.neck = Neck(self.encoder.out_channels, neck_cfg, rng=make_rng(seed, "init", "neck"))
        self.head = DetectorHead(neck_cfg.c_out, num_classes, rng=make_rng(seed, "init", "head"))

    def __call__(self, images) -> list[Tensor]:
        return self.head(self.neck(self.encoder(images)))


def build_targets(scenes: Sequence[SyntheticScene], num_classes: int) -> list[dict[str, np.ndarray]]:
    """Centre-cell assignment; the level is chosen by the box's size band.

    Box targets are the centre offset from the cell centre in cell units and
    ``log(w / stride)``, ``log(h / stride)``.
    """
    B = len(scenes)
    S = scenes[0].size
    out = []
    for stride in STRIDES:
        n = S // stride
        out.append({"obj": np.zeros((B, 1, n, n)), "box": np.zeros((B, 4, n, n)),
                    "cls": np.zeros((B, num_classes, n, n)), "mask": np.zeros((B, 1, n, n))})
    for b, scene in enumerate(scenes):
        for box in scene.boxes:
            lvl = size_band(box.w, box.h)
            stride = STRIDES[lvl]
            n = S // stride
            i = min(int(box.cy // stride), n - 1)
            j = min(int(box.cx // stride), n - 1)
            t = out[lvl]
            t["obj"][b, 0, i, j] = 1.0
            t["mask"][b, 0, i, j] = 1.0
            t["box"][b, :, i, j] = (box.cx / stride - (j + 0.5), box.cy / stride - (i + 0.5),
                                    np.log(box.w / stride), np.log(box.h / stride))
            t["cls"][b, :, i, j] = 0.0
            t["cls"][b, box.cls, i, j] = 1.0
    return out


def detection_loss(outputs: Sequence[Tensor], targets: Sequence[dict[str, np.ndarray]]) -> Tensor:
    """BCE objectness over all cells + smooth-L1 boxes + CE classes on matched cells.

    Every term is summed and divided by the number of positive cells.
    """
    n_pos = max(1.0, float(sum(t["mask"].sum() for t in targets)))
    total = None
    for pred, t in zip(outputs, targets):
        C = pred.shape[-3]
        obj = ops.slice_axis(pred, -3, 0, 1)
        box = ops.slice_axis(pred, -3, 1, 5)
        cls = ops.slice_axis(pred, -3, 5, C)
        l_obj = ops.sum(ops.bce_with_logits(obj, t["obj"]))
        l_box = ops.sum(ops.mul(ops.smooth_l1(ops.sub(box, t["box"])), t["mask"]))
        l_cls = ops.neg(ops.sum(ops.mul(ops.log_softmax(cls, axis=-3), t["cls"])))
        level = ops.add(ops.add(l_obj, l_box), l_cls)
        total = level if total is None else ops.add(total, level)
    return ops.div(total, n_pos)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def nms(dets: list[Detection], iou_thr: float) -> list[Detection]:
    """Greedy score-ordered suppression within each class."""
    kept: list[Detection] = []
    for d in sorted(dets, key=lambda d: -d.score):
        if all(k.cls != d.cls or box_iou(k.xyxy, d.xyxy) <= iou_thr for k in kept):
            kept.append(d)
    return kept


def decode(outputs: Sequence[np.ndarray], score_threshold: float = 0.05, nms_iou: float = 0.5,
           max_detections: int = 20) -> list[list[Detection]]:
    """Per-image detections from raw head outputs of shape (B, 5+C, n, n)."""
    B = outputs[0].shape[0]
    result = []
    for b in range(B):
        dets = []
        for stride, out in zip(STRIDES, outputs):
            o = np.asarray(out)[b]
            obj = _sigmoid(o[0])
            logits = o[5:]
            p = np.exp(logits - logits.max(axis=0))
            p /= p.sum(axis=0)
            cls = p.argmax(axis=0)
            score = obj * p.max(axis=0)
            for i, j in zip(*np.nonzero(score >= score_threshold)):
                dx, dy, tw, th = o[1:5, i, j]
                dets.append(Detection(float((j + 0.5 + dx) * stride), float((i + 0.5 + dy) * stride),
                                      float(np.exp(np.clip(tw, -6, 6)) * stride),
                                      float(np.exp(np.clip(th, -6, 6)) * stride),
                                      int(cls[i, j]), float(np.clip(score[i, j], 0.0, 1.0))))
        result.append(nms(dets, nms_iou)[:max_detections])
    return result
