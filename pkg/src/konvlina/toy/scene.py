"""Synthetic detection scenes: coloured shapes on a textured background."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from konvlina.core.rng import make_rng

# Inclusive side-length ranges in pixels: small, medium, large.
SIZE_BANDS = ((3, 6), (7, 14), (15, 28))
BAND_NAMES = ("S", "M", "L")
MAX_BOXES = 8
MAX_OVERLAP = 0.3

# Base RGB per class; each scene jitters them slightly.
CLASS_COLORS = np.array([[0.90, 0.25, 0.20], [0.20, 0.75, 0.30], [0.25, 0.35, 0.90], [0.90, 0.80, 0.20]])
SHAPES = ("square", "disc", "triangle", "cross")


@dataclass(frozen=True)
class Box:
    cx: float
    cy: float
    w: float
    h: float
    cls: int

    @property
    def xyxy(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2, self.cy - self.h / 2, self.cx + self.w / 2, self.cy + self.h / 2)


@dataclass
class SyntheticScene:
    image: np.ndarray  # (3, S, S), float64 in [0, 1]
    boxes: list[Box]

    @property
    def size(self) -> int:
        return self.image.shape[-1]


def size_band(w: float, h: float) -> int:
    """Band index from the geometric-mean side, split midway between bands."""
    side = np.sqrt(w * h)
    if side < (SIZE_BANDS[0][1] + SIZE_BANDS[1][0]) / 2:
        return 0
    if side < (SIZE_BANDS[1][1] + SIZE_BANDS[2][0]) / 2:
        return 1
    return 2


def box_iou(a: tuple, b: tuple) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def _background(rng: np.random.Generator, S: int) -> np.ndarray:
    yy, xx = np.mgrid[0:S, 0:S] / S
    tex = np.zeros((S, S))
    for _ in range(3):
        fx, fy = rng.uniform(1, 4, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        tex += np.sin(2 * np.pi * (fx * xx + fy * yy) + phase)
    tex /= 3.0
    tint = rng.uniform(0.3, 0.5, size=3)
    img = tint[:, None, None] + 0.08 * tex[None] + rng.normal(0, 0.03, size=(3, S, S))
    return img


def _shape_mask(kind: str, w: int, h: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    u = (xx + 0.5) / w
    v = (yy + 0.5) / h
    if kind == "square":
        return np.ones((h, w), dtype=bool)
    if kind == "disc":
        return (u - 0.5) ** 2 + (v - 0.5) ** 2 <= 0.25
    if kind == "triangle":
        return np.abs(u - 0.5) <= v / 2
    bar = 0.2
    return (np.abs(u - 0.5) <= bar) | (np.abs(v - 0.5) <= bar)


def generate_scene(rng: np.random.Generator, size: int = 64, num_classes: int = 4) -> SyntheticScene:
    """Draw one scene. Boxes are integer-aligned and fully inside the image."""
    if num_classes > len(CLASS_COLORS):
        raise ValueError(f"at most {len(CLASS_COLORS)} classes are renderable, got {num_classes}")
    img = _background(rng, size)
    gain = rng.uniform(0.8, 1.2)
    n_target = int(rng.integers(1, MAX_BOXES + 1))
    boxes: list[Box] = []
    placed: list[tuple] = []
    for _ in range(n_target):
        # The band is fixed before placement retries so crowding does not
        # bias the band frequencies toward small boxes.
        band = int(rng.integers(0, 3))
        lo, hi = SIZE_BANDS[band]
        for _attempt in range(50):
            w, h = (int(v) for v in rng.integers(lo, hi + 1, size=2))
            x0 = int(rng.integers(0, size - w + 1))
            y0 = int(rng.integers(0, size - h + 1))
            xyxy = (x0, y0, x0 + w, y0 + h)
            if all(box_iou(xyxy, p) <= MAX_OVERLAP for p in placed):
                break
        else:
            continue
        cls = int(rng.integers(0, num_classes))
        color = np.clip(CLASS_COLORS[cls] + rng.normal(0, 0.04, size=3), 0, 1)
        mask = _shape_mask(SHAPES[cls], w, h)
        patch = img[:, y0:y0 + h, x0:x0 + w]
        img[:, y0:y0 + h, x0:x0 + w] = np.where(mask[None], color[:, None, None], patch)
        placed.append(xyxy)
        boxes.append(Box(x0 + w / 2, y0 + h / 2, float(w), float(h), cls))
    if not boxes:
        # Unreachable in practice: the first box never collides.
        raise RuntimeError("scene generation placed no boxes")
    return SyntheticScene(np.clip(img * gain, 0.0, 1.0), boxes)


def make_dataset(seed: int, split: str, count: int, size: int = 64, num_classes: int = 4) -> list[SyntheticScene]:
    """Scenes ``0..count-1`` of the ``data/split`` substream of ``seed``."""
    return [generate_scene(make_rng(seed, "data", split, i), size, num_classes) for i in range(count)]


def flip_scene(scene: SyntheticScene, horizontal: bool, vertical: bool) -> SyntheticScene:
    img = scene.image
    S = scene.size
    boxes = scene.boxes
    if horizontal:
        img = img[:, :, ::-1]
        boxes = [Box(S - b.cx, b.cy, b.w, b.h, b.cls) for b in boxes]
    if vertical:
        img = img[:, ::-1, :]
        boxes = [Box(b.cx, S - b.cy, b.w, b.h, b.cls) for b in boxes]
    return SyntheticScene(np.ascontiguousarray(img), boxes)


def augment(scene: SyntheticScene, rng: np.random.Generator, p: float = 0.5) -> SyntheticScene:
    h, v = rng.random(2) < p
    return flip_scene(scene, bool(h), bool(v))
