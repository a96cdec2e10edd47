"""Training loop for the toy detector.

Randomness comes from named substreams of the run seed: "data" (scenes),
"init" (weights), "shuffle" (batch order) and "augment" (flips). Two runs
with the same config are bit-identical.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from konvlina.attention import NumericalQualityWarning
from konvlina.config import RunConfig, save_config
from konvlina.core.io import save_checkpoint
from konvlina.core.optim import Adam, clip_grad_norm
from konvlina.core.rng import make_rng
from konvlina.core.tensor import NumericalError, Tape, backward
from konvlina.toy.metrics import APResult, evaluate_ap
from konvlina.toy.model import Detector, build_targets, decode, detection_loss
from konvlina.toy.scene import SyntheticScene, augment, make_dataset

METRIC_COLUMNS = ("epoch", "split", "loss", "AP", "AR", "AP_S", "AP_M", "AP_L")


@dataclass
class TrainResult:
    model: Detector
    rows: list[dict] = field(default_factory=list)
    # Largest absolute register gradient seen in each epoch.
    register_grad: list[float] = field(default_factory=list)
    pinv_warnings: int = 0

    @property
    def final(self) -> dict:
        return [r for r in self.rows if r["split"] == "val"][-1]

    def state_dict(self) -> dict[str, np.ndarray]:
        return self.model.state_dict()


class MetricsWriter:
    """Append-only CSV, flushed after every row."""

    def __init__(self, path: Path | None):
        self._f = None
        if path is not None:
            self._f = open(path, "w", newline="")
            self._w = csv.DictWriter(self._f, fieldnames=METRIC_COLUMNS)
            self._w.writeheader()
            self._f.flush()

    def write(self, row: dict) -> None:
        if self._f is None:
            return
        self._w.writerow({k: ("" if row.get(k) is None else row[k]) for k in METRIC_COLUMNS})
        self._f.flush()

    def close(self) -> None:
        if self._f is not None:
            self._f.close()


def _stack(scenes: list[SyntheticScene]) -> np.ndarray:
    return np.stack([s.image for s in scenes])


def _dump_diagnostics(out_dir: Path | None, images: np.ndarray, model: Detector, epoch: int, step: int) -> str:
    norms = {name: float(np.linalg.norm(p.data)) for name, p in model.named_parameters()}
    if out_dir is None:
        worst = max(norms.items(), key=lambda kv: kv[1] if np.isfinite(kv[1]) else np.inf)
        return f"largest parameter norm {worst[0]}={worst[1]:.3g} (no --out given, nothing written)"
    diag = out_dir / "diagnostics"
    diag.mkdir(parents=True, exist_ok=True)
    save_checkpoint(diag / "last_batch.kvlc", {"images": images})
    (diag / "param_norms.json").write_text(json.dumps({"epoch": epoch, "step": step, "norms": norms}, indent=1))
    return f"diagnostics written to {diag}"


def predict(model: Detector, scenes: list[SyntheticScene], cfg: RunConfig, batch_size: int = 32):
    """Decoded detections and mean loss over ``scenes``; nothing is recorded."""
    preds = []
    losses = []
    for start in range(0, len(scenes), batch_size):
        batch = scenes[start:start + batch_size]
        outs = model(_stack(batch))
        losses.append(detection_loss(outs, build_targets(batch, cfg.model.num_classes)).item() * len(batch))
        preds.extend(decode([o.data for o in outs], cfg.train.score_threshold, cfg.train.nms_iou,
                            cfg.train.max_detections))
    return preds, float(sum(losses) / len(scenes))


def evaluate(model: Detector, scenes: list[SyntheticScene], cfg: RunConfig) -> tuple[APResult, float]:
    preds, loss = predict(model, scenes, cfg)
    res = evaluate_ap(preds, [s.boxes for s in scenes], cfg.train.iou_threshold, sweep=cfg.train.coco_sweep)
    return res, loss


def train(cfg: RunConfig, out_dir=None, log=None, on_row=None) -> TrainResult:
    """Train one detector; writes ``metrics.csv``, ``config.yaml`` and
    ``checkpoint.kvlc`` into ``out_dir`` when given.

    ``on_row`` receives every metrics row as soon as it is written.
    """
    tc = cfg.train
    seed = cfg.seed
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        save_config(cfg, out_dir / "config.yaml")
    S, C = cfg.model.image_size, cfg.model.num_classes
    train_set = make_dataset(seed, "train", tc.train_scenes, S, C)
    val_set = make_dataset(seed, "val", tc.val_scenes, S, C)

    model = Detector(cfg.neck_config(), cfg.model.widths, C, seed)
    params = model.parameters()
    register_ids = [p.id for n, p in model.named_parameters() if n.endswith("registers.tokens")]
    opt = Adam(params, lr=tc.lr, betas=(tc.beta1, tc.beta2), eps=tc.eps, weight_decay=tc.weight_decay)
    result = TrainResult(model)
    writer = MetricsWriter(out_dir / "metrics.csv" if out_dir is not None else None)
    try:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", NumericalQualityWarning)
            for epoch in range(1, tc.epochs + 1):
                order = make_rng(seed, "shuffle", epoch).permutation(len(train_set))
                total, seen, reg_max = 0.0, 0, 0.0
                for step, start in enumerate(range(0, len(order), tc.batch_size)):
                    idx = order[start:start + tc.batch_size]
                    batch = [augment(train_set[i], make_rng(seed, "augment", epoch, int(i)), tc.flip_prob)
                             for i in idx]
                    images = _stack(batch)
                    with Tape() as tape:
                        loss = detection_loss(model(images), build_targets(batch, C))
                    if not np.isfinite(loss.item()):
                        where = _dump_diagnostics(out_dir, images, model, epoch, step)
                        raise NumericalError(f"non-finite loss at epoch {epoch} step {step}; {where}")
                    grads = backward(tape, loss)
                    for pid in register_ids:
                        reg_max = max(reg_max, float(np.abs(grads[pid]).max()))
                    clip_grad_norm(grads, params, tc.grad_clip)
                    opt.step(grads)
                    total += loss.item() * len(idx)
                    seen += len(idx)
                result.register_grad.append(reg_max)
                train_row = {"epoch": epoch, "split": "train", "loss": total / seen}
                ap, val_loss = evaluate(model, val_set, cfg)
                val_row = {"epoch": epoch, "split": "val", "loss": val_loss, **ap.as_dict()}
                for row in (train_row, val_row):
                    result.rows.append(row)
                    writer.write(row)
                    if on_row is not None:
                        on_row(row)
                if log is not None:
                    log(f"epoch {epoch:3d}  train loss {train_row['loss']:.4f}  val loss {val_loss:.4f}  "
                        f"AP {ap.AP:.4f}  AR {ap.AR:.4f}")
            result.pinv_warnings = sum(1 for w in caught if issubclass(w.category, NumericalQualityWarning))
    finally:
        writer.close()
    if out_dir is not None:
        save_checkpoint(out_dir / "checkpoint.kvlc", model.state_dict())
    return result
