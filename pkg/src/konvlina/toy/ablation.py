"""Three-way neck ablation: nearest vs eNAU vs eNAU + cKSPP."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from konvlina.config import ABLATION_MODES, RunConfig
from konvlina.toy.train import train

# Mean AP reported for the three rows of the reference ablation.
REFERENCE_AP = {"nearest": 0.359, "enau": 0.365, "enau+ckspp": 0.415}
REFERENCE_AR = {"nearest": 0.371, "enau": 0.384, "enau+ckspp": 0.459}

TABLE_COLUMNS = ("mode", "AP_mean", "AP_std", "AR_mean", "AR_std", "params", "seeds")


@dataclass
class AblationRow:
    mode: str
    ap: list[float]
    ar: list[float]
    params: int

    @property
    def ap_mean(self) -> float:
        return float(np.mean(self.ap))

    @property
    def ar_mean(self) -> float:
        return float(np.mean(self.ar))

    def as_dict(self) -> dict:
        return {"mode": self.mode, "AP_mean": self.ap_mean, "AP_std": float(np.std(self.ap)),
                "AR_mean": self.ar_mean, "AR_std": float(np.std(self.ar)), "params": self.params,
                "seeds": len(self.ap)}


@dataclass
class AblationResult:
    rows: list[AblationRow]
    seeds: tuple[int, ...]

    @property
    def ordering(self) -> list[str]:
        """Modes sorted by ascending mean AP."""
        return [r.mode for r in sorted(self.rows, key=lambda r: r.ap_mean)]

    @property
    def ordering_holds(self) -> bool:
        """Strict nearest < enau < enau+ckspp in mean AP."""
        means = [r.ap_mean for r in self.rows]
        return all(a < b for a, b in zip(means, means[1:]))

    def table(self) -> str:
        lines = [f"{'mode':<12} {'AP':>16} {'AR':>16} {'params':>8}  reference AP"]
        for r in self.rows:
            d = r.as_dict()
            lines.append(f"{r.mode:<12} {d['AP_mean']:.4f} ± {d['AP_std']:.4f} {d['AR_mean']:.4f} ± {d['AR_std']:.4f} "
                         f"{r.params:>8}  {REFERENCE_AP[r.mode]:.3f}")
        lines.append(f"observed order (ascending AP): {' < '.join(self.ordering)}")
        lines.append(f"reference ordering held: {self.ordering_holds}")
        return "\n".join(lines)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=TABLE_COLUMNS)
            w.writeheader()
            for r in self.rows:
                w.writerow(r.as_dict())


def run_ablation(cfg: RunConfig, seeds: Sequence[int] | None = None, out_dir=None, log=None) -> AblationResult:
    """Train every mode on every seed with the same budget.

    Each seed fixes the data, the encoder/head initialisation and the
    augmentation draws, so the modes differ only in the neck.
    """
    seeds = tuple(cfg.ablation.seeds if seeds is None else seeds)
    if len(seeds) < 3:
        raise ValueError(f"ablation needs at least 3 seeds, got {len(seeds)}")
    out_dir = Path(out_dir) if out_dir is not None else None
    rows = []
    for mode in ABLATION_MODES:
        aps, ars, n_params = [], [], 0
        for seed in seeds:
            run_cfg = cfg.with_overrides(**{"seed": seed, "train.mode": mode})
            run_dir = out_dir / f"{mode}" / f"seed{seed}" if out_dir is not None else None
            res = train(run_cfg, run_dir)
            aps.append(res.final["AP"])
            ars.append(res.final["AR"])
            n_params = res.model.num_parameters()
            if log is not None:
                log(f"{mode:<12} seed {seed}: AP {aps[-1]:.4f}  AR {ars[-1]:.4f}")
        rows.append(AblationRow(mode, aps, ars, n_params))
    result = AblationResult(rows, seeds)
    if out_dir is not None:
        result.write_csv(out_dir / "ablation.csv")
    return result
