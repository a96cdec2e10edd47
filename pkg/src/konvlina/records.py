"""Append-only measurement log shared by every CLI command.

Timestamps are logical (a per-run sequence number) so that a command's
output files depend only on its version, config and seed.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import astuple, dataclass, fields
from pathlib import Path

from konvlina import __version__
from konvlina.config import RunConfig, dump_config


@dataclass(frozen=True)
class MetricsRow:
    experiment: str
    timestamp: int
    key: str
    value: float
    unit: str


def experiment_id(command: str, cfg: RunConfig) -> str:
    digest = hashlib.sha256(f"{__version__}\n{command}\n{dump_config(cfg)}".encode()).hexdigest()
    return f"{command}-{digest[:12]}"


class EventLog:
    """CSV of :class:`MetricsRow`, flushed after every append."""

    def __init__(self, path: Path | str | None, experiment: str):
        self.experiment = experiment
        self._seq = 0
        self._f = None
        if path is not None:
            self._f = open(path, "w", newline="")
            self._w = csv.writer(self._f)
            self._w.writerow([f.name for f in fields(MetricsRow)])
            self._f.flush()

    def append(self, key: str, value: float, unit: str = "") -> MetricsRow:
        row = MetricsRow(self.experiment, self._seq, key, float(value), unit)
        self._seq += 1
        if self._f is not None:
            self._w.writerow(astuple(row))
            self._f.flush()
        return row

    def close(self) -> None:
        if self._f is not None:
            self._f.close()
            self._f = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
