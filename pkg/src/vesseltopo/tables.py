"""Per-particle probability and label tables with their TSV formats."""

from __future__ import annotations

import os
from dataclasses import dataclass, field

ARTERY = "artery"
VEIN = "vein"

PROVENANCES = ("full-pipe", "terminal-pipe", "merged", "oracle")
STAGES = ("raw", "refined")


@dataclass
class ProbabilityTable:
    """Map particle id -> probability of being an artery, with provenance."""

    probs: dict[int, float]
    provenance: str

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")
        for pid, p in self.probs.items():
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"probability for id {pid} outside [0,1]: {p}")

    def ids(self) -> set[int]:
        return set(self.probs)


@dataclass
class LabelTable:
    """Map particle id -> artery/vein, tagged with the pipeline stage."""

    labels: dict[int, str]
    stage: str = "raw"
    unmatched_ids: list[int] = field(default_factory=list)

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        for pid, lab in self.labels.items():
            if lab not in (ARTERY, VEIN):
                raise ValueError(f"label for id {pid} must be artery|vein, got {lab!r}")

    def ids(self) -> set[int]:
        return set(self.labels)


def write_probabilities(table: ProbabilityTable, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"#provenance={table.provenance}\n")
        for pid in sorted(table.probs):
            fh.write(f"{pid}\t{table.probs[pid]:.6f}\n")


def write_labels(table: LabelTable, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"#stage={table.stage}\n")
        for pid in sorted(table.labels):
            fh.write(f"{pid}\t{table.labels[pid]}\n")


def read_labels(path: str | os.PathLike) -> LabelTable:
    labels: dict[int, str] = {}
    stage = "raw"
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            if line.startswith("#"):
                if line.startswith("#stage="):
                    stage = line.split("=", 1)[1]
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected 'id<TAB>artery|vein'")
            labels[int(parts[0])] = parts[1]
    return LabelTable(labels=labels, stage=stage)
