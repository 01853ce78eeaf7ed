"""Topology optimizer: threshold labeling, subtree/branch confidence, and
the pruning pass that reconciles inter-branch and intra-branch consistency.

Confidence of a subtree or branch is its majority fraction,
max(nA, nV) / (nA + nV). Within each subtree every branch takes the subtree
label unless the branch disagrees with strictly higher confidence, in which
case the branch keeps its own majority (pruning). Junction nodes shared by
several branches take the subtree label; root nodes belong to no subtree
and keep their raw label.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

from .tables import ARTERY, VEIN, LabelTable, ProbabilityTable
from .topology import Branch, KIND_BIFURCATION, Subtree, TopologyForest

STRATEGIES = ("particle", "branch", "subtree", "combined")


def threshold_labels(p: ProbabilityTable) -> LabelTable:
    """Artery iff probability strictly exceeds 0.5, vein otherwise."""
    labels = {pid: (ARTERY if pr > 0.5 else VEIN) for pid, pr in p.probs.items()}
    return LabelTable(labels=labels, stage="raw")


@dataclass
class ConfidenceEntry:
    label: str
    confidence: float
    count: int


@dataclass
class ConfidenceReport:
    subtrees: dict[int, ConfidenceEntry]   # keyed by subtree anchor id
    branches: list[ConfidenceEntry]        # aligned with the branch list

    def to_dict(self) -> dict:
        return {
            "subtrees": {
                str(k): {"label": e.label, "confidence": e.confidence, "count": e.count}
                for k, e in sorted(self.subtrees.items())
            },
            "branches": [
                {"label": e.label, "confidence": e.confidence, "count": e.count}
                for e in self.branches
            ],
        }


def save_report(report: ConfidenceReport, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def _majority(labels: list[str], tie_label: str) -> tuple[str, float]:
    na = sum(1 for l in labels if l == ARTERY)
    nv = len(labels) - na
    if na == nv:
        return tie_label, 0.5
    return (ARTERY, na / len(labels)) if na > nv else (VEIN, nv / len(labels))


def _branch_subtree(branch: Branch, subtree_of: dict[int, int]) -> int | None:
    """Anchor of the subtree holding the branch's non-root members."""
    for pid in branch.ids:
        if pid in subtree_of:
            return subtree_of[pid]
    return None


def score(forest: TopologyForest, subtrees: list[Subtree], branches: list[Branch],
          labels: LabelTable) -> ConfidenceReport:
    """Majority label and confidence per subtree and per branch.

    Subtree ties resolve to artery at confidence 0.5; a tied branch inherits
    its subtree's label at 0.5.
    """
    sub_entries: dict[int, ConfidenceEntry] = {}
    subtree_of: dict[int, int] = {}
    for s in subtrees:
        assert s.members, "empty subtree"
        for m in s.members:
            subtree_of[m] = s.anchor
        lab, conf = _majority([labels.labels[m] for m in s.members], tie_label=ARTERY)
        sub_entries[s.anchor] = ConfidenceEntry(label=lab, confidence=conf,
                                                count=len(s.members))
    br_entries = []
    for b in branches:
        assert b.ids, "empty branch"
        anchor = _branch_subtree(b, subtree_of)
        tie = sub_entries[anchor].label if anchor is not None else ARTERY
        lab, conf = _majority([labels.labels[m] for m in b.ids], tie_label=tie)
        br_entries.append(ConfidenceEntry(label=lab, confidence=conf, count=len(b.ids)))
    return ConfidenceReport(subtrees=sub_entries, branches=br_entries)


def refine(forest: TopologyForest, subtrees: list[Subtree], branches: list[Branch],
           labels: LabelTable, report: ConfidenceReport,
           strategy: str = "combined") -> LabelTable:
    """Refined labels under the chosen strategy.

    combined: branches take their subtree's label unless they disagree with
    strictly higher confidence (the pruning rule). branch: per-branch
    majority alone (ties keep raw labels). subtree: subtree majority alone.
    particle: raw labels unchanged. Junction endpoints (bifurcations shared
    between branches) follow the subtree; roots keep their raw label.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"strategy must be one of {STRATEGIES}, got {strategy!r}")
    out = dict(labels.labels)
    if strategy == "particle":
        return LabelTable(labels=out, stage="refined")

    subtree_of: dict[int, int] = {}
    for s in subtrees:
        for m in s.members:
            subtree_of[m] = s.anchor
    roots = set(forest.roots)

    def relabel_members(branch: Branch):
        for pid in branch.ids:
            if pid in roots or forest.nodes[pid].kind == KIND_BIFURCATION:
                continue
            yield pid

    if strategy == "branch":
        for b, e in zip(branches, report.branches):
            if e.confidence == 0.5:
                continue  # no majority: keep raw labels
            for pid in relabel_members(b):
                out[pid] = e.label
        return LabelTable(labels=out, stage="refined")

    if strategy == "subtree":
        for s in subtrees:
            lab = report.subtrees[s.anchor].label
            for pid in s.members:
                out[pid] = lab
        for r in roots:
            out[r] = labels.labels[r]
        return LabelTable(labels=out, stage="refined")

    # combined
    for s in subtrees:
        lab = report.subtrees[s.anchor].label
        for pid in s.members:
            out[pid] = lab
    for b, e in zip(branches, report.branches):
        anchor = _branch_subtree(b, subtree_of)
        if anchor is None:
            continue
        se = report.subtrees[anchor]
        target = e.label if (e.label != se.label and e.confidence > se.confidence) else se.label
        for pid in relabel_members(b):
            out[pid] = target
    for r in roots:
        out[r] = labels.labels[r]
    return LabelTable(labels=out, stage="refined")
