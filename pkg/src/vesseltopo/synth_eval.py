"""Synthetic intertwined artery/vein forests, voxel reconstruction of labels,
hilum fusion, and particle-level metrics.

The generator grows two recursive bifurcating trees (artery and vein, vein
root offset laterally) with straight tube segments. Segment levels run
1..depth and the tube radius at level k is trunk_radius * decay^k, so a
depth-1 case is a single straight tube per tree and terminal segments have
radius trunk_radius * decay^depth. Each root carries a bulb slightly fatter
than the trunk: it anchors the distance-map maximum, so auto-rooting lands
at the tree origin instead of a bifurcation pocket. Voxels are foreground
exactly when they lie within the local radius of some centerline. A case is
regenerated with a derived seed when a tree exits the volume or the two
trees come too close; generation is deterministic per seed.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy.spatial import cKDTree

from .tables import ARTERY, VEIN, LabelTable
from .topology import TopologyForest
from .volume import Volume3D

MURRAY_DECAY = 2.0 ** (-1.0 / 3.0)


@dataclass
class SynthSpec:
    seed: int = 0
    depth: int = 4
    trunk_radius: float = 5.2
    radius_decay: float = MURRAY_DECAY
    angle_range: tuple[float, float] = (35.0, 55.0)  # degrees
    dims: tuple[int, int, int] = (96, 96, 96)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    intertwine_offset: float = 30.0
    length_factor: float = 5.0
    bulb_factor: float = 1.3
    clearance: float = 1.5
    max_attempts: int = 80

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if not 0.0 < self.radius_decay < 1.0:
            raise ValueError("radius decay must lie in (0, 1)")
        terminal_r = self.trunk_radius * self.radius_decay ** self.depth
        if terminal_r < 2.0 * min(self.spacing):
            raise ValueError(
                f"terminal radius {terminal_r:.3f} mm below the 2-voxel "
                f"rasterization floor ({2.0 * min(self.spacing):.3f} mm)")

    def radius_at(self, level: int) -> float:
        return self.trunk_radius * self.radius_decay ** level


@dataclass
class Polyline:
    points: np.ndarray  # (N, 3) mm
    radius: float
    label: str
    level: int


@dataclass
class SynthCase:
    mask: Volume3D
    polylines: list[Polyline]
    roots_mm: dict[str, np.ndarray]
    spec: SynthSpec = field(repr=False, default=None)

    def all_samples(self):
        pts = np.concatenate([p.points for p in self.polylines])
        rad = np.concatenate([np.full(len(p.points), p.radius) for p in self.polylines])
        lab = np.concatenate([np.array([p.label] * len(p.points)) for p in self.polylines])
        return pts, rad, lab

    def expected_counts(self) -> dict[str, int]:
        leaves = 2 ** (self.spec.depth - 1)
        return {
            "terminals": 2 * (leaves + 1),        # leaf tips plus the two root ends
            "bifurcations": 2 * (leaves - 1),
        }


def _rotate(d: np.ndarray, theta: float, phi: float) -> np.ndarray:
    ref = np.array([0.0, 0.0, 1.0]) if abs(d[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    e1 = np.cross(d, ref)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(d, e1)
    out = math.cos(theta) * d + math.sin(theta) * (math.cos(phi) * e1 + math.sin(phi) * e2)
    return out / np.linalg.norm(out)


def _grow_tree(spec: SynthSpec, rng: np.random.Generator, root: np.ndarray,
               trunk_dir: np.ndarray, label: str, sample_step: float) -> list[Polyline]:
    lo, hi = (math.radians(a) for a in spec.angle_range)
    lines: list[Polyline] = []
    stack = [(root, trunk_dir / np.linalg.norm(trunk_dir), 1)]
    while stack:
        p0, d, level = stack.pop(0)
        r = spec.radius_at(level)
        length = spec.length_factor * r
        p1 = p0 + d * length
        n = max(int(math.ceil(length / sample_step)), 2)
        ts = np.linspace(0.0, 1.0, n)
        lines.append(Polyline(points=p0 + ts[:, None] * (p1 - p0), radius=r,
                              label=label, level=level))
        if level < spec.depth:
            phi0 = rng.uniform(0.0, 2.0 * math.pi)
            for j in (0, 1):
                theta = rng.uniform(lo, hi)
                phi = phi0 + j * math.pi + rng.uniform(-0.5, 0.5)
                stack.append((p1, _rotate(d, theta, phi), level + 1))
    return lines


def _check_case(spec: SynthSpec, lines_a, lines_v) -> bool:
    ext = np.array(spec.dims) * np.array(spec.spacing)
    for lines in (lines_a, lines_v):
        for pl in lines:
            margin = pl.radius + 1.5 * max(spec.spacing)
            if (pl.points < margin).any() or (pl.points > ext - margin).any():
                return False
    pa = np.concatenate([pl.points for pl in lines_a])
    ra = np.concatenate([np.full(len(pl.points), pl.radius) for pl in lines_a])
    pv = np.concatenate([pl.points for pl in lines_v])
    rv = np.concatenate([np.full(len(pl.points), pl.radius) for pl in lines_v])
    d, j = cKDTree(pv).query(pa, k=1)
    if not np.all(d - (ra + rv[j]) >= spec.clearance):
        return False
    # non-adjacent segments of one tree must not merge either, or tube tips
    # and junctions blur together and the case has no well-defined topology
    for lines in (lines_a, lines_v):
        trees = [cKDTree(pl.points) for pl in lines]
        for i in range(len(lines)):
            for j2 in range(i + 1, len(lines)):
                a, b = lines[i], lines[j2]
                shared = min(
                    np.linalg.norm(a.points[0] - b.points[0]),
                    np.linalg.norm(a.points[-1] - b.points[0]),
                    np.linalg.norm(a.points[0] - b.points[-1]),
                )
                if shared < 1e-9:
                    continue
                dmin = trees[i].query(b.points, k=1)[0].min()
                if dmin < a.radius + b.radius + spec.clearance:
                    return False
    return True


def _rasterize(spec: SynthSpec, lines: list[Polyline], bulbs) -> np.ndarray:
    dims = spec.dims
    sp = np.asarray(spec.spacing)
    out = np.zeros(dims, dtype=np.uint8)

    def stamp_segment(a, b, r):
        lo = np.maximum(np.floor((np.minimum(a, b) - r) / sp).astype(int) - 1, 0)
        hi = np.minimum(np.ceil((np.maximum(a, b) + r) / sp).astype(int) + 2, dims)
        if (lo >= hi).any():
            return
        gx, gy, gz = np.meshgrid(*(np.arange(lo[i], hi[i]) for i in range(3)), indexing="ij")
        pts = np.stack([gx * sp[0], gy * sp[1], gz * sp[2]], axis=-1)
        ab = b - a
        denom = float(np.dot(ab, ab))
        if denom == 0:
            d = np.linalg.norm(pts - a, axis=-1)
        else:
            t = np.clip(((pts - a) @ ab) / denom, 0.0, 1.0)
            d = np.linalg.norm(pts - (a + t[..., None] * ab), axis=-1)
        out[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] |= (d <= r).astype(np.uint8)

    for pl in lines:
        stamp_segment(pl.points[0], pl.points[-1], pl.radius)
    for center, r in bulbs:
        stamp_segment(center, center, r)
    return out


def generate(spec: SynthSpec) -> SynthCase:
    """Deterministic intertwined artery/vein case for the given spec."""
    ext = np.array(spec.dims) * np.array(spec.spacing)
    sample_step = 0.4 * min(spec.spacing)
    bulb_r = spec.bulb_factor * spec.radius_at(1)
    for attempt in range(spec.max_attempts):
        rng = np.random.default_rng(spec.seed + 10007 * attempt)
        base = np.array([ext[0] / 2.0, ext[1] / 2.0, bulb_r + 2.0 * max(spec.spacing)])
        off = np.array([spec.intertwine_offset / 2.0, 0.0, 0.0])
        root_a = base - off
        root_v = base + off
        tilt = math.radians(8.0)
        dir_a = np.array([math.sin(tilt), 0.0, math.cos(tilt)])
        dir_v = np.array([-math.sin(tilt), 0.0, math.cos(tilt)])
        lines_a = _grow_tree(spec, rng, root_a, dir_a, ARTERY, sample_step)
        lines_v = _grow_tree(spec, rng, root_v, dir_v, VEIN, sample_step)
        if not _check_case(spec, lines_a, lines_v):
            continue
        data = _rasterize(spec, lines_a + lines_v,
                          bulbs=[(root_a, bulb_r), (root_v, bulb_r)])
        mask = Volume3D(data, spec.spacing, (0.0, 0.0, 0.0))
        return SynthCase(mask=mask, polylines=lines_a + lines_v,
                         roots_mm={ARTERY: root_a, VEIN: root_v}, spec=spec)
    raise ValueError(
        f"no valid tree layout within {spec.max_attempts} attempts "
        f"(trees exit the volume or violate clearance); spec rejected")


def save_case(case: SynthCase, path: str | os.PathLike) -> None:
    doc = {
        "spec": asdict(case.spec),
        "roots_mm": {k: [float(x) for x in v] for k, v in case.roots_mm.items()},
        "polylines": [
            {
                "points": [[float(x) for x in p] for p in pl.points],
                "radius": float(pl.radius),
                "label": pl.label,
                "level": pl.level,
            }
            for pl in case.polylines
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def load_case(path: str | os.PathLike, mask: Volume3D) -> SynthCase:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    sd = doc["spec"]
    for key in ("angle_range", "dims", "spacing"):
        sd[key] = tuple(sd[key])
    spec = SynthSpec(**sd)
    lines = [
        Polyline(points=np.array(pl["points"]), radius=pl["radius"],
                 label=pl["label"], level=pl["level"])
        for pl in doc["polylines"]
    ]
    roots = {k: np.array(v) for k, v in doc["roots_mm"].items()}
    return SynthCase(mask=mask, polylines=lines, roots_mm=roots, spec=spec)


# ---------------------------------------------------------------------------
# ground truth matching
# ---------------------------------------------------------------------------

def match_truth(forest: TopologyForest, case: SynthCase,
                max_unmatched_fraction: float = 0.10) -> LabelTable:
    """Label each particle by its nearest generator centerline point.

    A particle matches when the nearest centerline sample lies within twice
    that sample's tube radius; unmatched particles are excluded and listed
    in the returned table. More than max_unmatched_fraction unmatched is a
    pipeline/geometry fault and raises.
    """
    pts, rad, lab = case.all_samples()
    tree = cKDTree(pts)
    pos = forest.positions()
    dist, j = tree.query(pos, k=1)
    matched = dist <= 2.0 * rad[j]
    labels = {int(i): str(lab[j[i]]) for i in np.where(matched)[0]}
    unmatched = [int(i) for i in np.where(~matched)[0]]
    frac = len(unmatched) / max(len(forest), 1)
    if frac > max_unmatched_fraction:
        raise ValueError(
            f"{len(unmatched)}/{len(forest)} particles ({frac:.1%}) unmatched "
            f"against generator centerlines; geometry fault")
    return LabelTable(labels=labels, stage="raw", unmatched_ids=unmatched)


# ---------------------------------------------------------------------------
# voxel reconstruction and hilum fusion
# ---------------------------------------------------------------------------

LABEL_CODES = {ARTERY: 1, VEIN: 2}


def reconstruct_labels(forest: TopologyForest, labels: LabelTable,
                       dims, spacing, origin=(0.0, 0.0, 0.0)) -> Volume3D:
    """Paint each particle's scale-ball with its label; conflicts go to the
    nearest particle (ties to the smaller id). 0 background, 1 artery, 2 vein."""
    dims = tuple(int(d) for d in dims)
    sp = np.asarray(spacing, dtype=np.float64)
    org = np.asarray(origin, dtype=np.float64)
    out = np.zeros(dims, dtype=np.uint8)
    best = np.full(dims, np.inf, dtype=np.float64)
    for p in forest.nodes:
        if p.id not in labels.labels:
            continue
        code = LABEL_CODES[labels.labels[p.id]]
        r = p.scale
        lo = np.maximum(np.floor((p.pos - org - r) / sp).astype(int), 0)
        hi = np.minimum(np.ceil((p.pos - org + r) / sp).astype(int) + 1, dims)
        if (lo >= hi).any():
            continue
        gx, gy, gz = np.meshgrid(*(np.arange(lo[i], hi[i]) for i in range(3)), indexing="ij")
        d = np.sqrt(
            (gx * sp[0] + org[0] - p.pos[0]) ** 2
            + (gy * sp[1] + org[1] - p.pos[1]) ** 2
            + (gz * sp[2] + org[2] - p.pos[2]) ** 2
        )
        sub = (slice(lo[0], hi[0]), slice(lo[1], hi[1]), slice(lo[2], hi[2]))
        win = (d <= r) & (d < best[sub])
        out[sub][win] = code
        best[sub][win] = d[win]
    return Volume3D(out, tuple(sp), tuple(org))


def fuse_hilum(labels_vol: Volume3D, hilum_artery: Volume3D,
               hilum_vein: Volume3D) -> Volume3D:
    """Fill hilum masks into background only; particle labels take precedence."""
    for name, h in (("artery", hilum_artery), ("vein", hilum_vein)):
        if h.dims != labels_vol.dims:
            raise ValueError(f"hilum {name} mask dims {h.dims} != labels {labels_vol.dims}")
    overlap = int(((hilum_artery.data == 1) & (hilum_vein.data == 1)).sum())
    if overlap:
        raise ValueError(f"hilum artery/vein masks overlap on {overlap} voxels")
    out = labels_vol.data.copy()
    bg = out == 0
    out[bg & (hilum_artery.data == 1)] = LABEL_CODES[ARTERY]
    out[bg & (hilum_vein.data == 1)] = LABEL_CODES[VEIN]
    return Volume3D(out, labels_vol.spacing, labels_vol.origin)


# ---------------------------------------------------------------------------
# particle-level metrics
# ---------------------------------------------------------------------------

@dataclass
class Metrics:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    @property
    def accuracy(self) -> float:
        return _rate(self.tp + self.tn, self.total)

    @property
    def sensitivity(self) -> float:
        return _rate(self.tp, self.tp + self.fn)

    @property
    def specificity(self) -> float:
        return _rate(self.tn, self.tn + self.fp)

    def to_dict(self) -> dict:
        return {
            "counts": {"tp": self.tp, "tn": self.tn, "fp": self.fp, "fn": self.fn},
            "accuracy": self.accuracy,
            "sensitivity": self.sensitivity,
            "specificity": self.specificity,
        }

    def to_tsv_line(self) -> str:
        return (f"{self.tp}\t{self.tn}\t{self.fp}\t{self.fn}\t"
                f"{self.accuracy:.6f}\t{self.sensitivity:.6f}\t{self.specificity:.6f}")


def _rate(num: int, den: int) -> float:
    # empty denominator counts as vacuously perfect (evaluate(x, x) contract)
    return num / den if den else 1.0


def evaluate(pred: LabelTable, truth: LabelTable) -> Metrics:
    """Confusion counts and rates over particles, arteries positive."""
    if pred.ids() != truth.ids():
        missing = truth.ids() - pred.ids()
        extra = pred.ids() - truth.ids()
        raise ValueError(f"label id sets differ (missing {sorted(missing)[:5]}, "
                         f"extra {sorted(extra)[:5]})")
    tp = tn = fp = fn = 0
    for pid, t in truth.labels.items():
        p = pred.labels[pid]
        if t == ARTERY:
            if p == ARTERY:
                tp += 1
            else:
                fn += 1
        else:
            if p == VEIN:
                tn += 1
            else:
                fp += 1
    return Metrics(tp=tp, tn=tn, fp=fp, fn=fn)
