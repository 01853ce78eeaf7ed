"""Stage functions wiring the end-to-end pipeline (used by the CLI).

Topology extraction routes global information through the time map:
iterative farthest-point tracing from the deepest voxel of each mask
component yields centerline paths that merge into trees, the paths become
attributed particle chains, and false-terminal detection plus time-map
repair close any remaining gaps before rooting. The ridge sampler and
26-neighborhood grapher remain available for particle-set inputs that do
not come from tracing.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .msfm import solve_eikonal, speed_from_distance, trilinear
from .topology import (
    Particle,
    TopologyForest,
    assign_kinds,
    detect_false_terminals,
    repair,
    root_forest,
    skeleton_voxels,
)
from .volume import Volume3D

log = logging.getLogger(__name__)


@dataclass
class TopoSettings:
    order: str = "multi-stencil-second"
    speed_exponent: float = 4.0
    accept_threshold: float = 0.5
    roots: str | list = "auto"


@dataclass
class TopoResult:
    forest: TopologyForest
    n_traces: int = 0
    n_flagged: int = 0
    root_voxels: list = field(default_factory=list)


def _mask_root_voxels(mask: Volume3D, dt: Volume3D) -> list[tuple[int, int, int]]:
    """One seed voxel per 26-connected mask component: its deepest point."""
    labels, ncomp = ndimage.label(mask.data, structure=np.ones((3, 3, 3), np.int8))
    roots = []
    for c in range(1, ncomp + 1):
        d = np.where(labels == c, dt.data, -1.0)
        roots.append(tuple(int(v) for v in np.unravel_index(np.argmax(d), d.shape)))
    return roots


def _stamp_ball(covered: np.ndarray, center_vox: np.ndarray, radius_vox: float):
    dims = np.array(covered.shape)
    r = int(np.ceil(radius_vox))
    lo = np.maximum(center_vox - r, 0)
    hi = np.minimum(center_vox + r + 1, dims)
    if (lo >= hi).any():
        return
    gx, gy, gz = np.meshgrid(*(np.arange(lo[i], hi[i]) for i in range(3)), indexing="ij")
    d2 = (gx - center_vox[0]) ** 2 + (gy - center_vox[1]) ** 2 + (gz - center_vox[2]) ** 2
    covered[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] |= d2 <= radius_vox ** 2


def _iterative_trace(time: Volume3D, geo: Volume3D, dt: Volume3D, mask: Volume3D,
                     accept_threshold: float, step_mm: float,
                     max_iter: int = 512):
    """Farthest-point geodesic tracing with tube coverage.

    Repeatedly backtrace the not-yet-covered foreground voxel that is
    geodesically farthest from the roots (geo: arrival times under uniform
    foreground speed; the centerline-weighted map would rank slow wall
    voxels first), truncate the path where it meets previously accepted
    points, gate it on the online confidence score (mean distance value on
    the new segment over the local scale at its start), and stamp the traced
    tube as covered. Tube interiors never spawn candidates, so accepted
    path starts are exactly the tube tips.
    """
    from .msfm import DescentStagnation, UnreachableStart, backtrace

    sp = np.asarray(dt.spacing)
    min_sp = float(min(dt.spacing))
    covered = np.zeros(mask.dims, dtype=bool)
    candidate_ok = (mask.data == 1) & np.isfinite(time.data) & np.isfinite(geo.data)
    accepted_pts: list[np.ndarray] = []
    accepted_tree = None
    paths = []
    tvals = np.where(candidate_ok, geo.data.astype(np.float64), -np.inf)

    for _ in range(max_iter):
        live = np.where(covered, -np.inf, tvals)
        flat = int(np.argmax(live))
        if not np.isfinite(live.flat[flat]):
            break
        cand = np.array(np.unravel_index(flat, mask.dims))
        cand_mm = dt.voxel_to_mm(cand)
        r_cand = max(float(dt.data[cand[0], cand[1], cand[2]]) / min_sp, 1.0)
        try:
            path = backtrace(time, cand_mm, step_mm)
        except (UnreachableStart, DescentStagnation) as exc:
            log.warning("candidate at %s rejected: %s", np.round(cand_mm, 2), exc)
            _stamp_ball(covered, cand, r_cand)
            continue
        cut = len(path)
        truncated = False
        if accepted_tree is not None:
            dists, _ = accepted_tree.query(path.points, k=1)
            hits = np.where(dists <= 1.0 * min_sp)[0]
            if len(hits):
                cut = int(hits[0]) + 1
                truncated = True
        pts = path.points[:cut]
        dt_vals = trilinear(dt.data, dt.mm_to_voxel(pts))
        local = max(float(dt_vals[0]), 1e-9)
        score = float(np.mean(dt_vals)) / local
        ok = len(pts) >= 2 and score >= accept_threshold
        if ok and truncated:
            # a genuine child branch extends beyond its parent tube; cap
            # stubs (shell voxels of an already-traced tip) do not
            seg_len = float(np.linalg.norm(np.diff(pts, axis=0), axis=1).sum())
            ok = seg_len >= 2.0 * float(dt_vals[-1])
        if ok:
            paths.append(type(path)(pts.copy(), path.times[:cut].copy()))
            accepted_pts.extend(pts)
            accepted_tree = cKDTree(np.array(accepted_pts))
            for pt, r in zip(pts, dt_vals):
                vox = np.rint(dt.mm_to_voxel(pt)).astype(np.int64)
                _stamp_ball(covered, vox, max(float(r) / min_sp, 1.0) + 1.0)
        else:
            log.info("candidate at %s rejected: score %.3f, %d pts",
                     np.round(cand_mm, 2), score, len(pts))
        _stamp_ball(covered, cand, r_cand)
    return paths


def _snap_to_foreground(mask: Volume3D, pt: np.ndarray):
    """Point kept as-is when its voxel is foreground, else moved to the
    nearest foreground neighbor's center (descent can cut corners at sharp
    junction turns). Returns None when no foreground voxel is adjacent."""
    dims = np.array(mask.dims)
    vox = np.rint(mask.mm_to_voxel(pt)).astype(np.int64)
    if ((vox >= 0).all() and (vox < dims).all()
            and mask.data[vox[0], vox[1], vox[2]] == 1):
        return pt, vox
    best = None
    best_d = np.inf
    for off in np.ndindex(3, 3, 3):
        nb = vox + np.array(off) - 1
        if (nb < 0).any() or (nb >= dims).any():
            continue
        if mask.data[nb[0], nb[1], nb[2]] != 1:
            continue
        center = mask.voxel_to_mm(nb)
        d = float(np.linalg.norm(center - pt))
        if d < best_d:
            best_d = d
            best = nb
    if best is None:
        return None
    return mask.voxel_to_mm(best), best


def _paths_to_forest(paths, mask: Volume3D, dt: Volume3D, enhanced: Volume3D) -> TopologyForest:
    """Turn traced paths into an attributed forest.

    Each path becomes a particle chain; a path that was truncated against
    earlier paths attaches its far end to the nearest existing particle
    with free degree (one merge edge per path), so the output is a forest by
    construction: one component per basin, one bifurcation per merge.
    """
    min_sp = float(min(mask.spacing))
    attach_radius = 2.2 * min_sp
    particles: list[Particle] = []
    edges: list[tuple[int, int]] = []
    degree: list[int] = []

    for path in paths:
        kept_pos = []
        kept_vox = []
        last = None
        for pt in path.points:
            if last is not None and np.linalg.norm(pt - last) < 0.9 * min_sp:
                continue
            snapped = _snap_to_foreground(mask, np.asarray(pt, dtype=np.float64))
            if snapped is None:
                continue
            spt, vox = snapped
            key = (int(vox[0]), int(vox[1]), int(vox[2]))
            if key in kept_vox:
                continue
            kept_pos.append(spt)
            kept_vox.append(key)
            last = pt
        if len(kept_pos) < 2:
            continue
        first_new = len(particles)
        for k, pt in enumerate(kept_pos):
            ref = kept_pos[k + 1] if k + 1 < len(kept_pos) else kept_pos[k - 1]
            tangent = ref - pt if k + 1 < len(kept_pos) else pt - ref
            norm = np.linalg.norm(tangent)
            tangent = tangent / norm if norm > 0 else np.array([1.0, 0.0, 0.0])
            scale = float(trilinear(dt.data, dt.mm_to_voxel(pt[None, :]))[0])
            pid = len(particles)
            particles.append(Particle(
                id=pid,
                pos=pt,
                scale=max(scale, 0.25 * min_sp),
                dir=tangent,
                intensity=float(trilinear(enhanced.data, enhanced.mm_to_voxel(pt[None, :]))[0]),
            ))
            degree.append(0)
            if k > 0:
                edges.append((pid - 1, pid))
                degree[pid - 1] += 1
                degree[pid] += 1
        if first_new > 0:
            # merge the path's basin end onto the earlier structure
            tail = particles[len(particles) - 1]
            best = None
            best_d = attach_radius
            for j in range(first_new):
                if degree[j] > 2:
                    continue
                d = float(np.linalg.norm(particles[j].pos - tail.pos))
                if d < best_d:
                    best_d = d
                    best = j
            if best is not None:
                edges.append((min(best, tail.id), max(best, tail.id)))
                degree[best] += 1
                degree[tail.id] += 1

    if not particles:
        raise ValueError("tracing produced no skeleton particles")
    forest = TopologyForest(nodes=particles, edges=edges)
    assign_kinds(forest)
    return forest


def extract_topology(mask: Volume3D, dt: Volume3D, enhanced: Volume3D,
                     settings: TopoSettings | None = None) -> TopoResult:
    """Full topology stage: mask + distance map + enhanced volume -> rooted forest."""
    st = settings or TopoSettings()
    speed = speed_from_distance(dt, st.speed_exponent)
    root_vox = _mask_root_voxels(mask, dt)
    time = solve_eikonal(speed, root_vox, st.order)

    uniform = Volume3D((mask.data == 1).astype(np.float32), mask.spacing, mask.origin)
    geo = solve_eikonal(uniform, root_vox, st.order)

    min_sp = float(min(mask.spacing))
    paths = _iterative_trace(time, geo, dt, mask, st.accept_threshold, 0.5 * min_sp)
    forest = _paths_to_forest(paths, mask, dt, enhanced)

    flagged = detect_false_terminals(forest, mask)
    if flagged:
        time2 = solve_eikonal(speed, skeleton_voxels(forest, mask), st.order)
        forest = repair(forest, flagged, time2, dt, mask)
    rooted = root_forest(forest, st.roots)
    return TopoResult(forest=rooted, n_traces=len(paths),
                      n_flagged=len(flagged), root_voxels=root_vox)
