"""Eikonal time maps (multi-stencil fast marching) and geodesic backtracking.

The solver computes |grad T| * F = 1 upwind from seed voxels. "first" order
uses the axis stencil with one-sided differences; "multi-stencil-second"
adds the three face-diagonal stencils and switches to second-order
differences wherever two upstream accepted values exist.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import _kernels
from .volume import Volume3D

log = logging.getLogger(__name__)

SOLVE_ORDERS = ("first", "multi-stencil-second")

_AXIS_DIRS = [(1, 0, 0), (0, 1, 0), (0, 0, 1)]
_DIAG_DIRS = [
    (0, 1, 1), (0, 1, -1),
    (1, 0, 1), (1, 0, -1),
    (1, 1, 0), (1, -1, 0),
    (1, 1, 1), (1, 1, -1),
    (1, -1, 1), (1, -1, -1),
]
# stencil -> indices into _AXIS_DIRS + _DIAG_DIRS; together the stencils
# cover all 13 direction classes of the 26-neighborhood, so lattice rays
# from a point seed propagate exactly.
_MULTI_STENCILS = [
    (0, 1, 2),       # axes
    (3, 4, 0),       # yz face diagonals + x
    (5, 6, 1),       # xz face diagonals + y
    (7, 8, 2),       # xy face diagonals + z
    (9, 10, 8),      # corner diagonals (x,+-y,z) + xy diagonal
    (11, 12, 7),     # corner diagonals (x,-+y,-z) + xy diagonal
]


class UnreachableStart(ValueError):
    """Backtrace start has infinite arrival time."""


class DescentStagnation(RuntimeError):
    """Steepest descent stopped before reaching the seed basin."""

    def __init__(self, message, position):
        super().__init__(message)
        self.position = np.asarray(position, dtype=np.float64)


@dataclass
class GeodesicPath:
    """Ordered subvoxel positions (mm) with their arrival times."""

    points: np.ndarray  # (N, 3)
    times: np.ndarray   # (N,)

    @property
    def start(self) -> np.ndarray:
        return self.points[0]

    @property
    def end(self) -> np.ndarray:
        return self.points[-1]

    def __len__(self) -> int:
        return len(self.points)

    def length(self) -> float:
        if len(self.points) < 2:
            return 0.0
        return float(np.linalg.norm(np.diff(self.points, axis=0), axis=1).sum())


@dataclass
class SolveInfo:
    """Solver diagnostics: float64 times and the acceptance order."""

    t64: np.ndarray
    order: np.ndarray
    count: int
    seed_flat: np.ndarray
    _kernel_args: tuple = field(repr=False, default=())

    def accepted_times(self) -> np.ndarray:
        return self.t64[self.order[: self.count]]

    def causality_error(self) -> float:
        """Max value change when T is recomputed with the order frozen."""
        speed_flat, nx, ny, nz, dirs, hs, sidx, units, second, gate2 = self._kernel_args
        is_seed = np.zeros(self.t64.size, np.uint8)
        is_seed[self.seed_flat] = 1
        return float(_kernels.eikonal_replay(
            self.t64, self.order, self.count, is_seed,
            speed_flat, nx, ny, nz, dirs, hs, sidx, units, second, gate2,
        ))


def _stencil_tables(spacing, multi: bool):
    """Direction table, physical step lengths, stencil layout, and the
    physical unit vector of each stencil slot (for signed Gram assembly)."""
    dirs = list(_AXIS_DIRS) + (list(_DIAG_DIRS) if multi else [])
    dirs_arr = np.array(dirs, dtype=np.int64)
    phys = dirs_arr * np.asarray(spacing, dtype=np.float64)
    hs = np.linalg.norm(phys, axis=1)
    unit_all = phys / hs[:, None]
    if multi:
        sidx = np.array(_MULTI_STENCILS, dtype=np.int64)
    else:
        sidx = np.array([(0, 1, 2)], dtype=np.int64)
    units = np.ascontiguousarray(unit_all[sidx])
    return dirs_arr, hs, sidx, units


def solve_eikonal(speed: Volume3D, seeds, order: str = "multi-stencil-second",
                  with_info: bool = False, init_radius_mm: float | None = None,
                  second_order_gate: float = 0.3):
    """Solve the eikonal equation from seed voxels over a speed map.

    seeds is a sequence of integer voxel index triples. Finite differences
    cannot represent the arrival-time singularity at a point seed, so voxels
    within init_radius_mm of a seed (default: five voxels at the coarsest
    axis) that have a straight line of sight through positive speed are
    initialized analytically (distance / seed speed, min over seeds) and
    treated as boundary data; marching is pure upwind beyond. Returns a
    float32 time map (inf where unreached); with_info=True also returns
    SolveInfo.
    """
    if order not in SOLVE_ORDERS:
        raise ValueError(f"order must be one of {SOLVE_ORDERS}, got {order!r}")
    if speed.data.dtype != np.float32:
        raise ValueError("speed map must be float32")
    f = speed.data.astype(np.float64)
    if not np.isfinite(f).all() or f.min() < 0:
        raise ValueError("speed values must be finite and non-negative")
    seeds = np.atleast_2d(np.asarray(seeds, dtype=np.int64))
    if seeds.size == 0:
        raise ValueError("at least one seed is required")
    nx, ny, nz = speed.dims
    if (seeds < 0).any() or (seeds >= np.array([nx, ny, nz])).any():
        raise ValueError("seed voxel out of bounds")
    for sx, sy, sz in seeds:
        if f[sx, sy, sz] <= 0:
            raise ValueError(f"seed ({sx},{sy},{sz}) lies on a zero-speed voxel")

    if init_radius_mm is None:
        init_radius_mm = 5.0 * max(speed.spacing)
    fixed_flat, fixed_val = _seed_init(f, seeds, speed.spacing, init_radius_mm)
    is_fixed = np.zeros(f.size, np.uint8)
    is_fixed[fixed_flat] = 1

    multi = order == "multi-stencil-second"
    dirs, hs, sidx, units = _stencil_tables(speed.spacing, multi)
    f_flat = np.ascontiguousarray(f.ravel(order="F"))
    t64, accept_order, count = _kernels.eikonal_solve(
        f_flat, nx, ny, nz, fixed_flat, fixed_val, is_fixed, dirs, hs, sidx, units, multi,
        second_order_gate,
    )
    tmap = Volume3D(
        t64.reshape((nx, ny, nz), order="F").astype(np.float32),
        speed.spacing, speed.origin,
    )
    if not with_info:
        return tmap
    info = SolveInfo(
        t64=t64, order=accept_order, count=count, seed_flat=fixed_flat,
        _kernel_args=(f_flat, nx, ny, nz, dirs, hs, sidx, units, multi, second_order_gate),
    )
    return tmap, info


def _seed_init(f: np.ndarray, seeds: np.ndarray, spacing, radius_vox: float):
    """Boundary data for the solver: exact zeros at seeds plus analytic
    arrival times (local constant-speed assumption) within radius_vox."""
    nx, ny, nz = f.shape
    f_flat = np.ascontiguousarray(f.ravel(order="F"))
    idx, vals = _kernels.seed_init(
        f_flat, nx, ny, nz, seeds,
        float(spacing[0]), float(spacing[1]), float(spacing[2]), float(radius_vox),
    )
    return idx, vals


def speed_from_distance(dt: Volume3D, exponent: float = 4.0) -> Volume3D:
    """Speed law F = (dt / max(dt))^exponent on foreground, 0 on background."""
    d = dt.data.astype(np.float64)
    dmax = d.max()
    if dmax <= 0:
        raise ValueError("distance map has no positive values")
    f = np.zeros_like(d)
    fg = d > 0
    f[fg] = (d[fg] / dmax) ** exponent
    return Volume3D(f.astype(np.float32), dt.spacing, dt.origin)


# ---------------------------------------------------------------------------
# trilinear interpolation and steepest-descent backtracking
# ---------------------------------------------------------------------------

def trilinear(data: np.ndarray, pts_vox: np.ndarray) -> np.ndarray:
    """Interpolate at continuous voxel coords (M, 3), clamping to the border.

    Any non-finite corner that carries weight makes the result inf, so
    descent never walks into unreached territory.
    """
    nx, ny, nz = data.shape
    p = np.clip(
        np.atleast_2d(np.asarray(pts_vox, dtype=np.float64)),
        0.0, np.array([nx - 1, ny - 1, nz - 1], dtype=np.float64),
    )
    i0 = np.minimum(np.floor(p).astype(np.int64), np.array([max(nx - 2, 0), max(ny - 2, 0), max(nz - 2, 0)]))
    t = p - i0
    out = np.zeros(len(p), np.float64)
    bad = np.zeros(len(p), bool)
    for cx in (0, 1):
        for cy in (0, 1):
            for cz in (0, 1):
                ix = np.minimum(i0[:, 0] + cx, nx - 1)
                iy = np.minimum(i0[:, 1] + cy, ny - 1)
                iz = np.minimum(i0[:, 2] + cz, nz - 1)
                w = (
                    (t[:, 0] if cx else 1 - t[:, 0])
                    * (t[:, 1] if cy else 1 - t[:, 1])
                    * (t[:, 2] if cz else 1 - t[:, 2])
                )
                c = data[ix, iy, iz].astype(np.float64)
                finite = np.isfinite(c)
                bad |= (~finite) & (w > 1e-12)
                out += np.where(finite, c, 0.0) * w
    out[bad] = np.inf
    return out


_DIRS26 = np.array(
    [(dx, dy, dz) for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)
     if (dx, dy, dz) != (0, 0, 0)],
    dtype=np.float64,
)


def backtrace(time: Volume3D, start_mm, step_mm: float) -> GeodesicPath:
    """Discrete steepest descent on the interpolated time map.

    Stops in the seed basin: T <= step, or within one step of a zero-time
    voxel center (subvoxel descent cannot hit T = 0 exactly, and arrival
    times scale with 1/speed so the pure time criterion alone would be
    unreachable in slow regions). The step is halved, up to 6 times, when no
    candidate descends (narrow valleys of strongly non-uniform speed maps).
    Raises UnreachableStart for infinite starts and DescentStagnation when
    descent dies before the basin.
    """
    spacing = np.asarray(time.spacing)
    diag = float(np.linalg.norm(spacing))
    if not 0 < step_mm <= diag:
        raise ValueError(f"step must be in (0, voxel diagonal {diag:.3g}], got {step_mm}")
    cand_dirs = _DIRS26 * spacing
    cand_dirs /= np.linalg.norm(cand_dirs, axis=1, keepdims=True)

    zero_vox = np.argwhere(time.data == 0.0)
    zero_tree = cKDTree(zero_vox * spacing + np.asarray(time.origin)) if len(zero_vox) else None

    def in_basin(pos, t):
        if t <= step_mm:
            return True
        return zero_tree is not None and zero_tree.query(pos, k=1)[0] <= step_mm

    pos = np.asarray(start_mm, dtype=np.float64)
    t_cur = float(trilinear(time.data, [time.mm_to_voxel(pos)])[0])
    if not np.isfinite(t_cur):
        raise UnreachableStart(f"start {tuple(pos)} has infinite arrival time")
    points = [pos.copy()]
    times = [t_cur]
    vol_diag = float(np.linalg.norm(np.array(time.dims) * spacing))
    max_steps = int(vol_diag / step_mm) * 4 + 100
    dims = np.array(time.dims)
    while not in_basin(pos, t_cur):
        if len(points) > max_steps:
            raise DescentStagnation(
                f"descent exceeded {max_steps} steps before reaching the basin", pos)
        sub = step_mm
        moved = False
        for _ in range(7):
            cands = pos + sub * cand_dirs
            vals = trilinear(time.data, time.mm_to_voxel(cands))
            k = int(np.argmin(vals))
            if vals[k] < t_cur - 1e-12:
                pos = cands[k]
                t_cur = float(vals[k])
                moved = True
                break
            sub *= 0.5
        if not moved:
            # Trilinear interpolants of strongly varying speed maps have
            # pocket minima inside cells, but their minima over a cell sit at
            # the corners, which are voxel centers where fast marching leaves
            # no spurious local minima. Hop to the best nearby grid node.
            base = np.floor(time.mm_to_voxel(pos)).astype(np.int64)
            best_t = t_cur - 1e-12
            best_node = None
            for off in np.ndindex(4, 4, 4):
                node = base + np.array(off) - 1
                if (node < 0).any() or (node >= dims).any():
                    continue
                node_mm = time.voxel_to_mm(node)
                if np.linalg.norm(node_mm - pos) > diag * 1.0001:
                    continue
                tv = float(time.data[node[0], node[1], node[2]])
                if tv < best_t:
                    best_t = tv
                    best_node = node_mm
            if best_node is not None:
                pos = best_node
                t_cur = best_t
                moved = True
        if not moved:
            raise DescentStagnation(
                f"descent stagnated at T={t_cur:.6g} before reaching the basin", pos)
        points.append(pos.copy())
        times.append(t_cur)
    return GeodesicPath(np.array(points), np.array(times))


def trace_skeleton_tree(time: Volume3D, dt: Volume3D, endpoints,
                        accept_threshold: float = 0.5,
                        step_mm: float | None = None) -> list[GeodesicPath]:
    """Trace endpoints into the seed basin and keep the confident paths.

    Each accepted path is truncated at its first voxel already covered by an
    earlier path, so the union forms a tree. The online confidence score is
    the mean distance-map value along the new segment divided by the local
    scale at the endpoint; paths scoring below accept_threshold are dropped.
    Rejections are logged, never fatal.
    """
    if step_mm is None:
        step_mm = 0.5 * min(time.spacing)
    occupied: set[tuple[int, int, int]] = set()
    accepted: list[GeodesicPath] = []
    for i, ep in enumerate(endpoints):
        ep = np.asarray(ep, dtype=np.float64)
        try:
            path = backtrace(time, ep, step_mm)
        except (UnreachableStart, DescentStagnation) as exc:
            log.warning("endpoint %d at %s rejected: %s", i, np.round(ep, 2), exc)
            continue
        if len(path) < 2:
            log.info("endpoint %d already inside the seed basin", i)
            continue
        vox = np.rint(dt.mm_to_voxel(path.points)).astype(np.int64)
        cut = len(path)
        for j, v in enumerate(map(tuple, vox)):
            if v in occupied:
                cut = j + 1
                break
        pts = path.points[:cut]
        tms = path.times[:cut]
        if len(pts) < 2:
            continue
        dt_vals = trilinear(dt.data, dt.mm_to_voxel(pts))
        local = max(float(dt_vals[0]), 1e-9)
        score = float(np.mean(dt_vals)) / local
        if score < accept_threshold:
            log.warning("endpoint %d rejected: confidence %.3f < %.3f", i, score, accept_threshold)
            continue
        occupied.update(map(tuple, np.rint(dt.mm_to_voxel(pts)).astype(np.int64)))
        accepted.append(GeodesicPath(pts.copy(), tms.copy()))
    return accepted
