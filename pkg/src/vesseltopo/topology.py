"""Particle topology: sampling, 26-neighborhood graphs, terminal repair,
rooting, and subtree/branch decomposition.

Particles are attributed skeleton samples (position, scale, orientation,
intensity). The graph stage enforces the degree bound 1..3 and acyclicity;
node kinds follow the 26-neighborhood count rule: degree 1 terminal,
degree 2 branching, degree >2 bifurcation (isolated nodes count as
terminals). All tie-breaks are ordered by particle id, so identical inputs
always produce identical forests.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from .msfm import DescentStagnation, UnreachableStart, backtrace, trilinear
from .volume import Volume3D, hessian_components, validate_mask

log = logging.getLogger(__name__)

KIND_TERMINAL = "terminal"
KIND_BRANCHING = "branching"
KIND_BIFURCATION = "bifurcation"


@dataclass
class Particle:
    id: int
    pos: np.ndarray        # (3,) mm
    scale: float           # local radius, mm
    dir: np.ndarray        # (3,) unit tangent
    intensity: float
    kind: str = KIND_TERMINAL

    def __post_init__(self):
        self.pos = np.asarray(self.pos, dtype=np.float64)
        self.dir = np.asarray(self.dir, dtype=np.float64)
        n = np.linalg.norm(self.dir)
        if not np.isfinite(n) or abs(n - 1.0) > 1e-6:
            raise ValueError(f"particle {self.id}: dir must be a unit vector, |dir|={n}")
        if self.scale <= 0:
            raise ValueError(f"particle {self.id}: scale must be positive")


@dataclass
class Branch:
    """Maximal chain between endpoints; interior nodes all have degree 2."""
    ids: list[int]
    end_kinds: tuple[str, str]


@dataclass
class Subtree:
    """All descendants of one child of a root (anchor included)."""
    anchor: int
    root: int
    members: list[int]


@dataclass
class TopologyForest:
    nodes: list[Particle]
    edges: list[tuple[int, int]]
    roots: list[int] = field(default_factory=list)
    parent: dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        for i, p in enumerate(self.nodes):
            if p.id != i:
                raise ValueError(f"node ids must be dense 0..N-1, node {i} has id {p.id}")
        self.edges = sorted(tuple(sorted(map(int, e))) for e in self.edges)

    def __len__(self) -> int:
        return len(self.nodes)

    def adjacency(self) -> list[list[int]]:
        adj: list[list[int]] = [[] for _ in self.nodes]
        for i, j in self.edges:
            adj[i].append(j)
            adj[j].append(i)
        for a in adj:
            a.sort()
        return adj

    def degrees(self) -> np.ndarray:
        deg = np.zeros(len(self.nodes), dtype=np.int64)
        for i, j in self.edges:
            deg[i] += 1
            deg[j] += 1
        return deg

    def components(self) -> list[list[int]]:
        adj = self.adjacency()
        seen = np.zeros(len(self.nodes), dtype=bool)
        comps = []
        for start in range(len(self.nodes)):
            if seen[start]:
                continue
            stack = [start]
            seen[start] = True
            comp = []
            while stack:
                u = stack.pop()
                comp.append(u)
                for v in adj[u]:
                    if not seen[v]:
                        seen[v] = True
                        stack.append(v)
            comps.append(sorted(comp))
        return comps

    def is_acyclic(self) -> bool:
        return len(self.edges) == len(self.nodes) - len(self.components())

    def positions(self) -> np.ndarray:
        return np.array([p.pos for p in self.nodes], dtype=np.float64)


def assign_kinds(forest: TopologyForest) -> None:
    """Kind from degree: 1 (or isolated) terminal, 2 branching, >2 bifurcation."""
    deg = forest.degrees()
    for p in forest.nodes:
        d = deg[p.id]
        p.kind = KIND_TERMINAL if d <= 1 else KIND_BRANCHING if d == 2 else KIND_BIFURCATION


# ---------------------------------------------------------------------------
# forest JSON interface
# ---------------------------------------------------------------------------

def save_forest(forest: TopologyForest, path: str | os.PathLike) -> None:
    doc = {
        "nodes": [
            {
                "id": p.id,
                "pos": [float(v) for v in p.pos],
                "scale": float(p.scale),
                "dir": [float(v) for v in p.dir],
                "intensity": float(p.intensity),
                "kind": p.kind,
            }
            for p in forest.nodes
        ],
        "edges": [[int(i), int(j)] for i, j in forest.edges],
        "roots": [int(r) for r in forest.roots],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def load_forest(path: str | os.PathLike) -> TopologyForest:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    nodes = [
        Particle(
            id=int(n["id"]), pos=n["pos"], scale=float(n["scale"]),
            dir=n["dir"], intensity=float(n["intensity"]), kind=n["kind"],
        )
        for n in sorted(doc["nodes"], key=lambda n: n["id"])
    ]
    forest = TopologyForest(nodes=nodes, edges=[tuple(e) for e in doc["edges"]])
    roots = [int(r) for r in doc.get("roots", [])]
    if roots:
        forest = root_forest(forest, roots)
    return forest


# ---------------------------------------------------------------------------
# particle sampling (distance-ridge with Hessian orientation)
# ---------------------------------------------------------------------------

_OFFS26 = np.array(
    [(dx, dy, dz) for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)
     if (dx, dy, dz) != (0, 0, 0)],
    dtype=np.int64,
)


def sample_particles(mask: Volume3D, dt: Volume3D, enhanced: Volume3D,
                     smooth_sigma_mm: float | None = None) -> list[Particle]:
    """Deterministic ridge sampler over the distance map.

    A foreground voxel becomes a particle when its distance value is a
    strict local maximum among the 26-neighbors lying in the plane
    orthogonal to the local tangent (the Hessian eigenvector of the
    smallest-magnitude eigenvalue of the smoothed distance map). Exact ties
    are broken toward the lower flat index so plateau ridges keep one sample
    per cross-section. scale = distance value, intensity = enhanced value.
    """
    validate_mask(mask)
    if mask.dims != dt.dims or mask.dims != enhanced.dims:
        raise ValueError("mask, distance map, and enhanced volume must share dims")
    nx, ny, nz = mask.dims
    spacing = np.asarray(mask.spacing)
    if smooth_sigma_mm is None:
        smooth_sigma_mm = float(min(mask.spacing))

    hxx, hyy, hzz, hxy, hxz, hyz = hessian_components(dt.data, smooth_sigma_mm, mask.spacing)
    fg = np.argwhere(mask.data == 1)
    hmat = np.empty((len(fg), 3, 3), np.float64)
    ix, iy, iz = fg[:, 0], fg[:, 1], fg[:, 2]
    hmat[:, 0, 0] = hxx[ix, iy, iz]
    hmat[:, 1, 1] = hyy[ix, iy, iz]
    hmat[:, 2, 2] = hzz[ix, iy, iz]
    hmat[:, 0, 1] = hmat[:, 1, 0] = hxy[ix, iy, iz]
    hmat[:, 0, 2] = hmat[:, 2, 0] = hxz[ix, iy, iz]
    hmat[:, 1, 2] = hmat[:, 2, 1] = hyz[ix, iy, iz]
    evals, evecs = np.linalg.eigh(hmat)
    pick = np.argmin(np.abs(evals), axis=1)
    tang = evecs[np.arange(len(fg)), :, pick]
    tang /= np.linalg.norm(tang, axis=1, keepdims=True)

    # canonical sign: largest-magnitude component positive
    lead = np.argmax(np.abs(tang), axis=1)
    sgn = np.sign(tang[np.arange(len(fg)), lead])
    tang *= sgn[:, None]

    unit_offs = _OFFS26 * spacing
    unit_offs = unit_offs / np.linalg.norm(unit_offs, axis=1, keepdims=True)
    in_plane = np.abs(tang @ unit_offs.T) <= 0.5  # (Nf, 26)

    pad = np.full((nx + 2, ny + 2, nz + 2), -np.inf, np.float64)
    pad[1:-1, 1:-1, 1:-1] = dt.data.astype(np.float64)
    ctr = dt.data[ix, iy, iz].astype(np.float64)
    flat_ctr = ix + nx * (iy + ny * iz)

    keep = np.ones(len(fg), bool)
    for k, off in enumerate(_OFFS26):
        nb = pad[ix + 1 + off[0], iy + 1 + off[1], iz + 1 + off[2]]
        nbx, nby, nbz = ix + off[0], iy + off[1], iz + off[2]
        flat_nb = nbx + nx * (nby + ny * nbz)
        wins = (ctr > nb) | ((ctr == nb) & (flat_ctr < flat_nb))
        keep &= wins | ~in_plane[:, k]

    sel = np.where(keep)[0]
    order = np.argsort(flat_ctr[sel])
    particles = []
    for pid, si in enumerate(sel[order]):
        vx = fg[si]
        particles.append(Particle(
            id=pid,
            pos=np.asarray(mask.origin) + vx * spacing,
            scale=float(ctr[si]),
            dir=tang[si],
            intensity=float(enhanced.data[vx[0], vx[1], vx[2]]),
        ))
    return particles


# ---------------------------------------------------------------------------
# graph construction
# ---------------------------------------------------------------------------

class _UnionFind:
    def __init__(self, n):
        self.p = list(range(n))

    def find(self, a):
        while self.p[a] != a:
            self.p[a] = self.p[self.p[a]]
            a = self.p[a]
        return a

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return False
        self.p[rb] = ra
        return True


def build_graph(particles: list[Particle], spacing=(1.0, 1.0, 1.0),
                origin=(0.0, 0.0, 0.0)) -> TopologyForest:
    """26-neighborhood graph with degree cap 3 and deterministic acyclicity.

    Edges connect particles whose voxels are identical or 26-adjacent. When
    a node would exceed degree 3 it keeps the 3 neighbors most collinear
    with its tangent. Remaining cycles are broken by a minimum spanning
    forest over (physical edge length, id pair), which keeps the shortest
    local connections; the type contract requires an acyclic forest but no
    particular mechanism.
    """
    if not particles:
        raise ValueError("need at least one particle")
    spacing = np.asarray(spacing, dtype=np.float64)
    origin = np.asarray(origin, dtype=np.float64)
    vox = {}
    for p in particles:
        key = tuple(np.rint((p.pos - origin) / spacing).astype(np.int64))
        vox.setdefault(key, []).append(p.id)

    cand = set()
    for key, ids in vox.items():
        for a in ids:
            for b in ids:
                if a < b:
                    cand.add((a, b))
        for off in _OFFS26:
            nb = (key[0] + off[0], key[1] + off[1], key[2] + off[2])
            if nb in vox:
                for a in ids:
                    for b in vox[nb]:
                        if a < b:
                            cand.add((a, b))

    adj: dict[int, set[int]] = {p.id: set() for p in particles}
    for a, b in cand:
        adj[a].add(b)
        adj[b].add(a)

    # degree cap: iterate ids ascending, keep the 3 most collinear neighbors
    for p in particles:
        if len(adj[p.id]) <= 3:
            continue
        scored = []
        for nb in sorted(adj[p.id]):
            v = particles[nb].pos - p.pos
            nv = np.linalg.norm(v)
            score = abs(float(np.dot(v / nv, p.dir))) if nv > 0 else 0.0
            scored.append((-score, nb))
        scored.sort()
        keep = {nb for _, nb in scored[:3]}
        for nb in sorted(adj[p.id] - keep):
            adj[p.id].discard(nb)
            adj[nb].discard(p.id)

    edges = sorted({(min(a, b), max(a, b)) for a in adj for b in adj[a]})
    lengths = [float(np.linalg.norm(particles[a].pos - particles[b].pos)) for a, b in edges]
    uf = _UnionFind(len(particles))
    kept = []
    for (a, b), _l in sorted(zip(edges, lengths), key=lambda t: (t[1], t[0])):
        if uf.union(a, b):
            kept.append((a, b))

    forest = TopologyForest(nodes=list(particles), edges=kept)
    assign_kinds(forest)
    return forest


# ---------------------------------------------------------------------------
# false terminal detection and repair
# ---------------------------------------------------------------------------

def _march_dir(forest: TopologyForest, adj, pid: int) -> np.ndarray | None:
    """Tangent oriented away from the terminal's sole neighbor."""
    p = forest.nodes[pid]
    nbs = adj[pid]
    if not nbs:
        return None
    away = p.pos - forest.nodes[nbs[0]].pos
    if np.dot(away, p.dir) >= 0:
        return p.dir.copy()
    return -p.dir


def _mask_at(mask: Volume3D, pos_mm: np.ndarray) -> bool:
    idx = np.rint(mask.mm_to_voxel(pos_mm)).astype(np.int64)
    if (idx < 0).any() or (idx >= np.array(mask.dims)).any():
        return False  # out-of-bounds samples count as background
    return bool(mask.data[idx[0], idx[1], idx[2]] == 1)


def detect_false_terminals(forest: TopologyForest, mask: Volume3D) -> list[int]:
    """Terminals whose outward ray stays on the mask.

    March from each terminal along its oriented tangent, sampling every
    0.25 * scale over travel distances in [scale, 2 * scale]; any foreground
    sample flags the terminal as a false positive. Isolated particles have
    no march orientation and are skipped.
    """
    adj = forest.adjacency()
    flagged = []
    for p in forest.nodes:
        if p.kind != KIND_TERMINAL:
            continue
        d = _march_dir(forest, adj, p.id)
        if d is None:
            continue
        for step in np.arange(1.0, 2.0 + 1e-9, 0.25):
            if _mask_at(mask, p.pos + d * (step * p.scale)):
                flagged.append(p.id)
                break
    return flagged


def _probe_point(forest: TopologyForest, adj, mask: Volume3D, pid: int) -> np.ndarray | None:
    """Deepest foreground sample along the terminal's outward ray."""
    p = forest.nodes[pid]
    d = _march_dir(forest, adj, pid)
    if d is None:
        return None
    best = None
    for step in np.arange(1.0, 2.0 + 1e-9, 0.25):
        pos = p.pos + d * (step * p.scale)
        if _mask_at(mask, pos):
            best = pos
    return best


def repair(forest: TopologyForest, flagged: list[int], time: Volume3D,
           dt: Volume3D, mask: Volume3D) -> TopologyForest:
    """Recover lost skeleton paths behind false-positive terminals.

    The time map must be solved with the existing skeleton voxels as seeds.
    For each flagged terminal (ascending id) the deepest foreground probe
    along its outward ray is backtraced to the skeleton basin; the probe and
    path positions become new particles chained onto the terminal and
    attached at the first contact with the existing forest. An attachment
    that would close a cycle (contact in the terminal's own component) is
    discarded, and contacts insist on a node with degree <= 2 so the degree
    bound survives. Unreachable terminals are left unrepaired and reported.
    """
    nodes = [Particle(p.id, p.pos.copy(), p.scale, p.dir.copy(), p.intensity, p.kind)
             for p in forest.nodes]
    edges = list(forest.edges)
    adj0 = forest.adjacency()
    min_sp = float(min(dt.spacing))
    contact_radius = 1.5 * float(np.linalg.norm(dt.spacing))
    step = 0.5 * min_sp

    uf = _UnionFind(len(nodes) + 1)
    for a, b in edges:
        uf.union(a, b)

    positions = [p.pos for p in nodes]

    def nearest_attachable(pos, exclude_ids, deg):
        best = None
        best_d = contact_radius
        for i, q in enumerate(positions):
            if i in exclude_ids:
                continue
            d = float(np.linalg.norm(q - pos))
            if d <= best_d and deg[i] <= 2:
                best, best_d = i, d
        return best

    for pid in sorted(flagged):
        probe = _probe_point(forest, adj0, mask, pid)
        if probe is None:
            continue
        try:
            path = backtrace(time, probe, step)
        except UnreachableStart:
            log.warning("flagged terminal %d unreachable in the time map, left unrepaired", pid)
            continue
        except DescentStagnation as exc:
            log.warning("flagged terminal %d: descent stagnated at %s, left unrepaired",
                        pid, np.round(exc.position, 2))
            continue

        term = nodes[pid]
        chain_pts = [term.pos]
        for pos in [probe] + list(path.points[1:]):
            if np.linalg.norm(pos - chain_pts[-1]) >= min_sp:
                chain_pts.append(np.asarray(pos, dtype=np.float64))
        if len(chain_pts) < 2:
            continue

        deg = np.zeros(len(nodes), dtype=np.int64)
        for a, b in edges:
            deg[a] += 1
            deg[b] += 1

        contact = None
        cut = len(chain_pts)
        for k in range(1, len(chain_pts)):
            hit = nearest_attachable(chain_pts[k], {pid}, deg)
            if hit is not None:
                contact = hit
                cut = k
                break
        new_pts = chain_pts[1:cut]
        if contact is None:
            log.warning("flagged terminal %d: no attachable contact along path, left unrepaired", pid)
            continue
        if uf.find(contact) == uf.find(pid):
            log.info("flagged terminal %d: contact %d already in its component, repair skipped", pid, contact)
            continue
        if not new_pts and deg[pid] >= 3:
            continue

        dt_vals = trilinear(dt.data, dt.mm_to_voxel(np.array(new_pts))) if new_pts else []
        prev = pid
        for k, pos in enumerate(new_pts):
            nxt = np.asarray(chain_pts[k + 2]) if k + 2 <= len(new_pts) else nodes[contact].pos
            tangent = nxt - chain_pts[k]
            norm = np.linalg.norm(tangent)
            tangent = tangent / norm if norm > 0 else np.array([1.0, 0.0, 0.0])
            nid = len(nodes)
            nodes.append(Particle(
                id=nid, pos=pos, scale=max(float(dt_vals[k]), 0.25 * min_sp),
                dir=tangent, intensity=0.0,
            ))
            positions.append(pos)
            uf.p.append(nid)
            edges.append((min(prev, nid), max(prev, nid)))
            uf.union(prev, nid)
            prev = nid
        edges.append((min(prev, contact), max(prev, contact)))
        uf.union(prev, contact)

    out = TopologyForest(nodes=nodes, edges=edges)
    assign_kinds(out)
    return out


# ---------------------------------------------------------------------------
# rooting and decomposition
# ---------------------------------------------------------------------------

def root_forest(forest: TopologyForest, roots="auto") -> TopologyForest:
    """Assign parents by BFS from one root per connected component.

    auto mode roots each component at its largest-scale particle (ties to
    the smaller id). Explicit root lists must name existing nodes, at most
    one per component; components without an explicit root fall back to the
    auto rule.
    """
    comps = forest.components()
    comp_of = {}
    for ci, comp in enumerate(comps):
        for n in comp:
            comp_of[n] = ci
    chosen: dict[int, int] = {}
    if roots != "auto":
        for r in roots:
            if not 0 <= int(r) < len(forest.nodes):
                raise ValueError(f"explicit root id {r} not in forest")
            ci = comp_of[int(r)]
            if ci in chosen:
                raise ValueError(
                    f"roots {chosen[ci]} and {r} lie in the same connected component")
            chosen[ci] = int(r)
    for ci, comp in enumerate(comps):
        if ci not in chosen:
            chosen[ci] = max(comp, key=lambda n: (forest.nodes[n].scale, -n))

    adj = forest.adjacency()
    parent: dict[int, int] = {}
    root_list = sorted(chosen.values())
    for r in root_list:
        queue = [r]
        seen = {r}
        while queue:
            u = queue.pop(0)
            for v in adj[u]:
                if v not in seen:
                    seen.add(v)
                    parent[v] = u
                    queue.append(v)
    out = TopologyForest(nodes=forest.nodes, edges=forest.edges,
                         roots=root_list, parent=parent)
    assign_kinds(out)
    return out


def _require_rooted(forest: TopologyForest):
    if not forest.roots:
        raise ValueError("forest must be rooted first")


def extract_subtrees(forest: TopologyForest) -> list[Subtree]:
    """One subtree per child of each root; members are all its descendants."""
    _require_rooted(forest)
    children: dict[int, list[int]] = {}
    for child, par in forest.parent.items():
        children.setdefault(par, []).append(child)
    subtrees = []
    for r in forest.roots:
        for anchor in sorted(children.get(r, [])):
            members = []
            stack = [anchor]
            while stack:
                u = stack.pop()
                members.append(u)
                stack.extend(sorted(children.get(u, []), reverse=True))
            subtrees.append(Subtree(anchor=anchor, root=r, members=sorted(members)))
    return subtrees


def extract_branches(forest: TopologyForest) -> list[Branch]:
    """Maximal degree-2 chains; every edge lies in exactly one branch.

    Roots always terminate a branch so no branch spans two subtrees.
    """
    _require_rooted(forest)
    adj = forest.adjacency()
    deg = forest.degrees()
    is_end = {n for n in range(len(forest.nodes)) if deg[n] != 2}
    is_end.update(forest.roots)
    branches = []
    seen_edges = set()
    for start in sorted(is_end):
        for nb in adj[start]:
            e = (min(start, nb), max(start, nb))
            if e in seen_edges:
                continue
            chain = [start, nb]
            seen_edges.add(e)
            while chain[-1] not in is_end:
                u = chain[-1]
                nxts = [v for v in adj[u] if v != chain[-2]]
                v = nxts[0]
                seen_edges.add((min(u, v), max(u, v)))
                chain.append(v)
            branches.append(Branch(
                ids=chain,
                end_kinds=(forest.nodes[chain[0]].kind, forest.nodes[chain[-1]].kind),
            ))
    return branches


def extract_terminal_branches(forest: TopologyForest, branches: list[Branch]) -> list[Branch]:
    """Branches with at least one true terminal endpoint (roots excluded:
    a degree-1 root is the tree origin, not a terminal tip)."""
    roots = set(forest.roots)
    out = []
    for b in branches:
        for end in (b.ids[0], b.ids[-1]):
            if forest.nodes[end].kind == KIND_TERMINAL and end not in roots:
                out.append(b)
                break
    return out


def terminal_branch_ids(forest: TopologyForest, branches: list[Branch]) -> list[int]:
    """Sorted union of particle ids on terminal branches."""
    ids = set()
    for b in extract_terminal_branches(forest, branches):
        ids.update(b.ids)
    return sorted(ids)


def skeleton_voxels(forest: TopologyForest, vol: Volume3D) -> np.ndarray:
    """Unique voxel indices of all particles, for use as eikonal seeds."""
    idx = np.rint(vol.mm_to_voxel(forest.positions())).astype(np.int64)
    idx = np.clip(idx, 0, np.array(vol.dims) - 1)
    return np.unique(idx, axis=0)
