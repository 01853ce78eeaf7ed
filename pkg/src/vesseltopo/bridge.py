"""Classifier boundary: oriented patches, dataset export, probability
ingestion, twin-pipe mutual correction, and the reference noisy oracle.

The learned classifier lives outside this package; it consumes the dataset
directory written by export_dataset and returns probability TSVs that
ingest_probabilities validates. oracle_classifier stands in for the model
at desk scale so the whole refinement pipeline runs without training.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import dataclass

import numpy as np

from .tables import ARTERY, LabelTable, ProbabilityTable
from .topology import TopologyForest
from .volume import Volume3D

log = logging.getLogger(__name__)

PATCH_SIZE = (32, 32, 3)


@dataclass
class OrientedPatch:
    """Local image patch perpendicular to the particle tangent."""

    particle_id: int
    data: np.ndarray                    # (nu, nv, nw) float32
    basis: tuple[np.ndarray, np.ndarray, np.ndarray]  # (u, v, dir), right-handed
    out_of_bounds: bool = False


def patch_basis(direction: np.ndarray):
    """Right-handed orthonormal (u, v, dir): u is the global z axis projected
    onto the plane orthogonal to dir (x axis when dir is parallel to z)."""
    d = np.asarray(direction, dtype=np.float64)
    d = d / np.linalg.norm(d)
    for ref in (np.array([0.0, 0.0, 1.0]), np.array([1.0, 0.0, 0.0])):
        u = ref - np.dot(ref, d) * d
        n = np.linalg.norm(u)
        if n > 1e-6:
            u = u / n
            break
    v = np.cross(d, u)
    return u, v, d


def extract_patches(volume: Volume3D, forest: TopologyForest,
                    size: tuple[int, int, int] = PATCH_SIZE,
                    spacing_mm: float | None = None) -> list[OrientedPatch]:
    """Trilinear patches on the plane orthogonal to each particle tangent.

    Sampling clamps to the volume border; a particle entirely outside the
    volume produces a zero patch and is flagged. Patch count equals node
    count, in id order.
    """
    if spacing_mm is None:
        spacing_mm = float(min(volume.spacing))
    nu, nv, nw = size
    iu = (np.arange(nu) - (nu - 1) / 2.0) * spacing_mm
    iv = (np.arange(nv) - (nv - 1) / 2.0) * spacing_mm
    iw = (np.arange(nw) - (nw - 1) / 2.0) * spacing_mm
    dims = np.array(volume.dims)
    ext_lo = np.asarray(volume.origin)
    ext_hi = ext_lo + (dims - 1) * np.asarray(volume.spacing)

    patches = []
    for p in forest.nodes:
        u, v, d = patch_basis(p.dir)
        oob = bool((p.pos < ext_lo - 1e-9).any() or (p.pos > ext_hi + 1e-9).any())
        if oob:
            log.warning("particle %d at %s outside the volume; zero patch", p.id, p.pos)
            data = np.zeros(size, np.float32)
        else:
            grid = (
                p.pos[None, None, None, :]
                + iu[:, None, None, None] * u
                + iv[None, :, None, None] * v
                + iw[None, None, :, None] * d
            )
            vox = (grid - ext_lo) / np.asarray(volume.spacing)
            from .msfm import trilinear
            flat = trilinear(volume.data, vox.reshape(-1, 3))
            data = flat.reshape(size).astype(np.float32)
        patches.append(OrientedPatch(particle_id=p.id, data=data, basis=(u, v, d),
                                     out_of_bounds=oob))
    return patches


# ---------------------------------------------------------------------------
# dataset directory
# ---------------------------------------------------------------------------

def export_dataset(patches: dict[str, list[OrientedPatch]], forest: TopologyForest,
                   labels: LabelTable | None, out_dir: str | os.PathLike,
                   terminal_ids: list[int] | None = None,
                   patch_spacing_mm: float | None = None) -> None:
    """Write the classifier dataset directory.

    patches maps channel set name ("orig", "enh") to per-node patch lists in
    id order. Layout: manifest.json, patches_<ch>.bin (float32 LE, node-id
    order), neighbors.json, terminal_ids.json, and labels.tsv when labels
    are given.
    """
    os.makedirs(out_dir, exist_ok=True)
    n = len(forest.nodes)
    for ch, plist in patches.items():
        if len(plist) != n:
            raise ValueError(f"channel {ch}: {len(plist)} patches for {n} nodes")
        ids = [p.particle_id for p in plist]
        if ids != list(range(n)):
            raise ValueError(f"channel {ch}: patches must be in dense id order")
    if labels is not None:
        extra = labels.ids() - {p.id for p in forest.nodes}
        if extra:
            raise ValueError(f"labels name unknown particle ids {sorted(extra)[:5]}")

    shape = tuple(next(iter(patches.values()))[0].data.shape)
    for ch, plist in sorted(patches.items()):
        buf = np.stack([p.data for p in plist]).astype("<f4")
        buf.tofile(os.path.join(out_dir, f"patches_{ch}.bin"))

    adj = forest.adjacency()
    with open(os.path.join(out_dir, "neighbors.json"), "w", encoding="utf-8") as fh:
        json.dump({str(i): adj[i] for i in range(n)}, fh, sort_keys=True,
                  separators=(",", ":"))
        fh.write("\n")

    if terminal_ids is None:
        terminal_ids = []
    with open(os.path.join(out_dir, "terminal_ids.json"), "w", encoding="utf-8") as fh:
        json.dump(sorted(int(i) for i in terminal_ids), fh, separators=(",", ":"))
        fh.write("\n")

    if labels is not None:
        from .tables import write_labels
        write_labels(labels, os.path.join(out_dir, "labels.tsv"))

    manifest = {
        "node_count": n,
        "patch_shape": list(shape),
        "patch_spacing_mm": patch_spacing_mm,
        "channels": sorted(patches),
        "labeled": labels is not None,
        "terminal_count": len(terminal_ids),
    }
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def read_patch_bin(path: str | os.PathLike, n_nodes: int,
                   shape: tuple[int, int, int] = PATCH_SIZE) -> np.ndarray:
    arr = np.fromfile(path, dtype="<f4")
    expected = n_nodes * int(np.prod(shape))
    if arr.size != expected:
        raise ValueError(f"{path}: expected {expected} float32 values, got {arr.size}")
    return arr.reshape((n_nodes, *shape))


# ---------------------------------------------------------------------------
# probability ingestion and mutual correction
# ---------------------------------------------------------------------------

def ingest_probabilities(path: str | os.PathLike, forest: TopologyForest,
                         expected: str,
                         terminal_ids: list[int] | None = None) -> ProbabilityTable:
    """Read and validate a probability TSV against its provenance contract.

    full-pipe, merged, and oracle tables must cover every forest id exactly
    once; terminal-pipe tables must cover exactly the terminal-branch ids
    (pass terminal_ids for that check).
    """
    probs: dict[int, float] = {}
    provenance = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            if line.startswith("#"):
                if line.startswith("#provenance="):
                    provenance = line.split("=", 1)[1]
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected 'id<TAB>p_artery'")
            pid = int(parts[0])
            p = float(parts[1])
            if not 0.0 <= p <= 1.0:
                raise ValueError(
                    f"{path}:{lineno}: probability {p} for id {pid} outside [0,1]")
            if pid in probs:
                raise ValueError(f"{path}:{lineno}: duplicate id {pid}")
            probs[pid] = p
    if provenance is None:
        raise ValueError(f"{path}: missing '#provenance=' header")
    if provenance != expected:
        raise ValueError(f"{path}: provenance {provenance!r}, expected {expected!r}")

    forest_ids = {p.id for p in forest.nodes}
    unknown = set(probs) - forest_ids
    if unknown:
        raise ValueError(f"{path}: unknown particle ids {sorted(unknown)[:5]}")
    if expected == "terminal-pipe":
        if terminal_ids is None:
            raise ValueError("terminal-pipe ingestion needs the terminal id set")
        want = set(int(i) for i in terminal_ids)
        if set(probs) != want:
            missing = sorted(want - set(probs))[:5]
            extra = sorted(set(probs) - want)[:5]
            raise ValueError(
                f"{path}: terminal-pipe coverage mismatch (missing {missing}, extra {extra})")
    else:
        if set(probs) != forest_ids:
            missing = sorted(forest_ids - set(probs))[:5]
            raise ValueError(f"{path}: must cover all forest ids (missing {missing})")
    return ProbabilityTable(probs=probs, provenance=expected)


def mutual_correct(full: ProbabilityTable, term: ProbabilityTable,
                   terminal_ids: list[int]) -> ProbabilityTable:
    """Merge the two pipes: mean probability on terminal-branch particles,
    full-pipe value elsewhere."""
    tids = set(int(i) for i in terminal_ids)
    if not tids <= full.ids():
        raise ValueError("full-pipe table does not cover all terminal ids")
    if term.ids() != tids:
        raise ValueError("terminal table must cover exactly the terminal ids")
    merged = dict(full.probs)
    for i in sorted(tids):
        merged[i] = 0.5 * (full.probs[i] + term.probs[i])
    return ProbabilityTable(probs=merged, provenance="merged")


def oracle_classifier(truth: LabelTable, flip_rate: float, seed: int) -> ProbabilityTable:
    """Stand-in classifier: p = 0.9 for true arteries, 0.1 for veins, each
    particle independently flipped (p -> 1-p) with the given rate."""
    if not 0.0 <= flip_rate < 0.5:
        raise ValueError(f"flip rate must lie in [0, 0.5), got {flip_rate}")
    rng = np.random.default_rng(seed)
    ids = sorted(truth.labels)
    flips = rng.random(len(ids)) < flip_rate
    probs = {}
    for pid, flip in zip(ids, flips):
        p = 0.9 if truth.labels[pid] == ARTERY else 0.1
        probs[pid] = 1.0 - p if flip else p
    return ProbabilityTable(probs=probs, provenance="oracle")


def file_sha256(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
