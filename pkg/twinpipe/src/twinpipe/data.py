"""Dataset-directory loading and graph batching.

The dataset layout is the exporter's contract: manifest.json,
patches_orig.bin / patches_enh.bin (float32 LE, node-id order, one
32*32*3 block per node), neighbors.json, terminal_ids.json, and labels.tsv
for training. A batch stacks each node with its padded neighbor list, so
per channel set the tensor is (b, n, 32, 32, 3).
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass

import numpy as np
import torch

PATCH_SHAPE = (32, 32, 3)
LABEL_CODES = {"artery": 1, "vein": 2}


@dataclass
class PatchDataset:
    nodes: list[int]
    patches: dict[str, np.ndarray]   # channel set -> (N, 32, 32, 3)
    neighbors: dict[int, list[int]]
    terminal_ids: list[int]
    labels: dict[int, int] | None    # id -> 1 artery, 2 vein
    data_hash: str

    @property
    def labeled(self) -> bool:
        return self.labels is not None


def load_dataset(path: str | os.PathLike) -> PatchDataset:
    path = os.fspath(path)
    with open(os.path.join(path, "manifest.json"), "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    n = int(manifest["node_count"])
    shape = tuple(manifest["patch_shape"])
    if shape != PATCH_SHAPE:
        raise ValueError(f"unsupported patch shape {shape}, expected {PATCH_SHAPE}")

    patches = {}
    hasher = hashlib.sha256()
    for ch in manifest["channels"]:
        raw = os.path.join(path, f"patches_{ch}.bin")
        arr = np.fromfile(raw, dtype="<f4")
        expected = n * int(np.prod(shape))
        if arr.size != expected:
            raise ValueError(f"{raw}: expected {expected} float32 values, got {arr.size}")
        patches[ch] = arr.reshape((n, *shape))
        with open(raw, "rb") as fh:
            hasher.update(fh.read())

    with open(os.path.join(path, "neighbors.json"), "r", encoding="utf-8") as fh:
        neighbors = {int(k): [int(v) for v in vs] for k, vs in json.load(fh).items()}
    with open(os.path.join(path, "terminal_ids.json"), "r", encoding="utf-8") as fh:
        terminal_ids = [int(i) for i in json.load(fh)]

    labels = None
    labels_path = os.path.join(path, "labels.tsv")
    if os.path.exists(labels_path):
        labels = {}
        with open(labels_path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                pid, name = line.split("\t")
                labels[int(pid)] = LABEL_CODES[name]
        hasher.update(open(labels_path, "rb").read())

    return PatchDataset(
        nodes=list(range(n)), patches=patches, neighbors=neighbors,
        terminal_ids=terminal_ids, labels=labels, data_hash=hasher.hexdigest(),
    )


def pipe_channels(pipe: str) -> list[str]:
    """The full pipe sees the original patches; the terminal pipe gets the
    enhancement channel stacked on top."""
    if pipe == "full":
        return ["orig"]
    if pipe == "terminal":
        return ["orig", "enh"]
    raise ValueError(f"pipe must be full|terminal, got {pipe!r}")


def pipe_node_ids(ds: PatchDataset, pipe: str) -> list[int]:
    return list(ds.nodes) if pipe == "full" else sorted(ds.terminal_ids)


def pad_neighbors(ds: PatchDataset, node: int, n_neighbors: int) -> list[int]:
    """Neighbor list padded with the node itself (or truncated) to fixed n."""
    nbs = list(ds.neighbors.get(node, []))[:n_neighbors]
    while len(nbs) < n_neighbors:
        nbs.append(node)
    return nbs


def make_batch(ds: PatchDataset, node_ids: list[int], pipe: str,
               n_neighbors: int = 2) -> dict:
    """Tensors for one batch: per channel set (b, n, 32, 32, 3) patches for
    the nodes and their padded neighbor lists, plus labels when present."""
    chans = pipe_channels(pipe)
    ids = np.asarray(node_ids, dtype=np.int64)
    groups = np.array([[i] + pad_neighbors(ds, int(i), n_neighbors) for i in ids])
    per_chan = []
    for ch in chans:
        block = ds.patches[ch][groups]          # (b, n+1, 32, 32, 3)
        nb = block[:, 1:]
        assert nb.shape[1:] == (n_neighbors, *PATCH_SHAPE), (
            f"neighbor batch shape {nb.shape[1:]} != ({n_neighbors}, 32, 32, 3)")
        per_chan.append(block)
    stacked = np.concatenate(per_chan, axis=-1)  # channel sets stack on depth
    batch = {
        "ids": torch.from_numpy(ids),
        "patches": torch.from_numpy(stacked.astype(np.float32)),
    }
    if ds.labels is not None:
        batch["labels"] = torch.tensor([ds.labels.get(int(i), 0) for i in ids],
                                       dtype=torch.int64)
    return batch


def train_val_split(node_ids: list[int], val_every: int = 5):
    """Deterministic split: every val_every-th id goes to validation."""
    train, val = [], []
    for k, i in enumerate(sorted(node_ids)):
        (val if k % val_every == 0 else train).append(i)
    return train, val
