"""Training loop: SGD with momentum, cross-entropy, fixed-size node batches."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass

import numpy as np
import torch

from .data import PatchDataset, load_dataset, make_batch, pipe_channels, pipe_node_ids, train_val_split
from .model import ARCHITECTURE, PipeNet


@dataclass
class TrainSettings:
    momentum: float = 0.9
    learning_rate: float = 1e-3
    batch_size: int = 128
    epochs: int = 150
    n_neighbors: int = 2
    seed: int = 0
    val_every: int = 5
    target_val_accuracy: float | None = None  # stop early once reached


def _accuracy(model: PipeNet, ds: PatchDataset, ids, pipe: str, n_neighbors: int) -> float:
    if not ids:
        return float("nan")
    model.eval()
    hits = 0
    with torch.no_grad():
        for k in range(0, len(ids), 256):
            batch = make_batch(ds, ids[k:k + 256], pipe, n_neighbors)
            pred = model(batch["patches"]).argmax(dim=1) + 1
            hits += int((pred == batch["labels"]).sum())
    return hits / len(ids)


def train_pipe(data_dir, pipe: str, out_path, settings: TrainSettings | None = None):
    """Train one pipe on an exported dataset and save the model artifact.

    The artifact is a torch file holding the state dict plus a manifest
    (settings, data hash, architecture, final train/val accuracy); the
    manifest is also written next to it as <out>.manifest.json.
    """
    st = settings or TrainSettings()
    ds = load_dataset(data_dir)
    if not ds.labeled:
        raise ValueError(f"dataset {data_dir} has no labels.tsv; cannot train")
    node_ids = pipe_node_ids(ds, pipe)
    labeled_ids = [i for i in node_ids if i in ds.labels]
    train_ids, val_ids = train_val_split(labeled_ids, st.val_every)

    torch.manual_seed(st.seed)
    in_channels = 3 * len(pipe_channels(pipe))
    model = PipeNet(in_channels, st.n_neighbors)
    stats_src = np.concatenate([ds.patches[ch][train_ids] for ch in pipe_channels(pipe)])
    model.set_input_stats(float(stats_src.mean()), float(stats_src.std()))
    opt = torch.optim.SGD(model.parameters(), lr=st.learning_rate, momentum=st.momentum)
    loss_fn = torch.nn.CrossEntropyLoss()
    rng = np.random.default_rng(st.seed)

    epoch_losses = []
    val_acc = float("nan")
    for epoch in range(st.epochs):
        model.train()
        order = rng.permutation(len(train_ids))
        losses = []
        for k in range(0, len(order), st.batch_size):
            ids = [train_ids[j] for j in order[k:k + st.batch_size]]
            batch = make_batch(ds, ids, pipe, st.n_neighbors)
            opt.zero_grad()
            logits = model(batch["patches"])
            loss = loss_fn(logits, batch["labels"] - 1)
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
        epoch_losses.append(float(np.mean(losses)) if losses else float("nan"))
        val_acc = _accuracy(model, ds, val_ids, pipe, st.n_neighbors)
        if st.target_val_accuracy is not None and val_acc >= st.target_val_accuracy:
            break

    train_acc = _accuracy(model, ds, train_ids, pipe, st.n_neighbors)
    val_acc = _accuracy(model, ds, val_ids, pipe, st.n_neighbors)
    manifest = {
        "pipe": pipe,
        "settings": asdict(st),
        "data_hash": ds.data_hash,
        "architecture": ARCHITECTURE,
        "in_channels": in_channels,
        "epochs_run": len(epoch_losses),
        "epoch_losses": epoch_losses,
        "train_accuracy": train_acc,
        "val_accuracy": val_acc,
    }
    torch.save({"state_dict": model.state_dict(), "manifest": manifest}, out_path)
    with open(f"{os.fspath(out_path)}.manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
        fh.write("\n")
    return manifest
