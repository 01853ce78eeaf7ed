"""Inference: model artifact + dataset directory -> probability TSV."""

from __future__ import annotations

import torch

from .data import load_dataset, make_batch, pipe_node_ids
from .model import PipeNet

PROVENANCE = {"full": "full-pipe", "terminal": "terminal-pipe"}


def load_model(path):
    blob = torch.load(path, map_location="cpu", weights_only=False)
    manifest = blob["manifest"]
    model = PipeNet(manifest["in_channels"], manifest["settings"]["n_neighbors"])
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model, manifest


def infer_pipe(model_path, data_dir, out_path) -> dict:
    """Emit the probability TSV for the model's pipe over the dataset.

    The full pipe covers every node id, the terminal pipe exactly the
    terminal-branch ids; rows are sorted by id so inference is stable.
    """
    model, manifest = load_model(model_path)
    ds = load_dataset(data_dir)
    pipe = manifest["pipe"]
    n_nb = manifest["settings"]["n_neighbors"]
    node_ids = pipe_node_ids(ds, pipe)
    probs = {}
    with torch.no_grad():
        for k in range(0, len(node_ids), 256):
            ids = node_ids[k:k + 256]
            batch = make_batch(ds, ids, pipe, n_nb)
            p = model.probabilities(batch["patches"])
            for i, v in zip(ids, p.tolist()):
                probs[int(i)] = min(max(float(v), 0.0), 1.0)
    with open(out_path, "w", encoding="utf-8") as fh:
        fh.write(f"#provenance={PROVENANCE[pipe]}\n")
        for pid in sorted(probs):
            fh.write(f"{pid}\t{probs[pid]:.6f}\n")
    return probs
