import json

import numpy as np
import pytest
import torch

from twinpipe.data import load_dataset, make_batch, pipe_node_ids
from twinpipe.infer import infer_pipe
from twinpipe.model import NonLocalBlock, PipeNet
from twinpipe.train import TrainSettings, train_pipe


def test_dataset_loads(toy_dataset):
    ds = load_dataset(toy_dataset["dir"])
    assert ds.labeled
    assert set(ds.patches) == {"orig", "enh"}
    assert ds.patches["orig"].shape[1:] == (32, 32, 3)
    assert sorted(ds.terminal_ids) == toy_dataset["terminal_ids"]


def test_batch_shape_asserted(toy_dataset):
    ds = load_dataset(toy_dataset["dir"])
    ids = ds.nodes[:16]
    batch = make_batch(ds, ids, "full", n_neighbors=2)
    assert batch["patches"].shape == (16, 3, 32, 32, 3)  # node + n neighbors
    batch_t = make_batch(ds, [i for i in ds.terminal_ids[:8]], "terminal", 2)
    assert batch_t["patches"].shape == (8, 3, 32, 32, 6)  # orig + enh stacked


def test_nonlocal_block_preserves_shape():
    torch.manual_seed(0)
    block = NonLocalBlock(32)
    x = torch.randn(4, 32, 8, 8)
    assert block(x).shape == x.shape


def test_untrained_accuracy_near_half(toy_dataset, tmp_path):
    out = tmp_path / "untrained.pt"
    manifest = train_pipe(toy_dataset["dir"], "full", out, TrainSettings(epochs=0, seed=3))
    assert manifest["epochs_run"] == 0
    assert out.exists()
    assert 0.4 <= manifest["val_accuracy"] <= 0.6


def test_training_reaches_validation_target(trained_full):
    m = trained_full["manifest"]
    assert m["epochs_run"] <= 20
    assert m["val_accuracy"] >= 0.85


def test_loss_decreasing_trend(trained_full):
    losses = trained_full["manifest"]["epoch_losses"][:10]
    non_monotone = sum(1 for a, b in zip(losses, losses[1:]) if b > a)
    assert non_monotone <= 2


def test_default_settings_pinned():
    st = TrainSettings()
    assert st.momentum == 0.9
    assert st.learning_rate == 1e-3
    assert st.batch_size == 128
    assert st.epochs == 150


def test_manifest_records_provenance(trained_full, toy_dataset):
    man_path = str(trained_full["path"]) + ".manifest.json"
    man = json.loads(open(man_path).read())
    ds = load_dataset(toy_dataset["dir"])
    assert man["data_hash"] == ds.data_hash
    assert "non-local" in man["architecture"]
    assert man["settings"]["momentum"] == 0.9
    assert man["settings"]["learning_rate"] == 1e-3
    assert man["settings"]["batch_size"] == 16  # the toy override is echoed


def test_infer_coverage_and_range(trained_full, trained_terminal, toy_dataset, tmp_path):
    ds = load_dataset(toy_dataset["dir"])
    full_tsv = tmp_path / "full.tsv"
    probs = infer_pipe(trained_full["path"], toy_dataset["dir"], full_tsv)
    assert set(probs) == set(ds.nodes)
    assert all(0.0 <= p <= 1.0 for p in probs.values())
    assert full_tsv.read_text().startswith("#provenance=full-pipe\n")

    term_tsv = tmp_path / "term.tsv"
    probs_t = infer_pipe(trained_terminal["path"], toy_dataset["dir"], term_tsv)
    assert set(probs_t) == set(ds.terminal_ids)
    assert term_tsv.read_text().startswith("#provenance=terminal-pipe\n")


def test_infer_deterministic(trained_full, toy_dataset, tmp_path):
    a = tmp_path / "a.tsv"
    b = tmp_path / "b.tsv"
    infer_pipe(trained_full["path"], toy_dataset["dir"], a)
    infer_pipe(trained_full["path"], toy_dataset["dir"], b)
    assert a.read_bytes() == b.read_bytes()


def test_self_consistency_on_training_set(trained_full, toy_dataset, tmp_path):
    tsv = tmp_path / "p.tsv"
    probs = infer_pipe(trained_full["path"], toy_dataset["dir"], tsv)
    ds = load_dataset(toy_dataset["dir"])
    hits = sum(1 for i, p in probs.items()
               if i in ds.labels and (p > 0.5) == (ds.labels[i] == 1))
    labeled = sum(1 for i in probs if i in ds.labels)
    acc = hits / labeled
    assert acc >= trained_full["manifest"]["train_accuracy"] - 0.05


def test_train_requires_labels(toy_dataset, tmp_path):
    import shutil
    unlabeled = tmp_path / "unlabeled"
    shutil.copytree(toy_dataset["dir"], unlabeled)
    (unlabeled / "labels.tsv").unlink()
    man = json.loads((unlabeled / "manifest.json").read_text())
    man["labeled"] = False
    (unlabeled / "manifest.json").write_text(json.dumps(man))
    with pytest.raises(ValueError, match="labels"):
        train_pipe(unlabeled, "full", tmp_path / "m.pt", TrainSettings(epochs=1))


def test_cli_round_trip(toy_dataset, tmp_path):
    from twinpipe.cli import main
    model = tmp_path / "m.pt"
    rc = main(["train", "--pipe", "full", "--data", str(toy_dataset["dir"]),
               "--out", str(model), "--epochs", "1", "--seed", "1"])
    assert rc == 0
    tsv = tmp_path / "p.tsv"
    assert main(["infer", "--model", str(model), "--data", str(toy_dataset["dir"]),
                 "--out", str(tsv)]) == 0
    assert tsv.exists()
