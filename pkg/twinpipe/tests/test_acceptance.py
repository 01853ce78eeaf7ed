"""Secondary acceptance: toy training accuracy, batch shape, and the
round trip into the primary's refinement path."""

import numpy as np

import vesseltopo as vt
from vesseltopo.optimizer import refine, score, threshold_labels
from vesseltopo.topology import extract_branches, extract_subtrees

from twinpipe.data import load_dataset, make_batch
from twinpipe.infer import infer_pipe


def report(name, ok, detail):
    print(f"\n[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    assert ok, f"{name}: {detail}"


def _end_to_end_accuracy(forest, truth, probs_table):
    raw = threshold_labels(probs_table)
    subtrees = extract_subtrees(forest)
    branches = extract_branches(forest)
    refined = refine(forest, subtrees, branches, raw,
                     score(forest, subtrees, branches, raw))
    matched = vt.LabelTable({i: refined.labels[i] for i in truth.labels},
                            stage="refined")
    return vt.evaluate(matched, truth).accuracy


def test_secondary_acceptance(toy_dataset, trained_full, trained_terminal, tmp_path):
    # toy training reaches the bar within 20 epochs
    m = trained_full["manifest"]
    train_ok = m["val_accuracy"] >= 0.85 and m["epochs_run"] <= 20

    # batch shape contract: b x n x 32 x 32 x 3 per channel set
    ds = load_dataset(toy_dataset["dir"])
    batch = make_batch(ds, ds.nodes[:128], "full", n_neighbors=2)
    nb_shape = tuple(batch["patches"].shape)
    shape_ok = nb_shape == (128, 3, 32, 32, 3)

    # emitted TSVs ingest into the primary without error
    forest = toy_dataset["forest"]
    truth = toy_dataset["truth"]
    term_ids = toy_dataset["terminal_ids"]
    full_tsv = tmp_path / "full.tsv"
    term_tsv = tmp_path / "term.tsv"
    infer_pipe(trained_full["path"], toy_dataset["dir"], full_tsv)
    infer_pipe(trained_terminal["path"], toy_dataset["dir"], term_tsv)
    full_table = vt.ingest_probabilities(full_tsv, forest, "full-pipe")
    term_table = vt.ingest_probabilities(term_tsv, forest, "terminal-pipe",
                                         terminal_ids=term_ids)

    # mutual correction must not reduce end-to-end accuracy on the toy batch
    merged = vt.mutual_correct(full_table, term_table, term_ids)
    acc_full = _end_to_end_accuracy(forest, truth, full_table)
    acc_merged = _end_to_end_accuracy(forest, truth, merged)
    merge_ok = acc_merged >= acc_full

    ok = train_ok and shape_ok and merge_ok
    report(
        "Twin-pipe toy training", ok,
        f"val acc {m['val_accuracy']:.3f} >= 0.85 in {m['epochs_run']} epochs, "
        f"batch shape {nb_shape}, ingest ok, merged end-to-end {acc_merged:.4f} "
        f">= full-pipe {acc_full:.4f}",
    )
