import json

import numpy as np
import pytest

from vesseltopo.bridge import (
    export_dataset,
    extract_patches,
    ingest_probabilities,
    mutual_correct,
    oracle_classifier,
    patch_basis,
    read_patch_bin,
)
from vesseltopo.tables import (
    ARTERY,
    VEIN,
    LabelTable,
    ProbabilityTable,
    write_probabilities,
)
from vesseltopo.topology import Particle, TopologyForest, assign_kinds, build_graph, root_forest
from vesseltopo.volume import Volume3D

from conftest import make_tube


def path_forest(n=3):
    parts = [Particle(id=i, pos=np.array([float(i), 0.0, 0.0]), scale=1.0,
                      dir=np.array([1.0, 0.0, 0.0]), intensity=0.0) for i in range(n)]
    return build_graph(parts)


# ---------------------------------------------------------------------------
# patches
# ---------------------------------------------------------------------------

def test_basis_orthonormal_right_handed():
    rng = np.random.default_rng(0)
    for _ in range(100):
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        u, v, dd = patch_basis(d)
        assert abs(np.dot(u, v)) <= 1e-6
        assert abs(np.dot(u, dd)) <= 1e-6
        assert abs(np.dot(v, dd)) <= 1e-6
        assert np.allclose(np.cross(u, v), dd, atol=1e-9)
    # z-parallel tangent falls back to the x axis
    u, v, dd = patch_basis(np.array([0.0, 0.0, 1.0]))
    assert np.allclose(u, [1.0, 0.0, 0.0])


def test_patches_constant_volume():
    vol = Volume3D(np.full((12, 12, 12), 2.5, np.float32))
    f = path_forest(3)
    for p in f.nodes:
        p.pos = p.pos + 5.0
    patches = extract_patches(vol, f)
    assert len(patches) == 3
    for p in patches:
        assert np.allclose(p.data, 2.5, atol=1e-5)


def test_patch_tube_disk_centered(tube):
    mask = tube["mask"]
    vol = Volume3D(mask.data.astype(np.float32), mask.spacing)
    cy, cz = tube["cy"], tube["cz"]
    parts = [Particle(id=0, pos=np.array([24.0, cy, cz]), scale=3.0,
                      dir=np.array([1.0, 0.0, 0.0]), intensity=0.0)]
    forest = build_graph(parts)
    patch = extract_patches(vol, forest)[0]
    assert patch.data[16, 16, 1] > patch.data[0, 0, 1]
    assert patch.data[16, 16, 1] > 0.9


def test_patch_out_of_bounds_flagged():
    vol = Volume3D(np.ones((8, 8, 8), np.float32))
    parts = [Particle(id=0, pos=np.array([50.0, 50.0, 50.0]), scale=1.0,
                      dir=np.array([1.0, 0.0, 0.0]), intensity=0.0)]
    f = build_graph(parts)
    patch = extract_patches(vol, f)[0]
    assert patch.out_of_bounds
    assert np.all(patch.data == 0.0)


# ---------------------------------------------------------------------------
# dataset export
# ---------------------------------------------------------------------------

def _export(tmp_path, labels=None):
    f = path_forest(3)
    vol = Volume3D(np.ones((10, 10, 10), np.float32))
    for p in f.nodes:
        p.pos = p.pos + 4.0
    patches = {"orig": extract_patches(vol, f), "enh": extract_patches(vol, f)}
    export_dataset(patches, f, labels, tmp_path / "ds", terminal_ids=[0, 1, 2],
                   patch_spacing_mm=1.0)
    return f, patches


def test_export_neighbors(tmp_path):
    _export(tmp_path)
    nb = json.loads((tmp_path / "ds" / "neighbors.json").read_text())
    assert nb == {"0": [1], "1": [0, 2], "2": [1]}


def test_export_round_trip_bytes(tmp_path):
    f, patches = _export(tmp_path)
    arr = read_patch_bin(tmp_path / "ds" / "patches_orig.bin", 3)
    for i, p in enumerate(patches["orig"]):
        assert np.array_equal(arr[i], p.data)


def test_export_unlabeled_manifest(tmp_path):
    _export(tmp_path)
    man = json.loads((tmp_path / "ds" / "manifest.json").read_text())
    assert man["labeled"] is False
    assert not (tmp_path / "ds" / "labels.tsv").exists()
    assert man["channels"] == ["enh", "orig"]
    assert man["patch_shape"] == [32, 32, 3]


def test_export_labeled(tmp_path):
    labels = LabelTable({0: ARTERY, 1: VEIN, 2: ARTERY})
    _export(tmp_path, labels)
    man = json.loads((tmp_path / "ds" / "manifest.json").read_text())
    assert man["labeled"] is True
    assert (tmp_path / "ds" / "labels.tsv").exists()


def test_export_label_id_mismatch(tmp_path):
    labels = LabelTable({0: ARTERY, 99: VEIN})
    with pytest.raises(ValueError, match="unknown particle ids"):
        _export(tmp_path, labels)


# ---------------------------------------------------------------------------
# probability ingestion
# ---------------------------------------------------------------------------

def test_ingest_valid(tmp_path):
    f = path_forest(3)
    p = tmp_path / "p.tsv"
    write_probabilities(ProbabilityTable({0: 1.0, 1: 1.0, 2: 1.0}, "full-pipe"), p)
    table = ingest_probabilities(p, f, "full-pipe")
    assert table.probs == {0: 1.0, 1: 1.0, 2: 1.0}


def test_ingest_out_of_range_names_row(tmp_path):
    f = path_forest(3)
    p = tmp_path / "p.tsv"
    p.write_text("#provenance=full-pipe\n0\t0.5\n1\t1.5\n2\t0.5\n")
    with pytest.raises(ValueError, match=r"p.tsv:3.*1\.5.*id 1"):
        ingest_probabilities(p, f, "full-pipe")


def test_ingest_terminal_coverage_error(tmp_path):
    f = path_forest(3)
    p = tmp_path / "p.tsv"
    p.write_text("#provenance=terminal-pipe\n0\t0.5\n1\t0.5\n")
    with pytest.raises(ValueError, match="coverage"):
        ingest_probabilities(p, f, "terminal-pipe", terminal_ids=[0])


def test_ingest_missing_ids(tmp_path):
    f = path_forest(3)
    p = tmp_path / "p.tsv"
    p.write_text("#provenance=full-pipe\n0\t0.5\n")
    with pytest.raises(ValueError, match="missing"):
        ingest_probabilities(p, f, "full-pipe")


def test_ingest_unknown_id(tmp_path):
    f = path_forest(2)
    p = tmp_path / "p.tsv"
    p.write_text("#provenance=full-pipe\n0\t0.5\n1\t0.5\n9\t0.5\n")
    with pytest.raises(ValueError, match="unknown"):
        ingest_probabilities(p, f, "full-pipe")


def test_probability_round_trip_6dp(tmp_path):
    f = path_forest(3)
    rng = np.random.default_rng(1)
    probs = {i: float(rng.random()) for i in range(3)}
    p = tmp_path / "p.tsv"
    write_probabilities(ProbabilityTable(probs, "full-pipe"), p)
    table = ingest_probabilities(p, f, "full-pipe")
    for i in range(3):
        assert abs(table.probs[i] - probs[i]) <= 5e-7


# ---------------------------------------------------------------------------
# mutual correction
# ---------------------------------------------------------------------------

def test_mutual_correct_rules():
    full = ProbabilityTable({0: 0.9, 1: 0.4, 2: 0.3}, "full-pipe")
    term = ProbabilityTable({0: 0.9, 1: 0.8}, "terminal-pipe")
    merged = mutual_correct(full, term, [0, 1])
    assert merged.probs[0] == pytest.approx(0.9)   # fixed point
    assert merged.probs[1] == pytest.approx(0.6)   # mean(0.4, 0.8)
    assert merged.probs[2] == 0.3                  # non-terminal passthrough
    assert merged.provenance == "merged"


def test_mutual_correct_idempotent_on_own_output():
    full = ProbabilityTable({0: 0.9, 1: 0.4, 2: 0.3}, "full-pipe")
    term = ProbabilityTable({0: 0.7, 1: 0.8}, "terminal-pipe")
    merged = mutual_correct(full, term, [0, 1])
    again = mutual_correct(
        merged,
        ProbabilityTable({i: merged.probs[i] for i in (0, 1)}, "terminal-pipe"),
        [0, 1],
    )
    assert again.probs == merged.probs


def test_mutual_correct_never_flips_non_terminal_labels():
    rng = np.random.default_rng(2)
    full = ProbabilityTable({i: float(rng.random()) for i in range(50)}, "full-pipe")
    tids = list(range(10))
    term = ProbabilityTable({i: float(rng.random()) for i in tids}, "terminal-pipe")
    merged = mutual_correct(full, term, tids)
    for i in range(10, 50):
        assert (merged.probs[i] > 0.5) == (full.probs[i] > 0.5)


def test_mutual_correct_coverage_errors():
    full = ProbabilityTable({0: 0.5, 1: 0.5}, "full-pipe")
    term = ProbabilityTable({0: 0.5}, "terminal-pipe")
    with pytest.raises(ValueError):
        mutual_correct(full, term, [0, 1])


# ---------------------------------------------------------------------------
# oracle classifier
# ---------------------------------------------------------------------------

def test_oracle_flip_zero_matches_truth():
    truth = LabelTable({i: ARTERY if i % 2 else VEIN for i in range(20)})
    table = oracle_classifier(truth, 0.0, seed=1)
    for i, lab in truth.labels.items():
        assert (table.probs[i] > 0.5) == (lab == ARTERY)


def test_oracle_flip_fraction_binomial():
    truth = LabelTable({i: ARTERY for i in range(10_000)})
    table = oracle_classifier(truth, 0.1, seed=7)
    flipped = sum(1 for p in table.probs.values() if p < 0.5)
    assert 0.08 <= flipped / 10_000 <= 0.12


def test_oracle_deterministic():
    truth = LabelTable({i: ARTERY if i % 3 else VEIN for i in range(100)})
    a = oracle_classifier(truth, 0.2, seed=42)
    b = oracle_classifier(truth, 0.2, seed=42)
    assert a.probs == b.probs


def test_oracle_flip_rate_range():
    truth = LabelTable({0: ARTERY})
    with pytest.raises(ValueError):
        oracle_classifier(truth, 0.5, seed=0)
