import numpy as np
import pytest

import vesseltopo as vt


@pytest.fixture(scope="session")
def toy_dataset(tmp_path_factory):
    """Separable toy dataset exported through the primary package.

    Artery tubes are rendered brighter than vein tubes in the intensity
    volume, so patch brightness alone separates the classes.
    """
    case = vt.generate(vt.SynthSpec(seed=21))
    dt = vt.distance_transform(case.mask)
    enhanced_src = vt.Volume3D(case.mask.data.astype(np.float32),
                               case.mask.spacing, case.mask.origin)
    forest = vt.extract_topology(case.mask, dt, enhanced_src).forest
    truth = vt.match_truth(forest, case)

    label_vol = vt.reconstruct_labels(forest, truth, case.mask.dims, case.mask.spacing)
    intensity = np.zeros(case.mask.dims, np.float32)
    intensity[label_vol.data == 1] = 1.0   # arteries bright
    intensity[label_vol.data == 2] = 0.2   # veins dim
    vol = vt.Volume3D(intensity, case.mask.spacing, case.mask.origin)
    enhanced = vt.vesselness_enhance(vol, [1.0, 2.0])

    branches = vt.extract_branches(forest)
    from vesseltopo.topology import terminal_branch_ids
    term_ids = terminal_branch_ids(forest, branches)

    out = tmp_path_factory.mktemp("toy") / "dataset"
    patches = {
        "orig": vt.extract_patches(vol, forest, spacing_mm=0.75),
        "enh": vt.extract_patches(enhanced, forest, spacing_mm=0.75),
    }
    vt.export_dataset(patches, forest, truth, out, terminal_ids=term_ids,
                      patch_spacing_mm=0.75)
    return {"dir": out, "forest": forest, "truth": truth, "terminal_ids": term_ids}


@pytest.fixture(scope="session")
def trained_full(toy_dataset, tmp_path_factory):
    from twinpipe.train import TrainSettings, train_pipe
    out = tmp_path_factory.mktemp("models") / "full.pt"
    manifest = train_pipe(toy_dataset["dir"], "full", out,
                          TrainSettings(epochs=20, batch_size=16, seed=0))
    return {"path": out, "manifest": manifest}


@pytest.fixture(scope="session")
def trained_terminal(toy_dataset, tmp_path_factory):
    from twinpipe.train import TrainSettings, train_pipe
    out = tmp_path_factory.mktemp("models") / "terminal.pt"
    manifest = train_pipe(toy_dataset["dir"], "terminal", out,
                          TrainSettings(epochs=20, batch_size=16, seed=0))
    return {"path": out, "manifest": manifest}
