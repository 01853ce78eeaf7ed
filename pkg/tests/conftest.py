import numpy as np
import pytest

from vesseltopo.volume import Volume3D, distance_transform


def make_tube(dims=(48, 20, 20), radius=3.0, spacing=(1.0, 1.0, 1.0),
              x0=4, x1=None, cy=None, cz=None):
    """Straight tube along x: voxel foreground iff within radius of the axis
    segment. Returns (mask, axis_y, axis_z, x0, x1)."""
    nx, ny, nz = dims
    if x1 is None:
        x1 = nx - 5
    cy = (ny - 1) / 2.0 if cy is None else cy
    cz = (nz - 1) / 2.0 if cz is None else cz
    sx, sy, sz = spacing
    gx, gy, gz = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
    ax = np.clip(gx, x0, x1)
    d = np.sqrt(((gx - ax) * sx) ** 2 + ((gy - cy) * sy) ** 2 + ((gz - cz) * sz) ** 2)
    data = (d <= radius).astype(np.uint8)
    return Volume3D(data, spacing), cy, cz, x0, x1


def brute_force_edt(mask: Volume3D) -> np.ndarray:
    """All-pairs oracle: exact distance from each foreground voxel center to
    the nearest background voxel center, same float operations as the op."""
    sp = np.asarray(mask.spacing, dtype=np.float64)
    w = sp * sp
    fg = np.argwhere(mask.data == 1).astype(np.float64)
    bg = np.argwhere(mask.data == 0).astype(np.float64)
    out = np.zeros(mask.dims, np.float64)
    for f in fg:
        d = ((f - bg) ** 2 * w).sum(axis=1).min()
        out[int(f[0]), int(f[1]), int(f[2])] = d
    return np.sqrt(out).astype(np.float32)


@pytest.fixture(scope="session")
def tube():
    mask, cy, cz, x0, x1 = make_tube()
    return {"mask": mask, "dt": distance_transform(mask),
            "cy": cy, "cz": cz, "x0": x0, "x1": x1}


@pytest.fixture(scope="session", autouse=True)
def warm_kernels():
    # compile the numba kernels once on tiny inputs so individual tests
    # (and the timed acceptance criteria) measure algorithm time
    from vesseltopo.msfm import solve_eikonal
    m = Volume3D(np.ones((4, 4, 4), np.uint8))
    m.data[0, 0, 0] = 0
    distance_transform(m)
    s = Volume3D(np.ones((6, 6, 6), np.float32))
    solve_eikonal(s, [(3, 3, 3)], "multi-stencil-second")
    solve_eikonal(s, [(3, 3, 3)], "first")


@pytest.fixture(scope="session")
def small_case():
    """Depth-3 synthetic case with the full topology stage run once."""
    from vesseltopo.pipeline import extract_topology
    from vesseltopo.synth_eval import SynthSpec, generate, match_truth

    spec = SynthSpec(seed=11, depth=3, trunk_radius=4.2, dims=(72, 72, 64),
                     intertwine_offset=24.0)
    case = generate(spec)
    dt = distance_transform(case.mask)
    enhanced = Volume3D(case.mask.data.astype(np.float32), case.mask.spacing,
                        case.mask.origin)
    forest = extract_topology(case.mask, dt, enhanced).forest
    truth = match_truth(forest, case)
    return {"case": case, "dt": dt, "enhanced": enhanced, "forest": forest,
            "truth": truth}
