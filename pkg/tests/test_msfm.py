import numpy as np
import pytest

from vesseltopo.msfm import (
    DescentStagnation,
    UnreachableStart,
    backtrace,
    solve_eikonal,
    speed_from_distance,
    trace_skeleton_tree,
)
from vesseltopo.volume import Volume3D, distance_transform

from conftest import make_tube


def analytic_distance(dims, seed, spacing=(1.0, 1.0, 1.0)):
    g = np.indices(dims).astype(np.float64)
    off = (g - np.array(seed).reshape(3, 1, 1, 1)) * np.array(spacing).reshape(3, 1, 1, 1)
    return np.sqrt((off ** 2).sum(0))


def test_seeds_are_exactly_zero():
    f = Volume3D(np.ones((12, 12, 12), np.float32))
    seeds = [(2, 3, 4), (9, 9, 9)]
    tm = solve_eikonal(f, seeds)
    for s in seeds:
        assert tm.data[s] == 0.0


def test_uniform_speed_accuracy_and_order():
    n = 32
    f = Volume3D(np.ones((n, n, n), np.float32))
    seed = (n // 2, n // 2, n // 2)
    true = analytic_distance((n, n, n), seed)
    far = true > 3
    tm2 = solve_eikonal(f, [seed], "multi-stencil-second")
    tm1 = solve_eikonal(f, [seed], "first")
    safe = np.maximum(true, 1e-9)
    rel2 = (np.abs(tm2.data - true) / safe)[far].max()
    rel1 = (np.abs(tm1.data - true) / safe)[far].max()
    assert rel2 <= 0.02
    assert rel1 > rel2


def test_monotone_acceptance_and_causality():
    n = 20
    rng = np.random.default_rng(4)
    base = rng.random((n, n, n)).astype(np.float64)
    from scipy.ndimage import gaussian_filter
    speed = gaussian_filter(base, 2.0) + 0.2
    f = Volume3D(speed.astype(np.float32))
    tm, info = solve_eikonal(f, [(3, 3, 3)], with_info=True)
    accepted = info.accepted_times()
    assert np.all(np.diff(accepted) >= -1e-12)
    assert info.causality_error() <= 1e-9


def test_zero_speed_unreachable_and_seed_errors():
    f = np.ones((10, 10, 10), np.float32)
    f[5, :, :] = 0.0  # wall splits the domain
    v = Volume3D(f)
    tm = solve_eikonal(v, [(1, 1, 1)])
    assert np.isinf(tm.data[8, 5, 5])
    assert np.isfinite(tm.data[3, 5, 5])
    with pytest.raises(ValueError, match="zero-speed"):
        solve_eikonal(v, [(5, 5, 5)])
    with pytest.raises(ValueError, match="seed"):
        solve_eikonal(v, [])


def test_grid_halving_convergence():
    errs = {}
    for n in (17, 33):
        sp = 16.0 / (n - 1)
        f = Volume3D(np.ones((n, n, n), np.float32), (sp, sp, sp))
        c = (n // 2, n // 2, n // 2)
        tm = solve_eikonal(f, [c], init_radius_mm=5.0)
        true = analytic_distance((n, n, n), c, (sp, sp, sp))
        m = true > 5.0
        errs[n] = np.abs(tm.data - true)[m].max()
    assert errs[17] / errs[33] >= 2.0


def test_speed_from_distance():
    mask, *_ = make_tube()
    dt = distance_transform(mask)
    sp = speed_from_distance(dt)
    assert np.all(sp.data[dt.data == 0] == 0.0)
    mx = np.unravel_index(np.argmax(dt.data), dt.dims)
    assert sp.data[mx] == 1.0
    sp0 = speed_from_distance(dt, exponent=0.0)
    assert np.all(sp0.data[dt.data > 0] == 1.0)
    flat = Volume3D(np.zeros((4, 4, 4), np.float32))
    with pytest.raises(ValueError):
        speed_from_distance(flat)


def test_backtrace_start_at_seed_is_single_point():
    f = Volume3D(np.ones((16, 16, 16), np.float32))
    tm = solve_eikonal(f, [(8, 8, 8)])
    path = backtrace(tm, (8.0, 8.0, 8.0), 0.5)
    assert len(path) == 1


def test_backtrace_straight_line_length():
    n = 32
    f = Volume3D(np.ones((n, n, n), np.float32))
    seed = (4, 16, 16)
    tm = solve_eikonal(f, [seed])
    path = backtrace(tm, (14.0, 16.0, 16.0), 0.25)
    assert abs(path.length() - 10.0) <= 0.5
    assert np.all(np.diff(path.times) < 0)


def test_backtrace_step_bound():
    n = 24
    f = Volume3D(np.ones((n, n, n), np.float32))
    seed = (2, 2, 2)
    tm = solve_eikonal(f, [seed])
    step = 0.5
    bound = np.linalg.norm(np.array(tm.dims)) / step + 10
    rng = np.random.default_rng(0)
    for _ in range(5):
        start = rng.uniform(3, n - 2, 3)
        path = backtrace(tm, start, step)
        assert len(path) <= bound
        assert np.all(np.linalg.norm(np.diff(path.points, axis=0), axis=1)
                      <= np.linalg.norm(tm.spacing) + 1e-9)


def test_backtrace_unreachable_start():
    f = np.ones((12, 12, 12), np.float32)
    f[6, :, :] = 0.0
    tm = solve_eikonal(Volume3D(f), [(1, 1, 1)])
    with pytest.raises(UnreachableStart):
        backtrace(tm, (9.0, 6.0, 6.0), 0.5)


def test_trace_tube_axis():
    mask, cy, cz, x0, x1 = make_tube(dims=(60, 20, 20), radius=3.0)
    dt = distance_transform(mask)
    speed = speed_from_distance(dt)
    tm = solve_eikonal(speed, [(x0, int(cy), int(cz))])
    paths = trace_skeleton_tree(tm, dt, [np.array([float(x1), cy, cz])])
    assert len(paths) == 1
    pts = paths[0].points
    off_axis = np.sqrt((pts[:, 1] - cy) ** 2 + (pts[:, 2] - cz) ** 2)
    assert np.mean(off_axis <= 1.0) >= 0.9


def test_trace_endpoint_at_seed_gives_nothing():
    mask, cy, cz, x0, x1 = make_tube()
    dt = distance_transform(mask)
    speed = speed_from_distance(dt)
    seed = (x0, int(cy), int(cz))
    tm = solve_eikonal(speed, [seed])
    paths = trace_skeleton_tree(tm, dt, [np.array(seed, dtype=float)])
    assert paths == []


def test_trace_detached_endpoint_rejected(caplog):
    mask, cy, cz, x0, x1 = make_tube(dims=(48, 24, 24))
    data = mask.data.copy()
    data[2:5, 2:5, 2:5] = 1  # floating blob, unreachable through zero speed
    mask2 = Volume3D(data, mask.spacing)
    dt = distance_transform(mask2)
    speed = speed_from_distance(dt)
    tm = solve_eikonal(speed, [(x0, int(cy), int(cz))])
    with caplog.at_level("WARNING"):
        paths = trace_skeleton_tree(tm, dt, [np.array([3.0, 3.0, 3.0])])
    assert paths == []
    assert any("rejected" in r.message for r in caplog.records)
