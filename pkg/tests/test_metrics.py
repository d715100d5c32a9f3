import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sparseulm.metrics import (
    MemoryModelParams,
    RunStats,
    c_dense,
    c_sparse,
    delta,
    delta_bound,
    dice,
    gamma,
    measure_run,
    n_upper,
    project_and_dice,
    scaling_report,
    site_bytes,
    trajectory_dice,
)
from sparseulm.nn.network import NetworkConfig, SparseNet, _conv
from sparseulm.tensor import SparseTensor


def test_dice_identical_disjoint_half():
    a = np.zeros((8, 8), bool)
    a[0, :5] = True
    assert dice(a, a) == 1.0
    b = np.zeros((8, 8), bool)
    b[7, :5] = True
    assert dice(a, b) == 0.0
    # 10 cells each, 5 shared
    a = np.zeros(20, bool)
    b = np.zeros(20, bool)
    a[:10] = True
    b[5:15] = True
    assert dice(a, b) == pytest.approx(0.5)


def test_dice_both_empty_and_shape_mismatch():
    z = np.zeros((4, 4), bool)
    assert dice(z, z) == 1.0
    with pytest.raises(ValueError, match="shape mismatch"):
        dice(z, np.zeros((4, 5), bool))


@settings(max_examples=100, deadline=None)
@given(arrays(np.bool_, (6, 7)), arrays(np.bool_, (6, 7)))
def test_dice_symmetric_and_bounded(a, b):
    v = dice(a, b)
    assert v == dice(b, a)
    assert 0.0 <= v <= 1.0
    # oracle: set arithmetic on flat indices
    sa, sb = set(np.flatnonzero(a)), set(np.flatnonzero(b))
    expect = 1.0 if not sa and not sb else 2 * len(sa & sb) / (len(sa) + len(sb))
    assert v == pytest.approx(expect)


def test_trajectory_dice_matches_loop(rng):
    p = rng.random((10, 5, 5)) > 0.6
    g = rng.random((10, 5, 5)) > 0.6
    expect = sum(dice(p[i], g[i]) for i in range(10)) / 10
    assert trajectory_dice(p, g) == pytest.approx(expect)
    with pytest.raises(ValueError, match="frame count"):
        trajectory_dice(p[:3], g)


def test_trajectory_dice_half():
    g = np.zeros((4, 3, 3), bool)
    g[:, 1, 1] = True
    p = g.copy()
    p[2:] = False
    g2 = g.copy()
    # frames 0,1 exact (1.0); frames 2,3 prediction empty (0.0)
    assert trajectory_dice(p, g2) == pytest.approx(0.5)


def test_project_and_dice_composition(rng):
    a = rng.random((6, 6, 5)) > 0.8
    b = rng.random((6, 6, 5)) > 0.8
    assert project_and_dice(a, b) == dice(a.any(-1), b.any(-1))
    assert project_and_dice(a, b, axis=0) == dice(a.any(0), b.any(0))


def test_projection_hides_depth_errors():
    a = np.zeros((4, 4, 4), bool)
    b = np.zeros((4, 4, 4), bool)
    a[1, 1, 0] = True
    b[1, 1, 3] = True
    assert dice(a, b) == 0.0
    assert project_and_dice(a, b) == 1.0


# ---------------------------------------------------------------------------
# memory model


def test_c_dense_example():
    assert c_dense(MemoryModelParams(r=8, d=2, D=32)) == 65536


def test_delta_bound_example_exact():
    assert delta_bound(0.5, 3.0, 8) == 1 / 32


@settings(max_examples=200, deadline=None)
@given(
    st.floats(0.1, 2.0),
    st.floats(1.0, 6.0),
    st.integers(1, 16),
    st.floats(4, 256),
    st.floats(0.1, 4.0),
)
def test_delta_closed_form_matches_components(rho, alpha, r, D, eta):
    p2 = MemoryModelParams(r=r, d=2, D=D, rho=rho, alpha=alpha, eta=eta)
    p3 = MemoryModelParams(r=r, d=3, D=D, rho=rho, alpha=alpha, eta=eta)
    assert delta(p2, p3) == pytest.approx(delta_bound(rho, alpha, r), rel=1e-12)
    # gamma from its parts
    assert gamma(p3) == pytest.approx(eta * 3 * n_upper(p3) / (r * D) ** 3, rel=1e-12)


def test_gamma_linear_in_n_and_eta():
    base = MemoryModelParams(r=8, d=2, D=32, N=10)
    assert gamma(MemoryModelParams(r=8, d=2, D=32, N=20)) == pytest.approx(2 * gamma(base))
    assert gamma(MemoryModelParams(r=8, d=2, D=32, N=10, eta=3)) == pytest.approx(3 * gamma(base))
    assert c_sparse(MemoryModelParams(r=8, d=2, D=32, N=0)) == 0.0


def test_per_config_delta_desk_values():
    p2 = MemoryModelParams(r=8, d=2, D=32, rho=1, alpha=3)
    p3 = MemoryModelParams(r=4, d=3, D=16, rho=1, alpha=3)
    assert delta(p2, p3) == pytest.approx(0.5)


def test_memory_params_validation():
    with pytest.raises(ValueError):
        MemoryModelParams(r=8, d=4, D=32)
    with pytest.raises(ValueError, match="alpha"):
        MemoryModelParams(r=8, d=2, D=32, alpha=0)
    with pytest.raises(ValueError):
        MemoryModelParams(r=8, d=2, D=32, N=-1)
    with pytest.raises(ValueError):
        delta(MemoryModelParams(r=8, d=3, D=32), MemoryModelParams(r=8, d=3, D=32))


def test_site_bytes():
    assert site_bytes(10, 3, 2) == 10 * (4 * 4 + 2 * 4)


def test_scaling_report_agreement():
    p2 = MemoryModelParams(r=8, d=2, D=32, rho=1, alpha=3)
    p3 = MemoryModelParams(r=4, d=3, D=16, rho=1, alpha=3)
    rep = scaling_report(p2, p3, {"sparse_sites": 100, "dense_sites": 1000}, {"sparse_sites": 60, "dense_sites": 1000})
    assert rep["empirical"]["delta_exp"] == pytest.approx(0.6)
    assert rep["agreement"]["ratio"] == pytest.approx(1.2)
    assert rep["agreement"]["pass"]
    bad = scaling_report(p2, p3, {"sparse_sites": 100, "dense_sites": 1000}, {"sparse_sites": 5, "dense_sites": 1000})
    assert not bad["agreement"]["pass"]


# ---------------------------------------------------------------------------
# run statistics


def _small_net():
    cfg = NetworkConfig(dims=2, upscale=1, frames=2, layers=[_conv(4), _conv(4, tstride=2, tkernel=2, kernel=1), {"type": "head"}])
    return SparseNet(cfg)


def test_measure_run_empty_input():
    net = _small_net()
    x = SparseTensor(np.zeros((0, 4), np.int32), np.zeros((0, 2), np.float32), (6, 6, 2), (1, 1, 1))
    stats = measure_run(net, x, reps=2)
    assert stats.peak_sites == 0
    assert all(c == 0 for c in stats.layer_sites)


def test_measure_run_counts_lattice_layers(rng):
    net = _small_net()
    dense = rng.normal(size=(6, 6, 2, 2)).astype(np.float32)
    mask = rng.random((6, 6, 2)) < 0.3
    idx = np.argwhere(mask)
    coords = np.column_stack([np.zeros(len(idx), int), idx]).astype(np.int32)
    x = SparseTensor(coords, dense[mask], (6, 6, 2), (1, 1, 1))
    stats = measure_run(net, x, reps=3)
    # a submanifold conv keeps the input sites exactly
    assert stats.layer_sites[0] == len(x)
    assert stats.reps == 3 and stats.time_ms >= 0 and stats.time_ms_sd >= 0
    assert stats.to_dict()["peak_sites"] == stats.peak_sites
    with pytest.raises(ValueError):
        measure_run(net, x, reps=0)


def test_runstats_length_check():
    with pytest.raises(ValueError):
        RunStats(["a"], [1, 2], 0.0, 0.0, 1)
    assert math.isclose(RunStats([], [], 0.0, 0.0, 1).peak_sites, 0)
