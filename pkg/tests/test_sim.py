import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chi2, poisson

from jumpfilter.model import Constant, JumpDiffusionSystem, Linear, MarkSpace
from jumpfilter.sim import (ObservationFormatError, ObservationPath, coarsen, extract_observation, load_observation,
                            save_observation, simulate_path, substream, wtilde_increments)


def no_jump_system(**kw):
    args = dict(b0=Linear(bx=-1.0), sigma0=Constant(1.0), b1=Linear(bx=1.0), sigma1=Constant(1.0),
                marks=MarkSpace((), {}), K0={}, K1={})
    args.update(kw)
    return JumpDiffusionSystem(**args)


def test_substreams_are_independent_of_order():
    a = substream(7, 3).random(4)
    substream(7, 1).random(100)
    assert np.array_equal(a, substream(7, 3).random(4))
    assert not np.array_equal(a, substream(7, 4).random(4))


@pytest.mark.parametrize("which", ["desk_a", "desk_b", "desk_a_marks"])
def test_same_inputs_same_path(which, request):
    m = request.getfixturevalue(which)
    p, q = simulate_path(m, 1e-3, 42), simulate_path(m, 1e-3, 42)
    for name in ("grid", "x", "y", "jump_index", "jump_size", "w0_increments", "w1_increments"):
        assert np.array_equal(getattr(p, name), getattr(q, name)), name
    assert p.jump_mark == q.jump_mark


def test_different_seeds_differ(desk_a):
    assert not np.array_equal(simulate_path(desk_a, 1e-3, 1).y, simulate_path(desk_a, 1e-3, 2).y)


def test_empty_mark_space_is_pure_diffusion():
    p = simulate_path(no_jump_system(), 1e-2, 3)
    assert p.n_jumps == 0 and not p.signal_jumps
    assert len(p.grid) == 101
    np.testing.assert_allclose(np.diff(p.grid), 1e-2, rtol=1e-9)


def test_euler_step_is_reproduced():
    m = no_jump_system()
    p = simulate_path(m, 0.1, 5)
    dt = np.diff(p.grid)
    np.testing.assert_allclose(p.x[1:], p.x[:-1] - p.x[:-1] * dt + p.w0_increments, atol=1e-14)
    np.testing.assert_allclose(p.y[1:], p.y[:-1] + p.x[:-1] * dt + p.w1_increments, atol=1e-14)


@pytest.mark.parametrize("dt", [0.0, -0.1, 2.0])
def test_bad_step_rejected(desk_a, dt):
    with pytest.raises(ValueError):
        simulate_path(desk_a, dt, 1)


def test_runaway_intensity_rejected(desk_a):
    with pytest.raises(ValueError, match="cap"):
        simulate_path(desk_a, 1e-2, 1, max_expected_jumps=1.0)


@settings(max_examples=25)
@given(st.integers(0, 2**63 - 1), st.sampled_from(["desk_a", "desk_b", "desk_a_marks"]))
def test_jump_bookkeeping(seed, which):
    from jumpfilter.config import load_model
    m = load_model(which)
    p = simulate_path(m, 1e-2, seed)
    H = set(m.as_system().H)
    assert np.all(np.diff(p.grid) > 0)
    assert np.all(np.diff(p.jump_index) > 0)
    assert all(z in H and z != 0 for z in p.jump_size)
    # recorded jumps are exactly the observed displacements
    dy_jump = np.zeros(len(p.grid))
    dy_jump[p.jump_index] = p.jump_size
    assert set(np.flatnonzero(dy_jump)) == set(p.jump_index)
    # states stay in S
    assert set(np.unique(p.x)) <= set(m.as_system().states)


def test_desk_b_every_flip_is_observed(desk_b):
    for seed in range(20):
        p = simulate_path(desk_b, 1e-3, seed)
        flips = [j[0] for j in p.signal_jumps]
        assert flips == list(p.jump_index)


def test_observation_grid_hides_silent_flips(desk_a):
    for seed in range(20):
        p = simulate_path(desk_a, 1e-2, seed)
        obs = extract_observation(p, desk_a)
        on_uniform = np.isclose(obs.grid / 1e-2, np.round(obs.grid / 1e-2), atol=1e-9)
        assert np.all(on_uniform | np.isin(np.arange(len(obs.grid)), obs.jump_index))


# -- extract_observation -----------------------------------------------------


def test_wtilde_without_jumps_is_dy(desk_a):
    grid = np.array([0.0, 0.1, 0.2, 0.3])
    y = np.array([0.0, 0.3, -0.1, 0.05])
    np.testing.assert_array_equal(wtilde_increments(grid, y, np.array([], int), np.array([]), desk_a), np.diff(y))


def test_wtilde_subtracts_jump(desk_a):
    grid = np.array([0.0, 0.1, 0.2])
    y = np.array([0.0, 1.25, 1.5])
    w = wtilde_increments(grid, y, np.array([1]), np.array([1.0]), desk_a)
    np.testing.assert_array_equal(w, [0.25, 0.25])


def test_wtilde_rejects_nonpositive_sigma(desk_a):
    m = replace(desk_a, sigma1=Linear(a=1.0, by=-1.0))
    with pytest.raises(ValueError, match="sigma1"):
        wtilde_increments(np.array([0.0, 0.1]), np.array([0.0, 2.0]), np.array([], int), np.array([]), m)


def test_round_trip_against_simulator_noise(desk_a):
    dt, worst = 1e-3, 0.0
    for seed in range(100):
        p = simulate_path(desk_a, dt, seed)
        obs = extract_observation(p, desk_a)
        # W1 + int b1/sigma1 ds on the simulator grid, read at the observation grid points
        truth = np.concatenate([[0.0], np.cumsum(p.w1_increments + p.x[:-1] * np.diff(p.grid))])
        kept = np.searchsorted(p.grid, obs.grid)
        recon = np.concatenate([[0.0], np.cumsum(obs.wtilde_increments)])
        worst = max(worst, float(np.max(np.abs(recon - truth[kept]))))
    assert worst <= 5 * dt * 1.0 * 1.0


def test_coarsen_keeps_jumps_and_multiples(desk_a):
    fine = extract_observation(simulate_path(desk_a, 5e-4, 11), desk_a)
    coarse = coarsen(fine, 2, desk_a)
    np.testing.assert_array_equal(coarse.jump_size, fine.jump_size)
    np.testing.assert_array_equal(coarse.jump_times, fine.jump_times)
    assert coarse.dt == 1e-3
    assert coarse.y[-1] == fine.y[-1]
    assert coarsen(fine, 1, desk_a).equals(fine)


def test_segments_cover_grid(desk_a):
    obs = extract_observation(simulate_path(desk_a, 1e-2, 4), desk_a)
    segs = list(obs.segments())
    assert segs[0][0] == 0 and segs[-1][1] == len(obs.grid) - 1
    assert [s[1] for s in segs if s[2] is not None] == list(obs.jump_index)


# -- CSV ---------------------------------------------------------------------


def test_save_load_round_trip(tmp_path, desk_a):
    obs = extract_observation(simulate_path(desk_a, 1e-3, 9), desk_a)
    save_observation(obs, tmp_path / "o.csv", manifest="run=test")
    back = load_observation(tmp_path / "o.csv", desk_a, dt=obs.dt)
    assert back.equals(obs)
    assert (tmp_path / "o.csv").read_text().splitlines()[:2] == ["# run=test", "t,y"]
    assert (tmp_path / "o_jumps.csv").read_text().splitlines()[1] == "n,t_jump,z"


def _write(tmp_path, rows, jumps):
    (tmp_path / "o.csv").write_text("t,y\n" + "".join(f"{a},{b}\n" for a, b in rows))
    (tmp_path / "o_jumps.csv").write_text("n,t_jump,z\n" + "".join(f"{n},{t},{z}\n" for n, t, z in jumps))
    return tmp_path / "o.csv"


def test_non_monotone_grid_names_line(tmp_path, desk_a):
    f = _write(tmp_path, [(0, 0), (0.2, 0.1), (0.1, 0.3)], [])
    with pytest.raises(ObservationFormatError, match=r"o\.csv:4"):
        load_observation(f, desk_a)


def test_zero_jump_size_rejected(tmp_path, desk_a):
    f = _write(tmp_path, [(0, 0), (0.1, 0.1), (0.2, 0.3)], [(0, 0.1, 0.0)])
    with pytest.raises(ObservationFormatError, match=r"o_jumps\.csv:2: jump size must be nonzero"):
        load_observation(f, desk_a)


@pytest.mark.parametrize("body,pattern", [
    ("t,x\n0,0\n0.1,0\n", "expected header"),
    ("t,y\n0,0\n0.1,zz\n", ":3: non-numeric"),
    ("t,y\n0,0\n0.1\n", ":3: expected 2 fields"),
])
def test_schema_errors(tmp_path, desk_a, body, pattern):
    (tmp_path / "o.csv").write_text(body)
    (tmp_path / "o_jumps.csv").write_text("n,t_jump,z\n")
    with pytest.raises(ObservationFormatError, match=pattern):
        load_observation(tmp_path / "o.csv", desk_a)


def test_jump_off_grid_rejected(tmp_path, desk_a):
    f = _write(tmp_path, [(0, 0), (0.1, 0.1), (0.2, 0.3)], [(0, 0.15, 1.0)])
    with pytest.raises(ObservationFormatError, match="grid point"):
        load_observation(f, desk_a)


def test_inadmissible_size_rejected(tmp_path, desk_a):
    f = _write(tmp_path, [(0, 0), (0.1, 0.1), (0.2, 0.3)], [(0, 0.1, 2.0)])
    with pytest.raises(ObservationFormatError, match="not admissible"):
        load_observation(f, desk_a)


def test_observation_path_invariants():
    with pytest.raises(ValueError):
        ObservationPath(np.array([0.0, 1.0]), np.zeros(2), np.array([], int), np.array([]), np.zeros(2), 1.0)
    with pytest.raises(ValueError):
        ObservationPath(np.array([0.0, 1.0]), np.zeros(2), np.array([1]), np.array([0.0]), np.zeros(1), 1.0)


# -- statistical properties --------------------------------------------------


def test_brownian_correlation(desk_a):
    rho, n = 0.6, 10_000
    m = replace(desk_a, rho=rho, horizon=0.1)
    a, b = np.empty(n), np.empty(n)
    for seed in range(n):
        p = simulate_path(m, 0.1, seed)
        a[seed], b[seed] = p.w0_increments[0], p.w1_increments[0]
    r = np.corrcoef(a, b)[0, 1]
    se = (1 - rho**2) / math.sqrt(n)
    assert abs(r - rho) <= 3 * se


def test_state_independent_counts_are_poisson(uninformative):
    n = 10_000
    counts = np.array([simulate_path(uninformative, 0.5, seed).n_jumps for seed in range(n)])
    k = np.arange(6)
    expected = poisson.pmf(k, 1.0) * n
    expected = np.append(expected, n - expected.sum())
    observed = np.append(np.bincount(np.minimum(counts, 6), minlength=7)[:6], np.sum(counts >= 6))
    stat = float(((observed - expected) ** 2 / expected).sum())
    assert stat < chi2.ppf(0.999, df=len(k))
