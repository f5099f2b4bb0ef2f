import math
from dataclasses import replace
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jumpfilter.model import Constant, ModelError
from jumpfilter.sim import ObservationPath, extract_observation, simulate_path
from jumpfilter.zakai import (FilterError, UnnormalizedFilterState, ks_jump_update, run_ks, run_zakai, sup_l1,
                              zakai_between_jumps, zakai_jump_update)


def flat_segment(model, times, dw=None):
    grid = np.asarray(times, float)
    dw = np.zeros(len(grid) - 1) if dw is None else np.asarray(dw, float)
    return ObservationPath(grid, np.zeros(len(grid)), np.array([], int), np.array([]), dw, float(grid[1] - grid[0]))


def no_information(desk_a):
    return replace(desk_a, b1=Constant(0.0), extra_obs_marks=(), prior=None, x0=0)


# -- between jumps -----------------------------------------------------------


def test_one_euler_step_desk_a(desk_a):
    st_ = UnnormalizedFilterState.from_values([1.0, 1.0])
    out = zakai_between_jumps(desk_a, st_, flat_segment(desk_a, [0.0, 0.01]))
    np.testing.assert_allclose(out.values, [1.0, 0.98], rtol=0, atol=1e-15)


def test_zero_length_segment_is_identity(desk_a):
    st_ = UnnormalizedFilterState(np.array([0.3, 0.7]), 0.25, 0.5)
    seg = ObservationPath(np.array([0.5]), np.zeros(1), np.array([], int), np.array([]), np.zeros(0), 0.01)
    out = zakai_between_jumps(desk_a, st_, seg)
    np.testing.assert_array_equal(out.probs, st_.probs)
    assert out.log_mass == st_.log_mass


def test_segment_with_jump_is_refused(desk_a):
    obs = ObservationPath(np.array([0, 0.1, 0.2]), np.array([0, 1, 1.0]), np.array([1]), np.array([1.0]),
                          np.zeros(2), 0.1)
    with pytest.raises(ValueError):
        zakai_between_jumps(desk_a, UnnormalizedFilterState.from_values([1, 1]), obs)


def test_no_information_forward_equation(desk_a, frozen):
    m = no_information(desk_a)
    assert m.H == ()
    obs = extract_observation(simulate_path(m, 1e-4, 3), m)
    _, pi = run_zakai(m, obs)
    ks = run_ks(m, obs)
    t = obs.grid
    law0 = 0.5 * (1 + np.exp(-2 * t))
    assert abs(pi.final[0] - frozen["no_info_pi0_T1_expm"]) <= 1e-3
    assert abs(ks.final[0] - frozen["no_info_pi0_T1_expm"]) <= 1e-3
    assert np.max(np.abs(pi.probs[:, 0] - law0)) <= 1e-3


def test_stiff_step_raises(desk_a):
    m = replace(desk_a, lambda0=(500.0, 500.0))
    with pytest.raises(FilterError, match="below"):
        zakai_between_jumps(m, UnnormalizedFilterState.from_values([1.0, 0.0]), flat_segment(m, [0.0, 0.01]))


def test_small_negative_entries_are_clamped(desk_a):
    # dt * rate = 1 sends the departing state to ~0 with rounding noise
    m = replace(desk_a, lambda0=(100.0, 100.0), extra_obs_marks=(), b1=Constant(0.0))
    out = zakai_between_jumps(m, UnnormalizedFilterState.from_values([1.0, 0.0]), flat_segment(m, [0.0, 0.01]))
    assert np.all(out.probs >= 0)
    assert out.probs.sum() == pytest.approx(1.0, abs=1e-15)


# -- jump update -------------------------------------------------------------


def test_jump_update_desk_a(desk_a, frozen):
    st_ = UnnormalizedFilterState.from_values([0.5, 0.5])
    out = zakai_jump_update(desk_a, st_, 0.3, 1.0)
    np.testing.assert_allclose(out.values, [0.5, 1.5], rtol=1e-15)
    np.testing.assert_allclose(out.probs, frozen["jump_update"]["desk_a_half"], rtol=1e-15)


def test_jump_update_desk_b_swaps(desk_b):
    out = zakai_jump_update(desk_b, UnnormalizedFilterState.from_values([0.3, 0.7]), 0.3, 1.0)
    np.testing.assert_allclose(out.values, [0.7, 0.3], rtol=1e-15)
    out = zakai_jump_update(desk_b, UnnormalizedFilterState.from_values([1.0, 0.0]), 0.3, 1.0)
    np.testing.assert_array_equal(out.probs, [0.0, 1.0])


def test_jump_update_rejects_unknown_size(desk_a):
    with pytest.raises(ModelError):
        zakai_jump_update(desk_a, UnnormalizedFilterState.from_values([1, 1]), 0.1, 2.0)


def one_sided(desk_a):
    return replace(desk_a, extra_obs_marks=(((0.0, 1.0), 1.0),))


def test_impossible_jump_is_inconsistency(desk_a):
    m = one_sided(desk_a)
    with pytest.raises(FilterError, match="impossible"):
        zakai_jump_update(m, UnnormalizedFilterState.from_values([1.0, 0.0]), 0.1, 1.0)


def test_ks_zero_intensity_is_flagged(desk_a):
    m = one_sided(desk_a)
    pi, degenerate = ks_jump_update(m, np.array([1.0, 0.0]), 1.0)
    assert degenerate
    np.testing.assert_array_equal(pi, [1.0, 0.0])
    obs = ObservationPath(np.array([0.0, 1e-9, 2e-9]), np.array([0.0, 1.0, 1.0]), np.array([1]), np.array([1.0]),
                          np.zeros(2), 1e-9)
    ks = run_ks(replace(m, prior=(1.0, 0.0), lambda0=(0.0, 0.0)), obs)
    assert ks.flags and "gain set to 0" in ks.flags[0]


def _exact_update(model, pi_minus, z):
    i = model.H.index(z)
    same = [Fraction(v).limit_denominator() for v in model.same_state_rates[i]]
    common = [[Fraction(v).limit_denominator() for v in row] for row in model.common_rates[i]]
    n = model.n
    num = [pi_minus[u] * same[u] + sum(pi_minus[v] * common[v][u] for v in range(n)) for u in range(n)]
    tot = sum(num)
    return [x / tot for x in num]


@given(st.lists(st.integers(1, 1000), min_size=2, max_size=2), st.sampled_from(["desk_a", "desk_b"]))
def test_jump_updates_match_exact_bayes(weights, which):
    from jumpfilter.config import load_model
    m = load_model(which)
    pi_exact = [Fraction(w, sum(weights)) for w in weights]
    expect = np.array([float(v) for v in _exact_update(m, pi_exact, 1.0)])
    pi = np.array([float(v) for v in pi_exact])
    zak = zakai_jump_update(m, UnnormalizedFilterState(pi, 0.0, 0.0), 0.0, 1.0).probs
    ks, _ = ks_jump_update(m, pi, 1.0)
    assert np.max(np.abs(zak - expect)) <= 1e-12
    assert np.max(np.abs(ks - expect)) <= 1e-12
    assert np.max(np.abs(ks - zak)) <= 1e-12


# -- full runs ---------------------------------------------------------------


def test_initial_condition(desk_a):
    m = replace(desk_a, prior=None, x0=1)
    obs = extract_observation(simulate_path(m, 1e-2, 5), m)
    un, pi = run_zakai(m, obs)
    np.testing.assert_array_equal(pi.probs[0], [0.0, 1.0])
    assert un.log_mass[0] == 0.0
    np.testing.assert_array_equal(run_ks(m, obs).probs[0], [0.0, 1.0])
    np.testing.assert_array_equal(run_zakai(desk_a, obs, prior=[0.2, 0.8])[1].probs[0], [0.2, 0.8])


@settings(max_examples=15)
@given(st.integers(0, 2**32), st.sampled_from(["desk_a", "desk_b"]))
def test_outputs_are_probability_vectors(seed, which):
    from jumpfilter.config import load_model
    m = load_model(which)
    obs = extract_observation(simulate_path(m, 1e-3, seed), m)
    un, pi = run_zakai(m, obs)
    for traj in (pi, run_ks(m, obs)):
        p = traj.all_probs()
        assert np.all(np.abs(p.sum(axis=1) - 1) <= 1e-12)
        assert np.all(p >= 0)
    assert np.all(np.isfinite(un.log_mass)) and np.all(np.isfinite(un.pre_jump_log_mass))


def test_pre_jump_rows_are_left_limits(desk_a):
    obs = extract_observation(simulate_path(desk_a, 1e-3, 8), desk_a)
    assert len(obs.jump_index)
    un, _ = run_zakai(desk_a, obs)
    for n, j in enumerate(obs.jump_index):
        post = zakai_jump_update(desk_a, UnnormalizedFilterState(un.pre_jump_probs[n], un.pre_jump_log_mass[n], 0.0),
                                 obs.grid[j], obs.jump_size[n])
        np.testing.assert_allclose(post.probs, un.probs[j], atol=1e-15)
        assert post.log_mass == pytest.approx(un.log_mass[j], abs=1e-12)


def test_ks_ignores_rho_for_finite_signals(desk_a):
    obs = extract_observation(simulate_path(desk_a, 1e-3, 2), desk_a)
    a = run_ks(desk_a, obs)
    b = run_ks(replace(desk_a, rho=0.7), obs)
    np.testing.assert_array_equal(a.probs, b.probs)


def test_innovation_reconstruction(desk_a):
    obs = extract_observation(simulate_path(desk_a, 1e-3, 2), desk_a)
    ks = run_ks(desk_a, obs)
    g = np.array([0.0, 1.0])
    expect = obs.wtilde_increments - (ks.probs[:-1] @ g) * np.diff(obs.grid)
    np.testing.assert_allclose(ks.innovation, expect, atol=1e-15)


def test_zakai_and_ks_close(desk_a, desk_b):
    for m in (desk_a, desk_b):
        for seed in range(5):
            obs = extract_observation(simulate_path(m, 1e-3, seed), m)
            assert sup_l1(run_zakai(m, obs)[1], run_ks(m, obs)) <= 0.05


def test_requires_finite_model(desk_a_marks, desk_a):
    obs = extract_observation(simulate_path(desk_a, 1e-2, 1), desk_a)
    with pytest.raises(ModelError):
        run_zakai(desk_a_marks, obs)


# -- CSV ---------------------------------------------------------------------


def test_filter_csv_layout(tmp_path, desk_a):
    obs = extract_observation(simulate_path(desk_a, 1e-3, 8), desk_a)
    un, pi = run_zakai(desk_a, obs)
    un.to_csv(tmp_path / "z.csv", manifest="hash=abc")
    run_ks(desk_a, obs).to_csv(tmp_path / "k.csv")
    lines = (tmp_path / "z.csv").read_text().splitlines()
    assert lines[0] == "# hash=abc" and lines[1] == "t,log_mass,pi_0,pi_1"
    assert len(lines) == 2 + len(obs.grid) + len(obs.jump_index)
    j = int(obs.jump_index[0])
    pre, post = lines[2 + j].split(","), lines[3 + j].split(",")
    assert pre[0] == post[0]
    assert float(pre[1]) == un.pre_jump_log_mass[0] and float(post[1]) == un.log_mass[j]
    ks_lines = (tmp_path / "k.csv").read_text().splitlines()
    assert ks_lines[1].split(",")[1] == "nan"


def test_sup_l1_requires_same_grid(desk_a):
    a = run_zakai(desk_a, extract_observation(simulate_path(desk_a, 1e-2, 1), desk_a))[1]
    b = run_zakai(desk_a, extract_observation(simulate_path(desk_a, 1e-2, 2), desk_a))[1]
    if len(a.grid) == len(b.grid) and np.array_equal(a.grid, b.grid):
        pytest.skip("identical grids by chance")
    with pytest.raises(ValueError):
        sup_l1(a, b)
    assert sup_l1(a, a) == 0.0


def test_log_mass_matches_direct_product(desk_a):
    # unnormalised Euler recursion without renormalisation on a short horizon
    m = replace(desk_a, horizon=0.05)
    obs = extract_observation(simulate_path(m, 1e-3, 6), m)
    un, _ = run_zakai(m, obs)
    M = m.silent_generator.T - np.diag(m.jump_intensity) + np.eye(2)
    v = m.initial_law()
    jumps = {int(j): n for n, j in enumerate(obs.jump_index)}
    for k in range(len(obs.grid) - 1):
        dt = obs.grid[k + 1] - obs.grid[k]
        v = v + dt * M @ v + np.array([0.0, 1.0]) * v * obs.wtilde_increments[k]
        if k + 1 in jumps:
            v = m.jump_matrix(obs.jump_size[jumps[k + 1]]).T @ v
    assert math.log(v.sum()) == pytest.approx(un.log_mass[-1], abs=1e-12)
    np.testing.assert_allclose(v / v.sum(), un.probs[-1], atol=1e-14)
