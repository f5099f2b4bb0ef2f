"""Reference filters used to check the Zakai/KS solvers.

``grid_bayes_filter`` is a plain discrete-time Bayes recursion on the
observation grid and deliberately shares nothing with :mod:`jumpfilter.zakai`
beyond the output container.  ``particle_filter`` is a bootstrap filter that
works for any system, including diffusion-valued signals.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import FiniteStateSignalModel
from .sim import ObservationPath, substream
from .zakai import FilterError, FilterTrajectory

PF_STREAM = 0x7066


def _continuous_increments(obs: ObservationPath) -> np.ndarray:
    dy = np.diff(obs.y).copy()
    for j, z in zip(obs.jump_index, obs.jump_size):
        dy[j - 1] -= z
    return dy


def grid_bayes_filter(model: FiniteStateSignalModel, obs: ObservationPath, prior=None) -> FilterTrajectory:
    """Discrete Bayes filter: Gaussian increment likelihood, thinned-Poisson jump factor."""
    if not isinstance(model, FiniteStateSignalModel):
        raise TypeError("grid_bayes_filter needs a finite-state model")
    n = model.n
    states = np.array(model.states)
    rates = np.array(model.lambda0, float)[:, None] * np.array(model.mu0, float)
    sizes = np.array(model.obs_jump_size, float)

    # signal transitions that leave the observation alone
    q_silent = np.where(sizes == 0.0, rates, 0.0)
    np.fill_diagonal(q_silent, 0.0)
    q_silent -= np.diag(q_silent.sum(axis=1))
    # intensity of every observed jump, by size
    lam_by_size = {}
    for u in range(n):
        for v in range(n):
            if u != v and sizes[u, v] != 0.0 and rates[u, v] > 0:
                lam_by_size.setdefault(sizes[u, v], np.zeros((n, n)))[u, v] += rates[u, v]
    for r, z in model.extra_obs_marks:
        lam_by_size.setdefault(float(z), np.zeros((n, n)))[np.arange(n), np.arange(n)] += np.array(r, float)
    lam_total = np.zeros(n)
    for mat in lam_by_size.values():
        lam_total += mat.sum(axis=1)

    p = np.array(model.initial_law() if prior is None else prior, float)
    K = len(obs.grid)
    out = np.empty((K, n))
    pre = np.empty((len(obs.jump_index), n))
    out[0] = p
    jumps = {int(j): i for i, j in enumerate(obs.jump_index)}
    dyc = _continuous_increments(obs)
    for k in range(K - 1):
        t, y, dt = obs.grid[k], obs.y[k], obs.grid[k + 1] - obs.grid[k]
        mean = np.array([float(model.b1(t, s, y)) for s in states]) * dt
        var = float(model.sigma1(t, 0.0, y)) ** 2 * dt
        loglik = -0.5 * (dyc[k] - mean) ** 2 / var - lam_total * dt
        w = p * np.exp(loglik - loglik.max())
        if not w.sum() > 0:
            raise FilterError(f"grid_bayes: zero likelihood on interval ending t={obs.grid[k + 1]:.6g}")
        p = w / w.sum()
        p = p @ (np.eye(n) + q_silent * dt)
        p = np.clip(p, 0.0, None)
        p /= p.sum()
        if k + 1 in jumps:
            i = jumps[k + 1]
            pre[i] = p
            z = float(obs.jump_size[i])
            if z not in lam_by_size:
                raise FilterError(f"grid_bayes: jump size {z} cannot be produced by the model")
            q = p @ lam_by_size[z]
            if not q.sum() > 0:
                raise FilterError(f"grid_bayes: jump of size {z} at t={obs.grid[k + 1]:.6g} is impossible")
            p = q / q.sum()
        out[k + 1] = p
    return FilterTrajectory(obs.grid, model.states, out, obs.jump_index.copy(), pre, label="grid_bayes")


# ---------------------------------------------------------------------------
# particles


@dataclass
class ParticleEnsemble:
    particles: np.ndarray
    weights: np.ndarray
    t: float

    def __post_init__(self):
        if abs(self.weights.sum() - 1.0) > 1e-10 or np.any(self.weights < 0):
            raise ValueError("weights must be a probability vector")

    @property
    def ess(self) -> float:
        return float(1.0 / np.sum(self.weights**2))


@dataclass
class ParticleTrajectory(FilterTrajectory):
    """Particle filter output.

    For finite state spaces ``probs`` holds the weighted histogram over
    ``states``; for diffusion signals ``states`` is empty and only ``mean``
    and ``var`` are meaningful.  Always an approximation.
    """

    mean: np.ndarray = None
    var: np.ndarray = None
    ess: np.ndarray = None
    resamples: int = 0
    ensemble: ParticleEnsemble = None


class _Coef:
    """Evaluate a coefficient per particle, through the state table when the space is finite."""

    def __init__(self, states):
        self.states = None if states is None else np.asarray(states, float)

    def at(self, coef, t, x, idx, y):
        if self.states is None:
            return np.broadcast_to(np.asarray(coef(t, x, y), float), x.shape)
        vals = np.broadcast_to(np.asarray(coef(t, self.states, y), float), self.states.shape)
        return vals[idx]


def _normalize_log(logw):
    m = logw.max()
    if not np.isfinite(m):
        return None
    w = np.exp(logw - m)
    return w / w.sum()


def particle_filter(model, obs: ObservationPath, n_particles: int, seed: int,
                    resample_threshold: float = 0.5) -> ParticleTrajectory:
    """Bootstrap particle filter with multinomial resampling."""
    if n_particles < 1:
        raise ValueError("n_particles must be >= 1")
    if not 0 < resample_threshold <= 1:
        raise ValueError("resample_threshold must lie in (0, 1]")
    sysm = model.as_system()
    rng = substream(seed, PF_STREAM)
    N = n_particles
    finite = sysm.states is not None
    ev = _Coef(sysm.states if finite else None)
    labels = np.asarray(sysm.states, float) if finite else None

    if sysm.prior is not None:
        keys = np.asarray(list(sysm.prior.keys()), float)
        probs = np.asarray(list(sysm.prior.values()), float)
        x = keys[rng.choice(len(keys), size=N, p=probs / probs.sum())]
    else:
        x = np.full(N, float(sysm.x0))

    marks = sysm.marks.marks
    nu = np.array([sysm.marks.weight[m] for m in marks])
    rho = sysm.rho
    rho_c = np.sqrt(max(0.0, 1.0 - rho * rho))
    dyc = _continuous_increments(obs)
    jumps = {int(j): i for i, j in enumerate(obs.jump_index)}

    K = len(obs.grid)
    n_states = len(labels) if finite else 0
    hist = np.empty((K, n_states))
    pre_hist = np.empty((len(obs.jump_index), n_states))
    mean, var, ess = np.empty(K), np.empty(K), np.empty(K)
    logw = np.zeros(N)
    resamples = 0

    def index_of(xv):
        if not finite:
            return None
        idx = np.searchsorted(labels_sorted, xv)
        return order[np.clip(idx, 0, len(labels) - 1)]

    if finite:
        order = np.argsort(labels)
        labels_sorted = labels[order]

    def record(k, w, idx, target):
        mean[k] = float(w @ x)
        var[k] = float(w @ (x - mean[k]) ** 2)
        ess[k] = 1.0 / float(w @ w)
        if finite:
            target[:] = np.bincount(idx, weights=w, minlength=n_states)

    idx = index_of(x)
    w = np.full(N, 1.0 / N)
    record(0, w, idx, hist[0])

    for k in range(K - 1):
        t, y, dt = obs.grid[k], obs.y[k], obs.grid[k + 1] - obs.grid[k]
        t1 = obs.grid[k + 1]
        b1 = ev.at(sysm.b1, t, x, idx, y)
        s1 = float(np.asarray(sysm.sigma1(t, 0.0, y)))
        k1_now = np.stack([ev.at(sysm.K1[m], t, x, idx, y) for m in marks]) if len(marks) else np.zeros((0, N))
        observed = k1_now != 0.0
        lam = nu @ observed if len(marks) else np.zeros(N)
        resid = dyc[k] - b1 * dt
        logw += -0.5 * resid**2 / (s1 * s1 * dt) - lam * dt

        # signal move over the interval
        if not sysm.pure_jump_signal:
            dw1 = resid / s1
            dw0 = rho * dw1 + rho_c * np.sqrt(dt) * rng.standard_normal(N)
            x = x + ev.at(sysm.b0, t, x, idx, y) * dt + ev.at(sysm.sigma0, t, x, idx, y) * dw0
        if len(marks):
            k0_now = np.stack([ev.at(sysm.K0[m], t, x, idx, y) for m in marks])
            silent = (~observed) & (k0_now != 0.0)
            silent_rates = nu[:, None] * silent
            total = silent_rates.sum(axis=0)
            fire = rng.random(N) < -np.expm1(-total * dt)
            if np.any(fire):
                cum = np.cumsum(silent_rates[:, fire], axis=0)
                pick = (rng.random(int(fire.sum())) * cum[-1] > cum).sum(axis=0)
                x = x.copy()
                x[fire] = x[fire] + k0_now[pick, np.flatnonzero(fire)]
                if finite and sysm.pure_jump_signal:
                    idx = idx.copy()
                    idx[fire] = index_of(x[fire])
        if finite and not sysm.pure_jump_signal:
            idx = index_of(x)

        if k + 1 in jumps:
            i = jumps[k + 1]
            wj = _normalize_log(logw)
            if wj is None:
                raise FilterError(f"particle: weights collapsed before t={t1:.6g}")
            if finite:
                pre_hist[i] = np.bincount(idx, weights=wj, minlength=n_states)
            z = float(obs.jump_size[i])
            k1_j = np.stack([ev.at(sysm.K1[m], t1, x, idx, obs.y[k + 1] - z) for m in marks])
            match = (k1_j == z) * nu[:, None]
            lam_z = match.sum(axis=0)
            with np.errstate(divide="ignore"):
                logw += np.log(lam_z)
            ok = lam_z > 0
            if np.any(ok):
                cum = np.cumsum(match[:, ok], axis=0)
                pick = (rng.random(int(ok.sum())) * cum[-1] > cum).sum(axis=0)
                k0_j = np.stack([ev.at(sysm.K0[m], t1, x, idx, obs.y[k + 1] - z) for m in marks])
                x = x.copy()
                x[ok] = x[ok] + k0_j[pick, np.flatnonzero(ok)]
                if finite:
                    idx = idx.copy()
                    idx[ok] = index_of(x[ok])

        w = _normalize_log(logw)
        if w is None:
            raise FilterError(f"particle: weights collapsed at t={t1:.6g}")
        record(k + 1, w, idx, hist[k + 1])
        if ess[k + 1] < resample_threshold * N:
            pick = rng.choice(N, size=N, p=w)
            x = x[pick]
            idx = idx[pick] if finite else None
            logw = np.zeros(N)
            resamples += 1
        else:
            with np.errstate(divide="ignore"):
                logw = np.log(w)

    w = _normalize_log(logw)
    return ParticleTrajectory(
        obs.grid, tuple(sysm.states) if finite else (), hist, obs.jump_index.copy(), pre_hist,
        label="particle", mean=mean, var=var, ess=ess, resamples=resamples,
        ensemble=ParticleEnsemble(x.copy(), w, float(obs.grid[-1])),
    )
