"""Unnormalized (Zakai) and normalized (Kushner-Stratonovich) filters for
finite-state signals.

The unnormalized measure ``V(t, .)`` is carried as a probability vector plus
``log V(t, S)``, renormalising after every Euler step so long horizons never
under- or overflow.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numba import njit

from .model import FiniteStateSignalModel, ModelError, _fmt
from .sim import ObservationPath, fmt

CLAMP_TOL = 1e-9


class FilterError(RuntimeError):
    """Model/data inconsistency or numerical breakdown inside a filter."""


@dataclass
class UnnormalizedFilterState:
    probs: np.ndarray
    log_mass: float
    t: float
    clamps: int = 0

    def __post_init__(self):
        self.probs = np.asarray(self.probs, float)

    @property
    def values(self) -> np.ndarray:
        return math.exp(self.log_mass) * self.probs

    @classmethod
    def from_values(cls, v, t: float = 0.0) -> UnnormalizedFilterState:
        v = np.asarray(v, float)
        s = v.sum()
        if not s > 0:
            raise FilterError("unnormalized filter needs positive total mass")
        return cls(v / s, math.log(s), t)


@dataclass
class FilterTrajectory:
    """Filter on an observation grid.

    ``probs[k]`` is the filter at ``grid[k]`` (post-jump at jump points);
    ``pre_jump_probs[n]`` holds the left limit at ``grid[jump_index[n]]``.
    """

    grid: np.ndarray
    states: tuple
    probs: np.ndarray
    jump_index: np.ndarray
    pre_jump_probs: np.ndarray
    label: str = "filter"
    innovation: np.ndarray | None = None
    flags: list = field(default_factory=list)
    clamps: int = 0

    @property
    def log_mass(self) -> np.ndarray | None:
        return None

    @property
    def pre_jump_log_mass(self) -> np.ndarray | None:
        return None

    @property
    def final(self) -> np.ndarray:
        return self.probs[-1]

    def rows(self):
        """``(t, log_mass, probs)`` with each jump row preceded by its left limit."""
        lm = self.log_mass
        pre_lm = self.pre_jump_log_mass
        jumps = {int(j): n for n, j in enumerate(self.jump_index)}
        for k, t in enumerate(self.grid):
            if k in jumps:
                n = jumps[k]
                yield t, (pre_lm[n] if pre_lm is not None else math.nan), self.pre_jump_probs[n]
            yield t, (lm[k] if lm is not None else math.nan), self.probs[k]

    def to_csv(self, path, manifest: str | None = None) -> Path:
        path = Path(path)
        header = ["t", "log_mass"] + [f"pi_{_fmt(s)}" for s in self.states]
        with open(path, "w", encoding="utf-8", newline="") as fh:
            if manifest:
                fh.write(f"# {manifest}\n")
            fh.write(",".join(header) + "\n")
            for t, lm, p in self.rows():
                fh.write(",".join([fmt(t), fmt(lm)] + [fmt(v) for v in p]) + "\n")
        return path

    def all_probs(self) -> np.ndarray:
        """Grid values and left limits stacked; used by invariant checks."""
        return np.vstack([self.probs, self.pre_jump_probs]) if len(self.pre_jump_probs) else self.probs


@dataclass
class UnnormalizedFilterTrajectory(FilterTrajectory):
    log_masses: np.ndarray = None
    pre_jump_log_masses: np.ndarray = None

    @property
    def log_mass(self) -> np.ndarray:
        return self.log_masses

    @property
    def pre_jump_log_mass(self) -> np.ndarray:
        return self.pre_jump_log_masses

    def state(self, k: int) -> UnnormalizedFilterState:
        return UnnormalizedFilterState(self.probs[k].copy(), float(self.log_masses[k]), float(self.grid[k]))

    def normalized(self) -> FilterTrajectory:
        return FilterTrajectory(self.grid, self.states, self.probs, self.jump_index, self.pre_jump_probs,
                                label=self.label, flags=list(self.flags), clamps=self.clamps)


def sup_l1(a: FilterTrajectory, b: FilterTrajectory) -> float:
    """``sup_t |pi_a - pi_b|_1`` over grid points (left limits included)."""
    if len(a.grid) != len(b.grid) or not np.array_equal(a.grid, b.grid):
        raise ValueError("trajectories live on different grids")
    d = np.abs(a.probs - b.probs).sum(axis=1).max()
    if len(a.pre_jump_probs):
        d = max(d, np.abs(a.pre_jump_probs - b.pre_jump_probs).sum(axis=1).max())
    return float(d)


# ---------------------------------------------------------------------------
# kernels
#
# status codes: 0 ok, 1 negative entry below tolerance, 2 mass collapsed


@njit(cache=True)
def _zakai_euler(p0, lm0, M, g, dw, dts, tol, out, lm_out):
    n = p0.shape[0]
    p = p0.copy()
    out[0] = p
    log_mass = lm0
    lm_out[0] = lm0
    clamps = 0
    v = np.empty(n)
    for k in range(dts.shape[0]):
        s = 0.0
        for u in range(n):
            acc = 0.0
            for w in range(n):
                acc += M[u, w] * p[w]
            v[u] = p[u] + dts[k] * acc + g[k, u] * p[u] * dw[k]
        for u in range(n):
            if v[u] < 0.0:
                if v[u] < -tol:
                    return log_mass, clamps, 1, k
                v[u] = 0.0
                clamps += 1
            s += v[u]
        if not (s > 0.0) or not np.isfinite(s):
            return log_mass, clamps, 2, k
        log_mass += math.log(s)
        for u in range(n):
            p[u] = v[u] / s
        out[k + 1] = p
        lm_out[k + 1] = log_mass
    return log_mass, clamps, 0, -1


@njit(cache=True)
def _ks_euler(p0, Q0T, lam, g, dw, dts, tol, out, dI):
    n = p0.shape[0]
    p = p0.copy()
    out[0] = p
    clamps = 0
    v = np.empty(n)
    for k in range(dts.shape[0]):
        dt = dts[k]
        pl = 0.0
        pg = 0.0
        for u in range(n):
            pl += p[u] * lam[u]
            pg += p[u] * g[k, u]
        di = dw[k] - pg * dt
        dI[k] = di
        s = 0.0
        for u in range(n):
            inflow = 0.0
            for w in range(n):
                inflow += Q0T[u, w] * p[w]
            drift = inflow + p[u] * pl - lam[u] * p[u]
            v[u] = p[u] + drift * dt + p[u] * (g[k, u] - pg) * di
        for u in range(n):
            if v[u] < 0.0:
                if v[u] < -tol:
                    return clamps, 1, k
                v[u] = 0.0
                clamps += 1
            s += v[u]
        if not (s > 0.0) or not np.isfinite(s):
            return clamps, 2, k
        for u in range(n):
            p[u] = v[u] / s
        out[k + 1] = p
    return clamps, 0, -1


def _raise_status(status: int, k: int, grid, start: int, solver: str):
    t = grid[start + k + 1]
    if status == 1:
        raise FilterError(f"{solver}: filter entry fell below -{CLAMP_TOL:g} at t={t:.6g}")
    raise FilterError(f"{solver}: total mass collapsed at t={t:.6g}")


# ---------------------------------------------------------------------------
# model-derived pieces


def _check_model(model):
    if not isinstance(model, FiniteStateSignalModel):
        raise ModelError("the exact solvers need a FiniteStateSignalModel")


def zakai_matrix(model: FiniteStateSignalModel) -> np.ndarray:
    """Between-jump drift matrix ``M`` with ``dV = M V dt + g V dW~``."""
    eta_total = float(len(model.H))
    return model.silent_generator.T - np.diag(model.jump_intensity) + eta_total * np.eye(model.n)


def signal_to_noise(model: FiniteStateSignalModel, grid, y) -> np.ndarray:
    """``g[k, u] = b1(t_k, u, y_k) / sigma1(t_k, y_k)`` at left endpoints."""
    t = np.asarray(grid, float)[:-1, None]
    yl = np.asarray(y, float)[:-1, None]
    states = np.asarray(model.states)[None, :]
    b = np.broadcast_to(np.asarray(model.b1(t, states, yl), float), (t.shape[0], model.n))
    s = np.asarray(model.sigma1(t, 0.0 * yl, yl), float)
    if np.any(s <= 0):
        raise ModelError("sigma1 must be positive along the observation path")
    return np.ascontiguousarray(b / s)


# ---------------------------------------------------------------------------
# Zakai


def zakai_between_jumps(model: FiniteStateSignalModel, state: UnnormalizedFilterState,
                        segment: ObservationPath, *, _g=None) -> UnnormalizedFilterState:
    """Advance ``V`` across a jump-free observation slice by Euler steps."""
    _check_model(model)
    if len(segment.jump_index):
        raise ValueError("segment must not contain jumps")
    grid = np.asarray(segment.grid, float)
    g = signal_to_noise(model, grid, segment.y) if _g is None else _g
    dts = np.diff(grid)
    out = np.empty((len(grid), model.n))
    lm_out = np.empty(len(grid))
    lm, clamps, status, k = _zakai_euler(np.asarray(state.probs, float), float(state.log_mass), zakai_matrix(model), g,
                                         np.asarray(segment.wtilde_increments, float), dts, CLAMP_TOL, out, lm_out)
    if status:
        _raise_status(status, k, grid, 0, "zakai")
    return UnnormalizedFilterState(out[-1].copy(), lm, float(grid[-1]), state.clamps + clamps)


def zakai_jump_update(model: FiniteStateSignalModel, state: UnnormalizedFilterState,
                      t_jump: float, z: float) -> UnnormalizedFilterState:
    """Apply an observed jump of size ``z`` at ``t_jump``."""
    _check_model(model)
    if z not in model.H:
        raise ModelError(f"observed jump size {z} is not admissible {list(model.H)}")
    v = model.jump_matrix(z).T @ state.probs
    s = float(v.sum())
    if not s > 0:
        raise FilterError(f"observed jump of size {z} at t={t_jump:.6g} is impossible under the current filter")
    return UnnormalizedFilterState(v / s, state.log_mass + math.log(s), float(t_jump), state.clamps)


def run_zakai(model: FiniteStateSignalModel, obs: ObservationPath, prior=None):
    """Solve the Zakai equation along ``obs``.

    Returns ``(unnormalized, normalized)`` trajectories; the first carries
    ``log V(t, S)`` at every grid point and left limit.
    """
    _check_model(model)
    p0 = model.initial_law() if prior is None else np.asarray(prior, float)
    K = len(obs.grid)
    probs = np.empty((K, model.n))
    log_mass = np.empty(K)
    pre_p = np.empty((len(obs.jump_index), model.n))
    pre_lm = np.empty(len(obs.jump_index))
    g = signal_to_noise(model, obs.grid, obs.y)
    M = zakai_matrix(model)
    dts = np.diff(obs.grid)
    dw = obs.wtilde_increments
    p, lm, clamps = p0.copy(), 0.0, 0
    probs[0], log_mass[0] = p, lm
    for start, stop, n in obs.segments():
        seg = probs[start:stop + 1]
        lm, c, status, k = _zakai_euler(p, lm, M, g[start:stop], dw[start:stop], dts[start:stop], CLAMP_TOL,
                                        seg, log_mass[start:stop + 1])
        if status:
            _raise_status(status, k, obs.grid, start, "zakai")
        clamps += c
        p = seg[-1].copy()
        if n is not None:
            pre_p[n], pre_lm[n] = p, lm
            st = zakai_jump_update(model, UnnormalizedFilterState(p, lm, obs.grid[stop]), obs.grid[stop], obs.jump_size[n])
            p, lm = st.probs, st.log_mass
            probs[stop], log_mass[stop] = p, lm
    un = UnnormalizedFilterTrajectory(obs.grid, model.states, probs, obs.jump_index.copy(), pre_p,
                                      label="zakai", clamps=clamps, log_masses=log_mass, pre_jump_log_masses=pre_lm)
    return un, un.normalized()


# ---------------------------------------------------------------------------
# Kushner-Stratonovich


def ks_jump_update(model: FiniteStateSignalModel, pi_minus, z: float):
    """Normalized jump update; returns ``(pi, degenerate)``.

    Written as the operator form ``pi(f) = [pi(lam^z f) + pi(Lbar^z f)] / pi(lam^z)``
    evaluated on indicator test functions, with ``a+ = 1{a>0}/a``.
    """
    if z not in model.H:
        raise ModelError(f"observed jump size {z} is not admissible {list(model.H)}")
    i = model.H.index(z)
    lam_z = model.size_intensities[i]
    a = float(pi_minus @ lam_z)
    if not a > 0:
        return np.asarray(pi_minus, float).copy(), True
    common = model.common_rates[i]
    out = np.empty(model.n)
    for u in range(model.n):
        f = np.zeros(model.n)
        f[u] = 1.0
        lam_f = lam_z * f
        # Lbar^z f(x) = sum_v common(x, v) (f(v) - f(x))
        lbar_f = common @ f - common.sum(axis=1) * f
        out[u] = (pi_minus @ lam_f + pi_minus @ lbar_f) / a
    return out, False


def run_ks(model: FiniteStateSignalModel, obs: ObservationPath, prior=None) -> FilterTrajectory:
    """Integrate the Kushner-Stratonovich equation directly on the simplex."""
    _check_model(model)
    p0 = model.initial_law() if prior is None else np.asarray(prior, float)
    K = len(obs.grid)
    probs = np.empty((K, model.n))
    pre_p = np.empty((len(obs.jump_index), model.n))
    dI = np.empty(K - 1)
    g = signal_to_noise(model, obs.grid, obs.y)
    Q0T = np.ascontiguousarray(model.silent_generator.T)
    lam = model.jump_intensity.copy()
    dts = np.diff(obs.grid)
    dw = obs.wtilde_increments
    p, clamps, flags = p0.copy(), 0, []
    probs[0] = p
    for start, stop, n in obs.segments():
        seg = probs[start:stop + 1]
        c, status, k = _ks_euler(p, Q0T, lam, g[start:stop], dw[start:stop], dts[start:stop], CLAMP_TOL, seg, dI[start:stop])
        if status:
            _raise_status(status, k, obs.grid, start, "ks")
        clamps += c
        p = seg[-1].copy()
        if n is not None:
            pre_p[n] = p
            p, degenerate = ks_jump_update(model, p, obs.jump_size[n])
            if degenerate:
                flags.append(f"zero intensity for observed size {obs.jump_size[n]} at t={obs.grid[stop]:.6g}; gain set to 0")
            probs[stop] = p
    return FilterTrajectory(obs.grid, model.states, probs, obs.jump_index.copy(), pre_p,
                            label="ks", innovation=dI, flags=flags, clamps=clamps)
