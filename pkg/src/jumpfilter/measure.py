"""Change-of-measure bookkeeping: the density ``Z = Z0 Z1`` of the reference
measure, its inverse ``theta = V(t, S)``, and Monte Carlo diagnostics.

Everything is kept in log space.  On an Euler grid the stochastic
exponentials are taken in their exact discrete (product) form, so the
reconstructed ``log theta`` agrees with the Zakai solver's ``log_mass`` to
rounding rather than to discretisation error.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import FiniteStateSignalModel, ModelError
from .sim import ObservationPath, extract_observation, fmt, simulate_path
from .zakai import FilterTrajectory, run_zakai, signal_to_noise


class EquivalenceWarning(UserWarning):
    """The compensator of the observed jumps is not equivalent to eta at some point."""


@dataclass
class DensityTrajectory:
    grid: np.ndarray
    log_z0: np.ndarray
    log_z1: np.ndarray
    jump_index: np.ndarray
    pre_jump_log_z0: np.ndarray
    pre_jump_log_z1: np.ndarray

    @property
    def log_z(self) -> np.ndarray:
        return self.log_z0 + self.log_z1

    @property
    def log_theta(self) -> np.ndarray:
        return -self.log_z

    @property
    def pre_jump_log_theta(self) -> np.ndarray:
        return -(self.pre_jump_log_z0 + self.pre_jump_log_z1)

    def rows(self):
        jumps = {int(j): n for n, j in enumerate(self.jump_index)}
        for k, t in enumerate(self.grid):
            if k in jumps:
                n = jumps[k]
                a, b = self.pre_jump_log_z0[n], self.pre_jump_log_z1[n]
                yield t, a, b, a + b, 0.0 - (a + b)
            a, b = self.log_z0[k], self.log_z1[k]
            yield t, a, b, a + b, 0.0 - (a + b)

    def to_csv(self, path, manifest: str | None = None) -> Path:
        path = Path(path)
        with open(path, "w", encoding="utf-8", newline="") as fh:
            if manifest:
                fh.write(f"# {manifest}\n")
            fh.write("t,log_z0,log_z1,log_z,log_theta\n")
            for row in self.rows():
                fh.write(",".join(fmt(v) for v in row) + "\n")
        return path


def _require_finite(model):
    if not isinstance(model, FiniteStateSignalModel):
        raise ModelError("measure diagnostics need a FiniteStateSignalModel")


def psi_process(model: FiniteStateSignalModel, pi, t: float, y: float, z: float) -> float:
    """``Psi(t, z) = pi(lambda^z) - 1`` (eta has unit atoms on ``H``).

    Warns with :class:`EquivalenceWarning` when ``1 + Psi <= 0``.
    """
    _require_finite(model)
    if z not in model.H:
        raise ModelError(f"jump size {z} is not admissible {list(model.H)}")
    p = float(np.asarray(pi, float) @ model.size_intensities[model.H.index(z)])
    if not p > 0:
        warnings.warn(f"1 + Psi = {p:g} at t={t:g}, z={z:g}: compensator not equivalent to eta", EquivalenceWarning,
                      stacklevel=2)
    return p - 1.0


def density_processes(model: FiniteStateSignalModel, obs: ObservationPath, filter_traj: FilterTrajectory,
                      scheme: str = "discrete") -> DensityTrajectory:
    """Logs of ``Z0``, ``Z1`` along ``obs`` driven by the normalized filter.

    ``scheme="discrete"`` uses the exact stochastic exponential of the
    Euler-discretised martingales (product of ``1 + dM``); ``scheme="ito"``
    uses the continuous-time formulas ``-int phi dI - 1/2 int phi^2 dt`` and
    ``sum log 1/(1+Psi) + int Psi pi(lambda phi) dt`` on left-endpoint sums,
    which carries an extra O(sqrt(dt)) discrepancy.
    """
    _require_finite(model)
    if scheme not in ("discrete", "ito"):
        raise ValueError(f"unknown scheme {scheme!r}")
    if not np.array_equal(filter_traj.grid, obs.grid):
        raise ValueError("filter trajectory is not aligned with the observation grid")
    p = filter_traj.probs[:-1]
    dts = np.diff(obs.grid)
    dw = obs.wtilde_increments
    phi = (signal_to_noise(model, obs.grid, obs.y) * p).sum(axis=1)
    lam_bar = p @ model.jump_intensity
    eta_total = float(len(model.H))

    # per-step increments of log Z0 and log Z1 (continuous part)
    if scheme == "discrete":
        b = (eta_total - lam_bar) * dts
        if np.any(1.0 + b <= 0):
            raise ModelError("time step too coarse: 1 + (eta(R) - pi(lambda)) dt <= 0")
        ratio0 = 1.0 + phi * dw / (1.0 + b)
        if np.any(ratio0 <= 0):
            k = int(np.argmax(ratio0 <= 0))
            raise ModelError(f"discrete density step nonpositive at t={obs.grid[k]:.6g}")
        d0 = -np.log(ratio0)
        d1 = -np.log1p(b)
    else:
        dI = dw - phi * dts
        d0 = -phi * dI - 0.5 * phi**2 * dts
        d1 = (lam_bar - eta_total) * dts

    K = len(obs.grid)
    log_z0 = np.zeros(K)
    log_z1 = np.zeros(K)
    log_z0[1:] = np.cumsum(d0)
    c1 = np.concatenate([[0.0], np.cumsum(d1)])
    pre0 = np.empty(len(obs.jump_index))
    pre1 = np.empty(len(obs.jump_index))
    jump_part = 0.0
    start = 0
    for n, (j, z) in enumerate(zip(obs.jump_index, obs.jump_size)):
        log_z1[start:j] = c1[start:j] + jump_part
        pre0[n] = log_z0[j]
        pre1[n] = c1[j] + jump_part
        pi_minus = filter_traj.pre_jump_probs[n]
        one_plus_psi = float(pi_minus @ model.size_intensities[model.H.index(float(z))])
        if not one_plus_psi > 0:
            raise ModelError(f"1 + Psi = {one_plus_psi:g} at observed jump t={obs.grid[j]:.6g}")
        jump_part -= math.log(one_plus_psi)
        start = j
    log_z1[start:] = c1[start:] + jump_part
    return DensityTrajectory(obs.grid.copy(), log_z0, log_z1, obs.jump_index.copy(), pre0, pre1)


# ---------------------------------------------------------------------------
# Monte Carlo diagnostics


@dataclass
class ProtterShimboReport:
    n_paths: int
    mean: float
    se: float
    max_path: float
    bound: float | None
    exceed_bound: int
    values: np.ndarray = field(repr=False)

    def __str__(self) -> str:
        b = "unavailable" if self.bound is None else f"{self.bound:.6g}"
        lines = [
            f"Protter-Shimbo functional over {self.n_paths} paths: mean {self.mean:.6g} (SE {self.se:.3g}), "
            f"max {self.max_path:.6g}",
            f"  interval bound: {b}",
        ]
        if self.exceed_bound:
            lines.append(f"  FLAG: {self.exceed_bound} path(s) above the bound")
        if not np.isfinite(self.mean):
            lines.append("  FLAG: functional infinite on some path (vanishing jump intensity)")
        return "\n".join(lines)


def shimbo_bound(model: FiniteStateSignalModel) -> float | None:
    """``exp{T (C1^2/2 + sum_h max (1-p)^2/p)}`` over the range of ``p = pi(lambda^h)``.

    ``C1`` bounds ``|b1/sigma1|``; ``None`` when the coefficient families do not
    expose a finite bound.
    """
    _require_finite(model)
    b1_bound = model.b1.bound(model.states) if hasattr(model.b1, "bound") else np.inf
    sig = model.sigma1
    if getattr(sig, "depends_on_y", True) or not hasattr(sig, "value"):
        return None
    if not np.isfinite(b1_bound) or sig.value <= 0:
        return None
    total = 0.5 * (b1_bound / sig.value) ** 2
    for lam_h in model.size_intensities:
        lo, hi = float(lam_h.min()), float(lam_h.max())
        if lo <= 0:
            return math.inf
        total += max((1 - lo) ** 2 / lo, (1 - hi) ** 2 / hi)
    return math.exp(model.horizon * total)


def shimbo_functional(model: FiniteStateSignalModel, obs: ObservationPath, filter_traj: FilterTrajectory) -> float:
    p = filter_traj.probs[:-1]
    dts = np.diff(obs.grid)
    phi = (signal_to_noise(model, obs.grid, obs.y) * p).sum(axis=1)
    integrand = 0.5 * phi**2
    for lam_h in model.size_intensities:
        ph = p @ lam_h
        with np.errstate(divide="ignore"):
            integrand = integrand + np.where(ph > 0, (1 - ph) ** 2 / np.where(ph > 0, ph, 1.0), np.inf)
    return float(np.exp(np.sum(integrand * dts)))


def _path(model, dt, seed, i):
    obs = extract_observation(simulate_path(model, dt, seed, path_index=i), model)
    un, _ = run_zakai(model, obs)
    return obs, un


def protter_shimbo_report(model: FiniteStateSignalModel, n_paths: int, dt: float, seed: int) -> ProtterShimboReport:
    """Monte Carlo estimate of the Protter-Shimbo functional; reported, never asserted."""
    _require_finite(model)
    if n_paths < 1:
        raise ValueError("n_paths must be >= 1")
    vals = np.empty(n_paths)
    for i in range(n_paths):
        obs, un = _path(model, dt, seed, i)
        vals[i] = shimbo_functional(model, obs, un)
    bound = shimbo_bound(model)
    se = float(vals.std(ddof=1) / math.sqrt(n_paths)) if n_paths > 1 else math.nan
    exceed = int(np.sum(vals > bound * (1 + 1e-12))) if bound is not None else 0
    return ProtterShimboReport(n_paths, float(vals.mean()), se, float(vals.max()), bound, exceed, vals)


@dataclass
class MeanCheck:
    name: str
    target: float
    mean: float
    se: float

    # float rounding floor for estimators that are exactly constant
    FLOOR = 1e-12

    @property
    def passed(self) -> bool:
        return abs(self.mean - self.target) <= max(3.0 * self.se, self.FLOOR)

    def __str__(self) -> str:
        verdict = "pass" if self.passed else "FAIL"
        return f"{self.name}: {self.mean:.6g} (SE {self.se:.3g}, target {self.target:g}) {verdict}"


@dataclass
class MartingaleReport:
    n_paths: int
    z_t: MeanCheck
    jump_rates: list
    z_values: np.ndarray = field(repr=False)

    @property
    def passed(self) -> bool:
        return self.z_t.passed and all(c.passed for c in self.jump_rates)

    def __str__(self) -> str:
        lines = [f"martingale check over {self.n_paths} paths: {'pass' if self.passed else 'FAIL'}",
                 f"  {self.z_t}"]
        lines += [f"  {c}" for c in self.jump_rates]
        return "\n".join(lines)


def _mean_se(v: np.ndarray) -> tuple[float, float]:
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(len(v)))


def martingale_check(model: FiniteStateSignalModel, n_paths: int, dt: float, seed: int) -> MartingaleReport:
    """``E[Z_T] = 1`` and unit reference intensity of each observed size under reweighting."""
    _require_finite(model)
    if n_paths < 100:
        raise ValueError("martingale_check needs at least 100 paths")
    T = model.horizon
    z = np.empty(n_paths)
    counts = np.zeros((n_paths, len(model.H)))
    for i in range(n_paths):
        obs, un = _path(model, dt, seed, i)
        z[i] = math.exp(-un.log_mass[-1])
        for h_i, h in enumerate(model.H):
            counts[i, h_i] = np.count_nonzero(obs.jump_size == h)
    checks = []
    for h_i, h in enumerate(model.H):
        m, se = _mean_se(z * counts[:, h_i] / T)
        checks.append(MeanCheck(f"reweighted rate of size {h:g} jumps", 1.0, m, se))
    m, se = _mean_se(z)
    return MartingaleReport(n_paths, MeanCheck("E[Z_T]", 1.0, m, se), checks, z)


def integrability_diagnostics(model: FiniteStateSignalModel, obs: ObservationPath, unnorm) -> dict:
    """Sampled integrals of ``pi(b2) + pi(|b1/sigma1|)^2`` and of the unnormalized
    counterpart ``xi(b2 + eta(R)) + xi(|b1/sigma1|)^2``.

    For a pure-jump finite-state signal ``b2(x) = lambda0(x) + lambda(x)``.
    Finite values along a run are all a numerical tool can report.
    """
    _require_finite(model)
    p = unnorm.probs[:-1]
    dts = np.diff(obs.grid)
    mass = np.exp(unnorm.log_mass[:-1])
    b2 = np.asarray(model.lambda0, float) + model.jump_intensity
    g = np.abs(signal_to_noise(model, obs.grid, obs.y))
    normalized = np.sum(((p @ b2) + (g * p).sum(axis=1) ** 2) * dts)
    unnormalized = np.sum((mass * (p @ (b2 + len(model.H))) + (mass * (g * p).sum(axis=1)) ** 2) * dts)
    return {"b2": float(normalized), "b2_bar": float(unnormalized)}
