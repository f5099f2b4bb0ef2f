"""Partially observed jump-diffusion systems and the operators the filters use.

Two model shapes are supported:

* :class:`JumpDiffusionSystem` -- the general coupled system driven by a
  finite atomic Poisson random measure; marks gate the signal and
  observation jumps through ``K0`` and ``K1``.
* :class:`FiniteStateSignalModel` -- a pure-jump signal on a finite state
  space, observed through a diffusion with jumps.  It can always be viewed
  as a :class:`JumpDiffusionSystem` via :meth:`FiniteStateSignalModel.as_system`.

Coefficients are small parametric families (constant, linear, polynomial in
``x``, per-state table) rather than arbitrary expressions, so models can be
read from configuration files.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Hashable, Mapping, Sequence

import numpy as np

Mark = Hashable

ROW_SUM_TOL = 1e-12


class ModelError(ValueError):
    """Raised when a model definition violates its invariants."""


# ---------------------------------------------------------------------------
# coefficient families


def _out(value, *args):
    shape = np.broadcast(*args).shape
    if shape == ():
        return float(value) if np.ndim(value) == 0 else float(np.asarray(value).item())
    return np.broadcast_to(np.asarray(value, dtype=float), shape).copy()


@dataclass(frozen=True)
class Constant:
    value: float

    depends_on_x = False
    depends_on_y = False

    def __call__(self, t, x, y=0.0):
        return _out(self.value, t, x, y)

    def bound(self, states=None) -> float:
        return abs(self.value)


@dataclass(frozen=True)
class Linear:
    """``a + bt*t + bx*x + by*y``."""

    a: float = 0.0
    bt: float = 0.0
    bx: float = 0.0
    by: float = 0.0

    @property
    def depends_on_x(self) -> bool:
        return self.bx != 0.0

    @property
    def depends_on_y(self) -> bool:
        return self.by != 0.0

    def __call__(self, t, x, y=0.0):
        t, x, y = np.asarray(t, float), np.asarray(x, float), np.asarray(y, float)
        return _out(self.a + self.bt * t + self.bx * x + self.by * y, t, x, y)

    def bound(self, states=None) -> float:
        if self.bt or self.by:
            return np.inf
        if self.bx == 0.0:
            return abs(self.a)
        if states is None:
            return np.inf
        return float(np.max(np.abs(self.a + self.bx * np.asarray(states, float))))


@dataclass(frozen=True)
class PolynomialX:
    """``sum_k coeffs[k] * x**k``."""

    coeffs: tuple[float, ...]

    depends_on_y = False

    @property
    def depends_on_x(self) -> bool:
        return any(c != 0.0 for c in self.coeffs[1:])

    def __call__(self, t, x, y=0.0):
        x = np.asarray(x, float)
        return _out(np.polynomial.polynomial.polyval(x, self.coeffs), t, x, y)

    def bound(self, states=None) -> float:
        if not self.depends_on_x:
            return abs(self.coeffs[0]) if self.coeffs else 0.0
        if states is None:
            return np.inf
        return float(np.max(np.abs(np.polynomial.polynomial.polyval(np.asarray(states, float), self.coeffs))))


@dataclass(frozen=True)
class StateTable:
    """Per-state lookup; ``x`` must be one of ``states``."""

    states: tuple[float, ...]
    values: tuple[float, ...]

    depends_on_x = True
    depends_on_y = False

    def __post_init__(self):
        if len(self.states) != len(self.values):
            raise ModelError("table needs one value per state")

    def index(self, x):
        labels = np.asarray(self.states, float)
        order = np.argsort(labels)
        x = np.asarray(x, float)
        pos = np.clip(np.searchsorted(labels[order], x), 0, len(labels) - 1)
        idx = order[pos]
        if not np.all(labels[idx] == x):
            raise ModelError(f"value(s) {x[labels[idx] != x] if x.ndim else x} not in state space")
        return idx

    def __call__(self, t, x, y=0.0):
        vals = np.asarray(self.values, float)[self.index(x)]
        return _out(vals, t, x, y)

    def bound(self, states=None) -> float:
        return float(np.max(np.abs(self.values))) if self.values else 0.0


@dataclass(frozen=True)
class GatedShift:
    """Signal displacement ``(to - frm) * 1{x == frm}``."""

    frm: float
    to: float

    depends_on_x = True
    depends_on_y = False

    def __call__(self, t, x, y=0.0):
        x = np.asarray(x, float)
        return _out(np.where(x == self.frm, self.to - self.frm, 0.0), t, x, y)


@dataclass(frozen=True)
class GatedSize:
    """Observation jump of fixed ``size``, active only when ``x`` is in ``when_x``.

    ``when_x=None`` means always active.  Sizes are model constants, so the
    admissible size set can be enumerated exactly.
    """

    size: float
    when_x: tuple[float, ...] | None = None

    depends_on_y = False

    @property
    def depends_on_x(self) -> bool:
        return self.when_x is not None

    def __call__(self, t, x, y=0.0):
        x = np.asarray(x, float)
        if self.when_x is None:
            return _out(self.size, t, x, y)
        return _out(np.where(np.isin(x, self.when_x), self.size, 0.0), t, x, y)


Coefficient = Callable


def _check_sizes_enumerable(k1: Mapping) -> tuple[float, ...]:
    sizes = set()
    for mark, spec in k1.items():
        if not isinstance(spec, (GatedSize, Constant)):
            raise ModelError(f"K1 for mark {mark!r} must be a GatedSize/Constant to enumerate sizes; pass jump_sizes")
        s = spec.size if isinstance(spec, GatedSize) else spec.value
        if s != 0.0:
            sizes.add(float(s))
    return tuple(sorted(sizes))


# ---------------------------------------------------------------------------
# mark space and local characteristics


@dataclass(frozen=True)
class MarkSpace:
    """Finite atomic intensity measure ``nu`` on a set of marks."""

    marks: tuple
    weight: Mapping

    def __post_init__(self):
        if len(set(self.marks)) != len(self.marks):
            raise ModelError("mark identifiers must be unique")
        if set(self.weight) != set(self.marks):
            raise ModelError("every mark needs exactly one weight")
        for m in self.marks:
            w = float(self.weight[m])
            if not np.isfinite(w) or w < 0:
                raise ModelError(f"weight of mark {m!r} must be finite and >= 0, got {w}")

    @classmethod
    def from_pairs(cls, pairs: Sequence[tuple[Mark, float]]) -> MarkSpace:
        return cls(tuple(m for m, _ in pairs), {m: float(w) for m, w in pairs})

    @property
    def total(self) -> float:
        return float(sum(self.weight[m] for m in self.marks))

    def __len__(self) -> int:
        return len(self.marks)


@dataclass(frozen=True)
class LocalCharacteristics:
    lam: float
    phi: dict

    def __post_init__(self):
        if self.lam > 0 and abs(sum(self.phi.values()) - 1.0) > 1e-12:
            raise ModelError("phi must be a probability when lambda > 0")


@dataclass(frozen=True)
class TestFunction:
    """Test function ``f(t, x)`` with the derivatives the generator needs.

    Derivatives default to zero, which is exact for functions on a finite
    state space that do not depend on time.
    """

    __test__ = False  # not a pytest class

    f: Callable
    df_dt: Callable = lambda t, x: 0.0
    df_dx: Callable = lambda t, x: 0.0
    d2f_dx2: Callable = lambda t, x: 0.0

    def __call__(self, t, x):
        return self.f(t, x)

    @classmethod
    def indicator(cls, state: float) -> TestFunction:
        return cls(lambda t, x, s=state: float(x == s))

    @classmethod
    def constant(cls, c: float) -> TestFunction:
        return cls(lambda t, x, c=c: c)


# ---------------------------------------------------------------------------
# models


@dataclass(frozen=True)
class JumpDiffusionSystem:
    """General signal/observation pair with common jump times.

    ``K0[mark]`` and ``K1[mark]`` are coefficient objects evaluated as
    ``K0[mark](t, x)`` and ``K1[mark](t, x, y)``.  ``sigma0`` may vanish for
    pure-jump signals; ``sigma1`` must stay positive.
    """

    b0: Coefficient
    sigma0: Coefficient
    b1: Coefficient
    sigma1: Coefficient
    marks: MarkSpace
    K0: Mapping
    K1: Mapping
    rho: float = 0.0
    x0: float = 0.0
    y0: float = 0.0
    horizon: float = 1.0
    jump_sizes: tuple[float, ...] | None = None
    prior: Mapping | None = None
    states: tuple[float, ...] | None = None

    def __post_init__(self):
        if not -1.0 <= self.rho <= 1.0:
            raise ModelError(f"rho must lie in [-1, 1], got {self.rho}")
        if self.horizon <= 0:
            raise ModelError("horizon must be positive")
        if set(self.K0) != set(self.marks.marks) or set(self.K1) != set(self.marks.marks):
            raise ModelError("K0 and K1 must be given for every mark")
        if getattr(self.sigma1, "depends_on_x", False):
            raise ModelError("sigma1 may not depend on the signal")
        for name in ("b0", "sigma0"):
            if getattr(getattr(self, name), "depends_on_y", False):
                raise ModelError(f"{name} may not depend on the observation")
        if self.jump_sizes is None:
            object.__setattr__(self, "jump_sizes", _check_sizes_enumerable(self.K1))
        else:
            object.__setattr__(self, "jump_sizes", tuple(sorted(float(h) for h in self.jump_sizes)))
        if 0.0 in self.jump_sizes:
            raise ModelError("0 is not an admissible jump size")

    @property
    def H(self) -> tuple[float, ...]:
        return self.jump_sizes

    @property
    def pure_jump_signal(self) -> bool:
        return isinstance(self.b0, Constant) and self.b0.value == 0.0 and isinstance(self.sigma0, Constant) and self.sigma0.value == 0.0

    def k0(self, t, x, mark):
        return self.K0[mark](t, x, 0.0)

    def k1(self, t, x, y, mark):
        return self.K1[mark](t, x, y)

    def as_system(self) -> JumpDiffusionSystem:
        return self


@dataclass(frozen=True)
class FiniteStateSignalModel:
    """Pure-jump signal on a finite state space ``S``.

    The signal leaves ``u`` at rate ``lambda0[u]`` and lands on ``v`` with
    probability ``mu0[u][v]``.  ``obs_jump_size[u][v]`` is the observation
    jump fired by that transition (0 means the transition is silent).
    ``extra_obs_marks`` holds ``(rates_per_state, size)`` pairs for
    observation-only jumps.  Coefficients ``b1`` and ``sigma1`` are evaluated
    at the state *label*.
    """

    states: tuple[float, ...]
    lambda0: tuple[float, ...]
    mu0: tuple[tuple[float, ...], ...]
    obs_jump_size: tuple[tuple[float, ...], ...]
    b1: Coefficient
    sigma1: Coefficient
    extra_obs_marks: tuple[tuple[tuple[float, ...], float], ...] = ()
    rho: float = 0.0
    x0: float = 0.0
    y0: float = 0.0
    horizon: float = 1.0
    prior: tuple[float, ...] | None = None

    def __post_init__(self):
        n = len(self.states)
        if n == 0 or len(set(self.states)) != n:
            raise ModelError("states must be a nonempty sequence of unique labels")
        object.__setattr__(self, "states", tuple(float(s) for s in self.states))
        mu = np.asarray(self.mu0, float)
        k1 = np.asarray(self.obs_jump_size, float)
        lam0 = np.asarray(self.lambda0, float)
        if mu.shape != (n, n) or k1.shape != (n, n) or lam0.shape != (n,):
            raise ModelError("lambda0, mu0 and obs_jump_size must match the state space")
        if np.any(lam0 < 0) or not np.all(np.isfinite(lam0)):
            raise ModelError("lambda0 must be finite and >= 0")
        if np.any(mu < 0):
            raise ModelError("mu0 entries must be >= 0")
        for u in range(n):
            if mu[u, u] != 0.0:
                raise ModelError(f"mu0 must have zero diagonal (state {self.states[u]})")
            if lam0[u] > 0 and abs(mu[u].sum() - 1.0) > ROW_SUM_TOL:
                raise ModelError(f"row {u} of mu0 must sum to 1")
        for rates, size in self.extra_obs_marks:
            if len(rates) != n or any(r < 0 for r in rates):
                raise ModelError("extra_obs_marks rates must be >= 0, one per state")
            if size == 0.0:
                raise ModelError("extra observation marks need a nonzero size")
        if not -1.0 <= self.rho <= 1.0:
            raise ModelError(f"rho must lie in [-1, 1], got {self.rho}")
        if self.horizon <= 0:
            raise ModelError("horizon must be positive")
        if float(self.x0) not in self.states:
            raise ModelError(f"x0={self.x0} is not a state")
        if self.prior is not None:
            p = np.asarray(self.prior, float)
            if p.shape != (n,) or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12:
                raise ModelError("prior must be a probability vector over the states")
        if getattr(self.sigma1, "depends_on_x", False):
            raise ModelError("sigma1 may not depend on the signal")

    # -- basic views --------------------------------------------------------

    @property
    def n(self) -> int:
        return len(self.states)

    @cached_property
    def H(self) -> tuple[float, ...]:
        k1 = np.asarray(self.obs_jump_size, float)
        sizes = {float(k1[u, v]) for u in range(self.n) for v in range(self.n) if u != v and self.lambda0[u] * self.mu0[u][v] > 0}
        sizes |= {float(s) for rates, s in self.extra_obs_marks if any(r > 0 for r in rates)}
        sizes.discard(0.0)
        return tuple(sorted(sizes))

    @property
    def jump_sizes(self) -> tuple[float, ...]:
        return self.H

    pure_jump_signal = True

    def index(self, state: float) -> int:
        return self.states.index(float(state))

    def initial_law(self) -> np.ndarray:
        if self.prior is not None:
            return np.asarray(self.prior, float).copy()
        p = np.zeros(self.n)
        p[self.index(self.x0)] = 1.0
        return p

    # -- rate matrices ------------------------------------------------------

    @cached_property
    def transition_rates(self) -> np.ndarray:
        """``rate[u, v] = lambda0(u) mu0(u, v)``."""
        return np.asarray(self.lambda0, float)[:, None] * np.asarray(self.mu0, float)

    @cached_property
    def generator(self) -> np.ndarray:
        q = self.transition_rates.copy()
        np.fill_diagonal(q, -q.sum(axis=1))
        return q

    @cached_property
    def silent_generator(self) -> np.ndarray:
        """Generator restricted to transitions the observation does not see."""
        k1 = np.asarray(self.obs_jump_size, float)
        q = np.where(k1 == 0.0, self.transition_rates, 0.0)
        np.fill_diagonal(q, 0.0)
        np.fill_diagonal(q, -q.sum(axis=1))
        return q

    @cached_property
    def common_rates(self) -> np.ndarray:
        """``common[i, u, v]``: rate of ``u -> v`` firing observed size ``H[i]``."""
        k1 = np.asarray(self.obs_jump_size, float)
        out = np.zeros((len(self.H), self.n, self.n))
        for i, h in enumerate(self.H):
            out[i] = np.where(k1 == h, self.transition_rates, 0.0)
            np.fill_diagonal(out[i], 0.0)
        return out

    @cached_property
    def same_state_rates(self) -> np.ndarray:
        """``same[i, u]``: intensity of observed size ``H[i]`` with the signal unchanged."""
        out = np.zeros((len(self.H), self.n))
        for rates, size in self.extra_obs_marks:
            if size in self.H:
                out[self.H.index(size)] += np.asarray(rates, float)
        return out

    @cached_property
    def size_intensities(self) -> np.ndarray:
        """``lam_h[i, u]``: total intensity of observed size ``H[i]`` from state ``u``."""
        return self.same_state_rates + self.common_rates.sum(axis=2)

    @cached_property
    def jump_intensity(self) -> np.ndarray:
        """``lambda(u)``: total observed-jump intensity from ``u``."""
        return self.size_intensities.sum(axis=0)

    def jump_matrix(self, z: float) -> np.ndarray:
        """``J[u, v]``: rate of moving ``u -> v`` (or staying) with observed size ``z``."""
        i = self.H.index(z)
        return np.diag(self.same_state_rates[i]) + self.common_rates[i]

    # -- general-system view ------------------------------------------------

    @cached_property
    def _system(self) -> JumpDiffusionSystem:
        marks, k0, k1 = [], {}, {}
        rate = self.transition_rates
        ksz = np.asarray(self.obs_jump_size, float)
        for u, su in enumerate(self.states):
            for v, sv in enumerate(self.states):
                if u != v and rate[u, v] > 0:
                    m = f"s{_fmt(su)}>{_fmt(sv)}"
                    marks.append((m, rate[u, v]))
                    k0[m] = GatedShift(su, sv)
                    k1[m] = GatedSize(float(ksz[u, v]), (su,))
        for i, (rates, size) in enumerate(self.extra_obs_marks):
            for u, su in enumerate(self.states):
                if rates[u] > 0:
                    m = f"o{i + 1}@{_fmt(su)}"
                    marks.append((m, float(rates[u])))
                    k0[m] = Constant(0.0)
                    k1[m] = GatedSize(float(size), (su,))
        return JumpDiffusionSystem(
            b0=Constant(0.0), sigma0=Constant(0.0), b1=self.b1, sigma1=self.sigma1,
            marks=MarkSpace.from_pairs(marks), K0=k0, K1=k1, rho=self.rho,
            x0=float(self.x0), y0=self.y0, horizon=self.horizon, jump_sizes=self.H,
            prior=dict(zip(self.states, self.initial_law())), states=self.states,
        )

    def as_system(self) -> JumpDiffusionSystem:
        return self._system


def _fmt(s: float) -> str:
    return str(int(s)) if float(s).is_integer() else repr(s)


Model = JumpDiffusionSystem | FiniteStateSignalModel


# ---------------------------------------------------------------------------
# operators


def d_set(model: Model, t: float, x: float, y: float, A=None, *, signal: bool = False) -> set:
    """Marks whose jump lands in ``A``.

    With ``signal=False`` returns ``{mark : K1(t,x,y,mark) in A minus {0}}``
    (``A=None`` means all of R, i.e. the set of observed-jump marks).  With
    ``signal=True`` returns the signal-jump marks ``{mark : K0(t,x,mark) != 0}``.
    """
    sysm = model.as_system()
    if signal:
        return {m for m in sysm.marks.marks if sysm.k0(t, x, m) != 0.0}
    if A is not None:
        A = {float(a) for a in A}
        if 0.0 in A:
            raise ModelError("A must not contain 0")
    out = set()
    for m in sysm.marks.marks:
        k = sysm.k1(t, x, y, m)
        if k != 0.0 and (A is None or k in A):
            out.add(m)
    return out


def local_characteristics(model: Model, t: float, x: float, y: float) -> LocalCharacteristics:
    sysm = model.as_system()
    w = sysm.marks.weight
    lam = sum(w[m] for m in d_set(sysm, t, x, y))
    if lam == 0:
        return LocalCharacteristics(0.0, {})
    phi = {}
    for h in sysm.H:
        mass = sum(w[m] for m in d_set(sysm, t, x, y, {h}))
        if mass > 0:
            phi[h] = mass / lam
    return LocalCharacteristics(float(lam), phi)


def _jump_sum(sysm: JumpDiffusionSystem, f: TestFunction, t, x, marks) -> float:
    fx = f(t, x)
    return float(sum((f(t, x + sysm.k0(t, x, m)) - fx) * sysm.marks.weight[m] for m in marks))


def generator_apply(model: Model, f: TestFunction, t: float, x: float) -> float:
    """Generator of the signal applied to ``f`` at ``(t, x)``."""
    sysm = model.as_system()
    out = f.df_dt(t, x)
    if not sysm.pure_jump_signal:
        out += sysm.b0(t, x) * f.df_dx(t, x) + 0.5 * sysm.sigma0(t, x) ** 2 * f.d2f_dx2(t, x)
    return float(out + _jump_sum(sysm, f, t, x, sysm.marks.marks))


def common_jump_operator(model: Model, f: TestFunction, t: float, x: float, y: float, h: float) -> float:
    """Signal-jump part of ``f`` restricted to marks that fire observed size ``h``."""
    sysm = model.as_system()
    if h not in sysm.H:
        raise ModelError(f"{h} is not an admissible jump size {sysm.H}")
    return _jump_sum(sysm, f, t, x, sorted(d_set(sysm, t, x, y, {h}), key=str))


def restricted_generator_apply(model: Model, f: TestFunction, t: float, x: float, y: float) -> float:
    """Generator with the jump sum restricted to marks the observation does not see."""
    sysm = model.as_system()
    seen = d_set(sysm, t, x, y)
    out = f.df_dt(t, x)
    if not sysm.pure_jump_signal:
        out += sysm.b0(t, x) * f.df_dx(t, x) + 0.5 * sysm.sigma0(t, x) ** 2 * f.d2f_dx2(t, x)
    silent = [m for m in sysm.marks.marks if m not in seen]
    return float(out + _jump_sum(sysm, f, t, x, silent))


def eta_measure(model: Model, t: float = 0.0, y: float = 0.0) -> dict:
    """Reference jump measure: a unit atom on every admissible size."""
    sysm = model.as_system()
    if not sysm.H:
        for m in sysm.marks.marks:
            spec = sysm.K1[m]
            if sysm.marks.weight[m] > 0 and isinstance(spec, (GatedSize, Constant)) and getattr(spec, "size", getattr(spec, "value", 0.0)) != 0.0:
                raise ModelError("model has observation jumps but no admissible sizes")
    return {h: 1.0 for h in sysm.H}


# ---------------------------------------------------------------------------
# assumption lint


@dataclass
class ConditionCheck:
    name: str
    passed: bool
    worst_ratio: float
    witness: tuple
    note: str = ""


@dataclass
class AssumptionReport:
    checks: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def failures(self) -> list:
        return [c for c in self.checks if not c.passed]

    def __str__(self) -> str:
        lines = []
        for c in self.checks:
            status = "ok  " if c.passed else "FLAG"
            lines.append(f"{status} {c.name:<22} worst={c.worst_ratio:.4g} at {tuple(round(v, 4) for v in c.witness)} {c.note}".rstrip())
        return "\n".join(lines)


GROWTH_TREND = 1.5
LIPSCHITZ_TREND = 5.0


def validate_assumptions(model: Model, sample_box, n_samples: int = 2000, seed: int = 0,
                         C: float | None = None, L: float | None = None) -> AssumptionReport:
    """Spot-check linear growth and local Lipschitz bounds on sampled points.

    ``sample_box`` is ``((t_lo, t_hi), (x_lo, x_hi), (y_lo, y_hi))``.  A
    growth condition is flagged when the ratio ``|g|^2 / (1 + |x|^2 + ...)``
    keeps climbing from the inner half of the box to the outer half
    (superlinear growth), or exceeds ``C`` when given.  Lipschitz checks
    compare difference quotients at two separations; a quotient that grows
    as the separation shrinks indicates a discontinuity.  This is a lint,
    not a proof.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    sysm = model.as_system()
    rng = np.random.default_rng(seed)
    (t_lo, t_hi), (x_lo, x_hi), (y_lo, y_hi) = sample_box
    t = rng.uniform(t_lo, t_hi, n_samples)
    y = rng.uniform(y_lo, y_hi, n_samples)
    finite = sysm.states is not None
    if finite:
        x = rng.choice(np.asarray(sysm.states, float), n_samples)
    else:
        x = rng.uniform(x_lo, x_hi, n_samples)
    report = AssumptionReport()

    def k_sq(which, tt, xx, yy):
        tot = np.zeros_like(xx, dtype=float)
        for m in sysm.marks.marks:
            val = sysm.k0(tt, xx, m) if which == 0 else sysm.k1(tt, xx, yy, m)
            tot = tot + np.asarray(val, float) ** 2 * sysm.marks.weight[m]
        return tot

    growth = {
        "growth:b0": (lambda tt, xx, yy: np.asarray(sysm.b0(tt, xx), float) ** 2, "x"),
        "growth:sigma0": (lambda tt, xx, yy: np.asarray(sysm.sigma0(tt, xx), float) ** 2, "x"),
        "growth:b1": (lambda tt, xx, yy: np.asarray(sysm.b1(tt, xx, yy), float) ** 2, "xy"),
        "growth:sigma1": (lambda tt, xx, yy: np.asarray(sysm.sigma1(tt, 0.0 * yy, yy), float) ** 2, "y"),
        "growth:K0": (lambda tt, xx, yy: k_sq(0, tt, xx, yy), "x"),
        "growth:K1": (lambda tt, xx, yy: k_sq(1, tt, xx, yy), "xy"),
    }
    scale = max(abs(x_lo), abs(x_hi), 1e-300), max(abs(y_lo), abs(y_hi), 1e-300)
    for name, (g, dep) in growth.items():
        denom = 1.0 + (x ** 2 if "x" in dep else 0.0) + (y ** 2 if "y" in dep else 0.0)
        ratio = np.broadcast_to(g(t, x, y), x.shape) / denom
        k = int(np.argmax(ratio))
        worst = float(ratio[k])
        use_x = "x" in dep and not finite
        radius = np.maximum(np.abs(x) / scale[0] if use_x else 0.0, np.abs(y) / scale[1] if "y" in dep else 0.0)
        radius = np.broadcast_to(radius, x.shape)
        inner, outer = ratio[radius <= 0.5], ratio[radius > 0.5]
        trend = 1.0
        if inner.size and outer.size:
            if inner.max() > 0:
                trend = float(outer.max() / inner.max())
            elif outer.max() > 0:
                trend = np.inf
        ok = trend <= GROWTH_TREND and (C is None or worst <= C)
        note = "" if ok else (f"superlinear trend x{trend:.3g}" if trend > GROWTH_TREND else f"exceeds C={C}")
        report.checks.append(ConditionCheck(name, bool(ok), worst, _witness(t, x, y, k), note))

    if finite:
        report.checks.append(ConditionCheck("lipschitz", True, 0.0, (), "n/a: finite state space"))
        return report

    def quotient(fun, dep, delta):
        dx = rng.choice([-1.0, 1.0], n_samples) * delta if "x" in dep else 0.0
        dy = rng.choice([-1.0, 1.0], n_samples) * delta if "y" in dep else 0.0
        return fun(t, x, y, x + dx, y + dy) / delta

    def plain(g):
        return lambda tt, xa, ya, xb, yb: np.abs(np.asarray(g(tt, xa, ya), float) - np.asarray(g(tt, xb, yb), float))

    def marks_l2(which):
        def diff(tt, xa, ya, xb, yb):
            tot = np.zeros_like(xa, dtype=float)
            for m in sysm.marks.marks:
                if which == 0:
                    d = np.asarray(sysm.k0(tt, xa, m), float) - np.asarray(sysm.k0(tt, xb, m), float)
                else:
                    d = np.asarray(sysm.k1(tt, xa, ya, m), float) - np.asarray(sysm.k1(tt, xb, yb, m), float)
                tot = tot + d ** 2 * sysm.marks.weight[m]
            return np.sqrt(tot)
        return diff

    lips = {
        "lipschitz:b0": (plain(lambda tt, xx, yy: sysm.b0(tt, xx)), "x"),
        "lipschitz:sigma0": (plain(lambda tt, xx, yy: sysm.sigma0(tt, xx)), "x"),
        "lipschitz:b1": (plain(lambda tt, xx, yy: sysm.b1(tt, xx, yy)), "xy"),
        "lipschitz:sigma1": (plain(lambda tt, xx, yy: sysm.sigma1(tt, 0.0 * yy, yy)), "y"),
        "lipschitz:K0": (marks_l2(0), "x"),
        "lipschitz:K1": (marks_l2(1), "xy"),
    }
    width = max(x_hi - x_lo, y_hi - y_lo, 1e-12)
    for name, (fun, dep) in lips.items():
        coarse = quotient(fun, dep, 1e-3 * width)
        fine = quotient(fun, dep, 1e-5 * width)
        k = int(np.argmax(fine))
        worst = float(fine[k])
        trend = float(fine.max() / coarse.max()) if coarse.max() > 0 else (np.inf if fine.max() > 0 else 1.0)
        ok = trend <= LIPSCHITZ_TREND and (L is None or worst <= L)
        note = "" if ok else ("difference quotient diverges" if trend > LIPSCHITZ_TREND else f"exceeds L={L}")
        report.checks.append(ConditionCheck(name, bool(ok), worst, _witness(t, x, y, k), note))
    return report


def _witness(t, x, y, k):
    return float(t[k]), float(x[k]), float(y[k])
