"""Joint simulation of signal and observation, and observation-path plumbing.

Jumps are exact: every mark runs its own exponential clock at rate
``nu(mark)`` and, when it rings, ``K0``/``K1`` evaluated at the left limits
decide what (if anything) moves.  Only the diffusion parts carry Euler
error.  Ring times are inserted into the time grid, so left limits at jumps
are represented exactly.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import JumpDiffusionSystem, ModelError

MAX_EXPECTED_JUMPS = 1e6


def substream(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator for ``(seed, *keys)``.

    Uses the counter-based Philox bit generator keyed through
    ``SeedSequence``, so per-path streams do not depend on execution order.
    """
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed) & (2**64 - 1), *map(int, keys)])))


@dataclass
class JointPath:
    grid: np.ndarray
    x: np.ndarray
    y: np.ndarray
    jump_index: np.ndarray
    jump_size: np.ndarray
    jump_mark: tuple
    w0_increments: np.ndarray
    w1_increments: np.ndarray
    ring_points: np.ndarray
    signal_jumps: list = field(default_factory=list)
    dt: float = 0.0

    @property
    def jump_times(self) -> np.ndarray:
        return self.grid[self.jump_index]

    @property
    def n_jumps(self) -> int:
        return len(self.jump_index)


@dataclass
class ObservationPath:
    grid: np.ndarray
    y: np.ndarray
    jump_index: np.ndarray
    jump_size: np.ndarray
    wtilde_increments: np.ndarray
    dt: float

    def __post_init__(self):
        if len(self.wtilde_increments) != len(self.grid) - 1:
            raise ValueError("need one wtilde increment per grid interval")
        if np.any(self.jump_size == 0):
            raise ValueError("observed jump sizes must be nonzero")

    @property
    def jump_times(self) -> np.ndarray:
        return self.grid[self.jump_index]

    @property
    def horizon(self) -> float:
        return float(self.grid[-1])

    def segments(self):
        """``(start, stop, jump_position)`` triples splitting the grid at jumps.

        Grid points ``start..stop`` contain no jump in their interior; when
        ``jump_position`` is not None a jump of size
        ``jump_size[jump_position]`` occurs at ``stop``.
        """
        start = 0
        for n, j in enumerate(self.jump_index):
            yield start, int(j), n
            start = int(j)
        yield start, len(self.grid) - 1, None

    def equals(self, other: ObservationPath) -> bool:
        return (
            np.array_equal(self.grid, other.grid)
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.jump_index, other.jump_index)
            and np.array_equal(self.jump_size, other.jump_size)
            and np.array_equal(self.wtilde_increments, other.wtilde_increments)
        )


def uniform_grid(horizon: float, dt: float) -> np.ndarray:
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    if dt > horizon:
        raise ValueError(f"dt={dt} exceeds the horizon {horizon}")
    k = int(math.ceil(horizon / dt - 1e-9))
    grid = np.arange(k + 1, dtype=float) * dt
    grid[-1] = horizon
    return grid


def _ring_times(rng: np.random.Generator, rate: float, horizon: float) -> np.ndarray:
    if rate <= 0:
        return np.empty(0)
    mean = rate * horizon
    chunk = int(mean + 6.0 * math.sqrt(mean) + 8)
    times = np.cumsum(rng.exponential(1.0 / rate, chunk))
    while times[-1] <= horizon:
        more = times[-1] + np.cumsum(rng.exponential(1.0 / rate, chunk))
        times = np.concatenate([times, more])
    return times[times <= horizon]


def _initial_state(sysm: JumpDiffusionSystem, rng: np.random.Generator) -> float:
    if sysm.prior is None:
        return float(sysm.x0)
    labels = np.asarray(list(sysm.prior.keys()), float)
    probs = np.asarray(list(sysm.prior.values()), float)
    return float(labels[rng.choice(len(labels), p=probs / probs.sum())])


def simulate_path(model, dt: float, seed: int, path_index: int = 0,
                  max_expected_jumps: float = MAX_EXPECTED_JUMPS) -> JointPath:
    """Simulate one joint path of ``(X, Y)`` on ``[0, T]``.

    Deterministic in ``(model, dt, seed, path_index)``.
    """
    sysm = model.as_system()
    T = sysm.horizon
    uniform = uniform_grid(T, dt)
    total_rate = sysm.marks.total
    if total_rate * T > max_expected_jumps:
        raise ValueError(f"expected mark count {total_rate * T:.3g} exceeds the cap {max_expected_jumps:.3g}")
    rng = substream(seed, path_index)
    x0 = _initial_state(sysm, rng)

    ring_t, ring_m = [], []
    for i, m in enumerate(sysm.marks.marks):
        ts = _ring_times(rng, sysm.marks.weight[m], T)
        ring_t.append(ts)
        ring_m.append(np.full(len(ts), i))
    ring_t = np.concatenate(ring_t) if ring_t else np.empty(0)
    ring_m = np.concatenate(ring_m).astype(int) if ring_m else np.empty(0, int)
    order = np.argsort(ring_t, kind="stable")
    ring_t, ring_m = ring_t[order], ring_m[order]

    grid = np.union1d(uniform, ring_t)
    ring_points = np.zeros(len(grid), bool)
    ring_pos = np.searchsorted(grid, ring_t)
    ring_points[ring_pos] = True
    ring_points[np.searchsorted(grid, uniform)] = False

    steps = np.diff(grid)
    root = np.sqrt(steps)
    dw0 = root * rng.standard_normal(len(steps))
    dwp = root * rng.standard_normal(len(steps))
    dw1 = sysm.rho * dw0 + math.sqrt(max(0.0, 1.0 - sysm.rho**2)) * dwp

    fast = sysm.pure_jump_signal and not getattr(sysm.b1, "depends_on_y", True) \
        and not getattr(sysm.sigma1, "depends_on_y", True) \
        and not any(getattr(k, "depends_on_y", True) for k in sysm.K1.values())
    marks = sysm.marks.marks
    H = set(sysm.H)
    jumps, signal_jumps = [], []

    if fast:
        x = np.empty(len(grid))
        cur, last = x0, 0
        for tau, pos, mi in zip(ring_t, ring_pos, ring_m):
            m = marks[mi]
            kx = float(sysm.k0(tau, cur, m))
            ky = float(sysm.k1(tau, cur, 0.0, m))
            x[last:pos] = cur
            last = pos
            if ky != 0.0:
                jumps.append((pos, ky, m))
            if kx != 0.0:
                signal_jumps.append((int(pos), float(tau), kx, m))
                cur = cur + kx
        x[last:] = cur
        t_left = grid[:-1]
        inc = np.asarray(sysm.b1(t_left, x[:-1], 0.0), float) * steps \
            + np.asarray(sysm.sigma1(t_left, 0.0, 0.0 * t_left), float) * dw1
        jump_add = np.zeros(len(grid))
        for pos, ky, _ in jumps:
            jump_add[pos] += ky
        y = np.empty(len(grid))
        y[0] = sysm.y0
        y[1:] = sysm.y0 + np.cumsum(inc + jump_add[1:])
    else:
        x = np.empty(len(grid))
        y = np.empty(len(grid))
        x[0], y[0] = x0, sysm.y0
        events = {}
        for pos, mi in zip(ring_pos, ring_m):
            events.setdefault(int(pos), []).append(marks[mi])
        for k in range(len(steps)):
            t = grid[k]
            xl = x[k] + sysm.b0(t, x[k]) * steps[k] + sysm.sigma0(t, x[k]) * dw0[k]
            yl = y[k] + sysm.b1(t, x[k], y[k]) * steps[k] + sysm.sigma1(t, 0.0, y[k]) * dw1[k]
            for m in events.get(k + 1, ()):
                tau = grid[k + 1]
                kx = float(sysm.k0(tau, xl, m))
                ky = float(sysm.k1(tau, xl, yl, m))
                if ky != 0.0:
                    jumps.append((k + 1, ky, m))
                if kx != 0.0:
                    signal_jumps.append((k + 1, float(tau), kx, m))
                xl, yl = xl + kx, yl + ky
            x[k + 1], y[k + 1] = xl, yl

    for _, ky, m in jumps:
        if ky not in H:
            raise ModelError(f"mark {m!r} produced jump size {ky} outside the admissible set {sorted(H)}")
    return JointPath(
        grid=grid, x=x, y=y,
        jump_index=np.array([j[0] for j in jumps], dtype=int),
        jump_size=np.array([j[1] for j in jumps], dtype=float),
        jump_mark=tuple(j[2] for j in jumps),
        w0_increments=dw0, w1_increments=dw1, ring_points=ring_points,
        signal_jumps=signal_jumps, dt=float(dt),
    )


def wtilde_increments(grid, y, jump_index, jump_size, model) -> np.ndarray:
    """``(dy - observed jumps) / sigma1(t_left, y_left)`` per interval."""
    sysm = model.as_system()
    sig = np.asarray(sysm.sigma1(grid, 0.0 * grid, y), float)
    if np.any(sig <= 0):
        k = int(np.argmax(sig <= 0))
        raise ModelError(f"sigma1 is not positive at t={grid[k]}, y={y[k]}")
    dy = np.diff(y)
    if len(jump_index):
        np.subtract.at(dy, np.asarray(jump_index) - 1, jump_size)
    return dy / sig[:-1]


def extract_observation(path: JointPath, model) -> ObservationPath:
    """Drop the signal, keeping the uniform grid plus observed jump times."""
    keep = ~path.ring_points.copy()
    keep[path.jump_index] = True
    keep[0] = keep[-1] = True
    new_index = np.cumsum(keep) - 1
    grid = path.grid[keep]
    y = path.y[keep]
    jidx = new_index[path.jump_index].astype(int)
    return ObservationPath(
        grid=grid, y=y, jump_index=jidx, jump_size=path.jump_size.copy(),
        wtilde_increments=wtilde_increments(grid, y, jidx, path.jump_size, model),
        dt=path.dt,
    )


def coarsen(obs: ObservationPath, factor: int, model) -> ObservationPath:
    """Observation at ``factor * dt``: keep multiples of the coarse step and jump times."""
    if factor < 1:
        raise ValueError("factor must be >= 1")
    step = obs.dt * factor
    ratio = obs.grid / step
    keep = np.abs(ratio - np.round(ratio)) <= 1e-9 * max(1.0, float(np.max(ratio)))
    keep[obs.jump_index] = True
    keep[0] = keep[-1] = True
    new_index = np.cumsum(keep) - 1
    grid, y = obs.grid[keep], obs.y[keep]
    jidx = new_index[obs.jump_index].astype(int)
    return ObservationPath(grid, y, jidx, obs.jump_size.copy(),
                           wtilde_increments(grid, y, jidx, obs.jump_size, model), step)


# ---------------------------------------------------------------------------
# CSV IO


class ObservationFormatError(ValueError):
    pass


def fmt(v: float) -> str:
    return format(float(v), ".17g")


def jumps_path_for(path: Path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + "_jumps.csv")


def _write_rows(path: Path, header, rows, manifest: str | None):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if manifest:
            fh.write(f"# {manifest}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def save_observation(obs: ObservationPath, path, manifest: str | None = None) -> tuple[Path, Path]:
    path = Path(path)
    jpath = jumps_path_for(path)
    _write_rows(path, ["t", "y"], ([fmt(t), fmt(y)] for t, y in zip(obs.grid, obs.y)), manifest)
    _write_rows(jpath, ["n", "t_jump", "z"],
                ([str(n), fmt(obs.grid[j]), fmt(z)] for n, (j, z) in enumerate(zip(obs.jump_index, obs.jump_size))),
                manifest)
    return path, jpath


def save_joint_path(path: JointPath, file, manifest: str | None = None) -> Path:
    file = Path(file)
    _write_rows(file, ["t", "x", "y"], ([fmt(t), fmt(x), fmt(y)] for t, x, y in zip(path.grid, path.x, path.y)), manifest)
    return file


def _read_table(path: Path, header: list[str]):
    rows = []
    with open(path, encoding="utf-8", newline="") as fh:
        seen_header = False
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = [p.strip() for p in line.split(",")]
            if not seen_header:
                if parts != header:
                    raise ObservationFormatError(f"{path}:{lineno}: expected header {','.join(header)}, got {line}")
                seen_header = True
                continue
            if len(parts) != len(header):
                raise ObservationFormatError(f"{path}:{lineno}: expected {len(header)} fields, got {len(parts)}")
            try:
                rows.append((lineno, [float(p) for p in parts]))
            except ValueError:
                raise ObservationFormatError(f"{path}:{lineno}: non-numeric field in {line!r}") from None
    if not seen_header:
        raise ObservationFormatError(f"{path}: missing header {','.join(header)}")
    return rows


def load_observation(path, model, jumps_path=None, dt: float | None = None) -> ObservationPath:
    """Read an observation CSV (``t,y``) and its jump table (``n,t_jump,z``)."""
    path = Path(path)
    jumps_path = Path(jumps_path) if jumps_path is not None else jumps_path_for(path)
    rows = _read_table(path, ["t", "y"])
    if len(rows) < 2:
        raise ObservationFormatError(f"{path}: need at least two grid points")
    grid = np.array([r[1][0] for r in rows])
    y = np.array([r[1][1] for r in rows])
    for (lineno, _), step in zip(rows[1:], np.diff(grid)):
        if not step > 0:
            raise ObservationFormatError(f"{path}:{lineno}: grid is not strictly increasing")
    H = set(model.as_system().H)
    jidx, jsize = [], []
    for lineno, (n, tj, z) in _read_table(jumps_path, ["n", "t_jump", "z"]):
        if z == 0.0:
            raise ObservationFormatError(f"{jumps_path}:{lineno}: jump size must be nonzero")
        if z not in H:
            raise ObservationFormatError(f"{jumps_path}:{lineno}: jump size {z} not admissible {sorted(H)}")
        k = int(np.searchsorted(grid, tj))
        if k >= len(grid) or grid[k] != tj or k == 0:
            raise ObservationFormatError(f"{jumps_path}:{lineno}: jump time {tj!r} is not an interior grid point")
        if jidx and k <= jidx[-1]:
            raise ObservationFormatError(f"{jumps_path}:{lineno}: jump times must be strictly increasing")
        jidx.append(k)
        jsize.append(z)
    jidx = np.array(jidx, dtype=int)
    jsize = np.array(jsize, dtype=float)
    if dt is None:
        dt = float(np.max(np.diff(grid)))
    return ObservationPath(grid, y, jidx, jsize, wtilde_increments(grid, y, jidx, jsize, model), dt)
