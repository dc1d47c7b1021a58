"""SEIR ground truth, the PINN residual, and observation datasets.

All compartments are fractions of the total population, so the incidence term
``beta * S * I / N`` becomes ``beta * s * i``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterator, NamedTuple

import numpy as np

from .exceptions import ConfigError, NumericalError, ParseError, ValidationError

__all__ = [
    "SeirParams",
    "SeirState",
    "Trajectory",
    "Dataset",
    "CollocationGrid",
    "DEFAULT_INIT",
    "rhs",
    "rk4_simulate",
    "residual",
    "generate_dataset",
    "collocation_grid",
    "load_dataset",
    "save_dataset",
    "save_trajectory",
    "load_trajectory",
]


@dataclass(frozen=True)
class SeirParams:
    N: float = 1000.0
    beta: float = 1.0
    sigma: float = 0.2
    gamma: float = 0.14

    def __post_init__(self):
        if not self.N > 0:
            raise ConfigError("population N must be positive")
        for name in ("beta", "sigma", "gamma"):
            v = getattr(self, name)
            if not (v >= 0 and math.isfinite(v)):
                raise ConfigError(f"{name} must be a finite non-negative rate, got {v}")


class SeirState(NamedTuple):
    t: float
    s: float
    e: float
    i: float
    r: float


DEFAULT_INIT = SeirState(0.0, 0.999, 0.0, 0.001, 0.0)


@dataclass(frozen=True)
class Trajectory:
    """RK4 output on a uniform time grid; ``states[k] = (s, e, i, r)`` at ``t[k]``."""

    t: np.ndarray
    states: np.ndarray
    params: SeirParams

    def __len__(self) -> int:
        return len(self.t)

    def __iter__(self) -> Iterator[SeirState]:
        for tk, row in zip(self.t, self.states):
            yield SeirState(float(tk), *map(float, row))

    @property
    def i(self) -> np.ndarray:
        return self.states[:, 2]

    def derivatives(self) -> np.ndarray:
        return rhs(self.states, self.params)


@dataclass
class Dataset:
    t: np.ndarray
    i_obs: np.ndarray
    noise_sigma: float = 0.0
    seed: int | None = None

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float)
        self.i_obs = np.asarray(self.i_obs, dtype=float)

    def __len__(self) -> int:
        return len(self.t)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return np.array_equal(self.t, other.t) and np.array_equal(self.i_obs, other.i_obs)

    @property
    def observations(self) -> list[tuple[float, float]]:
        return list(zip(self.t.tolist(), self.i_obs.tolist()))

    def validate(self, t_horizon: float | None = None) -> "Dataset":
        if self.t.shape != self.i_obs.shape or self.t.ndim != 1:
            raise ValidationError("t and i_obs must be 1-d arrays of equal length")
        if not (np.all(np.isfinite(self.t)) and np.all(np.isfinite(self.i_obs))):
            raise ValidationError("dataset contains non-finite values")
        if np.any(np.diff(self.t) <= 0):
            raise ValidationError("observation times must be strictly increasing")
        if len(self.t) and (self.t[0] < 0 or (t_horizon is not None and self.t[-1] > t_horizon)):
            raise ValidationError(f"observation times must lie in [0, {t_horizon}]")
        return self


@dataclass(frozen=True)
class CollocationGrid:
    points: np.ndarray = field(repr=False)
    spacing: float

    def __len__(self) -> int:
        return len(self.points)


def collocation_grid(t_horizon: float = 100.0, n_points: int = 200) -> CollocationGrid:
    if n_points < 2:
        raise ConfigError("collocation grid needs at least 2 points")
    return CollocationGrid(np.linspace(0.0, t_horizon, n_points), t_horizon / (n_points - 1))


def rhs(states: np.ndarray, params: SeirParams) -> np.ndarray:
    s, e, i, r = np.moveaxis(np.asarray(states, dtype=float), -1, 0)
    infection = params.beta * s * i
    incubation = params.sigma * e
    recovery = params.gamma * i
    return np.stack(
        [-infection, infection - incubation, incubation - recovery, recovery], axis=-1
    )


def rk4_simulate(
    params: SeirParams,
    init: SeirState = DEFAULT_INIT,
    t_end: float = 100.0,
    dt: float = 0.1,
) -> Trajectory:
    """Classical fourth-order Runge-Kutta on the grid ``0, dt, 2 dt, ...``."""
    if not dt > 0:
        raise ConfigError("dt must be positive")
    y = np.array(init[1:], dtype=float)
    if np.any(y < 0) or abs(y.sum() - 1.0) > 1e-12:
        raise ConfigError("initial compartments must be non-negative and sum to 1")
    n = int(round((t_end - init.t) / dt))
    out = np.empty((n + 1, 4))
    out[0] = y
    for k in range(n):
        k1 = rhs(y, params)
        k2 = rhs(y + 0.5 * dt * k1, params)
        k3 = rhs(y + 0.5 * dt * k2, params)
        k4 = rhs(y + dt * k3, params)
        y = y + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if np.any(y < -1e-9) or np.any(y > 1 + 1e-9) or not np.all(np.isfinite(y)):
            raise NumericalError(f"state left [0, 1] at step {k + 1}: {y}")
        out[k + 1] = y
    t = init.t + dt * np.arange(n + 1)
    return Trajectory(t, out, params)


def residual(u, du_dt, params):
    """Residual of the normalized SEIR system.

    ``u`` and ``du_dt`` are 4-sequences of tape nodes or arrays; ``params``
    needs ``beta``, ``sigma`` and ``gamma`` attributes (floats or tape nodes).
    """
    s, e, i, r = u
    ds, de, di, dr = du_dt
    infection = params.beta * s * i
    return (
        ds + infection,
        de - infection + params.sigma * e,
        di - params.sigma * e + params.gamma * i,
        dr - params.gamma * i,
    )


def generate_dataset(
    trajectory: Trajectory, n_points: int = 20, noise_sigma: float = 0.05, seed: int = 0
) -> Dataset:
    """Sample noisy infected fractions at distinct grid times."""
    if n_points > len(trajectory):
        raise ConfigError("more observations requested than trajectory points")
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(len(trajectory), size=n_points, replace=False))
    noise = rng.normal(0.0, noise_sigma, size=n_points) if noise_sigma > 0 else np.zeros(n_points)
    return Dataset(trajectory.t[idx].copy(), trajectory.i[idx] + noise, noise_sigma, seed)


def _fmt(x: float) -> str:
    return repr(float(x))


def save_dataset(dataset: Dataset, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "i_obs"])
        for tk, ik in zip(dataset.t, dataset.i_obs):
            w.writerow([_fmt(tk), _fmt(ik)])


def _read_numeric_csv(path, header: list[str]) -> np.ndarray:
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc}") from exc
    if not rows:
        raise ParseError(f"{path} is empty")
    if [h.strip() for h in rows[0]] != header:
        raise ParseError(f"{path}: expected header {','.join(header)}, got {','.join(rows[0])}")
    data = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise ParseError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        try:
            data.append([float(x) for x in row])
        except ValueError as exc:
            raise ParseError(f"{path}:{lineno}: {exc}") from exc
    if not data:
        raise ParseError(f"{path} has no data rows")
    return np.array(data, dtype=float)


def load_dataset(path, t_horizon: float | None = 100.0) -> Dataset:
    arr = _read_numeric_csv(path, ["t", "i_obs"])
    return Dataset(arr[:, 0], arr[:, 1]).validate(t_horizon)


def save_trajectory(trajectory: Trajectory, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "s", "e", "i", "r"])
        for tk, row in zip(trajectory.t, trajectory.states):
            w.writerow([_fmt(tk), *map(_fmt, row)])


def load_trajectory(path, params: SeirParams | None = None) -> Trajectory:
    arr = _read_numeric_csv(path, ["t", "s", "e", "i", "r"])
    return Trajectory(arr[:, 0], arr[:, 1:], params or SeirParams())
