"""Gated PINN training loop with per-loss gradients and step-level traces."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable, NamedTuple

import numpy as np

from . import net, seir
from .exceptions import ConfigError, NumericalError, ParseError
from .losses import data_loss, logic_loss, ode_loss
from .seir import CollocationGrid, Dataset, SeirParams
from .tape import Tape
from .weighting import (
    GateState,
    GradientDiagnostics,
    cggs_update,
    combine,
    diagnostics,
    fixed_update,
    lra_update,
)

__all__ = [
    "STRATEGIES",
    "TRACE_COLUMNS",
    "TrainConfig",
    "TrainInputs",
    "TraceRecord",
    "TrainTrace",
    "GradientDescent",
    "Adam",
    "compute_gradients",
    "train_step",
    "run",
    "make_inputs",
]

log = logging.getLogger(__name__)

STRATEGIES = ("fixed", "lra", "cggs")
OPTIMIZERS = ("gd", "adam")
TRACE_COLUMNS = (
    "step", "l_data", "l_ode", "l_logic", "lambda_hat", "s_cos",
    "norm_data", "norm_phy", "descent_inner", "d_norm",
)


@dataclass(frozen=True)
class TrainConfig:
    strategy: str = "cggs"
    lambda_phy: float = 1.0
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    steps: int = 2000
    seed: int = 0
    layer_sizes: tuple[int, ...] = net.DEFAULT_LAYERS
    n_collocation: int = 200
    t_horizon: float = 100.0
    # days per unit of network input; T/4 resolves the ~10-day epidemic peak
    time_scale: float = 25.0
    alpha: float = 0.9
    kappa: float = 5.0
    epsilon: float = 1e-8
    lambda_logic: float = 1.0
    lambda_hat0: float = 1.0
    inverse_mode: bool = False
    # replaces sigmoid(kappa * s_cos) in the cggs update when set
    force_gate: float | None = None

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}; choose one of {', '.join(STRATEGIES)}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"unknown optimizer {self.optimizer!r}; choose one of {', '.join(OPTIMIZERS)}")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if int(self.steps) < 1:
            raise ConfigError("steps must be >= 1")
        object.__setattr__(self, "layer_sizes", tuple(int(s) for s in self.layer_sizes))
        self.gate_state()

    def gate_state(self) -> GateState:
        lam0 = self.lambda_phy if self.strategy == "fixed" else self.lambda_hat0
        return GateState(lam0, self.alpha, self.kappa, self.epsilon, self.lambda_logic)

    def theory(self) -> "TrainConfig":
        """Instantaneous weight and plain gradient descent."""
        return replace(self, alpha=0.0, optimizer="gd")

    @property
    def is_theory_mode(self) -> bool:
        return self.alpha == 0.0 and self.optimizer == "gd"


class TrainInputs(NamedTuple):
    dataset: Dataset
    grid: CollocationGrid
    seir: SeirParams


class Rates(NamedTuple):
    beta: object
    sigma: object
    gamma: object


def make_inputs(
    config: TrainConfig,
    seir_params: SeirParams | None = None,
    dataset: Dataset | None = None,
    n_points: int = 20,
    noise_sigma: float = 0.05,
    data_seed: int | None = None,
) -> TrainInputs:
    seir_params = seir_params or SeirParams()
    if dataset is None:
        truth = seir.rk4_simulate(seir_params, t_end=config.t_horizon)
        dataset = seir.generate_dataset(truth, n_points, noise_sigma, config.seed if data_seed is None else data_seed)
    grid = seir.collocation_grid(config.t_horizon, config.n_collocation)
    return TrainInputs(dataset, grid, seir_params)


def softplus_inv(x) -> np.ndarray:
    x = np.asarray(x, float)
    return x + np.log(-np.expm1(-x))


def _softplus(x) -> np.ndarray:
    return np.logaddexp(0.0, np.asarray(x, float))


@dataclass(frozen=True)
class TraceRecord:
    step: int
    l_data: float
    l_ode: float
    l_logic: float
    lambda_hat: float
    s_cos: float
    norm_data: float
    norm_phy: float
    descent_inner: float
    d_norm: float
    # not exported to CSV; l_logic == 0 implies a zero logic gradient
    norm_logic: float = float("nan")

    def logic_inactive(self, tol: float = 1e-12) -> bool:
        if math.isnan(self.norm_logic):
            return self.l_logic == 0.0
        return self.norm_logic < tol


@dataclass
class TrainTrace:
    records: list[TraceRecord] = field(default_factory=list)
    params: net.NetworkParams | None = None
    rates: dict[str, float] | None = None
    config: TrainConfig | None = None

    def __len__(self) -> int:
        return len(self.records)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records], dtype=float)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TRACE_COLUMNS)
            for r in self.records:
                w.writerow([str(r.step)] + [repr(float(getattr(r, c))) for c in TRACE_COLUMNS[1:]])

    @classmethod
    def from_csv(cls, path) -> "TrainTrace":
        try:
            with open(path, newline="") as fh:
                rows = list(csv.reader(fh))
        except OSError as exc:
            raise ParseError(f"cannot read {path}: {exc}") from exc
        if not rows or tuple(h.strip() for h in rows[0]) != TRACE_COLUMNS:
            raise ParseError(f"{path}: missing or wrong trace header")
        records = []
        for lineno, row in enumerate(rows[1:], start=2):
            if not row:
                continue
            if len(row) != len(TRACE_COLUMNS):
                raise ParseError(f"{path}:{lineno}: expected {len(TRACE_COLUMNS)} fields")
            try:
                records.append(TraceRecord(int(row[0]), *(float(x) for x in row[1:])))
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from exc
        if [r.step for r in records] != list(range(len(records))):
            raise ParseError(f"{path}: step indices are not contiguous from 0")
        return cls(records)


class GradientDescent:
    def __init__(self, learning_rate: float):
        self.learning_rate = learning_rate

    def step(self, theta: np.ndarray, d: np.ndarray) -> np.ndarray:
        return theta - self.learning_rate * d


class Adam:
    def __init__(self, learning_rate=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.learning_rate, self.beta1, self.beta2, self.eps = learning_rate, beta1, beta2, eps
        self.m = self.v = None
        self.t = 0

    def step(self, theta: np.ndarray, d: np.ndarray) -> np.ndarray:
        if self.m is None:
            self.m, self.v = np.zeros_like(theta), np.zeros_like(theta)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * d
        self.v = self.beta2 * self.v + (1 - self.beta2) * d * d
        m_hat = self.m / (1 - self.beta1 ** self.t)
        v_hat = self.v / (1 - self.beta2 ** self.t)
        return theta - self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(config: TrainConfig):
    if config.optimizer == "gd":
        return GradientDescent(config.learning_rate)
    return Adam(config.learning_rate, config.adam_beta1, config.adam_beta2, config.adam_eps)


def compute_gradients(
    params: net.NetworkParams,
    inputs: TrainInputs,
    epsilon: float = 1e-8,
    raw_rates: np.ndarray | None = None,
    tape_factory: Callable[[], Tape] = Tape,
) -> tuple[GradientDiagnostics, tuple[float, float, float]]:
    """Per-loss gradients from three independently built graphs.

    With ``raw_rates`` the softplus-parameterized (beta, sigma, gamma) are
    appended to the parameter vector.
    """
    def build(loss_fn):
        tape = tape_factory()
        theta = tape.var(params.theta)
        rates = None
        if raw_rates is not None:
            raw = tape.var(raw_rates)
            pos = raw.softplus()
            rates = Rates(pos[0], pos[1], pos[2])
        root = loss_fn(tape, theta, rates)
        return float(root.value), tape.backward(root)

    l_data, g_data = build(lambda tp, th, _: data_loss(params, tp, inputs.dataset, th))
    l_ode, g_phy = build(lambda tp, th, rt: ode_loss(params, tp, inputs.grid, rt or inputs.seir, th))
    l_logic, g_logic = build(lambda tp, th, _: logic_loss(params, tp, inputs.grid, th))
    return diagnostics(g_data, g_phy, g_logic, epsilon), (l_data, l_ode, l_logic)


_UPDATES = {"fixed": fixed_update, "lra": lra_update}


def update_weight(state: GateState, diag: GradientDiagnostics, config: TrainConfig) -> GateState:
    if config.strategy == "cggs":
        return cggs_update(state, diag, config.force_gate)
    return _UPDATES[config.strategy](state, diag)


def train_step(params, state, config, inputs, optimizer=None, step=0, raw_rates=None, gradient_fn=None):
    """One iteration: gradients, weight update, combine, optimizer step.

    Returns ``(params', state', record)``, plus the new raw rates as a fourth
    element in inverse mode. ``gradient_fn`` replaces ``compute_gradients``
    (same signature) for synthetic-gradient experiments.
    """
    optimizer = optimizer or make_optimizer(config)
    gradient_fn = gradient_fn or compute_gradients
    diag, (l_data, l_ode, l_logic) = gradient_fn(params, inputs, config.epsilon, raw_rates)
    if not all(np.all(np.isfinite(g)) for g in (diag.g_data, diag.g_phy, diag.g_logic)):
        raise NumericalError(
            f"non-finite gradient at step {step}: l_data={l_data!r} l_ode={l_ode!r} l_logic={l_logic!r}"
        )
    state = update_weight(state, diag, config)
    d = combine(diag, state)
    record = TraceRecord(
        step, l_data, l_ode, l_logic, state.lambda_hat, diag.s_cos,
        diag.norm_data, diag.norm_phy, float(np.dot(d, diag.g_data)),
        float(np.linalg.norm(d)), diag.norm_logic,
    )
    if not np.all(np.isfinite(d)):
        raise NumericalError(f"non-finite update direction at step {step}: {asdict(record)}")
    full = params.theta if raw_rates is None else np.concatenate([params.theta, raw_rates])
    full = optimizer.step(full, d)
    new_params = params.with_theta(full[: params.size])
    if raw_rates is None:
        return new_params, state, record
    return new_params, state, record, full[params.size:]


def run(
    config: TrainConfig,
    inputs: TrainInputs | None = None,
    params: net.NetworkParams | None = None,
    initial_rates: tuple[float, float, float] | None = None,
    callback: Callable[[TraceRecord], None] | None = None,
) -> TrainTrace:
    """Full training run; deterministic for a fixed config and inputs."""
    inputs = inputs or make_inputs(config)
    params = params or net.init(config.layer_sizes, config.seed, config.time_scale)
    state = config.gate_state()
    optimizer = make_optimizer(config)
    raw_rates = None
    if config.inverse_mode:
        start = initial_rates or (inputs.seir.beta, inputs.seir.sigma, inputs.seir.gamma)
        raw_rates = softplus_inv(start)
    trace = TrainTrace(config=config)
    for step in range(int(config.steps)):
        out = train_step(params, state, config, inputs, optimizer, step, raw_rates)
        if raw_rates is None:
            params, state, record = out
        else:
            params, state, record, raw_rates = out
        trace.records.append(record)
        if callback is not None:
            callback(record)
    trace.params = params
    if raw_rates is not None:
        trace.rates = dict(zip(("beta", "sigma", "gamma"), map(float, _softplus(raw_rates))))
    log.debug("run finished: strategy=%s steps=%d final l_data=%.3e",
              config.strategy, len(trace), trace.records[-1].l_data)
    return trace


def config_from_dict(doc: dict) -> TrainConfig:
    known = {f.name for f in fields(TrainConfig)}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown train options: {', '.join(sorted(unknown))}")
    return TrainConfig(**doc)
