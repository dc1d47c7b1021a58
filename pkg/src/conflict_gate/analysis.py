"""Runtime checks of the gate's descent and rate guarantees, plus run metrics."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import net
from .exceptions import ModeError, NumericalError
from .seir import Trajectory
from .trainer import TraceRecord, TrainConfig, TrainInputs, TrainTrace, compute_gradients
from .weighting import GateState, cggs_update, combine, diagnostics, gate

__all__ = [
    "DescentConstants",
    "DeadlockReport",
    "Verdict",
    "ExperimentMetrics",
    "compute_m_kappa",
    "m_kappa_grid",
    "deadlock_demo",
    "verify_trace",
    "estimate_smoothness",
    "data_gradient_fn",
    "theory_learning_rate",
    "ToyProblem",
    "run_toy",
    "peak_errors",
    "experiment_metrics",
    "EARLY_WINDOW",
    "LATE_WINDOW",
]

_INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0

# lambda_hat phase windows (step ranges, end exclusive)
EARLY_WINDOW = (0, 250)
LATE_WINDOW = (400, 601)


def _interference(s: float, kappa: float) -> float:
    # s * sigmoid(-kappa s), written to avoid overflow for large kappa * s
    z = kappa * s
    return s * math.exp(-z) / (1.0 + math.exp(-z)) if z > 0 else s / (1.0 + math.exp(z))


@dataclass(frozen=True)
class DescentConstants:
    kappa: float
    m_kappa: float
    s_star: float

    @property
    def c(self) -> float:
        return 1.0 - self.m_kappa


def compute_m_kappa(kappa: float, tol: float = 1e-10) -> DescentConstants:
    """Worst-case interference ``max_{s in [0,1]} s / (1 + exp(kappa s))``.

    Golden-section search; the objective is unimodal on [0, 1] for every
    kappa >= 0.
    """
    if kappa < 0:
        raise ValueError("kappa must be non-negative")
    a, b = 0.0, 1.0
    x1, x2 = b - _INV_PHI * (b - a), a + _INV_PHI * (b - a)
    f1, f2 = _interference(x1, kappa), _interference(x2, kappa)
    while b - a > tol:
        if f1 < f2:
            a, x1, f1 = x1, x2, f2
            x2 = a + _INV_PHI * (b - a)
            f2 = _interference(x2, kappa)
        else:
            b, x2, f2 = x2, x1, f1
            x1 = b - _INV_PHI * (b - a)
            f1 = _interference(x1, kappa)
    s = 0.5 * (a + b)
    # the maximum may sit on the right boundary (small kappa)
    if _interference(1.0, kappa) >= _interference(s, kappa):
        s = 1.0
    return DescentConstants(kappa, _interference(s, kappa), s)


def m_kappa_grid(kappa: float, n: int = 10**6) -> DescentConstants:
    """Brute-force grid scan of the same maximum (cross-check)."""
    s = np.linspace(0.0, 1.0, n + 1)
    f = s * 0.5 * (1.0 - np.tanh(0.5 * kappa * s))
    k = int(np.argmax(f))
    return DescentConstants(kappa, float(f[k]), float(s[k]))


@dataclass(frozen=True)
class DeadlockReport:
    c: float
    kappa: float
    dim: int
    lambda_std: float
    g_data_norm: float
    fixed_update_norm: float
    pareto_alpha: float
    pareto_residual_norm: float
    cggs_update_norm: float
    cggs_deviation: float
    suppression_bound: float

    @property
    def fixed_stalls(self) -> bool:
        return self.fixed_update_norm <= 1e-12 * self.g_data_norm

    @property
    def pareto_stationary(self) -> bool:
        return self.pareto_residual_norm <= 1e-12 * self.g_data_norm

    @property
    def cggs_escapes(self) -> bool:
        return self.cggs_deviation <= self.suppression_bound * (1 + 1e-12)

    @property
    def passed(self) -> bool:
        return self.fixed_stalls and self.pareto_stationary and self.cggs_escapes

    def to_dict(self) -> dict:
        out = asdict(self)
        out.update(fixed_stalls=self.fixed_stalls, pareto_stationary=self.pareto_stationary,
                   cggs_escapes=self.cggs_escapes, passed=self.passed)
        return out


def deadlock_demo(c: float, kappa: float = 5.0, dim: int = 100, seed: int = 0,
                  epsilon: float = 1e-8) -> DeadlockReport:
    """Anti-parallel gradients ``g_data = -c g_phy`` under fixed and gated weights."""
    if not c > 0:
        raise ValueError("c must be positive")
    rng = np.random.default_rng(seed)
    g_phy = rng.normal(size=dim)
    g_data = -c * g_phy
    zeros = np.zeros(dim)
    nd, np_ = float(np.linalg.norm(g_data)), float(np.linalg.norm(g_phy))

    lambda_std = nd / np_
    fixed = combine(diagnostics(g_data, g_phy, zeros, epsilon),
                    GateState(lambda_hat=lambda_std, alpha=0.0, kappa=kappa, epsilon=epsilon, lambda_logic=0.0))
    alpha = 1.0 / (1.0 + c)
    pareto = alpha * g_data + (1.0 - alpha) * g_phy

    diag = diagnostics(g_data, g_phy, zeros, epsilon)
    state = cggs_update(GateState(alpha=0.0, kappa=kappa, epsilon=epsilon, lambda_logic=0.0), diag)
    d = combine(diag, state)
    return DeadlockReport(
        c=c, kappa=kappa, dim=dim, lambda_std=lambda_std, g_data_norm=nd,
        fixed_update_norm=float(np.linalg.norm(fixed)),
        pareto_alpha=alpha, pareto_residual_norm=float(np.linalg.norm(pareto)),
        cggs_update_norm=float(np.linalg.norm(d)),
        cggs_deviation=float(np.linalg.norm(d - g_data)),
        suppression_bound=gate(-1.0, kappa) * nd,
    )


@dataclass
class Verdict:
    m_kappa: float
    checked_steps: int = 0
    # steps where ||g_data|| ||g_phy|| < epsilon distorts the gate's cosine
    regularized_steps: int = 0
    descent_violations: list[int] = field(default_factory=list)
    step_bound_violations: list[int] = field(default_factory=list)
    theorem_lhs: float | None = None
    theorem_bound: float | None = None
    g_hat: float | None = None

    @property
    def descent_pass_rate(self) -> float:
        if not self.checked_steps:
            return float("nan")
        bad = set(self.descent_violations) | set(self.step_bound_violations)
        return 1.0 - len(bad) / self.checked_steps

    @property
    def descent_ok(self) -> bool:
        return not self.descent_violations and not self.step_bound_violations

    @property
    def theorem_ok(self) -> bool | None:
        if self.theorem_bound is None:
            return None
        return self.theorem_lhs <= self.theorem_bound

    @property
    def passed(self) -> bool:
        return self.descent_ok and self.theorem_ok is not False

    def to_dict(self) -> dict:
        return {
            "m_kappa": self.m_kappa,
            "checked_steps": self.checked_steps,
            "regularized_steps": self.regularized_steps,
            "descent_pass_rate": self.descent_pass_rate,
            "descent_violations": self.descent_violations,
            "step_bound_violations": self.step_bound_violations,
            "theorem_lhs": self.theorem_lhs,
            "theorem_bound": self.theorem_bound,
            "theorem_pass": self.theorem_ok,
            "g_hat": self.g_hat,
            "passed": self.passed,
        }


VERIFY_MODES = ("descent", "theorem", "all")


def verify_trace(
    trace: TrainTrace,
    constants: DescentConstants,
    mode: str = "all",
    learning_rate: float | None = None,
    rtol: float = 1e-12,
) -> Verdict:
    """Check the per-step descent inequality and the summed rate envelope.

    Descent is checked on steps whose logic gradient vanishes and whose
    gradient-norm product exceeds the cosine regularizer (below it the gate
    sees a cosine shrunk towards zero). The rate envelope uses the observed
    minimum data loss in place of its infimum. ``rtol`` absorbs
    floating-point rounding in the inner products only.
    """
    if mode not in VERIFY_MODES:
        raise ValueError(f"mode must be one of {VERIFY_MODES}")
    cfg = trace.config
    if cfg is not None and cfg.strategy != "cggs":
        raise ModeError(f"the descent guarantee covers the gated update only, not {cfg.strategy!r}")
    if cfg is not None and cfg.alpha != 0.0:
        raise ModeError("descent and rate checks need the instantaneous weight (alpha = 0)")
    if mode != "descent" and cfg is not None and cfg.optimizer != "gd":
        raise ModeError("the rate envelope only applies to plain gradient descent")
    verdict = Verdict(constants.m_kappa)
    records = trace.records
    if records:
        verdict.g_hat = max(max(r.norm_data, r.norm_phy) for r in records)
    c = constants.c
    epsilon = cfg.epsilon if cfg is not None else 1e-8
    for r in records:
        if not r.logic_inactive():
            continue
        if r.norm_data * r.norm_phy < epsilon:
            verdict.regularized_steps += 1
            continue
        verdict.checked_steps += 1
        sq = r.norm_data ** 2
        floor = sq if r.s_cos >= 0 else c * sq
        if r.descent_inner < floor - rtol * sq:
            verdict.descent_violations.append(r.step)
        if r.d_norm > 2.0 * r.norm_data * (1 + rtol):
            verdict.step_bound_violations.append(r.step)
    if mode in ("theorem", "all") and records:
        eta = learning_rate if learning_rate is not None else (cfg.learning_rate if cfg else None)
        if eta is None:
            raise ModeError("rate envelope needs the learning rate")
        l_data = np.array([r.l_data for r in records])
        verdict.theorem_lhs = float(min(r.norm_data ** 2 for r in records))
        verdict.theorem_bound = float(2.0 * (l_data[0] - l_data.min()) / (c * eta * len(records)))
    return verdict


def estimate_smoothness(grad_fn: Callable[[np.ndarray], np.ndarray], theta0, n_pairs: int = 100,
                        radius: float = 1e-3, seed: int = 0) -> float:
    """Largest gradient-difference ratio over probe pairs near ``theta0``.

    The first probe direction is random; each later one is the normalized
    gradient difference of the previous pair, so the probes follow a power
    iteration towards the stiffest direction instead of averaging over it.
    """
    theta0 = np.asarray(theta0, float)
    rng = np.random.default_rng(seed)
    g0 = grad_fn(theta0)
    direction = rng.normal(size=theta0.shape)
    best = 0.0
    for _ in range(n_pairs):
        direction /= np.linalg.norm(direction)
        step = radius * direction
        diff = grad_fn(theta0 + step) - g0
        best = max(best, float(np.linalg.norm(diff) / radius))
        if np.linalg.norm(diff) > 0:
            direction = diff.copy()
        else:
            direction = rng.normal(size=theta0.shape)
    return best


def data_gradient_fn(params: net.NetworkParams, inputs: TrainInputs) -> Callable[[np.ndarray], np.ndarray]:
    def grad(theta):
        diag, _ = compute_gradients(params.with_theta(theta), inputs)
        return diag.g_data
    return grad


def theory_learning_rate(params: net.NetworkParams, inputs: TrainInputs, kappa: float = 5.0,
                         n_pairs: int = 100, seed: int = 0) -> tuple[float, float]:
    """Step size ``c / (4 L_hat)`` and the curvature estimate behind it."""
    l_hat = estimate_smoothness(data_gradient_fn(params, inputs), params.theta, n_pairs, seed=seed)
    return compute_m_kappa(kappa).c / (4.0 * l_hat), l_hat


@dataclass(frozen=True)
class ToyProblem:
    """Two-parameter objective with a known smoothness constant.

    data loss ``x^2 / 2 + (1 - cos 2y) / 2`` (non-convex in y, L = 2, infimum 0)
    and a physics loss ``|theta - anchor|^2 / 2`` pulling elsewhere.
    """

    anchor: tuple[float, float] = (-2.0, 1.0)
    smoothness: float = 2.0

    def data_loss(self, theta) -> float:
        x, y = theta
        return 0.5 * x * x + 0.5 * (1.0 - math.cos(2.0 * y))

    def data_grad(self, theta) -> np.ndarray:
        x, y = theta
        return np.array([x, math.sin(2.0 * y)])

    def phy_loss(self, theta) -> float:
        return 0.5 * float(np.sum((np.asarray(theta) - self.anchor) ** 2))

    def phy_grad(self, theta) -> np.ndarray:
        return np.asarray(theta, float) - np.asarray(self.anchor)


def run_toy(problem: ToyProblem | None = None, theta0=(3.0, 1.2), steps: int = 200,
            kappa: float = 5.0, learning_rate: float | None = None) -> TrainTrace:
    """Gated gradient descent (alpha = 0) on the toy objective."""
    problem = problem or ToyProblem()
    eta = learning_rate or compute_m_kappa(kappa).c / (4.0 * problem.smoothness)
    config = TrainConfig(strategy="cggs", optimizer="gd", learning_rate=eta, steps=steps,
                         alpha=0.0, kappa=kappa, lambda_logic=0.0)
    state = config.gate_state()
    theta = np.asarray(theta0, float)
    trace = TrainTrace(config=config)
    for step in range(steps):
        diag = diagnostics(problem.data_grad(theta), problem.phy_grad(theta), np.zeros(2), config.epsilon)
        state = cggs_update(state, diag)
        d = combine(diag, state)
        if not np.all(np.isfinite(d)):
            raise NumericalError(f"toy run diverged at step {step} (learning rate {eta})")
        trace.records.append(TraceRecord(
            step, problem.data_loss(theta), problem.phy_loss(theta), 0.0, state.lambda_hat,
            diag.s_cos, diag.norm_data, diag.norm_phy, float(d @ diag.g_data),
            float(np.linalg.norm(d)), 0.0,
        ))
        theta = theta - eta * d
    return trace


@dataclass(frozen=True)
class ExperimentMetrics:
    peak_value_error: float
    peak_time_error: float
    final_l_data: float
    phase_medians: dict

    def to_dict(self) -> dict:
        return asdict(self)


def peak_errors(t, i_pred, i_true) -> tuple[float, float]:
    """Relative peak-height error and absolute peak-time error (days)."""
    t, i_pred, i_true = (np.asarray(a, float) for a in (t, i_pred, i_true))
    kp, kt = int(np.argmax(i_pred)), int(np.argmax(i_true))
    return float(abs(i_pred[kp] - i_true[kt]) / abs(i_true[kt])), abs(float(t[kp] - t[kt]))


def _window_median(values: np.ndarray, window: tuple[int, int]) -> float | None:
    chunk = values[window[0]:window[1]]
    return float(np.median(chunk)) if len(chunk) else None


def experiment_metrics(trace: TrainTrace, params: net.NetworkParams | None, truth: Trajectory) -> ExperimentMetrics:
    params = params or trace.params
    i_pred = net.evaluate(params, truth.t)[:, 2]
    pv, pt = peak_errors(truth.t, i_pred, truth.i)
    lam = trace.column("lambda_hat")
    phases = {"early": _window_median(lam, EARLY_WINDOW), "late": _window_median(lam, LATE_WINDOW)}
    return ExperimentMetrics(pv, pt, trace.records[-1].l_data, phases)
