"""Gradient geometry and physics-weight update rules.

Three strategies share one scaffold: ``fixed`` keeps the physics weight
constant, ``lra`` tracks an EMA of the gradient-norm ratio, and ``cggs``
multiplies that ratio by a sigmoid gate on the data/physics cosine.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .exceptions import ConfigError, DimensionMismatch, ZeroVector

__all__ = [
    "GateState",
    "GradientDiagnostics",
    "cosine",
    "alignment_score",
    "gate",
    "instantaneous_weight",
    "cggs_update",
    "lra_update",
    "fixed_update",
    "combine",
    "diagnostics",
]


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    z = math.exp(x)
    return z / (1.0 + z)


def gate(s_cos: float, kappa: float) -> float:
    """Conflict gate ``sigmoid(kappa * s_cos)``."""
    return _sigmoid(kappa * s_cos)


@dataclass(frozen=True)
class GateState:
    lambda_hat: float = 1.0
    alpha: float = 0.9
    kappa: float = 5.0
    epsilon: float = 1e-8
    lambda_logic: float = 1.0
    lambda_data: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.alpha < 1.0:
            raise ConfigError(f"alpha must lie in [0, 1), got {self.alpha}")
        if not self.kappa > 0:
            raise ConfigError(f"kappa must be positive, got {self.kappa}")
        if not self.epsilon > 0:
            raise ConfigError(f"epsilon must be positive, got {self.epsilon}")
        if not self.lambda_hat > 0:
            raise ConfigError(f"lambda_hat must be positive, got {self.lambda_hat}")
        if self.lambda_logic < 0:
            raise ConfigError("lambda_logic must be non-negative")


@dataclass(frozen=True)
class GradientDiagnostics:
    g_data: np.ndarray
    g_phy: np.ndarray
    g_logic: np.ndarray
    norm_data: float
    norm_phy: float
    norm_logic: float
    s_cos: float
    alignment: float


def _check_same(*vs: np.ndarray) -> None:
    shapes = {np.shape(v) for v in vs}
    if len(shapes) != 1:
        raise DimensionMismatch(f"gradient shapes differ: {sorted(shapes)}")


def cosine(g1, g2, epsilon: float = 1e-8) -> float:
    g1, g2 = np.asarray(g1, float), np.asarray(g2, float)
    _check_same(g1, g2)
    denom = max(float(np.linalg.norm(g1) * np.linalg.norm(g2)), epsilon)
    return float(np.clip(np.dot(g1, g2) / denom, -1.0, 1.0))


def alignment_score(gs: Sequence) -> float:
    """``2 * ||mean of unit vectors||^2 - 1``; reduces to the cosine for two vectors."""
    gs = [np.asarray(g, float) for g in gs]
    if not gs:
        raise ValueError("need at least one vector")
    _check_same(*gs)
    norms = [float(np.linalg.norm(g)) for g in gs]
    if min(norms) == 0.0:
        raise ZeroVector("alignment score is undefined for a zero vector")
    mean = sum(g / n for g, n in zip(gs, norms)) / len(gs)
    return float(np.clip(2.0 * np.dot(mean, mean) - 1.0, -1.0, 1.0))


def diagnostics(g_data, g_phy, g_logic, epsilon: float = 1e-8) -> GradientDiagnostics:
    g_data, g_phy, g_logic = (np.asarray(g, float) for g in (g_data, g_phy, g_logic))
    _check_same(g_data, g_phy, g_logic)
    nd, np_ = float(np.linalg.norm(g_data)), float(np.linalg.norm(g_phy))
    s = cosine(g_data, g_phy, epsilon)
    align = alignment_score([g_data, g_phy]) if nd > 0 and np_ > 0 else s
    return GradientDiagnostics(g_data, g_phy, g_logic, nd, np_, float(np.linalg.norm(g_logic)), s, align)


def instantaneous_weight(diag: GradientDiagnostics, state: GateState, gate_value: float | None = None) -> float:
    """Magnitude ratio times gate; ``gate_value`` overrides the sigmoid (1.0 gives LRA)."""
    g = gate(diag.s_cos, state.kappa) if gate_value is None else gate_value
    return diag.norm_data / (diag.norm_phy + state.epsilon) * g


def _ema(state: GateState, target: float) -> GateState:
    lam = state.alpha * state.lambda_hat + (1.0 - state.alpha) * target
    # floor keeps the weight strictly positive when the instantaneous term underflows
    return replace(state, lambda_hat=max(lam, np.finfo(float).tiny))


def cggs_update(state: GateState, diag: GradientDiagnostics, gate_value: float | None = None) -> GateState:
    return _ema(state, instantaneous_weight(diag, state, gate_value))


def lra_update(state: GateState, diag: GradientDiagnostics) -> GateState:
    return _ema(state, instantaneous_weight(diag, state, 1.0))


def fixed_update(state: GateState, diag: GradientDiagnostics) -> GateState:
    return state


def combine(diag: GradientDiagnostics, state: GateState) -> np.ndarray:
    """Update direction ``lambda_data g_data + lambda_hat g_phy + lambda_logic g_logic``."""
    _check_same(diag.g_data, diag.g_phy, diag.g_logic)
    d = diag.g_data * state.lambda_data if state.lambda_data != 1.0 else diag.g_data.copy()
    d += state.lambda_hat * diag.g_phy
    if state.lambda_logic:
        d += state.lambda_logic * diag.g_logic
    return d
