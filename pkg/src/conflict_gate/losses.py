"""Data, ODE-residual and logical-constraint losses as scalar tape nodes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import ConfigError, EmptyDataset
from .net import NetworkParams, forward, forward_with_tangent
from .seir import CollocationGrid, Dataset, residual
from .tape import Node, Tape

__all__ = ["LossBundle", "data_loss", "ode_loss", "logic_loss", "logic_penalty", "loss_bundle"]


@dataclass(frozen=True)
class LossBundle:
    l_data: Node
    l_ode: Node
    l_logic: Node

    def values(self) -> tuple[float, float, float]:
        return float(self.l_data.value), float(self.l_ode.value), float(self.l_logic.value)


def data_loss(params: NetworkParams, tape: Tape, dataset: Dataset, theta: Node | None = None) -> Node:
    """Mean squared error of the predicted infected fraction at observation times."""
    if len(dataset) == 0:
        raise EmptyDataset("data loss needs at least one observation")
    _, _, i, _ = forward(params, tape, dataset.t, theta)
    return (i - dataset.i_obs).square().mean()


def ode_loss(params: NetworkParams, tape: Tape, grid: CollocationGrid, seir, theta: Node | None = None) -> Node:
    """Mean over collocation points of the squared residual norm.

    ``seir`` may carry float rates or tape nodes (inverse mode).
    """
    if len(grid) == 0:
        raise ConfigError("collocation grid is empty")
    u, du = forward_with_tangent(params, tape, grid.points, theta)
    f = residual(u, du, seir)
    sq = f[0].square() + f[1].square() + f[2].square() + f[3].square()
    return sq.mean()


def logic_penalty(u) -> Node:
    """ReLU penalty on negative compartments and on decreasing R between neighbours.

    ``u`` holds four nodes sampled on consecutive grid points; the last point
    only contributes non-negativity terms.
    """
    s, e, i, r = u
    n = s.shape[0]
    negative = sum((-c).relu().sum() for c in (s, e, i, r))
    if n > 1:
        negative = negative + (r[:-1] - r[1:]).relu().sum()
    return negative * (1.0 / n)


def logic_loss(params: NetworkParams, tape: Tape, grid: CollocationGrid, theta: Node | None = None) -> Node:
    if len(grid) < 2:
        raise ConfigError("logic loss needs at least two collocation points")
    return logic_penalty(forward(params, tape, grid.points, theta))


def loss_bundle(params: NetworkParams, dataset: Dataset, grid: CollocationGrid, seir, tape: Tape | None = None) -> LossBundle:
    """All three losses on one tape sharing a single parameter leaf."""
    tape = tape if tape is not None else Tape()
    theta = tape.var(params.theta)
    return LossBundle(
        data_loss(params, tape, dataset, theta),
        ode_loss(params, tape, grid, seir, theta),
        logic_loss(params, tape, grid, theta),
    )


def mse(pred, target) -> float:
    pred, target = np.asarray(pred, float), np.asarray(target, float)
    return float(np.mean((pred - target) ** 2))
