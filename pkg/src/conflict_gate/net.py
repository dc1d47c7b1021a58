"""Tanh multilayer perceptron mapping time (days) to normalized (S, E, I, R).

Parameters live in one flat vector. Each layer contributes its weight matrix
(row-major, shape ``(fan_in, fan_out)``) followed by its bias vector.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .exceptions import ConfigError, ParseError
from .tape import Node, Tape

__all__ = [
    "DEFAULT_LAYERS",
    "NetworkParams",
    "TangentOutput",
    "init",
    "forward",
    "forward_with_tangent",
    "evaluate",
    "save_params",
    "load_params",
]

DEFAULT_LAYERS = (1, 32, 32, 4)


@dataclass
class NetworkParams:
    layer_sizes: tuple[int, ...]
    theta: np.ndarray
    time_scale: float = 100.0
    shapes: list[tuple[int, int]] = field(init=False, repr=False)

    def __post_init__(self):
        self.layer_sizes = _check_sizes(self.layer_sizes)
        self.theta = np.asarray(self.theta, dtype=float)
        self.shapes = list(zip(self.layer_sizes[:-1], self.layer_sizes[1:]))
        if self.theta.shape != (n_params(self.layer_sizes),):
            raise ConfigError(
                f"theta has {self.theta.size} entries, layers need {n_params(self.layer_sizes)}"
            )
        if not self.time_scale > 0:
            raise ConfigError("time_scale must be positive")

    @property
    def size(self) -> int:
        return self.theta.size

    def with_theta(self, theta) -> "NetworkParams":
        return NetworkParams(self.layer_sizes, np.array(theta, dtype=float), self.time_scale)


class TangentOutput(NamedTuple):
    u: tuple[Node, Node, Node, Node]
    du_dt: tuple[Node, Node, Node, Node]


def _check_sizes(sizes) -> tuple[int, ...]:
    try:
        sizes = tuple(int(s) for s in sizes)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"layer sizes must be integers: {sizes!r}") from exc
    if len(sizes) < 2 or sizes[0] != 1 or sizes[-1] != 4 or min(sizes) < 1:
        raise ConfigError(f"layer sizes must start with 1 and end with 4, got {list(sizes)}")
    return sizes


def n_params(layer_sizes) -> int:
    return sum((a + 1) * b for a, b in zip(layer_sizes[:-1], layer_sizes[1:]))


def init(layer_sizes=DEFAULT_LAYERS, seed: int = 0, time_scale: float = 100.0) -> NetworkParams:
    """Glorot-uniform weights, zero biases."""
    sizes = _check_sizes(layer_sizes)
    rng = np.random.default_rng(seed)
    chunks = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        chunks.append(rng.uniform(-limit, limit, size=fan_in * fan_out))
        chunks.append(np.zeros(fan_out))
    return NetworkParams(sizes, np.concatenate(chunks), time_scale)


def _layers(params: NetworkParams, theta: Node):
    offset = 0
    for fan_in, fan_out in params.shapes:
        w = theta[offset:offset + fan_in * fan_out].reshape(fan_in, fan_out)
        offset += fan_in * fan_out
        b = theta[offset:offset + fan_out]
        offset += fan_out
        yield w, b


def _bind(params: NetworkParams, tape: Tape, theta: Node | None) -> Node:
    return tape.var(params.theta) if theta is None else theta


def _split(out: Node) -> tuple[Node, Node, Node, Node]:
    return tuple(out[:, k] for k in range(4))


def forward(params: NetworkParams, tape: Tape, t, theta: Node | None = None):
    """Outputs ``(s, e, i, r)`` as tape nodes, each of shape ``(len(t),)``.

    ``theta`` is the leaf holding the flat parameter vector; a fresh leaf is
    registered when it is omitted.
    """
    theta = _bind(params, tape, theta)
    x = np.atleast_1d(np.asarray(t, dtype=float)).reshape(-1, 1) / params.time_scale
    h: Node | np.ndarray = x
    layers = list(_layers(params, theta))
    for k, (w, b) in enumerate(layers):
        z = tape.lift(h) @ w + b
        h = z if k == len(layers) - 1 else z.tanh()
    return _split(h)


def forward_with_tangent(params: NetworkParams, tape: Tape, t, theta: Node | None = None) -> TangentOutput:
    """Outputs and their exact time derivatives (per day).

    The pair ``(z, dz/dt)`` is pushed through every layer: affine maps send it
    to ``(W z + b, W dz/dt)`` and tanh to ``(tanh z, (1 - tanh^2 z) dz/dt)``.
    """
    theta = _bind(params, tape, theta)
    x = np.atleast_1d(np.asarray(t, dtype=float)).reshape(-1, 1) / params.time_scale
    dx = np.full_like(x, 1.0 / params.time_scale)
    layers = list(_layers(params, theta))
    h, dh = tape.lift(x), tape.lift(dx)
    for k, (w, b) in enumerate(layers):
        z = h @ w + b
        dz = dh @ w
        if k == len(layers) - 1:
            h, dh = z, dz
        else:
            h = z.tanh()
            dh = (1.0 - h.square()) * dz
    return TangentOutput(_split(h), _split(dh))


def evaluate(params: NetworkParams, t) -> np.ndarray:
    """Plain numpy forward pass; returns an ``(n, 4)`` array."""
    h = np.atleast_1d(np.asarray(t, dtype=float)).reshape(-1, 1) / params.time_scale
    offset = 0
    for k, (fan_in, fan_out) in enumerate(params.shapes):
        w = params.theta[offset:offset + fan_in * fan_out].reshape(fan_in, fan_out)
        offset += fan_in * fan_out
        b = params.theta[offset:offset + fan_out]
        offset += fan_out
        h = h @ w + b
        if k < len(params.shapes) - 1:
            h = np.tanh(h)
    return h


def save_params(params: NetworkParams, path) -> None:
    """JSON snapshot; ``theta`` keeps the flat parameter order."""
    doc = {
        "layer_sizes": list(params.layer_sizes),
        "time_scale": params.time_scale,
        "theta": [float(v) for v in params.theta],
    }
    Path(path).write_text(json.dumps(doc) + "\n")


def load_params(path) -> NetworkParams:
    try:
        doc = json.loads(Path(path).read_text())
        return NetworkParams(tuple(doc["layer_sizes"]), np.array(doc["theta"], dtype=float),
                             float(doc.get("time_scale", 100.0)))
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ParseError(f"bad parameter snapshot {path}: {exc}") from exc
