"""scikit-learn style wrapper: fit a SEIR PINN to (time, infected) samples."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import net
from .exceptions import DimensionMismatch
from .seir import Dataset, SeirParams, collocation_grid
from .trainer import TrainConfig, TrainInputs, run

__all__ = ["SeirPINN"]


def _times(X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    return X


class SeirPINN(RegressorMixin, BaseEstimator):
    """Physics-informed SEIR network predicting the infected fraction over time.

    ``X`` holds observation times in days (one column), ``y`` the observed
    infected fraction. The fitted network also exposes all four compartments
    through :meth:`predict_compartments`.
    """

    def __init__(
        self,
        strategy: str = "cggs",
        steps: int = 2000,
        optimizer: str = "adam",
        learning_rate: float = 1e-3,
        hidden_layers: tuple[int, ...] = (32, 32),
        n_collocation: int = 200,
        t_horizon: float = 100.0,
        time_scale: float = 25.0,
        alpha: float = 0.9,
        kappa: float = 5.0,
        epsilon: float = 1e-8,
        lambda_phy: float = 1.0,
        lambda_logic: float = 1.0,
        beta: float = 1.0,
        sigma: float = 0.2,
        gamma: float = 0.14,
        inverse_mode: bool = False,
        random_state: int = 0,
    ):
        self.strategy = strategy
        self.steps = steps
        self.optimizer = optimizer
        self.learning_rate = learning_rate
        self.hidden_layers = hidden_layers
        self.n_collocation = n_collocation
        self.t_horizon = t_horizon
        self.time_scale = time_scale
        self.alpha = alpha
        self.kappa = kappa
        self.epsilon = epsilon
        self.lambda_phy = lambda_phy
        self.lambda_logic = lambda_logic
        self.beta = beta
        self.sigma = sigma
        self.gamma = gamma
        self.inverse_mode = inverse_mode
        self.random_state = random_state

    def _config(self) -> TrainConfig:
        return TrainConfig(
            strategy=self.strategy, lambda_phy=self.lambda_phy, optimizer=self.optimizer,
            learning_rate=self.learning_rate, steps=self.steps, seed=self.random_state,
            layer_sizes=(1, *self.hidden_layers, 4), n_collocation=self.n_collocation,
            t_horizon=self.t_horizon, time_scale=self.time_scale, alpha=self.alpha,
            kappa=self.kappa, epsilon=self.epsilon, lambda_logic=self.lambda_logic,
            inverse_mode=self.inverse_mode,
        )

    def fit(self, X, y):
        X, y = check_X_y(_times(X), y, y_numeric=True)
        if X.shape[1] != 1:
            raise DimensionMismatch(f"X must have a single time column, got {X.shape[1]}")
        config = self._config()
        order = np.argsort(X[:, 0], kind="stable")
        dataset = Dataset(X[order, 0], y[order])
        dataset.validate(config.t_horizon)
        seir_params = SeirParams(beta=self.beta, sigma=self.sigma, gamma=self.gamma)
        inputs = TrainInputs(dataset, collocation_grid(config.t_horizon, config.n_collocation), seir_params)
        self.trace_ = run(config, inputs)
        self.params_ = self.trace_.params
        self.rates_ = self.trace_.rates or {"beta": self.beta, "sigma": self.sigma, "gamma": self.gamma}
        self.n_features_in_ = 1
        return self

    def predict_compartments(self, X) -> np.ndarray:
        """``(n, 4)`` array of normalized (s, e, i, r)."""
        check_is_fitted(self, "params_")
        X = check_array(_times(X))
        if X.shape[1] != 1:
            raise DimensionMismatch(f"X must have a single time column, got {X.shape[1]}")
        return net.evaluate(self.params_, X[:, 0])

    def predict(self, X) -> np.ndarray:
        return self.predict_compartments(X)[:, 2]
