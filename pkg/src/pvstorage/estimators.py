"""scikit-learn style wrappers around calibration and the HJB solver.

Inputs follow the usual convention: ``X`` holds timestamps (hours) in its
first column, ``y`` the observed series.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .model import ModelConfig, pv_seasonal_eval, seasonal_eval
from .stochastic import SeriesSample, fit_harmonic, fit_ou, fit_pv_profile


def _sample(X, y) -> SeriesSample:
    X, y = check_X_y(X, y, ensure_min_samples=3, y_numeric=True)
    if X.shape[1] != 1:
        raise ValueError("X must have a single column of timestamps (hours)")
    order = np.argsort(X[:, 0])
    return SeriesSample(X[order, 0], y[order])


class HarmonicRegressor(RegressorMixin, BaseEstimator):
    """Exponential-harmonic profile ``exp(c + sum a sin + b cos)`` plus OU residuals.

    ``transform`` returns the log-residuals; ``predict`` the seasonal level.
    """

    def __init__(self, frequencies=(1 / 24, 1 / 12, 1 / 8), fit_residual_process=True):
        self.frequencies = frequencies
        self.fit_residual_process = fit_residual_process

    def fit(self, X, y):
        sample = _sample(X, y)
        fit = fit_harmonic(sample, self.frequencies)
        self.spec_ = fit.spec
        self.intercept_ = fit.spec.intercept
        self.coef_ = np.array([[a, b] for _, a, b in fit.spec.harmonics])
        self.coef_se_ = np.column_stack([fit.sin_se, fit.cos_se])
        self.intercept_se_ = fit.intercept_se
        self.residuals_ = fit.residuals
        if self.fit_residual_process:
            self.ou_ = fit_ou(fit.residuals, sample.step)
        self.n_features_in_ = 1
        return self

    def predict(self, X):
        check_is_fitted(self, "spec_")
        X = check_array(X)
        return seasonal_eval(self.spec_, X[:, 0])

    def transform(self, X, y):
        check_is_fitted(self, "spec_")
        X, y = check_X_y(X, y)
        return np.log(y) - self.spec_.log_curve(X[:, 0])


class PvProfileRegressor(RegressorMixin, BaseEstimator):
    """Truncated-sine PV profile ``A max(sin(2 pi f (t + phi)), 0)`` with OU log-residuals."""

    def __init__(self, frequency=1 / 24, threshold=1e-6):
        self.frequency = frequency
        self.threshold = threshold

    def fit(self, X, y):
        sample = _sample(X, y)
        fit = fit_pv_profile(sample, self.frequency, self.threshold)
        self.spec_ = fit.spec
        self.amplitude_, self.phase_ = fit.spec.amplitude, fit.spec.phase
        self.amplitude_se_, self.phase_se_ = fit.amplitude_se, fit.phase_se
        self.residuals_ = fit.residuals
        self.ou_ = fit_ou(fit.residuals, sample.step, valid=fit.valid)
        self.n_features_in_ = 1
        return self

    def predict(self, X):
        check_is_fitted(self, "spec_")
        X = check_array(X)
        return pv_seasonal_eval(self.spec_, X[:, 0])


class HJBPolicyEstimator(BaseEstimator):
    """Solve the two-state control problem; ``predict`` maps ``(t, p, s)`` rows to
    ``(a, c)`` actions and ``score_samples`` to interpolated values."""

    def __init__(self, tau=0.024, p_min=-0.6, p_max=0.6, p_step=0.04, s_step=0.005,
                 dense_controls=None, stencil="upwind"):
        self.tau = tau
        self.p_min = p_min
        self.p_max = p_max
        self.p_step = p_step
        self.s_step = s_step
        self.dense_controls = dense_controls
        self.stencil = stencil

    def fit(self, config: ModelConfig, y=None):
        from .hjb import SolverGrid, ValuePolicy, solve

        if not isinstance(config, ModelConfig):
            raise TypeError("fit expects a ModelConfig")
        self.grid_ = SolverGrid.for_config(config, self.tau, self.p_step, self.s_step, self.p_min, self.p_max)
        self.value_field_, self.policy_field_ = solve(config, self.grid_, self.dense_controls, self.stencil)
        self.policy_ = ValuePolicy(self.value_field_, config)
        self.config_ = config
        return self

    def predict(self, X):
        check_is_fitted(self, "policy_")
        X = check_array(X)
        if X.shape[1] != 3:
            raise ValueError("X must have columns (t, p, s)")
        out = np.empty((X.shape[0], 2))
        for t in np.unique(X[:, 0]):
            rows = X[:, 0] == t
            a, c = self.policy_(float(t), X[rows, 1], X[rows, 2])
            out[rows, 0], out[rows, 1] = a, c
        return out

    def score_samples(self, X):
        from .hjb import value_at

        check_is_fitted(self, "value_field_")
        X = check_array(X)
        return value_at(self.value_field_, X[:, 0], X[:, 1], X[:, 2])
