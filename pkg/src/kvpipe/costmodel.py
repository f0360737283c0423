"""Linear service-cost model: loading time plus computation time.

The per-request cost used for scheduling is the sum of two univariate
linear terms, one in the number of cached tokens to load and one in the
number of tokens to compute. Each term is fitted offline from profiling
samples with ordinary least squares.

:class:`CostModelRegressor` wraps the fit in the scikit-learn estimator
protocol so it can sit in pipelines and grid searches; :func:`fit_linear`
is the plain-function entry point.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .core import ClusterConfig, RequestSpec, cached_token_count
from .exceptions import DegenerateFit, FitWarning


@dataclass(frozen=True)
class LinearCostModel:
    """``seconds = intercept + slope * tokens``."""

    slope: float = 0.0
    intercept: float = 0.0

    def __post_init__(self):
        if self.slope < 0 or self.intercept < 0:
            raise ValueError("slope and intercept must be non-negative")

    def predict(self, tokens):
        return predict(self, tokens)

    def to_dict(self):
        return {"slope": self.slope, "intercept": self.intercept}


@dataclass(frozen=True)
class ServiceCost:
    t_load: float
    t_comp: float

    def __post_init__(self):
        if self.t_load < 0 or self.t_comp < 0:
            raise ValueError("service costs must be non-negative")

    @property
    def total(self) -> float:
        return self.t_load + self.t_comp

    def scaled(self, factor: float) -> "ServiceCost":
        return ServiceCost(self.t_load * factor, self.t_comp * factor)


class CostModels(NamedTuple):
    load: LinearCostModel
    comp: LinearCostModel


def predict(model: LinearCostModel, tokens):
    """Predicted seconds for ``tokens`` (scalar or array)."""
    if np.ndim(tokens) == 0:
        if tokens < 0:
            raise ValueError("tokens must be >= 0")
        return model.intercept + model.slope * tokens
    tokens = np.asarray(tokens, dtype=float)
    if (tokens < 0).any():
        raise ValueError("tokens must be >= 0")
    return model.intercept + model.slope * tokens


def _ols(x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    # centred two-pass form; exact on collinear integer-ish inputs
    x_mean = x.mean()
    y_mean = y.mean()
    dx = x - x_mean
    sxx = float(dx @ dx)
    if sxx == 0.0:
        raise DegenerateFit("need at least two distinct token counts")
    slope = float(dx @ (y - y_mean)) / sxx
    return slope, float(y_mean - slope * x_mean)


class CostModelRegressor(RegressorMixin, BaseEstimator):
    """Least-squares line through (tokens, seconds) profiling samples.

    Parameters
    ----------
    clamp_negative : bool, default=True
        Clamp a negative fitted slope or intercept to zero and emit a
        :class:`FitWarning`. Costs are physically non-negative.

    Attributes
    ----------
    slope_, intercept_ : float
    model_ : LinearCostModel
    clamped_ : tuple of str
        Names of coefficients that were clamped.
    """

    def __init__(self, clamp_negative: bool = True):
        self.clamp_negative = clamp_negative

    def fit(self, X, y):
        X, y = check_X_y(X, y, ensure_min_samples=2, y_numeric=True, dtype=float)
        if X.shape[1] != 1:
            raise ValueError(f"expected a single token-count feature, got {X.shape[1]}")
        if (X < 0).any():
            raise ValueError("token counts must be >= 0")
        slope, intercept = _ols(X[:, 0], y)
        clamped = []
        if self.clamp_negative:
            # round-off around an exact zero is not worth a warning
            tol = 1e-12 * max(1.0, float(np.abs(y).max()))
            if slope < 0:
                if slope * float(X.max()) < -tol:
                    clamped.append("slope")
                slope = 0.0
            if intercept < 0:
                if intercept < -tol:
                    clamped.append("intercept")
                intercept = 0.0
            if clamped:
                warnings.warn(f"negative fitted {' and '.join(clamped)} clamped to 0", FitWarning,
                              stacklevel=2)
        self.slope_ = slope
        self.intercept_ = intercept
        self.clamped_ = tuple(clamped)
        self.n_features_in_ = 1
        if not self.clamp_negative and (slope < 0 or intercept < 0):
            self.model_ = None
        else:
            self.model_ = LinearCostModel(slope, intercept)
        return self

    def predict(self, X):
        check_is_fitted(self, ("slope_", "intercept_"))
        X = check_array(X, dtype=float)
        return self.intercept_ + self.slope_ * X[:, 0]


def fit_linear(samples: Iterable[Sequence[float]]) -> LinearCostModel:
    """Fit a :class:`LinearCostModel` to ``(tokens, seconds)`` pairs."""
    arr = np.asarray(list(samples), dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 2 or arr.shape[0] < 2:
        raise DegenerateFit("need at least two (tokens, seconds) samples")
    return CostModelRegressor().fit(arr[:, :1], arr[:, 1]).model_


def load_samples_csv(path) -> list[tuple[float, float]]:
    """Read two-column ``tokens,seconds`` profiling samples; header optional."""
    samples = []
    with open(Path(path), newline="") as fh:
        for i, row in enumerate(csv.reader(fh)):
            if not row or not "".join(row).strip():
                continue
            try:
                tokens, seconds = float(row[0]), float(row[1])
            except (ValueError, IndexError):
                if i == 0:
                    continue  # header
                raise ValueError(f"{path}:{i + 1}: expected two numeric columns, got {row!r}")
            samples.append((tokens, seconds))
    return samples


def estimate_service_cost(spec: RequestSpec, load_model: LinearCostModel,
                          comp_model: LinearCostModel, config: ClusterConfig) -> ServiceCost:
    if spec.measured_cost is not None:
        return ServiceCost(*spec.measured_cost)
    cached = cached_token_count(spec, config)
    compute_tokens = spec.prompt_tokens - cached
    t_load = predict(load_model, cached) if cached > 0 else 0.0
    t_comp = predict(comp_model, compute_tokens) + config.compute_quadratic * compute_tokens ** 2
    return ServiceCost(float(t_load), float(t_comp))
