"""Shape-weighted score and multi-start parameter fitting."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .expr import DimensionMismatch, Expression


class LengthMismatch(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Dataset:
    """N samples of d-dimensional inputs with scalar targets."""

    inputs: np.ndarray
    targets: np.ndarray
    input_ranges: tuple[tuple[float, float], ...] = field(default=())

    def __post_init__(self):
        X = np.asarray(self.inputs, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        y = np.asarray(self.targets, dtype=float).reshape(-1)
        if X.ndim != 2 or X.shape[0] != y.shape[0]:
            raise LengthMismatch(f"inputs {X.shape} and targets {y.shape} disagree")
        if y.shape[0] < 2:
            raise ValueError("a dataset needs at least 2 samples")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise ValueError("dataset entries must be finite")
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "inputs", X)
        object.__setattr__(self, "targets", y)
        if not self.input_ranges:
            ranges = tuple((float(lo), float(hi)) for lo, hi in zip(X.min(axis=0), X.max(axis=0)))
            object.__setattr__(self, "input_ranges", ranges)
        elif len(self.input_ranges) != X.shape[1]:
            raise LengthMismatch("one range per input dimension required")

    @property
    def n(self) -> int:
        return self.targets.shape[0]

    @property
    def d(self) -> int:
        return self.inputs.shape[1]

    @property
    def x(self) -> np.ndarray:
        """The single input column of a univariate dataset."""
        if self.d != 1:
            raise DimensionMismatch("dataset is not univariate")
        return self.inputs[:, 0]

    @classmethod
    def from_function(cls, f, x, ranges=None) -> "Dataset":
        X = np.asarray(x, dtype=float)
        y = f(X) if X.ndim == 1 else f(*X.T)
        return cls(X, y, tuple(ranges) if ranges else ())


@dataclass(frozen=True)
class ScoreConfig:
    alpha: float = 0.01
    epsilon: float = 1e-9

    def __post_init__(self):
        if self.alpha <= 0 or self.epsilon <= 0:
            raise ValueError("alpha and epsilon must be positive")


@dataclass(frozen=True)
class FitConfig:
    restarts: int = 10
    max_evals_per_restart: int = 2000
    seed: int = 0
    init_scale: float = 1.0
    xatol: float = 1e-12
    fatol: float = 1e-18
    # scores at or below this count as exact; later restarts must beat the
    # incumbent by more than this to replace it
    exact_score: float = 1e-20

    def __post_init__(self):
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")


def global_scale(targets, cfg: ScoreConfig = ScoreConfig()) -> float:
    """max(MAD, alpha * mean|y|, epsilon); never zero."""
    y = np.asarray(targets, dtype=float)
    mad = float(np.median(np.abs(y - np.median(y))))
    return max(mad, cfg.alpha * float(np.mean(np.abs(y))), cfg.epsilon)


def score(predictions, targets, cfg: ScoreConfig = ScoreConfig(), mask=None, scale: float | None = None) -> float:
    """Mean squared error with per-point denominators max(alpha|y_i|, global_scale)^2.

    Lower is better.  Any non-finite prediction scores +inf.
    """
    pred = np.asarray(predictions, dtype=float)
    y = np.asarray(targets, dtype=float)
    if pred.shape != y.shape:
        raise LengthMismatch(f"predictions {pred.shape} vs targets {y.shape}")
    if mask is not None and not np.all(mask):
        return np.inf
    if not np.all(np.isfinite(pred)):
        return np.inf
    gs = global_scale(y, cfg) if scale is None else scale
    denom = np.maximum(cfg.alpha * np.abs(y), gs)
    with np.errstate(over="ignore"):
        value = float(np.mean(((pred - y) / denom) ** 2))
    return value if np.isfinite(value) else np.inf


def make_objective(expr: Expression, data: Dataset, cfg: ScoreConfig = ScoreConfig()):
    if expr.n_inputs != data.d:
        raise DimensionMismatch(f"expression takes {expr.n_inputs} inputs, dataset has {data.d}")
    f = expr.compile()
    X, y = data.inputs, data.targets
    gs = global_scale(y, cfg)
    denom = np.maximum(cfg.alpha * np.abs(y), gs)

    def objective(theta) -> float:
        pred = f(X, theta)
        if not np.all(np.isfinite(pred)):
            return np.inf
        with np.errstate(over="ignore"):
            value = float(np.mean(((pred - y) / denom) ** 2))
        return value if np.isfinite(value) else np.inf

    return objective


def fit_params(
    expr: Expression,
    data: Dataset,
    score_cfg: ScoreConfig = ScoreConfig(),
    fit_cfg: FitConfig = FitConfig(),
    x0=None,
) -> tuple[np.ndarray, float]:
    """Multi-start Nelder-Mead on the score as a function of the parameters.

    Starting points: ``x0`` if given, then the all-ones vector, then draws from
    N(0, init_scale^2).  Returns the best ``(params, score)``; ties keep the
    earliest restart when scores differ by less than ``exact_score``.
    """
    objective = make_objective(expr, data, score_cfg)
    p = expr.n_params
    if p == 0:
        return np.zeros(0), objective(np.zeros(0))

    rng = np.random.default_rng(fit_cfg.seed)
    starts = []
    if x0 is not None:
        starts.append(np.asarray(x0, dtype=float).reshape(p))
    starts.append(np.ones(p))
    while len(starts) < max(fit_cfg.restarts, 1 if x0 is None else 2):
        starts.append(rng.normal(0.0, fit_cfg.init_scale, size=p))

    best_theta, best_score = None, np.inf

    def improves(value: float) -> bool:
        if best_theta is None:
            return True
        if best_score == np.inf:
            return value < np.inf
        return value < best_score - fit_cfg.exact_score

    for start in starts:
        f0 = objective(start)
        if improves(f0):
            best_theta, best_score = start.copy(), f0
        res = minimize(
            objective,
            start,
            method="Nelder-Mead",
            options={
                "maxfev": fit_cfg.max_evals_per_restart,
                "xatol": fit_cfg.xatol,
                "fatol": fit_cfg.fatol,
                "adaptive": p > 2,
            },
        )
        value = objective(res.x)
        if improves(value):
            best_theta, best_score = np.array(res.x, dtype=float), value
        if best_score <= fit_cfg.exact_score:
            break
    return best_theta, float(best_score)
