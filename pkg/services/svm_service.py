"""RBF-kernel support vector classifier trained by sequential minimal
optimization, plus the cross-validated grid search each site runs on its
selected features.

The dual is solved in the form

    min 1/2 a^T Q a - e^T a,   0 <= a_i <= C,   y^T a = 0,   Q_ij = y_i y_j K_ij

with the maximal violating pair as working set (lowest index on ties), so a
given input always yields the same model.
"""
from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np

from services.tabular_service import FoldAssignment, Metrics, confusion_metrics
from utils.logger import get_logger

logger = get_logger(__name__)

DEFAULT_TOL = 1e-3
DEFAULT_MAX_PASSES = 200_000
_TAU = 1e-12


def _as_sorted_tuple(values: Sequence[float], name: str) -> tuple[float, ...]:
    values = tuple(float(v) for v in values)
    if not values:
        raise ValueError(f"{name} must not be empty")
    if any(not np.isfinite(v) or v <= 0.0 for v in values):
        raise ValueError(f"{name} must contain positive finite values")
    if list(values) != sorted(values):
        raise ValueError(f"{name} must be sorted ascending")
    return values


@dataclass(frozen=True)
class HyperGrid:
    c_values: tuple[float, ...]
    gamma_values: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "c_values", _as_sorted_tuple(self.c_values, "c_values"))
        object.__setattr__(self, "gamma_values", _as_sorted_tuple(self.gamma_values, "gamma_values"))

    @classmethod
    def default(cls) -> "HyperGrid":
        """Coarse RBF grid: C in 2^-5..2^15, gamma in 2^-15..2^3, odd powers."""
        return cls(
            c_values=tuple(2.0 ** p for p in range(-5, 16, 2)),
            gamma_values=tuple(2.0 ** p for p in range(-15, 4, 2)),
        )

    def __len__(self) -> int:
        return len(self.c_values) * len(self.gamma_values)


@dataclass(frozen=True, eq=False)
class SvmModel:
    support_points: np.ndarray
    dual_coefficients: np.ndarray
    bias: float
    gamma: float
    c: float
    converged: bool = True

    def __post_init__(self):
        points = np.array(self.support_points, dtype=float, copy=True)
        coefficients = np.array(self.dual_coefficients, dtype=float, copy=True)
        if points.ndim != 2 or points.shape[0] == 0:
            raise ValueError("an SVM model needs at least one support vector")
        if coefficients.shape != (points.shape[0],):
            raise ValueError("one dual coefficient per support vector is required")
        if not (self.gamma > 0.0 and self.c > 0.0):
            raise ValueError(f"gamma and c must be positive, got gamma={self.gamma}, c={self.c}")
        if np.abs(coefficients).max() > self.c * (1.0 + 1e-12):
            raise ValueError("dual coefficients exceed the box constraint C")
        if abs(coefficients.sum()) > 1e-6:
            raise ValueError(f"dual equality constraint violated: sum = {coefficients.sum():.3g}")
        points.setflags(write=False)
        coefficients.setflags(write=False)
        object.__setattr__(self, "support_points", points)
        object.__setattr__(self, "dual_coefficients", coefficients)
        object.__setattr__(self, "bias", float(self.bias))

    @property
    def n_support(self) -> int:
        return self.support_points.shape[0]

    @property
    def n_dimensions(self) -> int:
        return self.support_points.shape[1]

    def decision_function(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.n_dimensions:
            raise ValueError(f"model expects {self.n_dimensions} features, got {X.shape[1]}")
        return rbf_kernel_matrix(X, self.support_points, self.gamma) @ self.dual_coefficients + self.bias


def rbf_kernel(a, b, gamma: float) -> float:
    """exp(-gamma * ||a - b||^2)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    if gamma < 0.0:
        raise ValueError(f"gamma must be non-negative, got {gamma}")
    diff = a - b
    return float(np.exp(-gamma * (diff @ diff)))


def squared_distances(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    distances = (A ** 2).sum(axis=1)[:, None] + (B ** 2).sum(axis=1)[None, :] - 2.0 * A @ B.T
    return np.maximum(distances, 0.0)


def rbf_kernel_matrix(A: np.ndarray, B: np.ndarray, gamma: float) -> np.ndarray:
    return np.exp(-gamma * squared_distances(A, B))


class _DualSolution(NamedTuple):
    alpha: np.ndarray
    rho: float
    n_iter: int
    converged: bool


def _solve_dual(K: np.ndarray, y: np.ndarray, c: float, tol: float, max_passes: int) -> _DualSolution:
    n = y.shape[0]
    yf = y.astype(float)
    alpha = np.zeros(n)
    gradient = -np.ones(n)
    diag = np.diag(K).copy()
    positive = y == 1
    converged = False
    n_iter = 0

    while n_iter < max_passes:
        at_upper = alpha >= c
        at_lower = alpha <= 0.0
        score = -yf * gradient
        up = (positive & ~at_upper) | (~positive & ~at_lower)
        low = (positive & ~at_lower) | (~positive & ~at_upper)
        i = int(np.argmax(np.where(up, score, -np.inf)))
        j = int(np.argmin(np.where(low, score, np.inf)))
        if not up[i] or not low[j] or score[i] - score[j] < tol:
            converged = True
            break
        n_iter += 1

        q_i = yf[i] * yf * K[i]
        q_j = yf[j] * yf * K[j]
        old_i, old_j = alpha[i], alpha[j]
        if y[i] != y[j]:
            quad = diag[i] + diag[j] + 2.0 * q_i[j]
            delta = (-gradient[i] - gradient[j]) / max(quad, _TAU)
            diff = old_i - old_j
            alpha[i] += delta
            alpha[j] += delta
            if diff > 0.0:
                if alpha[j] < 0.0:
                    alpha[j], alpha[i] = 0.0, diff
            elif alpha[i] < 0.0:
                alpha[i], alpha[j] = 0.0, -diff
            if diff > 0.0:
                if alpha[i] > c:
                    alpha[i], alpha[j] = c, c - diff
            elif alpha[j] > c:
                alpha[j], alpha[i] = c, c + diff
        else:
            quad = diag[i] + diag[j] - 2.0 * q_i[j]
            delta = (gradient[i] - gradient[j]) / max(quad, _TAU)
            total = old_i + old_j
            alpha[i] -= delta
            alpha[j] += delta
            if total > c:
                if alpha[i] > c:
                    alpha[i], alpha[j] = c, total - c
            elif alpha[j] < 0.0:
                alpha[j], alpha[i] = 0.0, total
            if total > c:
                if alpha[j] > c:
                    alpha[j], alpha[i] = c, total - c
            elif alpha[i] < 0.0:
                alpha[i], alpha[j] = 0.0, total

        gradient += q_i * (alpha[i] - old_i) + q_j * (alpha[j] - old_j)

    score = yf * gradient
    free = (alpha > 0.0) & (alpha < c)
    if free.any():
        rho = float(score[free].mean())
    else:
        upper_side = ((alpha >= c) & ~positive) | ((alpha <= 0.0) & positive)
        lower_side = ((alpha >= c) & positive) | ((alpha <= 0.0) & ~positive)
        ub = score[upper_side].min() if upper_side.any() else np.inf
        lb = score[lower_side].max() if lower_side.any() else -np.inf
        rho = float((ub + lb) / 2.0)
    return _DualSolution(alpha=alpha, rho=rho, n_iter=n_iter, converged=converged)


def _check_training_inputs(X, y) -> tuple[np.ndarray, np.ndarray]:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y)
    if y.ndim != 1 or X.shape[0] != y.shape[0]:
        raise ValueError(f"incompatible shapes X{X.shape} and y{y.shape}")
    if not np.isin(y, (-1, 1)).all():
        raise ValueError("labels must be +1 or -1")
    if not (np.any(y == 1) and np.any(y == -1)):
        raise ValueError("SVM training needs both classes")
    if not np.isfinite(X).all():
        raise ValueError("X must be finite")
    return X, y.astype(int)


def _train_on_kernel(
    K: np.ndarray, X: np.ndarray, y: np.ndarray, c: float, gamma: float, tol: float, max_passes: int
) -> tuple[SvmModel, np.ndarray]:
    """Model plus the boolean mask of its support vectors among the rows of X."""
    if not c > 0.0:
        raise ValueError(f"c must be positive, got {c}")
    solution = _solve_dual(K, y, c, tol, max_passes)
    if not solution.converged:
        logger.warning(f"SMO stopped after {max_passes} pair updates without converging (C={c:g}, gamma={gamma:g})")
    support = solution.alpha > 0.0
    model = SvmModel(
        support_points=X[support],
        dual_coefficients=solution.alpha[support] * y[support],
        bias=-solution.rho,
        gamma=gamma,
        c=c,
        converged=solution.converged,
    )
    return model, support


def smo_train(
    X, y, c: float, gamma: float, tol: float = DEFAULT_TOL, max_passes: int = DEFAULT_MAX_PASSES
) -> SvmModel:
    """Train an RBF-kernel SVM."""
    X, y = _check_training_inputs(X, y)
    if not gamma > 0.0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    model, _ = _train_on_kernel(rbf_kernel_matrix(X, X, gamma), X, y, c, gamma, tol, max_passes)
    return model


def predict(model: SvmModel, X) -> np.ndarray:
    """Class labels; a decision value of exactly 0 maps to +1."""
    return np.where(model.decision_function(X) >= 0.0, 1, -1)


class GridSearchResult(NamedTuple):
    c: float
    gamma: float
    metrics: Metrics


def cross_validate(
    X,
    y,
    c: float,
    gamma: float,
    folds: FoldAssignment,
    tol: float = DEFAULT_TOL,
    max_passes: int = DEFAULT_MAX_PASSES,
    kernel: Optional[np.ndarray] = None,
) -> Metrics:
    """Metrics from the pooled held-out predictions of every fold."""
    X, y = _check_training_inputs(X, y)
    if folds.n_subjects != y.shape[0]:
        raise ValueError(f"fold assignment covers {folds.n_subjects} subjects, data has {y.shape[0]}")
    if kernel is None:
        kernel = rbf_kernel_matrix(X, X, gamma)
    predicted = np.empty_like(y)
    for fold in range(folds.k):
        train, test = folds.split(fold)
        try:
            model, support = _train_on_kernel(
                kernel[np.ix_(train, train)], X[train], y[train], c, gamma, tol, max_passes
            )
        except ValueError as e:
            raise RuntimeError(f"SVM training failed on fold {fold} (C={c:g}, gamma={gamma:g}): {e}") from e
        decision = kernel[np.ix_(test, train[support])] @ model.dual_coefficients + model.bias
        predicted[test] = np.where(decision >= 0.0, 1, -1)
    return confusion_metrics(predicted, y)


def grid_search_cv(
    X,
    y,
    grid: HyperGrid,
    folds: FoldAssignment,
    tol: float = DEFAULT_TOL,
    max_passes: int = DEFAULT_MAX_PASSES,
) -> GridSearchResult:
    """Best (C, gamma) by pooled cross-validated accuracy.

    Ties go to the smaller C, then the smaller gamma.
    """
    X, y = _check_training_inputs(X, y)
    distances = squared_distances(X, X)
    kernels = {gamma: np.exp(-gamma * distances) for gamma in grid.gamma_values}
    best: Optional[GridSearchResult] = None
    for c in grid.c_values:
        for gamma in grid.gamma_values:
            metrics = cross_validate(X, y, c, gamma, folds, tol, max_passes, kernel=kernels[gamma])
            logger.debug(f"Grid point C={c:g} gamma={gamma:g}: accuracy={metrics.accuracy:.4f}")
            if best is None or metrics.accuracy > best.metrics.accuracy:
                best = GridSearchResult(c=c, gamma=gamma, metrics=metrics)
    logger.debug(f"Best grid point C={best.c:g} gamma={best.gamma:g}: accuracy={best.metrics.accuracy:.4f}")
    return best
