"""Weighted LASSO by cyclic coordinate descent.

Objective, unnormalized:

    ||y - X b||^2 + lam * sum_j factor_j * |b_j|

An all-ones penalty is the ordinary LASSO. Columns of X are expected to be
standardized and y centered (see ``tabular_service.prepare_site``).
"""
import math
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np

from utils.logger import get_logger

logger = get_logger(__name__)

DEFAULT_TOL = 1e-7
DEFAULT_KKT_TOL = 1e-6
DEFAULT_MAX_SWEEPS = 10_000
DEFAULT_PATH_LEN = 100
PATH_RATIO = 1e-3
# Consecutive path points past the target, each worse than the best, before the path stops
PATH_PATIENCE = 3


@dataclass(frozen=True, eq=False)
class PenaltyVector:
    """Per-feature multipliers of the L1 penalty, each in [0, 1]."""

    factors: np.ndarray

    def __post_init__(self):
        factors = np.array(self.factors, dtype=float, copy=True)
        if factors.ndim != 1 or factors.size == 0:
            raise ValueError("penalty factors must be a nonempty vector")
        if not np.isfinite(factors).all():
            raise ValueError("penalty factors must be finite")
        if factors.min() < 0.0 or factors.max() > 1.0:
            raise ValueError(
                f"penalty factors must lie in [0, 1], got range [{factors.min()}, {factors.max()}]"
            )
        factors.setflags(write=False)
        object.__setattr__(self, "factors", factors)

    @classmethod
    def ones(cls, n_features: int) -> "PenaltyVector":
        """Ordinary LASSO penalty."""
        return cls(np.ones(n_features))

    @property
    def n_features(self) -> int:
        return self.factors.shape[0]

    def is_ordinary(self) -> bool:
        return bool(np.all(self.factors == 1.0))

    def __eq__(self, other) -> bool:
        if not isinstance(other, PenaltyVector):
            return NotImplemented
        return np.array_equal(self.factors, other.factors)

    __hash__ = None


@dataclass(frozen=True)
class FeatureSet:
    """Sorted indices of selected features.

    ``flagged`` marks a selection that came back empty (all-zero response or
    no path point with any feature); it does not take part in equality.
    """

    indices: tuple[int, ...]
    flagged: bool = field(default=False, compare=False)

    def __post_init__(self):
        indices = tuple(int(i) for i in self.indices)
        if any(b <= a for a, b in zip(indices, indices[1:])):
            raise ValueError(f"feature indices must be strictly increasing: {indices}")
        if indices and indices[0] < 0:
            raise ValueError(f"feature indices must be non-negative: {indices}")
        object.__setattr__(self, "indices", indices)

    @classmethod
    def empty(cls) -> "FeatureSet":
        return cls(())

    @classmethod
    def from_mask(cls, mask: np.ndarray, flagged: bool = False) -> "FeatureSet":
        return cls(tuple(int(i) for i in np.flatnonzero(mask)), flagged=flagged)

    @property
    def size(self) -> int:
        return len(self.indices)

    def validate(self, n_features: int) -> None:
        if self.indices and self.indices[-1] >= n_features:
            raise ValueError(f"feature index {self.indices[-1]} out of range for {n_features} features")

    def __contains__(self, index: int) -> bool:
        return index in self.indices

    def __iter__(self):
        return iter(self.indices)

    def __len__(self) -> int:
        return len(self.indices)


@dataclass(frozen=True, eq=False)
class LassoSolution:
    coefficients: np.ndarray
    lambda_: float
    objective: float
    n_sweeps: int
    converged: bool = True
    objective_trace: tuple[float, ...] = field(default=(), repr=False)

    @property
    def support(self) -> FeatureSet:
        return FeatureSet.from_mask(self.coefficients != 0.0)

    @property
    def n_nonzero(self) -> int:
        return int(np.count_nonzero(self.coefficients))


def soft_threshold(z, t):
    """sign(z) * max(0, |z| - t)."""
    if np.any(np.asarray(t) < 0):
        raise ValueError(f"threshold must be non-negative, got {t}")
    result = np.sign(z) * np.maximum(np.abs(z) - t, 0.0)
    if np.ndim(result) == 0:
        return float(result)
    return result


def objective(X: np.ndarray, y: np.ndarray, coefficients: np.ndarray, lam: float, factors: np.ndarray) -> float:
    residual = y - X @ coefficients
    return float(residual @ residual + lam * np.sum(factors * np.abs(coefficients)))


def kkt_residual(X: np.ndarray, y: np.ndarray, coefficients: np.ndarray, lam: float, factors: np.ndarray) -> float:
    """Largest violation of the first-order optimality conditions."""
    gradient = 2.0 * X.T @ (y - X @ coefficients)
    bound = lam * factors
    active = coefficients != 0.0
    violation = np.where(
        active,
        np.abs(gradient - bound * np.sign(coefficients)),
        np.maximum(np.abs(gradient) - bound, 0.0),
    )
    return float(violation.max()) if violation.size else 0.0


def _check_inputs(X, y, penalty: PenaltyVector) -> tuple[np.ndarray, np.ndarray]:
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.shape[0]:
        raise ValueError(f"incompatible shapes X{X.shape} and y{y.shape}")
    if penalty.n_features != X.shape[1]:
        raise ValueError(f"penalty has {penalty.n_features} factors for {X.shape[1]} features")
    if not (np.isfinite(X).all() and np.isfinite(y).all()):
        raise ValueError("X and y must be finite")
    return X, y


def lambda_max(X, y, penalty: PenaltyVector) -> float:
    """Smallest lambda at which the all-zero vector is optimal."""
    X, y = _check_inputs(X, y, penalty)
    if np.any(penalty.factors == 0.0):
        raise ValueError(
            "lambda_max is undefined when a penalty factor is 0 (unpenalized features never vanish); "
            "fit an explicit lambda grid with lasso_path instead"
        )
    return float(np.max(2.0 * np.abs(X.T @ y) / penalty.factors))


class _Gram:
    """X'X, X'y and X of one design, shared by every point of a path."""

    def __init__(self, X: np.ndarray, y: np.ndarray):
        self.X = X
        self.y = y
        self.gram = X.T @ X
        self.xty = X.T @ y
        self.col_sq = np.diag(self.gram).copy()


def _sweep(indices, beta: np.ndarray, covariance: np.ndarray, gram: _Gram, thresholds: np.ndarray) -> float:
    """One coordinate pass; ``covariance`` tracks X'(y - X beta) in place."""
    max_change = 0.0
    for j in indices:
        if gram.col_sq[j] == 0.0:
            continue
        old = beta[j]
        rho = covariance[j] + gram.col_sq[j] * old
        new = soft_threshold(rho, thresholds[j]) / gram.col_sq[j]
        if new != old:
            covariance -= gram.gram[:, j] * (new - old)
            beta[j] = new
            max_change = max(max_change, abs(new - old))
    return max_change


def _descend(
    gram: _Gram,
    lam: float,
    factors: np.ndarray,
    warm_start: Optional[np.ndarray],
    tol: float,
    max_sweeps: int,
) -> LassoSolution:
    n_features = gram.X.shape[1]
    if warm_start is None:
        beta = np.zeros(n_features)
    else:
        beta = np.array(warm_start, dtype=float, copy=True)
        if beta.shape != (n_features,) or not np.isfinite(beta).all():
            raise ValueError("warm_start must be a finite vector with one entry per feature")
    thresholds = lam * factors / 2.0

    def current_objective() -> float:
        return objective(gram.X, gram.y, beta, lam, factors)

    trace = [current_objective()]
    all_indices = range(n_features)
    n_sweeps = 0
    converged = False
    while n_sweeps < max_sweeps:
        # recomputed per full sweep; in-place updates drift
        covariance = gram.xty - gram.gram @ beta
        change = _sweep(all_indices, beta, covariance, gram, thresholds)
        n_sweeps += 1
        trace.append(current_objective())
        if change <= tol:
            converged = True
            break
        active = np.flatnonzero(beta)
        while n_sweeps < max_sweeps:
            change = _sweep(active, beta, covariance, gram, thresholds)
            n_sweeps += 1
            trace.append(current_objective())
            if change <= tol:
                break

    if not converged:
        logger.warning(f"Coordinate descent did not converge in {max_sweeps} sweeps at lambda={lam:.6g}")
    else:
        logger.debug(f"Converged at lambda={lam:.6g} after {n_sweeps} sweeps, {np.count_nonzero(beta)} nonzero")

    return LassoSolution(
        coefficients=beta,
        lambda_=float(lam),
        objective=trace[-1],
        n_sweeps=n_sweeps,
        converged=converged,
        objective_trace=tuple(trace),
    )


def _check_fit_args(lam: float, tol: float) -> None:
    if not (np.isfinite(lam) and lam >= 0.0):
        raise ValueError(f"lambda must be a finite non-negative number, got {lam}")
    if tol <= 0.0:
        raise ValueError(f"tol must be positive, got {tol}")


def fit(
    X,
    y,
    lam: float,
    penalty: PenaltyVector,
    warm_start: Optional[np.ndarray] = None,
    tol: float = DEFAULT_TOL,
    max_sweeps: int = DEFAULT_MAX_SWEEPS,
) -> LassoSolution:
    """Solve the weighted LASSO at a single lambda.

    Coordinates are visited in ascending order. After each full sweep that
    moved something, the nonzero coordinates are swept until they settle,
    then a full sweep is repeated; convergence is declared only on a full
    sweep whose largest coefficient change is at most ``tol``. Updates use
    the Gram matrix, so a coordinate costs O(p) only when it moves.
    """
    X, y = _check_inputs(X, y, penalty)
    _check_fit_args(lam, tol)
    return _descend(_Gram(X, y), lam, penalty.factors, warm_start, tol, max_sweeps)


def iter_path(
    X,
    y,
    penalty: PenaltyVector,
    lambdas: Sequence[float],
    tol: float = DEFAULT_TOL,
    max_sweeps: int = DEFAULT_MAX_SWEEPS,
) -> Iterator[LassoSolution]:
    """Warm-started solutions along ``lambdas`` in the given order."""
    X, y = _check_inputs(X, y, penalty)
    gram = _Gram(X, y)
    beta = None
    for lam in lambdas:
        _check_fit_args(lam, tol)
        solution = _descend(gram, lam, penalty.factors, beta, tol, max_sweeps)
        beta = solution.coefficients
        yield solution


def lasso_path(
    X,
    y,
    penalty: PenaltyVector,
    lambdas: Optional[Sequence[float]] = None,
    path_len: int = DEFAULT_PATH_LEN,
    tol: float = DEFAULT_TOL,
    max_sweeps: int = DEFAULT_MAX_SWEEPS,
) -> list[LassoSolution]:
    """Regularization path; the default grid starts at ``lambda_max``."""
    if lambdas is None:
        lambdas = lambda_grid(lambda_max(X, y, penalty), path_len)
    return list(iter_path(X, y, penalty, lambdas, tol=tol, max_sweeps=max_sweeps))


def target_count(target_fraction: float, n_features: int) -> int:
    """Number of features a sparsity level asks for, rounded half up."""
    return int(math.floor(target_fraction * n_features + 0.5))


def select_features(
    X,
    y,
    penalty: PenaltyVector,
    target_fraction: float,
    path_len: int = DEFAULT_PATH_LEN,
    tol: float = DEFAULT_TOL,
    max_sweeps: int = DEFAULT_MAX_SWEEPS,
) -> FeatureSet:
    """Support of the path point whose size is closest to the sparsity target.

    Ties go to the larger lambda, which is the earlier point on the path.
    The path stops early on an exact hit, or after ``PATH_PATIENCE``
    consecutive points whose count overshoots the target by more than the
    best distance seen.    """
    if not 0.0 < target_fraction < 1.0:
        raise ValueError(f"target_fraction must lie in (0, 1), got {target_fraction}")
    if path_len < 20:
        raise ValueError(f"path_len must be at least 20, got {path_len}")
    X, y = _check_inputs(X, y, penalty)
    target = target_count(target_fraction, X.shape[1])
    if target < 1:
        raise ValueError(
            f"target_fraction {target_fraction} selects no feature out of {X.shape[1]}"
        )

    lam_max = lambda_max(X, y, penalty)
    if lam_max == 0.0:
        logger.warning("Response has no correlation with any feature; returning an empty selection")
        return FeatureSet((), flagged=True)

    best: Optional[LassoSolution] = None
    best_distance = None
    overshoot = 0
    for solution in iter_path(X, y, penalty, lambda_grid(lam_max, path_len), tol=tol, max_sweeps=max_sweeps):
        distance = abs(solution.n_nonzero - target)
        if best is None or distance < best_distance:
            best, best_distance = solution, distance
        if distance == 0:
            break
        overshoot = overshoot + 1 if solution.n_nonzero - target > best_distance else 0
        if overshoot >= PATH_PATIENCE:
            logger.debug(f"Path stopped at lambda={solution.lambda_:.6g} with {solution.n_nonzero} features")
            break

    selected = best.coefficients != 0.0
    logger.debug(
        f"Selected {int(selected.sum())} features (target {target}) at lambda={best.lambda_:.6g}"
    )
    if not selected.any():
        logger.warning(f"No path point selected any feature (target {target})")
        return FeatureSet((), flagged=True)
    return FeatureSet.from_mask(selected)
