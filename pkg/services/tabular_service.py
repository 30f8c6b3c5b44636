"""Private per-site tabular data: covariate residualization, standardization,
classification metrics and stratified folds.

Everything here is a pure function of its inputs. Arrays stored on the
dataclasses are made read-only so a table can be shared between threads.
"""
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from sklearn.metrics import confusion_matrix
from sklearn.model_selection import StratifiedKFold

from utils.errors import DataError, DegenerateDesignError
from utils.logger import get_logger

logger = get_logger(__name__)

COVARIATE_NAMES = ("age", "sex", "icv")
LABEL_VALUES = (-1, 1)
POSITIVE_LABEL = 1


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, dtype=float, copy=True)
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class SubjectTable:
    """One site's private data. Labels are +1 for patients, -1 for controls."""

    site_id: str
    features: np.ndarray
    feature_names: tuple[str, ...]
    covariates: np.ndarray
    labels: np.ndarray
    subject_ids: Optional[tuple[str, ...]] = None

    def __post_init__(self):
        features = _frozen(self.features)
        covariates = _frozen(self.covariates)
        labels = np.array(self.labels, dtype=int, copy=True)
        labels.setflags(write=False)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "covariates", covariates)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "feature_names", tuple(self.feature_names))

        if features.ndim != 2:
            raise DataError(f"Site '{self.site_id}': feature matrix must be 2-dimensional")
        n_subjects, n_features = features.shape
        if n_subjects < 4:
            raise DataError(f"Site '{self.site_id}' has {n_subjects} subjects, at least 4 are required")
        if covariates.shape != (n_subjects, len(COVARIATE_NAMES)):
            raise DataError(
                f"Site '{self.site_id}': covariates must have shape ({n_subjects}, 3), got {covariates.shape}"
            )
        if labels.shape != (n_subjects,):
            raise DataError(f"Site '{self.site_id}': expected {n_subjects} labels, got {labels.shape[0]}")
        if len(self.feature_names) != n_features:
            raise DataError(
                f"Site '{self.site_id}': {len(self.feature_names)} feature names for {n_features} columns"
            )
        if len(set(self.feature_names)) != n_features:
            raise DataError(f"Site '{self.site_id}': feature names must be unique")
        if not (np.isfinite(features).all() and np.isfinite(covariates).all()):
            raise DataError(f"Site '{self.site_id}': all matrix entries must be finite")
        bad = ~np.isin(labels, LABEL_VALUES)
        if bad.any():
            raise DataError(f"Site '{self.site_id}': labels must be +1 or -1", row=int(np.argmax(bad)))
        if not (np.any(labels == 1) and np.any(labels == -1)):
            raise DataError(f"Site '{self.site_id}': both label classes must be present")
        if self.subject_ids is not None:
            ids = tuple(str(s) for s in self.subject_ids)
            if len(ids) != n_subjects:
                raise DataError(f"Site '{self.site_id}': {len(ids)} subject ids for {n_subjects} subjects")
            if len(set(ids)) != n_subjects:
                raise DataError(f"Site '{self.site_id}': duplicate subject ids")
            object.__setattr__(self, "subject_ids", ids)

    @property
    def n_subjects(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def with_features(self, features: np.ndarray) -> "SubjectTable":
        return SubjectTable(
            site_id=self.site_id,
            features=features,
            feature_names=self.feature_names,
            covariates=self.covariates,
            labels=self.labels,
            subject_ids=self.subject_ids,
        )

    def __eq__(self, other) -> bool:
        if not isinstance(other, SubjectTable):
            return NotImplemented
        return (
            self.site_id == other.site_id
            and self.feature_names == other.feature_names
            and self.subject_ids == other.subject_ids
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.covariates, other.covariates)
            and np.array_equal(self.labels, other.labels)
        )

    __hash__ = None


@dataclass(frozen=True)
class Metrics:
    accuracy: float
    specificity: float
    sensitivity: float

    def __post_init__(self):
        for name in ("accuracy", "specificity", "sensitivity"):
            value = getattr(self, name)
            if not (np.isfinite(value) and 0.0 <= value <= 1.0):
                raise ValueError(f"{name} must lie in [0, 1], got {value}")
            object.__setattr__(self, name, float(value))

    @classmethod
    def zero(cls) -> "Metrics":
        return cls(0.0, 0.0, 0.0)


@dataclass(frozen=True, eq=False)
class FoldAssignment:
    fold_of_subject: np.ndarray
    k: int
    seed: int

    def __post_init__(self):
        folds = np.array(self.fold_of_subject, dtype=int, copy=True)
        folds.setflags(write=False)
        object.__setattr__(self, "fold_of_subject", folds)
        if self.k < 2:
            raise ValueError(f"k must be at least 2, got {self.k}")
        if folds.size and (folds.min() < 0 or folds.max() >= self.k):
            raise ValueError(f"fold indices must lie in [0, {self.k})")
        counts = np.bincount(folds, minlength=self.k)
        if np.any(counts == 0):
            raise ValueError(f"fold {int(np.argmin(counts))} is empty")

    @property
    def n_subjects(self) -> int:
        return self.fold_of_subject.shape[0]

    def split(self, fold: int) -> tuple[np.ndarray, np.ndarray]:
        """Return (train_indices, test_indices) holding out ``fold``."""
        test = self.fold_of_subject == fold
        return np.flatnonzero(~test), np.flatnonzero(test)

    def __eq__(self, other) -> bool:
        if not isinstance(other, FoldAssignment):
            return NotImplemented
        return self.k == other.k and self.seed == other.seed and np.array_equal(
            self.fold_of_subject, other.fold_of_subject
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class SiteDesign:
    """Residualized, standardized site data ready for the LASSO and the SVM.

    Computed once before round 0 and reused unchanged in every round.
    """

    site_id: str
    features: np.ndarray
    response: np.ndarray
    labels: np.ndarray
    column_means: np.ndarray
    column_scales: np.ndarray = field(repr=False)

    @property
    def n_subjects(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]


def _covariate_basis(covariates: np.ndarray) -> np.ndarray:
    """Orthonormal basis of span[1, age, sex, icv].

    Covariates are centered and scaled first so ICV in mm^3 does not wreck
    the conditioning; the column space is unchanged.
    """
    n = covariates.shape[0]
    centered = covariates - covariates.mean(axis=0)
    scale = np.sqrt((centered ** 2).sum(axis=0))
    for name, s in zip(COVARIATE_NAMES, scale):
        if s <= 1e-12 * max(1.0, np.abs(covariates).max()):
            raise DegenerateDesignError(
                f"Covariate design is rank deficient: '{name}' is constant", column=name
            )
    design = np.column_stack([np.ones(n) / np.sqrt(n), centered / scale])
    q, r = np.linalg.qr(design)
    diag = np.abs(np.diag(r))
    names = ("intercept",) + COVARIATE_NAMES
    for name, value in zip(names, diag):
        if value < 1e-10:
            raise DegenerateDesignError(
                f"Covariate design is rank deficient: '{name}' is collinear with earlier columns",
                column=name,
            )
    return q


def residualize(table: SubjectTable) -> SubjectTable:
    """Replace every feature column by its residuals on [1, age, sex, icv].

    The fit uses all subjects at the site, patients and controls alike.
    """
    basis = _covariate_basis(table.covariates)
    residuals = table.features - basis @ (basis.T @ table.features)
    # second projection pass keeps orthogonality at round-off level
    residuals = residuals - basis @ (basis.T @ residuals)
    logger.debug(f"Residualized {table.n_features} features for site '{table.site_id}'")
    return table.with_features(residuals)


def standardize(
    matrix: np.ndarray, feature_names: Optional[Sequence[str]] = None
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Center each column and scale it to unit sample standard deviation.

    Returns:
        tuple: (standardized matrix, column means, column scales)
    """
    matrix = np.asarray(matrix, dtype=float)
    if matrix.ndim != 2 or matrix.shape[0] < 2:
        raise DataError("standardize needs a 2-dimensional matrix with at least two rows")
    means = matrix.mean(axis=0)
    scales = matrix.std(axis=0, ddof=1)
    constant = np.flatnonzero(scales <= 1e-12)
    if constant.size:
        j = int(constant[0])
        name = feature_names[j] if feature_names is not None else f"#{j}"
        raise DataError(f"Feature '{name}' is constant and cannot be standardized", column=name)
    standardized = (matrix - means) / scales
    # re-center to push the column mean down to round-off
    standardized -= standardized.mean(axis=0)
    return standardized, means, scales


def unstandardize(matrix: np.ndarray, means: np.ndarray, scales: np.ndarray) -> np.ndarray:
    return np.asarray(matrix, dtype=float) * scales + means


def confusion_metrics(predicted: Sequence[int], actual: Sequence[int]) -> Metrics:
    """Accuracy, specificity and sensitivity with patients (+1) as positives."""
    predicted = np.asarray(predicted)
    actual = np.asarray(actual)
    if predicted.shape != actual.shape or predicted.ndim != 1:
        raise ValueError(
            f"predicted and actual must be 1-dimensional and of equal length, "
            f"got {predicted.shape} and {actual.shape}"
        )
    if not (np.isin(predicted, LABEL_VALUES).all() and np.isin(actual, LABEL_VALUES).all()):
        raise ValueError("labels must be +1 or -1")
    n_pos = int(np.sum(actual == POSITIVE_LABEL))
    if n_pos == 0 or n_pos == actual.size:
        raise DataError("Sensitivity and specificity are undefined when only one class is present")
    tn, fp, fn, tp = confusion_matrix(actual, predicted, labels=list(LABEL_VALUES)).ravel()
    return Metrics(
        accuracy=(tp + tn) / actual.size,
        specificity=tn / (tn + fp),
        sensitivity=tp / (tp + fn),
    )


def stratified_folds(labels: Sequence[int], k: int, seed: int) -> FoldAssignment:
    """Deterministic stratified k-fold assignment of subjects."""
    labels = np.asarray(labels)
    if k < 2:
        raise ValueError(f"k must be at least 2, got {k}")
    for value in LABEL_VALUES:
        count = int(np.sum(labels == value))
        if count < k:
            raise ValueError(f"class {value:+d} has {count} members, fewer than k={k}")
    splitter = StratifiedKFold(n_splits=k, shuffle=True, random_state=int(seed) % (2 ** 32))
    fold_of_subject = np.empty(labels.shape[0], dtype=int)
    for fold, (_, test) in enumerate(splitter.split(np.zeros((labels.shape[0], 1)), labels)):
        fold_of_subject[test] = fold
    return FoldAssignment(fold_of_subject=fold_of_subject, k=k, seed=int(seed))


def prepare_site(table: SubjectTable) -> SiteDesign:
    """Residualize, standardize and center the response, once per site."""
    residual = residualize(table)
    features, means, scales = standardize(residual.features, residual.feature_names)
    features.setflags(write=False)
    labels = table.labels
    response = labels - labels.mean()
    response.setflags(write=False)
    logger.info(
        f"Prepared site '{table.site_id}': {table.n_subjects} subjects, "
        f"{int(np.sum(labels == POSITIVE_LABEL))} patients, {table.n_features} features"
    )
    return SiteDesign(
        site_id=table.site_id,
        features=features,
        response=response,
        labels=labels,
        column_means=means,
        column_scales=scales,
    )


def check_feature_alignment(tables: Sequence[SubjectTable]) -> int:
    """Ensure every site carries the same features in the same order.

    Returns:
        int: the shared number of features
    """
    if not tables:
        raise DataError("At least one site table is required")
    reference = tables[0]
    for table in tables[1:]:
        if table.feature_names != reference.feature_names:
            raise DataError(
                f"Site '{table.site_id}' features do not match site '{reference.site_id}'"
            )
    return reference.n_features
