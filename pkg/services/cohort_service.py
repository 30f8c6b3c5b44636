"""Synthetic multi-site cohorts and the per-site CSV format.

CSV schema, one file per site named ``<site_id>.csv``::

    subject_id,label,age,sex,icv,<feature_1>,...,<feature_p>

label is 1 (patient) or -1 (control), sex is 0 or 1 and ICV is in mm^3.
"""
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, Union

import numpy as np
import pandas as pd

from services.tabular_service import COVARIATE_NAMES, SubjectTable
from utils.errors import DataError
from utils.logger import get_logger

logger = get_logger(__name__)

HEADER_PREFIX = ("subject_id", "label") + COVARIATE_NAMES

# Five-site demographics: sizes, patient counts, pooled age and share of women
DEFAULT_SITE_SIZES = (45, 110, 130, 172, 100)
DEFAULT_PATIENT_FRACTIONS = (22 / 45, 54 / 110, 69 / 130, 101 / 172, 53 / 100)
DEFAULT_AGE_MEANS = (42.96, 37.96, 49.67, 41.16, 40.25)
DEFAULT_AGE_SDS = (14.1, 9.9, 8.6, 12.2, 11.6)
DEFAULT_FEMALE_FRACTIONS = (0.7333, 0.6000, 0.6077, 0.6047, 0.5700)

ICV_MEAN = 1.55e6
ICV_SD = 1.2e5
ICV_FEMALE_SHIFT = -1.3e5


@dataclass(frozen=True)
class CohortConfig:
    site_sizes: tuple[int, ...] = DEFAULT_SITE_SIZES
    n_features: int = 152
    planted_support: int = 24
    effect_size: float = 0.6
    site_noise: float = 0.5
    covariate_loadings: tuple[float, float, float] = (0.3, 0.2, 0.4)
    patient_fractions: tuple[float, ...] = DEFAULT_PATIENT_FRACTIONS
    age_means: tuple[float, ...] = DEFAULT_AGE_MEANS
    age_sds: tuple[float, ...] = DEFAULT_AGE_SDS
    female_fractions: tuple[float, ...] = DEFAULT_FEMALE_FRACTIONS
    site_ids: tuple[str, ...] = field(default=())
    seed: int = 0

    def __post_init__(self):
        for name in ("site_sizes", "covariate_loadings", "patient_fractions", "age_means",
                     "age_sds", "female_fractions", "site_ids"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        m = len(self.site_sizes)
        if m == 0:
            raise DataError("site_sizes must not be empty")
        if not self.site_ids:
            object.__setattr__(self, "site_ids", tuple(f"site{s + 1}" for s in range(m)))
        for name in ("patient_fractions", "age_means", "age_sds", "female_fractions", "site_ids"):
            if len(getattr(self, name)) != m:
                raise DataError(f"{name} must have one entry per site ({m})")
        if len(set(self.site_ids)) != m:
            raise DataError("site_ids must be unique")
        if any(n <= 0 for n in self.site_sizes):
            raise DataError("site sizes must be positive")
        for name in ("patient_fractions", "female_fractions"):
            if any(not 0.0 < f < 1.0 for f in getattr(self, name)):
                raise DataError(f"{name} must lie in (0, 1)")
        if any(sd <= 0 for sd in self.age_sds):
            raise DataError("age_sds must be positive")
        if not 0 <= self.planted_support <= self.n_features:
            raise DataError(f"planted_support must lie in [0, n_features={self.n_features}]")
        if len(self.covariate_loadings) != len(COVARIATE_NAMES):
            raise DataError("covariate_loadings needs one value per covariate (age, sex, icv)")
        if self.effect_size < 0 or self.site_noise < 0:
            raise DataError("effect_size and site_noise must be non-negative")
        for site_id, n in zip(self.site_ids, self.site_sizes):
            patients = self.patient_count(site_id)
            if patients < 2 or n - patients < 2:
                raise DataError(
                    f"Site '{site_id}': {patients} patients out of {n} leaves a class with fewer than 2 subjects"
                )

    @property
    def m(self) -> int:
        return len(self.site_sizes)

    def patient_count(self, site_id: str) -> int:
        s = self.site_ids.index(site_id)
        return int(math.floor(self.patient_fractions[s] * self.site_sizes[s] + 0.5))


def feature_names(n_features: int) -> tuple[str, ...]:
    return tuple(f"feature_{j:03d}" for j in range(n_features))


def _shared_structure(config: CohortConfig, rng: np.random.Generator):
    support = np.sort(rng.choice(config.n_features, size=config.planted_support, replace=False))
    signs = rng.choice(np.array([-1.0, 1.0]), size=config.planted_support)
    multipliers = rng.normal(1.0, 0.25, size=(len(COVARIATE_NAMES), config.n_features))
    loadings = multipliers * np.asarray(config.covariate_loadings)[:, None]
    return support, signs, loadings


def planted_support(config: CohortConfig) -> tuple[int, ...]:
    """Ground-truth informative features of ``generate_cohort(config)``."""
    shared_seq = np.random.SeedSequence(config.seed).spawn(config.m + 1)[0]
    support, _, _ = _shared_structure(config, np.random.default_rng(shared_seq))
    return tuple(int(j) for j in support)


def generate_cohort(config: CohortConfig) -> list[SubjectTable]:
    """One SubjectTable per site.

    Patients are shifted by ``effect_size`` noise standard deviations on a
    support shared by all sites; covariates leak linearly into every feature
    and each site gets its own noise scale and offsets.
    """
    shared_seq, *site_seqs = np.random.SeedSequence(config.seed).spawn(config.m + 1)
    support, signs, loadings = _shared_structure(config, np.random.default_rng(shared_seq))
    names = feature_names(config.n_features)

    tables = []
    for s, site_id in enumerate(config.site_ids):
        rng = np.random.default_rng(site_seqs[s])
        n = config.site_sizes[s]
        n_patients = config.patient_count(site_id)
        labels = rng.permutation(np.r_[np.ones(n_patients, dtype=int), -np.ones(n - n_patients, dtype=int)])

        age = rng.normal(config.age_means[s], config.age_sds[s], size=n)
        sex = (rng.random(n) < config.female_fractions[s]).astype(float)
        icv = rng.normal(ICV_MEAN, ICV_SD, size=n) + ICV_FEMALE_SHIFT * sex
        covariates = np.column_stack([age, sex, icv])

        noise_scale = 1.0 + config.site_noise * rng.random()
        offsets = rng.normal(0.0, config.site_noise, size=config.n_features)
        features = rng.normal(0.0, noise_scale, size=(n, config.n_features)) + offsets

        standardized_covariates = np.column_stack([(age - 45.0) / 12.0, sex - 0.5, (icv - ICV_MEAN) / ICV_SD])
        features += standardized_covariates @ loadings
        if support.size:
            patients = labels == 1
            features[np.ix_(patients, support)] += signs * config.effect_size * noise_scale

        tables.append(
            SubjectTable(
                site_id=site_id,
                features=features,
                feature_names=names,
                covariates=covariates,
                labels=labels,
                subject_ids=tuple(f"{site_id}-{i:04d}" for i in range(n)),
            )
        )
        logger.debug(f"Generated site '{site_id}': {n} subjects, {n_patients} patients, noise {noise_scale:.3f}")

    logger.info(
        f"Generated cohort of {config.m} sites, {sum(config.site_sizes)} subjects, "
        f"{config.n_features} features ({config.planted_support} informative), seed {config.seed}"
    )
    return tables


def _parse_column(frame: pd.DataFrame, column: str) -> np.ndarray:
    raw = frame[column]
    try:
        values = raw.to_numpy(dtype=str).astype(float)
        bad = np.flatnonzero(~np.isfinite(values))
        if bad.size:
            raise DataError(f"Non-finite value {raw.iloc[bad[0]]!r}", row=int(bad[0]) + 1, column=column)
        return values
    except DataError:
        raise
    except ValueError:
        for position, cell in enumerate(raw):
            try:
                float(cell)
            except ValueError:
                kind = "Missing value" if cell.strip() == "" else f"Non-numeric value {cell!r}"
                raise DataError(kind, row=position + 1, column=column) from None
        raise


def load_csv(path: Union[str, Path]) -> SubjectTable:
    """Read one site's CSV; the site id is the file stem."""
    path = Path(path)
    try:
        # the raw header row; read_csv alone renames repeats to f, f.1
        header = pd.read_csv(path, header=None, nrows=1, dtype=str, keep_default_na=False, encoding="utf-8")
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise DataError(f"Cannot read {path}: {e}") from e

    raw_columns = pd.Index(header.iloc[0])
    duplicates = raw_columns[raw_columns.duplicated()]
    if len(duplicates):
        raise DataError(f"{path.name}: duplicate column", column=duplicates[0])
    columns = list(frame.columns)
    for position, expected in enumerate(HEADER_PREFIX):
        if expected not in columns:
            raise DataError(f"{path.name}: missing column", column=expected)
        if columns[position] != expected:
            raise DataError(f"{path.name}: column '{expected}' must be at position {position + 1}", column=expected)
    names = columns[len(HEADER_PREFIX):]
    if not names:
        raise DataError(f"{path.name}: no feature columns")

    subject_ids = frame["subject_id"].tolist()
    seen = {}
    for position, subject_id in enumerate(subject_ids):
        if subject_id.strip() == "":
            raise DataError(f"{path.name}: missing subject id", row=position + 1, column="subject_id")
        if subject_id in seen:
            raise DataError(f"{path.name}: duplicate subject id {subject_id!r}", row=position + 1, column="subject_id")
        seen[subject_id] = position

    labels = _parse_column(frame, "label")
    bad = np.flatnonzero(~np.isin(labels, (1.0, -1.0)))
    if bad.size:
        raise DataError(f"{path.name}: label must be 1 or -1", row=int(bad[0]) + 1, column="label")
    covariates = np.column_stack([_parse_column(frame, name) for name in COVARIATE_NAMES])
    bad = np.flatnonzero(~np.isin(covariates[:, 1], (0.0, 1.0)))
    if bad.size:
        raise DataError(f"{path.name}: sex must be 0 or 1", row=int(bad[0]) + 1, column="sex")
    features = np.column_stack([_parse_column(frame, name) for name in names])

    table = SubjectTable(
        site_id=path.stem,
        features=features,
        feature_names=tuple(names),
        covariates=covariates,
        labels=labels.astype(int),
        subject_ids=tuple(subject_ids),
    )
    logger.info(f"Loaded site '{table.site_id}' from {path}: {table.n_subjects} subjects, {table.n_features} features")
    return table


def write_csv(table: SubjectTable, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    subject_ids = table.subject_ids or tuple(f"{table.site_id}-{i:04d}" for i in range(table.n_subjects))
    frame = pd.DataFrame({"subject_id": list(subject_ids), "label": table.labels})
    for k, name in enumerate(COVARIATE_NAMES):
        frame[name] = table.covariates[:, k]
    features = pd.DataFrame(table.features, columns=list(table.feature_names))
    frame = pd.concat([frame, features], axis=1)
    frame.to_csv(path, index=False, float_format="%.17g", lineterminator="\n", encoding="utf-8")
    logger.debug(f"Wrote site '{table.site_id}' to {path}")
    return path


def write_cohort(tables: Sequence[SubjectTable], out_dir: Union[str, Path]) -> list[Path]:
    out_dir = Path(out_dir)
    return [write_csv(table, out_dir / f"{table.site_id}.csv") for table in tables]
