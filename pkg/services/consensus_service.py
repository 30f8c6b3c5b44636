"""Multi-site weighted LASSO protocol: weight aggregation, penalty
derivation and the server and site state machines.

Round r starts with a penalty broadcast (all ones at round 0), every site
answers with one report, and the server either derives the next penalty
or terminates when no site improved its accuracy.
"""
import zlib
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from services.lasso_service import (
    DEFAULT_PATH_LEN,
    DEFAULT_TOL as LASSO_TOL,
    FeatureSet,
    PenaltyVector,
    select_features,
)
from services.svm_service import DEFAULT_MAX_PASSES, DEFAULT_TOL as SVM_TOL, HyperGrid, grid_search_cv
from services.tabular_service import (
    FoldAssignment,
    Metrics,
    SiteDesign,
    SubjectTable,
    prepare_site,
    stratified_folds,
)
from utils.errors import ProtocolError
from utils.logger import get_logger

logger = get_logger(__name__)

DEFAULT_MAX_ROUNDS = 50
REASON_NO_IMPROVEMENT = "no_improvement"
REASON_MAX_ROUNDS = "max_rounds"


@dataclass(frozen=True)
class SiteRegistry:
    """Registered sites and their subject counts, ordered by site id."""

    entries: tuple[tuple[str, int], ...]

    def __post_init__(self):
        entries = tuple(sorted((str(site_id), int(n)) for site_id, n in self.entries))
        if not entries:
            raise ValueError("a registry needs at least one site")
        ids = [site_id for site_id, _ in entries]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate site ids in registry: {ids}")
        for site_id, n in entries:
            if n <= 0:
                raise ValueError(f"site '{site_id}' must have a positive subject count, got {n}")
        object.__setattr__(self, "entries", entries)

    @classmethod
    def from_counts(cls, counts: dict[str, int]) -> "SiteRegistry":
        return cls(tuple(counts.items()))

    @property
    def site_ids(self) -> tuple[str, ...]:
        return tuple(site_id for site_id, _ in self.entries)

    @property
    def total_subjects(self) -> int:
        return sum(n for _, n in self.entries)

    @property
    def m(self) -> int:
        return len(self.entries)

    def index_of(self, site_id: str) -> int:
        try:
            return self.site_ids.index(site_id)
        except ValueError:
            raise ProtocolError("Unknown site", site_id=site_id) from None


@dataclass(frozen=True)
class SiteReport:
    """What a site shares each round: indices and scalar metrics only."""

    site_id: str
    round: int
    selected: FeatureSet
    metrics: Metrics

    def __post_init__(self):
        if self.round < 0:
            raise ValueError(f"round must be non-negative, got {self.round}")


@dataclass(frozen=True, eq=False)
class WeightVector:
    weights: np.ndarray

    def __post_init__(self):
        weights = np.array(self.weights, dtype=float, copy=True)
        if weights.ndim != 1 or not np.isfinite(weights).all():
            raise ValueError("weights must be a finite vector")
        if weights.size and (weights.min() < 0.0 or weights.max() > 1.0):
            raise ValueError("weights must lie in [0, 1]")
        weights.setflags(write=False)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def zeros(cls, n_features: int) -> "WeightVector":
        return cls(np.zeros(n_features))

    @property
    def n_features(self) -> int:
        return self.weights.shape[0]


@dataclass(frozen=True)
class Continue:
    round: int
    penalty: PenaltyVector
    weights: Optional[WeightVector] = None


@dataclass(frozen=True)
class Terminate:
    round: int
    reason: str = REASON_NO_IMPROVEMENT


ServerDecision = Union[Continue, Terminate]


@dataclass
class ServerState:
    registry: SiteRegistry
    n_features: int
    max_rounds: int = DEFAULT_MAX_ROUNDS
    round: int = 0
    last_reports: dict[str, SiteReport] = field(default_factory=dict)
    previous_accuracy: dict[str, float] = field(default_factory=dict)
    terminated: bool = False

    def __post_init__(self):
        if self.max_rounds < 1:
            raise ValueError(f"max_rounds must be at least 1, got {self.max_rounds}")
        for site_id in self.registry.site_ids:
            self.previous_accuracy.setdefault(site_id, 0.0)


@dataclass(frozen=True)
class SiteConfig:
    target_fraction: float = 0.16
    path_len: int = DEFAULT_PATH_LEN
    grid: HyperGrid = field(default_factory=HyperGrid.default)
    k: int = 5
    fold_seed: int = 0
    lasso_tol: float = LASSO_TOL
    svm_tol: float = SVM_TOL
    svm_max_passes: int = DEFAULT_MAX_PASSES


@dataclass
class SiteState:
    site_id: str
    design: SiteDesign
    folds: FoldAssignment
    config: SiteConfig
    current_features: FeatureSet = field(default_factory=FeatureSet.empty)
    current_metrics: Metrics = field(default_factory=Metrics.zero)
    rounds_seen: int = 0
    last_selection_empty: bool = False
    evaluations: dict[FeatureSet, Metrics] = field(default_factory=dict, repr=False)

    @classmethod
    def create(cls, table: SubjectTable, config: SiteConfig) -> "SiteState":
        """Preprocess once and freeze the folds for every round."""
        design = prepare_site(table)
        folds = stratified_folds(design.labels, config.k, site_fold_seed(config.fold_seed, table.site_id))
        return cls(site_id=table.site_id, design=design, folds=folds, config=config)

    @property
    def n_subjects(self) -> int:
        return self.design.n_subjects

    @property
    def n_features(self) -> int:
        return self.design.n_features


def site_fold_seed(base_seed: int, site_id: str) -> int:
    """Per-site fold seed, stable across processes and platforms."""
    return (int(base_seed) + zlib.crc32(site_id.encode("utf-8"))) % (2 ** 32)


def initial_penalty(n_features: int) -> PenaltyVector:
    """Round-0 broadcast: ordinary LASSO."""
    return PenaltyVector.ones(n_features)


def site_proportions(registry: SiteRegistry) -> np.ndarray:
    counts = np.array([n for _, n in registry.entries], dtype=float)
    return counts / registry.total_subjects


def _reports_by_site(reports: Sequence[SiteReport], registry: SiteRegistry) -> dict[str, SiteReport]:
    by_site: dict[str, SiteReport] = {}
    for report in reports:
        if report.site_id not in registry.site_ids:
            raise ProtocolError("Report from unregistered site", round=report.round, site_id=report.site_id)
        if report.site_id in by_site:
            raise ProtocolError("Duplicate report", round=report.round, site_id=report.site_id)
        by_site[report.site_id] = report
    missing = [site_id for site_id in registry.site_ids if site_id not in by_site]
    if missing:
        raise ProtocolError(f"Missing reports from: {', '.join(missing)}", site_id=missing[0])
    rounds = {report.round for report in reports}
    if len(rounds) != 1:
        raise ProtocolError(f"Reports mix rounds {sorted(rounds)}")
    return by_site


def aggregate_weights(reports: Sequence[SiteReport], registry: SiteRegistry, n_features: int) -> WeightVector:
    """W_f = sum over sites selecting f of accuracy * proportion, divided by m."""
    by_site = _reports_by_site(reports, registry)
    proportions = site_proportions(registry)
    weights = np.zeros(n_features)
    bound = 0.0
    for site_id, proportion in zip(registry.site_ids, proportions):
        report = by_site[site_id]
        try:
            report.selected.validate(n_features)
        except ValueError as e:
            raise ProtocolError(str(e), round=report.round, site_id=site_id) from e
        contribution = report.metrics.accuracy * proportion
        bound += contribution
        if report.selected.size:
            weights[list(report.selected.indices)] += contribution
    weights /= registry.m
    bound /= registry.m
    if weights.size and weights.max() > bound + 1e-12:
        raise AssertionError(f"weight {weights.max()} exceeds its bound {bound}")
    return WeightVector(weights)


def penalty_from_weights(w: WeightVector) -> PenaltyVector:
    return PenaltyVector(1.0 - w.weights)


def server_step(state: ServerState, reports: Sequence[SiteReport]) -> ServerDecision:
    """Judge one round of reports and decide the next broadcast."""
    if state.terminated:
        raise ProtocolError("Reports received after termination", round=state.round)
    by_site = _reports_by_site(reports, state.registry)
    report_round = next(iter(by_site.values())).round
    if report_round != state.round:
        raise ProtocolError(f"Expected reports for round {state.round}, got round {report_round}")

    improved = [
        site_id
        for site_id, report in by_site.items()
        if report.metrics.accuracy > state.previous_accuracy[site_id]
    ]
    for site_id, report in by_site.items():
        state.previous_accuracy[site_id] = report.metrics.accuracy
        state.last_reports[site_id] = report

    if not improved:
        state.terminated = True
        logger.info(f"Round {state.round}: no site improved, terminating")
        return Terminate(round=state.round + 1, reason=REASON_NO_IMPROVEMENT)
    if state.round + 1 >= state.max_rounds:
        state.terminated = True
        logger.warning(f"Round {state.round}: reached max_rounds={state.max_rounds}, terminating")
        return Terminate(round=state.round + 1, reason=REASON_MAX_ROUNDS)

    weights = aggregate_weights(list(by_site.values()), state.registry, state.n_features)
    penalty = penalty_from_weights(weights)
    state.round += 1
    logger.info(
        f"Round {state.round - 1}: improved at {', '.join(sorted(improved))}; "
        f"penalty range [{penalty.factors.min():.4f}, {penalty.factors.max():.4f}]"
    )
    return Continue(round=state.round, penalty=penalty, weights=weights)


def evaluate_features(state: SiteState, features: FeatureSet) -> Metrics:
    """Cross-validated metrics of the SVM restricted to ``features``.

    Results are memoized per feature set; the data and folds never change.
    """
    cached = state.evaluations.get(features)
    if cached is not None:
        logger.debug(f"Site '{state.site_id}': reusing evaluation of {features.size} features")
        return cached
    config = state.config
    columns = state.design.features[:, list(features.indices)]
    result = grid_search_cv(
        columns,
        state.design.labels,
        config.grid,
        state.folds,
        tol=config.svm_tol,
        max_passes=config.svm_max_passes,
    )
    state.evaluations[features] = result.metrics
    logger.debug(
        f"Site '{state.site_id}': {features.size} features -> accuracy {result.metrics.accuracy:.4f} "
        f"(C={result.c:g}, gamma={result.gamma:g})"
    )
    return result.metrics


def site_step(state: SiteState, penalty: PenaltyVector, round: Optional[int] = None) -> SiteReport:
    """Run one site round: select, evaluate if new, accept on strict improvement."""
    if penalty.n_features != state.n_features:
        raise ProtocolError(
            f"Penalty has {penalty.n_features} factors, site has {state.n_features} features",
            round=round,
            site_id=state.site_id,
        )
    if round is None:
        round = state.rounds_seen
    config = state.config

    candidate = select_features(
        state.design.features,
        state.design.response,
        penalty,
        config.target_fraction,
        path_len=config.path_len,
        tol=config.lasso_tol,
    )
    state.last_selection_empty = candidate.size == 0

    if candidate == state.current_features:
        logger.info(f"Site '{state.site_id}' round {round}: selection unchanged ({candidate.size} features)")
    elif candidate.size == 0:
        logger.warning(f"Site '{state.site_id}' round {round}: empty selection, keeping previous features")
    else:
        metrics = evaluate_features(state, candidate)
        if metrics.accuracy > state.current_metrics.accuracy:
            logger.info(
                f"Site '{state.site_id}' round {round}: accepted {candidate.size} features, "
                f"accuracy {state.current_metrics.accuracy:.4f} -> {metrics.accuracy:.4f}"
            )
            state.current_features = candidate
            state.current_metrics = metrics
        else:
            logger.info(
                f"Site '{state.site_id}' round {round}: rejected {candidate.size} features "
                f"(accuracy {metrics.accuracy:.4f} <= {state.current_metrics.accuracy:.4f})"
            )

    state.rounds_seen = round + 1
    return SiteReport(
        site_id=state.site_id,
        round=round,
        selected=state.current_features,
        metrics=state.current_metrics,
    )
