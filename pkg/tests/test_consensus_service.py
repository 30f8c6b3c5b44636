import numpy as np
import pytest

import services.consensus_service as consensus_service
from services.cohort_service import CohortConfig, generate_cohort
from services.consensus_service import (
    REASON_MAX_ROUNDS,
    REASON_NO_IMPROVEMENT,
    Continue,
    ServerState,
    SiteConfig,
    SiteRegistry,
    SiteReport,
    SiteState,
    Terminate,
    WeightVector,
    aggregate_weights,
    initial_penalty,
    penalty_from_weights,
    server_step,
    site_fold_seed,
    site_proportions,
    site_step,
)
from services.lasso_service import FeatureSet, PenaltyVector
from services.svm_service import GridSearchResult, HyperGrid
from services.tabular_service import Metrics
from utils.errors import ProtocolError

SMALL_GRID = HyperGrid(c_values=(1.0, 8.0), gamma_values=(0.01, 0.1))


def report(site_id, accuracy, selected=(0,), round=0):
    return SiteReport(
        site_id=site_id,
        round=round,
        selected=FeatureSet(selected),
        metrics=Metrics(accuracy, accuracy, accuracy),
    )


@pytest.fixture
def registry():
    return SiteRegistry.from_counts({"site1": 50, "site2": 50})


@pytest.fixture
def site_state():
    cohort = CohortConfig(
        site_sizes=(40,),
        patient_fractions=(0.5,),
        age_means=(40.0,),
        age_sds=(10.0,),
        female_fractions=(0.5,),
        n_features=12,
        planted_support=3,
        effect_size=1.5,
        seed=2,
    )
    table = generate_cohort(cohort)[0]
    return SiteState.create(table, SiteConfig(target_fraction=0.25, path_len=30, grid=SMALL_GRID))


@pytest.fixture
def mock_selection(mocker):
    """Patch the LASSO and the SVM grid search inside the site step."""
    select = mocker.patch("services.consensus_service.select_features")
    search = mocker.patch("services.consensus_service.grid_search_cv")

    def evaluate_to(*accuracies):
        search.side_effect = [GridSearchResult(1.0, 0.1, Metrics(a, a, a)) for a in accuracies]

    return select, search, evaluate_to


def test_registry_orders_sites_and_rejects_duplicates():
    """Test that the registry sorts site ids and rejects duplicates."""
    registry = SiteRegistry((("b", 10), ("a", 5)))
    assert registry.site_ids == ("a", "b")
    assert registry.total_subjects == 15
    with pytest.raises(ValueError, match="duplicate"):
        SiteRegistry((("a", 1), ("a", 2)))
    with pytest.raises(ValueError, match="positive"):
        SiteRegistry((("a", 0),))


def test_site_proportions():
    """Test that site proportions are subject shares summing to one."""
    sizes = (45, 110, 130, 172, 100)
    registry = SiteRegistry.from_counts({f"site{s + 1}": n for s, n in enumerate(sizes)})
    proportions = site_proportions(registry)
    assert registry.total_subjects == 557
    assert proportions[0] == pytest.approx(45 / 557)
    assert proportions.sum() == pytest.approx(1.0, abs=1e-12)
    assert site_proportions(SiteRegistry.from_counts({"only": 7})).tolist() == [1.0]
    assert site_proportions(SiteRegistry.from_counts({"a": 3, "b": 3})).tolist() == [0.5, 0.5]


def test_aggregate_weights_hand_evaluated(registry):
    """Test that aggregation reproduces hand-computed weights."""
    reports = [report("site1", 0.8, selected=(0, 1)), report("site2", 0.6, selected=(0,))]
    weights = aggregate_weights(reports, registry, n_features=3)
    assert weights.weights[0] == pytest.approx(0.35)
    assert weights.weights[1] == pytest.approx(0.20)
    assert weights.weights[2] == 0.0


def test_aggregate_weights_rejects_bad_report_sets(registry):
    """Test that aggregation rejects missing, duplicate, mixed-round, unregistered or out-of-range reports."""
    with pytest.raises(ProtocolError, match="site2"):
        aggregate_weights([report("site1", 0.8)], registry, 3)
    with pytest.raises(ProtocolError, match="Duplicate"):
        aggregate_weights([report("site1", 0.8), report("site1", 0.7), report("site2", 0.6)], registry, 3)
    with pytest.raises(ProtocolError, match="mix rounds"):
        aggregate_weights([report("site1", 0.8), report("site2", 0.6, round=1)], registry, 3)
    with pytest.raises(ProtocolError, match="unregistered"):
        aggregate_weights([report("site1", 0.8), report("site2", 0.6), report("site9", 0.6)], registry, 3)
    with pytest.raises(ProtocolError, match="out of range"):
        aggregate_weights([report("site1", 0.8, selected=(5,)), report("site2", 0.6)], registry, 3)


def test_weights_stay_below_one_over_m_and_grow_with_selecting_sites():
    """Test that weights stay within 1/m and grow when a site also selects."""
    rng = np.random.default_rng(0)
    for _ in range(50):
        m = int(rng.integers(1, 6))
        p = 10
        registry = SiteRegistry.from_counts({f"s{s}": int(rng.integers(5, 200)) for s in range(m)})
        accuracies = rng.uniform(0.01, 1.0, size=m)
        masks = rng.random((m, p)) < 0.4
        reports = [
            report(site_id, accuracies[s], selected=tuple(np.flatnonzero(masks[s])))
            for s, site_id in enumerate(registry.site_ids)
        ]
        weights = aggregate_weights(reports, registry, p).weights
        assert np.all(weights >= 0.0)
        assert np.all(weights <= 1.0 / m + 1e-12)
        penalty = penalty_from_weights(WeightVector(weights))
        assert np.all(penalty.factors >= 1.0 - 1.0 / m - 1e-12)

        extended = masks.copy()
        extended[0, :] = True
        more = [
            report(site_id, accuracies[s], selected=tuple(np.flatnonzero(extended[s])))
            for s, site_id in enumerate(registry.site_ids)
        ]
        assert np.all(aggregate_weights(more, registry, p).weights >= weights)


def test_feature_selected_everywhere_outweighs_subset(registry):
    """Test that a feature chosen by every site weighs at least as much as one chosen by fewer."""
    reports = [report("site1", 0.7, selected=(0, 1)), report("site2", 0.7, selected=(0,))]
    weights = aggregate_weights(reports, registry, 2).weights
    assert weights[0] >= weights[1]


def test_penalty_from_weights():
    """Test that the penalty is one minus the weight."""
    penalty = penalty_from_weights(WeightVector([0.0, 0.35]))
    np.testing.assert_allclose(penalty.factors, [1.0, 0.65])
    assert penalty_from_weights(WeightVector.zeros(4)) == initial_penalty(4)
    assert initial_penalty(4).is_ordinary()


def test_server_continues_after_round_zero(registry):
    """Test that round 0 always continues with new penalties."""
    state = ServerState(registry=registry, n_features=3)
    decision = server_step(state, [report("site1", 0.8, (0, 1)), report("site2", 0.6, (0,))])
    assert isinstance(decision, Continue)
    assert decision.round == 1
    np.testing.assert_allclose(decision.penalty.factors, [0.65, 0.8, 1.0])
    assert state.previous_accuracy == {"site1": 0.8, "site2": 0.6}


def test_server_terminates_when_no_site_improves(registry):
    """Test that the server stops when every site echoes its set."""
    state = ServerState(registry=registry, n_features=3)
    server_step(state, [report("site1", 0.8), report("site2", 0.6)])
    decision = server_step(state, [report("site1", 0.8, round=1), report("site2", 0.6, round=1)])
    assert decision == Terminate(round=2, reason=REASON_NO_IMPROVEMENT)
    assert state.terminated
    with pytest.raises(ProtocolError, match="after termination"):
        server_step(state, [report("site1", 0.9, round=2), report("site2", 0.6, round=2)])


def test_server_continues_when_one_site_improves(registry):
    """Test that a single improving site keeps the protocol running."""
    state = ServerState(registry=registry, n_features=3)
    server_step(state, [report("site1", 0.70), report("site2", 0.6)])
    decision = server_step(state, [report("site1", 0.72, round=1), report("site2", 0.6, round=1)])
    assert isinstance(decision, Continue)
    assert decision.round == 2


def test_server_terminates_at_max_rounds(registry):
    """Test that the round cap ends the protocol."""
    state = ServerState(registry=registry, n_features=3, max_rounds=1)
    decision = server_step(state, [report("site1", 0.8), report("site2", 0.6)])
    assert decision == Terminate(round=1, reason=REASON_MAX_ROUNDS)


def test_server_rejects_reports_for_another_round(registry):
    """Test that reports for the wrong round are a protocol error."""
    state = ServerState(registry=registry, n_features=3)
    with pytest.raises(ProtocolError, match="Expected reports for round 0"):
        server_step(state, [report("site1", 0.8, round=1), report("site2", 0.6, round=1)])


def test_site_fold_seed_is_stable_per_site():
    """Test that the fold seed depends only on the base seed and site id."""
    assert site_fold_seed(0, "site1") == site_fold_seed(0, "site1")
    assert site_fold_seed(0, "site1") != site_fold_seed(0, "site2")
    assert site_fold_seed(1, "site1") == (site_fold_seed(0, "site1") + 1) % 2 ** 32


def test_site_step_adopts_first_selection(site_state, mock_selection):
    """Test that the first selection is adopted with its metrics."""
    select, search, evaluate_to = mock_selection
    select.return_value = FeatureSet((0, 3))
    evaluate_to(0.7)

    result = site_step(site_state, initial_penalty(12))

    assert result == report("site1", 0.7, selected=(0, 3))
    assert site_state.rounds_seen == 1
    search.assert_called_once()


def test_site_step_unchanged_selection_skips_svm(site_state, mock_selection):
    """Test that an unchanged selection is echoed without re-running the SVM."""
    select, search, evaluate_to = mock_selection
    select.return_value = FeatureSet((0, 3))
    evaluate_to(0.7)
    site_step(site_state, initial_penalty(12), round=0)

    result = site_step(site_state, initial_penalty(12), round=1)

    assert result.selected == FeatureSet((0, 3))
    assert result.round == 1
    search.assert_called_once()


def test_site_step_keeps_old_set_on_equal_accuracy(site_state, mock_selection):
    """Test that equal accuracy keeps the previously accepted set."""
    select, _, evaluate_to = mock_selection
    select.side_effect = [FeatureSet((0, 3)), FeatureSet((1, 2))]
    evaluate_to(0.7, 0.7)
    site_step(site_state, initial_penalty(12), round=0)

    result = site_step(site_state, initial_penalty(12), round=1)

    assert result.selected == FeatureSet((0, 3))
    assert result.metrics.accuracy == 0.7


def test_site_step_empty_selection_keeps_old_set(site_state, mock_selection):
    """Test that an empty selection keeps the old set and raises the local flag."""
    select, search, evaluate_to = mock_selection
    select.side_effect = [FeatureSet((0, 3)), FeatureSet((), flagged=True)]
    evaluate_to(0.7)
    site_step(site_state, initial_penalty(12), round=0)

    result = site_step(site_state, initial_penalty(12), round=1)

    assert result.selected == FeatureSet((0, 3))
    assert site_state.last_selection_empty
    search.assert_called_once()


def test_site_step_reuses_cached_evaluations(site_state, mock_selection):
    """Test that a feature set already evaluated is not evaluated again."""
    select, search, evaluate_to = mock_selection
    a, b, c = FeatureSet((0, 3)), FeatureSet((1, 2)), FeatureSet((4, 5))
    select.side_effect = [a, b, c, b]
    evaluate_to(0.7, 0.6, 0.8)

    for round in range(4):
        result = site_step(site_state, initial_penalty(12), round=round)

    assert search.call_count == 3
    assert result.selected == c
    assert result.metrics.accuracy == 0.8


def test_site_step_rejects_penalty_of_wrong_length(site_state):
    """Test that a penalty of the wrong length is rejected."""
    with pytest.raises(ProtocolError, match="11 factors"):
        site_step(site_state, initial_penalty(11))


def test_site_step_end_to_end(site_state, mocker):
    """Test that a real site step selects features and runs the grid search once."""
    spy = mocker.spy(consensus_service, "grid_search_cv")

    first = site_step(site_state, initial_penalty(12), round=0)
    second = site_step(site_state, initial_penalty(12), round=1)

    assert first.selected.size > 0
    assert 0.0 < first.metrics.accuracy <= 1.0
    assert second == SiteReport("site1", 1, first.selected, first.metrics)
    assert spy.call_count == 1


def test_site_step_monotone_under_changing_penalties(site_state):
    """Test that accepted accuracy never drops over a series of penalties."""
    rng = np.random.default_rng(1)
    accuracy = 0.0
    for round in range(4):
        penalty = PenaltyVector(1.0 - rng.uniform(0.0, 0.5, size=12)) if round else initial_penalty(12)
        result = site_step(site_state, penalty, round=round)
        assert result.metrics.accuracy >= accuracy
        accuracy = result.metrics.accuracy
