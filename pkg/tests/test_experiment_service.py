import json
import threading
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from config import ExperimentConfig
from services.cohort_service import CohortConfig, generate_cohort, planted_support
from services.consensus_service import REASON_MAX_ROUNDS, SiteState
from services.experiment_service import (
    METRICS_FILE,
    PERSISTENCE_FILE,
    SWEEP_SUMMARY_FILE,
    TRANSCRIPT_FILE,
    replay_transcript,
    run_experiment,
    run_protocol,
    run_sweep,
    simulate,
)
from services.svm_service import HyperGrid
from services.transport_service import SiteNode, SocketServerTransport, SocketSiteClient
from utils.errors import ProtocolError

SMALL_COHORT = {
    "site_sizes": [30, 36, 40],
    "patient_fractions": [0.5, 0.5, 0.55],
    "age_means": [40.0, 45.0, 50.0],
    "age_sds": [10.0, 9.0, 11.0],
    "female_fractions": [0.6, 0.5, 0.55],
    "n_features": 20,
    "planted_support": 4,
    "effect_size": 0.9,
    "seed": 5,
}
SMALL_GRID = {"c_values": [0.5, 8.0], "gamma_values": [0.03125, 0.25]}


def small_config(tmp_path, **overrides):
    raw = {
        "cohort": SMALL_COHORT,
        "svm_grid": SMALL_GRID,
        "sparsity_fraction": 0.2,
        "path_len": 20,
        "max_rounds": 10,
        "output_dir": str(tmp_path / "results"),
    }
    return ExperimentConfig.from_dict(raw, **overrides)


@pytest.fixture
def config(tmp_path):
    return small_config(tmp_path)


@pytest.fixture
def transcript(config):
    return run_experiment(config)


def transcript_path(config):
    return Path(config.output_dir) / TRANSCRIPT_FILE


def read_lines(path):
    return path.read_text(encoding="utf-8").splitlines(keepends=True)


def test_simulation_terminates_with_contiguous_rounds(config, transcript):
    """Test that a simulation terminates with rounds numbered 0..n-1."""
    assert transcript.terminate is not None
    assert [record.round for record in transcript.rounds] == list(range(len(transcript.rounds)))
    assert transcript.terminate.round == len(transcript.rounds)
    assert len(transcript.rounds) <= config.max_rounds
    assert transcript.rounds[0].penalty.is_ordinary()
    assert transcript.rounds[-1].weights is None


def test_accepted_accuracy_never_decreases(config, transcript):
    """Test that each site's accepted accuracy is non-decreasing."""
    metrics = pd.read_csv(f"{config.output_dir}/{METRICS_FILE}")
    assert list(metrics.columns) == ["round", "site", "acc", "spe", "sen"]
    for _, rows in metrics.groupby("site"):
        assert rows.sort_values("round")["acc"].is_monotonic_increasing


def test_summary_matches_per_round_table(config, transcript):
    """Test that the summary agrees with the per-round metrics CSV."""
    metrics = pd.read_csv(f"{config.output_dir}/{METRICS_FILE}")
    summary = transcript.summary()
    last_round = metrics["round"].max()
    for entry in summary["per_site"]:
        rows = metrics[metrics["site"] == entry["site_id"]].set_index("round")
        expected = rows.loc[last_round, "acc"] - rows.loc[0, "acc"]
        assert entry["accuracy_improvement"] == pytest.approx(expected, abs=1e-15)
    assert summary["mean_accuracy_improvement"] == pytest.approx(
        np.mean([entry["accuracy_improvement"] for entry in summary["per_site"]])
    )
    assert summary["mean_accuracy_improvement"] >= 0.0
    assert summary["union_sizes"] == [len(record.union()) for record in transcript.rounds]


def test_feature_persistence_counts_selections(config, transcript):
    """Test that feature persistence counts the selecting sites per round."""
    persistence = pd.read_csv(f"{config.output_dir}/{PERSISTENCE_FILE}")
    assert persistence["feature"].tolist() == list(range(20))
    for record in transcript.rounds:
        column = persistence[f"round_{record.round}"]
        assert column.sum() == sum(report.selected.size for report in record.reports)
        assert column.max() <= 3
    top = transcript.summary()["top_features"]
    assert len(top) <= 5
    assert [item["n_sites"] for item in top] == sorted((item["n_sites"] for item in top), reverse=True)


def test_transcript_file_layout(config, transcript):
    """Test that the transcript has registry, rounds, terminate and summary records."""
    records = [json.loads(line) for line in read_lines(transcript_path(config))]
    assert [r["type"] for r in records] == ["registry"] + ["round"] * len(transcript.rounds) + ["terminate", "summary"]
    assert records[0]["sites"] == [
        {"site_id": "site1", "n_subjects": 30},
        {"site_id": "site2", "n_subjects": 36},
        {"site_id": "site3", "n_subjects": 40},
    ]
    assert records[-2] == {"type": "terminate", "round": transcript.terminate.round, "reason": transcript.terminate.reason}


def test_same_config_gives_byte_identical_outputs(tmp_path, config, transcript):
    """Test that rerunning a config reproduces every output byte for byte."""
    again = small_config(tmp_path, output_dir=str(tmp_path / "again"))
    run_experiment(again)
    for name in (TRANSCRIPT_FILE, METRICS_FILE, PERSISTENCE_FILE):
        first = (tmp_path / "results" / name).read_bytes()
        assert first == (tmp_path / "again" / name).read_bytes()


def test_parallel_sites_match_sequential(config, transcript):
    """Test that running sites in parallel gives the same transcript."""
    tables = generate_cohort(config.cohort)
    parallel = simulate(tables, config.site_config(), config.max_rounds, workers=3)
    assert parallel.to_lines() == transcript.to_lines()


def test_socket_backend_matches_in_process(config, transcript):
    """Test that the socket transport gives the in-process transcript."""
    tables = generate_cohort(config.cohort)
    site_config = config.site_config()
    with SocketServerTransport("127.0.0.1", 0, n_sites=len(tables), accept_timeout=30.0) as server:
        host, port = server.address
        clients = [
            SocketSiteClient(SiteNode(SiteState.create(table, site_config)), host, port, connect_timeout=30.0)
            for table in tables
        ]
        threads = [threading.Thread(target=client.run, daemon=True) for client in clients]
        for thread in threads:
            thread.start()
        over_sockets = run_protocol(server, config.max_rounds, barrier_timeout=60.0)
        for thread in threads:
            thread.join(timeout=30.0)
    assert over_sockets.to_lines() == transcript.to_lines()


def test_replay_reproduces_recorded_decisions(config, transcript):
    """Test that replay reproduces every recorded penalty and the terminate."""
    lines = read_lines(transcript_path(config))
    assert replay_transcript(lines) == len(transcript.rounds)


def test_replay_detects_tampered_report(config, transcript):
    """Test that a changed report makes replay fail."""
    lines = read_lines(transcript_path(config))
    record = json.loads(lines[1])
    record["reports"][0]["accuracy"] = 0.0
    tampered = [lines[0], json.dumps(record)] + lines[2:]
    with pytest.raises(ProtocolError):
        replay_transcript(tampered)


def test_replay_requires_registry_and_terminate(config, transcript):
    """Test that replay needs both the registry and the terminate record."""
    lines = read_lines(transcript_path(config))
    with pytest.raises(ProtocolError, match="registry"):
        replay_transcript(lines[1:])
    with pytest.raises(ProtocolError, match="terminate"):
        replay_transcript([line for line in lines if '"type":"terminate"' not in line])


def test_max_rounds_cap_terminates_early(tmp_path):
    """Test that max_rounds=1 stops after a single round."""
    transcript = run_experiment(small_config(tmp_path, max_rounds=1))
    assert len(transcript.rounds) == 1
    assert transcript.terminate.round == 1
    assert transcript.terminate.reason == REASON_MAX_ROUNDS


def test_union_recall_of_planted_support(config, transcript):
    """Test that planted-support recall is reported per round within [0, 1]."""
    planted = planted_support(config.cohort)
    recall = transcript.union_recall(planted)
    assert len(recall) == len(transcript.rounds)
    assert all(0.0 <= value <= 1.0 for value in recall)


def test_sweep_files_one_transcript_per_level(tmp_path):
    """Test that a sweep writes per-level transcripts and a summary table."""
    config = small_config(tmp_path, mode="sweep", sweep=[0.2, 0.3])
    table = run_sweep(config, tmp_path / "out")
    assert (tmp_path / "out" / "sweep" / "20" / TRANSCRIPT_FILE).exists()
    assert (tmp_path / "out" / "sweep" / "30" / TRANSCRIPT_FILE).exists()
    summary = pd.read_csv(tmp_path / "out" / SWEEP_SUMMARY_FILE)
    assert summary["sparsity"].tolist() == [0.2, 0.3]
    assert {"acc_improvement", "spe_improvement", "sen_improvement", "final_recall"} <= set(summary.columns)
    assert table.shape[0] == 2


@pytest.mark.slow
def test_default_cohorts_terminate_and_benefit_from_consensus(tmp_path):
    """Test that ten default cohorts terminate and mostly gain accuracy and recall."""
    grid = HyperGrid(c_values=tuple(2.0 ** p for p in range(-1, 8, 2)),
                     gamma_values=tuple(2.0 ** p for p in range(-9, -2, 2)))
    positive_gain = 0
    recall_kept = 0
    for seed in range(10):
        config = ExperimentConfig(cohort=CohortConfig(seed=seed), svm_grid=grid, output_dir=str(tmp_path / f"{seed}"))
        tables = generate_cohort(config.cohort)
        transcript = simulate(tables, config.site_config(), config.max_rounds)

        assert len(transcript.rounds) < config.max_rounds
        assert transcript.terminate is not None
        for site_id in transcript.registry.site_ids:
            accuracies = [
                next(r.metrics.accuracy for r in record.reports if r.site_id == site_id)
                for record in transcript.rounds
            ]
            assert accuracies == sorted(accuracies)

        gain = transcript.summary()["mean_accuracy_improvement"]
        assert gain >= 0.0
        positive_gain += gain > 0.0
        recall = transcript.union_recall(planted_support(config.cohort))
        recall_kept += recall[-1] >= recall[0]
    assert positive_gain >= 7
    assert recall_kept >= 7
