"""Experiment orchestration: the server loop over any transport, the
transcript and its CSV reports, replay, and the sparsity sweep.
"""
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import pandas as pd

from config import ExperimentConfig
from services.cohort_service import generate_cohort, load_csv, planted_support, write_cohort
from services.consensus_service import (
    Continue,
    ServerState,
    SiteConfig,
    SiteRegistry,
    SiteReport,
    SiteState,
    Terminate,
    WeightVector,
    initial_penalty,
    server_step,
)
from services.lasso_service import FeatureSet, PenaltyVector
from services.tabular_service import Metrics, SubjectTable, check_feature_alignment
from services.transport_service import (
    DEFAULT_BARRIER_TIMEOUT,
    InProcessTransport,
    SiteNode,
    SocketServerTransport,
    SocketSiteClient,
    TerminateMessage,
    Transport,
    WeightsMessage,
    dumps_line,
)
from utils.errors import ConfigError, ProtocolError
from utils.logger import Logger, get_logger

logger = get_logger(__name__)

TRANSCRIPT_FILE = "transcript.jsonl"
METRICS_FILE = "metrics_per_round.csv"
PERSISTENCE_FILE = "feature_persistence.csv"
SWEEP_SUMMARY_FILE = "sweep_summary.csv"
TOP_FEATURES = 5


@dataclass(frozen=True)
class RoundRecord:
    round: int
    penalty: PenaltyVector
    reports: tuple[SiteReport, ...]
    weights: Optional[WeightVector] = None

    def union(self) -> set[int]:
        return set().union(*(set(report.selected.indices) for report in self.reports))


@dataclass
class ExperimentTranscript:
    registry: SiteRegistry
    n_features: int
    max_rounds: int
    rounds: list[RoundRecord] = field(default_factory=list)
    terminate: Optional[Terminate] = None

    def summary(self) -> dict:
        """Per-site improvement, involved-feature counts and consensus features."""
        first, last = self.rounds[0], self.rounds[-1]
        initial = {report.site_id: report.metrics for report in first.reports}
        per_site = []
        improvements = {"accuracy": [], "specificity": [], "sensitivity": []}
        for report in last.reports:
            start = initial[report.site_id]
            entry = {"site_id": report.site_id}
            for name in improvements:
                delta = getattr(report.metrics, name) - getattr(start, name)
                improvements[name].append(delta)
                entry[f"initial_{name}"] = getattr(start, name)
                entry[f"final_{name}"] = getattr(report.metrics, name)
                entry[f"{name}_improvement"] = delta
            entry["n_features"] = report.selected.size
            per_site.append(entry)

        counts = selection_counts(last.reports, self.n_features)
        order = sorted(range(self.n_features), key=lambda j: (-counts[j], j))
        top = [{"feature": j, "n_sites": int(counts[j])} for j in order[:TOP_FEATURES] if counts[j] > 0]

        summary = {
            "type": "summary",
            "n_rounds": len(self.rounds),
            "per_site": per_site,
            "mean_accuracy_improvement": float(np.mean(improvements["accuracy"])),
            "mean_specificity_improvement": float(np.mean(improvements["specificity"])),
            "mean_sensitivity_improvement": float(np.mean(improvements["sensitivity"])),
            "union_sizes": [len(record.union()) for record in self.rounds],
            "top_features": top,
        }
        return summary

    def union_recall(self, planted: Sequence[int]) -> list[float]:
        """Share of the planted support covered by the union of selections, per round."""
        planted = set(planted)
        return [len(record.union() & planted) / len(planted) for record in self.rounds]

    def to_lines(self) -> list[str]:
        if self.terminate is None:
            raise ProtocolError("Transcript has no terminate record")
        lines = [
            dumps_line({
                "type": "registry",
                "n_features": self.n_features,
                "max_rounds": self.max_rounds,
                "sites": [{"site_id": s, "n_subjects": n} for s, n in self.registry.entries],
            })
        ]
        for record in self.rounds:
            lines.append(dumps_line({
                "type": "round",
                "round": record.round,
                "penalty": [float(f) for f in record.penalty.factors],
                "reports": [
                    {
                        "site_id": report.site_id,
                        "selected": list(report.selected.indices),
                        "accuracy": report.metrics.accuracy,
                        "specificity": report.metrics.specificity,
                        "sensitivity": report.metrics.sensitivity,
                    }
                    for report in record.reports
                ],
                "weights": None if record.weights is None else [float(w) for w in record.weights.weights],
            }))
        lines.append(dumps_line({
            "type": "terminate",
            "round": self.terminate.round,
            "reason": self.terminate.reason,
        }))
        lines.append(dumps_line(self.summary()))
        return lines


def selection_counts(reports: Sequence[SiteReport], n_features: int) -> np.ndarray:
    counts = np.zeros(n_features, dtype=int)
    for report in reports:
        counts[list(report.selected.indices)] += 1
    return counts


def run_protocol(
    transport: Transport,
    max_rounds: int,
    barrier_timeout: float = DEFAULT_BARRIER_TIMEOUT,
) -> ExperimentTranscript:
    """Drive the integration server until it terminates."""
    registry = transport.open()
    state = ServerState(registry=registry, n_features=transport.n_features, max_rounds=max_rounds)
    transcript = ExperimentTranscript(
        registry=registry,
        n_features=transport.n_features,
        max_rounds=max_rounds,
    )
    decision = Continue(round=0, penalty=initial_penalty(transport.n_features))
    started = time.time()
    while isinstance(decision, Continue):
        round_started = time.time()
        logger.info(f"Round {decision.round}: broadcasting penalty to {registry.m} sites")
        transport.broadcast(WeightsMessage.from_penalty(decision.round, decision.penalty))
        reports = transport.round_barrier(decision.round, barrier_timeout)
        Logger.log_round_reports(logger, decision.round, reports)
        next_decision = server_step(state, reports)
        transcript.rounds.append(
            RoundRecord(
                round=decision.round,
                penalty=decision.penalty,
                reports=tuple(reports),
                weights=next_decision.weights if isinstance(next_decision, Continue) else None,
            )
        )
        Logger.log_performance(logger, f"round {decision.round}", time.time() - round_started)
        decision = next_decision

    transport.broadcast(TerminateMessage(round=decision.round))
    transcript.terminate = decision
    Logger.log_performance(logger, f"protocol ({len(transcript.rounds)} rounds)", time.time() - started)
    return transcript


def write_outputs(transcript: ExperimentTranscript, out_dir: Union[str, Path]) -> Path:
    """Write the transcript and the per-round metrics/feature tables."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / TRANSCRIPT_FILE, "w", encoding="utf-8", newline="\n") as handle:
        handle.writelines(transcript.to_lines())

    rows = [
        {
            "round": record.round,
            "site": report.site_id,
            "acc": report.metrics.accuracy,
            "spe": report.metrics.specificity,
            "sen": report.metrics.sensitivity,
        }
        for record in transcript.rounds
        for report in record.reports
    ]
    pd.DataFrame(rows, columns=["round", "site", "acc", "spe", "sen"]).to_csv(
        out_dir / METRICS_FILE, index=False, lineterminator="\n"
    )

    persistence = pd.DataFrame({"feature": np.arange(transcript.n_features)})
    for record in transcript.rounds:
        persistence[f"round_{record.round}"] = selection_counts(record.reports, transcript.n_features)
    persistence.to_csv(out_dir / PERSISTENCE_FILE, index=False, lineterminator="\n")
    logger.info(f"Wrote transcript and reports to {out_dir}")
    return out_dir


def replay_transcript(lines: Sequence[str]) -> int:
    """Re-run the server on recorded reports and check every decision.

    Returns:
        int: number of rounds replayed
    """
    records = [json.loads(line) for line in lines]
    if not records or records[0].get("type") != "registry":
        raise ProtocolError("Transcript must start with a registry record")
    header = records[0]
    registry = SiteRegistry(tuple((site["site_id"], site["n_subjects"]) for site in header["sites"]))
    state = ServerState(registry=registry, n_features=header["n_features"], max_rounds=header["max_rounds"])
    rounds = [record for record in records if record["type"] == "round"]
    terminate = next((record for record in records if record["type"] == "terminate"), None)
    if terminate is None:
        raise ProtocolError("Transcript has no terminate record")

    expected_penalty = initial_penalty(state.n_features)
    for position, record in enumerate(rounds):
        if record["round"] != position:
            raise ProtocolError(f"Rounds are not contiguous at record {position}", round=record["round"])
        if PenaltyVector(record["penalty"]) != expected_penalty:
            raise ProtocolError("Recorded penalty differs from the replayed one", round=position)
        reports = [
            SiteReport(
                site_id=report["site_id"],
                round=position,
                selected=FeatureSet(report["selected"]),
                metrics=Metrics(report["accuracy"], report["specificity"], report["sensitivity"]),
            )
            for report in record["reports"]
        ]
        decision = server_step(state, reports)
        if isinstance(decision, Continue):
            if position + 1 >= len(rounds):
                raise ProtocolError("Replay continues past the recorded rounds", round=position)
            expected_penalty = decision.penalty
        elif position + 1 != len(rounds) or (decision.round, decision.reason) != (
            terminate["round"],
            terminate["reason"],
        ):
            raise ProtocolError("Replay terminates differently from the recording", round=position)
    logger.info(f"Replayed {len(rounds)} rounds, transcript reproduced")
    return len(rounds)


def build_site_states(tables: Sequence[SubjectTable], site_config: SiteConfig) -> list[SiteState]:
    check_feature_alignment(tables)
    return [SiteState.create(table, site_config) for table in tables]


def simulate(
    tables: Sequence[SubjectTable],
    site_config: SiteConfig,
    max_rounds: int,
    workers: int = 1,
) -> ExperimentTranscript:
    """Run every site in-process over the deterministic transport."""
    nodes = [SiteNode(state) for state in build_site_states(tables, site_config)]
    with InProcessTransport(nodes, workers=workers) as transport:
        return run_protocol(transport, max_rounds=max_rounds)


def load_tables(config: ExperimentConfig) -> tuple[list[SubjectTable], Optional[tuple[int, ...]]]:
    """CSV files when ``data`` is set, otherwise a generated cohort and its planted support."""
    if config.data:
        return [load_csv(path) for path in config.data], None
    return generate_cohort(config.cohort), planted_support(config.cohort)


def _log_recall(transcript: ExperimentTranscript, planted: Optional[Sequence[int]]) -> Optional[list[float]]:
    if not planted:
        return None
    recall = transcript.union_recall(planted)
    logger.info(f"Planted-support recall of the selection union: {recall[0]:.3f} -> {recall[-1]:.3f}")
    return recall


def run_sweep(config: ExperimentConfig, out_dir: Union[str, Path]) -> pd.DataFrame:
    """Repeat the protocol at every sparsity level under ``sweep/<pct>/``."""
    out_dir = Path(out_dir)
    tables, planted = load_tables(config)
    rows = []
    for fraction in config.sweep:
        level = f"{int(round(fraction * 100)):02d}"
        logger.info(f"Sweep level {level}%")
        transcript = simulate(tables, config.site_config(fraction), config.max_rounds, workers=config.workers)
        write_outputs(transcript, out_dir / "sweep" / level)
        summary = transcript.summary()
        row = {
            "sparsity": fraction,
            "n_rounds": summary["n_rounds"],
            "acc_improvement": summary["mean_accuracy_improvement"],
            "spe_improvement": summary["mean_specificity_improvement"],
            "sen_improvement": summary["mean_sensitivity_improvement"],
        }
        recall = _log_recall(transcript, planted)
        if recall is not None:
            row["initial_recall"] = recall[0]
            row["final_recall"] = recall[-1]
        rows.append(row)
    table = pd.DataFrame(rows)
    table.to_csv(out_dir / SWEEP_SUMMARY_FILE, index=False, lineterminator="\n")
    logger.info(f"Wrote sweep summary for {len(rows)} sparsity levels to {out_dir / SWEEP_SUMMARY_FILE}")
    return table


def run_experiment(config: ExperimentConfig) -> ExperimentTranscript:
    """Simulate locally or serve remote sites, then write the reports."""
    if config.mode == "simulate":
        tables, planted = load_tables(config)
        transcript = simulate(tables, config.site_config(), config.max_rounds, workers=config.workers)
        _log_recall(transcript, planted)
    elif config.mode == "server":
        n_sites = config.n_sites or len(config.data) or config.cohort.m
        with SocketServerTransport(
            config.host, config.port, n_sites, accept_timeout=config.barrier_timeout
        ) as transport:
            transcript = run_protocol(transport, config.max_rounds, barrier_timeout=config.barrier_timeout)
    else:
        raise ConfigError(f"run_experiment handles simulate and server modes, not {config.mode!r}")
    write_outputs(transcript, config.output_dir)
    return transcript


def run_site(config: ExperimentConfig, data: Union[str, Path]) -> int:
    """Serve one site's data to a remote integration server.

    Returns:
        int: round carried by the terminate message
    """
    state = SiteState.create(load_csv(data), config.site_config())
    client = SocketSiteClient(SiteNode(state), config.host, config.port, connect_timeout=config.barrier_timeout)
    return client.run()


def synthesize(config: ExperimentConfig, out_dir: Union[str, Path]) -> list[Path]:
    """Write the configured synthetic cohort as one CSV per site."""
    return write_cohort(generate_cohort(config.cohort), out_dir)
