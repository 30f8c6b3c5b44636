import argparse
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

from config import Config, ExperimentConfig
from services.experiment_service import run_experiment, run_site, run_sweep, synthesize
from utils.errors import MswlError
from utils.logger import Logger, get_logger

logger = get_logger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1


# -------------------------
# Arguments
# -------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mswl",
        description="Multi-site weighted LASSO feature selection with an integration server.",
    )
    commands = parser.add_subparsers(dest="mode", required=True)

    def add_command(name: str, help_text: str) -> argparse.ArgumentParser:
        command = commands.add_parser(name, help=help_text)
        command.add_argument("--config", type=Path, help="JSON experiment config (defaults apply when omitted)")
        command.add_argument("--output-dir", dest="output_dir", help="Override the output directory")
        return command

    add_command("simulate", "Run every site in-process and write the reports")
    server = add_command("server", "Run the integration server and wait for remote sites")
    server.add_argument("--host", help="Address to listen on")
    server.add_argument("--port", type=int, help="Port to listen on")
    server.add_argument("--n-sites", dest="n_sites", type=int, help="Number of sites to wait for")
    site = add_command("site", "Serve one site's data to a running server")
    site.add_argument("--data", type=Path, required=True, help="Site CSV file")
    site.add_argument("--host", help="Server address")
    site.add_argument("--port", type=int, help="Server port")
    synth = add_command("synth", "Write a synthetic cohort as per-site CSV files")
    synth.add_argument("--out", type=Path, required=True, help="Directory for the CSV files")
    add_command("sweep", "Repeat the simulation over a list of sparsity levels")
    return parser


def load_config(args: argparse.Namespace) -> ExperimentConfig:
    overrides = {
        "mode": args.mode,
        "output_dir": args.output_dir,
        "host": getattr(args, "host", None),
        "port": getattr(args, "port", None),
        "n_sites": getattr(args, "n_sites", None),
    }
    if args.config is None:
        return ExperimentConfig.from_dict({}, **overrides)
    return ExperimentConfig.from_json(args.config, **overrides)


# -------------------------
# Commands
# -------------------------

def dispatch(config: ExperimentConfig, args: argparse.Namespace) -> None:
    if config.mode in ("simulate", "server"):
        transcript = run_experiment(config)
        summary = transcript.summary()
        print(
            f"{len(transcript.rounds)} rounds, terminated ({transcript.terminate.reason}); "
            f"mean accuracy improvement {summary['mean_accuracy_improvement']:+.4f}; "
            f"reports in {config.output_dir}"
        )
    elif config.mode == "site":
        terminated_at = run_site(config, args.data)
        print(f"Site finished: server terminated at round {terminated_at}")
    elif config.mode == "synth":
        paths = synthesize(config, args.out)
        print(f"Wrote {len(paths)} site files to {args.out}")
    else:
        table = run_sweep(config, config.output_dir)
        print(table.to_string(index=False))


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    Logger.setup_logging(log_level=Config.LOG_LEVEL, log_file=Config.LOG_FILE, force=True)
    Config.log_configuration()

    started = time.time()
    try:
        config = load_config(args)
        dispatch(config, args)
    except MswlError as e:
        Logger.log_error_with_context(logger, e, f"mswl {args.mode}")
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_FAILURE
    except Exception as e:
        Logger.log_error_with_context(logger, e, f"mswl {args.mode} (unexpected)")
        print(f"Unexpected error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_FAILURE
    Logger.log_performance(logger, f"mswl {args.mode}", time.time() - started)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
