"""qpi-explain command line.

Each subcommand runs under the run directory's lock, records itself in the
run registry and prints a JSON summary on stdout. Errors are printed as
``{"error": ..., "hint": ...}`` on stderr with exit code 2 (config) or 3 (data).
"""

import argparse
import json
import logging
import sys
from typing import Callable, Dict, List, Optional

from . import __version__
from . import pipeline
from .config import LOG_LEVEL, load_config
from .errors import QpiError
from .runs import RunDir, RunInfo, RunLock, get_run_registry

logger = logging.getLogger("qpi-explain")


def _per_repetition(step: Callable) -> Callable[[pipeline.Experiment, argparse.Namespace], List[str]]:
    def run(exp: pipeline.Experiment, args: argparse.Namespace) -> List[str]:
        out = step(exp, args.repetition)
        return out[0] if isinstance(out, tuple) else out
    return run


COMMANDS: Dict[str, Dict[str, object]] = {
    "synth": {"fn": lambda exp, args: pipeline.step_synth(exp),
              "desc": "Generate the synthetic corpus, OOD sets and multi-cell frames"},
    "preprocess": {"fn": lambda exp, args: pipeline.step_preprocess(exp),
                   "desc": "Segment frames into filtered 50x50 cell patches with features"},
    "train": {"fn": _per_repetition(pipeline.step_train),
              "desc": "Train every configured architecture"},
    "calibrate": {"fn": _per_repetition(pipeline.step_calibrate),
                  "desc": "Fit temperature scaling and the vi_std map; report ECE/MCE"},
    "evaluate": {"fn": _per_repetition(pipeline.step_evaluate),
                 "desc": "Frequentist and variational test predictions with metrics"},
    "explain": {"fn": _per_repetition(pipeline.step_explain),
                "desc": "LIME and guided Grad-CAM maps for test samples"},
    "aggregate": {"fn": lambda exp, args: pipeline.step_aggregate(exp),
                  "desc": "Confidence-binned meta-explanations, t-SNE and clusters"},
    "ood": {"fn": _per_repetition(pipeline.step_ood),
            "desc": "Confidence on leukocytes vs. out-of-distribution sets"},
    "mislabels": {"fn": _per_repetition(pipeline.step_mislabels),
                  "desc": "Plant label flips and screen for confident disagreements"},
    "repro": {"fn": lambda exp, args: pipeline.step_repro(exp),
              "desc": "Full experiment sequence with summary tables"},
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qpi-explain", description="Interpretable QPI leukocyte classification")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, spec in COMMANDS.items():
        p = sub.add_parser(name, help=spec["desc"])
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--runs", help="root of run directories (overrides QPI_RUNS_DIR)")
        p.add_argument("--out", help="explicit run directory instead of <runs>/<run id>")
        p.add_argument("--repetition", type=int, default=0, help="repetition index for per-run steps")
    d = sub.add_parser("dashboard", help="Browse runs in a terminal UI")
    d.add_argument("--runs", help="root of run directories")
    return parser


def run_command(command: str, config_path: Optional[str] = None, seed: Optional[int] = None,
                runs: Optional[str] = None, out: Optional[str] = None, repetition: int = 0) -> Dict[str, object]:
    """Run one subcommand and return its summary.

    Any exception from the step marks the run ``failed`` in the registry and
    propagates; the lock is released either way.
    """
    config = load_config(config_path, {"seed": seed, "runs_dir": runs})
    config.check_paths()
    run = RunDir.for_config(config, out)
    registry = get_run_registry(str(run.path.parent))
    info = registry.get(run.run_id) or RunInfo(run.run_id, str(run.path), config.name, config.seed)
    with RunLock(run.path, command):
        run.write_snapshot()
        registry.record(info, command, "running")
        exp = pipeline.Experiment(run)
        args = argparse.Namespace(repetition=repetition)
        try:
            artifacts = COMMANDS[command]["fn"](exp, args)
        except Exception:
            registry.record(info, command, "failed")
            raise
        registry.record(info, command, "done", artifacts)
    logger.info(f"{command}: {len(artifacts)} artifacts in {run.path}")
    return {"command": command, "run_id": run.run_id, "path": str(run.path), "artifacts": artifacts}


def main(argv: Optional[List[str]] = None) -> int:
    logging.basicConfig(level=getattr(logging, LOG_LEVEL.upper(), logging.INFO),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)

    if args.command == "dashboard":
        from .dashboard import main as dashboard_main
        dashboard_main(args.runs)
        return 0

    try:
        summary = run_command(args.command, args.config, args.seed, args.runs, args.out, args.repetition)
    except QpiError as e:
        print(json.dumps(e.to_dict()), file=sys.stderr)
        return e.exit_code
    except Exception as e:
        logger.exception(f"{args.command} failed")
        print(json.dumps({"error": f"{type(e).__name__}: {e}",
                          "hint": "Unexpected failure; see the log above and report it with the run config."}),
              file=sys.stderr)
        return QpiError.exit_code
    print(json.dumps(summary, indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())
