"""Command-line entry point: ``markov-sa {analyze,run,diagnose,plotdata}``.

Exit codes: 0 success, 1 validation failure (bad config, bad bundle, failed
``--strict`` assumption checks), 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .environments import BUILTINS, BundleFormatError, check_assumptions
from .experiments import (
    ConfigError,
    ExperimentConfig,
    analytic_reference,
    diagnose_run,
    emit_plot_data,
    make_environment,
    run_experiment,
)
from .learners import Schedule
from .mdp import MdpError

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2


class _Parser(argparse.ArgumentParser):
    # usage errors are validation failures, not argparse's default 2
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


def _parser() -> argparse.ArgumentParser:
    p = _Parser(prog="markov-sa", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    a = sub.add_parser("analyze", help="spectral report and assumption checks for an environment")
    a.add_argument("environment", help=f"builtin name {BUILTINS} or path to a bundle JSON")
    a.add_argument("--env-seed", type=int, default=0)
    a.add_argument("--lambda", dest="lam", type=float, action="append",
                   help="trace parameter (repeatable; default 0)")
    a.add_argument("--schedule", type=float, nargs="+", metavar="B", help="B1 B2 [beta] for the schedule check")
    a.add_argument("--strict", action="store_true", help="exit 1 when any assumption check fails")

    r = sub.add_parser("run", help="execute an experiment config")
    r.add_argument("config", help="experiment config JSON")
    r.add_argument("--output-dir", help="override the config's output directory")
    r.add_argument("--workers", type=int, default=1, help="parallel seeds")

    d = sub.add_parser("diagnose", help="recompute diagnostics over an artifact directory")
    d.add_argument("artifacts", help="artifact directory (or a single seed_<s> run directory)")
    d.add_argument("--tau", type=float, help="rate-of-change window (default: the config's)")

    pd = sub.add_parser("plotdata", help="emit long-format plot CSV")
    pd.add_argument("artifacts")
    pd.add_argument("--out", help="output CSV path (default <artifacts>/plot_data.csv)")
    pd.add_argument("--seeds", type=int, nargs="*", help="restrict to these seeds")
    return p


def _analyze(args) -> int:
    env = make_environment(args.environment, args.env_seed)
    schedule = None
    if args.schedule:
        try:
            schedule = Schedule(*args.schedule)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad schedule {args.schedule}: {exc}") from exc
    lams = args.lam or [0.0]
    report = {"environment": env.name, "n_states": env.mdp.n_states, "K": env.K, "lambdas": []}
    ok = True
    for lam in lams:
        entry = {"lambda": lam, "assumptions": check_assumptions(env, lam, schedule).to_dict()}
        ok &= entry["assumptions"]["passed"]
        for alg in ("gtd", "etd", "offpolicy_td"):
            entry[alg] = analytic_reference(env, alg, lam).report
        report["lambdas"].append(entry)
    json.dump(report, sys.stdout, indent=2)
    print()
    return EXIT_VALIDATION if (args.strict and not ok) else EXIT_OK


def _run(args) -> int:
    config = ExperimentConfig.load(args.config)
    if args.output_dir:
        config = ExperimentConfig.from_dict({**config.to_dict(), "output_dir": args.output_dir})
    out = run_experiment(config, workers=args.workers)
    print(out / "summary.json")
    return EXIT_OK


def _diagnose(args) -> int:
    root = Path(args.artifacts)
    run_dirs = [root] if (root / "metadata.json").exists() else sorted(root.glob("seed_*"))
    if not run_dirs:
        raise FileNotFoundError(f"no run directories under {root}")
    result = {}
    for rd in run_dirs:
        diag = diagnose_run(rd, tau=args.tau)
        roc = diag.get("rate_of_change") or {}
        result[rd.name] = {
            "stability": diag["stability"]["verdict"],
            "heavy_tail": diag["traces"]["heavy_tail"],
            "rate_of_change_slope": roc.get("slope"),
            "lln_terminal_relative_error": (diag.get("lln_A") or {}).get("terminal_relative_error"),
        }
    json.dump(result, sys.stdout, indent=2)
    print()
    return EXIT_OK


def _plotdata(args) -> int:
    print(emit_plot_data(args.artifacts, seeds=args.seeds, out_path=args.out))
    return EXIT_OK


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    handler = {"analyze": _analyze, "run": _run, "diagnose": _diagnose, "plotdata": _plotdata}[args.command]
    try:
        return handler(args)
    except (ConfigError, BundleFormatError, MdpError, KeyError, FileNotFoundError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"markov-sa {args.command}: {msg}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001 - the exit code is the contract
        print(f"markov-sa {args.command}: runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
