"""Command-line entry point: ``macpf train | verify | export``."""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig, resolve_config_path

EXIT_OK, EXIT_INVALID, EXIT_VERIFY = 0, 1, 2
EXPORT_TARGETS = ("learning-curve", "joint-policy-table", "trajectories")

log = logging.getLogger("macpf")


def output_root() -> Path:
    return Path(os.environ.get("MACPF_OUT", "."))


def resolve_output_dir(config: ExperimentConfig) -> Path:
    p = Path(config.output_dir)
    return p if p.is_absolute() else output_root() / p


def cmd_train(args) -> int:
    from .training import run_experiment

    try:
        config = ExperimentConfig.load(resolve_config_path(args.config), args.override or ())
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    out = Path(args.out) if args.out else resolve_output_dir(config)
    result = run_experiment(config, out)
    print(f"run directory: {result['out_dir']}")
    print(f"{'seed':>6} {'dep':>9} {'ind':>9} {'dep_greedy':>11} {'ind_greedy':>11} {'ext_greedy':>11}")
    for seed in config.seeds:
        r = result["summary"]["final"][str(seed)]
        print(f"{seed:>6} {r['return_dep_mean']:>9.3f} {r['return_ind_mean']:>9.3f} "
              f"{r['return_dep_greedy']:>11.3f} {r['return_ind_greedy']:>11.3f} {r['return_ext_greedy']:>11.3f}")
    return EXIT_OK


def cmd_verify(args) -> int:
    from contextlib import nullcontext

    from .neural import sign_flipped_backprop
    from .verify import run_suite

    ctx = sign_flipped_backprop() if args.inject_fault == "sign-flip" else nullcontext()
    with ctx:
        report = run_suite(args.suite)
    for r in report.results:
        print(r.line())
    print("all checks passed" if report.passed else "verification FAILED")
    return EXIT_OK if report.passed else EXIT_VERIFY


# --- export -----------------------------------------------------------------------

def _seed_files(run_dir: Path, pattern: str) -> list[Path]:
    return sorted(run_dir.glob(pattern), key=lambda p: int("".join(c for c in p.stem if c.isdigit()) or 0))


def export_learning_curve(run_dir: Path, out: Path) -> Path:
    from .training import aggregate_rows, read_metrics_csv

    files = _seed_files(run_dir, "metrics_seed*.csv")
    if not files:
        raise FileNotFoundError(f"no metrics_seed*.csv in {run_dir}")
    agg = aggregate_rows([read_metrics_csv(f) for f in files])
    series = {
        "dep": "return_dep_mean", "ind": "return_ind_mean", "dep_greedy": "return_dep_greedy",
        "ind_greedy": "return_ind_greedy", "ext_greedy": "return_ext_greedy",
    }
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["episode", "n_seeds", *[f"{k}_{s}" for k in series for s in ("mean", "std")]])
        for row in agg:
            vals = []
            for col in series.values():
                vals += [row[f"{col}_mean"], row[f"{col}_std"]]
            w.writerow([int(row["episode"]), row["n_seeds"], *[repr(float(v)) for v in vals]])
    return out


def export_joint_policy_table(run_dir: Path, out: Path, seed: int | None = None, empirical: int = 0) -> Path:
    from . import agents as ag
    from .envs import ACTION_NAMES, MatrixGame
    from .numerics import RngStream
    from .training import evaluate_joint_frequencies, load_agent

    ckpts = _seed_files(run_dir, "seed*.ckpt")
    if seed is not None:
        ckpts = [p for p in ckpts if p.stem == f"seed{seed}"]
    if not ckpts:
        raise FileNotFoundError(f"no checkpoint in {run_dir}")
    config, env, params = load_agent(ckpts[0])
    if not isinstance(env, MatrixGame):
        raise ValueError("joint-policy-table needs a matrix-game run")
    obs = np.ones((env.n_agents, env.obs_dim))
    if empirical > 0:
        table = evaluate_joint_frequencies(params, env, empirical, RngStream(0).split("export"))
    else:
        table = ag.joint_dep_distribution(obs, params)
    names = ACTION_NAMES[: table.shape[1]]
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["a1\\a2", *names])
        for a, row in zip(ACTION_NAMES, table):
            w.writerow([a, *[f"{p:.6f}" for p in row]])
    return out


def export_trajectories(run_dir: Path, out: Path) -> Path:
    files = _seed_files(run_dir, "trajectories_seed*.csv")
    if not files:
        raise FileNotFoundError(f"no trajectories_seed*.csv in {run_dir} (point-mass runs only)")
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        header_written = False
        for f in files:
            seed = "".join(c for c in f.stem if c.isdigit())
            with open(f, newline="") as src:
                reader = csv.reader(src)
                header = next(reader)
                if not header_written:
                    w.writerow(["seed", *header])
                    header_written = True
                for row in reader:
                    w.writerow([seed, *row])
    return out


def cmd_export(args) -> int:
    run_dir = Path(args.run_dir)
    if not run_dir.is_dir():
        print(f"error: run directory {run_dir} not found", file=sys.stderr)
        return EXIT_INVALID
    default_names = {
        "learning-curve": "learning_curve.csv",
        "joint-policy-table": "joint_policy_table.csv",
        "trajectories": "trajectories.csv",
    }
    out = Path(args.out) if args.out else run_dir / default_names[args.target]
    try:
        if args.target == "learning-curve":
            export_learning_curve(run_dir, out)
        elif args.target == "joint-policy-table":
            export_joint_policy_table(run_dir, out, args.seed, args.empirical)
        else:
            export_trajectories(run_dir, out)
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    print(out)
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    # usage errors are validation failures (exit 1); exit 2 is reserved for failed verification
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="macpf", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="run an experiment from a key=value config")
    p.add_argument("config", help="config file, or the name of a bundled config (matrix_game, point_mass)")
    p.add_argument("--override", action="append", metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--out", help="run directory (default: output_dir under $MACPF_OUT)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("verify", help="run the oracle and gradient verification suites")
    p.add_argument("suite", choices=("tabular", "gradients", "all"))
    p.add_argument("--inject-fault", choices=("sign-flip",), help="break backprop to check the harness")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("export", help="write plot-ready data from a run directory")
    p.add_argument("run_dir")
    p.add_argument("target", choices=EXPORT_TARGETS)
    p.add_argument("--out", help="output file")
    p.add_argument("--seed", type=int, help="checkpoint seed for joint-policy-table (default: lowest)")
    p.add_argument("--empirical", type=int, default=0, metavar="N",
                   help="joint-policy-table from N sampled episodes instead of the analytic table")
    p.set_defaults(func=cmd_export)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
