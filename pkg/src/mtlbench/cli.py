"""Command-line entry points.

Exit codes: 0 on success, 1 on usage/configuration errors, 2 on runtime
failures. The default output directory comes from --out, then the config's
experiment.out_dir, then $MTLBENCH_OUT, then ./runs.
"""

from __future__ import annotations

import argparse
import os
import sys
import time

import numpy as np

from .config import RunConfig, load_run_config
from .data import save_csv
from .errors import ConfigError, MtlbenchError
from .experiments import (run_gradient_conflict, run_imbalance_sweep,
                          run_main_comparison, run_relations, run_transfer_utility)
from .losses import RegularizationConfig, TaskWeights
from .models import INDEPENDENT, STANDARD_MTL, STRUCTURED_MTL, ModelConfig, build_model
from .nn.gradcheck import finite_diff_check, jitter_params
from .reporting import emit_plot_data, emit_report, make_run_dir

GRADCHECK_TOLERANCE = 1e-4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def build_parser() -> _Parser:
    parser = _Parser(prog="mtlbench",
                     description="Multi-task learning benchmark and negative-transfer diagnostics")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", required=True, help="TOML run configuration")
        p.add_argument("--seeds", type=_int_list, default=None,
                       help="override training seeds, e.g. 42,123")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--format", choices=["json", "csv", "both"], default=None,
                       help="report format override")

    p = sub.add_parser("compare", help="three-way model comparison")
    add_common(p)

    p = sub.add_parser("sweep", help="imbalance sweep over majority-task sizes")
    add_common(p)
    p.add_argument("--counts", type=_int_list, default=None,
                   help="majority-task training sizes, e.g. 80,800,5200")
    p.add_argument("--majority-task", default=None)
    p.add_argument("--minority-task", default=None)

    p = sub.add_parser("conflict", help="inter-task gradient cosine analysis")
    add_common(p)

    p = sub.add_parser("transfer", help="pre-train/transfer utility study")
    add_common(p)
    p.add_argument("--source", default=None)
    p.add_argument("--target", default=None)

    p = sub.add_parser("relations", help="extract learned task relations")
    add_common(p)

    p = sub.add_parser("gradcheck", help="verify backpropagation against finite differences")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--batch", type=int, default=3)
    p.add_argument("--feature-dim", type=int, default=21)

    p = sub.add_parser("synth", help="emit a synthetic union dataset to CSV")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="output CSV path")
    return parser


def _resolve_out_dir(args, run: RunConfig) -> str:
    return (args.out or run.out_dir or os.environ.get("MTLBENCH_OUT") or "runs")


def _load(args) -> RunConfig:
    run = load_run_config(args.config)
    if args.seeds:
        run.experiment.train.seeds = tuple(args.seeds)
    if getattr(args, "format", None):
        run.report_format = args.format
    return run


def _emit(report, run: RunConfig, args) -> None:
    run_dir = make_run_dir(_resolve_out_dir(args, run), report.experiment_id)
    paths = emit_report(report, run.report_format, run_dir)
    paths += emit_plot_data(report, run_dir)
    print(f"wrote {len(paths)} file(s) to {run_dir}")


def cmd_compare(args) -> int:
    run = _load(args)
    dataset = run.load_dataset()
    run.resolve_task_weights(dataset)
    report = run_main_comparison(dataset, run.experiment)
    _emit(report, run, args)
    return 0


def cmd_sweep(args) -> int:
    run = _load(args)
    dataset = run.load_dataset()
    run.resolve_task_weights(dataset)
    counts = args.counts or run.sweep_counts
    majority = args.majority_task or run.sweep_majority_task
    if not counts or not majority:
        raise ConfigError("sweep needs --counts and --majority-task "
                          "(or sweep_counts/sweep_majority_task in the config)")
    minority = args.minority_task or run.sweep_minority_task
    report = run_imbalance_sweep(dataset, majority, counts, run.experiment,
                                 minority_task=minority)
    _emit(report, run, args)
    return 0


def cmd_conflict(args) -> int:
    run = _load(args)
    dataset = run.load_dataset()
    run.resolve_task_weights(dataset)
    report = run_gradient_conflict(dataset, run.experiment)
    _emit(report, run, args)
    return 0


def cmd_transfer(args) -> int:
    run = _load(args)
    dataset = run.load_dataset()
    run.resolve_task_weights(dataset)
    source = args.source or run.transfer_source
    target = args.target or run.transfer_target
    if not source or not target:
        raise ConfigError("transfer needs --source and --target "
                          "(or transfer_source/transfer_target in the config)")
    report = run_transfer_utility(dataset, source, target, run.experiment)
    _emit(report, run, args)
    return 0


def cmd_relations(args) -> int:
    run = _load(args)
    dataset = run.load_dataset()
    run.resolve_task_weights(dataset)
    report = run_relations(dataset, run.experiment)
    _emit(report, run, args)
    return 0


def cmd_gradcheck(args) -> int:
    """Check all three model kinds against central finite differences."""
    rng = np.random.default_rng(args.seed)
    names = ["reg_a", "reg_b", "cls_c"]
    kinds = ["regression", "regression", "classification"]
    d = args.feature_dim
    X = rng.normal(size=(args.batch, d))
    Y = np.column_stack([rng.normal(size=args.batch), rng.normal(size=args.batch),
                         rng.integers(0, 2, size=args.batch).astype(float)])
    M = (rng.random((args.batch, 3)) < 0.8).astype(float)
    M[M.sum(axis=1) == 0, 0] = 1.0
    for j in range(3):
        if M[:, j].sum() == 0:
            M[0, j] = 1.0
    # moderate weights keep the weighted loss O(1); extreme weights only
    # worsen the conditioning of the finite differences, not the gradients
    weights = TaskWeights({"reg_a": 1.0, "reg_b": 2.0, "cls_c": 1.5})
    reg = RegularizationConfig()
    cfg = ModelConfig()

    start = time.perf_counter()
    worst = 0.0
    for kind in (INDEPENDENT, STANDARD_MTL, STRUCTURED_MTL):
        model_rng = np.random.default_rng(args.seed + 1)
        if kind == INDEPENDENT:
            model = build_model(kind, names[:1], kinds[:1], d, cfg, model_rng)
            err = _check_one(model, X, Y[:, :1], M[:, :1],
                             TaskWeights({names[0]: 1.0}), None, args.seed)
        else:
            model = build_model(kind, names, kinds, d, cfg, model_rng,
                                fusion_backprop=(kind == STRUCTURED_MTL))
            err = _check_one(model, X, Y, M, weights,
                             reg if kind == STRUCTURED_MTL else None, args.seed)
        worst = max(worst, err)
        print(f"{kind}: max relative error {err:.3e}")
    elapsed = time.perf_counter() - start
    passed = worst < GRADCHECK_TOLERANCE
    print(f"gradcheck {'PASS' if passed else 'FAIL'}: worst {worst:.3e} "
          f"(tolerance {GRADCHECK_TOLERANCE:g}) in {elapsed:.1f}s")
    return 0 if passed else 2


def _check_one(model, X, Y, M, weights, reg, seed) -> float:
    jitter_params(model, np.random.default_rng(seed + 2))
    # the fusion paths attenuate some gradients to ~1e-7; a larger step keeps
    # the finite-difference roundoff below them
    step = 1e-4 if model.model_kind == STRUCTURED_MTL else 1e-5
    return finite_diff_check(model, X, Y, M, weights=weights, reg=reg, step=step)


def cmd_synth(args) -> int:
    run = load_run_config(args.config)
    if "csv" in run.data:
        raise ConfigError("synth needs a synthetic [data] section, not a csv source")
    dataset = run.load_dataset()
    save_csv(dataset, args.out)
    print(f"wrote {len(dataset)} samples to {args.out}")
    return 0


COMMANDS = {
    "compare": cmd_compare,
    "sweep": cmd_sweep,
    "conflict": cmd_conflict,
    "transfer": cmd_transfer,
    "relations": cmd_relations,
    "gradcheck": cmd_gradcheck,
    "synth": cmd_synth,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except (MtlbenchError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
