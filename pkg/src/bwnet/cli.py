"""Command-line workflows: train, binarize, fine-tune, evaluate, verify.

Exit codes: 0 success, 1 flag/input validation error, 2 runtime failure.
All randomness hangs off --seed, so identical invocations write identical
bytes. Commands never modify their input files.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import verify as verify_mod
from .binarizer import HashProblem, SolverConfig
from .data import resolve_dataset
from .manifest import ManifestError, read_manifest
from .net import (
    BINARY,
    FLOAT,
    MIXED,
    DivergenceError,
    ModeError,
    Network,
    TrainConfig,
    evaluate,
    finetune,
    train_baseline,
)
from .pipeline import (
    PipelineConfig,
    binarize_model,
    compute_target_similarity,
    extract_layer_inputs,
    sample_batch,
    write_run_report,
)
from .tensorio import TensorFileError

DEFAULT_ARCH = "(2x8C3)-MP2-(2x16C3)-MP2-(2x32C3)-10FC-Softmax"


class CliError(Exception):
    """Validation problem: wrong flags, malformed or missing inputs."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2
        self.print_usage(sys.stderr)
        raise CliError(message)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--threads", type=int, default=1)


def _add_solver_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--max-iter", type=int, default=20)
    p.add_argument("--rel-tol", type=float, default=1e-6)
    p.add_argument("--batch", type=int, default=256)
    p.add_argument("--col-cap", type=int, default=8192)
    p.add_argument("--skip-first", action="store_true")
    p.add_argument("--skip-last", action="store_true")
    p.add_argument("--target-from", choices=["full_precision", "binarized"],
                   default="full_precision")
    p.add_argument("--non-adaptive", action="store_true",
                   help="solve each layer against full-precision featuremaps")


def build_parser() -> _Parser:
    parser = _Parser(prog="bwnet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-baseline", help="train a float model on a dataset")
    p.add_argument("--arch", default=DEFAULT_ARCH)
    p.add_argument("--data", required=True, help="dataset dir or synthetic:<n>[:<seed>]")
    p.add_argument("--out", required=True, help="output directory for manifest + tensors")
    p.add_argument("--name", default="model")
    p.add_argument("--input-shape", default="1,16,16")
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--iters", type=int, default=650)
    p.add_argument("--train-batch", type=int, default=64)
    _add_common(p)

    p = sub.add_parser("binarize", help="convert a float model to binary codes")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output manifest path")
    _add_solver_flags(p)
    _add_common(p)

    p = sub.add_parser("finetune", help="fine-tune a fully binarized model")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output manifest path")
    p.add_argument("--lr", type=float, default=0.002)
    p.add_argument("--iters", type=int, default=200)
    p.add_argument("--train-batch", type=int, default=64)
    p.add_argument("--fixed-codes", action="store_true",
                   help="freeze codes; train scales and BatchNorm only")
    _add_common(p)

    p = sub.add_parser("eval", help="report top-1 accuracy and loss")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--mode", choices=[FLOAT, BINARY, MIXED], default=FLOAT)
    _add_common(p)

    p = sub.add_parser("verify", help="run solver oracles")
    p.add_argument("--oracle", action="store_true")
    p.add_argument("--s-max", type=int, default=12)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--out", default=None, help="optional report path")
    p.add_argument("--max-iter", type=int, default=20)
    _add_common(p)

    p = sub.add_parser("ablate", help="progressive binarization, with/without scales")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--eval-data", required=True)
    p.add_argument("--out", required=True, help="report path")
    _add_solver_flags(p)
    _add_common(p)

    p = sub.add_parser("curve", help="per-layer objective-vs-iteration series")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="report path")
    p.add_argument("--layers", default=None,
                   help="comma-separated manifest indices (default: all weight layers)")
    _add_solver_flags(p)
    _add_common(p)

    return parser


def _pipeline_cfg(args) -> PipelineConfig:
    return PipelineConfig(
        batch_size=args.batch,
        col_cap=args.col_cap,
        skip_first=args.skip_first,
        skip_last=args.skip_last,
        target_from=args.target_from,
        adaptive=not args.non_adaptive,
        threads=args.threads,
        seed=args.seed,
        solver=SolverConfig(max_iter=args.max_iter, rel_tol=args.rel_tol),
    )


def _load_model(path: str) -> Network:
    p = Path(path)
    if not p.is_file():
        raise CliError(f"model manifest not found: {path}")
    return Network.from_manifest(read_manifest(p))


def _cmd_train_baseline(args) -> int:
    dataset = resolve_dataset(args.data)
    shape = tuple(int(v) for v in args.input_shape.split(","))
    if len(shape) != 3:
        raise CliError(f"--input-shape must be C,H,W, got {args.input_shape}")
    net = Network.random_init(args.arch, shape, seed=args.seed, name=args.name)
    cfg = TrainConfig(lr=args.lr, max_iters=args.iters, batch_size=args.train_batch,
                      seed=args.seed)
    history = train_baseline(net, dataset, cfg)
    net.to_manifest(args.out)
    metrics = evaluate(net, dataset, mode=FLOAT)
    print(json.dumps({"final_loss": history[-1], **metrics}))
    return 0


def _cmd_binarize(args) -> int:
    manifest = read_manifest(args.model)
    dataset = resolve_dataset(args.data)
    out_path = Path(args.out)
    out_dir = out_path.parent if out_path.suffix else out_path
    cfg = _pipeline_cfg(args)
    run = binarize_model(manifest, dataset, cfg, out_dir=None)
    if out_path.suffix:
        run.target_net.name = out_path.stem
    out_dir.mkdir(parents=True, exist_ok=True)
    run.target_manifest = run.target_net.to_manifest(out_dir)
    report_path = out_dir / f"{run.target_net.name}.report.json"
    write_run_report(run, report_path)
    print(json.dumps({
        "layers": len(run.layer_reports),
        "report": str(report_path),
        "objective_final": sum(r.objective_final for r in run.layer_reports),
    }))
    return 0


def _cmd_finetune(args) -> int:
    net = _load_model(args.model)
    dataset = resolve_dataset(args.data)
    cfg = TrainConfig(lr=args.lr, max_iters=args.iters, batch_size=args.train_batch,
                      weight_decay=0.0, lr_decay_steps=(), seed=args.seed)
    before = evaluate(net, dataset, mode=BINARY)
    finetune(net, dataset, cfg, fixed_codes=args.fixed_codes)
    out_path = Path(args.out)
    out_dir = out_path.parent if out_path.suffix else out_path
    out_dir.mkdir(parents=True, exist_ok=True)
    if out_path.suffix:
        net.name = out_path.stem
    net.to_manifest(out_dir)
    after = evaluate(net, dataset, mode=BINARY)
    print(json.dumps({"top1_before": before["top1"], "top1_after": after["top1"]}))
    return 0


def _cmd_eval(args) -> int:
    net = _load_model(args.model)
    dataset = resolve_dataset(args.data)
    print(json.dumps(evaluate(net, dataset, mode=args.mode)))
    return 0


def _cmd_verify(args) -> int:
    if not args.oracle:
        raise CliError("verify requires --oracle")
    cfg = SolverConfig(max_iter=args.max_iter)
    reports = verify_mod.oracle_trials(args.trials, args.s_max, args.seed, cfg)
    matched = sum(1 for r in reports
                  if r.gap <= 1e-9 * (1.0 + abs(r.oracle_objective)))
    negative = sum(1 for r in reports
                   if r.gap < -1e-9 * (1.0 + abs(r.oracle_objective)))
    if args.out:
        verify_mod.write_oracle_report(reports, args.out)
    print(json.dumps({
        "trials": len(reports),
        "global_optimum_matched": matched,
        "below_oracle": negative,
        "max_gap": max(r.gap for r in reports),
    }))
    return 0


def _cmd_ablate(args) -> int:
    net = _load_model(args.model)
    train_ds = resolve_dataset(args.data)
    eval_ds = resolve_dataset(args.eval_data)
    result = verify_mod.ablate_scale(net, train_ds, eval_ds, _pipeline_cfg(args))
    Path(args.out).write_text(json.dumps(result.to_json(), indent=2) + "\n",
                              encoding="utf-8")
    print(json.dumps(result.to_json()))
    return 0


def _cmd_curve(args) -> int:
    manifest = read_manifest(args.model)
    net = Network.from_manifest(manifest)
    dataset = resolve_dataset(args.data)
    cfg = _pipeline_cfg(args)
    if args.layers:
        indices = [int(v) for v in args.layers.split(",")]
    else:
        indices = [i for i, _ in net.weight_layers()]
    series_by_layer: dict[str, list[tuple[int, float]]] = {}
    initials: dict[str, float] = {}
    for idx in indices:
        layer = net.layers[idx]
        batch = sample_batch(dataset, cfg.batch_size, cfg.seed + idx)
        x = extract_layer_inputs(manifest, batch, idx)
        if x.shape[1] > cfg.col_cap:
            sel = np.random.default_rng([cfg.seed, idx]).choice(
                x.shape[1], cfg.col_cap, replace=False)
            sel.sort()
            x = x[:, sel]
        w = layer.weight.reshape(layer.weight.shape[0], -1).T
        problem = HashProblem(x_tilde=x, s_target=compute_target_similarity(x, w), w=w)
        name = layer.spec.name or f"layer{idx}"
        series_by_layer[name] = verify_mod.convergence_curve(problem, cfg.solver)
        initials[name] = verify_mod.initial_total(problem)
    verify_mod.write_curve_report(series_by_layer, initials, args.out)
    print(json.dumps({name: len(series) for name, series in series_by_layer.items()}))
    return 0


_COMMANDS = {
    "train-baseline": _cmd_train_baseline,
    "binarize": _cmd_binarize,
    "finetune": _cmd_finetune,
    "eval": _cmd_eval,
    "verify": _cmd_verify,
    "ablate": _cmd_ablate,
    "curve": _cmd_curve,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        return _COMMANDS[args.command](args)
    except (CliError, ManifestError, TensorFileError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ModeError, DivergenceError, OSError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
