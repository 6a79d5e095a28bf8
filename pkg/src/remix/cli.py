"""Command line entry points.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import sys
import tempfile
from pathlib import Path

from .bagstore import SynthConfig, dataset_stats, generate_synthetic_dataset, read_manifest
from .bench import run_bench
from .milnet import load_checkpoint, save_checkpoint
from .mixer import KINDS, AugmentConfig
from .reducer import ReduceConfig, ReduceError, reduce_dataset
from .trainer import (
    BagSource,
    TrainConfig,
    check_augmentation,
    evaluate,
    run_repeated,
    train,
    write_epoch_log,
)


class UsageError(Exception):
    pass


def _fail(code: int, message: str) -> int:
    print(f"remix: {message}", file=sys.stderr)
    return code


def _load_manifest(path, what="manifest"):
    if path is None:
        raise UsageError(f"missing --{what}")
    if not Path(path).is_file():
        raise UsageError(f"{what} not found: {path}")
    return read_manifest(path)


def _augment(args) -> AugmentConfig:
    p = args.p
    if p is None:
        p = 0.1 if args.aug == "joint" else 0.5
    try:
        lam = AugmentConfig.parse_lambda(args.lam)
        return AugmentConfig(args.aug, p, lam, args.gate)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _train_config(args) -> TrainConfig:
    try:
        return TrainConfig(model=args.model, epochs=args.epochs, lr=args.lr, augment=_augment(args),
                           seed=args.seed, runs=args.runs, hidden=args.hidden)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _reduce_config(args) -> ReduceConfig:
    try:
        return ReduceConfig(k=args.k, cov_mode=args.cov, max_iter=args.max_iter, tol=args.tol,
                            restarts=args.restarts, seed=args.seed, normalize=args.normalize)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    try:
        cfg = SynthConfig(classes=args.classes, dim=args.dim, bags_per_class=args.bags,
                          test_bags_per_class=args.test_bags, n_min=args.n_min, n_max=args.n_max,
                          background_components=args.background, evidence_components=args.evidence,
                          component_std=args.std, evidence_fraction=args.rho, seed=args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    train_m, test_m = generate_synthetic_dataset(cfg, args.out)
    print(f"train: {dataset_stats(train_m)}")
    if test_m.entries:
        print(f"test:  {dataset_stats(test_m)}")
    return 0


def cmd_reduce(args) -> int:
    manifest = _load_manifest(args.manifest)
    cfg = _reduce_config(args)
    try:
        reduced = reduce_dataset(manifest, cfg, args.out)
    except ReduceError as exc:
        return _fail(1, f"reduction failed for bag {exc.bag_id}: {exc}")
    before = sum(e.n_instances for e in manifest.entries)
    after = sum(e.n_instances for e in reduced.entries)
    print(f"bags={len(reduced)} instances {before} -> {after} reduction ratio {before / after:.2f}")
    return 0


def cmd_train(args) -> int:
    manifest = _load_manifest(args.manifest)
    test = _load_manifest(args.test, "test") if args.test else None
    cfg = _train_config(args)
    try:
        check_augmentation(BagSource(manifest), cfg.augment)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if cfg.runs > 1 and test is None:
        raise UsageError("--runs > 1 needs --test to evaluate each run")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def keep_first(i, state, report):
        if i == 0:
            save_checkpoint(state.model, out / "model.rmxm")
            write_epoch_log(state.logs, out / "epochs.csv")

    if test is None:
        state = train(manifest, cfg)
        keep_first(0, state, None)
        print(f"trained {cfg.model} for {cfg.epochs} epochs; final loss {state.logs[-1].loss:.6f}")
        return 0
    report = run_repeated(manifest, test, cfg, cfg.runs, on_run=keep_first)
    text = report.to_json()
    (out / "report.json").write_text(text + "\n")
    print(text)
    return 0


def cmd_eval(args) -> int:
    manifest = _load_manifest(args.manifest)
    if not Path(args.checkpoint).is_file():
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    model = load_checkpoint(args.checkpoint)
    try:
        report = evaluate(model, manifest)
    except ValueError as exc:
        return _fail(1, str(exc))
    print(report.to_json())
    return 0


def cmd_bench(args) -> int:
    if not args.full or not Path(args.full).is_file():
        raise UsageError(f"missing full-bag representation: {args.full or '--full not given'}")
    if not args.reduced or not Path(args.reduced).is_file():
        raise UsageError(f"missing reduced-bag representation: {args.reduced or '--reduced not given'}")
    full = read_manifest(args.full)
    reduced = read_manifest(args.reduced)
    if full.representation != "full":
        raise UsageError(f"{args.full} is not a full-bag manifest")
    if reduced.representation != "reduced":
        raise UsageError(f"{args.reduced} is not a reduced-bag manifest")
    if args.epochs < 2:
        raise UsageError("bench needs --epochs >= 2 (the first epoch is warm-up)")
    report = run_bench(full, reduced, model=args.model, epochs=args.epochs, seed=args.seed,
                       lr=args.lr, hidden=args.hidden)
    print(json.dumps(report.to_dict(), indent=2))
    return 0


_SWEEP_CAST = {"k": int, "p": float, "epochs": int}


def sweep_rows(args, out_dir: Path):
    """Yield ``(value, average, std, error)`` per sweep value, in order."""
    cast = _SWEEP_CAST[args.param]
    try:
        values = [cast(v) for v in args.values.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"bad --values for {args.param}: {args.values}") from None
    if not values:
        raise UsageError("--values is empty")
    train_m = _load_manifest(args.manifest)
    test_m = _load_manifest(args.test, "test")
    base = _train_config(args)
    pre_reduced = train_m.representation == "reduced"
    if args.param == "k" and pre_reduced:
        raise UsageError("a K sweep needs full-bag manifests")

    cache = {}

    def reduced_pair(k):
        if pre_reduced:
            return train_m, test_m
        if k not in cache:
            cfg = ReduceConfig(k=k, cov_mode=args.cov, seed=args.seed, normalize=args.normalize)
            target = out_dir / f"k{k}"
            cache[k] = (reduce_dataset(train_m, cfg, target), reduce_dataset(test_m, cfg, target))
        return cache[k]

    for value in values:
        try:
            k = value if args.param == "k" else args.k
            aug = base.augment
            epochs = base.epochs
            if args.param == "p":
                aug = AugmentConfig(aug.kind, value, aug.lam, aug.gate)
            elif args.param == "epochs":
                epochs = value
            cfg = TrainConfig(base.model, epochs, base.lr, aug, base.seed, base.runs, base.hidden)
            tr, te = reduced_pair(k)
            report = run_repeated(tr, te, cfg, cfg.runs)
            yield value, report.average, report.std["average"], ""
        except Exception as exc:  # recorded, sweep continues
            yield value, "", "", str(exc).replace("\n", " ")


def cmd_sweep(args) -> int:
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        rows = list(sweep_rows(args, out_dir))
    else:
        with tempfile.TemporaryDirectory() as tmp:
            rows = list(sweep_rows(args, Path(tmp)))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["value", "average", "std", "error"])
    for value, avg, std, err in rows:
        w.writerow([value, "" if avg == "" else repr(avg), "" if std == "" else repr(std), err])
    text = buf.getvalue()
    if args.out:
        (Path(args.out) / "sweep.csv").write_text(text)
    sys.stdout.write(text)
    return 1 if all(r[3] for r in rows) else 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_reduce_flags(p, k_default=8):
    p.add_argument("--k", type=int, default=k_default, help="prototypes per bag")
    p.add_argument("--cov", choices=["none", "diag", "full"], default=None,
                   help="covariance summary (default: full for d <= 256, else diag)")
    p.add_argument("--normalize", action="store_true", help="L2-normalise features before clustering")


def _add_train_flags(p):
    p.add_argument("--model", choices=["abmil", "dsmil"], default="abmil")
    p.add_argument("--aug", choices=KINDS, default="none")
    p.add_argument("--p", type=float, default=None, help="augmentation probability (default 0.5, joint 0.1)")
    p.add_argument("--lambda", dest="lam", default="uniform", help="uniform | fixed:<v>")
    p.add_argument("--gate", choices=["prototype", "bag"], default="prototype")
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--lr", type=float, default=2e-4)
    p.add_argument("--runs", type=int, default=1)
    p.add_argument("--hidden", type=int, default=128, help="attention width H (ABMIL) or query width Q (DSMIL)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="remix", description="Reduce-and-mix MIL pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic MIL dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--bags", type=int, default=100, help="train bags per class")
    p.add_argument("--test-bags", type=int, default=None, help="test bags per class (default: --bags)")
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--n-min", type=int, default=200)
    p.add_argument("--n-max", type=int, default=800)
    p.add_argument("--background", type=int, default=4)
    p.add_argument("--evidence", type=int, default=2)
    p.add_argument("--std", type=float, default=0.2)
    p.add_argument("--rho", type=float, default=0.2, help="evidence fraction per bag")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("reduce", help="cluster every bag into a prototype dictionary")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    _add_reduce_flags(p)
    p.add_argument("--restarts", type=int, default=1)
    p.add_argument("--max-iter", type=int, default=100)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_reduce)

    p = sub.add_parser("train", help="train (and optionally evaluate) a MIL model")
    p.add_argument("--manifest", required=True)
    p.add_argument("--test", default=None, help="test manifest; writes report.json")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="paired full-bag vs reduced-bag training budget")
    p.add_argument("--full", default=None, help="full-bag manifest")
    p.add_argument("--reduced", default=None, help="reduced-bag manifest")
    p.add_argument("--model", choices=["abmil", "dsmil"], default="abmil")
    p.add_argument("--epochs", type=int, default=3)
    p.add_argument("--lr", type=float, default=2e-4)
    p.add_argument("--hidden", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("sweep", help="grid sweep over K, p or epochs")
    p.add_argument("--param", choices=sorted(_SWEEP_CAST), required=True)
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--manifest", required=True, help="train manifest")
    p.add_argument("--test", required=True, help="test manifest")
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int, default=0)
    _add_reduce_flags(p)
    _add_train_flags(p)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        return _fail(2, str(exc))
    except (OSError, ValueError) as exc:
        return _fail(1, str(exc))


if __name__ == "__main__":
    sys.exit(main())
