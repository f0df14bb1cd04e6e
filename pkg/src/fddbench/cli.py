"""Command-line driver for the benchmark workflow.

Subcommands: synth, ingest, train, attack, defend, sweep, report, verify.
Every invocation is reproducible from its flags/config plus seeds, and every
output directory carries a metadata.json with the resolved-configuration
hash. Logs go to stderr; stdout stays silent except for the --dry-run cell
plan and the verify verdict lines.

Exit codes: 0 success, 1 completed with cell/sample failures, 2 usage or
config errors.

The default output directory is ``fddbench_out`` or the ``FDDBENCH_OUT``
environment variable.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from . import attacks as atk
from . import data as dt
from . import defenses as dfs
from . import models as md
from . import sweep as sw

log = logging.getLogger("fddbench")


class UsageError(ValueError):
    """Bad flags or config: exit code 2."""


def _default_out() -> str:
    return os.environ.get("FDDBENCH_OUT", "fddbench_out")


def _write_metadata(out_dir: Path, command: str, resolved: dict, outputs: list[str]) -> None:
    doc = {
        "command": command,
        "config_hash": hashlib.sha256(json.dumps(resolved, sort_keys=True).encode()).hexdigest(),
        "resolved_config": resolved,
        "outputs": sorted(outputs),
        "package_version": __version__,
    }
    (out_dir / "metadata.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _load_cache(path: str) -> tuple[dt.WindowedDataset, dt.WindowedDataset]:
    p = Path(path)
    if p.is_dir():
        p = p / "cache.npz"
    if not p.exists():
        raise UsageError(f"dataset cache not found: {p}")
    return dt.load_dataset_cache(p)


def _model_config_from_flags(args, train: dt.WindowedDataset) -> md.ModelConfig:
    hidden = tuple(int(h) for h in args.hidden.split(",")) if args.hidden else None
    base = md.desk_config(args.arch) if hidden is None else None
    return md.ModelConfig(
        arch=args.arch,
        window=train.k,
        sensors=train.sensors,
        classes=train.class_count,
        hidden=hidden if hidden is not None else base.hidden,
        epochs=args.epochs,
        learning_rate=args.lr,
        batch_size=args.batch_size,
        seed=args.seed,
    )


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    if args.classes < 2:
        raise UsageError(f"--classes must be >= 2, got {args.classes}")
    runs = dt.synth_generate(seed=args.seed, classes=args.classes, sensors=args.sensors,
                             run_length=args.length, runs_per_class=args.runs,
                             separation=args.separation, near_pair_gap=args.near_pair_gap)
    out = Path(args.out)
    extra = {"seed": args.seed, "separation": args.separation,
             "near_pair_gap": args.near_pair_gap, "runs_per_class": args.runs,
             "run_length": args.length, "classes": args.classes}
    paths = dt.write_runs_csv(runs, out, manifest_extra=extra)
    _write_metadata(out, "synth", extra, [p.name for p in paths] + ["manifest.json"])
    log.info("wrote %d runs to %s", len(paths), out)
    return 0


def cmd_ingest(args) -> int:
    runs = dt.load_runs(args.path, args.format)
    train, test = dt.prepare_datasets(runs, k=args.window, train_fraction=args.train_fraction,
                                      seed=args.seed, stride=args.stride)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cache = out / "cache.npz"
    dt.save_dataset_cache(cache, train, test)
    resolved = {"path": str(args.path), "format": args.format, "window": args.window,
                "stride": args.stride, "train_fraction": args.train_fraction, "seed": args.seed,
                "train_windows": len(train), "test_windows": len(test),
                "train_fingerprint": train.fingerprint(), "test_fingerprint": test.fingerprint()}
    _write_metadata(out, "ingest", resolved, ["cache.npz"])
    log.info("cached %d train / %d test windows at %s", len(train), len(test), cache)
    return 0


def cmd_train(args) -> int:
    train, test = _load_cache(args.data)
    cfg = _model_config_from_flags(args, train)
    model = md.build_model(cfg)
    report = md.train(model, train)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    md.save_model(model, out / "model.json")
    test_acc = md.accuracy(model, test)
    (out / "train_report.json").write_text(json.dumps({
        "epoch_losses": report.epoch_losses,
        "train_accuracy": report.final_accuracy,
        "test_accuracy": test_acc,
    }, indent=2, sort_keys=True) + "\n")
    _write_metadata(out, "train", asdict(cfg), ["model.json", "train_report.json"])
    log.info("trained %s: train acc %.4f, test acc %.4f", cfg.arch, report.final_accuracy, test_acc)
    return 0


def _attack_spec_from_flags(args) -> atk.AttackSpec:
    return atk.AttackSpec(kind=args.kind, epsilon=args.epsilon, pgd_steps=args.pgd_steps,
                          pgd_alpha=args.pgd_alpha, deepfool_max_iters=args.deepfool_max_iters,
                          cw_iters=args.cw_iters, cw_lr=args.cw_lr, seed=args.seed)


def cmd_attack(args) -> int:
    train, test = _load_cache(args.data)
    data = test if args.split == "test" else train
    if args.cap and len(data) > args.cap:
        data = data.subset(np.arange(args.cap))
    model_path = Path(args.model)
    try:
        model = dfs.load_protected(model_path)
    except (ValueError, KeyError):
        model = md.load_model(model_path)
    spec = _attack_spec_from_flags(args)
    batch = atk.attack_batch(model, data, spec, train_data=train)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rel_model = os.path.relpath(model_path.resolve(), out.resolve())
    atk.save_batch(batch, out / "batch.npz", model_path=rel_model)
    resolved = {"spec": spec.to_json(), "data": str(args.data), "split": args.split,
                "cap": args.cap, "model": str(args.model)}
    _write_metadata(out, "attack", resolved, ["batch.npz"])
    ok = int(batch.bound_ok.sum())
    log.info("attacked %d samples (%d within bound), max shift %.6f",
             len(batch), ok, float(batch.max_abs_shift().max(initial=0.0)))
    return 0 if batch.bound_ok.all() else 1


def cmd_defend(args) -> int:
    train, test = _load_cache(args.data)
    cfg = _model_config_from_flags(args, train)
    try:
        spec = dfs.DefenseSpec.from_json(json.loads(Path(args.spec).read_text()))
    except json.JSONDecodeError as exc:
        raise UsageError(f"defense spec {args.spec}: {exc}") from exc
    protected = dfs.defend(cfg, train, spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dfs.save_protected(protected, out / "protected.json")
    resolved = {"model": asdict(cfg), "defense": spec.to_json()}
    _write_metadata(out, "defend", resolved, ["protected.json"])
    log.info("defense %s: clean test accuracy %.4f", spec.kind, md.accuracy(protected, test))
    return 0


def _sweep_setup(args) -> tuple[sw.SweepConfig, dt.WindowedDataset, dt.WindowedDataset, dict]:
    try:
        doc = json.loads(Path(args.config).read_text())
    except FileNotFoundError:
        raise UsageError(f"config file not found: {args.config}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {args.config} is not valid JSON: "
                         f"line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    if "data" not in doc:
        raise UsageError("config field 'data' is required (path to a dataset cache "
                         "or an inline synth block)")
    data_block = doc["data"]
    if "cache" in data_block:
        train, test = _load_cache(data_block["cache"])
    elif "synth" in data_block:
        synth = dict(data_block["synth"])
        runs = dt.synth_generate(**synth)
        train, test = dt.prepare_datasets(
            runs, k=data_block.get("window", 16),
            train_fraction=data_block.get("train_fraction", 0.8),
            seed=data_block.get("split_seed", synth.get("seed", 0)))
    else:
        raise UsageError("config field 'data' needs either 'cache' or 'synth'")

    sweep_blob = {k: v for k, v in doc.items() if k != "data"}
    if args.seed is not None:
        sweep_blob["master_seed"] = args.seed
    if args.max_workers is not None:
        sweep_blob["max_workers"] = args.max_workers
    try:
        config = sw.SweepConfig.from_json(sweep_blob)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"config {args.config}: {exc}") from exc
    return config, train, test, doc


def cmd_sweep(args) -> int:
    config, train, test, doc = _sweep_setup(args)
    plan = [(m.get("arch", "MLP"), d, a, e)
            for m in config.models
            for d in ["Unprotected"] + [s.kind for s in config.defenses]
            for a in config.attacks
            for e in config.epsilon_grid]
    if args.dry_run:
        print(f"cells: {len(plan)}")
        for model, defense, attack_kind, eps in plan:
            print(f"{model},{defense},{attack_kind},{eps:.3f}")
        return 0

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = sw.run_sweep(config, train, test,
                          artifact_dir=out if args.save_batches else None)
    files = sw.emit_report(report, set(args.formats.split(",")), out)
    _write_metadata(out, "sweep", {"config": doc, "report_hash": report.hash()},
                    [f.name for f in files])
    errors = report.error_cells()
    log.info("sweep finished: %d cells, %d errors, wall %.1fs",
             len(report.cells), len(errors), report.wall_time_s)
    return 1 if errors else 0


def cmd_report(args) -> int:
    try:
        doc = json.loads(Path(args.report).read_text())
        report = sw.report_from_json(doc)
    except (json.JSONDecodeError, ValueError, KeyError) as exc:
        raise UsageError(f"cannot read report {args.report}: {exc}") from exc
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = sw.emit_report(report, set(args.formats.split(",")), out)
    _write_metadata(out, "report", {"source": str(args.report)}, [f.name for f in files])
    return 0


def cmd_verify(args) -> int:
    path = Path(args.batch)
    try:
        batch, meta = atk.load_batch(path)
    except Exception as exc:
        log.error("cannot load %s: %s", path, exc)
        return 2
    if len(batch) == 0:
        print("PASS (empty batch)")
        log.warning("batch is empty; nothing to verify")
        return 0

    bound = atk.check_bound(batch.originals, batch.perturbed, batch.epsilon)

    replay = None
    model = None
    if batch.spec.kind == "Noise" or batch.spec.epsilon == 0.0:
        model = object()  # unused by the replay path
    elif meta.get("model_path"):
        candidate = (path.parent / meta["model_path"]).resolve()
        if candidate.exists():
            try:
                model = dfs.load_protected(candidate)
            except (ValueError, KeyError):
                model = md.load_model(candidate)
            if batch.model_fingerprint and model.fingerprint() != batch.model_fingerprint:
                log.warning("model fingerprint mismatch; skipping determinism replay")
                model = None
    if model is not None:
        view = dt.WindowedDataset(batch.originals, batch.labels,
                                  np.zeros(len(batch), dtype=int), batch.originals.shape[1])
        replay_batch = atk.attack_batch(model, view, batch.spec)
        replay = np.array([np.array_equal(a, b)
                           for a, b in zip(replay_batch.perturbed, batch.perturbed)])
    else:
        log.warning("no model available; verifying the bound only")

    failures = 0
    for i in range(len(batch)):
        ok = bool(bound[i]) and (replay is None or bool(replay[i]))
        if not ok:
            failures += 1
        detail = "" if bound[i] else " bound-exceeded"
        if replay is not None and not replay[i]:
            detail += " not-reproducible"
        print(f"{'PASS' if ok else 'FAIL'} sample {i}{detail}")
    print(f"{'PASS' if failures == 0 else 'FAIL'}: {len(batch) - failures}/{len(batch)} samples ok")
    return 0 if failures == 0 else 1


# ---------------------------------------------------------------------------
# parser


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fddbench",
                                     description="fault-diagnosis adversarial robustness benchmark")
    parser.add_argument("--version", action="version", version=f"fddbench {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic run corpus as CSV files")
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--sensors", type=int, required=True)
    p.add_argument("--runs", type=int, required=True, help="runs per class")
    p.add_argument("--length", type=int, required=True, help="timestamps per run")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--separation", type=float, default=2.5)
    p.add_argument("--near-pair-gap", type=float, default=None)
    p.add_argument("--out", default=_default_out())
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", help="load CSV runs, standardize, window, split, cache")
    p.add_argument("--path", required=True)
    p.add_argument("--format", choices=("csv-dir", "single-csv"), default="csv-dir")
    p.add_argument("--window", type=int, default=16)
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--train-fraction", type=float, default=0.8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=_default_out())
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", help="train a classifier on a dataset cache")
    p.add_argument("--data", required=True)
    p.add_argument("--arch", choices=md.ARCHS[:3], default="MLP")
    p.add_argument("--hidden", default=None, help="comma-separated sizes")
    p.add_argument("--epochs", type=int, default=12)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=_default_out())
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("attack", help="attack a trained model, write the adversarial batch")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--kind", choices=atk.ATTACK_KINDS, required=True)
    p.add_argument("--epsilon", type=float, required=True)
    p.add_argument("--pgd-steps", type=int, default=10)
    p.add_argument("--pgd-alpha", type=float, default=None)
    p.add_argument("--deepfool-max-iters", type=int, default=50)
    p.add_argument("--cw-iters", type=int, default=100)
    p.add_argument("--cw-lr", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--cap", type=int, default=1000)
    p.add_argument("--out", default=_default_out())
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("defend", help="train a protected model from a defense spec")
    p.add_argument("--data", required=True)
    p.add_argument("--spec", required=True, help="path to a DefenseSpec JSON file")
    p.add_argument("--arch", choices=md.ARCHS[:3], default="MLP")
    p.add_argument("--hidden", default=None)
    p.add_argument("--epochs", type=int, default=12)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=_default_out())
    p.set_defaults(func=cmd_defend)

    p = sub.add_parser("sweep", help="run the strength-sweep protocol from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=_default_out())
    p.add_argument("--formats", default="csv,json,svg")
    p.add_argument("--seed", type=int, default=None, help="override master seed")
    p.add_argument("--max-workers", type=int, default=None)
    p.add_argument("--save-batches", action="store_true")
    p.add_argument("--dry-run", action="store_true")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="re-render an existing report.json")
    p.add_argument("--report", required=True)
    p.add_argument("--formats", default="csv,svg")
    p.add_argument("--out", default=_default_out())
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("verify", help="audit an adversarial batch artifact")
    p.add_argument("--batch", required=True)
    p.set_defaults(func=cmd_verify)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors and 0 on --help
        return int(exc.code or 0)
    logging.basicConfig(stream=sys.stderr,
                        level=logging.DEBUG if getattr(args, "verbose", False) else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        log.error("%s", exc)
        return 2
    except (dt.ParseError, FileNotFoundError) as exc:
        log.error("%s", exc)
        return 2
    except (ValueError, md.TrainingError, atk.AttackError) as exc:
        log.error("%s", exc)
        return 1


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
