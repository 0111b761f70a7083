"""Operator entry points: synth / ingest / prep / train / eval / report.

Every command resolves its full configuration and records it in the manifest
of the artifact it produces, so any run is reproducible from its manifest
alone. Exit codes: 0 success, 2 usage error (argparse), 3 missing input,
4 configuration conflict, 1 unexpected failure; failures print a
machine-readable JSON error line on stderr.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

from .errors import ConfigError, IngestionError, MetricError, ReportError, WgnetError

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_MISSING_INPUT = 3
EXIT_CONFIG = 4
EXIT_FAILURE = 1

ALL_MODELS = ("cnn1d", "lstm", "gnn-mlp", "gat", "wgn-inverse", "wgn-coupled")


def _store_path(args) -> Path:
    store = args.store or os.environ.get("WGNET_STORE")
    if not store:
        raise ConfigError("no store given (use --store or WGNET_STORE)")
    path = Path(store)
    if not (path / "manifest.json").exists():
        raise FileNotFoundError(f"store {path} has no manifest.json")
    return path


def _band_config(args):
    from .training import BandConfig

    return BandConfig(low_hz=args.band_low, high_hz=args.band_high, n_bins=args.bins)


def _stage_plan(args):
    from .training import StagePlan

    return StagePlan(
        stage1_epochs=args.stage1_epochs,
        stage2_epochs=args.stage2_epochs,
        stage3_epochs=args.stage3_epochs,
        lr_initial=args.lr,
        lr_stage3=args.lr_stage3,
        batch_size=args.batch_size,
        plateau_factor=args.plateau_factor,
        plateau_patience=args.plateau_patience,
        single_stage_epochs=args.epochs,
    )


def _coupling(args):
    from .training import CouplingConfig

    return CouplingConfig(
        lambda_max=args.lambda_max,
        warmup_epochs=args.warmup,
        ramp_epochs=args.ramp,
        mu=args.mu,
        alpha=args.alpha,
        eps_weight=args.eps,
        eps_grad=args.eps_grad,
    )


def _prep_cache_path(out_dir: Path, split: str, seed: int) -> Path:
    return out_dir / "prep" / f"prep_{split}_s{seed}.npz"


def _prep_config_hash(store_root: Path, split: str, seed: int, band) -> str:
    with open(store_root / "manifest.json") as fh:
        store_manifest = json.load(fh)
    payload = {
        "store_samples": store_manifest["samples"],
        "split": split,
        "seed": seed,
        "band": asdict(band),
    }
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def _prepare(store, store_root: Path, split: str, seed: int, band, out_dir: Path):
    """Prepare (or reuse a cached) dataset for one (split, seed)."""
    from .training import load_prepared, prepare_dataset, save_prepared

    cache = _prep_cache_path(out_dir, split, seed)
    cfg_hash = _prep_config_hash(store_root, split, seed, band)
    meta_path = cache.with_suffix(".json")
    if cache.exists() and meta_path.exists():
        with open(meta_path) as fh:
            meta = json.load(fh)
        if meta.get("config_hash") == cfg_hash:
            return load_prepared(cache, store), True
    dataset = prepare_dataset(store, split, seed, band)
    save_prepared(dataset, cache)
    with open(meta_path) as fh:
        meta = json.load(fh)
    meta["config_hash"] = cfg_hash
    meta["resolved_config"] = {"split": split, "seed": seed, "band": asdict(band),
                               "store": str(store_root)}
    with open(meta_path, "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
    return dataset, False


def _run_dir(out_dir: Path, split: str, model: str, seed: int) -> Path:
    return out_dir / "runs" / f"{split}_{model}_seed{seed}"


def cmd_synth(args) -> int:
    from .data_io import SyntheticConfig, generate_synthetic

    cfg = SyntheticConfig(
        t_samples=args.t_samples,
        sampling_rate_hz=args.fs,
        shadow_sigma=args.sigma,
        noise_level=args.noise,
        samples_per_location=args.samples_per_location,
        pristine_count=args.pristine_count,
        layout_file=args.layout,
    )
    store = generate_synthetic(cfg, args.seed, args.out)
    print(f"wrote synthetic store with {len(store.samples)} samples to {store.root}")
    return EXIT_OK


def cmd_ingest(args) -> int:
    from .data_io import ingest_ogw

    source = Path(args.source)
    if not source.exists():
        raise FileNotFoundError(f"source directory {source} does not exist")
    store = ingest_ogw(source, args.out, excitation_hz=args.excitation_hz)
    print(f"ingested {len(store.samples)} samples into {store.root}")
    return EXIT_OK


def cmd_prep(args) -> int:
    from .data_io import load_store

    store_root = _store_path(args)
    store = load_store(store_root)
    out_dir = Path(args.out)
    band = _band_config(args)
    for seed in args.seeds:
        _, cached = _prepare(store, store_root, args.split, seed, band, out_dir)
        state = "reused cached" if cached else "wrote"
        print(f"{state} prep artifacts for split {args.split} seed {seed}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .data_io import load_store
    from .training import train_model

    store_root = _store_path(args)
    store = load_store(store_root)
    out_dir = Path(args.out)
    band = _band_config(args)
    plan = _stage_plan(args)
    coupling = _coupling(args)
    models = ALL_MODELS if args.models == ["all"] else args.models
    for kind in models:
        if kind not in ALL_MODELS:
            raise ConfigError(f"unknown model kind {kind!r}; choose from {ALL_MODELS}")

    jobs = [(kind, seed) for kind in models for seed in args.seeds]
    if args.parallel and len(jobs) > 1:
        import concurrent.futures as futures

        with futures.ProcessPoolExecutor(max_workers=min(len(jobs), os.cpu_count() or 2)) as pool:
            tasks = [
                pool.submit(
                    _train_one_job, str(store_root), args.split, kind, seed,
                    str(out_dir), asdict(band), asdict(plan), asdict(coupling),
                )
                for kind, seed in jobs
            ]
            for task in tasks:
                print(task.result())
    else:
        for kind, seed in jobs:
            dataset, _ = _prepare(store, store_root, args.split, seed, band, out_dir)
            run_dir = _run_dir(out_dir, args.split, kind, seed)
            manifest = train_model(dataset, kind, seed, run_dir, plan, coupling)
            print(f"trained {kind} split {args.split} seed {seed} -> {run_dir} "
                  f"(best_score={manifest['best_score']:.5g})")
    return EXIT_OK


def _train_one_job(store_root, split, kind, seed, out_dir, band_d, plan_d, coupling_d) -> str:
    from .data_io import load_store
    from .training import BandConfig, CouplingConfig, StagePlan, train_model

    store = load_store(store_root)
    dataset, _ = _prepare(
        store, Path(store_root), split, seed, BandConfig(**band_d), Path(out_dir)
    )
    run_dir = _run_dir(Path(out_dir), split, kind, seed)
    manifest = train_model(
        dataset, kind, seed, run_dir, StagePlan(**plan_d), CouplingConfig(**coupling_d)
    )
    return f"trained {kind} split {split} seed {seed} (best_score={manifest['best_score']:.5g})"


def cmd_eval(args) -> int:
    from .data_io import load_store
    from .evaluation import evaluate_run
    from .training import load_checkpoint

    store_root = _store_path(args)
    store = load_store(store_root)
    out_dir = Path(args.out)
    band = _band_config(args)
    models = ALL_MODELS if args.models == ["all"] else args.models
    evaluated = 0
    for kind in models:
        for seed in args.seeds:
            run_dir = _run_dir(out_dir, args.split, kind, seed)
            ckpt = run_dir / "checkpoint.pt"
            if not ckpt.exists():
                if args.models != ["all"]:
                    raise FileNotFoundError(f"no checkpoint at {ckpt}; train first")
                continue
            dataset, _ = _prepare(store, store_root, args.split, seed, band, out_dir)
            model, _forward, kind_loaded = load_checkpoint(ckpt, dataset)
            result = evaluate_run(model, kind_loaded, dataset, margin=args.margin)
            result["resolved_config"] = {
                "checkpoint": str(ckpt),
                "margin": args.margin,
                "store": str(store_root),
                "band": asdict(band),
            }
            with open(run_dir / "eval.json", "w") as fh:
                json.dump(result, fh, indent=2, sort_keys=True)
            m = result["metrics"]
            print(
                f"{kind} split {args.split} seed {seed}: "
                f"seen={m['seen_mae_norm']:.3f} unseen={m['unseen_mae_norm']:.3f} "
                f"fpr={m['fpr_fraction']}"
            )
            evaluated += 1
    if evaluated == 0:
        raise FileNotFoundError("no trained checkpoints found to evaluate")
    return EXIT_OK


def cmd_report(args) -> int:
    from .evaluation import emit_report

    out_dir = Path(args.out)
    if args.runs:
        run_dirs = [Path(r) for r in args.runs]
    else:
        runs_root = out_dir / "runs"
        if not runs_root.exists():
            raise FileNotFoundError(f"no runs directory under {out_dir}")
        run_dirs = sorted(p for p in runs_root.iterdir() if (p / "eval.json").exists())
        if not run_dirs:
            raise FileNotFoundError(f"no evaluated runs under {runs_root}")
    report_path = emit_report(run_dirs, out_dir / "report")
    print(f"wrote {report_path}")
    return EXIT_OK


def _add_band_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--band-low", type=float, default=69.4e3, help="band lower edge [Hz]")
    p.add_argument("--band-high", type=float, default=128e3, help="band upper edge [Hz]")
    p.add_argument("--bins", type=int, default=256, help="number of spectral bins K")


def _add_store_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--store", default=None, help="canonical store (or WGNET_STORE)")
    p.add_argument("--out", required=True, help="output working directory")


def _seeds(value: str) -> list[int]:
    return [int(v) for v in value.split(",") if v != ""]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wgnet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic store with oracle")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--t-samples", type=int, default=4096)
    p.add_argument("--fs", type=float, default=1e6)
    p.add_argument("--sigma", type=float, default=0.05)
    p.add_argument("--noise", type=float, default=0.01)
    p.add_argument("--samples-per-location", type=int, default=1)
    p.add_argument("--pristine-count", type=int, default=60)
    p.add_argument("--layout", default=None, help="layout metadata JSON (default: packaged)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", help="ingest an OGW-style source into a store")
    p.add_argument("--source", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--excitation-hz", type=float, default=100e3)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("prep", help="fit preprocessing and cache descriptors/targets")
    _add_store_flags(p)
    p.add_argument("--split", choices=("A", "B"), required=True)
    p.add_argument("--seeds", type=_seeds, default=[0])
    _add_band_flags(p)
    p.set_defaults(func=cmd_prep)

    p = sub.add_parser("train", help="train one or more models")
    _add_store_flags(p)
    p.add_argument("--split", choices=("A", "B"), required=True)
    p.add_argument("--model", dest="models", action="append", default=None,
                   help="model kind; repeatable")
    p.add_argument("--models", dest="models_list", default=None,
                   help="comma list or 'all'")
    p.add_argument("--seeds", type=_seeds, default=[0, 1, 42])
    p.add_argument("--parallel", action="store_true", help="train seeds/models in parallel")
    _add_band_flags(p)
    p.add_argument("--epochs", type=int, default=900, help="single-stage total epochs")
    p.add_argument("--stage1-epochs", type=int, default=150)
    p.add_argument("--stage2-epochs", type=int, default=150)
    p.add_argument("--stage3-epochs", type=int, default=600)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--lr-stage3", type=float, default=1e-5)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--plateau-factor", type=float, default=0.8)
    p.add_argument("--plateau-patience", type=int, default=20)
    p.add_argument("--lambda-max", type=float, default=3.0)
    p.add_argument("--warmup", type=int, default=40)
    p.add_argument("--ramp", type=int, default=100)
    p.add_argument("--mu", type=float, default=1.0)
    p.add_argument("--alpha", type=float, default=0.1)
    p.add_argument("--eps", type=float, default=0.01)
    p.add_argument("--eps-grad", type=float, default=1e-8)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate trained checkpoints")
    _add_store_flags(p)
    p.add_argument("--split", choices=("A", "B"), required=True)
    p.add_argument("--models", type=lambda v: v.split(","), default=["all"])
    p.add_argument("--seeds", type=_seeds, default=[0, 1, 42])
    p.add_argument("--margin", type=float, default=0.0,
                   help="tolerance band widening the admissible domain")
    _add_band_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="aggregate evaluated runs into a report")
    p.add_argument("--out", required=True)
    p.add_argument("--runs", nargs="*", default=None, help="explicit run directories")
    p.set_defaults(func=cmd_report)

    return parser


def dispatch(argv: list[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse handles usage errors itself
        return int(exc.code) if exc.code is not None else EXIT_USAGE
    if getattr(args, "models_list", None) is not None:
        args.models = ["all"] if args.models_list == "all" else args.models_list.split(",")
    if getattr(args, "func", None) is cmd_train and args.models is None:
        args.models = ["wgn-coupled"]
    try:
        return args.func(args)
    except (FileNotFoundError, IngestionError, ReportError) as exc:
        _print_error("missing-input", exc)
        return EXIT_MISSING_INPUT
    except (ConfigError, MetricError) as exc:
        _print_error("config", exc)
        return EXIT_CONFIG
    except WgnetError as exc:
        _print_error("failure", exc)
        return EXIT_FAILURE
    except Exception as exc:  # keep the machine-readable contract at the boundary
        _print_error(f"unexpected:{type(exc).__name__}", exc)
        return EXIT_FAILURE


def _print_error(kind: str, exc: Exception) -> None:
    sys.stderr.write(json.dumps({"error": kind, "message": str(exc)}) + "\n")


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
