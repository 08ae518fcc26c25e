"""Command-line entry point: ``pairseq <command> ...``.

Exit codes: 0 success, 2 usage or config error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

from . import __version__
from .checkpoint import load_checkpoint, model_from_checkpoint
from .config import TrainConfig, dump_config, load_config
from .dataset import PairDataset, build_fold, extract_5seqs, manifest_bytes, materialize
from .errors import ConfigError, PairseqError
from .gradcheck import DEFAULT_TOLERANCE, TINY_MODEL, run_gradcheck
from .model import ModelConfig
from .preprocess import (
    DEFAULT_TARGET_VOXELS,
    DEFAULT_THRESHOLD,
    build_roi_mask,
    load_runs,
    preprocess_raw_run,
    read_atlas,
    save_run,
)
from .synthgen import SynthSpec, generate
from .trainer import (
    DEFAULT_SPACE,
    base_run_manifest,
    crossval,
    evaluate,
    finetune_run,
    fixed_val_plans,
    fold_spec,
    grid_search,
    pretrain_run,
)
from .vxts import read_vxts

log = logging.getLogger("pairseq")

RUN_ROOT_ENV = "PAIRSEQ_RUN_ROOT"


class UsageError(ConfigError):
    """Bad arguments or missing paths (exit 2)."""


def _exists(path: str | Path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {p}")
    return p


def _run_root(args) -> Path:
    return Path(args.run_root or os.environ.get(RUN_ROOT_ENV, "runs"))


def _digest_inputs(data_dir: Path) -> dict[str, str]:
    return {
        str(p.relative_to(data_dir)): hashlib.sha256(p.read_bytes()).hexdigest()
        for p in sorted(data_dir.rglob("*")) if p.is_file()
    }


def _config(args, **forced) -> TrainConfig:
    overrides = {"seed": getattr(args, "seed", None), "epochs": getattr(args, "epochs", None),
                 "lr": getattr(args, "lr", None), **forced}
    cfg = load_config(_exists(args.config, "config file") if args.config else None, **overrides)
    if getattr(args, "print_config", False):
        sys.stdout.write(dump_config(cfg))
        raise SystemExit(0)
    return cfg


def _seqs(data_dir: str):
    runs = load_runs(_exists(data_dir, "data directory"))
    return extract_5seqs(runs)


def _manifest(args, command: str, cfg: TrainConfig, fold: int, data_dir: Path) -> dict:
    m = base_run_manifest(command, cfg, fold_spec(cfg, fold).seed, "",
                          inputs=_digest_inputs(data_dir))
    m["argv"] = sys.argv[1:]
    m["config"] = cfg.to_dict()
    m["fold"] = fold
    return m


def _fmt(v) -> str:
    return "-" if v is None else (f"{v:.4f}" if isinstance(v, float) else str(v))


# commands -----------------------------------------------------------------------


def cmd_preprocess(args) -> int:
    atlas = read_atlas(_exists(args.atlas, "atlas file"))
    raw_dir = _exists(args.raw, "raw directory")
    mask = build_roi_mask(atlas, args.threshold, args.target_voxels)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = sorted(raw_dir.glob("*.vxts"))
    if not files:
        raise UsageError(f"no .vxts files in {raw_dir}")
    for f in files:
        raw, meta = read_vxts(f)
        save_run(preprocess_raw_run(raw, meta, atlas, mask), out)
    report = mask.report()
    (out / "mask_report.json").write_text(json.dumps(report, sort_keys=True, indent=2) + "\n")
    print(json.dumps(report, sort_keys=True))
    print(f"wrote {len(files)} runs to {out}")
    return 0


def cmd_synth_gen(args) -> int:
    spec = SynthSpec(n_subjects=args.subjects, genre_signal_strength=args.strength,
                     noise_sd=args.noise, temporal_corr=args.temporal_corr, seed=args.seed)
    data = generate(spec)
    out = data.write(args.out_dir)
    (out / "synth_spec.json").write_text(json.dumps(spec.to_dict(), sort_keys=True, indent=2) + "\n")
    if not args.raw_only:
        for run in data.preprocessed():
            save_run(run, out / "data")
    print(f"wrote {len(data.raw)} runs for {spec.n_subjects} subject(s) to {out}")
    return 0


def cmd_build_dataset(args) -> int:
    cfg = _config(args)
    seqs = _seqs(args.data_dir)
    task = "sg" if args.task == "sg" else "ntp"
    # same fold seed the matching training command would use
    phase = cfg if cfg.task == task else cfg.replace(regimen="fresh_sg" if task == "sg" else "ntp_only")
    train, val = build_fold(seqs, fold_spec(phase, args.fold), task)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "dataset.json").write_bytes(manifest_bytes(train, val, args.fold))
    materialize(PairDataset(train, task), out / "train.vxts", args.fold)
    materialize(PairDataset(val, task), out / "val.vxts", args.fold)
    print(f"fold {args.fold} ({task}): {len(train)} train / {len(val)} val pairs -> {out}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = _config(args, regimen=args.regimen)
    data_dir = _exists(args.data_dir, "data directory")
    seqs = _seqs(args.data_dir)
    out = _run_root(args) / cfg.regimen / str(args.fold)
    r = pretrain_run(args.fold, cfg, seqs, out, run_manifest=_manifest(args, "pretrain", cfg, args.fold, data_dir))
    print("heldout_run  n_layers  best_val_acc  best_epoch  mbm_val_loss")
    print(f"{args.fold:>11}  {cfg.model.n_layers:>8}  {r.best_val_acc:>12.4f}  {r.best_epoch:>10}  "
          f"{_fmt(r.mbm_val_loss):>12}")
    if r.initial_loss_ratio is not None:
        print(f"initial NTP/MBM loss ratio: {r.initial_loss_ratio:.3f}")
    print(f"run directory: {out}")
    return 0


def _parse_init(value: str):
    if value == "fresh":
        return "fresh", None
    if value.startswith("checkpoint:"):
        return "checkpoint", value.split(":", 1)[1]
    raise UsageError(f"--init must be 'fresh' or 'checkpoint:PATH', got {value!r}")


def cmd_finetune(args) -> int:
    kind, path = _parse_init(args.init)
    regimen = "fresh_sg" if kind == "fresh" else "finetune_sg"
    cfg = _config(args, regimen=regimen)
    init = "fresh" if kind == "fresh" else _exists(path, "checkpoint").read_bytes()
    data_dir = _exists(args.data_dir, "data directory")
    seqs = _seqs(args.data_dir)
    out = _run_root(args) / regimen / str(args.fold)
    manifest = _manifest(args, "finetune", cfg, args.fold, data_dir)
    if path:
        manifest["inputs"]["init_checkpoint"] = hashlib.sha256(init).hexdigest()
    r = finetune_run(args.fold, cfg, seqs, init, out, run_manifest=manifest)
    print("heldout_run  best_val_acc  best_epoch")
    print(f"{args.fold:>11}  {r.best_val_acc:>12.4f}  {r.best_epoch:>10}")
    print(f"run directory: {out}")
    return 0


def _fold_list(text: str | None) -> list[int] | None:
    if text is None:
        return None
    try:
        return [int(f) for f in text.split(",") if f.strip()]
    except ValueError:
        raise UsageError(f"--folds expects comma-separated integers, got {text!r}") from None


def cmd_crossval(args) -> int:
    regimen = args.regimen.replace("-", "_")
    cfg = _config(args, regimen=regimen)
    seqs = _seqs(args.data_dir)
    ckpt_root = args.checkpoint_root
    if regimen == "finetune_sg" and ckpt_root is None:
        ckpt_root = _run_root(args) / "ntp_only"
    if ckpt_root is not None:
        _exists(ckpt_root, "checkpoint root")
    summary = crossval(regimen, cfg, seqs, _run_root(args), folds=_fold_list(args.folds),
                       jobs=args.jobs, checkpoint_root=ckpt_root)
    sys.stdout.write(summary.csv())
    return 0


def cmd_grid_search(args) -> int:
    cfg = _config(args, regimen=args.regimen)
    space = dict(DEFAULT_SPACE)
    if args.space:
        loaded = json.loads(_exists(args.space, "search space file").read_text())
        unknown = set(loaded) - set(DEFAULT_SPACE)
        if unknown:
            raise UsageError(f"unknown search-space keys: {sorted(unknown)}")
        if "alphas" in loaded:
            loaded["alphas"] = [tuple(a) for a in loaded["alphas"]]
        space.update(loaded)
    seqs = _seqs(args.data_dir)
    ranked, skipped = grid_search(space, cfg, seqs, args.fold, _run_root(args) / "grid",
                                  jobs=args.jobs)
    for notice in skipped:
        print(f"notice: {notice}")
    print("rank,alpha1,alpha2,lr,n_heads,forward_expansion,n_layers,best_val_acc,best_epoch")
    for i, g in enumerate(ranked, 1):
        c = g.config
        print(f"{i},{c.alpha1},{c.alpha2},{c.lr},{c.model.n_heads},{c.model.forward_expansion},"
              f"{c.model.n_layers},{g.best_val_acc!r},{g.best_epoch}")
    return 0


def cmd_grad_check(args) -> int:
    model_cfg = TINY_MODEL
    if args.config:
        data = json.loads(_exists(args.config, "config file").read_text())
        model_cfg = ModelConfig.from_dict({**TINY_MODEL.to_dict(), **data.get("model", data)})
    if args.print_config:
        print(json.dumps(model_cfg.to_dict(), sort_keys=True, indent=2))
        return 0
    if args.tolerance < 0:
        raise UsageError("--tolerance must be >= 0")
    report = run_gradcheck(model_cfg, tolerance=args.tolerance, seed=args.seed or 0)
    print("\n".join(report.lines()))
    return 0 if report.passed else 4


def cmd_eval(args) -> int:
    blob = _exists(args.checkpoint, "checkpoint").read_bytes()
    _, stored_model, meta = load_checkpoint(blob)
    run_dir = Path(args.checkpoint).parent
    if args.config:
        cfg = _config(args)
    elif (run_dir / "config.json").exists():
        cfg = _config(argparse.Namespace(**{**vars(args), "config": run_dir / "config.json"}))
    else:
        raise UsageError("eval needs --config (no config.json next to the checkpoint)")
    fold = args.fold if args.fold is not None else int(meta.get("fold", 0))
    seqs = _seqs(args.data_dir)
    spec = fold_spec(cfg, fold)
    _, val = build_fold(seqs, spec, cfg.task)
    data = PairDataset(val, cfg.task)
    model, _ = model_from_checkpoint(blob, stored_model)
    plans = pool = None
    if cfg.uses_mbm:
        train, _ = build_fold(seqs, spec, cfg.task)
        pool = PairDataset(train, cfg.task).image_pool()
        plans = fixed_val_plans(spec.seed, len(data), len(pool))
    res = evaluate(model, data, cfg.batch_size, val_plans=plans, pool=pool)
    out = {"fold": fold, "regimen": cfg.regimen, "val_acc": res.accuracy, "val_loss": res.loss,
           "mbm_val_loss": res.mbm_loss, "logged_val_acc": meta.get("val_acc")}
    print(json.dumps(out, sort_keys=True))
    return 0


# parser -----------------------------------------------------------------------------


def _common(p: argparse.ArgumentParser, *, train: bool = True) -> None:
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--print-config", action="store_true", help="print the resolved config and exit")
    p.add_argument("--seed", type=int, help="base seed for every random stream")
    if train:
        p.add_argument("--epochs", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--run-root", help=f"run directory root (default ${RUN_ROOT_ENV} or ./runs)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pairseq", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="atlas + raw VXTS runs -> standardized ROI runs")
    p.add_argument("atlas")
    p.add_argument("raw")
    p.add_argument("out_dir")
    p.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
    p.add_argument("--target-voxels", type=int, default=DEFAULT_TARGET_VOXELS)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("synth-gen", help="write a synthetic atlas, raw runs and preprocessed runs")
    p.add_argument("out_dir")
    p.add_argument("--subjects", type=int, default=1)
    p.add_argument("--strength", type=float, default=1.0, help="genre signal strength")
    p.add_argument("--noise", type=float, default=1.0, help="white-noise sd")
    p.add_argument("--temporal-corr", type=float, default=0.9)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--raw-only", action="store_true", help="skip writing data/")
    p.set_defaults(func=cmd_synth_gen)

    p = sub.add_parser("build-dataset", help="build and materialize one fold's paired samples")
    p.add_argument("data_dir")
    p.add_argument("out_dir")
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--task", choices=("ntp", "sg"), default="ntp")
    _common(p, train=False)
    p.set_defaults(func=cmd_build_dataset)

    p = sub.add_parser("pretrain", help="pretrain one fold")
    p.add_argument("data_dir")
    p.add_argument("--regimen", choices=("multitask", "ntp-only", "ntp_only"), default="multitask")
    p.add_argument("--fold", type=int, default=0)
    _common(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="same-genre training from a checkpoint or from scratch")
    p.add_argument("data_dir")
    p.add_argument("--init", default="fresh", help="'fresh' or 'checkpoint:PATH'")
    p.add_argument("--fold", type=int, default=0)
    _common(p)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("crossval", help="12-fold cross-validation with a summary table")
    p.add_argument("data_dir")
    p.add_argument("--regimen", default="multitask",
                   choices=("multitask", "ntp-only", "ntp_only", "finetune-sg", "finetune_sg",
                            "fresh-sg", "fresh_sg"))
    p.add_argument("--folds", help="comma-separated held-out runs (default all 12)")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--checkpoint-root", help="pretrained runs for finetune-sg (<root>/<fold>/best.ckpt)")
    _common(p)
    p.set_defaults(func=cmd_crossval)

    p = sub.add_parser("grid-search", help="hyperparameter sweep on one fold")
    p.add_argument("data_dir")
    p.add_argument("--regimen", choices=("multitask", "ntp-only", "ntp_only"), default="multitask")
    p.add_argument("--space", help="JSON file overriding parts of the default search space")
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)
    _common(p)
    p.set_defaults(func=cmd_grid_search)

    p = sub.add_parser("grad-check", help="finite-difference check of every backward pass")
    p.add_argument("--tolerance", type=float, default=DEFAULT_TOLERANCE)
    _common(p, train=False)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("eval", help="re-evaluate a checkpoint on its fold's validation split")
    p.add_argument("checkpoint")
    p.add_argument("data_dir")
    p.add_argument("--fold", type=int)
    _common(p, train=False)
    p.set_defaults(func=cmd_eval)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    t0 = time.perf_counter()
    try:
        code = args.func(args)
    except PairseqError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc.filename}", file=sys.stderr)
        return 2
    log.info("%s finished in %.1fs", args.command, time.perf_counter() - t0)
    return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
