"""Epoch loops, checkpoint selection, finetuning and the CV / grid-search harnesses."""

from __future__ import annotations

import csv
import io
import itertools
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import model_from_checkpoint, model_to_checkpoint
from .config import FINETUNE_REGIMENS, PRETRAIN_REGIMENS, TrainConfig, dump_config
from .dataset import FiveSeq, FoldSpec, PairDataset, build_fold, manifest_bytes
from .errors import CheckpointError, ConfigError, NumericError
from .losses import batch_cross_entropy, cross_entropy_logit_grad
from .masking import apply_masks, epoch_plans, plan_mask, sample_rng
from .model import ModelConfig, PairedSequenceTransformer
from .numerics.optim import adam_step

log = logging.getLogger(__name__)

N_FOLDS = 12
PRETRAIN_PHASE_OFFSET = 0
FINETUNE_PHASE_OFFSET = 1000
# epoch key for the fixed validation mask plans
VAL_MASK_EPOCH = 2**31 - 1

METRICS_HEADER = ("epoch", "train_ntp", "train_mbm", "train_sg", "train_total",
                  "val_ntp_acc", "val_mbm_loss", "val_sg_acc", "seconds")


@dataclass
class EpochMetrics:
    epoch: int
    train_ntp: float | None = None
    train_mbm: float | None = None
    train_sg: float | None = None
    train_total: float | None = None
    val_ntp_acc: float | None = None
    val_mbm_loss: float | None = None
    val_sg_acc: float | None = None
    seconds: float | None = None

    def row(self) -> list[str]:
        return [_fmt(getattr(self, k)) for k in METRICS_HEADER]


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def metrics_csv(rows: list[EpochMetrics]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    for r in rows:
        w.writerow(r.row())
    return buf.getvalue()


# one batch ------------------------------------------------------------------


@dataclass
class MaskedRows:
    rows: np.ndarray     # sample index of every masked slot
    cols: np.ndarray     # sequence position of every masked slot
    targets: np.ndarray  # original image per masked slot

    def per_sample_weight(self, batch: int) -> np.ndarray:
        counts = np.bincount(self.rows, minlength=batch)
        return 1.0 / counts[self.rows]


@dataclass
class BatchLosses:
    ntp: np.ndarray | None = None
    mbm: np.ndarray | None = None
    sg: np.ndarray | None = None
    total: np.ndarray | None = None
    probs: np.ndarray | None = None


def forward_losses(model: PairedSequenceTransformer, x: np.ndarray, labels: np.ndarray, task: str, *,
                   masked: MaskedRows | None = None, alpha1: float = 1.0, alpha2: float = 0.0,
                   train: bool = False, rng: np.random.Generator | None = None,
                   backward: bool = False) -> BatchLosses:
    """Per-sample losses for one batch; with ``backward`` also accumulate gradients.

    The optimized objective is the batch mean of the per-sample loss, i.e.
    ``alpha1 * E_ntp + alpha2 * E_mbm`` for pretraining (MBM only when
    ``masked`` is given) and ``E_sg`` for finetuning.
    """
    b = x.shape[0]
    h = model.encode(x, train=train, rng=rng)
    out = BatchLosses()
    dh = np.zeros_like(h) if backward else None
    if task == "sg":
        probs = model.sg_probs(h[:, 0])
        out.sg = batch_cross_entropy(probs, labels)
        out.total = out.sg
        if backward:
            dh[:, 0] = model.sg_head.backward(cross_entropy_logit_grad(probs, labels) / b)
    else:
        probs = model.ntp_probs(h[:, 0])
        out.ntp = batch_cross_entropy(probs, labels)
        out.total = alpha1 * out.ntp
        if backward:
            g = cross_entropy_logit_grad(probs, labels) * h.dtype.type(alpha1 / b)
            dh[:, 0] = model.ntp_head.backward(g)
        if masked is not None:
            recon = model.mbm_reconstruct(h[masked.rows, masked.cols])
            err = recon - masked.targets.astype(h.dtype)
            per_slot = np.mean(err.astype(np.float64) ** 2, axis=1)
            weight = masked.per_sample_weight(b)
            out.mbm = np.bincount(masked.rows, weights=per_slot * weight, minlength=b)
            out.total = out.total + alpha2 * out.mbm
            if backward:
                scale = (2.0 / err.shape[1]) * (alpha2 / b) * weight
                drows = model.mbm_head.backward(err * scale[:, None].astype(h.dtype))
                np.add.at(dh, (masked.rows, masked.cols), drows)
    out.probs = probs
    if backward:
        model.encode_backward(dh)
    return out


def mask_batch(x: np.ndarray, sample_index: np.ndarray, seed: int, epoch: int,
               pool: np.ndarray) -> tuple[np.ndarray, MaskedRows]:
    plans = [plan_mask(sample_rng(seed, epoch, int(i)), len(pool)) for i in sample_index]
    xm, rows, cols, targets = apply_masks(x, plans, pool)
    return xm, MaskedRows(rows, cols, targets)


# evaluation -------------------------------------------------------------------


@dataclass
class EvalResult:
    accuracy: float
    loss: float
    mbm_loss: float | None = None


def fixed_val_plans(seed: int, n: int, pool_size: int):
    return epoch_plans(seed, VAL_MASK_EPOCH, n, pool_size)


def evaluate(model: PairedSequenceTransformer, data: PairDataset, batch_size: int, *,
             val_plans=None, pool: np.ndarray | None = None) -> EvalResult:
    """Accuracy of the task head on unmasked inputs, plus MBM loss on fixed masks."""
    n = len(data)
    correct = 0
    loss = 0.0
    mbm_sum = 0.0
    labels = data.labels
    for start in range(0, n, batch_size):
        idx = np.arange(start, min(start + batch_size, n))
        x = data.inputs(idx)
        out = forward_losses(model, x, labels[idx], data.task)
        correct += int(np.sum(np.argmax(out.probs, axis=1) == labels[idx]))
        loss += float(out.total.sum())
        if val_plans is not None:
            xm, rows, cols, targets = apply_masks(x, [val_plans[i] for i in idx], pool)
            mout = forward_losses(model, xm, labels[idx], data.task,
                                  masked=MaskedRows(rows, cols, targets))
            mbm_sum += float(mout.mbm.sum())
    return EvalResult(
        accuracy=correct / n,
        loss=loss / n,
        mbm_loss=mbm_sum / n if val_plans is not None else None,
    )


# one epoch ---------------------------------------------------------------------


@dataclass
class TrainState:
    """Everything a run's epochs need besides the model."""

    config: TrainConfig
    run_seed: int
    train: PairDataset
    val: PairDataset
    pool: np.ndarray | None = None
    val_plans: list | None = None


def train_epoch(model: PairedSequenceTransformer, state: TrainState, epoch: int) -> EpochMetrics:
    cfg = state.config
    t0 = time.perf_counter()
    data = state.train
    n = len(data)
    order = np.random.default_rng([state.run_seed, epoch, 1]).permutation(n)
    drop_rng = np.random.default_rng([state.run_seed, epoch, 2])
    labels = data.labels
    sums = {"ntp": 0.0, "mbm": 0.0, "sg": 0.0, "total": 0.0}
    for bno, start in enumerate(range(0, n, cfg.batch_size)):
        idx = order[start:start + cfg.batch_size]
        x = data.inputs(idx)
        masked = None
        if cfg.uses_mbm:
            x, masked = mask_batch(x, idx, state.run_seed, epoch, state.pool)
        model.zero_grads()
        out = forward_losses(model, x, labels[idx], data.task, masked=masked,
                             alpha1=cfg.alpha1, alpha2=cfg.alpha2,
                             train=True, rng=drop_rng, backward=True)
        if not np.all(np.isfinite(out.total)):
            parts = {k: float(np.mean(v)) for k, v in
                     (("ntp", out.ntp), ("mbm", out.mbm), ("sg", out.sg)) if v is not None}
            raise NumericError(f"non-finite loss at epoch {epoch} batch {bno}: {parts}")
        for key in ("ntp", "mbm", "sg", "total"):
            v = getattr(out, key)
            if v is not None:
                sums[key] += float(v.sum())
        if cfg.lr > 0:
            adam_step(model.parameters(), cfg.lr, cfg.beta1, cfg.beta2, cfg.weight_decay, cfg.adam_eps)
    ev = evaluate(model, state.val, cfg.batch_size, val_plans=state.val_plans, pool=state.pool)
    m = EpochMetrics(epoch=epoch, train_total=sums["total"] / n)
    if data.task == "ntp":
        m.train_ntp = sums["ntp"] / n
        m.val_ntp_acc = ev.accuracy
        if cfg.uses_mbm:
            m.train_mbm = sums["mbm"] / n
            m.val_mbm_loss = ev.mbm_loss
    else:
        m.train_sg = sums["sg"] / n
        m.val_sg_acc = ev.accuracy
    if cfg.record_wall_time:
        m.seconds = time.perf_counter() - t0
    return m


def train_accuracy(model, data: PairDataset, batch_size: int) -> float:
    return evaluate(model, data, batch_size).accuracy


# runs ------------------------------------------------------------------------


def run_seed(cfg: TrainConfig, fold_index: int) -> int:
    offset = PRETRAIN_PHASE_OFFSET if cfg.regimen in PRETRAIN_REGIMENS else FINETUNE_PHASE_OFFSET
    return cfg.seed + fold_index + offset


def fold_spec(cfg: TrainConfig, fold_index: int) -> FoldSpec:
    return FoldSpec(heldout_run_id=fold_index, seed=run_seed(cfg, fold_index),
                    n_train_cap=cfg.n_train_cap, n_val_cap=cfg.n_val_cap)


@dataclass
class RunResult:
    regimen: str
    fold: int
    metrics: list[EpochMetrics]
    best_epoch: int
    best_val_acc: float
    mbm_val_loss: float | None
    checkpoint: bytes
    dataset_digest: str
    initial_loss_ratio: float | None = None
    extra: dict = field(default_factory=dict)

    @property
    def metrics_csv(self) -> str:
        return metrics_csv(self.metrics)


def prepare_state(cfg: TrainConfig, fold_index: int, seqs: list[FiveSeq]
                  ) -> tuple[TrainState, bytes]:
    fold = fold_spec(cfg, fold_index)
    train, val = build_fold(seqs, fold, cfg.task)
    manifest = manifest_bytes(train, val, fold_index)
    state = TrainState(cfg, fold.seed, PairDataset(train, cfg.task), PairDataset(val, cfg.task))
    if cfg.uses_mbm:
        state.pool = state.train.image_pool()
        state.val_plans = fixed_val_plans(fold.seed, len(state.val), len(state.pool))
    return state, manifest


def initial_loss_scale(model: PairedSequenceTransformer, state: TrainState, n_samples: int = 256
                       ) -> tuple[float, float, float]:
    """Mean per-sample NTP and MBM losses before any update, and their ratio."""
    n = min(n_samples, len(state.train))
    idx = np.arange(n)
    pool = state.pool if state.pool is not None else state.train.image_pool()
    ntp, mbm = 0.0, 0.0
    for start in range(0, n, state.config.batch_size):
        b = idx[start:start + state.config.batch_size]
        x, masked = mask_batch(state.train.inputs(b), b, state.run_seed, 0, pool)
        out = forward_losses(model, x, state.train.ntp_labels[b], "ntp", masked=masked)
        ntp += float(out.ntp.sum())
        mbm += float(out.mbm.sum())
    ntp, mbm = ntp / n, mbm / n
    return ntp, mbm, ntp / mbm


def _best(metrics: list[EpochMetrics], key: str) -> EpochMetrics:
    # strict '>' keeps the earliest epoch on ties
    best = metrics[0]
    for m in metrics[1:]:
        if getattr(m, key) > getattr(best, key):
            best = m
    return best


def _fit(model, state: TrainState, regimen: str, fold_index: int, digest: str,
         out_dir: Path | None) -> RunResult:
    cfg = state.config
    key = "val_ntp_acc" if cfg.task == "ntp" else "val_sg_acc"
    metrics: list[EpochMetrics] = []
    best_blob, best_acc = b"", -1.0
    for epoch in range(cfg.epochs):
        m = train_epoch(model, state, epoch)
        metrics.append(m)
        log.info("%s fold %d epoch %d: %s", regimen, fold_index, epoch,
                 {k: v for k, v in vars(m).items() if v is not None and k != "epoch"})
        acc = getattr(m, key)
        if acc > best_acc:
            best_acc = acc
            best_blob = model_to_checkpoint(model, {
                "regimen": regimen, "fold": fold_index, "epoch": epoch,
                "val_acc": acc, "dataset_digest": digest,
            })
        if out_dir is not None:
            (out_dir / "metrics.csv").write_text(metrics_csv(metrics))
            (out_dir / "best.ckpt").write_bytes(best_blob)
    best = _best(metrics, key)
    return RunResult(regimen, fold_index, metrics, best.epoch, getattr(best, key),
                     best.val_mbm_loss, best_blob, digest)


def _start_run_dir(out_dir: Path | None, cfg: TrainConfig, manifest: bytes, run_manifest: dict):
    if out_dir is None:
        return
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(dump_config(cfg))
    (out_dir / "dataset.json").write_bytes(manifest)
    write_run_manifest(out_dir / "manifest.json", run_manifest)


def write_run_manifest(path: Path, manifest: dict) -> None:
    path.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")


def base_run_manifest(command: str, cfg: TrainConfig, seed: int, dataset_digest: str,
                      inputs: dict | None = None) -> dict:
    return {
        "command": command,
        "config_hash": cfg.digest(),
        "seeds": {"base": cfg.seed, "run": seed},
        "inputs": inputs or {},
        "dataset_digest": dataset_digest,
        "tool_version": __version__,
        "started_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }


def pretrain_run(fold_index: int, cfg: TrainConfig, seqs: list[FiveSeq], out_dir: str | Path | None = None,
                 *, run_manifest: dict | None = None) -> RunResult:
    """Train NTP (optionally with MBM) for ``cfg.epochs``, keep the best-NTP-accuracy state."""
    if cfg.regimen not in PRETRAIN_REGIMENS:
        raise ConfigError(f"pretrain_run needs a pretraining regimen, got {cfg.regimen}")
    state, manifest = prepare_state(cfg, fold_index, seqs)
    digest = _sha256(manifest)
    model = PairedSequenceTransformer(cfg.model, seed=np.random.default_rng([state.run_seed, 1]))
    ratio = None
    if cfg.uses_mbm:
        e_ntp, e_mbm, ratio = initial_loss_scale(model, state)
        log.info("initial loss scale: E_ntp=%.4f E_mbm=%.4f ratio=%.3f", e_ntp, e_mbm, ratio)
        if ratio < 10:
            log.warning("initial NTP/MBM loss ratio %.3f is below 10", ratio)
    out = Path(out_dir) if out_dir is not None else None
    manifest_doc = {**(run_manifest or base_run_manifest("pretrain", cfg, state.run_seed, digest)),
                    "dataset_digest": digest, "initial_loss_ratio": ratio}
    _start_run_dir(out, cfg, manifest, manifest_doc)
    result = _fit(model, state, cfg.regimen, fold_index, digest, out)
    result.initial_loss_ratio = ratio
    if out is not None:
        manifest_doc["finished_at"] = time.strftime("%Y-%m-%dT%H:%M:%S%z")
        write_run_manifest(out / "manifest.json", manifest_doc)
    return result


def finetune_run(fold_index: int, cfg: TrainConfig, seqs: list[FiveSeq], init: bytes | str = "fresh",
                 out_dir: str | Path | None = None, *, run_manifest: dict | None = None) -> RunResult:
    """Same-genre training from a pretrained checkpoint or from scratch; nothing is frozen."""
    if cfg.regimen not in FINETUNE_REGIMENS:
        raise ConfigError(f"finetune_run needs a finetuning regimen, got {cfg.regimen}")
    state, manifest = prepare_state(cfg, fold_index, seqs)
    digest = _sha256(manifest)
    if isinstance(init, (bytes, bytearray)):
        model, _ = model_from_checkpoint(bytes(init), cfg.model,
                                         fresh_sg_head_seed=np.random.default_rng([state.run_seed, 2]))
    elif init == "fresh":
        model = PairedSequenceTransformer(cfg.model, seed=np.random.default_rng([state.run_seed, 1]))
    else:
        raise ConfigError("init must be checkpoint bytes or 'fresh'")
    out = Path(out_dir) if out_dir is not None else None
    manifest_doc = {**(run_manifest or base_run_manifest("finetune", cfg, state.run_seed, digest)),
                    "dataset_digest": digest}
    manifest_doc["init"] = "fresh" if init == "fresh" else "checkpoint"
    _start_run_dir(out, cfg, manifest, manifest_doc)
    result = _fit(model, state, cfg.regimen, fold_index, digest, out)
    if out is not None:
        manifest_doc["finished_at"] = time.strftime("%Y-%m-%dT%H:%M:%S%z")
        write_run_manifest(out / "manifest.json", manifest_doc)
    return result


def reevaluate(checkpoint: bytes, cfg: TrainConfig, fold_index: int, seqs: list[FiveSeq]) -> EvalResult:
    """Evaluate a saved checkpoint on its fold's validation split (fixed masks for MBM)."""
    state, _ = prepare_state(cfg, fold_index, seqs)
    model, _ = model_from_checkpoint(checkpoint, cfg.model)
    return evaluate(model, state.val, cfg.batch_size, val_plans=state.val_plans, pool=state.pool)


def _sha256(blob: bytes) -> str:
    import hashlib

    return hashlib.sha256(blob).hexdigest()


# cross-validation --------------------------------------------------------------


PRETRAIN_SUMMARY = ("heldout_run", "n_layers", "best_val_acc", "best_epoch", "mbm_val_loss")
FINETUNE_SUMMARY = ("heldout_run", "best_val_acc", "best_epoch")


@dataclass
class CrossvalSummary:
    regimen: str
    columns: tuple[str, ...]
    rows: list[dict]
    average: dict
    results: list[RunResult]

    def csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for r in [*self.rows, self.average]:
            w.writerow([_fmt(r[c]) if not isinstance(r[c], str) else r[c] for c in self.columns])
        return buf.getvalue()


def _run_fold(args):
    regimen, cfg, fold, seqs, out_dir, init = args
    if regimen in PRETRAIN_REGIMENS:
        return pretrain_run(fold, cfg, seqs, out_dir)
    return finetune_run(fold, cfg, seqs, init, out_dir)


def crossval(regimen: str, base_config: TrainConfig, seqs: list[FiveSeq], out_root: str | Path | None = None,
             *, folds=None, jobs: int = 1, checkpoint_root: str | Path | None = None,
             run_name: str | None = None) -> CrossvalSummary:
    """One run per held-out training run, plus a column-average row.

    For ``finetune_sg`` each fold loads ``<checkpoint_root>/<fold>/best.ckpt``.
    """
    regimen = regimen.replace("-", "_")
    cfg = base_config.replace(regimen=regimen, lr=base_config.lr if base_config.regimen == regimen else None)
    folds = list(range(N_FOLDS)) if folds is None else list(folds)
    name = run_name or regimen
    tasks = []
    for fold in folds:
        init = "fresh"
        if regimen == "finetune_sg":
            if checkpoint_root is None:
                raise ConfigError("finetune_sg crossval needs checkpoint_root")
            path = Path(checkpoint_root) / str(fold) / "best.ckpt"
            if not path.exists():
                raise CheckpointError(f"missing pretrained checkpoint {path}")
            init = path.read_bytes()
        out_dir = Path(out_root) / name / str(fold) if out_root is not None else None
        tasks.append((regimen, cfg, fold, seqs, out_dir, init))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_fold, tasks))
    else:
        results = [_run_fold(t) for t in tasks]
    if regimen in PRETRAIN_REGIMENS:
        columns = PRETRAIN_SUMMARY
        rows = [{"heldout_run": r.fold, "n_layers": cfg.model.n_layers, "best_val_acc": r.best_val_acc,
                 "best_epoch": r.best_epoch, "mbm_val_loss": r.mbm_val_loss} for r in results]
    else:
        columns = FINETUNE_SUMMARY
        rows = [{"heldout_run": r.fold, "best_val_acc": r.best_val_acc, "best_epoch": r.best_epoch}
                for r in results]
    average = {"heldout_run": "average"}
    for c in columns[1:]:
        vals = [row[c] for row in rows]
        average[c] = None if any(v is None for v in vals) else float(np.mean(vals))
    summary = CrossvalSummary(regimen, columns, rows, average, results)
    if out_root is not None:
        (Path(out_root) / name).mkdir(parents=True, exist_ok=True)
        (Path(out_root) / name / "summary.csv").write_text(summary.csv())
    return summary


# grid search -------------------------------------------------------------------


DEFAULT_SPACE = {
    "alphas": [(0.1, 0.9), (0.3, 0.7), (0.5, 0.5)],
    "lr": [1e-4, 1e-5],
    "n_heads": [2, 3, 4],
    "forward_expansion": [2, 4],
    "n_layers": [3, 4],
}


@dataclass
class GridResult:
    config: TrainConfig
    best_val_acc: float
    best_epoch: int
    result: RunResult


def _grid_run(args):
    fold_index, cfg, seqs, out_dir = args
    return pretrain_run(fold_index, cfg, seqs, out_dir)


def grid_search(space: dict, base_config: TrainConfig, seqs: list[FiveSeq], fold_index: int = 0,
                out_root: str | Path | None = None, *, jobs: int = 1
                ) -> tuple[list[GridResult], list[str]]:
    """Cartesian sweep ranked by best validation NTP accuracy.

    Ties go to the earlier best epoch. Returns the ranking and a notice per
    skipped (invalid) combination.
    """
    space = {**DEFAULT_SPACE, **space}
    if base_config.regimen == "ntp_only":
        space["alphas"] = [(1.0, 0.0)]
    skipped: list[str] = []
    tasks = []
    combos = itertools.product(space["alphas"], space["lr"], space["n_heads"],
                               space["forward_expansion"], space["n_layers"])
    for i, ((a1, a2), lr, heads, exp, layers) in enumerate(combos):
        try:
            model_cfg = ModelConfig(**{**base_config.model.to_dict(), "n_heads": heads,
                                       "forward_expansion": exp, "n_layers": layers})
        except ConfigError as exc:
            notice = f"skipped heads={heads} exp={exp} layers={layers}: {exc}"
            log.warning(notice)
            skipped.append(notice)
            continue
        cfg = base_config.replace(alpha1=a1, alpha2=a2, lr=lr, model=model_cfg)
        out_dir = Path(out_root) / f"grid-{i:03d}" if out_root is not None else None
        tasks.append((fold_index, cfg, seqs, out_dir))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            runs = list(pool.map(_grid_run, tasks))
    else:
        runs = [_grid_run(t) for t in tasks]
    results = [GridResult(t[1], r.best_val_acc, r.best_epoch, r) for t, r in zip(tasks, runs)]
    # stable sort keeps sweep order among exact ties
    results.sort(key=lambda g: (-g.best_val_acc, g.best_epoch))
    return results, skipped
