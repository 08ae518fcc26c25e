"""Acceptance criteria 1-10. Each test records one PASS/FAIL line."""

import time
from collections import Counter

import numpy as np
import pytest

from pairseq.checkpoint import load_checkpoint
from pairseq.cli import main
from pairseq.config import TrainConfig
from pairseq.dataset import FoldSpec, Label, PairDataset, build_fold, build_ntp_pairs, extract_5seqs
from pairseq.gradcheck import run_gradcheck
from pairseq.masking import DATA_POSITIONS, MaskAction, epoch_plans
from pairseq.model import (
    CLS_DIM,
    MSK_DIM,
    SEP_DIM,
    ModelConfig,
    PairedSequenceTransformer,
    assemble_input,
)
from pairseq.preprocess import build_roi_mask, linear_detrend
from pairseq.synthgen import SynthSpec, generate_runs
from pairseq.trainer import (
    TrainState,
    crossval,
    evaluate,
    finetune_run,
    initial_loss_scale,
    prepare_state,
    pretrain_run,
    reevaluate,
    train_epoch,
)


def test_c01_gradient_oracle(criterion):
    rep = run_gradcheck()
    worst = max(c.max_rel_error for c in rep.cases)
    coords = min(t.n_checked for c in rep.cases for t in c.tensors if t.n_checked >= 100)
    print("\n".join(rep.lines()))
    criterion(1, rep.passed and rep.seconds < 60,
              f"max rel err {worst:.2e} < 1e-5 across {len(rep.cases)} cases, "
              f">= {coords} coords per large tensor, {rep.seconds:.1f}s")


def test_c02_masking_distribution(criterion):
    t0 = time.perf_counter()
    n = 100_000
    plans = epoch_plans(20240, 0, n, pool_size=50)
    counts = Counter(len(p.positions) for p in plans)
    actions = Counter(a for p in plans for a in p.actions)
    positions = Counter(q for p in plans for q in p.positions)
    slots = sum(actions.values())
    count_dev = max(abs(counts[k] / n - 0.5) for k in (1, 2))
    action_dev = max(abs(actions[a] / slots - f) for a, f in
                     ((MaskAction.MSK, 0.8), (MaskAction.RANDOM, 0.1), (MaskAction.KEEP, 0.1)))
    pos_dev = max(abs(positions[q] / slots - 0.1) for q in DATA_POSITIONS)
    violations = positions[0] + positions[6] + sum(v for k, v in positions.items() if k not in DATA_POSITIONS)
    ok = count_dev <= 0.01 and action_dev <= 0.005 and pos_dev <= 0.005 and violations == 0
    criterion(2, ok, f"count dev {count_dev:.4f}, action dev {action_dev:.4f}, "
                     f"position dev {pos_dev:.4f}, CLS/SEP hits {violations}, "
                     f"{time.perf_counter() - t0:.1f}s")


def test_c03_dataset_invariants(criterion, seqs_one):
    per_test_run = Counter(s.run_id for s in seqs_one if s.run_kind == "test")
    dedup_ok = len(per_test_run) == 6 and set(per_test_run.values()) == {20}
    pairs = build_ntp_pairs(seqs_one, np.random.default_rng(0))
    labels = Counter(p.ntp_label for p in pairs)
    balance_ok = labels[Label.YES] == labels[Label.NO] and set(labels) == {Label.YES, Label.NO}
    within = sum(p.seq1.subject_id == p.seq2.subject_id for p in pairs) / len(pairs)
    positives = [p for p in pairs if p.ntp_label == Label.YES]
    flips = sum((p.sg_label == Label.NO) if p.seq1.window == "second" else (p.sg_label == Label.YES)
                for p in positives)
    sg_train, sg_val = build_fold(seqs_one, FoldSpec(0, 0, 400, 100), "sg")
    sg_balance = all(Counter(int(p.sg_label) for p in split)[0] == len(split) // 2
                     for split in (sg_train, sg_val))
    ok = dedup_ok and balance_ok and sg_balance and within == 1.0 and flips == len(positives)
    criterion(3, ok, f"20 5-seqs per test run: {dedup_ok}; balance {labels[Label.YES]}/{labels[Label.NO]}; "
                     f"within-subject {within:.0%}; label flip {flips}/{len(positives)}")


def test_c04_structural_constants(criterion, runs_one):
    run = runs_one[0]
    x = assemble_input(run.images[0:5], run.images[5:10])
    model = PairedSequenceTransformer(ModelConfig(), seed=0)
    d = 420
    attn = 4 * (d * d + d)
    ff = d * 4 * d + 4 * d + 4 * d * d + d
    layer = attn + ff + 4 * d
    heads = (d * 210 + 210 + 210 * 2 + 2) + (d * 840 + 840 + 840 * d + d) + (d * 2 + 2)
    closed_form = 3 * layer + heads
    h = model.encode(x[None].astype(np.float32))
    checks = {
        "input 12x420": x.shape == (12, 420),
        "CLS at 0": x[0, CLS_DIM] == 1 and x[0].sum() == 1,
        "SEP at 6": x[6, SEP_DIM] == 1 and x[6].sum() == 1,
        "data dims 0-2 zero": not x[[*range(1, 6), *range(7, 12)]][:, [CLS_DIM, SEP_DIM, MSK_DIM]].any(),
        "NTP 420->210->2": (model.ntp_head.proj1.weight.shape, model.ntp_head.proj2.weight.shape)
        == ((420, 210), (210, 2)),
        "SG 420->2 single affine": model.sg_head.proj.weight.shape == (420, 2)
        and len(model.sg_head.parameters()) == 2,
        "NTP output 2-way": model.ntp_probs(h[:, 0]).shape == (1, 2),
        "parameter count": model.n_parameters() == closed_form,
    }
    failed = [k for k, v in checks.items() if not v]
    criterion(4, not failed, f"{len(checks) - len(failed)}/{len(checks)} shape checks, "
                             f"{model.n_parameters()} parameters" + (f"; failed {failed}" if failed else ""))


def test_c05_loss_scale(criterion, seqs_one):
    cfg = TrainConfig(regimen="multitask", n_train_cap=256, n_val_cap=20)
    state, _ = prepare_state(cfg, 0, seqs_one)
    model = PairedSequenceTransformer(cfg.model, seed=np.random.default_rng([state.run_seed, 1]))
    e_ntp, e_mbm, ratio = initial_loss_scale(model, state)
    criterion(5, ratio >= 10, f"E_ntp {e_ntp:.4f} / E_mbm {e_mbm:.4f} = {ratio:.3f} (needs >= 10)")


@pytest.mark.slow
def test_c06_overfit_capacity(criterion):
    t0 = time.perf_counter()
    seqs = extract_5seqs(generate_runs(SynthSpec(noise_sd=0.1, temporal_corr=0.98)))
    train, _ = build_fold(seqs, FoldSpec(0, 0, 64, 2), "ntp")
    ds = PairDataset(train, "ntp")
    cfg = TrainConfig(regimen="multitask", lr=3e-4, epochs=300, batch_size=32)
    state = TrainState(cfg, 0, ds, ds, ds.image_pool(), None)
    model = PairedSequenceTransformer(cfg.model, seed=0)
    first = acc = ratio = None
    for epoch in range(cfg.epochs):
        m = train_epoch(model, state, epoch)
        first = first if first is not None else m.train_mbm
        acc = evaluate(model, ds, cfg.batch_size).accuracy
        ratio = m.train_mbm / first
        if acc >= 0.95 and ratio <= 0.1:
            break
    criterion(6, acc >= 0.95 and ratio <= 0.1,
              f"epoch {epoch}: train NTP acc {acc:.3f}, MBM loss {ratio:.3f}x epoch 0, "
              f"{time.perf_counter() - t0:.0f}s")


@pytest.mark.slow
def test_c07_transfer_direction(criterion):
    t0 = time.perf_counter()
    seqs = extract_5seqs(generate_runs(SynthSpec(n_subjects=2, genre_signal_strength=0.75, noise_sd=1.0)))
    gaps, ft_accs, fresh_accs = [], [], []
    for seed in (0, 1, 2):
        for fold in (0, 4, 8):
            base = dict(epochs=10, n_train_cap=800, n_val_cap=200, seed=seed)
            pre = pretrain_run(fold, TrainConfig(regimen="ntp_only", **base), seqs)
            ft = finetune_run(fold, TrainConfig(regimen="finetune_sg", lr=1e-4, **base), seqs, pre.checkpoint)
            fr = finetune_run(fold, TrainConfig(regimen="fresh_sg", lr=1e-4, **base), seqs, "fresh")
            ft_accs.append(ft.best_val_acc)
            fresh_accs.append(fr.best_val_acc)
            gaps.append(ft.best_val_acc - fr.best_val_acc)
            print(f"seed {seed} fold {fold}: pretrained {ft.best_val_acc:.3f} fresh {fr.best_val_acc:.3f}")
    gap = float(np.mean(gaps))
    criterion(7, gap >= 0, f"pretrained {np.mean(ft_accs):.4f} vs fresh {np.mean(fresh_accs):.4f}, "
                           f"gap {gap:+.4f} over 3 seeds x 3 folds, {time.perf_counter() - t0:.0f}s")


def test_c08_crossval_fidelity(criterion, seqs_one, tmp_path):
    cfg = TrainConfig(epochs=2, n_train_cap=32, n_val_cap=8, batch_size=16, model=ModelConfig(n_layers=1))
    pre = crossval("ntp_only", cfg.replace(regimen="ntp_only", lr=None), seqs_one, tmp_path)
    fin = crossval("finetune_sg", cfg.replace(regimen="finetune_sg", lr=None), seqs_one, tmp_path,
                   checkpoint_root=tmp_path / "ntp_only")
    mt = crossval("multitask", cfg, seqs_one, tmp_path)
    problems = []
    for s, header in ((pre, "heldout_run,n_layers,best_val_acc,best_epoch,mbm_val_loss"),
                      (mt, "heldout_run,n_layers,best_val_acc,best_epoch,mbm_val_loss"),
                      (fin, "heldout_run,best_val_acc,best_epoch")):
        lines = s.csv().strip().splitlines()
        if lines[0] != header or len(lines) != 14 or not lines[-1].startswith("average,"):
            problems.append(f"{s.regimen} table shape")
        for col in s.columns[1:]:
            vals = [r[col] for r in s.rows]
            if None in vals:
                continue
            if abs(s.average[col] - float(np.mean(vals))) > 1e-9:
                problems.append(f"{s.regimen} {col} average")
    for s, c in ((mt, cfg), (fin, cfg.replace(regimen="finetune_sg", lr=None))):
        for r in s.results:
            ev = reevaluate(r.checkpoint, c, r.fold, seqs_one)
            if ev.accuracy != r.best_val_acc or load_checkpoint(r.checkpoint)[2]["epoch"] != r.best_epoch:
                problems.append(f"{s.regimen} fold {r.fold} re-evaluation")
    criterion(8, not problems, "12 fold rows + average for pretraining and finetuning tables; "
                               "averages exact; re-evaluation exact" + (f"; {problems}" if problems else ""))


def test_c09_determinism(criterion, tmp_path):
    main(["synth-gen", str(tmp_path / "synth"), "--subjects", "1", "--seed", "4"])
    cfg = tmp_path / "c.json"
    cfg.write_text('{"epochs": 2, "n_train_cap": 32, "n_val_cap": 8, "batch_size": 16, "model": {"n_layers": 1}}')
    data = str(tmp_path / "synth" / "data")
    for root in ("a", "b"):
        common = ["--config", str(cfg), "--run-root", str(tmp_path / root), "--seed", "3"]
        assert main(["pretrain", data, "--fold", "2", *common]) == 0
        assert main(["pretrain", data, "--regimen", "ntp-only", "--fold", "2", *common]) == 0
        ckpt = tmp_path / root / "ntp_only" / "2" / "best.ckpt"
        assert main(["finetune", data, "--init", f"checkpoint:{ckpt}", "--fold", "2", *common]) == 0
        assert main(["finetune", data, "--fold", "2", *common]) == 0
        assert main(["crossval", data, "--folds", "5,7", "--run-root", str(tmp_path / root / "cv"),
                     "--config", str(cfg), "--seed", "3"]) == 0
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*")
                   if p.suffix in (".csv", ".ckpt"))
    differ = [str(f) for f in files if (tmp_path / "a" / f).read_bytes() != (tmp_path / "b" / f).read_bytes()]
    criterion(9, bool(files) and not differ,
              f"{len(files)} metrics CSVs and checkpoints compared, {len(differ)} differ")


def test_c10_preprocess_correctness(criterion, synth_one, runs_one):
    worst_mean = worst_sd = 0.0
    for run in runs_one:
        v = run.images[:, 3:].astype(np.float64)
        worst_mean = max(worst_mean, float(np.abs(v.mean(axis=0)).max()))
        worst_sd = max(worst_sd, float(np.abs(v.std(axis=0) - 1).max()))
    rng = np.random.default_rng(0)
    worst_line = max(float(np.abs(linear_detrend(a + b * np.arange(n))).max())
                     for a, b, n in zip(rng.uniform(-100, 100, 50), rng.uniform(-5, 5, 50),
                                        rng.integers(2, 400, 50)))
    report = build_roi_mask(synth_one.atlas).report()
    ok = worst_mean <= 1e-6 and worst_sd <= 1e-6 and worst_line <= 1e-9 and report["n_active"] == 417
    criterion(10, ok, f"max |mean| {worst_mean:.1e}, max |sd-1| {worst_sd:.1e}, "
                      f"detrend residual {worst_line:.1e}, mask {report['n_above_threshold']} above "
                      f"threshold + {report['n_added_below_threshold']} padded = {report['n_active']}")
