"""Acceptance criteria, one test each; every test records a PASS/FAIL line."""

import math
import os
import subprocess
import sys
import time

import numpy as np
import pytest

from wsdan.autodiff import Tape, Tensor, mul, sum_all
from wsdan.config import TrainConfig
from wsdan.dal import init_dal, multi_head_attention
from wsdan.data import IMAGE_ROWS, generate, image_only_baseline, question_only_baseline
from wsdan.head import smoothed_ce, smoothed_ce_decomposed
from wsdan.metrics import accuracy_by_category, bleu, overall
from wsdan.train import ablate, export_attention, gradcheck, read_matrix, train
from wsdan.tse import init_tse, tse_forward

# lr is the only value moved off the training defaults; see the notes.
SYNTH = dict(d=64, h=4, n=12, L=2, epochs=30, lr=5e-4, seed=0,
             synth_modalities=4, synth_organs=4, synth_sigma=0.3,
             synth_train=2000, synth_val=250, synth_test=500)


@pytest.fixture(scope="module")
def synth_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("ablate")
    cfg = TrainConfig(**SYNTH, out=str(out))
    ds = generate(cfg.synth_spec())
    result = ablate(cfg, ds)
    return cfg, ds, result


def test_gradient_integrity(criterion):
    start = time.perf_counter()
    cfg = TrainConfig(d=8, h=2, n=4, L=2, dropout=0.0, dtype="float64")
    _, groups = gradcheck(cfg, h=1e-5, tol=1e-4, n_answers=5)
    elapsed = time.perf_counter() - start
    worst = max(groups, key=groups.get)
    ok = all(e < 1e-4 for e in groups.values()) and elapsed < 60
    criterion("gradient integrity", ok,
              f"{len(groups)} groups, worst {worst}={groups[worst]:.2e} (< 1e-4), {elapsed:.1f}s (< 60s)")
    assert ok


def test_tse_degeneracy(criterion):
    worst = 0.0
    nonzero_grad = 0
    differs = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        # at least two attendable keys: a single key gets weight 1 under any logits
        d, n = int(rng.integers(2, 17)), int(rng.integers(2, 13))
        params = init_tse(rng, d)
        qhat = Tensor(rng.standard_normal((n, d)))
        s = Tensor(rng.standard_normal(d))
        mask = np.ones(n, dtype=bool)
        mask[int(rng.integers(2, n + 1)):] = False
        word_only = tse_forward(qhat, None, params, "verbatim", mask).data

        for t in params.named().values():
            t.zero_grad()
        w = Tensor(rng.standard_normal((n, d)))
        with Tape() as tape:
            out = tse_forward(qhat, s, params, "verbatim", mask)
            loss = sum_all(mul(out, w))
        tape.backward(loss)
        worst = max(worst, float(np.max(np.abs(out.data - word_only))))
        for g in (params.uq.grad, params.uk.grad):
            if g is not None and np.any(g != 0.0):
                nonzero_grad += 1

        keyed = tse_forward(qhat, s, params, "sentence-key", mask).data
        differs += int(np.max(np.abs(keyed - word_only)) > 1e-6)
    ok = worst <= 1e-10 and nonzero_grad == 0 and differs >= 95
    criterion("TSE degeneracy", ok,
              f"verbatim vs word-only max {worst:.1e} (<= 1e-10), nonzero Uq/Uk grads {nonzero_grad}, "
              f"sentence-key differs on {differs}/100 (>= 95)")
    assert ok


def test_label_smoothing_identity(criterion):
    rng = np.random.default_rng(12)
    worst = 0.0
    for _ in range(1000):
        k = int(rng.integers(2, 40))
        p = rng.dirichlet(np.full(k, 0.5)) + 1e-12
        p /= p.sum()
        eps = float(rng.uniform(0.0, 1.0))
        target = int(rng.integers(k))
        worst = max(worst, abs(smoothed_ce(p, target, eps) - smoothed_ce_decomposed(p, target, eps)))
    worked = smoothed_ce(np.array([0.8, 0.2]), 0, 0.1)
    ok = worst <= 1e-9 and abs(worked - 0.292459) <= 1e-5
    criterion("label-smoothing identity", ok,
              f"max gap over 1000 draws {worst:.1e} (<= 1e-9), K=2 example {worked:.6f} (0.292459 +- 1e-5)")
    assert ok


def test_overall_is_micro_accuracy(criterion):
    rng = np.random.default_rng(11)
    mismatches = 0
    for _ in range(1000):
        size = int(rng.integers(1, 400))
        golds = list(rng.choice(["yes", "no", "ct", "mri", "brain"], size))
        preds = [g if rng.random() < rng.random() else str(rng.choice(["yes", "lung"])) for g in golds]
        cats = list(rng.choice(["modality", "organ", "yes/no", "plane"], size))
        micro = sum(p == g for p, g in zip(preds, golds)) / size
        mismatches += overall(accuracy_by_category(preds, golds, cats)) != micro
    worked = overall({"a": (0.60, 40), "b": (0.80, 60)})
    ok = mismatches == 0 and worked == 0.72
    criterion("overall equals micro accuracy", ok,
              f"{mismatches} inexact of 1000, worked case {worked!r} (== 0.72)")
    assert ok


def _site_inputs(site, V, Q, qmask, params):
    pv, pq = params.v, params.q
    return {
        "v-self": (V, V, pv.sa, None),
        "q-self": (Q, Q, pq.sa, qmask),
        "v-guided": (V, Q, pv.ga, qmask),
        "q-guided": (Q, V, pq.ga, None),
    }[site]


def test_attention_invariants(synth_run, criterion, tmp_path):
    cfg, ds, result = synth_run
    model = result.runs["both"].model
    row_err = 0.0
    files = 0
    for example in ds.test[:10]:
        out = tmp_path / example.id
        for path in export_attention(model, example, ds.vocab, str(out)):
            _, _, mat = read_matrix(path)
            row_err = max(row_err, float(np.max(np.abs(mat.sum(axis=1) - 1.0))))
            files += 1

    perm_err = 0.0
    for seed in range(25):
        rng = np.random.default_rng(seed)
        d, heads, n = 16, int(rng.choice([1, 2, 4])), int(rng.integers(1, 10))
        params = init_dal(rng, d, heads)
        V = rng.standard_normal((IMAGE_ROWS, d))
        Q = rng.standard_normal((n, d))
        qmask = np.arange(n) < int(rng.integers(1, n + 1))
        for site in ("v-self", "q-self", "v-guided", "q-guided"):
            x, y, p, mask = _site_inputs(site, V, Q, qmask, params)
            base = multi_head_attention(Tensor(x), Tensor(y), Tensor(y), p, mask).data
            kp = rng.permutation(len(y))
            kv = multi_head_attention(Tensor(x), Tensor(y[kp]), Tensor(y[kp]), p,
                                      None if mask is None else mask[kp]).data
            qp = rng.permutation(len(x))
            qq = multi_head_attention(Tensor(x[qp]), Tensor(y), Tensor(y), p, mask).data
            perm_err = max(perm_err, float(np.max(np.abs(kv - base))), float(np.max(np.abs(qq - base[qp]))))
    ok = row_err <= 1e-9 and perm_err <= 1e-10
    criterion("attention invariants", ok,
              f"{files} exported matrices, max row-sum error {row_err:.1e} (<= 1e-9); "
              f"permutation max error {perm_err:.1e} over 4 sites (<= 1e-10)")
    assert ok


def test_determinism(tmp_path, criterion):
    out = tmp_path / "run"
    cfg = TrainConfig(d=16, h=2, n=8, L=2, epochs=3, lr=1e-3, dropout=0.1, seed=7,
                      synth_train=160, synth_val=40, synth_test=40, out=str(out))
    names = ("best.ckpt", "log.csv", "batches.csv", "run.log")
    train(cfg)
    first = {n: (out / n).read_bytes() for n in names}
    # second run in a fresh interpreter through the command line
    cfg_file = tmp_path / "run.cfg"
    cfg_file.write_text(cfg.echo())
    proc = subprocess.run([sys.executable, "-m", "wsdan.cli", "train", "--config", str(cfg_file)],
                          capture_output=True, text=True)
    second = {n: (out / n).read_bytes() for n in names}
    same = [n for n in names if first[n] == second[n]]
    ok = proc.returncode == 0 and len(same) == len(names)
    criterion("determinism", ok, f"byte-identical across processes: {', '.join(same) or 'none'}")
    assert ok, proc.stderr


def test_synthetic_cross_modal_learning(synth_run, criterion):
    cfg, ds, result = synth_run
    run = result.runs["both"]
    acc = result.reports["both"].overall_accuracy
    q_only = question_only_baseline(ds.train, ds.test)
    i_only = image_only_baseline(ds.train, ds.test)
    ok = acc >= 0.95 and len(run.log) <= 30 and run.seconds < 600 and q_only <= 0.6 and i_only <= 0.6
    criterion("synthetic cross-modal learning", ok,
              f"mode=both test accuracy {acc:.4f} (>= 0.95) after {len(run.log)} epochs in {run.seconds:.0f}s; "
              f"question-only {q_only:.4f}, image-only {i_only:.4f} (<= 0.60)")
    assert ok


def test_ablation_trend(synth_run, criterion):
    cfg, _, result = synth_run
    with open(os.path.join(cfg.out, "ablation.csv")) as fh:
        lines = fh.read().splitlines()
    acc = {m: r.overall_accuracy for m, r in result.reports.items()}
    same_order = len({tuple(r.batch_hashes) for r in result.runs.values()}) == 1
    trend = all(acc["both"] >= acc[m] - 0.01 for m in ("image-guided-only", "question-guided-only"))
    ok = len(lines) == 4 and same_order and trend
    criterion("ablation trend", ok,
              f"rows {len(lines) - 1}; both {acc['both']:.4f}, image-guided-only {acc['image-guided-only']:.4f}, "
              f"question-guided-only {acc['question-guided-only']:.4f}; shared batch order {same_order}")
    assert ok


def test_bleu_pinning(criterion):
    same = bleu("ct angiography", "ct angiography")
    worked = bleu("ct angiography", "cta ct angiography")
    none = bleu("mri", "ct angiography")
    ok = same == 1.0 and abs(worked - 0.6065) <= 1e-4 and none == 0.0
    criterion("BLEU pinning", ok,
              f"bleu(x,x)={same!r}, worked case {worked:.6f} (0.6065 +- 1e-4), zero overlap {none!r}")
    assert ok
