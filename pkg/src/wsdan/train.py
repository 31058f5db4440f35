"""Training loop, evaluation, ablation, gradient check and attention export."""

import csv
import hashlib
import logging
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape, grad_check
from .checkpoint import Checkpoint, from_model
from .config import ConfigError, TrainConfig, parse_config
from .dal import SITES
from .data import IMAGE_ROWS, AnswerVocab, generate, read_dataset
from .head import smoothed_ce_from_logits
from .metrics import build_report
from .model import WSDAN, Batch, make_batch, param_group
from .text import PAD

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


class Adam:
    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, p in self.params.items():
            if not p.requires_grad or p.grad is None:
                continue
            g = p.grad
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            p.data -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


class Plateau:
    """Multiply the learning rate by ``factor`` after ``patience`` epochs
    without improvement of the monitored loss."""

    def __init__(self, lr0, patience=10, factor=0.1):
        self.lr0 = lr0
        self.patience = patience
        self.factor = factor
        self.best = math.inf
        self.bad_epochs = 0
        self.reductions = 0

    @property
    def lr(self):
        return self.lr0 * self.factor ** self.reductions

    def step(self, loss):
        if loss < self.best:
            self.best = loss
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.reductions += 1
                self.bad_epochs = 0
        return self.lr


def load_data(config):
    if config.data_dir:
        return read_dataset(config.data_dir, config.n, config.sentence_provider, config.add_markers)
    return generate(config.synth_spec())


def batches(examples, size):
    for i in range(0, len(examples), size):
        yield examples[i:i + size]


@dataclass
class EpochRow:
    epoch: int
    train_loss: float
    val_loss: float
    val_acc: float
    lr: float


@dataclass
class TrainResult:
    model: WSDAN
    checkpoint: Checkpoint
    log: list
    dataset: object
    best_epoch: int = 0
    batch_hashes: list = field(default_factory=list)
    seconds: float = 0.0  # wall clock; never written to disk


def _loss_and_predictions(model, examples, eps, batch_size):
    """Mean smoothed CE and argmax predictions over ``examples`` (no tape)."""
    total = 0.0
    preds = []
    for chunk in batches(examples, batch_size):
        b = make_batch(chunk, model.config.np_dtype)
        logits = model.forward(b)
        total += smoothed_ce_from_logits(logits, b.targets, eps).item() * len(chunk)
        preds.extend(np.argmax(logits.data, axis=1).tolist())
    return total / len(examples), preds


def _batch_hash(ids):
    return hashlib.sha1(",".join(ids).encode()).hexdigest()[:16]


def build_model(config, dataset):
    return WSDAN(config, len(dataset.vocab), len(dataset.answers))


def train(config, dataset=None, write=True):
    """Fit a model; returns a TrainResult holding the best-by-validation checkpoint."""
    started = time.perf_counter()
    dataset = dataset if dataset is not None else load_data(config)
    model = build_model(config, dataset)
    params = model.params.named()
    opt = Adam(params, config.lr, config.beta1, config.beta2, config.eps_adam)
    sched = Plateau(config.lr, config.patience, config.factor)
    train_set = dataset.train
    monitor = dataset.val if dataset.val else None
    rows = []
    hashes = []
    best_key = None
    best = from_model(model, epoch=0, seed=config.seed, answers=dataset.answers.answers)
    best_epoch = 0

    if write:
        os.makedirs(config.out, exist_ok=True)
        with open(os.path.join(config.out, "run.log"), "w") as fh:
            fh.write(config.echo())

    for epoch in range(1, config.epochs + 1):
        opt.lr = sched.lr
        order = np.random.default_rng([config.seed, epoch]).permutation(len(train_set))
        running = 0.0
        for step, start in enumerate(range(0, len(order), config.batch_size)):
            chunk = [train_set[i] for i in order[start:start + config.batch_size]]
            b = make_batch(chunk, config.np_dtype)
            hashes.append((epoch, step, _batch_hash(b.example_ids)))
            drop_rng = np.random.default_rng([config.seed, epoch, step]) if config.dropout > 0 else None
            model.params.zero_grad()
            with Tape() as tape:
                logits = model.forward(b, rng=drop_rng, train=True)
                loss = smoothed_ce_from_logits(logits, b.targets, config.label_smoothing)
            value = loss.item()
            if not math.isfinite(value):
                if write:
                    best.save(os.path.join(config.out, "best.ckpt"))
                raise TrainingDiverged(f"loss became {value} at epoch {epoch} step {step}")
            tape.backward(loss)
            opt.step()
            running += value * len(chunk)
        train_loss = running / len(train_set)

        if monitor:
            val_loss, preds = _loss_and_predictions(model, monitor, config.label_smoothing, config.eval_batch_size)
            val_acc = float(np.mean([p == e.answer for p, e in zip(preds, monitor)]))
        else:
            val_loss, val_acc = math.nan, math.nan
        row = EpochRow(epoch, train_loss, val_loss, val_acc, opt.lr)
        rows.append(row)
        log.info("epoch %d train %.4f val %.4f acc %.4f lr %g", epoch, train_loss, val_loss, val_acc, opt.lr)
        sched.step(val_loss if monitor else train_loss)

        key = (val_acc, -val_loss) if monitor else (-train_loss,)
        if best_key is None or key > best_key:
            best_key = key
            best_epoch = epoch
            best = from_model(model, epoch=epoch, seed=config.seed, answers=dataset.answers.answers)

    if write:
        best.save(os.path.join(config.out, "best.ckpt"))
        write_log(rows, os.path.join(config.out, "log.csv"))
        with open(os.path.join(config.out, "batches.csv"), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "step", "batch_hash"])
            w.writerows(hashes)
        with open(os.path.join(config.out, "run.log"), "a") as fh:
            for r in rows:
                fh.write(f"epoch {r.epoch}: train_loss={r.train_loss!r} val_loss={r.val_loss!r} "
                         f"val_acc={r.val_acc!r} lr={r.lr!r}\n")
            fh.write(f"best epoch {best_epoch}\n")
    model.params.load(best.tensors)
    return TrainResult(model, best, rows, dataset, best_epoch, hashes, time.perf_counter() - started)


def write_log(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss", "val_acc", "lr"])
        for r in rows:
            w.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss), repr(r.val_acc), repr(r.lr)])


def model_from_checkpoint(ckpt, overrides=None):
    config = parse_config(ckpt.meta["config"], **(overrides or {}))
    model = WSDAN(config, ckpt.meta["vocab_size"], ckpt.meta["n_answers"])
    model.params.load(ckpt.tensors)
    return model


def evaluate(model, examples, answers, batch_size=None):
    """EvalReport for ``examples`` using the model's argmax answers."""
    if isinstance(model, Checkpoint):
        model = model_from_checkpoint(model)
    if examples and examples[0].V.shape[1] != model.config.d:
        raise ConfigError(f"feature width {examples[0].V.shape[1]} != model d {model.config.d}")
    if examples and len(examples[0].tokens) != model.config.n:
        raise ConfigError(f"question length {len(examples[0].tokens)} != model n {model.config.n}")
    if isinstance(answers, AnswerVocab):
        answers = answers.answers
    batch_size = batch_size or model.config.eval_batch_size
    preds = []
    for chunk in batches(examples, batch_size):
        logits = model.forward(make_batch(chunk, model.config.np_dtype))
        preds.extend(np.argmax(logits.data, axis=1).tolist())
    pred_text = [answers[p] for p in preds]
    known = set(answers[1:])
    return build_report(
        pred_text,
        [e.answer_text for e in examples],
        [e.category for e in examples],
        answer_labels=answers[1:],
        known=known,
    )


def write_report(report, out_dir, prefix="test"):
    os.makedirs(out_dir, exist_ok=True)
    report.write_csv(os.path.join(out_dir, f"{prefix}_report.csv"))
    for cat, cm in report.confusion.items():
        safe = cat.replace("/", "-").replace(" ", "_")
        cm.write_csv(os.path.join(out_dir, f"{prefix}_confusion_{safe}.csv"))


ABLATION_MODES = ("both", "image-guided-only", "question-guided-only")


def ablate(config, dataset=None, write=True):
    """Train one model per stack mode on identical data; returns (reports, csv rows)."""
    dataset = dataset if dataset is not None else load_data(config)
    reports = {}
    hashes = {}
    results = {}
    for mode in ABLATION_MODES:
        cfg = config.replace(stack_mode=mode, out=os.path.join(config.out, mode))
        res = train(cfg, dataset, write=write)
        results[mode] = res
        hashes[mode] = res.batch_hashes
        reports[mode] = evaluate(res.model, dataset.test, dataset.answers)
        if write:
            write_report(reports[mode], cfg.out)
    reference = hashes[ABLATION_MODES[0]]
    for mode, h in hashes.items():
        if h != reference:
            raise RuntimeError(f"ablation run {mode!r} saw a different batch order")
    cats = sorted(reports["both"].categories)
    header = ["mode", "overall_accuracy", "overall_bleu"] + [f"{c}_accuracy" for c in cats]
    rows = []
    for mode in ABLATION_MODES:
        r = reports[mode]
        rows.append([mode, repr(r.overall_accuracy), repr(r.overall_bleu)]
                    + [repr(r.categories[c].accuracy) if c in r.categories else "" for c in cats])
    if write:
        with open(os.path.join(config.out, "ablation.csv"), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)
    return AblationResult(reports, [header] + rows, results)


@dataclass
class AblationResult:
    reports: dict
    table: list
    runs: dict


# ---------------------------------------------------------------------------
# gradient check
# ---------------------------------------------------------------------------

GRADCHECK_DEFAULTS = dict(d=8, h=2, n=4, L=2, dropout=0.0, dtype="float64")


def gradcheck_setup(config=None, n_answers=5, vocab_size=12, batch=3, seed=0):
    """A tiny random model and batch for finite-difference checking."""
    base = config or TrainConfig(**GRADCHECK_DEFAULTS)
    config = base.replace(dropout=0.0, dtype="float64")
    rng = np.random.default_rng(seed)
    model = WSDAN(config, vocab_size, n_answers, seed=seed)
    # Perturb away from the symmetric init so no coordinate sits at a special point.
    model.params.fusion.wv.data += 0.1 * rng.standard_normal(model.params.fusion.wv.shape)
    model.params.fusion.wq.data += 0.1 * rng.standard_normal(model.params.fusion.wq.shape)
    for name, t in model.params.named().items():
        if name.endswith(("gain", "bias", "b1", "b2")):
            t.data += 0.1 * rng.standard_normal(t.shape)
    n = config.n
    lengths = rng.integers(1, n + 1, size=batch)
    lengths[0] = n
    lengths[-1] = max(1, n - 1)
    mask = np.arange(n)[None, :] < lengths[:, None]
    ids = np.where(mask, rng.integers(5, vocab_size, size=(batch, n)), 0)
    b = Batch(
        ids=ids,
        mask=mask,
        V=rng.standard_normal((batch, IMAGE_ROWS, config.d)),
        S=rng.standard_normal((batch, config.d)),
        targets=rng.integers(0, n_answers, size=batch),
        example_ids=[f"g{i}" for i in range(batch)],
    )
    return model, b


def gradcheck(config=None, h=1e-5, tol=1e-4, **setup):
    """Run grad_check over every parameter tensor; returns (report, per-group max errors)."""
    model, b = gradcheck_setup(config, **setup)
    eps = model.config.label_smoothing

    def f():
        return smoothed_ce_from_logits(model.forward(b), b.targets, eps)

    report = grad_check(f, model.params.named(), h=h, tol=tol)
    groups = {}
    for name, chk in report.params.items():
        g = param_group(name)
        groups[g] = max(groups.get(g, 0.0), chk.max_rel_err)
    return report, groups


# ---------------------------------------------------------------------------
# attention export
# ---------------------------------------------------------------------------


def export_attention(model, example, vocab, out_dir):
    """Write every DAL attention matrix of one example as CSV; returns the paths."""
    os.makedirs(out_dir, exist_ok=True)
    b = make_batch([example], model.config.np_dtype)
    _, maps, tse_w = model.forward(b, collect=True)
    tokens = [vocab.tokens[i] if m else PAD for i, m in zip(example.tokens.ids, example.tokens.mask)]
    image = [f"img{i + 1}" for i in range(IMAGE_ROWS)]
    axes = {
        "v-self": (image, image),
        "q-self": (tokens, tokens),
        "v-guided": (image, tokens),
        "q-guided": (tokens, image),
    }
    paths = []
    for (layer, site), weights in sorted(maps.maps.items(), key=lambda kv: (kv[0][0], SITES.index(kv[0][1]))):
        rows, cols = axes[site]
        for head in range(weights.shape[1]):
            path = os.path.join(out_dir, f"layer{layer + 1}_{site}_head{head + 1}.csv")
            _write_matrix(path, weights[0, head], rows, cols)
            paths.append(path)
    path = os.path.join(out_dir, "tse.csv")
    _write_matrix(path, tse_w[0], tokens, tokens)
    return paths


def _write_matrix(path, mat, rows, cols):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([""] + list(cols))
        for label, r in zip(rows, mat):
            w.writerow([label] + [repr(float(x)) for x in r])


def read_matrix(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    cols = rows[0][1:]
    labels = [r[0] for r in rows[1:]]
    return labels, cols, np.array([[float(x) for x in r[1:]] for r in rows[1:]])

