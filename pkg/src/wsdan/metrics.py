"""Accuracy, sentence BLEU, category-weighted overall score, confusion matrices."""

import csv
import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .data import UNKNOWN_ANSWER, normalize_answer


@dataclass
class CategoryScore:
    correct: int
    count: int
    bleu_sum: float = 0.0

    @property
    def accuracy(self):
        return self.correct / self.count

    @property
    def bleu(self):
        return self.bleu_sum / self.count


def _check_aligned(*seqs):
    if len({len(s) for s in seqs}) > 1:
        raise ValueError("predictions, golds and categories must have equal length")


def accuracy_by_category(predictions, golds, categories):
    """category -> CategoryScore; categories with no examples are absent."""
    _check_aligned(predictions, golds, categories)
    out = {}
    for p, g, c in zip(predictions, golds, categories):
        s = out.setdefault(c, CategoryScore(0, 0))
        s.count += 1
        s.correct += int(_norm(p) == _norm(g))
    return out


def _norm(x):
    if isinstance(x, str) and x != UNKNOWN_ANSWER:
        return normalize_answer(x)
    return x


def ngrams(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidate, reference, max_n=4):
    """Sentence BLEU with orders 1..min(max_n, len(candidate)).

    Uniformly weighted geometric mean of clipped n-gram precisions times the
    brevity penalty exp(min(0, 1 - |ref|/|cand|)); 0 if any precision is 0.
    """
    if isinstance(candidate, str):
        candidate = normalize_answer(candidate).split()
    if isinstance(reference, str):
        reference = normalize_answer(reference).split()
    if not reference:
        raise ValueError("BLEU needs a non-empty reference")
    if not candidate:
        return 0.0
    orders = min(max_n, len(candidate))
    log_sum = 0.0
    for n in range(1, orders + 1):
        cand = ngrams(candidate, n)
        ref = ngrams(reference, n)
        clipped = sum(min(c, ref[g]) for g, c in cand.items())
        if clipped == 0:
            return 0.0
        log_sum += math.log(clipped / sum(cand.values()))
    bp = math.exp(min(0.0, 1.0 - len(reference) / len(candidate)))
    return bp * math.exp(log_sum / orders)


def overall(per_category):
    """sum_i C_i D_i / T over categories.

    Values may be CategoryScore (exact integer counts are used) or
    (C, D) pairs.
    """
    if not per_category:
        raise ValueError("overall needs at least one category")
    scores = list(per_category.values())
    if all(isinstance(s, CategoryScore) for s in scores):
        return sum(s.correct for s in scores) / sum(s.count for s in scores)
    pairs = [(s.accuracy, s.count) if isinstance(s, CategoryScore) else s for s in scores]
    if any(d <= 0 for _, d in pairs):
        raise ValueError("category counts must be positive")
    total = sum(d for _, d in pairs)
    return math.fsum(c * d for c, d in pairs) / total


def overall_bleu(per_category):
    total = sum(s.count for s in per_category.values())
    return math.fsum(s.bleu_sum for s in per_category.values()) / total


@dataclass
class ConfusionMatrix:
    labels: list
    counts: np.ndarray

    def row_sums(self):
        return dict(zip(self.labels, self.counts.sum(axis=1).tolist()))

    def rows(self):
        for i, g in enumerate(self.labels):
            for j, p in enumerate(self.labels):
                yield g, p, int(self.counts[i, j])

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["gold_label", "pred_label", "count"])
            w.writerows(self.rows())


def confusion_matrix(predictions, golds, label_set):
    """Entry (i, j) counts gold i predicted as j.

    Labels outside ``label_set`` land in a trailing unknown row/column.
    """
    _check_aligned(predictions, golds)
    labels = [l for l in label_set if l != UNKNOWN_ANSWER] + [UNKNOWN_ANSWER]
    index = {l: i for i, l in enumerate(labels)}
    unk = index[UNKNOWN_ANSWER]
    counts = np.zeros((len(labels), len(labels)), dtype=np.int64)
    for p, g in zip(predictions, golds):
        counts[index.get(g, unk), index.get(p, unk)] += 1
    return ConfusionMatrix(labels, counts)


@dataclass
class EvalReport:
    categories: dict
    overall_accuracy: float
    overall_bleu: float
    total: int
    confusion: dict = field(default_factory=dict)
    unknown_golds: int = 0
    predictions: list = field(default_factory=list)

    def rows(self):
        for name in sorted(self.categories):
            s = self.categories[name]
            yield name, s.count, s.accuracy, s.bleu
        yield "overall", self.total, self.overall_accuracy, self.overall_bleu

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["category", "count", "accuracy", "bleu"])
            for name, count, acc, b in self.rows():
                w.writerow([name, count, repr(acc), repr(b)])

    def format(self):
        lines = [f"{'category':<16}{'count':>7}{'acc%':>9}{'bleu%':>9}"]
        for name, count, acc, b in self.rows():
            lines.append(f"{name:<16}{count:>7}{100 * acc:>9.2f}{100 * b:>9.2f}")
        if self.unknown_golds:
            lines.append(f"gold answers outside the training answer set: {self.unknown_golds}")
        return "\n".join(lines)


def build_report(predictions, golds, categories, answer_labels=None, known=None):
    """Assemble an EvalReport from answer strings.

    ``known`` is the set of trainable answers; golds outside it are counted
    as unknown and routed to the unknown confusion row.
    """
    _check_aligned(predictions, golds, categories)
    predictions = [_norm(p) for p in predictions]
    golds = [_norm(g) for g in golds]
    per = accuracy_by_category(predictions, golds, categories)
    for p, g, c in zip(predictions, golds, categories):
        per[c].bleu_sum += bleu(p, g) if g else 0.0
    confusion = {}
    for c in sorted(per):
        idx = [i for i, cc in enumerate(categories) if cc == c]
        cp = [predictions[i] for i in idx]
        cg = [golds[i] for i in idx]
        labels = sorted(set(cg) & set(known)) if known is not None else sorted(set(cg))
        if answer_labels is not None:
            labels = sorted(set(labels) | (set(cp) & set(answer_labels)))
        confusion[c] = confusion_matrix(cp, cg, labels)
    unknown = sum(g not in known for g in golds) if known is not None else 0
    return EvalReport(
        categories=per,
        overall_accuracy=overall(per),
        overall_bleu=overall_bleu(per),
        total=len(golds),
        confusion=confusion,
        unknown_golds=unknown,
        predictions=predictions,
    )
