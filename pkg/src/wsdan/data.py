"""Synthetic cross-modal VQA data, feature files and QA-file ingestion.

The synthetic task draws two latent image attributes (a modality and an
organ). The five image feature rows are noisy copies of fixed prototypes:
rows 1-2 encode the modality, rows 3-4 the organ, row 5 a mix of both. The
question either asks for one attribute ("what organ is shown") or asks a
yes/no question about one ("is this a mri image"), so neither the question
nor the image alone determines the answer.
"""

import logging
import os
import struct
from collections import Counter, defaultdict
from dataclasses import dataclass, field

import numpy as np

from .text import SentenceStore, Vocab, encode_question, normalize, sentence_embed

log = logging.getLogger(__name__)

FEATURE_MAGIC = b"WSDF"
IMAGE_ROWS = 5
UNKNOWN_ANSWER = "<unk>"
YESNO = "yes/no"

VALUE_POOLS = {
    "modality": ["ct", "mri", "xray", "ultrasound", "pet", "angiography", "fluoroscopy", "mammography"],
    "organ": ["brain", "lung", "liver", "kidney", "heart", "spine", "pelvis", "breast"],
}
OPEN_TEMPLATES = [
    "what {family} is shown",
    "which {family} is seen in this image",
    "what is the {family} of this image",
]
YESNO_TEMPLATES = [
    "is this a {value} image",
    "does this image show {value}",
    "is the {family} {value}",
]


class SynthSpecError(ValueError):
    pass


class DatasetFormatError(ValueError):
    pass


class MissingFeatureError(FileNotFoundError):
    def __init__(self, ids):
        self.ids = list(ids)
        super().__init__("missing feature files for ids: " + ", ".join(self.ids))


@dataclass
class Example:
    id: str
    category: str
    tokens: object  # TokenSequence
    sentence: object  # SentenceEmbedding or None
    V: np.ndarray
    answer_text: str
    answer: int = -1


@dataclass
class SynthSpec:
    seed: int = 0
    n_examples: int = 2750
    d: int = 64
    n: int = 12
    vocab_size: int = 0
    families: tuple = (("modality", 4), ("organ", 4))
    ask: tuple = ("modality", "organ")
    yesno_fraction: float = 1.0 / 3.0
    sigma: float = 0.3
    split: tuple = (2000 / 2750, 250 / 2750, 500 / 2750)
    reproduce_label_shift: bool = False
    add_markers: bool = False

    def validate(self):
        if len(self.families) != 2:
            raise SynthSpecError("the image layout needs exactly two attribute families")
        for name, count in self.families:
            if count < 2:
                raise SynthSpecError(f"family {name!r} needs at least two values")
        names = [f for f, _ in self.families]
        for f in self.ask:
            if f not in names:
                raise SynthSpecError(f"asked family {f!r} is not an attribute family")
        intents = len(self.ask) * (2 if self.yesno_fraction > 0 else 1)
        if intents < 2:
            raise SynthSpecError(
                "question intent must vary across examples; a single fixed intent "
                "lets the image alone determine the answer"
            )
        if not 0.0 <= self.yesno_fraction <= 1.0:
            raise SynthSpecError("yesno_fraction must lie in [0, 1]")
        if len(self.split) != 3 or abs(sum(self.split) - 1.0) > 1e-9 or min(self.split) < 0:
            raise SynthSpecError("split fractions must be three non-negative numbers summing to 1")
        if self.sigma < 0:
            raise SynthSpecError("noise sigma must be non-negative")
        if self.n < 1 or self.d < 1 or self.n_examples < 3:
            raise SynthSpecError("n, d and n_examples must be positive")

    def split_sizes(self):
        n_train = int(round(self.n_examples * self.split[0]))
        n_val = int(round(self.n_examples * self.split[1]))
        return n_train, n_val, self.n_examples - n_train - n_val


class AnswerVocab:
    """Answer strings -> class ids; id 0 is the reserved unknown answer."""

    def __init__(self, answers):
        answers = [a for a in answers if a != UNKNOWN_ANSWER]
        self.answers = [UNKNOWN_ANSWER] + sorted(set(answers))
        self.index = {a: i for i, a in enumerate(self.answers)}

    def __len__(self):
        return len(self.answers)

    def id(self, answer):
        return self.index.get(answer, 0)

    def __contains__(self, answer):
        return answer in self.index


@dataclass
class Dataset:
    train: list
    val: list
    test: list
    vocab: Vocab
    answers: AnswerVocab = None
    sentences: SentenceStore = None
    unknown_test_answers: int = 0
    duplicates: int = 0

    def __post_init__(self):
        if self.answers is None:
            self.answers = AnswerVocab(normalize_answer(e.answer_text) for e in self.train)
        self.unknown_test_answers = 0
        for split in (self.train, self.val, self.test):
            for ex in split:
                ex.answer = self.answers.id(normalize_answer(ex.answer_text))
        self.unknown_test_answers = sum(
            normalize_answer(e.answer_text) not in self.answers for e in self.test
        )

    def splits(self):
        return {"train": self.train, "val": self.val, "test": self.test}


def normalize_answer(text):
    return " ".join(normalize(text))


# ---------------------------------------------------------------------------
# feature files
# ---------------------------------------------------------------------------


def write_features(path, V):
    V = np.asarray(V)
    if V.ndim != 2 or V.shape[0] != IMAGE_ROWS:
        raise ValueError(f"feature matrix must be {IMAGE_ROWS} x d, got {V.shape}")
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<II", *V.shape))
        fh.write(np.ascontiguousarray(V, dtype="<f4").tobytes())


def read_features(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != FEATURE_MAGIC:
        raise DatasetFormatError(f"{path}: bad magic {blob[:4]!r}")
    rows, cols = struct.unpack("<II", blob[4:12])
    if rows != IMAGE_ROWS:
        raise DatasetFormatError(f"{path}: expected {IMAGE_ROWS} rows, got {rows}")
    body = blob[12:]
    if len(body) != 4 * rows * cols:
        raise DatasetFormatError(f"{path}: expected {rows * cols} values, got {len(body) // 4}")
    return np.frombuffer(body, dtype="<f4").reshape(rows, cols).astype(np.float64)


# ---------------------------------------------------------------------------
# synthetic generation
# ---------------------------------------------------------------------------


def _unit_rows(rng, count, d):
    x = rng.standard_normal((count, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def family_values(name, count):
    pool = VALUE_POOLS.get(name, [])
    if count <= len(pool):
        return pool[:count]
    return pool + [f"{name}{i}" for i in range(len(pool), count)]


def synth_vocab(spec):
    words = []
    for name, count in spec.families:
        for t in OPEN_TEMPLATES + YESNO_TEMPLATES:
            words.extend(normalize(t.format(family=name, value="")))
        words.extend(family_values(name, count))
    vocab = Vocab.build(words)
    if spec.vocab_size > len(vocab):
        vocab = Vocab(vocab.tokens + [f"tok{i}" for i in range(len(vocab), spec.vocab_size)])
    return vocab


def generate(spec):
    """Build a Dataset (train/val/test) as a pure function of ``spec``."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    d = spec.d
    (fam_a, m_a), (fam_o, m_o) = spec.families
    values = {fam_a: family_values(fam_a, m_a), fam_o: family_values(fam_o, m_o)}
    # one unit prototype per attribute value, shared by that family's rows
    protos_a = _unit_rows(rng, m_a, d)
    protos_o = _unit_rows(rng, m_o, d)
    vocab = synth_vocab(spec)
    sentence_table = rng.standard_normal((len(vocab), d)) / np.sqrt(d)

    n_train, n_val, n_test = spec.split_sizes()
    examples = []
    store = SentenceStore()
    for i in range(spec.n_examples):
        is_test = i >= n_train + n_val
        limit_a = m_a if (is_test or not spec.reproduce_label_shift) else m_a - 1
        a = int(rng.integers(limit_a))
        o = int(rng.integers(m_o))
        mix = protos_a[a] + protos_o[o]
        V = np.stack([protos_a[a], protos_a[a], protos_o[o], protos_o[o], mix / np.linalg.norm(mix)])
        V = V + spec.sigma * rng.standard_normal(V.shape)
        V = V.astype(np.float32).astype(np.float64)

        family = spec.ask[int(rng.integers(len(spec.ask)))]
        truth = values[family][a if family == fam_a else o]
        if rng.random() < spec.yesno_fraction:
            template = YESNO_TEMPLATES[int(rng.integers(len(YESNO_TEMPLATES)))]
            if rng.random() < 0.5:
                asked = truth
            else:
                others = [v for v in values[family] if v != truth]
                asked = others[int(rng.integers(len(others)))]
            question = template.format(family=family, value=asked)
            answer, category = ("yes" if asked == truth else "no"), YESNO
        else:
            template = OPEN_TEMPLATES[int(rng.integers(len(OPEN_TEMPLATES)))]
            question = template.format(family=family)
            answer, category = truth, family

        ex_id = f"syn{i:05d}"
        tokens = encode_question(question, vocab, spec.n, spec.add_markers)
        sentence = sentence_embed(tokens, "bow-mean", table=sentence_table)
        store[ex_id] = sentence.vector
        examples.append(Example(ex_id, category, tokens, sentence, V, answer))

    train = examples[:n_train]
    val = examples[n_train:n_train + n_val]
    test = examples[n_train + n_val:]
    ds = Dataset(train, val, test, vocab, sentences=store)
    if ds.unknown_test_answers and not spec.reproduce_label_shift:
        raise SynthSpecError(
            f"{ds.unknown_test_answers} test answers never occur in training; "
            "increase n_examples or the training fraction"
        )
    return ds


# ---------------------------------------------------------------------------
# on-disk datasets
# ---------------------------------------------------------------------------

SPLIT_FILES = {"train": "train.tsv", "val": "val.tsv", "test": "test.tsv"}


def write_dataset(ds, out_dir):
    """Write QA files, one .feat per id, the vocab and the sentence store."""
    feat_dir = os.path.join(out_dir, "features")
    os.makedirs(feat_dir, exist_ok=True)
    ds.vocab.save(os.path.join(out_dir, "vocab.txt"))
    store = SentenceStore()
    for split, examples in ds.splits().items():
        with open(os.path.join(out_dir, SPLIT_FILES[split]), "w", encoding="utf-8", newline="\n") as fh:
            for ex in examples:
                fh.write(f"{ex.id}\t{ex.category}\t{ex.tokens.raw}\t{ex.answer_text}\n")
                write_features(os.path.join(feat_dir, ex.id + ".feat"), ex.V)
                if ex.sentence is not None:
                    store[ex.id] = ex.sentence.vector
    store.save(os.path.join(out_dir, "sentences.tsv"))


@dataclass
class LoadStats:
    duplicates: int = 0
    records: int = 0
    duplicate_ids: list = field(default_factory=list)


def read_qa(path):
    records = {}
    stats = LoadStats()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 4 or not parts[0]:
                raise DatasetFormatError(
                    f"{path}:{lineno}: expected 4 tab-separated fields (id, category, question, answer)"
                )
            if parts[0] in records:
                stats.duplicates += 1
                stats.duplicate_ids.append(parts[0])
                log.warning("%s:%d: duplicate id %s, keeping the later record", path, lineno, parts[0])
                del records[parts[0]]
            records[parts[0]] = parts
    stats.records = len(records)
    return list(records.values()), stats


def load_dataset(qa_path, feature_dir, vocab, n, provider="file", store=None, table=None, add_markers=False):
    """Join QA records to ``<feature_dir>/<id>.feat``; returns (examples, LoadStats)."""
    records, stats = read_qa(qa_path)
    missing = [r[0] for r in records if not os.path.exists(os.path.join(feature_dir, r[0] + ".feat"))]
    if missing:
        raise MissingFeatureError(missing)
    examples = []
    for ex_id, category, question, answer in records:
        tokens = encode_question(question, vocab, n, add_markers)
        sentence = None
        if provider == "file" and store is not None:
            sentence = sentence_embed(tokens, "file", store=store, key=ex_id)
        elif provider == "bow-mean" and table is not None:
            sentence = sentence_embed(tokens, "bow-mean", table=table)
        V = read_features(os.path.join(feature_dir, ex_id + ".feat"))
        examples.append(Example(ex_id, category, tokens, sentence, V, answer))
    examples.sort(key=lambda e: e.id)
    return examples, stats


def read_dataset(data_dir, n, provider="file", add_markers=False):
    """Load a directory written by :func:`write_dataset`."""
    vocab = Vocab.load(os.path.join(data_dir, "vocab.txt"))
    store_path = os.path.join(data_dir, "sentences.tsv")
    store = SentenceStore.load(store_path) if os.path.exists(store_path) else None
    feat_dir = os.path.join(data_dir, "features")
    splits = {}
    dups = 0
    for split, name in SPLIT_FILES.items():
        path = os.path.join(data_dir, name)
        if not os.path.exists(path):
            splits[split] = []
            continue
        splits[split], stats = load_dataset(path, feat_dir, vocab, n, provider, store, add_markers=add_markers)
        dups += stats.duplicates
    return Dataset(splits["train"], splits["val"], splits["test"], vocab, sentences=store, duplicates=dups)


# ---------------------------------------------------------------------------
# unimodal baselines
# ---------------------------------------------------------------------------


def question_only_baseline(train, test):
    """Accuracy of predicting the majority training answer per question text."""
    by_question = defaultdict(Counter)
    overall = Counter()
    for ex in train:
        key = " ".join(normalize(ex.tokens.raw))
        by_question[key][ex.answer_text] += 1
        overall[ex.answer_text] += 1
    fallback = _majority(overall)
    correct = 0
    for ex in test:
        counts = by_question.get(" ".join(normalize(ex.tokens.raw)))
        guess = _majority(counts) if counts else fallback
        correct += guess == ex.answer_text
    return correct / len(test)


def _majority(counter):
    # highest count, ties broken alphabetically
    return min(counter.items(), key=lambda kv: (-kv[1], kv[0]))[0]


def image_only_baseline(train, test, ridge=1.0):
    """Accuracy of a ridge-regression linear readout from flattened V."""
    answers = sorted({ex.answer_text for ex in train})
    idx = {a: i for i, a in enumerate(answers)}
    X = np.stack([ex.V.reshape(-1) for ex in train])
    X = np.hstack([X, np.ones((len(train), 1))])
    Y = np.zeros((len(train), len(answers)))
    for i, ex in enumerate(train):
        Y[i, idx[ex.answer_text]] = 1.0
    W = np.linalg.solve(X.T @ X + ridge * np.eye(X.shape[1]), X.T @ Y)
    Xt = np.stack([ex.V.reshape(-1) for ex in test])
    Xt = np.hstack([Xt, np.ones((len(test), 1))])
    pred = np.argmax(Xt @ W, axis=1)
    return float(np.mean([answers[p] == ex.answer_text for p, ex in zip(pred, test)]))
