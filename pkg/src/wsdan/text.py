"""Question text front end: vocabulary, tokenizer, padding, sentence vectors."""

import re
from dataclasses import dataclass

import numpy as np

PAD, UNK, CLS, SEP, MASK = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"
RESERVED = (PAD, UNK, CLS, SEP, MASK)
PAD_ID, UNK_ID, CLS_ID, SEP_ID, MASK_ID = range(5)

_PIECE = re.compile(r"\w+", re.UNICODE)


class EmptyQuestionError(ValueError):
    pass


class Vocab:
    """Flat token vocabulary; line index in the vocab file is the id."""

    def __init__(self, tokens):
        tokens = list(tokens)
        if tuple(tokens[: len(RESERVED)]) != RESERVED:
            raise ValueError(f"vocabulary must start with {' '.join(RESERVED)}")
        self.tokens = tokens
        self.index = {}
        for i, tok in enumerate(tokens):
            if tok in self.index:
                raise ValueError(f"duplicate vocabulary entry {tok!r} at line {i + 1}")
            self.index[tok] = i

    @classmethod
    def build(cls, words):
        seen = dict.fromkeys(w for w in words if w not in RESERVED)
        return cls(list(RESERVED) + list(seen))

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls(line.rstrip("\n") for line in fh)

    def save(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for tok in self.tokens:
                fh.write(tok + "\n")

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self.index

    def id(self, token):
        return self.index.get(token, UNK_ID)


def normalize(text):
    """Lowercase and split on whitespace/punctuation boundaries."""
    return _PIECE.findall(text.lower())


def tokenize(text, vocab):
    pieces = normalize(text)
    if not pieces:
        raise EmptyQuestionError("question has no tokens")
    return [vocab.id(p) for p in pieces]


@dataclass(frozen=True)
class TokenSequence:
    ids: np.ndarray
    mask: np.ndarray
    raw: str = ""

    def __post_init__(self):
        if self.ids.shape != self.mask.shape:
            raise ValueError("ids and mask lengths differ")
        if not self.mask.any():
            raise ValueError("token sequence has no real tokens")

    def __len__(self):
        return len(self.ids)

    @property
    def length(self):
        return int(self.mask.sum())


def encode_pad(ids, n, raw="", add_markers=False):
    ids = list(ids)
    if not ids:
        raise EmptyQuestionError("cannot pad an empty id list")
    if add_markers:
        ids = [CLS_ID] + ids[: max(n - 2, 0)] + [SEP_ID]
    ids = ids[:n]
    real = len(ids)
    out = np.full(n, PAD_ID, dtype=np.int64)
    out[:real] = ids
    mask = np.zeros(n, dtype=bool)
    mask[:real] = True
    return TokenSequence(out, mask, raw)


def encode_question(text, vocab, n, add_markers=False):
    return encode_pad(tokenize(text, vocab), n, raw=text, add_markers=add_markers)


@dataclass(frozen=True)
class SentenceEmbedding:
    vector: np.ndarray
    provider: str

    def __post_init__(self):
        if not np.all(np.isfinite(self.vector)):
            raise ValueError("sentence embedding has non-finite entries")


class SentenceStore:
    """Question id -> precomputed sentence vector, one record per line:
    ``<id>\\t<space-separated reals>``."""

    def __init__(self, vectors=None):
        self.vectors = dict(vectors or {})

    @classmethod
    def load(cls, path):
        vectors = {}
        dim = None
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.rstrip("\n")
                if not line:
                    continue
                try:
                    key, values = line.split("\t")
                    vec = np.array([float(v) for v in values.split()], dtype=np.float64)
                except ValueError as exc:
                    raise ValueError(f"{path}:{lineno}: malformed sentence record") from exc
                if dim is None:
                    dim = vec.size
                elif vec.size != dim:
                    raise ValueError(f"{path}:{lineno}: expected {dim} values, got {vec.size}")
                vectors[key] = vec
        return cls(vectors)

    def save(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for key, vec in self.vectors.items():
                fh.write(key + "\t" + " ".join(repr(float(v)) for v in vec) + "\n")

    def __contains__(self, key):
        return key in self.vectors

    def __getitem__(self, key):
        try:
            return self.vectors[key]
        except KeyError:
            raise KeyError(f"no sentence vector stored for question id {key!r}") from None

    def __setitem__(self, key, vec):
        self.vectors[key] = np.asarray(vec, dtype=np.float64)


def sentence_embed(question, provider, store=None, key=None, table=None, vocab=None):
    """Sentence vector for a question.

    ``provider="file"`` looks ``key`` up in ``store``. ``provider="bow-mean"``
    averages rows of ``table`` over the real tokens of ``question`` (a
    TokenSequence, or a string tokenized with ``vocab``).
    """
    if provider == "file":
        if store is None or key is None:
            raise ValueError("file provider needs a store and a question id")
        return SentenceEmbedding(store[key], "file")
    if provider == "bow-mean":
        if table is None:
            raise ValueError("bow-mean provider needs an embedding table")
        if isinstance(question, str):
            ids = np.asarray(tokenize(question, vocab))
        else:
            ids = question.ids[question.mask]
        table = np.asarray(table)
        return SentenceEmbedding(table[ids].mean(axis=0), "bow-mean")
    raise ValueError(f"unknown sentence provider {provider!r}")
