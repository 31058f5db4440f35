"""The assembled WSDAN classifier: embeddings -> TSE -> DAL stack -> fusion -> MLP."""

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, matmul, reshape
from .dal import DualFeatures, StackConfig, init_dal, stack_forward
from .head import classifier_logits, fuse, init_classifier, init_fusion, softmax
from .tse import embed_words, init_tse, tse_attention


@dataclass
class Batch:
    ids: np.ndarray  # (B, n) int
    mask: np.ndarray  # (B, n) bool
    V: np.ndarray  # (B, 5, d)
    S: np.ndarray  # (B, d) or None
    targets: np.ndarray  # (B,) int
    example_ids: list

    def __len__(self):
        return len(self.ids)


def make_batch(examples, dtype=np.float64):
    ids = np.stack([e.tokens.ids for e in examples])
    mask = np.stack([e.tokens.mask for e in examples])
    V = np.stack([e.V for e in examples]).astype(dtype)
    S = None
    if all(e.sentence is not None for e in examples):
        S = np.stack([e.sentence.vector for e in examples]).astype(dtype)
    targets = np.array([e.answer for e in examples], dtype=np.int64)
    return Batch(ids, mask, V, S, targets, [e.id for e in examples])


class ModelParams:
    """Every learnable tensor of the model, addressable by dotted name."""

    def __init__(self, embed, tse, dals, fusion, classifier):
        self.embed = embed
        self.tse = tse
        self.dals = dals
        self.fusion = fusion
        self.classifier = classifier

    @classmethod
    def init(cls, rng, vocab_size, d, h, n, layers, n_answers, dtype=np.float64):
        embed = Tensor((rng.standard_normal((vocab_size, d)) / np.sqrt(d)).astype(dtype), requires_grad=True)
        tse = init_tse(rng, d, dtype)
        dals = [init_dal(rng, d, h, dtype) for _ in range(layers)]
        return cls(embed, tse, dals, init_fusion(n, dtype), init_classifier(rng, d, n_answers, dtype))

    def named(self):
        out = {"embed.E": self.embed}
        out.update(self.tse.named("tse"))
        for i, dal in enumerate(self.dals):
            out.update(dal.named(f"dal{i}"))
        out.update(self.fusion.named("fusion"))
        out.update(self.classifier.named("cls"))
        return out

    def load(self, arrays):
        named = self.named()
        missing = set(named) - set(arrays)
        extra = set(arrays) - set(named)
        if missing or extra:
            raise KeyError(f"parameter mismatch; missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, t in named.items():
            if arrays[name].shape != t.shape:
                raise ValueError(f"{name}: checkpoint shape {arrays[name].shape} != model shape {t.shape}")
            t.data = np.array(arrays[name], dtype=t.data.dtype)

    def zero_grad(self):
        for t in self.named().values():
            t.zero_grad()


def param_group(name):
    """Coarse grouping used in gradient-check reports, e.g. 'dal0.v.sa'."""
    parts = name.split(".")
    if parts[0].startswith("dal"):
        return ".".join(parts[:3])
    if parts[0] == "tse" and parts[1] in ("uq", "uk"):
        return f"tse.{parts[1]}"
    return parts[0]


class WSDAN:
    def __init__(self, config, vocab_size, n_answers, params=None, seed=None):
        self.config = config
        self.vocab_size = vocab_size
        self.n_answers = n_answers
        rng = np.random.default_rng(config.seed if seed is None else seed)
        self.params = params or ModelParams.init(
            rng, vocab_size, config.d, config.h, config.n, config.L, n_answers, config.np_dtype
        )
        self.params.embed.requires_grad = not config.freeze_embedding
        self.stack = StackConfig(config.L, config.stack_mode, config.dropout, config.ffn)

    def sentence_input(self, qhat, batch):
        if self.config.sentence_provider == "bow-mean":
            w = batch.mask / batch.mask.sum(axis=1, keepdims=True)
            w = Tensor(w[:, None, :].astype(qhat.data.dtype))
            s = matmul(w, qhat)
            return reshape(s, (s.shape[0], s.shape[2]))
        if batch.S is None:
            raise ValueError("sentence_provider=file but the batch carries no sentence vectors")
        return Tensor(batch.S)

    def forward(self, batch, rng=None, collect=False, train=False):
        """Logits (B, N). With ``collect`` also returns (attention maps, TSE weights)."""
        p = self.params
        cfg = self.config
        stack = self.stack
        if not train or rng is None:
            stack = StackConfig(stack.layers, stack.mode, 0.0, stack.ffn)
        qhat = embed_words(batch.ids, p.embed)
        s = self.sentence_input(qhat, batch)
        Q, tse_w = tse_attention(qhat, s, p.tse, cfg.tse_mode, batch.mask)
        feats = DualFeatures(Tensor(batch.V), Q, batch.mask)
        out, maps = stack_forward(feats, p.dals, stack, rng)
        z = fuse(out.V, out.Q, p.fusion, batch.mask)
        logits = classifier_logits(z, p.classifier)
        logits = reshape(logits, (logits.shape[0], logits.shape[2]))
        if collect:
            return logits, maps, tse_w.data
        return logits

    def predict_proba(self, batch):
        return softmax(self.forward(batch).data)

