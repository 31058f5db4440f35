"""Run configuration: ``key = value`` files with ``#`` comments."""

import dataclasses
from dataclasses import dataclass, fields

import numpy as np

from .dal import STACK_MODES
from .data import SynthSpec
from .tse import MODES as TSE_MODES


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    # model dimensions (full-scale defaults)
    d: int = 312
    h: int = 12
    n: int = 20
    L: int = 2
    tse_mode: str = "sentence-key"
    stack_mode: str = "both"
    ffn: bool = True
    sentence_provider: str = "file"
    add_markers: bool = False
    freeze_embedding: bool = False
    dtype: str = "float64"
    # objective and optimizer
    label_smoothing: float = 0.10
    dropout: float = 0.1
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    batch_size: int = 16
    epochs: int = 100
    patience: int = 10
    factor: float = 0.1
    eval_batch_size: int = 64
    seed: int = 0
    out: str = "runs/default"
    # data: a directory written by `synth`, else an in-memory synthetic set
    data_dir: str = ""
    synth_train: int = 2000
    synth_val: int = 250
    synth_test: int = 500
    synth_modalities: int = 4
    synth_organs: int = 4
    synth_sigma: float = 0.3
    synth_yesno: float = 1.0 / 3.0
    synth_seed: int = -1
    reproduce_label_shift: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.d % self.h:
            raise ConfigError(f"d={self.d} must be divisible by h={self.h}")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError("label_smoothing must lie in [0, 1)")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.tse_mode not in TSE_MODES:
            raise ConfigError(f"tse_mode must be one of {TSE_MODES}")
        if self.stack_mode not in STACK_MODES:
            raise ConfigError(f"stack_mode must be one of {STACK_MODES}")
        if self.sentence_provider not in ("file", "bow-mean"):
            raise ConfigError("sentence_provider must be 'file' or 'bow-mean'")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError("dtype must be float64 or float32")
        if self.L < 1 or self.n < 1 or self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("L, n and batch_size must be positive")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def synth_spec(self):
        total = self.synth_train + self.synth_val + self.synth_test
        return SynthSpec(
            seed=self.seed if self.synth_seed < 0 else self.synth_seed,
            n_examples=total,
            d=self.d,
            n=self.n,
            families=(("modality", self.synth_modalities), ("organ", self.synth_organs)),
            yesno_fraction=self.synth_yesno,
            sigma=self.synth_sigma,
            split=(self.synth_train / total, self.synth_val / total, self.synth_test / total),
            reproduce_label_shift=self.reproduce_label_shift,
            add_markers=self.add_markers,
        )

    def echo(self):
        return "".join(f"{f.name} = {_format(getattr(self, f.name))}\n" for f in fields(self))


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coerce(name, raw, kind):
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return kind(raw)
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}") from None


_KINDS = {f.name: type(f.default) for f in fields(TrainConfig)}


def parse_config(text, **overrides):
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (p.strip() for p in line.split("=", 1))
        if key not in _KINDS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _coerce(key, raw, _KINDS[key])
    values.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig(**values)


def load_config(path=None, **overrides):
    text = ""
    if path:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    return parse_config(text, **overrides)
