"""Run configuration: flat ``key = value`` files with ``CIE_<KEY>``
environment overrides.

Recognised keys (defaults in parentheses)::

    vocab_size (64)  d_model (64)  n_layers (2)  n_heads (4)  max_context (256)
    init_std (0.02)  tie_embeddings (false)
    c_lower (1)  c_upper (64)  bin_size (8)  exclude_every (7)
    n_train (8000)  n_val (800)  n_range_instructions (100)
    n_heldout_instructions (60)  range_targets (0 = auto)
    lr (0.003)  epochs (24)  warmup_ratio (0.03)  weight_decay (0.001)
    grad_clip (0.3)  batch_size (16)  grad_accum (1)  decay_control (false)
    seed (0)  baseline (cie)  bucket_width (8)  fraction (1.0)
    equal_steps (true: epochs scale by 1/fraction so every fraction gets
    the same number of optimizer steps)
    data_dir (data)  max_new (0 = 2 * c_upper + 8)

Blank lines and ``#`` comments are ignored. Precedence: defaults < file <
environment < explicit command-line flags.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Optional

from .control import ControlBounds
from .errors import InvalidInputError
from .model import ModelConfig
from .synthdata import CTRL, EOS, PAD, Vocabulary
from .training import TrainConfig

ENV_PREFIX = "CIE_"
BASELINES = ("cie", "discrete", "prompt1", "prompt2", "prompt3", "best")


@dataclass(frozen=True)
class RunConfig:
    vocab_size: int = 64
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    max_context: int = 256
    init_std: float = 0.02
    tie_embeddings: bool = False
    c_lower: float = 1
    c_upper: float = 64
    bin_size: int = 8
    exclude_every: int = 7
    n_train: int = 8000
    n_val: int = 800
    n_range_instructions: int = 100
    n_heldout_instructions: int = 60
    range_targets: int = 0
    lr: float = 3e-3
    epochs: int = 24
    warmup_ratio: float = 0.03
    weight_decay: float = 0.001
    grad_clip: float = 0.3
    batch_size: int = 16
    grad_accum: int = 1
    decay_control: bool = False
    seed: int = 0
    baseline: str = "cie"
    bucket_width: int = 8
    fraction: float = 1.0
    equal_steps: bool = True
    data_dir: str = "data"
    max_new: int = 0

    def __post_init__(self):
        if self.baseline not in BASELINES:
            raise InvalidInputError(f"baseline must be one of {BASELINES}, got {self.baseline!r}")
        if not 0 < self.fraction <= 1:
            raise InvalidInputError(f"fraction must be in (0, 1], got {self.fraction}")
        self.bounds  # validates

    @property
    def bounds(self) -> ControlBounds:
        return ControlBounds(self.c_lower, self.c_upper)

    @property
    def vocab(self) -> Vocabulary:
        return Vocabulary(self.vocab_size)

    @property
    def decode_limit(self) -> int:
        return self.max_new or int(2 * self.c_upper + 8)

    def model_config(self, n_length_tokens: int = 0) -> ModelConfig:
        return ModelConfig(
            vocab_size=self.vocab_size, d_model=self.d_model, n_layers=self.n_layers, n_heads=self.n_heads,
            max_context=self.max_context, control_placeholder_id=CTRL, eos_id=EOS, pad_id=PAD,
            tie_embeddings=self.tie_embeddings, n_length_tokens=n_length_tokens, init_std=self.init_std,
        )

    @property
    def effective_epochs(self) -> int:
        if self.equal_steps and self.fraction < 1:
            return math.ceil(self.epochs / self.fraction)
        return self.epochs

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.lr, epochs=self.effective_epochs, warmup_ratio=self.warmup_ratio,
            weight_decay=self.weight_decay, grad_clip_norm=self.grad_clip, batch_size=self.batch_size,
            grad_accum_steps=self.grad_accum, seed=self.seed, decay_control=self.decay_control,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def to_text(self) -> str:
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in self.to_dict().items())

    def override(self, **kw) -> "RunConfig":
        return replace(self, **{k: v for k, v in kw.items() if v is not None})


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, raw: str):
    if key not in _TYPES:
        raise InvalidInputError(f"unknown config key {key!r}")
    default = RunConfig.__dataclass_fields__[key].default
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int) and not isinstance(default, bool):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise InvalidInputError(f"bad value for {key}: {raw!r}") from None
    return raw


def parse_config_text(text: str, source: str = "<config>") -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidInputError(f"{source}:{lineno}: expected key = value")
        key, value = line.split("=", 1)
        out[key.strip()] = _coerce(key.strip(), value)
    return out


def env_overrides(environ: Optional[dict] = None) -> dict:
    environ = os.environ if environ is None else environ
    out = {}
    for key in _TYPES:
        name = ENV_PREFIX + key.upper()
        if name in environ:
            out[key] = _coerce(key, environ[name])
    return out


def load_config(path=None, environ: Optional[dict] = None, **flags) -> RunConfig:
    values = {}
    if path is not None:
        values.update(parse_config_text(Path(path).read_text(encoding="utf-8"), str(path)))
    values.update(env_overrides(environ))
    values.update({k: v for k, v in flags.items() if v is not None})
    return RunConfig(**values)
