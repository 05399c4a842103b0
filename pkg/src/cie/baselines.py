"""Conditioning methods: interpolated control (CIE), discrete length tokens
and verbalized-length prompts, plus best-of-prompts selection.

Every method turns ``(instruction, wc)`` into model input ids, an optional
injection position and a key from which the injected row is computed. The
training loop and the evaluator only talk to this interface.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import torch

from .control import ControlBounds, clamp
from .errors import InvalidInputError
from .model import ControlTransformer, GenerationResult, ModelConfig, build_input
from .synthdata import (
    PERIOD,
    PROMPT_ANSWER_SHOULD_BE,
    PROMPT_RESPOND_EXACTLY,
    PROMPT_RESPONSE_WORD_COUNT,
    WORDS,
    Vocabulary,
)

PROMPT_IDS = (1, 2, 3)


@dataclass(frozen=True)
class PromptTemplate:
    template_id: int
    prefix: tuple
    suffix: tuple
    text: str

    def render(self, instruction: Sequence[int], wc: int, vocab: Vocabulary) -> list[int]:
        if wc < 0 or int(wc) != wc:
            raise InvalidInputError(f"wc={wc} is not representable in digit tokens")
        return list(self.prefix) + vocab.digits(int(wc)) + list(self.suffix) + list(instruction)


# token-level analogs of the three verbalized length prompts
TEMPLATES = {
    1: PromptTemplate(1, (PROMPT_RESPONSE_WORD_COUNT,), (PERIOD,), "The response should have a word count of {wordcount}."),
    2: PromptTemplate(2, (PROMPT_ANSWER_SHOULD_BE,), (WORDS, PERIOD), "The answer should be {wordcount} words."),
    3: PromptTemplate(3, (PROMPT_RESPOND_EXACTLY,), (WORDS, PERIOD), "Respond to the following in exactly {wordcount} words."),
}


def render_prompt(template: int, instruction: Sequence[int], wc: int, vocab: Vocabulary) -> list[int]:
    if template not in TEMPLATES:
        raise InvalidInputError(f"unknown prompt template {template}")
    return TEMPLATES[template].render(instruction, wc, vocab)


@dataclass
class DiscreteLengthVocab:
    """One dedicated embedding row per length bucket of ``bucket_width``."""

    bounds: ControlBounds
    bucket_width: int
    trained_buckets: Optional[frozenset] = None

    def __post_init__(self):
        if self.bucket_width < 1:
            raise InvalidInputError("bucket_width must be >= 1")

    @property
    def n_buckets(self) -> int:
        return int((self.bounds.c_upper - self.bounds.c_lower) // self.bucket_width) + 1

    def bucket(self, wc: float) -> int:
        return int((clamp(wc, self.bounds) - self.bounds.c_lower) // self.bucket_width)

    def bucket_range(self, b: int) -> tuple[int, int]:
        lo = self.bounds.c_lower + b * self.bucket_width
        return int(lo), int(min(lo + self.bucket_width - 1, self.bounds.c_upper))

    def with_training_lengths(self, lengths) -> "DiscreteLengthVocab":
        return DiscreteLengthVocab(self.bounds, self.bucket_width, frozenset(self.bucket(v) for v in lengths))


@dataclass
class DiscreteInjection:
    ids: list[int]
    position: int
    bucket: int
    meta: dict = field(default_factory=dict)


def discrete_inject(instruction: Sequence[int], wc: float, dlv: DiscreteLengthVocab, config: ModelConfig) -> DiscreteInjection:
    ids, pos = build_input(instruction, config, room=0)
    b = dlv.bucket(wc)
    meta = {"bucket_range": dlv.bucket_range(b)}
    if dlv.trained_buckets is not None and b not in dlv.trained_buckets:
        if not dlv.trained_buckets:
            raise InvalidInputError("no trained length buckets")
        nearest = min(dlv.trained_buckets, key=lambda t: (abs(t - b), t))
        meta.update(untrained_bucket=b, held_out=True)
        b = nearest
    return DiscreteInjection(ids, pos, b, meta)


def best_of_prompts(candidates: Mapping[int, GenerationResult], target: float) -> tuple[int, GenerationResult]:
    """Candidate closest to the target length; ties go to the lowest template id."""
    if not candidates:
        raise InvalidInputError("best_of_prompts needs at least one candidate")
    tid = min(candidates, key=lambda t: (abs(candidates[t].realized_length - target), t))
    return tid, candidates[tid]


# -- conditioning methods ---------------------------------------------------

class Method:
    """How a conditioning scheme builds inputs and injected rows."""

    name = "base"

    def prepare(self, instruction: Sequence[int], wc: float, index: int = 0):
        """Return ``(ids, control_position or -1, key)``."""
        raise NotImplementedError

    def rows(self, model: ControlTransformer, keys) -> Optional[torch.Tensor]:
        return None


class CIEMethod(Method):
    name = "cie"

    def __init__(self, bounds: ControlBounds, config: ModelConfig):
        self.bounds = bounds
        self.config = config

    def prepare(self, instruction, wc, index=0):
        ids, pos = build_input(instruction, self.config, room=0)
        return ids, pos, float(wc)

    def rows(self, model, keys):
        return model.control_rows(keys, self.bounds)


class DiscreteMethod(Method):
    name = "discrete"

    def __init__(self, dlv: DiscreteLengthVocab, config: ModelConfig):
        self.dlv = dlv
        self.config = config

    def prepare(self, instruction, wc, index=0):
        inj = discrete_inject(instruction, wc, self.dlv, self.config)
        return inj.ids, inj.position, inj.bucket

    def rows(self, model, keys):
        return model.length_rows(keys)


class PromptMethod(Method):
    """Verbalized length. ``template=None`` cycles templates 1..3 by sample index."""

    def __init__(self, template: Optional[int], vocab: Vocabulary):
        if template is not None and template not in TEMPLATES:
            raise InvalidInputError(f"unknown prompt template {template}")
        self.template = template
        self.vocab = vocab
        self.name = f"prompt{template}" if template else "prompt_mixed"

    def prepare(self, instruction, wc, index=0):
        t = self.template or PROMPT_IDS[index % len(PROMPT_IDS)]
        return render_prompt(t, instruction, int(round(wc)), self.vocab), -1, None


def make_method(baseline: str, bounds: ControlBounds, config: ModelConfig, vocab: Vocabulary,
                bucket_width: int = 8, training_lengths=None) -> Method:
    """Training-side method for a ``--baseline`` choice (``best`` trains on all prompts)."""
    if baseline == "cie":
        return CIEMethod(bounds, config)
    if baseline == "discrete":
        dlv = DiscreteLengthVocab(bounds, bucket_width)
        if training_lengths is not None:
            dlv = dlv.with_training_lengths(training_lengths)
        return DiscreteMethod(dlv, config)
    if baseline in ("prompt1", "prompt2", "prompt3"):
        return PromptMethod(int(baseline[-1]), vocab)
    if baseline == "best":
        return PromptMethod(None, vocab)
    raise InvalidInputError(f"unknown baseline {baseline!r}")


def n_length_tokens(baseline: str, bounds: ControlBounds, bucket_width: int) -> int:
    if baseline != "discrete":
        return 0
    return DiscreteLengthVocab(bounds, bucket_width).n_buckets


def max_prompt_overhead(bounds: ControlBounds) -> int:
    """Extra input tokens any method adds on top of the raw instruction."""
    digits = len(str(int(math.ceil(bounds.c_upper))))
    return max(1, max(len(t.prefix) + len(t.suffix) for t in TEMPLATES.values()) + digits)
