"""Synthetic length-controlled instruction task, word counting, filtering,
uniform-bin curation and JSON Lines persistence.

Task: an instruction is ``INST w1 .. wk SEP``; the answer cycles through the
instruction's content words until it holds ``wc`` words, puts a comma after
every word that belongs to a fixed "clause-ending" subset (except the last
word), and closes with a period and EOS. Everything after the instruction is
therefore a deterministic function of (instruction, wc).
"""

from __future__ import annotations

import json
import logging
import math
import random
import string
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

from .control import ControlBounds, clamp
from .errors import SchemaError

log = logging.getLogger(__name__)

PAD, EOS, CTRL, INST, SEP = 0, 1, 2, 3, 4
DIGIT0 = 5  # digits 0-9 occupy 5..14
PROMPT_RESPONSE_WORD_COUNT, PROMPT_ANSWER_SHOULD_BE, PROMPT_RESPOND_EXACTLY, WORDS = 15, 16, 17, 18
PERIOD, COMMA, SEMICOLON, BANG = 19, 20, 21, 22
FIRST_WORD = 23

_PUNCT_TEXT = {PERIOD: ".", COMMA: ",", SEMICOLON: ";", BANG: "!"}
_SPECIAL_TEXT = {
    PAD: "<pad>",
    EOS: "<eos>",
    CTRL: "<control-embedding>",
    INST: "<inst>",
    SEP: "<sep>",
    PROMPT_RESPONSE_WORD_COUNT: "<response-word-count-of>",
    PROMPT_ANSWER_SHOULD_BE: "<answer-should-be>",
    PROMPT_RESPOND_EXACTLY: "<respond-in-exactly>",
    WORDS: "<words>",
}
# pseudo-words; none trips the keyword filter
_WORD_TEXT = (
    "amber birch cloud dune ember fern glade harbor iris jade kelp lark meadow "
    "north oak pebble quill river sage tundra umber vale willow yarrow zephyr "
    "brook cedar dawn elm frost grove heath isle juniper knoll lichen moss "
    "nectar orchard petal rain"
).split()


@dataclass(frozen=True)
class Vocabulary:
    vocab_size: int = 64

    def __post_init__(self):
        if self.vocab_size <= FIRST_WORD + 1:
            raise ValueError(f"vocab_size must exceed {FIRST_WORD + 1}")

    @property
    def pad_id(self) -> int:
        return PAD

    @property
    def eos_id(self) -> int:
        return EOS

    @property
    def placeholder_id(self) -> int:
        return CTRL

    @property
    def digit_ids(self) -> list[int]:
        return list(range(DIGIT0, DIGIT0 + 10))

    @property
    def punctuation_token_ids(self) -> frozenset:
        return frozenset(_PUNCT_TEXT)

    @property
    def word_token_ids(self) -> frozenset:
        return frozenset(range(FIRST_WORD, self.vocab_size))

    @property
    def structural_ids(self) -> frozenset:
        return frozenset(range(0, PERIOD))

    @property
    def clause_words(self) -> frozenset:
        """Words that are followed by a comma inside an answer."""
        return frozenset(w for w in self.word_token_ids if (w - FIRST_WORD) % 6 == 5)

    def digits(self, n: int) -> list[int]:
        return [DIGIT0 + int(ch) for ch in str(int(n))]

    def token_text(self, t: int) -> str:
        if t in _PUNCT_TEXT:
            return _PUNCT_TEXT[t]
        if t in _SPECIAL_TEXT:
            return _SPECIAL_TEXT[t]
        if DIGIT0 <= t < DIGIT0 + 10:
            return str(t - DIGIT0)
        k = t - FIRST_WORD
        return _WORD_TEXT[k] if k < len(_WORD_TEXT) else f"word{k}"

    def decode(self, ids: Iterable[int], specials: bool = False) -> str:
        out = []
        for t in ids:
            if not specials and t in self.structural_ids:
                continue
            out.append(self.token_text(t))
        return " ".join(out)


@dataclass
class Sample:
    instruction: list[int]
    answer: list[int]
    wc: int
    raw_instruction: Optional[str] = None
    raw_answer: Optional[str] = None


@dataclass
class DatasetManifest:
    bin_size: int
    bin_counts: list[int]
    bounds: dict
    seed: int
    split: str
    excluded_lengths: list[int] = field(default_factory=list)
    empty_bins: list[int] = field(default_factory=list)
    requested_n: Optional[int] = None
    realized_n: Optional[int] = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d.update(d.pop("extra"))
        return d


# -- counting ---------------------------------------------------------------

def _split_punct(chunk: str) -> list[str]:
    head = []
    i, j = 0, len(chunk)
    while i < j and chunk[i] in string.punctuation:
        head.append(chunk[i])
        i += 1
    tail = []
    while j > i and chunk[j - 1] in string.punctuation:
        tail.append(chunk[j - 1])
        j -= 1
    core = [chunk[i:j]] if i < j else []
    return head + core + tail[::-1]


def tokenize(text: str) -> list[str]:
    tokens: list[str] = []
    for chunk in text.split():
        tokens.extend(_split_punct(chunk))
    return tokens


def word_count(text: str) -> int:
    """Whitespace split, peel leading/trailing ASCII punctuation into separate
    tokens, count tokens that are not punctuation-only."""
    return sum(1 for tok in tokenize(text) if not all(ch in string.punctuation for ch in tok))


def token_word_count(seq: Sequence[int], vocab: Vocabulary) -> int:
    words = vocab.word_token_ids
    n = 0
    for t in seq:
        if t == vocab.eos_id:
            break
        if t in words:
            n += 1
    return n


# Coding / markup keywords. Matching lowercases the text only, so the
# upper-case "IP" entry never fires; kept as-is for parity with the original list.
PROGRAMMING_KEYWORDS = (
    "java", "python", "c++", "def", "return", "program", "function", "script", "html", "css",
    "javascript", "php", "sql", "ruby", "swift", "kotlin", "go", "rust", "scala", "haskell",
    "erlang", "elixir", "dart", "typescript", "c#", "visual basic", "objective-c", "assembly",
    "matlab", "perl", "shell", ".js", "json", "xml", "<", ">", "lorem ipsum", "\\document", "---", "excel",
    "https", "tabular", "\\end", "ascii", "*", "translate", "korean", "IP",
)


def keyword_filter(text: str) -> bool:
    """True when the text should be rejected as coding/markup content."""
    lowered = text.lower()
    return any(k in lowered for k in PROGRAMMING_KEYWORDS)


def accept_all(text: str) -> bool:
    return True


# -- generation -------------------------------------------------------------

def bin_index(wc: float, bounds: ControlBounds, bin_size: int) -> int:
    return int((wc - bounds.c_lower) // bin_size)


def n_bins(bounds: ControlBounds, bin_size: int) -> int:
    return bin_index(bounds.c_upper, bounds, bin_size) + 1


def bin_values(b: int, bounds: ControlBounds, bin_size: int) -> list[int]:
    lo = int(math.ceil(bounds.c_lower)) + b * bin_size
    hi = min(lo + bin_size - 1, int(math.floor(bounds.c_upper)))
    return list(range(lo, hi + 1))


def default_excluded(bounds: ControlBounds, every: int = 7) -> list[int]:
    if every <= 0:
        return []
    return [v for v in range(int(math.ceil(bounds.c_lower)), int(bounds.c_upper) + 1) if v % every == 0]


def make_answer(content: Sequence[int], wc: int, vocab: Vocabulary) -> list[int]:
    clause = vocab.clause_words
    out: list[int] = []
    for j in range(wc):
        w = content[j % len(content)]
        out.append(w)
        if w in clause and j < wc - 1:
            out.append(COMMA)
    out.append(PERIOD)
    out.append(EOS)
    return out


def make_instruction(rng: random.Random, vocab: Vocabulary, min_words: int = 2, max_words: int = 6) -> list[int]:
    words = sorted(vocab.word_token_ids)
    k = rng.randint(min_words, max_words)
    return [INST] + rng.sample(words, k) + [SEP]


def instruction_content(instruction: Sequence[int], vocab: Vocabulary) -> list[int]:
    words = vocab.word_token_ids
    return [t for t in instruction if t in words]


def make_sample(instruction: list[int], wc: int, vocab: Vocabulary) -> Sample:
    answer = make_answer(instruction_content(instruction, vocab), wc, vocab)
    return Sample(instruction, answer, wc, vocab.decode(instruction), vocab.decode(answer))


def gen_task(
    n: int,
    bounds: ControlBounds,
    vocab: Vocabulary,
    seed: int,
    bin_size: int = 8,
    exclude: Iterable[int] = (),
    language_ok: Callable[[str], bool] = accept_all,
    split: str = "train",
) -> tuple[list[Sample], DatasetManifest]:
    """Draw ``n`` samples whose lengths are spread uniformly over the bins.

    Per-bin quotas differ by at most one; lengths inside a bin are uniform over
    the allowed (non-excluded) values. Bins with no allowed values are flagged
    and ``n`` is adjusted to what the remaining bins can hold evenly.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = random.Random(seed)
    excluded = set(int(v) for v in exclude)
    nb = n_bins(bounds, bin_size)
    allowed = [[v for v in bin_values(b, bounds, bin_size) if v not in excluded] for b in range(nb)]
    live = [b for b in range(nb) if allowed[b]]
    empty = [b for b in range(nb) if not allowed[b]]
    if not live:
        raise ValueError("every length bin is excluded")
    quotas = [0] * nb
    for i in range(n):
        quotas[live[i % len(live)]] += 1

    samples: list[Sample] = []
    order = [b for b in range(nb) for _ in range(quotas[b])]
    rng.shuffle(order)
    for b in order:
        while True:
            inst = make_instruction(rng, vocab)
            raw = vocab.decode(inst)
            if not keyword_filter(raw) and language_ok(raw):
                break
        wc = rng.choice(allowed[b])
        samples.append(make_sample(inst, wc, vocab))

    manifest = DatasetManifest(
        bin_size=bin_size,
        bin_counts=quotas,
        bounds=bounds.to_dict(),
        seed=seed,
        split=split,
        excluded_lengths=sorted(excluded),
        empty_bins=empty,
        requested_n=n,
        realized_n=len(samples),
    )
    return samples, manifest


def curate(
    samples: Sequence[Sample],
    bounds: ControlBounds,
    bin_size: int,
    seed: int = 0,
    split: str = "train",
) -> tuple[list[Sample], DatasetManifest]:
    """Clamp ``wc`` into bounds and downsample so bin counts differ by <= 1.

    Non-empty bins are cut down to the smallest non-empty bin's count; empty
    bins are reported in the manifest, never backfilled. Original order is
    kept among survivors.
    """
    nb = n_bins(bounds, bin_size)
    by_bin: list[list[int]] = [[] for _ in range(nb)]
    clamped: list[Sample] = []
    for i, s in enumerate(samples):
        wc = int(clamp(s.wc, bounds))
        if wc != s.wc:
            s = Sample(s.instruction, s.answer, wc, s.raw_instruction, s.raw_answer)
        clamped.append(s)
        by_bin[bin_index(wc, bounds, bin_size)].append(i)
    nonempty = [len(b) for b in by_bin if b]
    cap = min(nonempty) if nonempty else 0
    rng = random.Random(seed)
    keep: set[int] = set()
    for members in by_bin:
        if len(members) <= cap:
            keep.update(members)
        else:
            keep.update(rng.sample(members, cap))
    out = [clamped[i] for i in sorted(keep)]
    counts = [min(len(b), cap) for b in by_bin]
    manifest = DatasetManifest(
        bin_size=bin_size,
        bin_counts=counts,
        bounds=bounds.to_dict(),
        seed=seed,
        split=split,
        empty_bins=[i for i, b in enumerate(by_bin) if not b],
        requested_n=len(samples),
        realized_n=len(out),
    )
    return out, manifest


def subsample_by_bin(samples: Sequence[Sample], fraction: float, bounds: ControlBounds, bin_size: int, seed: int) -> list[Sample]:
    """Keep ``fraction`` of each length bin (used by data-scaling runs)."""
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    if fraction == 1:
        return list(samples)
    by_bin: dict[int, list[int]] = {}
    for i, s in enumerate(samples):
        by_bin.setdefault(bin_index(s.wc, bounds, bin_size), []).append(i)
    rng = random.Random(seed)
    keep: list[int] = []
    for b in sorted(by_bin):
        members = by_bin[b]
        keep.extend(rng.sample(members, max(1, round(len(members) * fraction))))
    return [samples[i] for i in sorted(keep)]


# -- persistence ------------------------------------------------------------

def sample_to_record(s: Sample) -> dict:
    rec = {"instruction_ids": list(s.instruction), "answer_ids": list(s.answer), "word_count": int(s.wc)}
    if s.raw_instruction is not None:
        rec["raw_instruction"] = s.raw_instruction
    if s.raw_answer is not None:
        rec["raw_answer"] = s.raw_answer
    return rec


def record_to_sample(rec: dict, line: int, path=None) -> Sample:
    if not isinstance(rec, dict):
        raise SchemaError("record is not a JSON object", line, path)
    for key in ("instruction_ids", "answer_ids", "word_count"):
        if key not in rec:
            raise SchemaError(f"missing field {key!r}", line, path)
    inst, ans, wc = rec["instruction_ids"], rec["answer_ids"], rec["word_count"]
    if not (isinstance(inst, list) and all(isinstance(t, int) for t in inst)):
        raise SchemaError("instruction_ids must be an int array", line, path)
    if not (isinstance(ans, list) and all(isinstance(t, int) for t in ans)):
        raise SchemaError("answer_ids must be an int array", line, path)
    if not isinstance(wc, int) or isinstance(wc, bool):
        raise SchemaError("word_count must be an integer", line, path)
    return Sample(inst, ans, wc, rec.get("raw_instruction"), rec.get("raw_answer"))


def dumps_jsonl(samples: Iterable[Sample]) -> str:
    return "".join(json.dumps(sample_to_record(s), separators=(",", ":")) + "\n" for s in samples)


def write_jsonl(samples: Iterable[Sample], path) -> None:
    Path(path).write_text(dumps_jsonl(samples), encoding="utf-8")


def read_jsonl(path) -> list[Sample]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise SchemaError(f"malformed JSON ({e.msg})", lineno, path) from None
            out.append(record_to_sample(rec, lineno, path))
    return out


def write_manifest(manifest: DatasetManifest, path) -> None:
    Path(path).write_text(json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
