import itertools
import json
import string
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cie.control import ControlBounds
from cie.errors import SchemaError
from cie.synthdata import (
    COMMA,
    EOS,
    PERIOD,
    Sample,
    Vocabulary,
    bin_index,
    curate,
    default_excluded,
    dumps_jsonl,
    gen_task,
    keyword_filter,
    n_bins,
    read_jsonl,
    subsample_by_bin,
    token_word_count,
    tokenize,
    word_count,
    write_jsonl,
)

CORPUS = Path(__file__).parent / "data" / "word_count_corpus.jsonl"
VOCAB = Vocabulary(64)
B64 = ControlBounds(1, 64)


def _reference_count(text):
    # a chunk holds a word iff it has at least one non-punctuation character
    return sum(any(c not in string.punctuation for c in chunk) for chunk in text.split())


@pytest.mark.parametrize("text, n", [("", 0), ("Hello, world!", 2), ("one two three.", 3)])
def test_word_count_examples(text, n):
    assert word_count(text) == n


def test_tokenize_peels_punctuation():
    assert tokenize("Hello, world!") == ["Hello", ",", "world", "!"]
    assert tokenize("(a)") == ["(", "a", ")"]
    assert tokenize("don't") == ["don't"]


def test_word_count_corpus():
    records = [json.loads(line) for line in CORPUS.read_text(encoding="utf-8").splitlines()]
    assert len(records) == 50
    for rec in records:
        assert word_count(rec["text"]) == rec["expected"] == _reference_count(rec["text"]), rec["text"]


@given(st.text(alphabet=string.ascii_letters + string.punctuation + " \t\n", max_size=60))
def test_word_count_matches_reference(text):
    assert word_count(text) == _reference_count(text)


def test_vocabulary_classes_disjoint():
    words, punct, struct = VOCAB.word_token_ids, VOCAB.punctuation_token_ids, VOCAB.structural_ids
    assert not (words & punct) and not (words & struct) and not (punct & struct)
    assert words | punct | struct == set(range(64))


def test_token_word_count_examples():
    w = min(VOCAB.word_token_ids)
    assert token_word_count([w, w, PERIOD, w, EOS], VOCAB) == 3
    assert token_word_count([EOS], VOCAB) == 0
    assert token_word_count([w, EOS, w, w], VOCAB) == 1


class _SixTokens:
    """Minimal vocabulary stand-in: 0 eos, 1 pad, 2-3 words, 4-5 punctuation."""

    eos_id = 0
    word_token_ids = frozenset({2, 3})


def test_token_word_count_exhaustive_small_vocab():
    v = _SixTokens()
    for n in range(9):
        for seq in itertools.product(range(6), repeat=n):
            prefix = seq[: seq.index(0)] if 0 in seq else seq
            assert token_word_count(seq, v) == sum(1 for t in prefix if t in (2, 3))


@pytest.mark.parametrize("text, rejected", [
    ("write a Python function", True), ("describe a sunset", False), ("HTML basics", True),
    ("a <b> tag", True), ("Translate this", True), ("nice IP address", False),
])
def test_keyword_filter(text, rejected):
    assert keyword_filter(text) is rejected


def test_gen_task_one_per_bin():
    samples, m = gen_task(n_bins(B64, 8), B64, VOCAB, seed=0)
    assert sorted(bin_index(s.wc, B64, 8) for s in samples) == list(range(8))
    assert m.bin_counts == [1] * 8


@settings(max_examples=25, deadline=None)
@given(n=st.integers(1, 300), seed=st.integers(0, 10_000), every=st.sampled_from([0, 3, 7]))
def test_gen_task_constructive_consistency(n, seed, every):
    excl = default_excluded(B64, every)
    samples, m = gen_task(n, B64, VOCAB, seed, exclude=excl)
    assert len(samples) == n == m.realized_n
    assert max(m.bin_counts) - min(c for i, c in enumerate(m.bin_counts) if i not in m.empty_bins) <= 1
    for s in samples:
        assert token_word_count(s.answer, VOCAB) == s.wc
        assert word_count(VOCAB.decode(s.answer)) == s.wc
        assert s.wc not in excl and 1 <= s.wc <= 64
        assert not keyword_filter(s.raw_instruction)


def test_gen_task_flags_empty_bins():
    excl = list(range(1, 9))
    samples, m = gen_task(20, B64, VOCAB, 0, exclude=excl)
    assert m.empty_bins == [0] and m.bin_counts[0] == 0
    assert all(s.wc > 8 for s in samples)


def test_gen_task_deterministic(tmp_path):
    a, _ = gen_task(50, B64, VOCAB, seed=4)
    b, _ = gen_task(50, B64, VOCAB, seed=4)
    write_jsonl(a, tmp_path / "a.jsonl")
    write_jsonl(b, tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    c, _ = gen_task(50, B64, VOCAB, seed=5)
    assert dumps_jsonl(c) != dumps_jsonl(a)


def test_answers_contain_punctuation():
    samples, _ = gen_task(64, B64, VOCAB, seed=1)
    joined = [t for s in samples for t in s.answer]
    assert COMMA in joined and joined.count(PERIOD) == 64


def _pool(counts, bounds, bin_size=8):
    inst = [3, 30, 4]
    out = []
    for b, k in enumerate(counts):
        wc = int(bounds.c_lower) + b * bin_size
        out += [Sample(inst, [30] * wc + [EOS], wc) for _ in range(k)]
    return out


def test_curate_downsamples_to_min():
    b = ControlBounds(1, 24)
    out, m = curate(_pool([10, 40, 40], b), b, 8)
    assert m.bin_counts == [10, 10, 10] and len(out) == 30


def test_curate_clamps():
    b = ControlBounds(1, 200)
    out, _ = curate([Sample([3], [30, EOS], 250)], b, 25)
    assert out[0].wc == 200


def test_curate_idempotent_on_uniform():
    b = ControlBounds(1, 24)
    pool = _pool([5, 5, 5], b)
    out, _ = curate(pool, b, 8)
    assert out == pool


def test_curate_flags_empty():
    b = ControlBounds(1, 24)
    out, m = curate(_pool([4, 0, 7], b), b, 8)
    assert m.empty_bins == [1] and m.bin_counts == [4, 0, 4]


@settings(max_examples=50, deadline=None)
@given(counts=st.lists(st.integers(1, 30), min_size=2, max_size=8), seed=st.integers(0, 99))
def test_curate_uniform_property(counts, seed):
    b = ControlBounds(1, 8 * len(counts))
    out, m = curate(_pool(counts, b), b, 8, seed=seed)
    assert max(m.bin_counts) - min(m.bin_counts) <= 1
    assert all(b.contains(s.wc) for s in out)


def test_subsample_by_bin_keeps_fraction():
    samples, _ = gen_task(400, B64, VOCAB, seed=2)
    half = subsample_by_bin(samples, 0.5, B64, 8, seed=0)
    assert len(half) == 200
    assert subsample_by_bin(samples, 1.0, B64, 8, 0) == samples
    with pytest.raises(ValueError):
        subsample_by_bin(samples, 0, B64, 8, 0)


def test_jsonl_round_trip(tmp_path):
    samples, _ = gen_task(30, B64, VOCAB, seed=3)
    p = tmp_path / "d.jsonl"
    write_jsonl(samples, p)
    assert read_jsonl(p) == samples


def test_jsonl_empty_file(tmp_path):
    p = tmp_path / "e.jsonl"
    p.write_text("")
    assert read_jsonl(p) == []


@pytest.mark.parametrize("bad, msg", [
    ('{"instruction_ids": [3], "answer_ids": [1]}', "word_count"),
    ("{not json", "malformed"),
    ('{"instruction_ids": [3], "answer_ids": ["x"], "word_count": 1}', "answer_ids"),
    ('[1, 2]', "object"),
])
def test_jsonl_schema_errors(tmp_path, bad, msg):
    p = tmp_path / "bad.jsonl"
    good = '{"instruction_ids": [3], "answer_ids": [1], "word_count": 0}'
    p.write_text(good + "\n" + good + "\n" + bad + "\n")
    with pytest.raises(SchemaError) as ei:
        read_jsonl(p)
    assert ei.value.line == 3 and msg in str(ei.value)
