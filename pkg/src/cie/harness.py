"""Pipeline commands: data generation, training, evaluation, target sweeps,
win-rate pairing and report tables.

Each ``cmd_*`` function is the programmatic twin of a CLI subcommand and
returns the paths it wrote (or the computed tally).
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import torch

from .baselines import (
    CIEMethod,
    DiscreteLengthVocab,
    DiscreteMethod,
    PROMPT_IDS,
    PromptMethod,
    best_of_prompts,
    make_method,
    n_length_tokens,
)
from .checkpoint import load_checkpoint, load_train_state, save_checkpoint, save_train_state
from .config import RunConfig
from .errors import CIEError, DivergenceError, SchemaError
from .metrics import (
    METRIC_ORDER,
    aggregate,
    bucket_csv,
    bucket_stats,
    calibration,
    group_by_target,
    judge,
    metrics_csv,
    report_rows,
)
from .model import ControlTransformer, GenerationResult, greedy_decode
from .synthdata import (
    Sample,
    default_excluded,
    gen_task,
    make_instruction,
    make_sample,
    read_jsonl,
    subsample_by_bin,
    write_jsonl,
    write_manifest,
    DatasetManifest,
)
from .training import LossReport, TrainState, loss_trace_csv, train

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "range", "heldout")
CHECKPOINT = "checkpoint.ckpt"
TRAIN_STATE = "train_state.ckpt"


class DataError(CIEError):
    """Missing, colliding or inconsistent input files."""


def _write(path: Path, data, force: bool = True):
    if path.exists() and not force:
        raise DataError(f"{path} exists (use --force to overwrite)")
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, bytes):
        path.write_bytes(data)
    else:
        path.write_text(data, encoding="utf-8")


# -- gen-data ---------------------------------------------------------------

def range_grid(cfg: RunConfig) -> list[int]:
    """Evenly spaced targets ``step, 2*step, ..., c_upper``.

    The count is ``range_targets`` if set, otherwise the largest n <= 10 that
    divides ``c_upper`` (10 targets for an upper bound of 200, 8 for 64).
    """
    upper = int(cfg.c_upper)
    n = cfg.range_targets or max(k for k in range(1, 11) if upper % k == 0)
    step = upper / n
    return [int(round(step * (i + 1))) for i in range(n)]


def _fresh_instructions(n: int, rng: random.Random, cfg: RunConfig, avoid: set) -> list[list[int]]:
    out = []
    seen = set(avoid)
    while len(out) < n:
        inst = make_instruction(rng, cfg.vocab)
        key = tuple(inst)
        if key in seen:
            continue
        seen.add(key)
        out.append(inst)
    return out


def build_splits(cfg: RunConfig) -> dict:
    """All four splits plus their manifests, deterministic in ``cfg.seed``."""
    bounds, vocab = cfg.bounds, cfg.vocab
    excluded = default_excluded(bounds, cfg.exclude_every)
    train, m_train = gen_task(cfg.n_train, bounds, vocab, cfg.seed, cfg.bin_size, exclude=excluded, split="train")
    seen = {tuple(s.instruction) for s in train}
    rng = random.Random(cfg.seed + 7919)

    val_inst = _fresh_instructions(cfg.n_val, rng, cfg, seen)
    val_draw, m_val = gen_task(cfg.n_val, bounds, vocab, cfg.seed + 1, cfg.bin_size, split="val")
    val = [make_sample(inst, s.wc, vocab) for inst, s in zip(val_inst, val_draw)]
    seen |= {tuple(i) for i in val_inst}

    grid = range_grid(cfg)
    range_inst = val_inst[: cfg.n_range_instructions]
    rng_split = [make_sample(inst, t, vocab) for inst in range_inst for t in grid]
    m_range = DatasetManifest(cfg.bin_size, [], bounds.to_dict(), cfg.seed, "range",
                              extra={"targets": grid, "instructions": len(range_inst),
                                     "grid_rule": "step = c_upper / n_targets"})

    held_inst = _fresh_instructions(cfg.n_heldout_instructions, rng, cfg, seen)
    held = [make_sample(inst, t, vocab) for inst in held_inst for t in excluded]
    m_held = DatasetManifest(cfg.bin_size, [], bounds.to_dict(), cfg.seed, "heldout",
                             excluded_lengths=excluded, extra={"instructions": len(held_inst)})
    m_train.excluded_lengths = excluded
    return {
        "train": (train, m_train), "val": (val, m_val),
        "range": (rng_split, m_range), "heldout": (held, m_held),
    }


def cmd_gen_data(cfg: RunConfig, out: Path, force: bool = False) -> list[Path]:
    out = Path(out)
    splits = build_splits(cfg)
    written = []
    if not force:
        for name in splits:
            for p in (out / f"{name}.jsonl", out / f"{name}.manifest.json"):
                if p.exists():
                    raise DataError(f"{p} exists (use --force to overwrite)")
    for name, (samples, manifest) in splits.items():
        manifest.extra.update(config_hash=cfg.hash(), seed=cfg.seed)
        out.mkdir(parents=True, exist_ok=True)
        write_jsonl(samples, out / f"{name}.jsonl")
        write_manifest(manifest, out / f"{name}.manifest.json")
        written += [out / f"{name}.jsonl", out / f"{name}.manifest.json"]
    _write(out / "config.txt", cfg.to_text())
    return written


def load_split(data_dir: Path, split: str, cfg: RunConfig) -> list[Sample]:
    path = Path(data_dir) / f"{split}.jsonl"
    if not path.exists():
        raise DataError(f"split file {path} not found (run gen-data first)")
    samples = read_jsonl(path)
    V = cfg.vocab_size
    for i, s in enumerate(samples, 1):
        if any(t < 0 or t >= V for t in s.instruction) or any(t < 0 or t >= V for t in s.answer):
            raise DataError(f"{path}: line {i} has token ids outside vocabulary of {V}")
    return samples


# -- train ------------------------------------------------------------------

def build_model(cfg: RunConfig, baseline: Optional[str] = None) -> ControlTransformer:
    baseline = baseline or cfg.baseline
    mc = cfg.model_config(n_length_tokens(baseline, cfg.bounds, cfg.bucket_width))
    return ControlTransformer(mc, seed=cfg.seed)


def training_set(cfg: RunConfig, data_dir: Path) -> list[Sample]:
    samples = load_split(data_dir, "train", cfg)
    return subsample_by_bin(samples, cfg.fraction, cfg.bounds, cfg.bin_size, cfg.seed)


def _meta(cfg: RunConfig, **extra) -> dict:
    d = {"seed": cfg.seed, "config_hash": cfg.hash(), "baseline": cfg.baseline, "fraction": cfg.fraction,
         "run_config": cfg.to_dict()}
    d.update(extra)
    return d


def cmd_train(cfg: RunConfig, out: Path, data_dir: Optional[Path] = None, resume: bool = False) -> list[Path]:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    data_dir = Path(data_dir or cfg.data_dir)
    dataset = training_set(cfg, data_dir)
    lengths = sorted({s.wc for s in dataset})
    meta = _meta(cfg, training_lengths=lengths, n_samples=len(dataset))
    tc = cfg.train_config()

    model = build_model(cfg)
    state = None
    prior_reports = []
    if resume and (out / TRAIN_STATE).exists():
        model, _, _, m, epoch, step, opt_state = load_train_state((out / TRAIN_STATE).read_bytes())
        if m.get("config_hash") != cfg.hash():
            raise DataError("training state was produced by a different config")
        state = TrainState(epoch, step, opt_state)
        prior_reports = m.get("reports", [])

    method = make_method(cfg.baseline, cfg.bounds, model.config, cfg.vocab, cfg.bucket_width, lengths)

    def on_epoch_end(m, st: TrainState, reports):
        rep = prior_reports + [r.__dict__ for r in reports]
        (out / CHECKPOINT).write_bytes(save_checkpoint(m, m.config, cfg.bounds, meta))
        (out / TRAIN_STATE).write_bytes(
            save_train_state(m, m.config, cfg.bounds, st.epoch, st.step, st.optimizer, dict(meta, reports=rep)))

    try:
        model, reports = train(model, dataset, tc, method, state=state, on_epoch_end=on_epoch_end)
    except DivergenceError:
        log.error("training diverged; last good checkpoint kept at %s", out / CHECKPOINT)
        raise
    if cfg.epochs == 0 or not (out / CHECKPOINT).exists():
        (out / CHECKPOINT).write_bytes(save_checkpoint(model, model.config, cfg.bounds, meta))
    all_reports = [LossReport(**r) for r in prior_reports] + reports
    (out / "loss.csv").write_text(loss_trace_csv(all_reports, cfg.seed, cfg.hash()), encoding="utf-8")
    return [out / CHECKPOINT, out / "loss.csv"]


# -- generators -------------------------------------------------------------

# A generator maps (instructions, targets) to one GenerationResult each.
Generator = Callable[[Sequence[Sequence[int]], Sequence[float]], list]


def model_generator(model: ControlTransformer, method, cfg: RunConfig) -> Generator:
    word_ids = set(cfg.vocab.word_token_ids)

    def run(instructions, targets):
        prompts, positions, keys = [], [], []
        for i, (inst, t) in enumerate(zip(instructions, targets)):
            ids, pos, key = method.prepare(inst, t, i)
            prompts.append(ids)
            positions.append(pos)
            keys.append(key)
        with torch.no_grad():
            rows = method.rows(model, keys)
        if rows is None:
            positions = None
        return greedy_decode(model, prompts, positions, rows, cfg.decode_limit, word_ids)

    return run


def oracle_generator(offset: int = 0, vocab=None) -> Generator:
    """Test stub: emits exactly ``target + offset`` words then eos."""

    def run(instructions, targets):
        out = []
        for t in targets:
            n = max(0, int(t) + offset)
            out.append(GenerationResult([23] * n + [1], n, True))
        return out

    return run


def constant_generator(length: int) -> Generator:
    def run(instructions, targets):
        return [GenerationResult([23] * length + [1], length, True) for _ in targets]

    return run


def eval_methods(cfg: RunConfig, baseline: str, model: ControlTransformer, meta: dict) -> dict:
    """Named generators needed to evaluate ``baseline`` (several for ``best``)."""
    if baseline == "cie":
        return {"cie": model_generator(model, CIEMethod(cfg.bounds, model.config), cfg)}
    if baseline == "discrete":
        dlv = DiscreteLengthVocab(cfg.bounds, cfg.bucket_width)
        if meta.get("training_lengths"):
            dlv = dlv.with_training_lengths(meta["training_lengths"])
        return {"discrete": model_generator(model, DiscreteMethod(dlv, model.config), cfg)}
    if baseline in ("prompt1", "prompt2", "prompt3"):
        return {baseline: model_generator(model, PromptMethod(int(baseline[-1]), cfg.vocab), cfg)}
    if baseline == "best":
        return {f"prompt{t}": model_generator(model, PromptMethod(t, cfg.vocab), cfg) for t in PROMPT_IDS}
    raise DataError(f"unknown baseline {baseline!r}")


@dataclass
class EvalOutput:
    method: str
    results: list
    judgments: list


def evaluate(samples: Sequence[Sample], generators: dict, cfg: RunConfig) -> list[EvalOutput]:
    instructions = [s.instruction for s in samples]
    targets = [s.wc for s in samples]
    outs = []
    for name, gen in generators.items():
        res = gen(instructions, targets)
        outs.append(EvalOutput(name, res, [judge(int(t), r.realized_length) for t, r in zip(targets, res)]))
    prompt_outs = [o for o in outs if o.method.startswith("prompt")]
    if len(prompt_outs) == len(PROMPT_IDS):
        chosen = []
        for i, t in enumerate(targets):
            cands = {int(o.method[-1]): o.results[i] for o in prompt_outs}
            tid, res = best_of_prompts(cands, t)
            res = GenerationResult(res.ids, res.realized_length, res.terminated, {"template": tid})
            chosen.append(res)
        outs.append(EvalOutput("best", chosen, [judge(int(t), r.realized_length) for t, r in zip(targets, chosen)]))
    return outs


def _judgment_lines(samples, out: EvalOutput, split: str, cfg: RunConfig) -> str:
    buf = io.StringIO()
    vocab = cfg.vocab
    for i, (s, r, j) in enumerate(zip(samples, out.results, out.judgments)):
        rec = {
            "id": i, "method": out.method, "split": split,
            "instruction": vocab.decode(s.instruction), "output": vocab.decode(r.ids),
            "output_ids": r.ids, "terminated": r.terminated,
            "seed": cfg.seed, "config_hash": cfg.hash(),
        }
        rec.update(j.to_dict())
        if r.meta:
            rec["meta"] = r.meta
        buf.write(json.dumps(rec, sort_keys=True, separators=(",", ":")) + "\n")
    return buf.getvalue()


def load_run(checkpoint: Path, cfg: RunConfig):
    try:
        data = Path(checkpoint).read_bytes()
    except FileNotFoundError:
        raise DataError(f"checkpoint {checkpoint} not found") from None
    model, mc, bounds, meta = load_checkpoint(data)
    if mc.vocab_size != cfg.vocab_size:
        raise DataError(f"checkpoint vocab_size {mc.vocab_size} != config vocab_size {cfg.vocab_size}")
    if bounds != cfg.bounds:
        raise DataError(f"checkpoint bounds {bounds} != config bounds {cfg.bounds}")
    return model, meta


def cmd_eval(cfg: RunConfig, checkpoint: Optional[Path], split: str, out: Path,
             data_dir: Optional[Path] = None, baseline: Optional[str] = None,
             generators: Optional[dict] = None) -> list[Path]:
    """Per-sample judgments JSONL plus aggregate metrics CSV.

    ``generators`` bypasses the checkpoint (stubs in tests).
    """
    out = Path(out)
    samples = load_split(Path(data_dir or cfg.data_dir), split, cfg)
    if generators is None:
        model, meta = load_run(checkpoint, cfg)
        baseline = baseline or meta.get("baseline", cfg.baseline)
        generators = eval_methods(cfg, baseline, model, meta)
    outs = evaluate(samples, generators, cfg)
    rows = []
    written = []
    for o in outs:
        p = out / f"judgments_{split}_{o.method}.jsonl"
        _write(p, _judgment_lines(samples, o, split, cfg))
        written.append(p)
        rows += report_rows(o.method, split, aggregate(o.judgments))
    tag = baseline or "+".join(generators)
    p = out / f"metrics_{split}_{tag}.csv"
    _write(p, metrics_csv(rows, cfg.seed, cfg.hash()))
    return [p] + written


# -- sweep ------------------------------------------------------------------

def cmd_sweep(cfg: RunConfig, checkpoint: Optional[Path], out: Path, data_dir: Optional[Path] = None,
              baseline: Optional[str] = None, generators: Optional[dict] = None) -> dict:
    """Per-target box statistics on the range split for each evaluated method.

    Returns ``{method: (summaries, spearman)}``.
    """
    out = Path(out)
    samples = load_split(Path(data_dir or cfg.data_dir), "range", cfg)
    if generators is None:
        model, meta = load_run(checkpoint, cfg)
        baseline = baseline or meta.get("baseline", cfg.baseline)
        generators = eval_methods(cfg, baseline, model, meta)
    result = {}
    for o in evaluate(samples, generators, cfg):
        summaries = bucket_stats(group_by_target(o.judgments))
        rho = calibration(summaries)
        _write(out / f"sweep_{o.method}.csv", bucket_csv(summaries, cfg.seed, cfg.hash(), {"spearman": f"{rho:.6f}"}))
        result[o.method] = (summaries, rho)
    return result


# -- grids ------------------------------------------------------------------

def _metric(path: Path, method: str, metric: str) -> float:
    for m, _, name, value in read_metrics_csv(path):
        if m == method and name == metric:
            return value
    raise DataError(f"{path} has no {method}/{metric} row")


def cmd_grid(cfg: RunConfig, out: Path, data_dir: Optional[Path] = None,
             epochs: Sequence[int] = (12, 24), lrs: Sequence[float] = (1e-3, 3e-3),
             split: str = "val") -> list[dict]:
    """Train one model per (epochs, lr) pair and score each on ``split``.

    Each run lives in ``out/e{epochs}_lr{lr}``; ``out/grid.csv`` collects the
    final training loss and the CPR columns.
    """
    out = Path(out)
    rows = []
    for e in epochs:
        for lr in lrs:
            run_cfg = cfg.override(epochs=e, lr=lr)
            run_dir = out / f"e{e}_lr{lr:g}"
            cmd_train(run_cfg, run_dir, data_dir)
            metrics_path = cmd_eval(run_cfg, run_dir / CHECKPOINT, split, run_dir, data_dir)[0]
            method = "best" if run_cfg.baseline == "best" else run_cfg.baseline
            row = {"epochs": e, "lr": lr, "final_loss": _last_loss(run_dir / "loss.csv")}
            for metric in METRIC_ORDER:
                row[metric] = _metric(metrics_path, method, metric)
            rows.append(row)
    _write(out / "grid.csv", _table_csv(rows, cfg))
    return rows


def cmd_scaling(cfg: RunConfig, out: Path, data_dir: Optional[Path] = None,
                fractions: Sequence[float] = (0.25, 0.5, 0.75, 1.0),
                baselines: Sequence[str] = ("cie", "discrete"), split: str = "heldout") -> list[dict]:
    """Data-fraction runs: every baseline at every fraction from the same seed,
    scored on ``split``; summary in ``out/scaling.csv``."""
    out = Path(out)
    rows = []
    for frac in fractions:
        for baseline in baselines:
            run_cfg = cfg.override(fraction=frac, baseline=baseline)
            run_dir = out / f"{baseline}_f{frac:g}"
            if not is_complete(run_dir, run_cfg):
                cmd_train(run_cfg, run_dir, data_dir)
            metrics_path = cmd_eval(run_cfg, run_dir / CHECKPOINT, split, run_dir, data_dir)[0]
            method = "best" if baseline == "best" else baseline
            row = {"fraction": frac, "baseline": baseline}
            for metric in METRIC_ORDER:
                row[metric] = _metric(metrics_path, method, metric)
            rows.append(row)
    _write(out / "scaling.csv", _table_csv(rows, cfg))
    return rows


def is_complete(run_dir: Path, cfg: RunConfig) -> bool:
    """True when ``run_dir`` holds a finished run of exactly ``cfg``."""
    ckpt, trace = Path(run_dir) / CHECKPOINT, Path(run_dir) / "loss.csv"
    if not (ckpt.exists() and trace.exists()):
        return False
    try:
        _, _, _, meta = load_checkpoint(ckpt.read_bytes())
    except CIEError:
        return False
    return meta.get("config_hash") == cfg.hash()


def _last_loss(path: Path) -> float:
    rows = [r for r in Path(path).read_text(encoding="utf-8").splitlines() if r and not r.startswith("#")]
    return float(rows[-1].split(",")[1]) if len(rows) > 1 else float("nan")


def _table_csv(rows: list[dict], cfg: RunConfig) -> str:
    buf = io.StringIO()
    buf.write(f"# seed={cfg.seed} config_hash={cfg.hash()}\n")
    if rows:
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.4f}" if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


# -- win rate ---------------------------------------------------------------

JUDGE_TEMPLATE = (
    "Please act as an impartial judge and evaluate the quality of the responses provided by two AI "
    "assistants to the user question displayed below. Your evaluation should consider factors such as the "
    "helpfulness, relevance, accuracy, depth, creativity, and level of detail of their responses.\n"
    "\n"
    "Begin your evaluation by comparing the two responses and provide a short explanation. Avoid any "
    "position biases and ensure that the order in which the responses were presented does not influence "
    "your decision. Do not allow the length of the responses to influence your evaluation. Do not favor "
    "certain names of the assistants.\n"
    "\n"
    "IMPORTANT: If both assistants provide reasonably adequate answers that address the user's question - "
    "even if one might be slightly better in some aspects - you should declare a tie. Only declare a clear "
    "winner when one response is substantially superior to the other.\n"
    "\n"
    "Be as objective as possible. Provide a justification for your selection. Your response must end in "
    "the format \"Therefore the winner is ...\" and output your final verdict by strictly following this "
    "format: \"[[A]]\" if assistant A is better, \"[[B]]\" if assistant B is better, and \"[[C]]\" for a tie.\n"
    "\n"
    "Question: {prompt}\n"
    "\n"
    "Answer A: {answer_a}\n"
    "\n"
    "Answer B: {answer_b}"
)


def render_judge_prompt(question: str, first: str, second: str) -> str:
    return JUDGE_TEMPLATE.format(prompt=question, answer_a=first, answer_b=second)


def parse_verdict(text: str) -> str:
    """Map a judge reply to "A", "B" or "tie" using the last bracketed verdict."""
    marks = [(text.rfind(m), v) for m, v in (("[[A]]", "A"), ("[[B]]", "B"), ("[[C]]", "tie"))]
    pos, verdict = max(marks)
    return verdict if pos >= 0 else "tie"


def judge_first(question, first, second) -> str:
    return "A"


def judge_tie(question, first, second) -> str:
    return "tie"


def judge_heuristic(question, first, second) -> str:
    """Deterministic stub: prefers the reply reusing more distinct question words."""
    q = set(question.split())

    def score(ans):
        return len(q & set(ans.split()))

    a, b = score(first), score(second)
    return "A" if a > b else "B" if b > a else "tie"


JUDGES = {"first": judge_first, "tie": judge_tie, "heuristic": judge_heuristic}


@dataclass
class WinRatePair:
    instruction_id: int
    output_a: str
    output_b: str
    swapped: bool
    verdict: str  # "A", "B" or "tie" against true identities


def _read_outputs(path: Path) -> dict:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                out[rec["id"]] = rec
            except (json.JSONDecodeError, KeyError, TypeError):
                raise SchemaError("expected a JSON record with an 'id' field", lineno, path) from None
    return out


def winrate(outputs_a: dict, outputs_b: dict, judge_fn, seed: int = 0) -> tuple[dict, list[WinRatePair], list[str]]:
    """Tally {win, tie, loss} of A against B.

    The presentation order is drawn per pair from ``seed``; verdicts about the
    presentation slots are mapped back to the true identities. Pair order
    follows sorted instruction ids, so the draw for a pair is independent of
    file order.
    """
    missing_a = sorted(set(outputs_b) - set(outputs_a))
    missing_b = sorted(set(outputs_a) - set(outputs_b))
    if missing_a or missing_b:
        raise DataError(f"misaligned outputs: missing in A {missing_a}, missing in B {missing_b}")
    rng = random.Random(seed)
    tally = {"win": 0, "tie": 0, "loss": 0}
    pairs, prompts = [], []
    for iid in sorted(outputs_a):
        a, b = outputs_a[iid], outputs_b[iid]
        question = a.get("instruction", "")
        swapped = rng.random() < 0.5
        first, second = (b["output"], a["output"]) if swapped else (a["output"], b["output"])
        prompts.append(render_judge_prompt(question, first, second))
        slot = judge_fn(question, first, second)
        if slot not in ("A", "B", "tie"):
            raise DataError(f"judge returned {slot!r}; expected 'A', 'B' or 'tie'")
        if slot == "tie":
            verdict = "tie"
        else:
            first_is_a = not swapped
            verdict = "A" if (slot == "A") == first_is_a else "B"
        tally[{"A": "win", "B": "loss", "tie": "tie"}[verdict]] += 1
        pairs.append(WinRatePair(iid, a["output"], b["output"], swapped, verdict))
    return tally, pairs, prompts


def cmd_winrate(outputs_a: Path, outputs_b: Path, judge_fn, out: Path, seed: int = 0) -> dict:
    a, b = _read_outputs(Path(outputs_a)), _read_outputs(Path(outputs_b))
    tally, pairs, prompts = winrate(a, b, judge_fn, seed)
    out = Path(out)
    _write(out / "winrate.json", json.dumps(dict(tally, seed=seed, pairs=len(pairs)), sort_keys=True, indent=2) + "\n")
    _write(out / "winrate_pairs.jsonl", "".join(json.dumps(p.__dict__, sort_keys=True) + "\n" for p in pairs))
    _write(out / "judge_prompts.txt", "\n\n=====\n\n".join(prompts) + "\n")
    return tally


# -- report -----------------------------------------------------------------

def read_metrics_csv(path: Path) -> list[tuple[str, str, str, float]]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        lines = list(fh)
    header_seen = False
    for lineno, line in enumerate(lines, 1):
        if line.startswith("#") or not line.strip():
            continue
        fields_ = next(csv.reader([line]))
        if not header_seen:
            if fields_ != ["method", "split", "metric", "value"]:
                raise SchemaError(f"unexpected header {fields_}", lineno, path)
            header_seen = True
            continue
        if len(fields_) != 4:
            raise SchemaError(f"expected 4 columns, got {len(fields_)}", lineno, path)
        try:
            value = float(fields_[3])
        except ValueError:
            raise SchemaError(f"non-numeric value {fields_[3]!r}", lineno, path) from None
        rows.append((fields_[0], fields_[1], fields_[2], value))
    if not header_seen:
        raise SchemaError("missing header", None, path)
    return rows


def cmd_report(run_dir: Path, out: Optional[Path] = None) -> tuple[str, list[str]]:
    """Method x metric tables per split; with CIE present, one delta column per
    other method (CIE minus that method). Returns (markdown, problems)."""
    run_dir = Path(run_dir)
    out = Path(out or run_dir)
    table: dict = {}
    problems = []
    files = sorted(run_dir.rglob("metrics_*.csv"))
    if not files:
        problems.append(f"no metrics_*.csv under {run_dir}")
    for f in files:
        for method, split, metric, value in read_metrics_csv(f):
            table.setdefault(split, {}).setdefault(method, {})[metric] = value
    md = io.StringIO()
    flat = io.StringIO()
    w = csv.writer(flat, lineterminator="\n")
    w.writerow(["split", "metric", "method", "value"])
    for split in sorted(table):
        methods = sorted(table[split], key=lambda m: (m == "cie", m))
        others = [m for m in methods if m != "cie"]
        deltas = others if "cie" in methods else []
        cols = methods + [f"Δ cie−{m}" for m in deltas]
        md.write(f"### {split}\n\n| metric | " + " | ".join(cols) + " |\n")
        md.write("|---" * (len(cols) + 1) + "|\n")
        metrics = [m for m in METRIC_ORDER if any(m in table[split][x] for x in methods)]
        for metric in metrics:
            cells = []
            for m in methods:
                v = table[split][m].get(metric)
                if v is None:
                    problems.append(f"{split}/{m}: missing {metric}")
                cells.append("—" if v is None else f"{v:.2f}")
                if v is not None:
                    w.writerow([split, metric, m, f"{v:.2f}"])
            for m in deltas:
                a, b = table[split]["cie"].get(metric), table[split][m].get(metric)
                if a is None or b is None:
                    cells.append("—")
                else:
                    d = a - b
                    cells.append(f"{'▲' if d > 0 else '▼' if d < 0 else '='}{abs(d):.2f}")
                    w.writerow([split, metric, f"delta_cie_minus_{m}", f"{d:.2f}"])
            md.write(f"| {metric} | " + " | ".join(cells) + " |\n")
        md.write("\n")
    if problems:
        md.write("Missing:\n" + "".join(f"- {p}\n" for p in problems))
    text = md.getvalue()
    _write(out / "report.md", text)
    _write(out / "report.csv", flat.getvalue())
    return text, problems
