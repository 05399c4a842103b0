"""Causal-LM fine-tuning with the control injection active, the warmup +
cosine schedule, and finite-difference gradient checks."""

from __future__ import annotations

import copy
import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, fields
from typing import Callable, Optional, Sequence

import torch
import torch.nn.functional as F

from .baselines import Method
from .errors import DivergenceError, InvalidInputError, NumericOverflowError
from .model import ControlTransformer
from .synthdata import Sample

log = logging.getLogger(__name__)

IGNORE = -100


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 3e-3
    epochs: int = 24
    warmup_ratio: float = 0.03
    weight_decay: float = 0.001
    grad_clip_norm: float = 0.3
    batch_size: int = 16
    grad_accum_steps: int = 1
    seed: int = 0
    decay_control: bool = False  # apply weight decay to the control matrix too
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        if not 0 <= self.warmup_ratio < 1:
            raise InvalidInputError("warmup_ratio must be in [0, 1)")
        if self.grad_clip_norm <= 0:
            raise InvalidInputError("grad_clip_norm must be > 0")
        if self.learning_rate <= 0 or self.batch_size < 1 or self.grad_accum_steps < 1 or self.epochs < 0:
            raise InvalidInputError("learning_rate, batch_size, grad_accum_steps must be positive; epochs >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        d = {k: v for k, v in d.items() if k in names}
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)


@dataclass
class LossReport:
    step: int
    loss: float
    grad_norm: float
    lr: float


@dataclass
class Batch:
    ids: torch.Tensor
    targets: torch.Tensor
    control_positions: Optional[torch.Tensor]
    keys: list
    skipped: int = 0


def collate(samples: Sequence[Sample], method: Method, pad_id: int, indices: Optional[Sequence[int]] = None) -> Batch:
    """Right-padded inputs with targets only on answer tokens.

    Target at position t is the token at t+1; instruction, prompt and
    placeholder tokens are never targets.
    """
    rows, targets, positions, keys = [], [], [], []
    skipped = 0
    for j, s in enumerate(samples):
        if not s.answer:
            skipped += 1
            continue
        idx = indices[j] if indices is not None else j
        prefix, pos, key = method.prepare(s.instruction, s.wc, idx)
        full = list(prefix) + list(s.answer)
        tgt = [IGNORE] * (len(prefix) - 1) + list(s.answer) + [IGNORE]
        rows.append(full)
        targets.append(tgt)
        positions.append(pos)
        keys.append(key)
    if skipped:
        log.warning("skipped %d samples with empty answers", skipped)
    if not rows:
        return Batch(torch.zeros(0, 0, dtype=torch.long), torch.zeros(0, 0, dtype=torch.long), None, [], skipped)
    L = max(len(r) for r in rows)
    ids = torch.full((len(rows), L), pad_id, dtype=torch.long)
    tg = torch.full((len(rows), L), IGNORE, dtype=torch.long)
    for i, (r, t) in enumerate(zip(rows, targets)):
        ids[i, : len(r)] = torch.tensor(r)
        tg[i, : len(t)] = torch.tensor(t)
    has_control = any(p >= 0 for p in positions)
    cp = torch.tensor(positions, dtype=torch.long) if has_control else None
    return Batch(ids, tg, cp, keys, skipped)


def batch_logits(model: ControlTransformer, batch: Batch, method: Method) -> torch.Tensor:
    rows = None
    if batch.control_positions is not None:
        rows = method.rows(model, batch.keys)
    return model(batch.ids, batch.control_positions, rows)


def lm_loss(model: ControlTransformer, samples: Sequence[Sample], method: Method,
            indices: Optional[Sequence[int]] = None) -> torch.Tensor:
    """Mean token-level cross-entropy over answer positions; call
    ``.backward()`` on the result for gradients."""
    batch = collate(samples, method, model.config.pad_id, indices)
    if batch.ids.numel() == 0:
        raise InvalidInputError("batch has no usable samples")
    logits = batch_logits(model, batch, method)
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), batch.targets.reshape(-1), ignore_index=IGNORE)


def warmup_steps(total_steps: int, cfg: TrainConfig) -> int:
    return math.ceil(cfg.warmup_ratio * total_steps)


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear warmup from 0, then cosine decay to 0 at ``total_steps``."""
    w = warmup_steps(total_steps, cfg)
    if step < w:
        return cfg.learning_rate * step / w
    if total_steps <= w:
        return cfg.learning_rate
    progress = (step - w) / (total_steps - w)
    return cfg.learning_rate * 0.5 * (1.0 + math.cos(math.pi * min(progress, 1.0)))


def param_groups(model: ControlTransformer, cfg: TrainConfig) -> list[dict]:
    """Decay matrix weights (incl. embedding tables); never norms or biases.
    The control matrix decays only if ``cfg.decay_control``."""
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        if name == "control_embedding":
            (decay if cfg.decay_control else no_decay).append(p)
        elif p.dim() >= 2:
            decay.append(p)
        else:
            no_decay.append(p)
    return [
        {"params": decay, "weight_decay": cfg.weight_decay},
        {"params": no_decay, "weight_decay": 0.0},
    ]


def make_optimizer(model: ControlTransformer, cfg: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(param_groups(model, cfg), lr=0.0, betas=cfg.betas, eps=cfg.eps)


def total_steps_for(n_samples: int, cfg: TrainConfig) -> int:
    micro = math.ceil(n_samples / cfg.batch_size)
    return cfg.epochs * math.ceil(micro / cfg.grad_accum_steps)


def global_grad_norm(params) -> float:
    norms = [p.grad.detach().norm() for p in params if p.grad is not None]
    if not norms:
        return 0.0
    return float(torch.linalg.vector_norm(torch.stack(norms)))


@dataclass
class TrainState:
    """Everything needed to continue a run at an epoch boundary."""

    epoch: int
    step: int
    optimizer: Optional[dict] = None


def train(
    model: ControlTransformer,
    dataset: Sequence[Sample],
    cfg: TrainConfig,
    method: Method,
    state: Optional[TrainState] = None,
    on_epoch_end: Optional[Callable[[ControlTransformer, TrainState, list], None]] = None,
    max_epochs: Optional[int] = None,
) -> tuple[ControlTransformer, list[LossReport]]:
    """Run (or continue) training; deterministic given ``cfg.seed``.

    ``on_epoch_end`` is called with a snapshot-able state after each full
    epoch; the caller persists checkpoints from there. A non-finite loss or
    activation raises ``DivergenceError`` before the optimizer step, so the
    last persisted checkpoint stays valid.
    """
    torch.manual_seed(cfg.seed)
    reports: list[LossReport] = []
    if cfg.epochs == 0 or not dataset:
        return model, reports
    opt = make_optimizer(model, cfg)
    start_epoch, step = 0, 0
    if state is not None:
        start_epoch, step = state.epoch, state.step
        if state.optimizer is not None:
            opt.load_state_dict(state.optimizer)
    total = total_steps_for(len(dataset), cfg)
    params = [p for g in opt.param_groups for p in g["params"]]
    n = len(dataset)
    model.train()
    last_epoch = cfg.epochs if max_epochs is None else min(cfg.epochs, start_epoch + max_epochs)
    for epoch in range(start_epoch, last_epoch):
        g = torch.Generator().manual_seed(cfg.seed * 1_000_003 + epoch)
        order = torch.randperm(n, generator=g).tolist()
        micro = [order[i: i + cfg.batch_size] for i in range(0, n, cfg.batch_size)]
        for k in range(0, len(micro), cfg.grad_accum_steps):
            group = micro[k: k + cfg.grad_accum_steps]
            lr = lr_at(step, total, cfg)
            for pg in opt.param_groups:
                pg["lr"] = lr
            opt.zero_grad(set_to_none=True)
            n_tok = 0
            loss_sum = 0.0
            for idx in group:
                batch = collate([dataset[i] for i in idx], method, model.config.pad_id, idx)
                if batch.ids.numel() == 0:
                    continue
                try:
                    logits = batch_logits(model, batch, method)
                except NumericOverflowError as e:
                    raise DivergenceError(f"non-finite activations at step {step} (epoch {epoch}): {e}") from e
                tgt = batch.targets.reshape(-1)
                count = int((tgt != IGNORE).sum())
                loss = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), tgt, ignore_index=IGNORE, reduction="sum")
                loss_sum += float(loss.detach())
                n_tok += count
                loss.backward()
            if n_tok == 0:
                continue
            for p in params:
                if p.grad is not None:
                    p.grad.div_(n_tok)
            mean_loss = loss_sum / n_tok
            if not math.isfinite(mean_loss):
                raise DivergenceError(f"non-finite loss at step {step} (epoch {epoch})")
            gnorm = float(torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip_norm))
            opt.step()
            reports.append(LossReport(step, mean_loss, gnorm, lr))
            step += 1
        if on_epoch_end is not None:
            on_epoch_end(model, TrainState(epoch + 1, step, opt.state_dict()), reports)
    return model, reports


def loss_trace_csv(reports: Sequence[LossReport], seed: Optional[int] = None, config_hash: Optional[str] = None) -> str:
    buf = io.StringIO()
    if seed is not None:
        buf.write(f"# seed={seed} config_hash={config_hash}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "loss", "grad_norm", "lr"])
    for r in reports:
        w.writerow([r.step, repr(r.loss), repr(r.grad_norm), repr(r.lr)])
    return buf.getvalue()


# -- gradient checks --------------------------------------------------------

def _coordinate_list(model: ControlTransformer, n_random: int, seed: int) -> list[tuple[str, int]]:
    named = dict(model.named_parameters())
    g = torch.Generator().manual_seed(seed)
    D = model.config.d_model
    coords = []
    # always several control-matrix coordinates from each row
    for row in (0, 1):
        for j in torch.randperm(D, generator=g)[:3].tolist():
            coords.append(("control_embedding", row * D + j))
    names = [n for n in named if n != "control_embedding" and n != "length_embedding"]
    sizes = torch.tensor([named[n].numel() for n in names], dtype=torch.float64)
    picks = torch.multinomial(sizes, n_random, replacement=True, generator=g).tolist()
    for pi in picks:
        name = names[pi]
        coords.append((name, int(torch.randint(named[name].numel(), (1,), generator=g))))
    return coords


def grad_check(
    model: ControlTransformer,
    samples: Sequence[Sample],
    method: Method,
    coordinates: Optional[Sequence[tuple[str, int]]] = None,
    n_random: int = 32,
    step: float = 1e-3,
    seed: int = 0,
    loss_fn: Optional[Callable[[], torch.Tensor]] = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Runs in double precision on a copy of ``model``. Relative error is
    ``|a - n| / max(|a| + |n|, 1e-8)``.
    """

    m = copy.deepcopy(model).double()
    named = dict(m.named_parameters())
    coords = list(coordinates) if coordinates is not None else _coordinate_list(m, n_random, seed)

    def closure():
        return loss_fn(m) if loss_fn is not None else lm_loss(m, samples, method)

    m.zero_grad(set_to_none=True)
    closure().backward()
    worst = 0.0
    for name, flat in coords:
        p = named[name]
        analytic = float(p.grad.reshape(-1)[flat]) if p.grad is not None else 0.0
        with torch.no_grad():
            view = p.data.reshape(-1)
            orig = float(view[flat])
            view[flat] = orig + step
            fp = float(closure())
            view[flat] = orig - step
            fm = float(closure())
            view[flat] = orig
        numeric = (fp - fm) / (2 * step)
        err = abs(analytic - numeric) / max(abs(analytic) + abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst
