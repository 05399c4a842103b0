"""Tiny decoder-only transformer with a control-embedding injection slot.

The control placeholder is an ordinary vocabulary id appended to the
instruction; before the first block its embedding row is overwritten by the
interpolated control vector (or, for the discrete baseline, by a row of the
length-token table). Sinusoidal positions are added afterwards to every row.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import Iterable, Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .control import (
    ControlBounds,
    ControlEmbeddingMatrix,
    alphas,
    interpolation_gradients,
)
from .errors import ContextOverflowError, InvalidInputError, NumericOverflowError


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 64
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    max_context: int = 256
    control_placeholder_id: int = 2
    eos_id: int = 1
    pad_id: int = 0
    d_ff: int = 0  # 0 -> 4 * d_model
    tie_embeddings: bool = False
    n_length_tokens: int = 0  # rows of the discrete-baseline table; 0 disables it
    init_std: float = 0.02

    def __post_init__(self):
        if min(self.vocab_size, self.d_model, self.n_layers, self.n_heads, self.max_context) <= 0:
            raise InvalidInputError("model dimensions must be positive")
        if self.d_model % self.n_heads:
            raise InvalidInputError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        special = (self.control_placeholder_id, self.eos_id, self.pad_id)
        if len(set(special)) != 3:
            raise InvalidInputError(f"placeholder/eos/pad ids must be distinct, got {special}")
        if any(not 0 <= s < self.vocab_size for s in special):
            raise InvalidInputError(f"special ids {special} outside vocabulary of {self.vocab_size}")

    @property
    def ff_width(self) -> int:
        return self.d_ff or 4 * self.d_model

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class GenerationResult:
    ids: list[int]
    realized_length: int
    terminated: bool
    meta: dict = field(default_factory=dict)


def sinusoidal_positions(n: int, d: int) -> torch.Tensor:
    pos = torch.arange(n, dtype=torch.float64)[:, None]
    i = torch.arange(0, d, 2, dtype=torch.float64)
    angle = pos / torch.pow(10000.0, i / d)
    pe = torch.zeros(n, d, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(angle)
    pe[:, 1::2] = torch.cos(angle[:, : d // 2])
    return pe


class _Interpolate(torch.autograd.Function):
    """Batched ``mix`` whose backward routes through ``interpolation_gradients``."""

    @staticmethod
    def forward(ctx, a, e_lower, e_upper):
        ctx.save_for_backward(a)
        a_col = a[:, None]
        out = a_col * e_lower[None, :] + (1.0 - a_col) * e_upper[None, :]
        # exact endpoint rows, independent of the arithmetic above
        out = torch.where(a_col == 1.0, e_lower[None, :].expand_as(out), out)
        out = torch.where(a_col == 0.0, e_upper[None, :].expand_as(out), out)
        return out

    @staticmethod
    def backward(ctx, grad_out):
        (a,) = ctx.saved_tensors
        g_lower, g_upper = interpolation_gradients(a[:, None], grad_out)
        return None, g_lower.sum(0), g_upper.sum(0)


class CausalSelfAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.proj = nn.Linear(d_model, d_model)

    def forward(self, x):
        B, L, D = x.shape
        h = self.n_heads
        q, k, v = self.qkv(x).split(D, dim=-1)
        q = q.view(B, L, h, D // h).transpose(1, 2)
        k = k.view(B, L, h, D // h).transpose(1, 2)
        v = v.view(B, L, h, D // h).transpose(1, 2)
        att = (q @ k.transpose(-2, -1)) / math.sqrt(D // h)
        mask = torch.ones(L, L, dtype=torch.bool, device=x.device).triu(1)
        att = att.masked_fill(mask, float("-inf")).softmax(dim=-1)
        y = (att @ v).transpose(1, 2).reshape(B, L, D)
        return self.proj(y)


class Block(nn.Module):
    def __init__(self, d_model: int, n_heads: int, d_ff: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(d_model)
        self.attn = CausalSelfAttention(d_model, n_heads)
        self.ln2 = nn.LayerNorm(d_model)
        self.fc1 = nn.Linear(d_model, d_ff)
        self.fc2 = nn.Linear(d_ff, d_model)

    def forward(self, x):
        x = x + self.attn(self.ln1(x))
        return x + self.fc2(F.gelu(self.fc1(self.ln2(x))))


class ControlTransformer(nn.Module):
    """Decoder-only LM plus the 2 x D control matrix (and an optional
    length-token table for the discrete baseline)."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        self.config = config
        D = config.d_model
        self.tok_emb = nn.Embedding(config.vocab_size, D)
        self.blocks = nn.ModuleList(Block(D, config.n_heads, config.ff_width) for _ in range(config.n_layers))
        self.ln_f = nn.LayerNorm(D)
        self.head = None if config.tie_embeddings else nn.Linear(D, config.vocab_size, bias=False)
        self.control_embedding = nn.Parameter(torch.zeros(2, D))
        self.length_embedding = (
            nn.Parameter(torch.zeros(config.n_length_tokens, D)) if config.n_length_tokens else None
        )
        self.register_buffer("pos_enc", sinusoidal_positions(config.max_context, D).float(), persistent=False)
        self.reset_parameters(seed)

    def reset_parameters(self, seed: int):
        std = self.config.init_std
        g = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name in ("control_embedding", "length_embedding"):
                    continue
                if name.endswith(".bias") or ".ln" in name or name.startswith("ln_f"):
                    p.copy_(torch.ones_like(p) if name.endswith(".weight") else torch.zeros_like(p))
                else:
                    p.copy_(torch.randn(p.shape, generator=g, dtype=torch.float64).to(p.dtype) * std)
            # separate streams keep the shared weights identical across
            # conditioning variants built from the same seed
            g_ctrl = torch.Generator().manual_seed(seed + 1_000_003)
            self.control_embedding.copy_(torch.randn(2, self.config.d_model, generator=g_ctrl, dtype=torch.float64) * std)
            if self.length_embedding is not None:
                g_len = torch.Generator().manual_seed(seed + 2_000_003)
                self.length_embedding.copy_(
                    torch.randn(self.length_embedding.shape, generator=g_len, dtype=torch.float64) * std
                )

    # -- control ---------------------------------------------------------
    @property
    def control_matrix(self) -> ControlEmbeddingMatrix:
        return ControlEmbeddingMatrix(self.control_embedding[0], self.control_embedding[1])

    def control_rows(self, values: Sequence[float], bounds: ControlBounds) -> torch.Tensor:
        a = torch.tensor(alphas(values, bounds), dtype=self.control_embedding.dtype)
        return _Interpolate.apply(a, self.control_embedding[0], self.control_embedding[1])

    def length_rows(self, buckets: Sequence[int]) -> torch.Tensor:
        if self.length_embedding is None:
            raise InvalidInputError("model was built without a length-token table")
        return self.length_embedding[torch.as_tensor(list(buckets), dtype=torch.long)]

    # -- forward ---------------------------------------------------------
    def embed(self, ids: torch.Tensor, control_positions=None, rows=None) -> torch.Tensor:
        """Token lookup, control-row replacement, then positional encoding.

        ``control_positions`` holds one index per sequence (-1 for none);
        ``rows`` the matching ``(B, D)`` replacement vectors.
        """
        if ids.dim() == 1:
            ids = ids[None]
        B, L = ids.shape
        if L > self.config.max_context:
            raise ContextOverflowError(f"sequence of {L} exceeds max_context={self.config.max_context}")
        x = self.tok_emb(ids)
        if control_positions is not None:
            pos = torch.as_tensor(control_positions, dtype=torch.long).reshape(B)
            if rows.shape != (B, self.config.d_model):
                raise InvalidInputError(f"control rows must be ({B}, {self.config.d_model}), got {tuple(rows.shape)}")
            if bool((pos >= L).any()):
                raise InvalidInputError("control position beyond sequence end")
            sel = (torch.arange(L)[None, :] == pos[:, None])[:, :, None]
            x = torch.where(sel, rows[:, None, :].to(x.dtype), x)
        return x + self.pos_enc[:L].to(x.dtype)

    def forward_embedded(self, x: torch.Tensor) -> torch.Tensor:
        for i, block in enumerate(self.blocks):
            x = block(x)
            if not bool(torch.isfinite(x).all()):
                raise NumericOverflowError(f"non-finite activations after layer {i}", layer=i)
        x = self.ln_f(x)
        logits = x @ self.tok_emb.weight.T if self.head is None else self.head(x)
        if not bool(torch.isfinite(logits).all()):
            raise NumericOverflowError("non-finite logits", layer=len(self.blocks))
        return logits

    def forward(self, ids, control_positions=None, rows=None):
        return self.forward_embedded(self.embed(ids, control_positions, rows))


def forward(model: ControlTransformer, embedded: torch.Tensor) -> torch.Tensor:
    return model.forward_embedded(embedded)


def build_input(instruction: Sequence[int], config: ModelConfig, room: int = 1) -> tuple[list[int], int]:
    """Append the control placeholder; ``room`` answer slots must still fit."""
    ids = list(instruction)
    if len(ids) + 1 + room > config.max_context:
        raise ContextOverflowError(
            f"instruction of {len(ids)} tokens leaves no room in max_context={config.max_context}"
        )
    ids.append(config.control_placeholder_id)
    return ids, len(ids) - 1


def embed_with_injection(model: ControlTransformer, seq: Sequence[int], control_position: int, e_c) -> torch.Tensor:
    ids = torch.as_tensor(list(seq), dtype=torch.long)
    e_c = torch.as_tensor(e_c)
    if e_c.shape != (model.config.d_model,):
        raise InvalidInputError(f"e_c must have length {model.config.d_model}, got {tuple(e_c.shape)}")
    return model.embed(ids, [control_position], e_c[None])[0]


def count_words(ids: Iterable[int], word_ids: Optional[set], eos_id: int) -> int:
    n = 0
    for t in ids:
        if t == eos_id:
            break
        if word_ids is None or t in word_ids:
            n += 1
    return n


@torch.no_grad()
def greedy_decode(
    model: ControlTransformer,
    prompts: Sequence[Sequence[int]],
    control_positions: Optional[Sequence[int]] = None,
    rows: Optional[torch.Tensor] = None,
    max_new: int = 64,
    word_ids: Optional[set] = None,
    max_batch: int = 64,
) -> list[GenerationResult]:
    """Temperature-0 decoding for a batch of prompts.

    Prompts of equal length are decoded together, at most ``max_batch`` at a
    time; each result lists emitted ids (without the prompt) up to and
    including eos.
    """
    if max_new < 1:
        raise InvalidInputError("max_new must be >= 1")
    if max_batch < 1:
        raise InvalidInputError("max_batch must be >= 1")
    cfg = model.config
    was_training = model.training
    model.eval()
    results: list[Optional[GenerationResult]] = [None] * len(prompts)
    groups: dict[int, list[int]] = {}
    for i, p in enumerate(prompts):
        groups.setdefault(len(p), []).append(i)
    chunks = [(L0, idx[k:k + max_batch]) for L0, idx in sorted(groups.items())
              for k in range(0, len(idx), max_batch)]
    for L0, idx in chunks:
        if L0 > cfg.max_context:
            raise ContextOverflowError(f"prompt of {L0} tokens exceeds max_context={cfg.max_context}")
        seq = torch.tensor([list(prompts[i]) for i in idx], dtype=torch.long)
        pos = None if control_positions is None else torch.tensor([control_positions[i] for i in idx])
        grp_rows = None if rows is None else rows[idx]
        done = torch.zeros(len(idx), dtype=torch.bool)
        steps = 0
        while steps < max_new and not bool(done.all()) and seq.shape[1] < cfg.max_context:
            logits = model(seq, pos, grp_rows)[:, -1, :]
            nxt = logits.argmax(dim=-1)
            nxt = torch.where(done, torch.full_like(nxt, cfg.pad_id), nxt)
            seq = torch.cat([seq, nxt[:, None]], dim=1)
            done |= nxt == cfg.eos_id
            steps += 1
        for row, i in enumerate(idx):
            out = seq[row, L0:].tolist()
            if cfg.eos_id in out:
                out = out[: out.index(cfg.eos_id) + 1]
                terminated = True
            else:
                # max_new reached counts as a normal stop; only a full context does not
                terminated = seq.shape[1] < cfg.max_context
            results[i] = GenerationResult(out, count_words(out, word_ids, cfg.eos_id), terminated)
    model.train(was_training)
    return results  # type: ignore[return-value]


def generate(
    model: ControlTransformer,
    instruction: Sequence[int],
    c: float,
    bounds: ControlBounds,
    max_new: int,
    word_ids: Optional[set] = None,
) -> GenerationResult:
    ids, pos = build_input(instruction, model.config, room=0)
    with torch.no_grad():
        rows = model.control_rows([c], bounds)
    return greedy_decode(model, [ids], [pos], rows, max_new, word_ids)[0]
