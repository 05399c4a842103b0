"""Control-value arithmetic: bounds, clamping, interpolation weight and the
interpolated control vector.

Every function here is array-library agnostic: the embedding vectors may be
numpy arrays or torch tensors, anything supporting ``*``, ``+`` and ``.shape``.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass
from typing import Any, Iterable

from .errors import ContractViolation, InvalidInputError, InvalidMatrixError


@dataclass(frozen=True)
class ControlBounds:
    c_lower: float
    c_upper: float

    def __post_init__(self):
        lo, hi = self.c_lower, self.c_upper
        if not (math.isfinite(lo) and math.isfinite(hi)):
            raise InvalidInputError(f"bounds must be finite, got [{lo}, {hi}]")
        if lo < 0:
            raise InvalidInputError(f"length bounds must be non-negative, got c_lower={lo}")
        if not lo < hi:
            raise InvalidInputError(f"need c_lower < c_upper, got [{lo}, {hi}]")

    @property
    def span(self) -> float:
        return self.c_upper - self.c_lower

    def contains(self, c: float) -> bool:
        return self.c_lower <= c <= self.c_upper

    def to_dict(self) -> dict:
        return {"c_lower": self.c_lower, "c_upper": self.c_upper}


@dataclass
class ControlEmbeddingMatrix:
    """The two learned endpoint embeddings (rows of a 2 x D matrix)."""

    e_lower: Any
    e_upper: Any

    def __post_init__(self):
        if tuple(self.e_lower.shape) != tuple(self.e_upper.shape) or len(self.e_lower.shape) != 1:
            raise InvalidMatrixError(
                f"e_lower and e_upper must be vectors of equal length, "
                f"got {tuple(self.e_lower.shape)} and {tuple(self.e_upper.shape)}"
            )

    @property
    def D(self) -> int:
        return int(self.e_lower.shape[0])


class ClampCounter:
    """Thread-safe tally of clamp events that actually moved a value."""

    def __init__(self):
        self._lock = threading.Lock()
        self._n = 0

    def bump(self):
        with self._lock:
            self._n += 1

    @property
    def value(self) -> int:
        return self._n

    def reset(self):
        with self._lock:
            self._n = 0


clamp_events = ClampCounter()


def clamp(c: float, bounds: ControlBounds) -> float:
    if not math.isfinite(c):
        raise InvalidInputError(f"control value must be finite, got {c}")
    out = min(max(c, bounds.c_lower), bounds.c_upper)
    if out != c:
        clamp_events.bump()
    return out


def alpha(c: float, bounds: ControlBounds) -> float:
    """Weight on ``e_lower`` for an already-clamped control value."""
    if not math.isfinite(c) or not bounds.contains(c):
        raise ContractViolation(
            f"alpha() needs c within [{bounds.c_lower}, {bounds.c_upper}], got {c}; clamp first"
        )
    # endpoints are exact so interpolation reproduces e_lower / e_upper bitwise
    if c == bounds.c_lower:
        return 1.0
    if c == bounds.c_upper:
        return 0.0
    return (bounds.c_upper - c) / (bounds.c_upper - bounds.c_lower)


def alphas(values: Iterable[float], bounds: ControlBounds) -> list[float]:
    return [alpha(clamp(float(c), bounds), bounds) for c in values]


def mix(a: float, e_lower, e_upper):
    """``a * e_lower + (1 - a) * e_upper`` with exact endpoints."""
    if a == 1.0:
        return e_lower * 1
    if a == 0.0:
        return e_upper * 1
    return a * e_lower + (1.0 - a) * e_upper


def interpolate(c: float, bounds: ControlBounds, E: ControlEmbeddingMatrix):
    if tuple(E.e_lower.shape) != tuple(E.e_upper.shape):
        raise InvalidMatrixError("e_lower / e_upper dimension mismatch")
    return mix(alpha(clamp(c, bounds), bounds), E.e_lower, E.e_upper)


def interpolation_gradients(a, upstream):
    """Backward pass of :func:`mix`.

    ``a`` may be a scalar, or an array broadcastable against ``upstream``
    (e.g. shape ``(B, 1)`` for a batch of control rows); summing over the batch
    is left to the caller.
    """
    shape = getattr(upstream, "shape", None)
    if shape is None or len(shape) == 0:
        raise InvalidInputError("upstream gradient must be a vector")
    return a * upstream, (1.0 - a) * upstream
