"""Masking plans for spectrogram frames and token sequences.

Frame masking draws spans: pick a uniformly random unmasked position, mask
forward up to span_len frames, stopping early at the sequence end or at an
already-masked frame, and repeat until the masked fraction reaches the target
ratio (or everything is masked). Every drawn span therefore has length in
[1, span_len], the plan is reproducible from its seed, and ratio 0 or 1 gives
exactly none or all positions.

Token masking is per-position Bernoulli at the same target ratio.

Plans only decide positions. Substitution happens at model-input time: masked
frames are replaced by a learned feature-space vector, masked token embeddings
by a learned embedding-space vector (see substitute_rows).
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError
from .numerics import Tensor, add, as_tensor, mul, reshape


@dataclass
class MaskPlan:
    indicator: np.ndarray
    ratio: float
    seed: int
    spans: list = field(default_factory=list)

    @property
    def count(self):
        return int(self.indicator.sum())

    @property
    def fraction(self):
        n = self.indicator.size
        return self.count / n if n else 0.0


def mask_span(length, ratio, span_len, seed):
    """Span plan over `length` positions targeting a masked fraction `ratio`."""
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"mask_span: ratio {ratio} outside [0, 1]")
    if span_len < 1:
        raise ValueError(f"mask_span: span_len {span_len} must be positive")
    indicator = np.zeros(length, dtype=bool)
    spans = []
    if length == 0 or ratio == 0.0:
        return MaskPlan(indicator, ratio, seed, spans)
    rng = np.random.default_rng(seed)
    masked = 0
    while masked / length < ratio:
        free = np.flatnonzero(~indicator)
        if free.size == 0:
            break
        start = int(free[rng.integers(free.size)])
        stop = start
        while stop < length and stop - start < span_len and not indicator[stop]:
            stop += 1
        indicator[start:stop] = True
        masked += stop - start
        spans.append((start, stop))
    return MaskPlan(indicator, ratio, seed, spans)


def mask_tokens(length, ratio, seed):
    """Independent Bernoulli(ratio) plan over `length` token positions."""
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"mask_tokens: ratio {ratio} outside [0, 1]")
    rng = np.random.default_rng(seed)
    indicator = rng.random(length) < ratio
    return MaskPlan(indicator, ratio, seed, [])


def substitute_rows(rows, indicator, learned):
    """Replace the indicated rows of (N, d) with a learned (d,) vector.

    `rows` may be a Tensor or array; the result is a Tensor whose gradient
    flows to `learned` only through the masked rows (and to `rows`, if it is a
    differentiable Tensor, only through the kept rows).
    """
    rows = as_tensor(rows)
    n, d = rows.shape
    indicator = np.asarray(indicator, dtype=bool)
    if indicator.shape != (n,):
        raise ShapeError("substitute_rows", rows.shape, indicator.shape)
    if learned.shape != (d,):
        raise ShapeError("substitute_rows", learned.shape, (d,))
    m = indicator.astype(rows.dtype)[:, None]
    keep = mul(rows, Tensor(1.0 - m))
    fill = mul(reshape(learned, (1, d)), Tensor(m))
    return add(keep, fill)
