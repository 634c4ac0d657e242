"""Self-supervised losses: TS2Vec hierarchical contrast and BYOL cosine loss.

Contrastive inputs are (B, T, d) tensors ``h`` and ``h2`` holding the
projections of two views restricted to their overlap.  For anchor
``h[i, t]`` the positive is ``h2[i, t]``; the instance term contrasts it
against every other sample at the same timestamp, the temporal term
against every other timestamp of the same sample.  Negatives come from
both views, self-similarity excluded.
"""

from __future__ import annotations

import numpy as np

from .. import diffcore as dc
from ..errors import DimensionError


def _check_pair(h: dc.Tensor, h2: dc.Tensor) -> None:
    if h.shape != h2.shape or h.ndim != 3:
        raise DimensionError(f"expected two (B, T, d) projections, got {h.shape} and {h2.shape}")


def _contrast(anchor: dc.Tensor, other: dc.Tensor) -> dc.Tensor:
    """Mean of -log softmax positive over rows grouped along axis 0.

    ``anchor``/``other`` are (G, N, d): N candidates compete within each of
    the G groups, and candidate n's positive is ``other[g, n]``.
    """
    n = anchor.shape[1]
    cross = anchor @ other.transpose(0, 2, 1)          # (G, N, N)
    self_sim = anchor @ anchor.transpose(0, 2, 1)
    mask = np.where(np.eye(n, dtype=bool), -np.inf, 0.0)
    logits = dc.concat([cross, self_sim + mask], axis=-1)
    ar = np.arange(n)
    positive = cross[:, ar, ar]
    return (dc.logsumexp(logits, axis=-1) - positive).mean()


def instance_loss(h, h2) -> dc.Tensor:
    """Contrast across the batch at every timestamp.

    With a single sample the only candidate is the positive itself and the
    loss is exactly zero.
    """
    h, h2 = dc.as_tensor(h), dc.as_tensor(h2)
    _check_pair(h, h2)
    return _contrast(h.transpose(1, 0, 2), h2.transpose(1, 0, 2))


def temporal_loss(h, h2) -> dc.Tensor:
    """Contrast across timestamps within every sample (zero for T = 1)."""
    h, h2 = dc.as_tensor(h), dc.as_tensor(h2)
    _check_pair(h, h2)
    return _contrast(h, h2)


def hierarchical_levels(h, h2) -> list[dc.Tensor]:
    """Per-level ``(instance + temporal) / 2``, pooling time by 2 until length 1."""
    h, h2 = dc.as_tensor(h), dc.as_tensor(h2)
    _check_pair(h, h2)
    if h.shape[1] < 1:
        raise DimensionError("overlap must contain at least one timestamp")
    levels = []
    while True:
        if h.shape[1] == 1:
            levels.append(instance_loss(h, h2) * 0.5)
            return levels
        levels.append((instance_loss(h, h2) + temporal_loss(h, h2)) * 0.5)
        h, h2 = dc.max_pool_time(h, 2), dc.max_pool_time(h2, 2)


def hierarchical_loss(h, h2) -> dc.Tensor:
    """Average of the per-level losses."""
    levels = hierarchical_levels(h, h2)
    total = levels[0]
    for term in levels[1:]:
        total = total + term
    return total * (1.0 / len(levels))


def byol_loss(a, b) -> dc.Tensor:
    """``2 - 2 cos(a, b)`` averaged over leading axes; lies in [0, 4]."""
    a, b = dc.as_tensor(a), dc.as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"embedding shapes differ: {a.shape} vs {b.shape}")
    cos = (dc.l2_normalize(a) * dc.l2_normalize(b)).sum(axis=-1)
    return (2.0 - 2.0 * cos).mean()
