"""Training losses: regression, classification and the two line terms.

Every term works on engine Tensors with arbitrary leading batch dimensions
and a trailing ``(N, 2)`` point ring, and returns one value per sample.
Plain numpy input is accepted too; the result is then still a Tensor
(use ``float(t.data)`` for a scalar).
"""
from dataclasses import dataclass

import numpy as np

from . import geometry
from .numerics import engine as E


@dataclass(frozen=True)
class LossWeights:
    delta: float = 0.32   # classification
    beta: float = 0.0032  # line similarity
    gamma: float = 0.0032  # line spacing

    def __post_init__(self):
        if min(self.delta, self.beta, self.gamma) < 0:
            raise ValueError(f"loss weights must be non-negative: {self}")

    def without_line_loss(self):
        return LossWeights(self.delta, 0.0, 0.0)


@dataclass
class LossBreakdown:
    reg: E.Tensor
    cls: E.Tensor
    sim: E.Tensor
    dis: E.Tensor
    total: E.Tensor

    def as_floats(self):
        return {k: float(getattr(self, k).data) for k in ("reg", "cls", "sim", "dis", "total")}


def combine(reg, cls, sim, dis, weights):
    """Weighted total: reg + delta*cls + beta*sim + gamma*dis."""
    return reg + weights.delta * cls + weights.beta * sim + weights.gamma * dis


# ---------------------------------------------------------------- ring layout

def _n_from_border_len(n_border_values):
    if n_border_values % 8:
        raise ValueError(f"border branch length {n_border_values} is not 2*(N-4) for a multiple-of-4 N")
    return n_border_values // 2 + 4


def assemble_ring(corners, borders):
    """Interleave corner outputs ``[..., 8]`` and border outputs ``[..., 2(N-4)]`` into a ring ``[..., N, 2]``."""
    corners, borders = E.as_tensor(corners), E.as_tensor(borders)
    if corners.shape[-1] != 8:
        raise ValueError(f"corner branch must have 8 values, got {corners.shape[-1]}")
    n = _n_from_border_len(borders.shape[-1])
    if n < 8:
        raise ValueError("need at least one division point per border")
    lead = corners.shape[:-1]
    if borders.shape[:-1] != lead:
        raise ValueError(f"batch shapes differ: {corners.shape} vs {borders.shape}")
    per = n // 4 - 1
    c = corners.reshape(lead + (4, 1, 2))
    b = borders.reshape(lead + (4, per, 2))
    return E.concat([c, b], axis=len(lead) + 1).reshape(lead + (n, 2))


def split_ring(ring):
    """Inverse of :func:`assemble_ring` for numpy rings: returns (corners[...,8], borders[...,2(N-4)])."""
    ring = np.asarray(ring)
    n = ring.shape[-2]
    lead = ring.shape[:-2]
    r = ring.reshape(lead + (4, n // 4, 2))
    corners = r[..., 0, :].reshape(lead + (8,))
    borders = r[..., 1:, :].reshape(lead + (2 * (n - 4),))
    return corners, borders


# ---------------------------------------------------------------- line loss

def _steps(ring):
    """Successive differences p_i - p_{i+1} along every border view: [..., 4, N/4, 2]."""
    ring = E.as_tensor(ring)
    n = ring.shape[-2]
    if n < 12 or n % 4:
        raise ValueError(f"line terms need N >= 12 and a multiple of 4, got {n}")
    views = ring[..., geometry.border_indices(n), :]
    return views[..., :-1, :] - views[..., 1:, :], n


def similarity_loss(ring):
    """Mean over border triples of (1 - cos) between consecutive step vectors, summed and divided by N-4."""
    d, n = _steps(ring)
    a, b = d[..., :-1, :], d[..., 1:, :]
    dot = (a * b).sum(axis=-1)
    cos = E.safe_div(dot, E.norm(a) * E.norm(b), 1.0)
    return (1.0 - cos).sum(axis=(-2, -1)) * (1.0 / (n - 4))


def distance_loss(ring):
    """Per border triple, | |dx1| - |dx2| | + | |dy1| - |dy2| |, summed and divided by N-4."""
    d, n = _steps(ring)
    ad = d.abs()
    gap = (ad[..., :-1, :] - ad[..., 1:, :]).abs()
    return gap.sum(axis=(-3, -2, -1)) * (1.0 / (n - 4))


# ---------------------------------------------------------------- regression / classification

def regression_loss(pred, gt, squared=False):
    """Sum over points and axes of |gt - pred| (or its square), divided by N-4."""
    pred, gt = E.as_tensor(pred), E.as_tensor(gt)
    if pred.shape[-2:] != gt.shape[-2:]:
        raise ValueError(f"ring sizes differ: pred {pred.shape} vs gt {gt.shape}")
    n = pred.shape[-2]
    diff = gt - pred
    err = E.square(diff) if squared else diff.abs()
    return err.sum(axis=(-2, -1)) * (1.0 / (n - 4))


def classification_loss(logits, classes):
    """Softmax cross-entropy per sample. ``logits`` is [B, K] or [K]; ``classes`` matching ints."""
    logits = E.as_tensor(logits)
    if logits.ndim == 1:
        return E.softmax_cross_entropy(logits.reshape(1, -1), np.atleast_1d(classes)).reshape(())
    return E.softmax_cross_entropy(logits, classes)


# ---------------------------------------------------------------- total

def total_loss(output, gt_ring, classes, weights=LossWeights(), squared_regression=False):
    """Batch-mean losses for a model output against encoded ground-truth rings.

    ``output`` has ``corners`` [B,8], ``borders`` [B,2(N-4)] and ``logits``
    [B,K]. Geometric terms are averaged over positive samples (class > 0)
    only; negatives carry no quadrilateral. Classification is averaged over
    the whole batch.
    """
    classes = np.asarray(classes, dtype=np.int64)
    ring = assemble_ring(output.corners, output.borders)
    gt_ring = E.as_tensor(np.asarray(gt_ring, dtype=ring.dtype))
    if gt_ring.shape != ring.shape:
        raise ValueError(f"ground truth rings {gt_ring.shape} do not match predictions {ring.shape}")
    b = classes.shape[0]
    pos = (classes > 0).astype(ring.dtype)
    npos = max(1.0, float(pos.sum()))
    mask = pos / npos

    reg = (regression_loss(ring, gt_ring, squared_regression) * mask).sum()
    cls = classification_loss(output.logits, classes).sum() * (1.0 / b)
    # with the line terms switched off they are still reported, but kept off the tape
    line_ring = ring if (weights.beta or weights.gamma) else E.Tensor(ring.data)
    sim = (similarity_loss(line_ring) * mask).sum()
    dis = (distance_loss(line_ring) * mask).sum()
    total = combine(reg, cls, sim, dis, weights)
    return LossBreakdown(reg=reg, cls=cls, sim=sim, dis=dis, total=total)
