"""Multi-atlas label fusion: voting, probability-weighted voting and joint label fusion."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import kernels
from .errors import NumericalError, ValidationError
from .scaling import as_mask
from .tensor_core import IGNORE_INDEX, LabelMap

JLF_REG = 0.01
JLF_REG_FLOOR = 1e-6


@dataclass(frozen=True)
class AtlasStack:
    """``labels`` is ``(n, H, W)`` warped atlas labels; ``probs`` the matching
    per-pixel probability that each atlas label is correct (optional)."""

    labels: np.ndarray
    probs: Optional[np.ndarray] = None

    def __post_init__(self):
        lab = np.array(self.labels, dtype=np.int64)
        if lab.ndim == 2:
            lab = lab[None]
        if lab.ndim != 3 or lab.shape[0] < 1:
            raise ValidationError(f"atlas labels must be (n, H, W), got {lab.shape}")
        if np.any(lab < 0):
            raise ValidationError("negative atlas label")
        lab.setflags(write=False)
        object.__setattr__(self, "labels", lab)
        if self.probs is not None:
            p = np.array(self.probs, dtype=np.float64)
            if p.ndim == 2:
                p = p[None]
            if p.shape != lab.shape:
                raise ValidationError(f"probs {p.shape} do not match labels {lab.shape}")
            if not np.all(np.isfinite(p)) or np.any(p < 0) or np.any(p > 1):
                raise ValidationError("correctness probabilities must lie in [0, 1]")
            p.setflags(write=False)
            object.__setattr__(self, "probs", p)

    @property
    def n(self) -> int:
        return self.labels.shape[0]

    @property
    def shape(self) -> tuple:
        return self.labels.shape[1:]

    def with_probs(self, probs) -> "AtlasStack":
        return AtlasStack(self.labels, probs)

    def _need_probs(self) -> np.ndarray:
        if self.probs is None:
            raise ValidationError("this fusion method needs correctness probabilities")
        return self.probs


def _n_labels(stack: AtlasStack) -> int:
    return int(stack.labels.max()) + 1


def _weighted_vote(labels: np.ndarray, weights: np.ndarray, n_labels: int) -> np.ndarray:
    """Per-pixel label with the largest summed weight; ties go to the lowest label."""
    n, H, W = labels.shape
    score = np.zeros((n_labels, H, W))
    yy, xx = np.indices((H, W))
    for i in range(n):
        # each (label, y, x) appears once per atlas, so fancy-index += is safe
        score[labels[i], yy, xx] += weights[i]
    return np.argmax(score, axis=0), score


def fuse_vote(stack: AtlasStack, mode: str = "plurality") -> tuple[LabelMap, np.ndarray]:
    """Vote counting.  Returns the fused labels and the winning vote count map.

    ``majority`` emits the same winner as ``plurality``; pixels without a
    strict majority are those with ``count <= n/2`` in the returned map.
    """
    if mode not in ("majority", "plurality"):
        raise ValidationError(f"unknown voting mode {mode!r}")
    fused, score = _weighted_vote(stack.labels, np.ones(stack.labels.shape), _n_labels(stack))
    counts = np.take_along_axis(score, fused[None], axis=0)[0].astype(np.int64)
    return LabelMap(fused), counts


def majority_mask(counts: np.ndarray, n: int) -> np.ndarray:
    return counts > n / 2


def fuse_svwv(stack: AtlasStack) -> LabelMap:
    """Vote weighted by each atlas's correctness probability."""
    fused, _ = _weighted_vote(stack.labels, stack._need_probs(), _n_labels(stack))
    return LabelMap(fused)


def _jlf_batch(pk: np.ndarray, reg: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    wts = kernels.jlf_solve(pk, reg)
    # equal probabilities make the system symmetric under atlas permutation, so
    # the exact solution is uniform; return it exactly instead of up to rounding
    uniform = np.all(pk == pk[:, :1], axis=1)
    wts[uniform] = 1.0 / pk.shape[1]
    return wts, ~np.all(np.isfinite(wts), axis=1)


def jlf_weights(p, reg: float = JLF_REG) -> np.ndarray:
    """Weights from the pairwise error matrix ``outer(1 - p, 1 - p)`` plus ``reg`` on the diagonal.

    ``p`` is ``(n,)`` for one pixel or ``(K, n)`` for a batch; ``reg`` is an
    absolute diagonal loading (scalar or one value per pixel).
    """
    p = np.asarray(p, dtype=np.float64)
    single = p.ndim == 1
    pk = np.ascontiguousarray(p[None] if single else p)
    if pk.ndim != 2 or pk.shape[1] < 1:
        raise ValidationError(f"probabilities must be (n,) or (K, n), got {p.shape}")
    if np.any(pk < 0) or np.any(pk > 1):
        raise ValidationError("probabilities must lie in [0, 1]")
    r = np.ascontiguousarray(np.broadcast_to(np.asarray(reg, dtype=np.float64), (pk.shape[0],)))
    if np.any(r < 0):
        raise ValidationError("reg must be >= 0")
    wts, bad = _jlf_batch(pk, r)
    if bad.any():
        raise NumericalError(f"singular weight system at batch index {int(np.argmax(bad))}")
    return wts[0] if single else wts


def relative_reg(p: np.ndarray, reg: float = JLF_REG) -> np.ndarray:
    """``reg`` times the mean diagonal of the error matrix per pixel.

    Floored at ``JLF_REG_FLOOR``; ``p`` is ``(K, n)``.
    """
    u = 1.0 - p
    return np.maximum(reg * np.sum(u * u, axis=1) / p.shape[1], JLF_REG_FLOOR)


def fuse_jlf(stack: AtlasStack, reg: float = JLF_REG) -> tuple[LabelMap, np.ndarray]:
    """Joint label fusion with a trace-relative diagonal loading.

    Returns the fused labels and the ``(n, H, W)`` weights.
    """
    probs = stack._need_probs()
    n, H, W = probs.shape
    flat = np.ascontiguousarray(probs.reshape(n, -1).T)
    wts, bad = _jlf_batch(flat, relative_reg(flat, reg))
    if bad.any():
        raise NumericalError(f"singular weight system at pixel {divmod(int(np.argmax(bad)), W)}")
    weights = wts.T.reshape(n, H, W)
    fused, _ = _weighted_vote(stack.labels, weights, _n_labels(stack))
    return LabelMap(fused), weights


def changeable_region(stack: AtlasStack) -> np.ndarray:
    """Pixels where the atlases do not all agree."""
    return np.any(stack.labels != stack.labels[0], axis=0)


def vote_change_report(before, after, truth, changeable) -> dict:
    """Share of changeable pixels whose label changed, split into fixes and breaks."""
    b = np.asarray(getattr(before, "data", before))
    a = np.asarray(getattr(after, "data", after))
    gt = np.asarray(getattr(truth, "data", truth))
    if not (a.shape == b.shape == gt.shape):
        raise ValidationError("before, after and truth must share a shape")
    m = as_mask(changeable, gt.shape)
    n = int(m.sum())
    if n == 0:
        return {"changeable": 0, "changed": 0, "rate": 0.0, "w2c": None, "c2w": None}
    changed = m & (a != b)
    k = int(changed.sum())
    labelled = gt != IGNORE_INDEX
    w2c = int(np.sum(changed & labelled & (b != gt) & (a == gt)))
    c2w = int(np.sum(changed & labelled & (b == gt) & (a != gt)))
    return {
        "changeable": n,
        "changed": k,
        "rate": k / n,
        "w2c": w2c / k if k else None,
        "c2w": c2w / k if k else None,
    }


def stack_from_lists(labels: Sequence, probs: Optional[Sequence] = None) -> AtlasStack:
    return AtlasStack(np.stack([np.asarray(getattr(x, "data", x)) for x in labels]),
                      None if probs is None else np.stack([np.asarray(p) for p in probs]))
