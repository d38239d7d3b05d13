"""Softmax-with-temperature and the sums that drive temperature fitting.

All reductions run in float64 regardless of the storage dtype.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import DomainError, ValidationError
from .tensor_core import LabelMap, LogitMap, ProbMap, TemperatureField

LOG_FLOOR = 1e-12
BALANCE_TOL = 1e-9


@dataclass(frozen=True)
class CalibratedOutput:
    probs: ProbMap
    confidence: np.ndarray
    pred_labels: LabelMap


class Diagnosis(str, Enum):
    OVERCONFIDENT = "overconfident"
    UNDERCONFIDENT = "underconfident"
    BALANCED = "balanced"


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------

def _logits(logit) -> np.ndarray:
    a = logit.data if isinstance(logit, LogitMap) else logit
    return np.asarray(a, dtype=np.float64)


def _labels(s) -> np.ndarray:
    a = s.data if isinstance(s, LabelMap) else s
    return np.asarray(a)


def as_mask(mask, shape) -> np.ndarray:
    """Coerce ``None`` / bool array / RegionMask into an ``(H, W)`` bool array."""
    if mask is None:
        return np.ones(shape, dtype=bool)
    m = np.asarray(getattr(mask, "data", mask), dtype=bool)
    if m.shape != tuple(shape):
        raise ValidationError(f"mask shape {m.shape} does not match {tuple(shape)}")
    return m


def resolve_temperature(temps, spatial, index: int = 0):
    """Scalar float or ``(H, W)`` float64 array of positive temperatures."""
    temp = temps.for_sample(index) if isinstance(temps, TemperatureField) else temps
    temp = np.asarray(temp, dtype=np.float64)
    if temp.ndim == 0:
        temp = float(temp)
        if not np.isfinite(temp) or temp <= 0:
            raise DomainError(f"temperature must be > 0, got {temp}")
        return temp
    if temp.shape != tuple(spatial):
        raise ValidationError(f"temperature field shape {temp.shape} does not match {tuple(spatial)}")
    if not np.all(np.isfinite(temp)) or np.any(temp <= 0):
        raise DomainError("temperature field must be finite and > 0")
    return temp


def scaled_softmax(logit: np.ndarray, temp) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(probs, log_probs)`` of ``softmax(logits / temperature)`` over axis 0."""
    a = logit / temp
    a = a - a.max(axis=0)
    e = np.exp(a)
    s = e.sum(axis=0)
    return e / s, a - np.log(s)


def _require(mask: np.ndarray):
    if not mask.any():
        raise DomainError("no supervised pixels")


# --------------------------------------------------------------------------
# operations
# --------------------------------------------------------------------------

def softmax_temp(logits, temps=1.0, index: int = 0) -> CalibratedOutput:
    """Calibrated probabilities, confidence and predicted labels.

    ``temps`` may be a TemperatureField, a positive float or an ``(H, W)``
    array; ``index`` selects the sample of a per-image or stacked local field.
    Ties in the argmax go to the lowest class index.
    """
    logit = _logits(logits)
    if logit.ndim != 3:
        raise ValidationError(f"logits must be (classes, H, W), got {logit.shape}")
    temp = resolve_temperature(temps, logit.shape[1:], index)
    scaled = logit / temp
    pred = np.argmax(scaled, axis=0)
    probs, _ = scaled_softmax(logit, temp)
    conf = np.take_along_axis(probs, pred[None], axis=0)[0]
    return CalibratedOutput(ProbMap(probs), conf, LabelMap(pred, logit.shape[0]))


def nll(probs, labels, mask=None) -> float:
    """Summed negative log-likelihood of the true class over supervised pixels."""
    p = np.asarray(getattr(probs, "data", probs), dtype=np.float64)
    s = _labels(labels)
    if p.shape[1:] != s.shape:
        raise ValidationError(f"probs {p.shape} and labels {s.shape} disagree")
    m = as_mask(mask, s.shape) & (s >= 0) & (s < p.shape[0])
    _require(m)
    ys, xs = np.nonzero(m)
    pt = p[s[ys, xs], ys, xs]
    return float(-np.sum(np.log(np.maximum(pt, LOG_FLOOR))))


def entropy(probs, mask=None) -> float:
    """Summed Shannon entropy (nats) of the per-pixel distributions, 0 log 0 = 0."""
    p = np.asarray(getattr(probs, "data", probs), dtype=np.float64)
    m = as_mask(mask, p.shape[1:])
    _require(m)
    sel = p[:, m]
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(sel > 0, sel * np.log(sel), 0.0)
    return float(-np.sum(terms))


def weighted_avg_logit(logits, temps=1.0, mask=None, index: int = 0) -> float:
    """Sum over masked pixels of the temperature-scaled softmax-weighted average logit."""
    logit = _logits(logits)
    temp = resolve_temperature(temps, logit.shape[1:], index)
    m = as_mask(mask, logit.shape[1:])
    _require(m)
    p, _ = scaled_softmax(logit, temp)
    return float(np.sum((logit * p).sum(axis=0)[m]))


def true_class_logit_sum(logits, labels, mask=None) -> float:
    logit = _logits(logits)
    s = _labels(labels)
    if logit.shape[1:] != s.shape:
        raise ValidationError(f"logits {logit.shape} and labels {s.shape} disagree")
    m = as_mask(mask, s.shape) & (s >= 0) & (s < logit.shape[0])
    _require(m)
    ys, xs = np.nonzero(m)
    return float(np.sum(logit[s[ys, xs], ys, xs]))


def _classify(true_sum, weighted) -> Diagnosis:
    gap = true_sum - weighted
    if abs(gap) <= BALANCE_TOL * max(1.0, abs(true_sum), abs(weighted)):
        return Diagnosis.BALANCED
    return Diagnosis.OVERCONFIDENT if gap < 0 else Diagnosis.UNDERCONFIDENT


def _as_list(x, kind):
    return [x] if isinstance(x, kind) or (isinstance(x, np.ndarray) and x.ndim in (2, 3)) else list(x)


def confidence_diagnosis(logits, labels, granularity: str = "global"):
    """Over/under-confidence from the logit form of the definitions.

    Compares the true-class logit sum against the softmax-weighted logit sum at
    unit temperature.  ``global`` returns one Diagnosis, ``per-image`` a list, and
    ``per-pixel`` one object array per image (None where unsupervised).
    """
    zs = _as_list(logits, LogitMap)
    ss = _as_list(labels, LabelMap)
    if len(zs) != len(ss):
        raise ValidationError("logits and labels lists differ in length")
    if granularity == "global":
        t_sum = w_sum = 0.0
        any_px = False
        for logit, s in zip(zs, ss):
            m = _supervised(logit, s)
            if m.any():
                any_px = True
                t_sum += true_class_logit_sum(logit, s, m)
                w_sum += weighted_avg_logit(logit, 1.0, m)
        if not any_px:
            raise DomainError("no supervised pixels")
        return _classify(t_sum, w_sum)
    if granularity == "per-image":
        out = []
        for logit, s in zip(zs, ss):
            m = _supervised(logit, s)
            out.append(_classify(true_class_logit_sum(logit, s, m), weighted_avg_logit(logit, 1.0, m)))
        return out
    if granularity == "per-pixel":
        out = []
        for logit, s in zip(zs, ss):
            lg = _logits(logit)
            lab = _labels(s)
            m = _supervised(logit, s)
            _require(m)
            p, _ = scaled_softmax(lg, 1.0)
            wavg = (lg * p).sum(axis=0)
            diag = np.full(lab.shape, None, dtype=object)
            for y, x in zip(*np.nonzero(m)):
                diag[y, x] = _classify(lg[lab[y, x], y, x], wavg[y, x])
            out.append(diag)
        return out
    raise ValidationError(f"unknown granularity {granularity!r}")


def _supervised(logit, s) -> np.ndarray:
    lab = _labels(s)
    return (lab >= 0) & (lab < _logits(logit).shape[0])
