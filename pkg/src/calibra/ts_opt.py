"""Scalar temperature fitting on a validation split.

Two independent routes to the NLL-optimal global temperature: gradient descent
in log inverse temperature, and bisection on the equilibrium between the softmax-weighted
logit sum and the true-class logit sum.  The second doubles as an oracle for
the first.
"""
from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np

from .errors import DomainError, IoError, NumericalError, ValidationError
from .metrics import all_region
from .scaling import entropy, nll, softmax_temp
from .tensor_core import T_MAX, Dataset, Sample, TemperatureField

log = logging.getLogger(__name__)

INV_TEMP_MIN = 1e-6
INV_TEMP_MAX = 1e6
BISECT_RTOL = 1e-8
BOUNDARY_RADIUS = 2

MaskPolicy = Union[str, Callable[[Sample], np.ndarray]]


@dataclass(frozen=True)
class ScalarFitResult:
    """``branch`` is ``interior`` for a genuine optimum, otherwise the clamp taken
    (``unbounded``, ``temp_max``, ``temp_min``, ``max_iters``)."""

    temperature: float
    final_nll: float
    iterations: int
    converged: bool
    method: str
    branch: str = "interior"
    n_pixels: int = 0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class GradientConfig:
    lr: float = 0.1
    max_iters: int = 500
    tol: float = 1e-7


# --------------------------------------------------------------------------
# pixel gathering
# --------------------------------------------------------------------------

def supervision_mask(sample: Sample, policy: MaskPolicy = "all", background: int = 0) -> np.ndarray:
    """Pixels that enter the loss: labelled ones, restricted by ``policy``.

    ``all`` keeps non-background pixels plus the boundary halo, ``full`` keeps
    every labelled pixel, and a callable returns its own boolean mask.
    """
    lab = sample.labels.data
    valid = (lab >= 0) & (lab < sample.logits.n_classes)
    if callable(policy):
        return valid & np.asarray(policy(sample), dtype=bool)
    if policy == "full":
        return valid
    if policy == "all":
        return valid & all_region(lab, BOUNDARY_RADIUS, background).data
    raise ValidationError(f"unknown mask policy {policy!r}")


@dataclass(frozen=True)
class _Pixels:
    logit: np.ndarray        # (N, classes) float64 logits of supervised pixels
    true: np.ndarray     # (N,) true-class logits

    @property
    def n(self) -> int:
        return self.logit.shape[0]


def _gather(samples, policy, background) -> _Pixels:
    rows, trues = [], []
    for s in samples:
        m = supervision_mask(s, policy, background)
        logit = s.logits.data.astype(np.float64)[:, m].T
        true = logit[np.arange(logit.shape[0]), s.labels.data[m]]
        rows.append(logit)
        trues.append(true)
    logit = np.concatenate(rows)
    if logit.shape[0] == 0:
        raise DomainError("no supervised pixels")
    return _Pixels(np.ascontiguousarray(logit), np.concatenate(trues))


def _softmax_rows(a: np.ndarray) -> np.ndarray:
    a = a - a.max(axis=1, keepdims=True)
    e = np.exp(a)
    return e / e.sum(axis=1, keepdims=True)


def _weighted(px: _Pixels, inv_temp: float) -> float:
    return float(np.sum(_softmax_rows(inv_temp * px.logit) * px.logit))


def _nll(px: _Pixels, inv_temp: float) -> float:
    a = inv_temp * px.logit
    mx = a.max(axis=1)
    lse = mx + np.log(np.exp(a - mx[:, None]).sum(axis=1))
    return float(np.sum(lse - inv_temp * px.true))


def _samples(data) -> list:
    if isinstance(data, Dataset):
        return list(data.samples)
    if isinstance(data, Sample):
        return [data]
    return list(data)


# --------------------------------------------------------------------------
# fitting
# --------------------------------------------------------------------------

def fit_ts_gradient(data, mask_policy: MaskPolicy = "all", config: Optional[GradientConfig] = None,
                    background: int = 0) -> ScalarFitResult:
    """Gradient descent on the mean NLL in log inverse temperature, starting from unit temperature."""
    cfg = config or GradientConfig()
    px = _gather(_samples(data), mask_policy, background)
    lo, hi = math.log(INV_TEMP_MIN), math.log(INV_TEMP_MAX)
    log_inv = 0.0
    converged = False
    it = 0
    for it in range(1, cfg.max_iters + 1):
        inv_temp = math.exp(log_inv)
        grad = inv_temp * (_weighted(px, inv_temp) - float(px.true.sum())) / px.n
        if not math.isfinite(grad):
            raise NumericalError(f"non-finite gradient at iteration {it}")
        new = min(max(log_inv - cfg.lr * grad, lo), hi)
        step = abs(new - log_inv)
        log_inv = new
        if step < cfg.tol:
            converged = True
            break
    inv_temp = math.exp(log_inv)
    final = _nll(px, inv_temp)
    if not math.isfinite(final):
        raise NumericalError("non-finite NLL at the fitted temperature")
    branch = "interior" if converged else "max_iters"
    if log_inv in (lo, hi):
        branch, converged = ("temp_max" if log_inv == lo else "temp_min"), False
    return ScalarFitResult(1.0 / inv_temp, final, it, converged, "gradient", branch, px.n)


def _bisect(px: _Pixels, rtol: float = BISECT_RTOL) -> ScalarFitResult:
    true_sum = float(px.true.sum())
    mean_sum = float(px.logit.mean(axis=1).sum())

    def result(inv_temp, it, conv, branch):
        temp = T_MAX if inv_temp == 0.0 else 1.0 / inv_temp
        a = 1.0 / temp
        return ScalarFitResult(temp, _nll(px, a), it, conv, "bisection", branch, px.n)

    if true_sum <= mean_sum:
        return result(0.0, 0, False, "unbounded")
    resid_lo = _weighted(px, INV_TEMP_MIN) - true_sum
    resid_hi = _weighted(px, INV_TEMP_MAX) - true_sum
    if resid_lo >= 0:
        return result(INV_TEMP_MIN, 0, False, "temp_max")
    if resid_hi <= 0:
        return result(INV_TEMP_MAX, 0, False, "temp_min")
    tol = rtol * abs(true_sum)
    lo, hi = math.log(INV_TEMP_MIN), math.log(INV_TEMP_MAX)
    for it in range(1, 400):
        mid = 0.5 * (lo + hi)
        resid = _weighted(px, math.exp(mid)) - true_sum
        if not math.isfinite(resid):
            raise NumericalError(f"non-finite equilibrium residual at iteration {it}")
        if abs(resid) < tol:
            return result(math.exp(mid), it, True, "interior")
        if resid < 0:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-15:
            break
    raise NumericalError(f"bisection stalled with |resid| = {abs(resid):.3e} > {tol:.3e}")


def fit_ts_bisection(data, mask_policy: MaskPolicy = "all", background: int = 0,
                     rtol: float = BISECT_RTOL) -> ScalarFitResult:
    """Solve the equilibrium equation for the global temperature by bisection.

    When the true-class logit sum does not exceed the mean-logit sum the NLL
    keeps falling as the temperature grows, and ``T_MAX`` is returned with ``converged=False``.
    """
    return _bisect(_gather(_samples(data), mask_policy, background), rtol)


def _fit_one(sample, mask_policy, background, rtol):
    try:
        return _bisect(_gather([sample], mask_policy, background), rtol)
    except (DomainError, NumericalError) as exc:
        raise type(exc)(f"{sample.id}: {exc}") from exc


def fit_ibts_per_image(data, mask_policy: MaskPolicy = "all", background: int = 0,
                       rtol: float = BISECT_RTOL, threads: int = 1, details: bool = False):
    """One equilibrium temperature per image, fitted on that image alone.

    This is a direct-optimization reference, not the learned image-based
    predictor (see :func:`calibra.tree_net.train` with ``mode="ibts"``).
    """
    samples = _samples(data)

    def job(s):
        return _fit_one(s, mask_policy, background, rtol)

    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            results = list(ex.map(job, samples))
    else:
        results = [job(s) for s in samples]
    field = TemperatureField.per_image([r.temperature for r in results])
    return (field, results) if details else field


def equilibrium_residual(data, temps, granularity: str = "global",
                         mask_policy: MaskPolicy = "all", background: int = 0):
    """NLL minus entropy of the calibrated output over the supervised pixels.

    ``global`` sums over the dataset, ``per-image`` returns one value per
    sample and ``per-pixel`` one ``(H, W)`` map per sample (nan off-mask).
    """
    samples = _samples(data)
    if isinstance(temps, TemperatureField) and temps.kind != "global":
        if len(temps.values) != len(samples):
            raise ValidationError(f"{len(temps.values)} temperatures for {len(samples)} samples")
    per_image, per_pixel = [], []
    for i, s in enumerate(samples):
        m = supervision_mask(s, mask_policy, background)
        out = softmax_temp(s.logits, temps, i)
        if granularity == "per-pixel":
            p = out.probs.data
            lab = s.labels.data
            with np.errstate(divide="ignore", invalid="ignore"):
                ent = -np.sum(np.where(p > 0, p * np.log(p), 0.0), axis=0)
                pt = np.take_along_axis(p, np.where(m, lab, 0)[None].astype(np.intp), axis=0)[0]
                res = -np.log(np.maximum(pt, 1e-12)) - ent
            per_pixel.append(np.where(m, res, np.nan))
        elif m.any():
            per_image.append(nll(out.probs, s.labels, m) - entropy(out.probs, m))
        else:
            per_image.append(0.0)
    if granularity == "per-pixel":
        return per_pixel
    if granularity == "per-image":
        return np.asarray(per_image)
    if granularity == "global":
        return float(np.sum(per_image))
    raise ValidationError(f"unknown granularity {granularity!r}")


def count_supervised(data, mask_policy: MaskPolicy = "all", background: int = 0) -> int:
    return int(sum(supervision_mask(s, mask_policy, background).sum() for s in _samples(data)))


def nll_at(data, temperature: float, mask_policy: MaskPolicy = "all", background: int = 0) -> float:
    """Summed NLL of the dataset at a single global temperature."""
    if temperature <= 0:
        raise DomainError("temperature must be > 0")
    return _nll(_gather(_samples(data), mask_policy, background), 1.0 / temperature)


# --------------------------------------------------------------------------
# serialization
# --------------------------------------------------------------------------

def save_temperatures(path, method: str, temps: TemperatureField, ids=None) -> None:
    doc = {"method": method}
    if temps.kind == "global":
        doc["t_global"] = float(temps.values)
    elif temps.kind == "per_image":
        if ids is None or len(ids) != len(temps.values):
            raise ValidationError("per-image temperatures need one sample id each")
        doc["per_image"] = {str(i): float(v) for i, v in zip(ids, temps.values)}
    else:
        raise ValidationError("local temperature fields are not stored as JSON")
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def load_temperatures(path, ids=None) -> tuple[str, TemperatureField]:
    """Return ``(method, field)``; per-image fields are ordered by ``ids`` when given."""
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except FileNotFoundError as exc:
        raise IoError(f"{path}: not found") from exc
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from exc
    method = doc.get("method", "ts")
    if "t_global" in doc:
        return method, TemperatureField.scalar(float(doc["t_global"]))
    if "per_image" in doc:
        table = doc["per_image"]
        order = list(table) if ids is None else list(ids)
        missing = [i for i in order if i not in table]
        if missing:
            raise ValidationError(f"{path}: no temperature for {missing[0]}")
        return method, TemperatureField.per_image([float(table[i]) for i in order])
    raise ValidationError(f"{path}: needs t_global or per_image")
