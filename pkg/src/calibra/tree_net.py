"""Tree-structured gated convolutional temperature predictor.

Four residual leaves read the logits, a fifth reads the image, and four
sigmoid gates (also on the logits) mix them pairwise up a binary tree.  The
root is ``relu(.) + min_temp`` so every predicted temperature is positive.
Forward, reverse-mode gradients and the Adam loop are written out by hand.

Node layout::

    n5 = g5*h1 + (1-g5)*h2      n6 = g6*h3 + (1-g6)*h4
    n7 = g7*n5 + (1-g7)*n6
    temp = relu(g8*h5 + (1-g8)*n7) + min_temp
"""
from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import kernels
from .errors import IoError, NumericalError, StateError, ValidationError
from .scaling import as_mask
from .tensor_core import TemperatureField, _write, load_npy

log = logging.getLogger(__name__)

KSIZE = kernels.KSIZE
DILATION = kernels.DILATION
DEFAULT_MIN_TEMP = 1e-3
N_LEAVES = 4   # logit leaves; the image leaf is stored separately
N_GATES = 4


# --------------------------------------------------------------------------
# convolution
# --------------------------------------------------------------------------

def _cols(x: np.ndarray) -> np.ndarray:
    return kernels.im2col_dilated(np.ascontiguousarray(x, dtype=np.float64), KSIZE, DILATION)


def conv2d_dilated(x, kernel, bias: float = 0.0, dilation: int = DILATION) -> np.ndarray:
    """Same-size 5x5 correlation with the given dilation and zero padding.

    ``x`` is ``(C, H, W)`` and ``kernel`` ``(C, 5, 5)``; tap ``(dy, dx)`` reads
    ``x[c, y + dilation*(dy-2), x + dilation*(dx-2)]``.
    """
    x = np.asarray(getattr(x, "data", x), dtype=np.float64)
    k = np.asarray(kernel, dtype=np.float64)
    if x.ndim != 3 or k.shape != (x.shape[0], KSIZE, KSIZE):
        raise ValidationError(f"kernel {k.shape} does not match input channels of {x.shape}")
    cols = kernels.im2col_dilated(np.ascontiguousarray(x), KSIZE, int(dilation))
    return (cols @ k.ravel() + float(bias)).reshape(x.shape[1:])


# --------------------------------------------------------------------------
# parameters
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class TreeNetParams:
    """Filters and biases of the tree.

    ``leaf``/``gate`` are ``(4, n_cls, 5, 5)`` stacks (leaves 1-4, gates 5-8),
    ``image_leaf`` is ``(C, 5, 5)``; biases follow the same order.
    """

    leaf: np.ndarray
    leaf_bias: np.ndarray
    image_leaf: np.ndarray
    image_bias: float
    gate: np.ndarray
    gate_bias: np.ndarray
    min_temp: float = DEFAULT_MIN_TEMP

    def __post_init__(self):
        n_cls = self.leaf.shape[1] if self.leaf.ndim == 4 else -1
        C = self.image_leaf.shape[0] if self.image_leaf.ndim == 3 else -1
        expect = {
            "leaf": (N_LEAVES, n_cls, KSIZE, KSIZE),
            "leaf_bias": (N_LEAVES,),
            "image_leaf": (C, KSIZE, KSIZE),
            "gate": (N_GATES, n_cls, KSIZE, KSIZE),
            "gate_bias": (N_GATES,),
        }
        for name, shape in expect.items():
            a = np.array(getattr(self, name), dtype=np.float64)
            if a.shape != shape or min(shape) < 1:
                raise ValidationError(f"{name} has shape {a.shape}, expected {shape}")
            if not np.all(np.isfinite(a)):
                raise ValidationError(f"{name} contains NaN/Inf")
            a.setflags(write=False)
            object.__setattr__(self, name, a)
        if not (math.isfinite(self.image_bias) and math.isfinite(self.min_temp)):
            raise ValidationError("biases and min_temp must be finite")
        if self.min_temp <= 0:
            raise ValidationError("min_temp must be > 0")
        object.__setattr__(self, "image_bias", float(self.image_bias))
        object.__setattr__(self, "min_temp", float(self.min_temp))

    @property
    def classes(self) -> int:
        return self.leaf.shape[1]

    @property
    def channels(self) -> int:
        return self.image_leaf.shape[0]

    @classmethod
    def zeros(cls, classes: int, channels: int = 1, min_temp: float = DEFAULT_MIN_TEMP) -> "TreeNetParams":
        k = (KSIZE, KSIZE)
        return cls(np.zeros((N_LEAVES, classes, *k)), np.zeros(N_LEAVES),
                   np.zeros((channels, *k)), 0.0,
                   np.zeros((N_GATES, classes, *k)), np.zeros(N_GATES), min_temp)

    @classmethod
    def random(cls, classes: int, channels: int, rng, scale: float = 0.1,
               min_temp: float = DEFAULT_MIN_TEMP) -> "TreeNetParams":
        return cls.from_flat(rng.normal(0.0, scale, cls.size(classes, channels)), classes, channels, min_temp)

    @staticmethod
    def size(classes: int, channels: int) -> int:
        return (N_LEAVES + N_GATES) * (classes * KSIZE * KSIZE + 1) + channels * KSIZE * KSIZE + 1

    def flat(self) -> np.ndarray:
        return np.concatenate([self.leaf.ravel(), self.leaf_bias, self.image_leaf.ravel(),
                               [self.image_bias], self.gate.ravel(), self.gate_bias])

    @classmethod
    def from_flat(cls, vec, classes: int, channels: int,
                  min_temp: float = DEFAULT_MIN_TEMP) -> "TreeNetParams":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (cls.size(classes, channels),):
            want = cls.size(classes, channels)
            raise ValidationError(f"flat vector has {vec.size} entries, expected {want}")
        k2 = KSIZE * KSIZE
        parts, pos = [], 0
        for n in (N_LEAVES * classes * k2, N_LEAVES, channels * k2, 1, N_GATES * classes * k2, N_GATES):
            parts.append(vec[pos:pos + n])
            pos += n
        return cls(parts[0].reshape(N_LEAVES, classes, KSIZE, KSIZE), parts[1],
                   parts[2].reshape(channels, KSIZE, KSIZE), float(parts[3][0]),
                   parts[4].reshape(N_GATES, classes, KSIZE, KSIZE), parts[5], min_temp)

    def with_(self, **changes) -> "TreeNetParams":
        d = {k: getattr(self, k) for k in ("leaf", "leaf_bias", "image_leaf", "image_bias",
                                           "gate", "gate_bias", "min_temp")}
        d.update(changes)
        return TreeNetParams(**d)

    def _logit_weights(self) -> tuple[np.ndarray, np.ndarray]:
        # (n_cls*25, 8) so that one matmul yields all leaf and gate pre-activations
        wmat = np.concatenate([self.leaf, self.gate]).reshape(N_LEAVES + N_GATES, -1).T
        return np.ascontiguousarray(wmat), np.concatenate([self.leaf_bias, self.gate_bias])


# --------------------------------------------------------------------------
# forward / backward
# --------------------------------------------------------------------------

@dataclass
class Inputs:
    """Per-image tensors reused across epochs: im2col matrices and flat targets."""

    logit: np.ndarray        # (HW, classes) float64
    cols_logit: np.ndarray   # (HW, classes*25)
    cols_i: np.ndarray       # (HW, C*25)
    shape: tuple
    labels: Optional[np.ndarray] = None   # (HW,) int
    mask: Optional[np.ndarray] = None     # (HW,) bool, labelled and selected


def prepare(logits, image=None, labels=None, mask=None, channels: Optional[int] = None) -> Inputs:
    """Build the reusable :class:`Inputs`; a missing image becomes zeros."""
    logit = np.asarray(getattr(logits, "data", logits), dtype=np.float64)
    if logit.ndim != 3:
        raise ValidationError(f"logits must be (n_cls, H, W), got {logit.shape}")
    n_cls, H, W = logit.shape
    if image is None:
        img = np.zeros((channels or 1, H, W))
    else:
        img = np.asarray(getattr(image, "data", image), dtype=np.float64)
        if img.ndim == 2:
            img = img[None]
        if img.shape[1:] != (H, W):
            raise ValidationError(f"image {img.shape} does not match logits {logit.shape}")
    lab = m = None
    if labels is not None:
        lab = np.asarray(getattr(labels, "data", labels)).reshape(-1).astype(np.int64)
        m = as_mask(mask, (H, W)).reshape(-1) & (lab >= 0) & (lab < n_cls)
        lab = np.where(m, lab, 0)
    return Inputs(np.ascontiguousarray(logit.reshape(n_cls, -1).T), _cols(logit), _cols(img), (H, W), lab, m)


def _sigmoid(a):
    return 0.5 * (1.0 + np.tanh(0.5 * a))


@dataclass
class Cache:
    params: TreeNetParams
    inputs: Inputs
    h: np.ndarray      # (HW, 4) logit leaves
    h5: np.ndarray     # (HW,)
    g: np.ndarray      # (HW, 4) gates 5..8
    n5: np.ndarray
    n6: np.ndarray
    n7: np.ndarray
    root: np.ndarray   # pre-ReLU
    temperature: np.ndarray


def _forward(params: TreeNetParams, inp: Inputs) -> Cache:
    if inp.cols_logit.shape[1] != params.classes * KSIZE * KSIZE:
        raise ValidationError(f"params expect {params.classes} classes, logits have {inp.logit.shape[1]}")
    if inp.cols_i.shape[1] != params.channels * KSIZE * KSIZE:
        raise ValidationError(f"params expect {params.channels} image channels")
    wmat, b = params._logit_weights()
    pre = inp.cols_logit @ wmat + b
    h = pre[:, :N_LEAVES] + 1.0
    g = _sigmoid(pre[:, N_LEAVES:])
    h5 = inp.cols_i @ params.image_leaf.ravel() + params.image_bias + 1.0
    n5 = g[:, 0] * h[:, 0] + (1.0 - g[:, 0]) * h[:, 1]
    n6 = g[:, 1] * h[:, 2] + (1.0 - g[:, 1]) * h[:, 3]
    n7 = g[:, 2] * n5 + (1.0 - g[:, 2]) * n6
    root = g[:, 3] * h5 + (1.0 - g[:, 3]) * n7
    temp = np.maximum(root, 0.0) + params.min_temp
    return Cache(params, inp, h, h5, g, n5, n6, n7, root, temp)


def forward(params: TreeNetParams, logits, image=None) -> tuple[TemperatureField, Cache]:
    """Per-pixel temperature field and the activations needed by :func:`backward`."""
    inp = logits if isinstance(logits, Inputs) else prepare(logits, image, channels=params.channels)
    cache = _forward(params, inp)
    return TemperatureField.local(cache.temperature.reshape(inp.shape), t_max=math.inf), cache


def forward_ibts(params: TreeNetParams, logits, image=None) -> float:
    """Image-level temperature: the spatial mean of the per-pixel field."""
    field, _ = forward(params, logits, image)
    return float(np.mean(field.values))


def _nll_terms(logit, labels, mask, temp):
    """Per-pixel NLL at temperature ``temp`` (array or scalar) and its derivative in the temperature."""
    a = logit / (temp[:, None] if np.ndim(temp) else temp)
    a = a - a.max(axis=1, keepdims=True)
    e = np.exp(a)
    s = e.sum(axis=1)
    p = e / s[:, None]
    idx = np.arange(logit.shape[0])
    loss = np.log(s) - a[idx, labels]
    mean_logit = np.sum(p * logit, axis=1)
    dt = (logit[idx, labels] - mean_logit) / (temp * temp)
    return np.where(mask, loss, 0.0), np.where(mask, dt, 0.0)


def loss(params: TreeNetParams, inp: Inputs, mode: str = "lts") -> float:
    """Summed masked NLL of one image under the predicted temperature(s)."""
    cache = _forward(params, inp)
    temp = cache.temperature if mode == "lts" else np.mean(cache.temperature)
    terms, _ = _nll_terms(inp.logit, inp.labels, inp.mask, temp)
    return float(terms.sum())


def backward(params: TreeNetParams, cache: Cache, labels=None, mask=None, mode: str = "lts"):
    """Gradient of the summed masked NLL, returned as ``(loss, TreeNetParams)``.

    ``labels``/``mask`` override those stored on the cached inputs.  The ReLU
    subgradient at zero is taken as zero.
    """
    if cache is None or cache.params is not params:
        raise StateError("forward cache does not belong to these parameters")
    inp = cache.inputs
    lab, m = inp.labels, inp.mask
    if labels is not None:
        lab = np.asarray(getattr(labels, "data", labels)).reshape(-1).astype(np.int64)
        m = as_mask(mask, inp.shape).reshape(-1) & (lab >= 0) & (lab < inp.logit.shape[1])
        lab = np.where(m, lab, 0)
    elif mask is not None:
        m = m & as_mask(mask, inp.shape).reshape(-1)
    if lab is None:
        raise ValidationError("labels are required for the loss")
    if mode == "lts":
        terms, dt = _nll_terms(inp.logit, lab, m, cache.temperature)
    elif mode == "ibts":
        tbar = float(np.mean(cache.temperature))
        terms, dtbar = _nll_terms(inp.logit, lab, m, tbar)
        dt = np.full(cache.temperature.shape, dtbar.sum() / cache.temperature.size)
    else:
        raise ValidationError(f"unknown mode {mode!r}")
    g, h = cache.g, cache.h
    d_root = np.where(cache.root > 0, dt, 0.0)
    d_g8 = d_root * (cache.h5 - cache.n7)
    d_h5 = d_root * g[:, 3]
    d_n7 = d_root * (1.0 - g[:, 3])
    d_g7 = d_n7 * (cache.n5 - cache.n6)
    d_n5 = d_n7 * g[:, 2]
    d_n6 = d_n7 * (1.0 - g[:, 2])
    d_h = np.stack([d_n5 * g[:, 0], d_n5 * (1.0 - g[:, 0]),
                    d_n6 * g[:, 1], d_n6 * (1.0 - g[:, 1])], axis=1)
    d_g = np.stack([d_n5 * (h[:, 0] - h[:, 1]), d_n6 * (h[:, 2] - h[:, 3]), d_g7, d_g8], axis=1)
    d_pre = np.concatenate([d_h, d_g * g * (1.0 - g)], axis=1)
    d_w = inp.cols_logit.T @ d_pre                       # (n_cls*25, 8)
    d_b = d_pre.sum(axis=0)
    n_cls = params.classes
    d_w = d_w.T.reshape(N_LEAVES + N_GATES, n_cls, KSIZE, KSIZE)
    grad = TreeNetParams(d_w[:N_LEAVES], d_b[:N_LEAVES],
                         (inp.cols_i.T @ d_h5).reshape(params.image_leaf.shape), float(d_h5.sum()),
                         d_w[N_LEAVES:], d_b[N_LEAVES:], params.min_temp)
    return float(terms.sum()), grad


# --------------------------------------------------------------------------
# gradient check
# --------------------------------------------------------------------------

@dataclass
class GradCheck:
    analytic: np.ndarray
    numeric: np.ndarray
    excluded: np.ndarray
    floor: float = 1e-8

    @property
    def rel_error(self) -> np.ndarray:
        a, n = self.analytic, self.numeric
        return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), self.floor)

    @property
    def checked(self) -> int:
        return int((~self.excluded).sum())

    def pass_fraction(self, tol: float = 1e-4) -> float:
        ok = self.rel_error[~self.excluded] < tol
        return float(ok.mean()) if ok.size else 1.0


def gradcheck(params: TreeNetParams, inp: Inputs, mode: str = "lts", h: float = 1e-3,
              floor: float = 1e-8) -> GradCheck:
    """Compare analytic gradients with central differences, parameter by parameter.

    A parameter is excluded when nudging it by ``+-h`` flips the sign of any
    pre-ReLU root value, since the difference quotient then straddles a kink.
    """
    _, cache = forward(params, inp)
    _, grad = backward(params, cache, mode=mode)
    analytic = grad.flat()
    base = params.flat()
    sign = cache.root > 0
    numeric = np.zeros_like(base)
    excluded = np.zeros(base.shape, dtype=bool)
    for i in range(base.size):
        vals, signs = [], []
        for step in (h, -h):
            v = base.copy()
            v[i] += step
            p = TreeNetParams.from_flat(v, params.classes, params.channels, params.min_temp)
            c = _forward(p, inp)
            signs.append(np.array_equal(c.root > 0, sign) and not np.any(np.abs(c.root) < 1e-6))
            temp = c.temperature if mode == "lts" else np.mean(c.temperature)
            vals.append(_nll_terms(inp.logit, inp.labels, inp.mask, temp)[0].sum())
        numeric[i] = (vals[0] - vals[1]) / (2 * h)
        excluded[i] = not all(signs)
    return GradCheck(analytic, numeric, excluded, floor)


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    lr_schedule: tuple = ((0, 1e-4), (50, 1e-5))
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    accumulate: int = 4
    seed: int = 0
    mask_policy: str = "all"
    min_temp: float = DEFAULT_MIN_TEMP
    shuffle: bool = True
    threads: int = 1

    def __post_init__(self):
        sched = tuple((int(e), float(lr)) for e, lr in self.lr_schedule)
        if not sched:
            raise ValidationError("lr_schedule must not be empty")
        epochs = [e for e, _ in sched]
        if any(b <= a for a, b in zip(epochs, epochs[1:])):
            raise ValidationError("lr_schedule epochs must be strictly increasing")
        if any(lr <= 0 for _, lr in sched):
            raise ValidationError("learning rates must be > 0")
        if self.epochs < 0 or self.accumulate < 1:
            raise ValidationError("epochs must be >= 0 and accumulate >= 1")
        object.__setattr__(self, "lr_schedule", sched)

    def lr_at(self, epoch: int) -> float:
        lr = self.lr_schedule[0][1]
        for start, value in self.lr_schedule:
            if epoch >= start:
                lr = value
        return lr

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        known = {k: v for k, v in doc.items() if k in cls.__dataclass_fields__}
        for k in ("lr_schedule", "betas"):
            if k in known:
                known[k] = tuple(tuple(x) if isinstance(x, list) else x for x in known[k])
        return cls(**known)


@dataclass
class FitArtifacts:
    """``params`` are those of ``best_epoch`` (0 = the initialization)."""

    params: TreeNetParams
    loss_curve: list = field(default_factory=list)
    best_epoch: int = 0
    final_params: Optional[TreeNetParams] = None


class _Adam:
    def __init__(self, n, betas, eps):
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.b1, self.b2 = betas
        self.damping = eps
        self.steps = 0

    def step(self, flat, grad, lr):
        self.steps += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        m_hat = self.m / (1 - self.b1 ** self.steps)
        v_hat = self.v / (1 - self.b2 ** self.steps)
        return flat - lr * m_hat / (np.sqrt(v_hat) + self.damping)


def _prepare_samples(samples, policy, background, channels):
    from .ts_opt import supervision_mask

    out = []
    for s in samples:
        m = supervision_mask(s, policy, background)
        img = s.image.data if s.image is not None else None
        out.append(prepare(s.logits, img, s.labels, m, channels))
    return out


def _image_channels(samples) -> int:
    chans = {s.image.channels for s in samples if s.image is not None}
    if len(chans) > 1:
        raise ValidationError(f"mixed image channel counts {sorted(chans)}")
    return chans.pop() if chans else 1


def _eval_nll(params, inputs, mode) -> float:
    total = sum(loss(params, inp, mode) for inp in inputs)
    n = sum(int(inp.mask.sum()) for inp in inputs)
    return total / max(n, 1)


def train(data, mode: str = "lts", config: Optional[TrainConfig] = None, val=None,
          background: int = 0) -> FitArtifacts:
    """Fit the tree with Adam on the masked NLL, starting from all-zero filters.

    Gradients of ``config.accumulate`` consecutive images are summed and
    normalized by their supervised pixel count before each step.
    """
    cfg = config or TrainConfig()
    if mode not in ("lts", "ibts"):
        raise ValidationError(f"unknown mode {mode!r}")
    samples = list(getattr(data, "samples", data))
    if not samples:
        raise ValidationError("training split is empty")
    classes = samples[0].logits.n_classes
    channels = _image_channels(samples)
    train_in = _prepare_samples(samples, cfg.mask_policy, background, channels)
    val_in = (_prepare_samples(list(getattr(val, "samples", val)), cfg.mask_policy, background, channels)
              if val is not None else None)
    params = TreeNetParams.zeros(classes, channels, cfg.min_temp)
    flat = params.flat()
    adam = _Adam(flat.size, cfg.betas, cfg.adam_eps)
    rng = np.random.default_rng(cfg.seed)
    best = (_eval_nll(params, val_in if val_in else train_in, mode), 0, params)
    curve = []
    pool = ThreadPoolExecutor(cfg.threads) if cfg.threads > 1 else None

    def grad_of(inp):
        _, cache = forward(params, inp)
        return backward(params, cache, mode=mode)

    try:
        for epoch in range(1, cfg.epochs + 1):
            lr = cfg.lr_at(epoch - 1)
            order = rng.permutation(len(train_in)) if cfg.shuffle else np.arange(len(train_in))
            ep_loss, ep_pix = 0.0, 0
            for start in range(0, len(order), cfg.accumulate):
                group = [train_in[i] for i in order[start:start + cfg.accumulate]]
                results = list(pool.map(grad_of, group)) if pool else [grad_of(inp) for inp in group]
                n = sum(int(inp.mask.sum()) for inp in group)
                g = np.zeros_like(flat)
                for value, grad in results:
                    ep_loss += value
                    g += grad.flat()
                ep_pix += n
                if n == 0:
                    continue
                if not np.all(np.isfinite(g)):
                    raise NumericalError(f"non-finite gradient in epoch {epoch}")
                flat = adam.step(flat, g / n, lr)
                params = TreeNetParams.from_flat(flat, classes, channels, cfg.min_temp)
            train_nll = ep_loss / max(ep_pix, 1)
            if not math.isfinite(train_nll):
                raise NumericalError(f"NaN loss in epoch {epoch}")
            val_nll = _eval_nll(params, val_in, mode) if val_in else train_nll
            curve.append({"epoch": epoch, "train_nll": train_nll, "val_nll": val_nll, "lr": lr})
            log.debug("epoch %d train %.6f val %.6f", epoch, train_nll, val_nll)
            if val_nll < best[0]:
                best = (val_nll, epoch, params)
    finally:
        if pool:
            pool.shutdown()
    return FitArtifacts(best[2], curve, best[1], params)


def predict(params: TreeNetParams, data, mode: str = "lts") -> TemperatureField:
    """Temperature field for every sample: ``(n, H, W)`` local or ``(n,)`` per image."""
    samples = list(getattr(data, "samples", data))
    fields = []
    for s in samples:
        img = s.image.data if s.image is not None else None
        field_i, _ = forward(params, s.logits, img)
        fields.append(field_i.values)
    if mode == "ibts":
        return TemperatureField.per_image([float(np.mean(f)) for f in fields], t_max=math.inf)
    shapes = {f.shape for f in fields}
    if len(shapes) != 1:
        raise ValidationError("local temperatures need equally sized images to stack")
    return TemperatureField.local(np.stack(fields), t_max=math.inf)


# --------------------------------------------------------------------------
# serialization
# --------------------------------------------------------------------------

def save_params(params: TreeNetParams, directory, mode: str = "lts") -> Path:
    """One NPY per filter plus ``header.json``; values are stored as float64."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for j in range(N_LEAVES):
        _write(d / f"leaf{j + 1}.npy", np.ascontiguousarray(params.leaf[j], dtype="<f8"))
    _write(d / "image_leaf.npy", np.ascontiguousarray(params.image_leaf, dtype="<f8"))
    for j in range(N_GATES):
        _write(d / f"gate{j + 1}.npy", np.ascontiguousarray(params.gate[j], dtype="<f8"))
    biases = np.concatenate([params.leaf_bias, [params.image_bias], params.gate_bias])
    _write(d / "biases.npy", np.ascontiguousarray(biases, dtype="<f8"))
    header = {"min_temp": params.min_temp, "classes": params.classes, "channels": params.channels,
              "dilation": DILATION, "mode": mode}
    (d / "header.json").write_text(json.dumps(header, indent=2) + "\n")
    return d


def load_params(directory) -> tuple[TreeNetParams, str]:
    d = Path(directory)
    try:
        header = json.loads((d / "header.json").read_text())
    except FileNotFoundError as exc:
        raise IoError(f"{d}: missing header.json") from exc
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{d}/header.json: invalid JSON ({exc})") from exc
    if header.get("dilation", DILATION) != DILATION:
        raise ValidationError(f"{d}: unsupported dilation {header['dilation']}")

    def rd(name):
        return load_npy(d / name, np.float64)

    leaf = np.stack([rd(f"leaf{j + 1}.npy") for j in range(N_LEAVES)])
    gate = np.stack([rd(f"gate{j + 1}.npy") for j in range(N_GATES)])
    b = rd("biases.npy")
    if b.shape != (N_LEAVES + 1 + N_GATES,):
        raise ValidationError(f"{d}/biases.npy has shape {b.shape}")
    params = TreeNetParams(leaf, b[:N_LEAVES], rd("image_leaf.npy"), float(b[N_LEAVES]),
                           gate, b[N_LEAVES + 1:], float(header["min_temp"]))
    if params.classes != header["classes"] or params.channels != header["channels"]:
        raise ValidationError(f"{d}: filter shapes disagree with header")
    return params, header.get("mode", "lts")
