"""Validated tensor types, NPY I/O and dataset manifests."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from numpy.lib import format as npformat

from .errors import DomainError, FormatError, IoError, UnsupportedLayout, ValidationError

IGNORE_INDEX = int(np.iinfo(np.int32).max)
SPLITS = ("train", "val", "test")

_FLOAT_DESCR = {"<f4": np.float32, "<f8": np.float64}


def _frozen(a: np.ndarray) -> np.ndarray:
    # private read-only copy: callers keep ownership of what they passed in
    a = np.array(a, order="C", copy=True)
    a.flags.writeable = False
    return a


# --------------------------------------------------------------------------
# domain types
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class LogitMap:
    """Class logits of one image, shape ``(classes, H, W)``, stored as float32."""

    data: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.data)
        if a.ndim != 3:
            raise ValidationError(f"logits must be rank 3 (classes, H, W), got shape {a.shape}")
        if a.shape[0] < 2:
            raise ValidationError("logits need at least 2 classes")
        if a.shape[1] < 1 or a.shape[2] < 1:
            raise ValidationError(f"degenerate spatial shape {a.shape[1:]}")
        a = a.astype(np.float32, copy=False)
        if not np.all(np.isfinite(a)):
            raise ValidationError("logits contain NaN or Inf")
        object.__setattr__(self, "data", _frozen(a))

    @property
    def n_classes(self) -> int:
        return self.data.shape[0]

    @property
    def spatial(self) -> tuple[int, int]:
        return self.data.shape[1], self.data.shape[2]


@dataclass(frozen=True)
class LabelMap:
    """Integer class map ``(H, W)``; ``IGNORE_INDEX`` marks unlabeled pixels."""

    data: np.ndarray
    n_classes: Optional[int] = None

    def __post_init__(self):
        a = np.asarray(self.data)
        if a.ndim != 2:
            raise ValidationError(f"labels must be rank 2 (H, W), got shape {a.shape}")
        if a.dtype.kind not in "iu":
            if a.dtype.kind == "f" and np.all(np.isfinite(a)) and np.all(a == np.round(a)):
                a = a.astype(np.int64)
            else:
                raise ValidationError(f"labels must be integers, got dtype {a.dtype}")
        a = a.astype(np.int32)
        valid = a != IGNORE_INDEX
        if np.any(a[valid] < 0):
            raise ValidationError("negative class index in labels")
        if self.n_classes is not None and np.any(a[valid] >= self.n_classes):
            raise ValidationError(
                f"label value {int(a[valid].max())} out of range for {self.n_classes} classes"
            )
        object.__setattr__(self, "data", _frozen(a))

    @property
    def valid(self) -> np.ndarray:
        return self.data != IGNORE_INDEX


@dataclass(frozen=True)
class ProbMap:
    """Per-pixel class distribution ``(classes, H, W)``."""

    data: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.data, dtype=np.float64)
        if a.ndim != 3:
            raise ValidationError(f"probabilities must be rank 3, got shape {a.shape}")
        if not np.all(np.isfinite(a)) or a.min() < 0.0 or a.max() > 1.0:
            raise ValidationError("probabilities must lie in [0, 1]")
        if np.max(np.abs(a.sum(axis=0) - 1.0)) > 1e-5:
            raise ValidationError("probabilities do not sum to 1 per pixel")
        object.__setattr__(self, "data", _frozen(a))

    @property
    def n_classes(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True)
class ImageTensor:
    data: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.data)
        if a.ndim == 2:
            a = a[None]
        if a.ndim != 3:
            raise ValidationError(f"image must be rank 3 (C, H, W), got shape {a.shape}")
        a = a.astype(np.float32, copy=False)
        if not np.all(np.isfinite(a)):
            raise ValidationError("image contains NaN or Inf")
        object.__setattr__(self, "data", _frozen(a))

    @property
    def channels(self) -> int:
        return self.data.shape[0]


T_MAX = 1e6


@dataclass(frozen=True)
class TemperatureField:
    """Positive temperatures: one global scalar, one per image, or one per pixel.

    ``values`` has shape ``()`` for ``global``, ``(n,)`` for ``per_image`` and
    ``(H, W)`` or ``(n, H, W)`` for ``local``.
    """

    kind: str
    values: np.ndarray
    t_max: float = T_MAX

    def __post_init__(self):
        if self.kind not in ("global", "per_image", "local"):
            raise ValidationError(f"unknown temperature kind {self.kind!r}")
        v = np.asarray(self.values, dtype=np.float64)
        expected = {"global": (0,), "per_image": (1,), "local": (2, 3)}[self.kind]
        if v.ndim not in expected:
            raise ValidationError(f"{self.kind} temperatures cannot have shape {v.shape}")
        if not np.all(np.isfinite(v)) or np.any(v <= 0):
            raise DomainError("temperatures must be finite and > 0")
        if np.any(v > self.t_max):
            raise DomainError(f"temperature above t_max={self.t_max}")
        object.__setattr__(self, "values", _frozen(v))

    @classmethod
    def scalar(cls, value: float, t_max: float = T_MAX) -> "TemperatureField":
        return cls("global", np.float64(value), t_max)

    @classmethod
    def per_image(cls, ts: Sequence[float], t_max: float = T_MAX) -> "TemperatureField":
        return cls("per_image", np.asarray(ts, dtype=np.float64), t_max)

    @classmethod
    def local(cls, field: np.ndarray, t_max: float = T_MAX) -> "TemperatureField":
        return cls("local", np.asarray(field, dtype=np.float64), t_max)

    def for_sample(self, index: int = 0):
        """Temperature of one sample: a float or an ``(H, W)`` array."""
        v = self.values
        if self.kind == "global":
            return float(v)
        if self.kind == "per_image":
            return float(v[index])
        return v if v.ndim == 2 else v[index]


@dataclass(frozen=True)
class Sample:
    id: str
    logits: LogitMap
    labels: LabelMap
    image: Optional[ImageTensor] = None

    def __post_init__(self):
        if self.labels.data.shape != self.logits.spatial:
            raise ValidationError(f"{self.id}: spatial mismatch")
        if self.image is not None and self.image.data.shape[1:] != self.logits.spatial:
            raise ValidationError(f"{self.id}: image spatial mismatch")
        lab = self.labels.data[self.labels.valid]
        if lab.size and lab.max() >= self.logits.n_classes:
            raise ValidationError(
                f"{self.id}: label {int(lab.max())} out of range for {self.logits.n_classes} classes"
            )


@dataclass(frozen=True)
class Dataset:
    samples: tuple
    split: str
    background: int = 0
    n_classes: int = field(init=False)

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValidationError(f"split must be one of {SPLITS}, got {self.split!r}")
        samples = tuple(self.samples)
        if not samples:
            raise ValidationError("dataset is empty")
        classes = {s.logits.n_classes for s in samples}
        if len(classes) != 1:
            raise ValidationError(f"inconsistent class counts across samples: {sorted(classes)}")
        ids = [s.id for s in samples]
        if len(set(ids)) != len(ids):
            raise ValidationError("duplicate sample ids")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "n_classes", classes.pop())

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.samples]


# --------------------------------------------------------------------------
# NPY I/O
# --------------------------------------------------------------------------

def _read_header(fh, path):
    try:
        version = npformat.read_magic(fh)
    except ValueError as exc:
        raise FormatError(f"{path}: bad NPY magic ({exc})") from None
    if version != (1, 0):
        raise FormatError(f"{path}: unsupported NPY version {version}")
    try:
        shape, fortran, dtype = npformat.read_array_header_1_0(fh)
    except ValueError as exc:
        raise FormatError(f"{path}: malformed NPY header ({exc})") from None
    if fortran:
        raise UnsupportedLayout(f"{path}: Fortran-order arrays are not supported")
    return shape, dtype


def _read_payload(fh, path, shape, dtype):
    count = int(np.prod(shape, dtype=np.int64))
    raw = fh.read(count * dtype.itemsize)
    if len(raw) != count * dtype.itemsize:
        raise FormatError(f"{path}: truncated payload")
    return np.frombuffer(raw, dtype=dtype, count=count).reshape(shape)


def load_npy(path, dtype=np.float32) -> np.ndarray:
    """Read a little-endian f32/f64 C-order NPY v1.0 file as ``dtype``."""
    try:
        fh = open(path, "rb")
    except OSError as exc:
        raise IoError(f"cannot open {path}: {exc.strerror}") from None
    with fh:
        shape, dtype = _read_header(fh, path)
        if dtype.str not in _FLOAT_DESCR:
            raise UnsupportedLayout(f"{path}: dtype {dtype.str} is not little-endian f4/f8")
        arr = _read_payload(fh, path, shape, dtype)
    return arr.astype(dtype)


def _write(path, arr: np.ndarray):
    try:
        with open(path, "wb") as fh:
            npformat.write_array_header_1_0(
                fh, {"descr": arr.dtype.str, "fortran_order": False, "shape": arr.shape}
            )
            fh.write(arr.tobytes(order="C"))
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc.strerror}") from None


def save_npy(tensor, path, dtype="<f4") -> None:
    """Write ``tensor`` as NPY v1.0, little-endian float (f4 by default), C order."""
    a = np.asarray(tensor)
    if a.size == 0 or 0 in a.shape:
        raise ValidationError(f"refusing to save degenerate shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValidationError("refusing to save a tensor with NaN/Inf")
    if np.dtype(dtype).str not in _FLOAT_DESCR:
        raise UnsupportedLayout(f"cannot write dtype {dtype}")
    _write(path, np.ascontiguousarray(a, dtype=np.dtype(dtype).newbyteorder("<")))


def load_labels(path) -> np.ndarray:
    """Read an integer NPY label map; the dtype's max value maps to IGNORE_INDEX."""
    try:
        fh = open(path, "rb")
    except OSError as exc:
        raise IoError(f"cannot open {path}: {exc.strerror}") from None
    with fh:
        shape, dtype = _read_header(fh, path)
        if dtype.kind not in "iu" or dtype.byteorder == ">":
            raise UnsupportedLayout(f"{path}: label dtype {dtype.str} is not a little-endian integer")
        arr = _read_payload(fh, path, shape, dtype)
    sentinel = np.iinfo(dtype).max
    out = arr.astype(np.int64)
    out[arr == sentinel] = IGNORE_INDEX
    return out.astype(np.int32)


def save_labels(labels, path) -> None:
    a = np.asarray(labels.data if isinstance(labels, LabelMap) else labels)
    if a.size == 0:
        raise ValidationError("refusing to save an empty label map")
    _write(path, np.ascontiguousarray(a, dtype="<i4"))


# --------------------------------------------------------------------------
# manifests
# --------------------------------------------------------------------------

def load_dataset(manifest) -> Dataset:
    """Load and eagerly validate every sample listed in a JSON manifest."""
    manifest = Path(manifest)
    try:
        doc = json.loads(manifest.read_text())
    except OSError as exc:
        raise IoError(f"cannot read manifest {manifest}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{manifest}: invalid JSON ({exc})") from None
    root = manifest.parent
    classes = doc.get("classes")
    samples = []
    for k, entry in enumerate(doc.get("samples", [])):
        sid = str(entry.get("id", f"sample-{k}"))
        logits = LogitMap(load_npy(root / entry["logits"]))
        if classes is not None and logits.n_classes != classes:
            raise ValidationError(f"{sid}: expected {classes} classes, logits have {logits.n_classes}")
        lab = load_labels(root / entry["labels"])
        if lab.shape != logits.spatial:
            raise ValidationError(f"{sid}: spatial mismatch")
        try:
            labels = LabelMap(lab, logits.n_classes)
        except ValidationError as exc:
            raise ValidationError(f"{sid}: {exc}") from None
        image = None
        if entry.get("image"):
            image = ImageTensor(load_npy(root / entry["image"]))
        samples.append(Sample(sid, logits, labels, image))
    return Dataset(tuple(samples), doc.get("split", "test"), int(doc.get("background", 0)))


def save_dataset(dataset: Dataset, directory) -> Path:
    """Write NPY tensors under ``directory/<split>/`` and ``directory/<split>.json``."""
    directory = Path(directory)
    sub = directory / dataset.split
    os.makedirs(sub, exist_ok=True)
    entries = []
    for s in dataset:
        rel = f"{dataset.split}/{s.id}"
        save_npy(s.logits.data, directory / f"{rel}_logits.npy")
        save_labels(s.labels, directory / f"{rel}_labels.npy")
        entry = {"id": s.id, "logits": f"{rel}_logits.npy", "labels": f"{rel}_labels.npy"}
        if s.image is not None:
            save_npy(s.image.data, directory / f"{rel}_image.npy")
            entry["image"] = f"{rel}_image.npy"
        entries.append(entry)
    doc = {
        "split": dataset.split,
        "classes": dataset.n_classes,
        "background": dataset.background,
        "samples": entries,
    }
    path = directory / f"{dataset.split}.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path
