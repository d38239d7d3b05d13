"""Synthetic segmentation problems with known miscalibration.

Every sample starts from logits ``base`` that are calibrated by construction:
labels are *drawn* from ``softmax(base)``.  The observable logits are
``k(x) * base`` for a recorded ground-truth field ``k``, so the ideal temperature
at each pixel is exactly ``k(x)``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import kernels
from .errors import ValidationError
from .tensor_core import (SPLITS, Dataset, ImageTensor, LabelMap, LogitMap, Sample, _write,
                          save_dataset, save_labels, save_npy)

PRESETS = ("stripes", "nested-squares", "voronoi-blobs")
SPLIT_SALT = {"train": 11, "val": 23, "test": 37}

# confidence profile: rises from chance at a boundary to its ceiling with this scale (px)
EDGE_SCALE = 3.0
CONF_JITTER = 0.08


@dataclass(frozen=True)
class Miscalibration:
    """``kind`` is none, global, per-image or spatial; ``params`` its numbers."""

    kind: str = "none"
    params: tuple = ()

    @classmethod
    def parse(cls, text: str) -> "Miscalibration":
        parts = text.strip().split(":")
        kind = parts[0]
        try:
            if kind == "none" and len(parts) == 1:
                return cls("none")
            if kind == "global" and len(parts) == 2:
                out = cls("global", (float(parts[1]),))
            elif kind == "per-image" and len(parts) == 3:
                out = cls("per-image", (float(parts[1]), float(parts[2])))
            elif kind == "spatial" and len(parts) == 4 and parts[1] == "halves":
                out = cls("spatial", (float(parts[2]), float(parts[3])))
            else:
                raise ValueError
        except ValueError:
            raise ValidationError(
                f"bad miscalibration {text!r}; expected none | global:k | "
                "per-image:kmin:kmax | spatial:halves:k1:k2") from None
        if any(not (k > 0 and math.isfinite(k)) for k in out.params):
            raise ValidationError("miscalibration factors must be finite and > 0")
        if out.kind == "per-image" and out.params[0] > out.params[1]:
            raise ValidationError("per-image range must have kmin <= kmax")
        return out

    def __str__(self) -> str:
        if self.kind == "none":
            return "none"
        nums = ":".join(repr(float(k)) for k in self.params)
        return f"spatial:halves:{nums}" if self.kind == "spatial" else f"{self.kind}:{nums}"

    def field(self, shape, rng) -> np.ndarray:
        H, W = shape
        if self.kind == "none":
            return np.ones(shape)
        if self.kind == "global":
            return np.full(shape, self.params[0])
        if self.kind == "per-image":
            lo, hi = np.log(self.params)
            return np.full(shape, float(np.exp(rng.uniform(lo, hi))))
        k = np.empty(shape)
        k[:, : W // 2] = self.params[0]
        k[:, W // 2:] = self.params[1]
        return k


@dataclass(frozen=True)
class SynthSpec:
    shape: tuple = (64, 64)
    classes: int = 4
    preset: str = "stripes"
    miscal: Miscalibration = field(default_factory=Miscalibration)
    rho: float = 0.1
    seed: int = 0
    counts: tuple = (("train", 30), ("val", 20), ("test", 10))

    def __post_init__(self):
        if isinstance(self.miscal, str):
            object.__setattr__(self, "miscal", Miscalibration.parse(self.miscal))
        if isinstance(self.counts, dict):
            object.__setattr__(self, "counts", tuple(self.counts.items()))
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        if self.preset not in PRESETS:
            raise ValidationError(f"unknown preset {self.preset!r}; choose from {PRESETS}")
        if self.classes < 2:
            raise ValidationError("need at least 2 classes")
        if not 0 <= self.rho < 1:
            raise ValidationError("rho must lie in [0, 1)")
        if len(self.shape) != 2 or min(self.shape) < 4:
            raise ValidationError(f"shape must be (H, W) with both >= 4, got {self.shape}")
        for split, n in self.counts:
            if split not in SPLITS or n < 0:
                raise ValidationError(f"bad sample count {split}={n}")

    def to_dict(self) -> dict:
        return {"shape": list(self.shape), "classes": self.classes, "preset": self.preset,
                "miscal": str(self.miscal), "rho": self.rho, "seed": self.seed,
                "counts": dict(self.counts)}


# --------------------------------------------------------------------------
# scenes
# --------------------------------------------------------------------------

def scene(preset: str, shape, classes: int, rng) -> np.ndarray:
    """A piecewise-constant label map with boundaries dense enough for 64x64."""
    H, W = shape
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    if preset == "stripes":
        angle = rng.uniform(0, np.pi)
        width = rng.uniform(6, 12)
        proj = xx * np.cos(angle) + yy * np.sin(angle) + rng.uniform(0, width * classes)
        return (np.floor(proj / width).astype(np.int64) % classes).astype(np.int32)
    if preset == "nested-squares":
        cy, cx = rng.uniform(0.3, 0.7) * H, rng.uniform(0.3, 0.7) * W
        width = rng.uniform(0.08, 0.14) * min(H, W)
        ring = np.floor(np.maximum(np.abs(yy - cy), np.abs(xx - cx)) / width).astype(np.int64)
        return np.maximum(classes - 1 - ring, 0).astype(np.int32)
    if preset == "voronoi-blobs":
        n = int(rng.integers(2 * classes, 3 * classes + 1))
        pts = np.stack([rng.uniform(0, H, n), rng.uniform(0, W, n)], axis=1)
        lab = np.concatenate([np.arange(classes), rng.integers(0, classes, n - classes)])
        d = (yy[..., None] - pts[:, 0]) ** 2 + (xx[..., None] - pts[:, 1]) ** 2
        return lab[np.argmin(d, axis=-1)].astype(np.int32)
    raise ValidationError(f"unknown preset {preset!r}")


def edge_distance(labels: np.ndarray) -> np.ndarray:
    """Euclidean distance (px) from each pixel to the nearest label change."""
    lab = np.asarray(labels)
    edge = np.zeros(lab.shape, dtype=bool)
    edge[1:] |= lab[1:] != lab[:-1]
    edge[:-1] |= lab[1:] != lab[:-1]
    edge[:, 1:] |= lab[:, 1:] != lab[:, :-1]
    edge[:, :-1] |= lab[:, 1:] != lab[:, :-1]
    if not edge.any():
        return np.full(lab.shape, np.inf)
    grid = np.argwhere(np.ones(lab.shape, dtype=bool)).astype(np.float64)
    pts = np.argwhere(edge).astype(np.float64)
    return kernels.min_distances(grid, pts).reshape(lab.shape)


def calibrated_logits(scene_labels: np.ndarray, classes: int, rho: float, rng) -> np.ndarray:
    """Logits whose softmax is the label-sampling distribution.

    The scene class gets a confidence that climbs from chance at boundaries to
    ``1 - rho`` in the interior, jittered per pixel; the remaining mass is
    spread over the other classes with random proportions.
    """
    H, W = scene_labels.shape
    chance = 1.0 / classes
    ceiling = 1.0 - max(rho, 1e-3)
    d = edge_distance(scene_labels)
    base = chance + (ceiling - chance) * (1.0 - np.exp(-d / EDGE_SCALE))
    conf = np.clip(base + rng.normal(0.0, CONF_JITTER, (H, W)), chance, ceiling)
    rest = rng.dirichlet(np.ones(classes - 1), size=(H, W))          # (H, W, classes - 1)
    prob = np.empty((classes, H, W))
    onehot = np.arange(classes)[:, None, None] == scene_labels[None]
    for c in range(classes):
        # other classes in ascending order take the Dirichlet shares in turn
        slot = c - (scene_labels < c).astype(np.int64)
        share = np.take_along_axis(rest, np.clip(slot, 0, classes - 2)[..., None], axis=-1)[..., 0]
        prob[c] = np.where(onehot[c], conf, (1.0 - conf) * share)
    prob = np.maximum(prob, 1e-12)
    log_prob = np.log(prob / prob.sum(axis=0))
    return log_prob - log_prob.min(axis=0)


def sample_labels(base: np.ndarray, rng) -> np.ndarray:
    p = np.exp(base - base.max(axis=0))
    p /= p.sum(axis=0)
    cdf = np.cumsum(p, axis=0)
    u = rng.uniform(size=base.shape[1:])
    return np.minimum((u[None] >= cdf).sum(axis=0), base.shape[0] - 1).astype(np.int32)


# --------------------------------------------------------------------------
# datasets
# --------------------------------------------------------------------------

@dataclass
class SynthResult:
    spec: SynthSpec
    splits: dict                      # split -> Dataset
    k_fields: dict                    # split -> list of (H, W) arrays
    base_logits: dict                 # split -> list of (classes, H, W) float64 arrays


def _sample(spec: SynthSpec, split: str, index: int):
    rng = np.random.default_rng([spec.seed, SPLIT_SALT[split], index])
    s = scene(spec.preset, spec.shape, spec.classes, rng)
    base = calibrated_logits(s, spec.classes, spec.rho, rng)
    labels = sample_labels(base, rng)
    k = spec.miscal.field(spec.shape, rng)
    image = (s / (spec.classes - 1) + rng.normal(0.0, 0.1, spec.shape)).astype(np.float32)
    sid = f"{split}_{index:04d}"
    sample = Sample(sid, LogitMap((k[None] * base).astype(np.float32)), LabelMap(labels, spec.classes),
                    ImageTensor(image))
    return sample, k, base


def generate(spec: SynthSpec) -> SynthResult:
    """Deterministic train/val/test datasets plus the injected temperature fields."""
    splits, ks, zs = {}, {}, {}
    for split, n in spec.counts:
        if n == 0:
            continue
        made = [_sample(spec, split, i) for i in range(n)]
        splits[split] = Dataset([m[0] for m in made], split)
        ks[split] = [m[1] for m in made]
        zs[split] = [m[2] for m in made]
    return SynthResult(spec, splits, ks, zs)


def write_synth(result: SynthResult, out) -> Path:
    """Manifests and tensors per split, ground truth under ``truth/``."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    for split, ds in result.splits.items():
        save_dataset(ds, out)
        tdir = out / "truth" / split
        tdir.mkdir(parents=True, exist_ok=True)
        for s, k in zip(ds.samples, result.k_fields[split]):
            save_npy(k, tdir / f"{s.id}_k.npy", "<f8")
    (out / "truth" / "spec.json").write_text(json.dumps(result.spec.to_dict(), indent=2) + "\n")
    return out


# --------------------------------------------------------------------------
# multi-atlas fusion benchmark
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class FusionProfile:
    """How atlases go wrong.

    Each atlas's error probability is a smooth random field scaled into
    ``[floor, ceiling]`` times the atlas rate, plus ``rate * edge_boost``
    near label edges, so ``rate=0`` yields perfect atlases.  ``groups`` lists
    atlas indices that share error draws and wrong labels; ``distortion``
    bounds the log-uniform per-atlas temperature applied to the correctness
    logits.
    """

    rate: float = 1.0
    groups: tuple = ((0, 1),)
    distortion: tuple = (0.25, 4.0)
    floor: float = 0.01
    ceiling: float = 0.95
    edge_boost: float = 0.2


@dataclass
class FusionCase:
    truth: np.ndarray            # (H, W)
    labels: np.ndarray           # (n, H, W)
    probs_true: np.ndarray       # (n, H, W)
    probs_distorted: np.ndarray  # (n, H, W)


@dataclass
class FusionBench:
    target: FusionCase
    val: FusionCase
    temperatures: np.ndarray     # per-atlas distortion temperatures
    classes: int
    profile: FusionProfile

    def best_fusion(self) -> np.ndarray:
        """Oracle upper bound: the true label wherever any atlas has it."""
        tgt = self.target
        hit = np.any(tgt.labels == tgt.truth, axis=0)
        from .fusion import AtlasStack, fuse_vote
        mv = fuse_vote(AtlasStack(tgt.labels), "majority")[0].data
        return np.where(hit, tgt.truth, mv)

    def best_calibration(self) -> np.ndarray:
        """Probability 1 where an atlas is right and ``1 / classes`` elsewhere."""
        tgt = self.target
        return np.where(tgt.labels == tgt.truth, 1.0, 1.0 / self.classes)


def _smooth_field(shape, rng, bumps: int = 4) -> np.ndarray:
    H, W = shape
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    f = np.zeros(shape)
    for _ in range(bumps):
        cy, cx = rng.uniform(0, H), rng.uniform(0, W)
        s = rng.uniform(0.15, 0.35) * min(H, W)
        f += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
    f -= f.min()
    return f / f.max() if f.max() > 0 else f


def distort(p: np.ndarray, temperature: float) -> np.ndarray:
    """Rescale the logit of a probability by ``1 / temperature``."""
    prob = np.clip(p, 1e-6, 1 - 1e-6)
    return 1.0 / (1.0 + np.exp(-np.log(prob / (1 - prob)) / temperature))


def _fusion_case(truth, classes, n, profile, rates, temps, rng) -> FusionCase:
    shape = truth.shape
    near = np.exp(-edge_distance(truth) / 2.0)
    owner = list(range(n))
    for g in profile.groups:
        for i in g[1:]:
            owner[i] = g[0]
    err, draw, wrong = {}, {}, {}
    for i in sorted(set(owner)):
        e = rates[i] * (profile.floor + (profile.ceiling - profile.floor) * _smooth_field(shape, rng))
        err[i] = np.clip(e + profile.rate * profile.edge_boost * near, 0.0, 0.95)
        draw[i] = rng.uniform(size=shape)
        wrong[i] = (truth + rng.integers(1, classes, shape)) % classes
    labels = np.empty((n, *shape), dtype=np.int64)
    p_true = np.empty((n, *shape))
    for i in range(n):
        o = owner[i]
        labels[i] = np.where(draw[o] < err[o], wrong[o], truth)
        p_true[i] = 1.0 - err[o]
    p_dist = np.stack([distort(p_true[i], temps[i]) for i in range(n)])
    return FusionCase(truth, labels, p_true, p_dist)


def generate_fusion_bench(shape=(64, 64), classes: int = 4, n_atlases: int = 5,
                          profile: Optional[FusionProfile] = None, seed: int = 0) -> FusionBench:
    """A target and a validation subject sharing the same atlas error behaviour."""
    if n_atlases < 2:
        raise ValidationError("the fusion benchmark needs at least 2 atlases")
    profile = profile or FusionProfile()
    for g in profile.groups:
        if any(i >= n_atlases or i < 0 for i in g):
            raise ValidationError(f"correlated group {g} refers to a missing atlas")
    rng = np.random.default_rng([seed, 101])
    rates = profile.rate * np.exp(rng.uniform(-0.3, 0.3, n_atlases))
    lo, hi = np.log(profile.distortion)
    temps = np.exp(rng.uniform(lo, hi, n_atlases))
    cases = []
    for salt in (1, 2):
        crng = np.random.default_rng([seed, 101, salt])
        truth = scene("voronoi-blobs", shape, classes, crng).astype(np.int64)
        cases.append(_fusion_case(truth, classes, n_atlases, profile, rates, temps, crng))
    return FusionBench(cases[0], cases[1], temps, classes, profile)


def calibrate_atlas_probs(bench: FusionBench) -> np.ndarray:
    """Per-atlas scalar temperature fitted on the validation subject, applied to the target."""
    from .ts_opt import fit_ts_bisection

    out = np.empty_like(bench.target.probs_distorted)
    for i in range(bench.target.labels.shape[0]):
        v = bench.val
        prob = np.clip(v.probs_distorted[i], 1e-6, 1 - 1e-6)
        logit = np.stack([np.log(prob / (1 - prob)), np.zeros_like(prob)]).astype(np.float32)
        correct = (v.labels[i] != v.truth).astype(np.int32)   # class 0 = "atlas is right"
        fit = fit_ts_bisection(Dataset([Sample(f"atlas{i}", LogitMap(logit), LabelMap(correct, 2))], "val"),
                               mask_policy="full")
        out[i] = distort(bench.target.probs_distorted[i], fit.temperature)
    return out


def write_fusion_bench(bench: FusionBench, out) -> Path:
    out = Path(out)
    for name, case in (("target", bench.target), ("val", bench.val)):
        d = out / name
        d.mkdir(parents=True, exist_ok=True)
        save_labels(case.truth, d / "truth.npy")
        save_labels(case.labels, d / "atlas_labels.npy")
        _write(d / "probs_true.npy", np.ascontiguousarray(case.probs_true, dtype="<f8"))
        _write(d / "probs_distorted.npy", np.ascontiguousarray(case.probs_distorted, dtype="<f8"))
    meta = {"classes": bench.classes, "n_atlases": int(bench.target.labels.shape[0]),
            "distortion_temperatures": [float(v) for v in bench.temperatures],
            "profile": {"rate": bench.profile.rate, "groups": [list(g) for g in bench.profile.groups],
                        "distortion": list(bench.profile.distortion), "floor": bench.profile.floor,
                        "ceiling": bench.profile.ceiling, "edge_boost": bench.profile.edge_boost}}
    (out / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")
    return out


def read_fusion_bench(directory) -> FusionBench:
    from .tensor_core import load_labels, load_npy

    d = Path(directory)
    meta = json.loads((d / "meta.json").read_text())
    cases = []
    for name in ("target", "val"):
        c = d / name
        cases.append(FusionCase(load_labels(c / "truth.npy").astype(np.int64),
                                load_labels(c / "atlas_labels.npy").astype(np.int64),
                                load_npy(c / "probs_true.npy", np.float64),
                                load_npy(c / "probs_distorted.npy", np.float64)))
    prof = dict(meta["profile"])
    prof["groups"] = tuple(tuple(g) for g in prof["groups"])
    prof["distortion"] = tuple(prof["distortion"])
    profile = FusionProfile(**prof)
    return FusionBench(cases[0], cases[1], np.asarray(meta["distortion_temperatures"]),
                       meta["classes"], profile)
