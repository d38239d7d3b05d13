"""Evaluation regions, binned calibration metrics and segmentation metrics."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import kernels
from .errors import EmptyRegion, ValidationError
from .scaling import CalibratedOutput, as_mask
from .tensor_core import IGNORE_INDEX, LabelMap

log = logging.getLogger(__name__)

CALIBRATION_METRICS = ("ece", "mce", "sce", "ace")


@dataclass(frozen=True)
class RegionMask:
    data: np.ndarray
    kind: str
    origin: Optional[tuple] = None
    size: Optional[int] = None

    @property
    def count(self) -> int:
        return int(self.data.sum())


@dataclass
class ReliabilityBins:
    """Per-bin pixel counts, accuracy and mean confidence.

    Empty bins carry ``nan`` accuracy/confidence.  ``lo``/``hi`` are the
    interval edges for equal-width bins and the observed confidence range for
    equal-frequency bins.
    """

    scheme: str
    counts: np.ndarray
    acc: np.ndarray
    conf: np.ndarray
    lo: np.ndarray
    hi: np.ndarray

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def occupied(self) -> np.ndarray:
        return self.counts > 0

    def rows(self) -> list[dict]:
        out = []
        for j in range(len(self.counts)):
            occupied = self.counts[j] > 0
            out.append({
                "bin_lo": _num(self.lo[j]),
                "bin_hi": _num(self.hi[j]),
                "count": int(self.counts[j]),
                "acc": float(self.acc[j]) if occupied else None,
                "conf": float(self.conf[j]) if occupied else None,
            })
        return out


def _num(x):
    x = float(x)
    return None if math.isnan(x) else x


def _labels(labels) -> np.ndarray:
    return np.asarray(labels.data if isinstance(labels, LabelMap) else labels)


# --------------------------------------------------------------------------
# regions
# --------------------------------------------------------------------------

def _four_neighbour_boundary(lab: np.ndarray, valid: np.ndarray) -> np.ndarray:
    out = np.zeros(lab.shape, dtype=bool)
    for axis in (0, 1):
        a = np.swapaxes(lab, 0, axis)
        v = np.swapaxes(valid, 0, axis)
        o = np.swapaxes(out, 0, axis)
        diff = (a[1:] != a[:-1]) & v[1:] & v[:-1]
        o[1:] |= diff
        o[:-1] |= diff
    return out & valid


def boundary_region(labels, radius: int = 2) -> RegionMask:
    """Pixels with a differently-labelled pixel within Chebyshev distance ``radius``.

    ``radius=0`` degenerates to pixels 4-adjacent to a different label.
    Unlabelled pixels neither belong to nor create a boundary.
    """
    lab = _labels(labels).astype(np.int64)
    valid = lab != IGNORE_INDEX
    if radius < 0:
        raise ValidationError("radius must be >= 0")
    if radius == 0:
        mask = _four_neighbour_boundary(lab, valid)
    else:
        hi, lo = kernels.window_minmax(np.ascontiguousarray(lab), np.ascontiguousarray(valid), int(radius))
        mask = valid & (hi != lo)
    return RegionMask(mask, "boundary")


def all_region(labels, radius: int = 2, background: int = 0) -> RegionMask:
    """Non-background pixels plus the boundary halo."""
    lab = _labels(labels)
    fg = (lab != background) & (lab != IGNORE_INDEX)
    return RegionMask(fg | boundary_region(lab, radius).data, "all")


def local_patches(shape, count: int = 10, size: int = 72, seed: int = 0) -> list[RegionMask]:
    """``count`` random square patches; ``size`` is clamped to the image and recorded."""
    H, W = shape
    if size > min(H, W):
        log.info("patch size %d clamped to %d", size, min(H, W))
    size = int(min(size, H, W))
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        y = int(rng.integers(0, H - size + 1))
        x = int(rng.integers(0, W - size + 1))
        m = np.zeros((H, W), dtype=bool)
        m[y:y + size, x:x + size] = True
        out.append(RegionMask(m, "local", (y, x), size))
    return out


# --------------------------------------------------------------------------
# binning
# --------------------------------------------------------------------------

def _equal_width_index(conf: np.ndarray, n_bins: int) -> np.ndarray:
    # intervals ((j-1)/N, j/N]; a confidence of exactly 0 lands in the first bin
    edges = np.arange(1, n_bins) / n_bins
    return np.searchsorted(edges, conf, side="left")


def _bin_stats(idx, correct, conf, n_bins):
    counts = np.bincount(idx, minlength=n_bins)
    s_acc = np.bincount(idx, weights=correct, minlength=n_bins)
    s_conf = np.bincount(idx, weights=conf, minlength=n_bins)
    with np.errstate(invalid="ignore", divide="ignore"):
        acc = np.where(counts > 0, s_acc / counts, np.nan)
        cf = np.where(counts > 0, s_conf / counts, np.nan)
    return counts, acc, cf


def _equal_width(conf, correct, n_bins) -> ReliabilityBins:
    idx = _equal_width_index(conf, n_bins)
    counts, acc, cf = _bin_stats(idx, correct, conf, n_bins)
    j = np.arange(n_bins)
    return ReliabilityBins("equal_width", counts, acc, cf, j / n_bins, (j + 1) / n_bins)


def _equal_frequency(conf, correct, n_bins) -> ReliabilityBins:
    order = np.argsort(conf, kind="stable")
    idx = np.empty(len(conf), dtype=np.int64)
    lo = np.full(n_bins, np.nan)
    hi = np.full(n_bins, np.nan)
    for r, chunk in enumerate(np.array_split(order, n_bins)):
        idx[chunk] = r
        if len(chunk):
            lo[r] = conf[chunk[0]]
            hi[r] = conf[chunk[-1]]
    counts, acc, cf = _bin_stats(idx, correct, conf, n_bins)
    return ReliabilityBins("equal_frequency", counts, acc, cf, lo, hi)


def _make_bins(conf, correct, scheme, n_bins):
    if scheme == "equal_width":
        return _equal_width(conf, correct, n_bins)
    if scheme == "equal_frequency":
        return _equal_frequency(conf, correct, n_bins)
    raise ValidationError(f"unknown binning scheme {scheme!r}")


def _selection(output: CalibratedOutput, labels, mask):
    lab = _labels(labels)
    n_classes = output.probs.n_classes
    m = as_mask(mask, lab.shape) & (lab >= 0) & (lab < n_classes)
    if not m.any():
        raise EmptyRegion("region contains no supervised pixels")
    return lab, m


def bin_predictions(output: CalibratedOutput, labels, mask=None,
                    scheme: str = "equal_width", n_bins: int = 10) -> ReliabilityBins:
    """Reliability-diagram bins of top-label confidence vs. accuracy."""
    lab, m = _selection(output, labels, mask)
    conf = np.asarray(output.confidence, dtype=np.float64)[m]
    correct = (output.pred_labels.data[m] == lab[m]).astype(np.float64)
    return _make_bins(conf, correct, scheme, n_bins)


def ece(bins: ReliabilityBins) -> float:
    occ = bins.occupied
    if not occ.any():
        raise EmptyRegion("all bins are empty")
    gaps = np.abs(bins.acc[occ] - bins.conf[occ])
    return float(np.sum(bins.counts[occ] / bins.total * gaps))


def mce(bins: ReliabilityBins) -> float:
    occ = bins.occupied
    if not occ.any():
        raise EmptyRegion("all bins are empty")
    return float(np.max(np.abs(bins.acc[occ] - bins.conf[occ])))


def _per_class(output, labels, mask, scheme, n_bins):
    lab, m = _selection(output, labels, mask)
    probs = output.probs.data
    truth = lab[m]
    return [
        _make_bins(probs[c][m], (truth == c).astype(np.float64), scheme, n_bins)
        for c in range(probs.shape[0])
    ], int(m.sum())


def sce(output: CalibratedOutput, labels, mask=None, n_bins: int = 10) -> float:
    """Static calibration error: equal-width bins per class, weighted by bin occupancy."""
    per_class, total = _per_class(output, labels, mask, "equal_width", n_bins)
    n_cls = len(per_class)
    acc = 0.0
    for b in per_class:
        occ = b.occupied
        acc += np.sum(b.counts[occ] / (n_cls * total) * np.abs(b.acc[occ] - b.conf[occ]))
    return float(acc)


def ace(output: CalibratedOutput, labels, mask=None, n_bins: int = 10) -> float:
    """Adaptive calibration error: equal-frequency bins per class, uniform weights."""
    per_class, _ = _per_class(output, labels, mask, "equal_frequency", n_bins)
    n_cls = len(per_class)
    acc = 0.0
    for b in per_class:
        occ = b.occupied
        acc += np.sum(np.abs(b.acc[occ] - b.conf[occ])) / (n_cls * n_bins)
    return float(acc)


def calibration_metrics(output, labels, mask=None, n_bins: int = 10) -> dict:
    bins = bin_predictions(output, labels, mask, "equal_width", n_bins)
    return {
        "ece": ece(bins),
        "mce": mce(bins),
        "sce": sce(output, labels, mask, n_bins),
        "ace": ace(output, labels, mask, n_bins),
    }


# --------------------------------------------------------------------------
# segmentation metrics
# --------------------------------------------------------------------------

def _surface(mask: np.ndarray) -> np.ndarray:
    padded = np.pad(mask, 1, constant_values=False)
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:])
    return mask & ~interior


def _points(mask: np.ndarray) -> np.ndarray:
    return np.argwhere(mask).astype(np.float64)


def nearest_rank(values: np.ndarray, pct: float) -> float:
    v = np.sort(values)
    rank = max(1, math.ceil(pct / 100.0 * len(v)))
    return float(v[rank - 1])


def seg_metrics(pred, truth, background: int = 0, tolerance: float = 1.0) -> dict:
    """ASD, surface Dice, 95th-percentile distance and volume Dice, in pixels.

    Averaged over non-background classes present in either map.  A class seen
    in only one map scores Dice 0 and the image diagonal as its distances.
    """
    p = _labels(pred)
    gt = _labels(truth)
    if p.shape != gt.shape:
        raise ValidationError(f"pred {p.shape} and truth {gt.shape} disagree")
    present = (set(np.unique(p)) | set(np.unique(gt))) - {background, IGNORE_INDEX}
    if not present:
        raise EmptyRegion("no non-background class in either map")
    H, W = gt.shape
    diag = math.hypot(H, W)
    grid = np.argwhere(np.ones((H, W), dtype=bool)).astype(np.float64)
    rows = []
    for c in sorted(int(x) for x in present):
        a = gt == c
        b = p == c
        vd = 2.0 * np.sum(a & b) / (a.sum() + b.sum())
        sa, sb = _surface(a), _surface(b)
        if not sa.any() or not sb.any():
            rows.append((diag, 0.0, diag, vd))
            continue
        pa, pb = _points(sa), _points(sb)
        d_ab = kernels.min_distances(pa, pb)
        d_ba = kernels.min_distances(pb, pa)
        asd = (d_ab.sum() + d_ba.sum()) / (len(pa) + len(pb))
        md95 = nearest_rank(np.concatenate([d_ab, d_ba]), 95)
        band_a = kernels.min_distances(grid, pa) <= tolerance
        band_b = kernels.min_distances(grid, pb) <= tolerance
        sd = 2.0 * np.sum(band_a & band_b) / (band_a.sum() + band_b.sum())
        rows.append((asd, sd, md95, vd))
    arr = np.asarray(rows, dtype=np.float64)
    asd, sd, md95, vd = arr.mean(axis=0)
    return {"asd": float(asd), "sd": float(sd), "md95": float(md95), "vd": float(vd)}


# --------------------------------------------------------------------------
# reports
# --------------------------------------------------------------------------

@dataclass
class CalibrationReport:
    """``regions`` maps all/boundary to metric dicts (or None) and local to
    ``{avg, max, per_patch}``; ``bins`` holds reliability-diagram rows."""

    regions: dict
    bins: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"regions": self.regions, "bins": self.bins}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, doc: dict) -> "CalibrationReport":
        return cls(doc["regions"], doc.get("bins", {}))

    @classmethod
    def from_json(cls, text: str) -> "CalibrationReport":
        return cls.from_dict(json.loads(text))

    def value(self, region: str, metric: str, agg: str = "avg"):
        r = self.regions.get(region)
        if r is None:
            return None
        if region == "local":
            r = r.get(agg)
            if r is None:
                return None
        return r.get(metric)


def _safe_metrics(output, labels, mask, n_bins, what):
    try:
        return calibration_metrics(output, labels, mask, n_bins)
    except EmptyRegion:
        log.warning("%s region is empty; metrics reported as null", what)
        return None


def _aggregate(per_patch: list) -> tuple:
    avg, mx = {}, {}
    for k in CALIBRATION_METRICS:
        vals = [p[k] for p in per_patch if p is not None]
        avg[k] = float(np.mean(vals)) if vals else None
        mx[k] = float(np.max(vals)) if vals else None
    if all(v is None for v in avg.values()):
        return None, None
    return avg, mx


def evaluate(output: CalibratedOutput, labels, regions=("all", "boundary", "local"),
             n_bins: int = 10, radius: int = 2, background: int = 0,
             patch_count: int = 10, patch_size: int = 72, seed: int = 0) -> CalibrationReport:
    """Calibration metrics over the All, Boundary and Local evaluation regions."""
    lab = _labels(labels)
    out_regions, out_bins = {}, {}
    for name in regions:
        if name == "all":
            mask = all_region(lab, radius, background).data
        elif name == "boundary":
            mask = boundary_region(lab, radius).data
        elif name == "local":
            patches = local_patches(lab.shape, patch_count, patch_size, seed)
            per_patch = [_safe_metrics(output, lab, p.data, n_bins, "local patch") for p in patches]
            avg, mx = _aggregate(per_patch)
            out_regions["local"] = {
                "avg": avg,
                "max": mx,
                "per_patch": per_patch,
                "origins": [list(p.origin) for p in patches],
                "size": patches[0].size if patches else None,
            }
            continue
        else:
            raise ValidationError(f"unknown region {name!r}")
        out_regions[name] = _safe_metrics(output, lab, mask, n_bins, name)
        if out_regions[name] is not None:
            out_bins[name] = bin_predictions(output, lab, mask, "equal_width", n_bins).rows()
    return CalibrationReport(out_regions, out_bins)


def summarize_reports(reports: list) -> dict:
    """Mean and standard deviation of each region/metric across images."""
    summary = {}
    for region in ("all", "boundary", "local_avg", "local_max"):
        entry = {}
        for k in CALIBRATION_METRICS:
            vals = []
            for r in reports:
                if region.startswith("local"):
                    v = r.value("local", k, region.split("_")[1])
                else:
                    v = r.value(region, k)
                if v is not None:
                    vals.append(v)
            entry[k] = ({"mean": float(np.mean(vals)), "std": float(np.std(vals)), "n": len(vals)}
                        if vals else None)
        summary[region] = entry
    return summary


def pooled_bins(outputs, labels_list, masks, n_bins: int = 10) -> ReliabilityBins:
    """Equal-width bins pooled over several images."""
    confs, correct = [], []
    for out, lab, m in zip(outputs, labels_list, masks):
        lab = _labels(lab)
        sel = as_mask(m, lab.shape) & (lab >= 0) & (lab < out.probs.n_classes)
        confs.append(np.asarray(out.confidence, dtype=np.float64)[sel])
        correct.append((out.pred_labels.data[sel] == lab[sel]).astype(np.float64))
    conf = np.concatenate(confs)
    if conf.size == 0:
        raise EmptyRegion("no supervised pixels in any image")
    return _equal_width(conf, np.concatenate(correct), n_bins)


def write_diagram_csv(bins: ReliabilityBins, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["bin_lo", "bin_hi", "count", "acc", "conf"])
        for row in bins.rows():
            writer.writerow(["" if row[k] is None else repr(row[k])
                             for k in ("bin_lo", "bin_hi", "count", "acc", "conf")])
