import json
import logging
import math

import numpy as np
import pytest

from calibra.errors import EmptyRegion, ValidationError
from calibra.metrics import (CalibrationReport, ReliabilityBins, ace, all_region, bin_predictions,
                             boundary_region, calibration_metrics, ece, evaluate, local_patches,
                             mce, nearest_rank, pooled_bins, sce, seg_metrics, summarize_reports,
                             write_diagram_csv)
from calibra.scaling import CalibratedOutput, softmax_temp
from calibra.tensor_core import LabelMap, ProbMap


def output_from_probs(p):
    p = np.asarray(p, dtype=np.float64)
    pred = np.argmax(p, axis=0)
    return CalibratedOutput(ProbMap(p), p.max(axis=0), LabelMap(pred, p.shape[0]))


def two_class(conf_row, pred_row):
    """One-row output whose top-label confidence and prediction are given."""
    conf = np.asarray(conf_row, float)
    pred = np.asarray(pred_row)
    p = np.where(pred == 0, [conf, 1 - conf], [1 - conf, conf])
    return output_from_probs(p[:, None, :])


# ---------------- brute-force oracles ----------------

def brute_width_bin(c, n_bins):
    for j in range(1, n_bins + 1):
        if c <= j / n_bins:
            return j - 1
    return n_bins - 1


def brute_ece_mce(conf, correct, n_bins=10):
    groups = {}
    for c, a in zip(conf, correct):
        groups.setdefault(brute_width_bin(c, n_bins), []).append((c, a))
    total = len(conf)
    e, m = 0.0, 0.0
    for items in groups.values():
        gap = abs(sum(a for _, a in items) / len(items) - sum(c for c, _ in items) / len(items))
        e += len(items) / total * gap
        m = max(m, gap)
    return e, m


def brute_sce(p, lab, n_bins=10):
    n_cls, n = p.shape
    out = 0.0
    for c in range(n_cls):
        groups = {}
        for i in range(n):
            groups.setdefault(brute_width_bin(p[c, i], n_bins), []).append(i)
        for idx in groups.values():
            acc = sum(lab[i] == c for i in idx) / len(idx)
            conf = sum(p[c, i] for i in idx) / len(idx)
            out += len(idx) / (n_cls * n) * abs(acc - conf)
    return out


def brute_ace(p, lab, n_bins=10):
    n_cls, n = p.shape
    out = 0.0
    for c in range(n_cls):
        order = sorted(range(n), key=lambda i: (p[c, i], i))
        base, extra = divmod(n, n_bins)
        start = 0
        for r in range(n_bins):
            size = base + (1 if r < extra else 0)
            idx = order[start:start + size]
            start += size
            if not idx:
                continue
            acc = sum(lab[i] == c for i in idx) / len(idx)
            conf = sum(p[c, i] for i in idx) / len(idx)
            out += abs(acc - conf) / (n_cls * n_bins)
    return out


def random_instance(rng):
    n_cls = int(rng.integers(2, 6))
    H, W = int(rng.integers(1, 65)), int(rng.integers(1, 65))
    z = rng.normal(0, rng.uniform(0.5, 4), (n_cls, H, W))
    out = softmax_temp(z, 1.0)
    lab = rng.integers(0, n_cls, (H, W))
    return out, lab


class TestOracles:
    def test_random_instances(self):
        rng = np.random.default_rng(7)
        for _ in range(25):
            out, lab = random_instance(rng)
            got = calibration_metrics(out, lab)
            conf = out.confidence.ravel()
            correct = (out.pred_labels.data == lab).ravel().astype(float)
            e, m = brute_ece_mce(conf, correct)
            p = out.probs.data.reshape(out.probs.n_classes, -1)
            np.testing.assert_allclose(got["ece"], e, rtol=0, atol=1e-12)
            np.testing.assert_allclose(got["mce"], m, rtol=0, atol=1e-12)
            np.testing.assert_allclose(got["sce"], brute_sce(p, lab.ravel()), rtol=0, atol=1e-12)
            np.testing.assert_allclose(got["ace"], brute_ace(p, lab.ravel()), rtol=0, atol=1e-12)
            assert got["ece"] <= got["mce"] + 1e-15


class TestRegions:
    def test_constant_map_empty_boundary(self):
        b = boundary_region(np.zeros((5, 5), int))
        assert b.count == 0
        out = output_from_probs(np.full((2, 5, 5), 0.5))
        with pytest.raises(EmptyRegion):
            calibration_metrics(out, np.zeros((5, 5), int), b.data)

    def test_vertical_edge(self):
        lab = np.zeros((8, 8), int)
        lab[:, 4:] = 1
        m = boundary_region(lab, 2).data
        expected = np.zeros((8, 8), bool)
        expected[:, 2:6] = True
        np.testing.assert_array_equal(m, expected)

    def test_radius_zero_is_four_adjacency(self, rng):
        lab = rng.integers(0, 3, (9, 11))
        m = boundary_region(lab, 0).data
        ref = np.zeros_like(m)
        for i in range(9):
            for j in range(11):
                for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                    ii, jj = i + di, j + dj
                    if 0 <= ii < 9 and 0 <= jj < 11 and lab[ii, jj] != lab[i, j]:
                        ref[i, j] = True
        np.testing.assert_array_equal(m, ref)

    def test_chebyshev_definition(self, rng):
        lab = rng.integers(0, 3, (10, 10))
        lab[rng.random((10, 10)) < 0.1] = 2 ** 31 - 1
        m = boundary_region(lab, 1).data
        for i in range(10):
            for j in range(10):
                if lab[i, j] == 2 ** 31 - 1:
                    assert not m[i, j]
                    continue
                win = lab[max(0, i - 1):i + 2, max(0, j - 1):j + 2]
                win = win[win != 2 ** 31 - 1]
                assert m[i, j] == (win.min() != win.max())

    def test_all_background(self):
        assert all_region(np.zeros((6, 6), int)).count == 0

    def test_square_with_halo(self):
        lab = np.zeros((12, 12), int)
        lab[4:7, 4:7] = 1
        expected = np.zeros((12, 12), bool)
        expected[2:9, 2:9] = True
        np.testing.assert_array_equal(all_region(lab).data, expected)

    def test_no_background(self):
        assert all_region(np.ones((6, 6), int)).count == 36

    def test_patches_full_image(self):
        ps = local_patches((72, 72), 10, 72, seed=3)
        assert len(ps) == 10 and all(p.count == 72 * 72 for p in ps)

    def test_patches_deterministic_and_bounded(self):
        a = local_patches((100, 100), 10, 72, seed=5)
        b = local_patches((100, 100), 10, 72, seed=5)
        assert [p.origin for p in a] == [p.origin for p in b]
        assert all(0 <= y <= 28 and 0 <= x <= 28 for y, x in (p.origin for p in a))

    def test_patches_clamped(self, caplog):
        with caplog.at_level(logging.INFO, logger="calibra.metrics"):
            ps = local_patches((40, 50), 3, 72)
        assert ps[0].size == 40 and "clamped" in caplog.text


class TestBinning:
    def test_two_pixels(self):
        out = two_class([0.9, 0.9], [0, 0])
        bins = bin_predictions(out, np.array([[0, 1]]))
        assert bins.occupied.sum() == 1 and bins.counts[8] == 2
        np.testing.assert_allclose([bins.acc[8], bins.conf[8]], [0.5, 0.9])
        assert ece(bins) == pytest.approx(0.4) and mce(bins) == pytest.approx(0.4)

    def test_all_certain_correct(self):
        out = two_class([1.0, 1.0, 1.0], [0, 1, 0])
        bins = bin_predictions(out, np.array([[0, 1, 0]]))
        assert bins.counts[-1] == 3 and bins.counts[:-1].sum() == 0
        assert bins.acc[-1] == 1.0 and bins.conf[-1] == 1.0
        assert ece(bins) == 0.0 and mce(bins) == 0.0

    def test_equal_frequency_split(self):
        out = two_class([0.6, 0.9, 0.7, 0.8], [0, 0, 0, 0])
        bins = bin_predictions(out, np.zeros((1, 4), int), scheme="equal_frequency", n_bins=2)
        np.testing.assert_array_equal(bins.counts, [2, 2])
        np.testing.assert_allclose(bins.conf, [0.65, 0.85])
        np.testing.assert_allclose([bins.lo[0], bins.hi[0], bins.lo[1], bins.hi[1]], [0.6, 0.7, 0.8, 0.9])

    def test_weighted_gaps(self):
        bins = ReliabilityBins("equal_width", np.array([3, 0, 1]), np.array([0.6, np.nan, 0.4]),
                               np.array([0.5, np.nan, 0.9]), np.zeros(3), np.ones(3))
        assert ece(bins) == pytest.approx(0.2) and mce(bins) == pytest.approx(0.5)

    def test_bin_edges_are_right_closed(self):
        out = two_class([0.5, 0.5000001], [0, 0])
        bins = bin_predictions(out, np.zeros((1, 2), int))
        assert bins.counts[4] == 1 and bins.counts[5] == 1

    def test_unknown_scheme(self):
        with pytest.raises(ValidationError):
            bin_predictions(two_class([0.7], [0]), np.zeros((1, 1), int), scheme="log")


class TestClasswise:
    def test_sce_certain(self):
        out = output_from_probs(np.array([1.0, 0.0])[:, None, None])
        assert sce(out, np.array([[0]])) == 0.0

    def test_sce_hand(self):
        out = output_from_probs(np.array([0.7, 0.3])[:, None, None])
        assert sce(out, np.array([[0]])) == pytest.approx(0.3)

    def test_ace_four_pixels(self, rng):
        p = rng.dirichlet(np.ones(3), size=4).T[:, None, :]
        lab = rng.integers(0, 3, (1, 4))
        np.testing.assert_allclose(ace(output_from_probs(p), lab, n_bins=2),
                                   brute_ace(p[:, 0, :], lab.ravel(), 2), atol=1e-15)

    def test_mask_respected(self):
        out = output_from_probs(np.array([[[0.7, 0.2]], [[0.3, 0.8]]]))
        lab = np.array([[0, 0]])
        assert sce(out, lab, np.array([[True, False]])) == pytest.approx(0.3)


class TestSegMetrics:
    def test_identical(self, rng):
        lab = rng.integers(0, 3, (16, 16))
        r = seg_metrics(lab, lab)
        assert r == {"asd": 0.0, "sd": 1.0, "md95": 0.0, "vd": 1.0}

    def test_offset_squares(self):
        a = np.zeros((16, 16), int)
        b = np.zeros((16, 16), int)
        a[4:8, 4:8] = 1
        b[5:9, 4:8] = 1
        r = seg_metrics(b, a)
        assert r["vd"] == pytest.approx(0.75)
        assert r["md95"] == pytest.approx(1.0)
        assert 0 < r["asd"] <= 1.0 and 0 < r["sd"] < 1.0

    def test_nearest_rank(self):
        assert nearest_rank(np.array([3.0]), 95) == 3.0
        assert nearest_rank(np.arange(1.0, 21.0), 95) == 19.0
        assert nearest_rank(np.arange(1.0, 21.0), 100) == 20.0

    def test_missing_class_penalized(self):
        a = np.zeros((8, 8), int)
        a[2:4, 2:4] = 1
        r = seg_metrics(np.zeros((8, 8), int), a)
        assert r["vd"] == 0.0 and r["asd"] == pytest.approx(math.hypot(8, 8))

    def test_only_background(self):
        with pytest.raises(EmptyRegion):
            seg_metrics(np.zeros((4, 4), int), np.zeros((4, 4), int))


def calibrated_instance(rng, shape=(100, 100), n_cls=3):
    z = rng.normal(0, 2, (n_cls, *shape))
    out = softmax_temp(z, 1.0)
    cdf = np.cumsum(out.probs.data, axis=0)
    lab = np.minimum((rng.uniform(size=shape)[None] >= cdf).sum(axis=0), n_cls - 1)
    return out, lab


class TestEvaluate:
    def test_calibrated_data_has_small_errors(self, rng):
        out, lab = calibrated_instance(rng)
        rep = evaluate(out, lab, ("all",), background=-1)
        assert rep.value("all", "ece") < 0.02
        assert rep.value("all", "sce") < 0.02

    def test_local_max_at_least_avg(self):
        rng = np.random.default_rng(3)
        for _ in range(5):
            out, lab = calibrated_instance(rng, (40, 40))
            rep = evaluate(out, lab, ("local",), patch_size=16, seed=int(rng.integers(100)))
            for k in ("ece", "mce", "sce", "ace"):
                assert rep.value("local", k, "max") >= rep.value("local", k, "avg")

    def test_json_roundtrip(self, rng):
        out, lab = calibrated_instance(rng, (30, 30))
        rep = evaluate(out, lab, patch_size=10)
        back = CalibrationReport.from_json(rep.to_json())
        assert back.to_dict() == json.loads(rep.to_json())
        assert back.to_json() == rep.to_json()

    def test_empty_boundary_is_null(self, caplog):
        out = output_from_probs(np.full((2, 6, 6), 0.5))
        with caplog.at_level(logging.WARNING):
            rep = evaluate(out, np.ones((6, 6), int), ("boundary", "all"))
        assert rep.regions["boundary"] is None
        assert rep.regions["all"] is not None
        assert "boundary region is empty" in caplog.text

    def test_summary_and_pooled_bins(self, tmp_path, rng):
        outs, labs = zip(*[calibrated_instance(rng, (20, 20)) for _ in range(3)])
        reps = [evaluate(o, s, ("all",)) for o, s in zip(outs, labs)]
        summary = summarize_reports(reps)
        vals = [r.value("all", "ece") for r in reps]
        assert summary["all"]["ece"]["mean"] == pytest.approx(np.mean(vals))
        assert summary["boundary"]["ece"] is None
        bins = pooled_bins(outs, labs, [None] * 3)
        assert bins.total == 1200
        write_diagram_csv(bins, tmp_path / "d.csv")
        lines = (tmp_path / "d.csv").read_text().splitlines()
        assert lines[0] == "bin_lo,bin_hi,count,acc,conf" and len(lines) == 11
