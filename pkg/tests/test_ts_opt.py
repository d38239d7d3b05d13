import numpy as np
import pytest

from calibra.errors import DomainError, ValidationError
from calibra.synthgen import SynthSpec, generate
from calibra.tensor_core import T_MAX, TemperatureField
from calibra.ts_opt import (INV_TEMP_MAX, GradientConfig, count_supervised, equilibrium_residual,
                            fit_ibts_per_image, fit_ts_bisection, fit_ts_gradient,
                            load_temperatures, nll_at, save_temperatures, supervision_mask)

from conftest import make_dataset, make_sample


def sampled_pair(rng, shape=(12, 12), classes=3, scale=2.0):
    logits = rng.normal(0.0, scale, (classes, *shape))
    p = np.exp(logits - logits.max(axis=0))
    p /= p.sum(axis=0)
    u = rng.uniform(size=shape)
    labels = np.minimum((u[None] >= np.cumsum(p, axis=0)).sum(axis=0), classes - 1)
    return logits, labels


def balanced_pair(rng, **kw):
    """Logits rescaled so that unit temperature is exactly NLL-optimal (float32-exact)."""
    logits, labels = sampled_pair(rng, **kw)
    for _ in range(3):
        fit = fit_ts_bisection(make_dataset([(logits, labels)]), "full")
        logits = (logits / fit.temperature).astype(np.float32).astype(np.float64)
    return logits, labels


def grid_oracle(ds, policy="full"):
    grid = np.logspace(-2, 2, 4001)
    vals = [nll_at(ds, t, policy) for t in grid]
    return grid[int(np.argmin(vals))]


def synth_val(miscal, n=4, shape=(32, 32), seed=0):
    spec = SynthSpec(shape=shape, miscal=miscal, seed=seed, counts=(("val", n),))
    return generate(spec).splits["val"]


class TestSupervisionMask:
    def test_policies(self):
        lab = np.zeros((6, 6), int)
        lab[2:4, 2:4] = 1
        lab[0, 0] = 2 ** 31 - 1
        s = make_sample(np.zeros((2, 6, 6)), lab)
        full = supervision_mask(s, "full")
        assert full.sum() == 35
        allm = supervision_mask(s, "all")
        # the square plus its 2-px halo covers the whole map; only the ignored pixel drops out
        assert allm.sum() == 35
        custom = supervision_mask(s, lambda smp: np.eye(6, dtype=bool))
        assert custom.sum() == 5

    def test_all_excludes_far_background(self):
        lab = np.zeros((12, 12), int)
        lab[0:2, 0:2] = 1
        m = supervision_mask(make_sample(np.zeros((2, 12, 12)), lab), "all")
        assert m[:4, :4].all() and not m[5:, 5:].any()

    def test_unknown(self):
        with pytest.raises(ValidationError):
            supervision_mask(make_sample(np.zeros((2, 2, 2)), np.zeros((2, 2), int)), "most")


class TestGradientFit:
    def test_flat_objective_keeps_init(self):
        ds = make_dataset([(np.ones((3, 4, 4)), np.zeros((4, 4), int))])
        fit = fit_ts_gradient(ds, "full")
        assert fit.temperature == 1.0
        assert fit.converged

    @pytest.mark.parametrize("k", [0.5, 2.0, 3.0])
    def test_recovers_scale(self, rng, k):
        logits, labels = balanced_pair(rng)
        ds = make_dataset([(k * logits, labels)])
        fit = fit_ts_gradient(ds, "full")
        np.testing.assert_allclose(fit.temperature, k, rtol=1e-2)
        np.testing.assert_allclose(fit.temperature, grid_oracle(ds), rtol=2.5e-3)

    def test_overconfident_synthetic(self):
        fit = fit_ts_gradient(synth_val("global:3"))
        assert fit.temperature > 1.0
        assert fit.branch == "interior"

    def test_nll_not_above_init(self):
        ds = synth_val("global:2", n=2)
        fit = fit_ts_gradient(ds)
        assert fit.final_nll <= nll_at(ds, 1.0)

    def test_max_iters_branch(self):
        fit = fit_ts_gradient(synth_val("global:3", n=1), config=GradientConfig(max_iters=2))
        assert not fit.converged and fit.branch == "max_iters"


class TestBisectionFit:
    @pytest.mark.parametrize("k", [0.5, 2.0, 5.0])
    def test_agrees_with_gradient(self, k):
        ds = synth_val(f"global:{k}", n=3)
        b, g = fit_ts_bisection(ds), fit_ts_gradient(ds)
        np.testing.assert_allclose(g.temperature, b.temperature, rtol=1e-3)
        np.testing.assert_allclose(b.temperature, grid_oracle(ds, "all"), rtol=2.5e-3)

    def test_true_logit_equals_mean_gives_unbounded(self):
        # the true logit equals the per-pixel mean logit at both pixels
        logits = np.array([[[2.0, 5.0]], [[1.0, 4.0]], [[3.0, 6.0]]])
        labels = np.array([[0, 0]])
        fit = fit_ts_bisection(make_dataset([(logits, labels)]), "full")
        assert fit.branch == "unbounded"
        assert fit.temperature == T_MAX
        assert not fit.converged

    def test_single_underconfident_pixel_saturates(self):
        fit = fit_ts_bisection(make_dataset([(np.array([[[2.0]], [[0.0]]]), np.array([[0]]))]), "full")
        assert fit.branch == "temp_min"
        np.testing.assert_allclose(fit.temperature, 1.0 / INV_TEMP_MAX)

    def test_residual_tolerance(self):
        from calibra.ts_opt import _gather, _weighted

        ds = synth_val("global:2", n=2)
        fit = fit_ts_bisection(ds)
        pix = _gather(ds.samples, "all", 0)
        true_sum = pix.true.sum()
        assert abs(_weighted(pix, 1.0 / fit.temperature) - true_sum) < 1e-8 * abs(true_sum)

    def test_no_supervised_pixels(self):
        ds = make_dataset([(np.zeros((2, 3, 3)), np.full((3, 3), 2 ** 31 - 1))])
        with pytest.raises(DomainError):
            fit_ts_bisection(ds, "full")


class TestPerImageFit:
    def test_two_scales(self, rng):
        a, la = balanced_pair(rng)
        b, lb = balanced_pair(rng)
        ds = make_dataset([(2.0 * a, la), (0.5 * b, lb)])
        temps = fit_ibts_per_image(ds, "full")
        np.testing.assert_allclose(temps.values, [2.0, 0.5], rtol=1e-2)
        oracle = [grid_oracle(make_dataset([p])) for p in [(2.0 * a, la), (0.5 * b, lb)]]
        np.testing.assert_allclose(temps.values, oracle, rtol=2.5e-3)

    def test_identical_images(self, rng):
        a, la = sampled_pair(rng)
        temps = fit_ibts_per_image(make_dataset([(a, la), (a, la)]), "full")
        assert temps.values[0] == temps.values[1]

    def test_unbounded_image_only(self, rng):
        a, la = sampled_pair(rng)
        flat = np.full((3, 12, 12), 2.0)
        temps, res = fit_ibts_per_image(make_dataset([(a, la), (flat, la)]), "full", details=True)
        assert temps.values[1] == T_MAX and res[1].branch == "unbounded"
        assert temps.values[0] < 100 and res[0].branch == "interior"

    def test_threads_do_not_change_result(self):
        ds = synth_val("per-image:0.5:3", n=4)
        np.testing.assert_array_equal(fit_ibts_per_image(ds, threads=1).values,
                                      fit_ibts_per_image(ds, threads=3).values)

    def test_error_names_sample(self, rng):
        a, la = sampled_pair(rng)
        ds = make_dataset([(a, la), (a, np.full_like(la, 2 ** 31 - 1))])
        with pytest.raises(DomainError, match="val_0001"):
            fit_ibts_per_image(ds, "full")


class TestEquilibriumResidual:
    def test_zero_at_fit(self):
        ds = synth_val("global:3", n=3)
        fit = fit_ts_bisection(ds)
        r = equilibrium_residual(ds, TemperatureField.scalar(fit.temperature))
        assert abs(r) / count_supervised(ds) < 1e-4

    def test_uniform_with_wrong_labels(self):
        ds = make_dataset([(np.zeros((4, 3, 3)), np.full((3, 3), 2))])
        np.testing.assert_allclose(equilibrium_residual(ds, 1.0, mask_policy="full"), 0.0, atol=1e-12)

    def test_positive_when_overconfident(self):
        ds = synth_val("global:3", n=2)
        assert equilibrium_residual(ds, 1.0) > 0

    def test_granularities_consistent(self):
        ds = synth_val("global:2", n=2)
        total = equilibrium_residual(ds, 1.5)
        per_image = equilibrium_residual(ds, 1.5, "per-image")
        per_pixel = equilibrium_residual(ds, 1.5, "per-pixel")
        np.testing.assert_allclose(per_image.sum(), total, rtol=1e-10)
        np.testing.assert_allclose(sum(np.nansum(m) for m in per_pixel), total, rtol=1e-8)

    def test_length_mismatch(self):
        ds = synth_val("none", n=2)
        with pytest.raises(ValidationError):
            equilibrium_residual(ds, TemperatureField.per_image([1.0]))


class TestTemperatureFiles:
    def test_global_roundtrip(self, tmp_path):
        save_temperatures(tmp_path / "m.json", "ts", TemperatureField.scalar(2.5))
        method, temps = load_temperatures(tmp_path / "m.json")
        assert method == "ts" and temps.kind == "global" and float(temps.values) == 2.5

    def test_per_image_roundtrip_reorders(self, tmp_path):
        save_temperatures(tmp_path / "m.json", "x", TemperatureField.per_image([1.0, 2.0]), ["a", "b"])
        _, temps = load_temperatures(tmp_path / "m.json", ["b", "a"])
        np.testing.assert_array_equal(temps.values, [2.0, 1.0])

    def test_per_image_missing_id(self, tmp_path):
        save_temperatures(tmp_path / "m.json", "x", TemperatureField.per_image([1.0]), ["a"])
        with pytest.raises(ValidationError, match="no temperature for c"):
            load_temperatures(tmp_path / "m.json", ["c"])

    def test_local_not_serialized(self, tmp_path):
        with pytest.raises(ValidationError):
            save_temperatures(tmp_path / "m.json", "x", TemperatureField.local(np.ones((2, 2))))
