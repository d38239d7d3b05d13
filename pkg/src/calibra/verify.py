"""Self-checks of the temperature-scaling theory on random and synthetic data.

Each suite returns a plain dict ``{name, passed, ...details}``.  ``corrupt``
deliberately breaks one sign inside the suite so the check must fail; it is a
negative control for the harness itself.
"""
from __future__ import annotations

import numpy as np

from .scaling import weighted_avg_logit
from .tensor_core import TemperatureField

SUITES = ("monotone", "equilibrium", "balance", "gradcheck")


def monotone(seed: int = 0, n_vectors: int = 1000, n_grid: int = 50, tol: float = 1e-9,
             corrupt: bool = False) -> dict:
    """Weighted average logit is non-decreasing in inverse temperature and lies in [mean, max]."""
    rng = np.random.default_rng([seed, 1])
    inv_temps = np.logspace(-3, 2, n_grid)
    if corrupt:
        inv_temps = inv_temps[::-1]
    worst_drop = 0.0
    worst_bound = 0.0
    for _ in range(n_vectors):
        n_cls = int(rng.integers(2, 9))
        logit = rng.normal(0.0, rng.uniform(0.5, 5.0), n_cls)
        column = logit[:, None, None]
        vals = np.array([weighted_avg_logit(column, 1.0 / a) for a in inv_temps])
        worst_drop = max(worst_drop, float(np.max(vals[:-1] - vals[1:], initial=0.0)))
        lo = np.mean(logit) - vals
        hi = vals - np.max(logit)
        worst_bound = max(worst_bound, float(np.max(lo)), float(np.max(hi)))
    return {
        "name": "monotone",
        "passed": worst_drop <= tol and worst_bound <= tol,
        "max_decrease": worst_drop,
        "max_bound_violation": worst_bound,
        "vectors": n_vectors,
    }


def _global_presets(seed, ks, shape, n_val, preset="stripes"):
    from .synthgen import SynthSpec, generate

    for k in ks:
        spec = SynthSpec(shape=shape, classes=4, preset=preset, miscal=f"global:{k}",
                         seed=seed, counts=(("val", n_val),))
        yield k, generate(spec).splits["val"]


def equilibrium(seed: int = 0, ks=(0.5, 2.0, 3.0, 5.0), shape=(64, 64), n_val: int = 20,
                corrupt: bool = False) -> dict:
    """Bisection hits the equilibrium, matches gradient descent and recovers k."""
    from .ts_opt import _gather, _weighted, fit_ts_bisection, fit_ts_gradient

    rows = []
    for k, ds in _global_presets(seed, ks, shape, n_val):
        b = fit_ts_bisection(ds)
        g = fit_ts_gradient(ds)
        px = _gather(ds.samples, "all", 0)
        true_sum = float(px.true.sum())
        resid = abs(_weighted(px, 1.0 / b.temperature) - true_sum) / abs(true_sum)
        t_grad = 1.0 / g.temperature if corrupt else g.temperature
        rows.append({
            "k": k,
            "t_bisection": b.temperature,
            "t_gradient": g.temperature,
            "branch": b.branch,
            "rel_residual": resid,
            "method_gap": abs(t_grad / b.temperature - 1.0),
            "recovery_gap": abs(b.temperature / k - 1.0),
        })
    ok = all(r["branch"] == "interior" and r["rel_residual"] < 1e-8 and r["method_gap"] < 1e-3
             and r["recovery_gap"] < 1e-2 for r in rows)
    return {"name": "equilibrium", "passed": ok, "presets": rows}


def balance(seed: int = 0, ks=(0.5, 2.0, 3.0, 5.0), shape=(64, 64), n_val: int = 20,
            corrupt: bool = False) -> dict:
    """NLL equals entropy per supervised pixel at the fitted temperature."""
    from .scaling import entropy, nll, softmax_temp
    from .ts_opt import count_supervised, fit_ts_bisection, supervision_mask

    rows = []
    for k, ds in _global_presets(seed, ks, shape, n_val):
        fit = fit_ts_bisection(ds)
        temps = TemperatureField.scalar(fit.temperature)
        total = 0.0
        for i, s in enumerate(ds.samples):
            m = supervision_mask(s)
            if not m.any():
                continue
            out = softmax_temp(s.logits, temps, i)
            h = entropy(out.probs, m)
            total += nll(out.probs, s.labels, m) + (h if corrupt else -h)
        per_pixel = abs(total) / count_supervised(ds)
        rows.append({"k": k, "branch": fit.branch, "per_pixel_gap": per_pixel})
    ok = all(r["branch"] == "interior" and r["per_pixel_gap"] < 1e-4 for r in rows)
    return {"name": "balance", "passed": ok, "presets": rows}


def gradcheck(seed: int = 0, n_seeds: int = 20, classes: int = 3, size: int = 8,
              tol: float = 1e-4, need: float = 0.99, scale: float = 0.05,
              corrupt: bool = False) -> dict:
    """Analytic tree-net gradients against central differences."""
    from .tree_net import TreeNetParams, gradcheck as check, prepare

    rows = []
    for s in range(n_seeds):
        rng = np.random.default_rng([seed, 4, s])
        logit = rng.normal(0.0, 2.0, (classes, size, size))
        img = rng.normal(0.0, 1.0, (1, size, size))
        lab = rng.integers(0, classes, (size, size))
        params = TreeNetParams.random(classes, 1, rng, scale=scale)
        inp = prepare(logit, img, lab)
        res = check(params, inp)
        if corrupt:
            res.analytic = -res.analytic
        rows.append({"seed": s, "pass_fraction": res.pass_fraction(tol),
                     "checked": res.checked, "excluded": int(res.excluded.sum())})
    ok = all(r["pass_fraction"] >= need for r in rows)
    return {"name": "gradcheck", "passed": ok, "instances": rows,
            "min_pass_fraction": min(r["pass_fraction"] for r in rows)}


def run(suites=SUITES, seed: int = 0, corrupt: bool = False, **overrides) -> list[dict]:
    table = {"monotone": monotone, "equilibrium": equilibrium, "balance": balance, "gradcheck": gradcheck}
    out = []
    for name in suites:
        if name not in table:
            raise KeyError(name)
        out.append(table[name](seed=seed, corrupt=corrupt, **overrides.get(name, {})))
    return out
