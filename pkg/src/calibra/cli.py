"""``calibra`` command line: gen, fit, apply, eval, fuse, verify.

Every command prints exactly one JSON document on stdout; logs go to stderr.
Exit status is 0 on success, 1 on runtime errors and 2 on usage errors.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .errors import CalibraError, ValidationError

log = logging.getLogger("calibra")


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------

def _emit(doc) -> None:
    sys.stdout.write(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    sys.stdout.flush()


def _shape(text: str) -> tuple:
    try:
        rows, cols = (int(x) for x in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"shape must look like 64x64, got {text!r}") from None
    return rows, cols


def _counts(text: str) -> tuple:
    out = []
    for part in text.split(","):
        try:
            k, v = part.split("=")
            out.append((k.strip(), int(v)))
        except ValueError:
            raise argparse.ArgumentTypeError(f"counts must look like train=30,val=20, got {text!r}") from None
    return tuple(out)


def _csv_list(text: str) -> list:
    return [tok.strip() for tok in text.split(",") if tok.strip()]


def _threads(args) -> int:
    if args.threads is not None:
        return max(1, args.threads)
    env = os.environ.get("CALIBRA_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise UsageError(f"CALIBRA_THREADS must be an integer, got {env!r}") from None
    return os.cpu_count() or 1


def _load_split(data_dir, split, required=True):
    from .tensor_core import load_dataset

    manifest = Path(data_dir) / f"{split}.json"
    empty = not manifest.exists()
    if not empty:
        try:
            empty = not json.loads(manifest.read_text()).get("samples")
        except json.JSONDecodeError as exc:
            raise CalibraError(f"{manifest}: invalid JSON ({exc})") from None
    if empty:
        if required:
            raise CalibraError(f"no {'validation' if split == 'val' else split} samples in {data_dir}")
        return None
    return load_dataset(manifest)


# --------------------------------------------------------------------------
# gen
# --------------------------------------------------------------------------

def cmd_gen(args) -> dict:
    if args.fusion:
        from .synthgen import FusionProfile, generate_fusion_bench, write_fusion_bench

        bench = generate_fusion_bench(args.shape, args.classes, args.atlases, FusionProfile(), args.seed)
        out = write_fusion_bench(bench, args.out)
        return {"command": "gen", "kind": "fusion", "out": str(out), "atlases": args.atlases,
                "classes": args.classes, "seed": args.seed}
    from .synthgen import SynthSpec, generate, write_synth

    spec = SynthSpec(shape=args.shape, classes=args.classes, preset=args.preset, miscal=args.miscal,
                     rho=args.rho, seed=args.seed, counts=args.counts)
    result = generate(spec)
    out = write_synth(result, args.out)
    return {"command": "gen", "kind": "dataset", "out": str(out), "spec": spec.to_dict(),
            "samples": {k: len(v) for k, v in result.splits.items()}}


# --------------------------------------------------------------------------
# fit
# --------------------------------------------------------------------------

def _train_config(args):
    from .tree_net import TrainConfig

    schedule = [(0, args.lr)]
    if args.lr_step is not None and args.lr_step > 0:
        schedule.append((args.lr_step, args.lr * args.lr_decay))
    return TrainConfig(epochs=args.epochs, lr_schedule=tuple(schedule), accumulate=args.accumulate,
                       seed=args.seed, mask_policy=args.mask, threads=_threads(args))


def cmd_fit(args) -> dict:
    from . import ts_opt
    from .tensor_core import TemperatureField

    val = _load_split(args.data, "val")
    out = Path(args.out)
    if args.method == "ts":
        if args.solver == "gradient":
            fit = ts_opt.fit_ts_gradient(val, args.mask)
        else:
            fit = ts_opt.fit_ts_bisection(val, args.mask)
        ts_opt.save_temperatures(out, "ts", TemperatureField.scalar(fit.temperature))
        _annotate(out, classes=val.n_classes, fit=fit.to_dict())
        return {"command": "fit", "method": "ts", "out": str(out), "t_global": fit.temperature,
                "converged": fit.converged, "branch": fit.branch, "iterations": fit.iterations}
    if args.method == "ibts-direct":
        field, results = ts_opt.fit_ibts_per_image(val, args.mask, threads=_threads(args), details=True)
        ts_opt.save_temperatures(out, "ibts-direct", field, val.ids)
        _annotate(out, classes=val.n_classes)
        return {"command": "fit", "method": "ibts-direct", "out": str(out),
                "per_image": dict(zip(val.ids, (float(v) for v in field.values))),
                "branches": [r.branch for r in results]}
    from .tree_net import save_params, train

    train_ds = _load_split(args.data, "train", required=False) or val
    art = train(train_ds, args.method, _train_config(args), val=val)
    save_params(art.params, out, args.method)
    with open(out / "loss_curve.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "train_nll", "val_nll", "lr"])
        for row in art.loss_curve:
            writer.writerow([row["epoch"], repr(row["train_nll"]), repr(row["val_nll"]), repr(row["lr"])])
    last = art.loss_curve[-1]["val_nll"] if art.loss_curve else None
    return {"command": "fit", "method": args.method, "out": str(out), "best_epoch": art.best_epoch,
            "epochs": len(art.loss_curve), "final_val_nll": last}


def _annotate(path, **extra):
    doc = json.loads(Path(path).read_text())
    doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


# --------------------------------------------------------------------------
# apply
# --------------------------------------------------------------------------

def _model_temperatures(model, ds):
    """Return ``(method, TemperatureField)`` for every sample of ``ds``."""
    from . import ts_opt
    from .tensor_core import TemperatureField

    if model == "identity":
        return "identity", TemperatureField.scalar(1.0)
    path = Path(model)
    if path.is_dir():
        from .tree_net import load_params, predict

        params, mode = load_params(path)
        if params.classes != ds.n_classes:
            raise ValidationError(f"model expects {params.classes} classes, data has {ds.n_classes}")
        return mode, predict(params, ds, mode)
    doc = json.loads(path.read_text()) if path.exists() else None
    if doc is None:
        raise CalibraError(f"model {model} not found")
    if "classes" in doc and doc["classes"] != ds.n_classes:
        raise ValidationError(f"model expects {doc['classes']} classes, data has {ds.n_classes}")
    method, field = ts_opt.load_temperatures(path, ds.ids if "per_image" in doc else None)
    return method, field


def cmd_apply(args) -> dict:
    from .scaling import softmax_temp
    from .tensor_core import _write, save_npy

    ds = _load_split(args.data, args.split)
    method, temps = _model_temperatures(args.model, ds)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, s in enumerate(ds.samples):
        res = softmax_temp(s.logits, temps, i)
        temp = temps.for_sample(i)
        t_map = np.broadcast_to(np.asarray(temp, dtype=np.float64), s.logits.spatial)
        save_npy(res.probs.data, out / f"{s.id}_probs.npy")
        save_npy(t_map, out / f"{s.id}_temps.npy")
        _write(out / f"{s.id}_pred.npy", np.ascontiguousarray(res.pred_labels.data, dtype="<i4"))
        entries.append({"id": s.id, "probs": f"{s.id}_probs.npy", "temps": f"{s.id}_temps.npy",
                        "pred": f"{s.id}_pred.npy"})
    manifest = {"method": method, "split": args.split, "classes": ds.n_classes, "samples": entries}
    (out / "predictions.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return {"command": "apply", "method": method, "out": str(out), "samples": len(entries)}


# --------------------------------------------------------------------------
# eval
# --------------------------------------------------------------------------

def _load_prediction(pred_dir, entry):
    from .scaling import CalibratedOutput
    from .tensor_core import LabelMap, ProbMap, load_labels, load_npy

    probs = load_npy(pred_dir / entry["probs"], np.float64)
    pred = load_labels(pred_dir / entry["pred"])
    conf = np.take_along_axis(probs, pred[None].astype(np.intp), axis=0)[0]
    return CalibratedOutput(ProbMap(probs), conf, LabelMap(pred, probs.shape[0]))


def cmd_eval(args) -> dict:
    from . import metrics

    regions = args.regions
    for r in regions:
        if r not in ("all", "boundary", "local"):
            raise UsageError(f"unknown region {r!r}")
    ds = _load_split(args.data, args.split)
    pred_dir = Path(args.pred)
    try:
        manifest = json.loads((pred_dir / "predictions.json").read_text())
    except FileNotFoundError:
        raise CalibraError(f"{pred_dir}: no predictions.json (run apply first)") from None
    by_id = {e["id"]: e for e in manifest["samples"]}
    reports, outputs, labels, masks = {}, [], [], []
    for i, s in enumerate(ds.samples):
        if s.id not in by_id:
            raise CalibraError(f"no prediction for sample {s.id}")
        out = _load_prediction(pred_dir, by_id[s.id])
        rep = metrics.evaluate(out, s.labels, regions, n_bins=args.bins, radius=args.radius,
                               background=ds.background, patch_size=args.patch_size,
                               seed=args.seed + i)
        reports[s.id] = rep
        outputs.append(out)
        labels.append(s.labels)
        masks.append(metrics.all_region(s.labels, args.radius, ds.background))
    summary = metrics.summarize_reports(list(reports.values()))
    doc = {
        "config": {"bins": args.bins, "radius": args.radius, "patch_size": args.patch_size,
                   "regions": regions, "seed": args.seed, "split": args.split},
        "summary": summary,
        "samples": {k: v.to_dict() for k, v in reports.items()},
    }
    if args.out:
        Path(args.out).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    if args.diagram:
        metrics.write_diagram_csv(metrics.pooled_bins(outputs, labels, masks, args.bins), args.diagram)
    return {"command": "eval", "out": args.out, "summary": summary}


# --------------------------------------------------------------------------
# fuse
# --------------------------------------------------------------------------

def cmd_fuse(args) -> dict:
    from . import fusion, metrics
    from .synthgen import calibrate_atlas_probs, read_fusion_bench
    from .tensor_core import _write

    bench = read_fusion_bench(args.bench)
    tgt = bench.target
    probs = {"true": lambda: tgt.probs_true, "uncal": lambda: tgt.probs_distorted,
             "calibrated": lambda: calibrate_atlas_probs(bench)}[args.probs]()
    stack = fusion.AtlasStack(tgt.labels, probs)
    weights = None
    if args.method in ("mv", "pv"):
        fused, _ = fusion.fuse_vote(stack, "majority" if args.method == "mv" else "plurality")
    elif args.method == "svwv":
        fused = fusion.fuse_svwv(stack)
    else:
        fused, weights = fusion.fuse_jlf(stack, args.reg)
    baseline, _ = fusion.fuse_vote(stack, "majority")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write(out / "fused.npy", np.ascontiguousarray(fused.data, dtype="<i4"))
    if weights is not None:
        _write(out / "weights.npy", np.ascontiguousarray(weights, dtype="<f8"))
    report = {
        "method": args.method,
        "probs": args.probs,
        "seg": metrics.seg_metrics(fused, tgt.truth),
        "vote_change_vs_mv": fusion.vote_change_report(baseline, fused, tgt.truth,
                                                       fusion.changeable_region(stack)),
    }
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return {"command": "fuse", "out": str(out), **report}


# --------------------------------------------------------------------------
# verify
# --------------------------------------------------------------------------

def cmd_verify(args) -> dict:
    from . import verify

    for s in args.suite:
        if s not in verify.SUITES:
            raise UsageError(f"unknown suite {s!r}; choose from {', '.join(verify.SUITES)}")
    results = verify.run(args.suite, seed=args.seed, corrupt=args.corrupt)
    width = max(len(r["name"]) for r in results)
    for r in results:
        print(f"{r['name']:<{width}}  {'PASS' if r['passed'] else 'FAIL'}", file=sys.stderr)
    passed = all(r["passed"] for r in results)
    doc = {"command": "verify", "passed": passed, "suites": results}
    if not passed:
        raise _VerifyFailed(doc)
    return doc


class _VerifyFailed(Exception):
    def __init__(self, doc):
        super().__init__("verification failed")
        self.doc = doc


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file of flag defaults (CLI flags win)")
    common.add_argument("--threads", type=int, help="worker threads (default: $CALIBRA_THREADS or all cores)")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("-v", "--verbose", action="count", default=0)

    p = argparse.ArgumentParser(prog="calibra", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", parents=[common], help="generate a synthetic dataset or fusion benchmark")
    g.add_argument("--out", required=True)
    g.add_argument("--preset", default="stripes", choices=["stripes", "nested-squares", "voronoi-blobs"])
    g.add_argument("--shape", type=_shape, default=(64, 64))
    g.add_argument("--classes", type=int, default=4)
    g.add_argument("--miscal", default="none")
    g.add_argument("--rho", type=float, default=0.1)
    g.add_argument("--counts", type=_counts, default=(("train", 30), ("val", 20), ("test", 10)))
    g.add_argument("--fusion", action="store_true", help="write a multi-atlas fusion benchmark instead")
    g.add_argument("--atlases", type=int, default=5)
    g.set_defaults(func=cmd_gen)

    f = sub.add_parser("fit", parents=[common], help="fit a calibration model on the val split")
    f.add_argument("--method", required=True, choices=["ts", "ibts", "lts", "ibts-direct"])
    f.add_argument("--data", required=True)
    f.add_argument("--out", required=True)
    f.add_argument("--mask", default="all", choices=["all", "full"])
    f.add_argument("--solver", default="bisection", choices=["bisection", "gradient"])
    f.add_argument("--epochs", type=int, default=100)
    f.add_argument("--lr", type=float, default=1e-4)
    f.add_argument("--lr-step", type=int, default=50, help="epoch at which the learning rate decays")
    f.add_argument("--lr-decay", type=float, default=0.1)
    f.add_argument("--accumulate", type=int, default=4)
    f.set_defaults(func=cmd_fit)

    a = sub.add_parser("apply", parents=[common], help="write calibrated probabilities")
    a.add_argument("--model", required=True, help="temperature JSON, tree-net directory, or 'identity'")
    a.add_argument("--data", required=True)
    a.add_argument("--split", default="test")
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_apply)

    e = sub.add_parser("eval", parents=[common], help="calibration metrics per region")
    e.add_argument("--pred", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--regions", type=_csv_list, default=["all", "boundary", "local"])
    e.add_argument("--bins", type=int, default=10)
    e.add_argument("--radius", type=int, default=2)
    e.add_argument("--patch-size", type=int, default=72)
    e.add_argument("--out")
    e.add_argument("--diagram", help="reliability-diagram CSV over the All region")
    e.set_defaults(func=cmd_eval)

    u = sub.add_parser("fuse", parents=[common], help="multi-atlas label fusion on a benchmark")
    u.add_argument("--bench", required=True)
    u.add_argument("--method", required=True, choices=["mv", "pv", "svwv", "jlf"])
    u.add_argument("--probs", default="true", choices=["true", "uncal", "calibrated"])
    u.add_argument("--reg", type=float, default=0.01)
    u.add_argument("--out", required=True)
    u.set_defaults(func=cmd_fuse)

    v = sub.add_parser("verify", parents=[common], help="run the theory self-checks")
    v.add_argument("--suite", type=_csv_list, default=["monotone", "equilibrium", "balance", "gradcheck"])
    v.add_argument("--corrupt", action="store_true", help=argparse.SUPPRESS)
    v.set_defaults(func=cmd_verify)
    return p


def _with_config(parser, argv):
    """Re-parse with defaults taken from ``--config`` so explicit flags still win."""
    args = parser.parse_args(argv)
    if not args.config:
        return args
    try:
        cfg = json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        parser.error(f"cannot read config {args.config}: {exc}")
    if not isinstance(cfg, dict):
        parser.error("config file must hold a JSON object")
    sub = parser._subparsers._group_actions[0].choices[args.command]
    known = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, value in cfg.items():
        dest = key.replace("-", "_")
        if dest not in known or dest in ("config", "func"):
            parser.error(f"unknown config key {key!r} for {args.command}")
        action = known[dest]
        if isinstance(value, str) and action.type is not None:
            try:
                value = action.type(value)
            except argparse.ArgumentTypeError as exc:
                parser.error(str(exc))
        defaults[dest] = value
        action.required = False
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _with_config(parser, argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s",
                        level=logging.WARNING - 10 * min(args.verbose, 2))
    try:
        _emit(args.func(args))
        return 0
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"calibra: error: {exc}", file=sys.stderr)
        return 2
    except _VerifyFailed as exc:
        _emit(exc.doc)
        return 1
    except (CalibraError, OSError, ValueError, KeyError) as exc:
        print(f"calibra: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
