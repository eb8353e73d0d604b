"""``adiposeg`` command line.

Exit status: 0 success, 1 runtime failure, 2 configuration error.
"""
from __future__ import annotations

import argparse
import csv
import json
import platform
import sys
import time
from contextlib import contextmanager
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__, _kernels, losses  # noqa: F401  (losses registers seg_loss)
from .autodiff import OpAttrs, grad_check
from .config import ConfigError, RunConfig, load_run_config, parse_run_config
from .labeler import LabelerConfig, label_volume
from .metrics import aggregate_cv, evaluate_mask
from .nets import build_network, count_params
from .patching import LabelMask, normalize_volume
from .phantom import CohortConfig, generate_cohort
from .profiles import compute_profile, emit_report, group_profiles, write_group_csv
from .seeds import derive_seed
from .storage import load_weights, read_mask, read_volume, save_weights, write_mask, write_probabilities, write_volume
from .training import Scenario, dataset_from_cohort, predict_volume, run_scenario, train

GRADCHECK_CASES = [
    ("conv3d", OpAttrs(kernel=(3, 3, 3), padding=1), None),
    ("conv3d", OpAttrs(kernel=(3, 3, 3), dilation=2, padding=2), [(1, 2, 5, 5, 5), (2, 2, 3, 3, 3), (2,)]),
    ("conv3d", OpAttrs(kernel=(1, 1, 1)), None),
    ("conv3d_transpose", OpAttrs(kernel=(2, 2, 2), stride=2), None),
    ("batchnorm3d", OpAttrs(), None),
    ("relu", OpAttrs(), None),
    ("maxpool3d", OpAttrs(kernel=(2, 2, 2), stride=2), None),
    ("add", OpAttrs(coeffs=(0.5, 0.5)), None),
    ("concat_channels", OpAttrs(), None),
    ("softmax_channels", OpAttrs(), None),
    ("sum", OpAttrs(), None),
    ("seg_loss", OpAttrs(coeffs=(1.0, 1.0, 1.0)), None),
    ("seg_loss", OpAttrs(coeffs=(0.5, 1.0, 2.0), gamma=0.0), None),
]


class RunFailure(RuntimeError):
    pass


@contextmanager
def thread_limit(n: int):
    """Cap kernel and BLAS threads; ``1`` guarantees bit-determinism."""
    from threadpoolctl import threadpool_limits

    _kernels.set_num_threads(n)
    with threadpool_limits(limits=n):
        yield


def _write_manifest(out: Path, command: str, config: dict, started: float, extra=None):
    doc = dict(
        command=command,
        code_version=__version__,
        kernel_backend=_kernels.backend_name(),
        python=platform.python_version(),
        numpy=np.__version__,
        config=config,
        seconds=round(time.time() - started, 3),
    )
    if extra:
        doc.update(extra)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "run_manifest.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def _write_rows(path: Path, header, rows):
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow(["" if v is None else (repr(v) if isinstance(v, float) else v) for v in r])


def _report_rows(report, extra=()):
    return [tuple(extra) + (cls, metric, value) for cls, metric, value in report.rows()]


# ------------------------------------------------------------ subcommands

def cmd_gen_cohort(args):
    started = time.time()
    cfg = CohortConfig(style=args.style, n_subjects=args.subjects, seed=args.seed, name=args.name,
                       n_folds=args.folds)
    cohort = generate_cohort(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "cohort.json").write_text(json.dumps(cohort.manifest(), indent=2, sort_keys=True) + "\n")
    if args.write_volumes:
        for i, s in enumerate(cohort.subjects):
            vol, mask, _ = cohort.phantom(i)
            write_volume(out / "volumes" / s["id"], vol)
            write_mask(out / "masks" / s["id"], mask)
    _write_manifest(out, "gen-cohort", asdict(cfg), started)
    print(f"cohort {cfg.name}: {cfg.n_subjects} subjects -> {out}")


def cmd_label(args):
    started = time.time()
    vol = read_volume(args.volume)
    mask, log = label_volume(vol, LabelerConfig())
    out = Path(args.out)
    write_mask(out / "mask", mask)
    (out / "convergence.json").write_text(json.dumps(log, indent=2) + "\n")
    _write_manifest(out, "label", asdict(LabelerConfig()), started)
    fallbacks = sum(s["fallback"] for s in log["slices"])
    print(f"labeled {args.volume}: {len(log['slices'])} slices with adipose tissue, {fallbacks} fallbacks")


def _load_config(args) -> RunConfig:
    if getattr(args, "config", None):
        return load_run_config(args.config)
    return parse_run_config({})


def cmd_train(args):
    started = time.time()
    rc = _load_config(args)
    name = args.cohort or rc.scenario.a
    if name not in rc.cohorts:
        raise ConfigError("cohort", f"cohort {name!r} is not configured")
    cohort = generate_cohort(rc.cohorts[name])
    fold = args.fold
    tr = dataset_from_cohort(cohort, cohort.split(fold, "train"))
    va = dataset_from_cohort(cohort, cohort.split(fold, "val"))
    tcfg = replace(rc.train, seed=derive_seed(rc.seed, "train", fold))
    net = build_network(rc.model, {**rc.net, "in_channels": tr.n_channels}, derive_seed(rc.seed, "init", rc.model, fold))
    res = train(net, tr, va, tcfg, stream=f"{name}/train",
                log=(lambda r: print(json.dumps(r), flush=True)) if args.verbose else None)
    out = Path(args.out)
    save_weights(out / "weights", res.net)
    _write_rows(out / "history.csv", ["epoch", "loss", "val_macro_dice"],
                [(h["epoch"], h["loss"], h["val_macro_dice"]) for h in res.history])
    _write_manifest(out, "train", rc.to_dict(), started,
                    dict(cohort=name, fold=fold, best_epoch=res.best_epoch, params=count_params(res.net)))
    print(f"trained {rc.model} on {name} fold {fold}: best val macro Dice {res.best_val:.4f} at epoch {res.best_epoch}")


def cmd_predict(args):
    started = time.time()
    net = load_weights(args.weights)
    vol = normalize_volume(read_volume(args.volume))
    t0 = time.time()
    probs, labels = predict_volume(net, vol, args.stride)
    wall = time.time() - t0
    out = Path(args.out)
    write_mask(out / "mask", LabelMask(labels, vol.spacing, vol.origin, vol.cohort))
    write_probabilities(out / "probabilities", probs, vol.spacing, vol.origin, vol.cohort)
    _write_manifest(out, "predict", dict(weights=str(args.weights), volume=str(args.volume), stride=args.stride),
                    started, dict(predict_seconds=round(wall, 3)))
    print(f"predicted {args.volume} {tuple(vol.shape)} in {wall:.2f} s -> {out}")


def cmd_evaluate(args):
    pred = read_mask(args.pred)
    truth = read_mask(args.truth)
    rep = evaluate_mask(pred, truth)
    rows = _report_rows(rep)
    if args.out:
        _write_rows(Path(args.out), ["class", "metric", "value"], rows)
    for cls, metric, value in rows:
        print(f"{cls:4s} {metric:12s} {'undefined' if value is None else f'{value:.6f}'}")


def cmd_profile(args):
    out = Path(args.out)
    profiles, covs, ids = [], [], []
    cov_doc = json.loads(Path(args.covariates).read_text()) if args.covariates else {}
    for m in args.masks:
        mask = read_mask(m)
        case = Path(m).with_suffix("").name
        prof = compute_profile(mask)
        paths = emit_report(case, mask, prof, out)
        print(f"{case}: " + ", ".join(f"{k} {v:.4f} L" for k, v in prof.totals().items()) + f" -> {paths['profile']}")
        if case in cov_doc:
            profiles.append(prof)
            covs.append(cov_doc[case])
            ids.append(case)
    if profiles:
        by = tuple(args.group_by.split(","))
        summary = group_profiles(profiles, covs, by, ids=ids)
        write_group_csv(summary, out / f"groups_{'_'.join(by)}.csv")
        for w in summary.warnings:
            print(f"note: group {'/'.join(w['group'])}: {w['reason']}")


def run_experiment(rc: RunConfig, out: Path, scenarios, log=None) -> dict:
    """Run scenarios over the configured folds; writes metrics CSVs."""
    cohorts = {name: generate_cohort(c) for name, c in rc.cohorts.items()}
    written = {}
    for kind in scenarios:
        s = replace(rc.scenario, kind=kind)
        reports: dict = {}
        for fold in rc.folds:
            tcfg = replace(rc.train, seed=derive_seed(rc.seed, "train", fold))
            res = run_scenario(s, cohorts, tcfg, rc.model, rc.net, fold, log=log)
            for db, rep in res.reports.items():
                reports.setdefault(db, []).append(rep)
                path = out / kind / f"fold{fold}" / f"metrics_{db}.csv"
                _write_rows(path, ["class", "metric", "value"], _report_rows(rep))
                cases = out / kind / f"fold{fold}" / f"cases_{db}.csv"
                _write_rows(cases, ["case", "class", "metric", "value"],
                            [r for i, c in enumerate(res.per_case[db]) for r in _report_rows(c, (i,))])
                written.setdefault(kind, {}).setdefault(db, []).append(rep.macro_dice())
            _write_rows(out / kind / f"fold{fold}" / "history.csv", ["stage", "epoch", "loss", "val_macro_dice"],
                        [(h["stage"], h["epoch"], h["loss"], h["val_macro_dice"]) for h in res.history])
        for db, reps in reports.items():
            if len(reps) >= 2:
                agg = aggregate_cv(reps)
                _write_rows(out / kind / f"summary_{db}.csv", ["class", "metric", "mean", "std", "n"],
                            [(c, m, *v) for (c, m), v in sorted(agg.items())])
    return written


def cmd_experiment(args):
    started = time.time()
    if args.from_manifest:
        doc = json.loads(Path(args.from_manifest).read_text())
        rc = parse_run_config(doc["config"])
        scenarios = doc["scenarios"]
    else:
        rc = _load_config(args)
        scenarios = [args.scenario] if args.scenario else [rc.scenario.kind]
        if args.folds is not None:
            rc.folds = list(range(args.folds))
            for name, c in rc.cohorts.items():
                if args.folds > c.n_folds:
                    raise ConfigError("folds", f"{args.folds} folds exceed cohort {name!r} n_folds={c.n_folds}")
    for s in scenarios:
        Scenario(s)
    out = Path(args.out)
    dice = run_experiment(rc, out, scenarios,
                          log=(lambda r: print(json.dumps(r), flush=True)) if args.verbose else None)
    _write_manifest(out, "experiment", rc.to_dict(), started, dict(scenarios=scenarios, threads=args.threads))
    for kind, per_db in dice.items():
        for db, vals in per_db.items():
            print(f"{kind:8s} test {db}: macro Dice per fold " + " ".join(f"{v:.4f}" for v in vals))


def cmd_gradcheck(args):
    worst_all = 0.0
    print(f"{'op':18s} {'attrs':28s} max_rel_err")
    for kind, attrs, shapes in GRADCHECK_CASES:
        worst = max(grad_check(kind, attrs, shapes, seed=s) for s in range(args.seeds))
        worst_all = max(worst_all, worst)
        tag = f"k={attrs.kernel} s={attrs.stride} d={attrs.dilation}" if kind.startswith("conv") else ""
        print(f"{kind:18s} {tag:28s} {worst:.3e}")
    ok = worst_all <= args.tol
    print(f"{'PASS' if ok else 'FAIL'}: worst {worst_all:.3e} (tolerance {args.tol:g})")
    if not ok:
        raise RunFailure("gradient check exceeded tolerance")


# ------------------------------------------------------------------ main

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="adiposeg", description="Adipose tissue segmentation toolkit")
    p.add_argument("--threads", type=int, default=1, help="kernel/BLAS threads (1 = bit-deterministic)")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-cohort", help="generate a synthetic cohort")
    g.add_argument("--style", default="fse", choices=["fse", "fse-3t", "dixon"])
    g.add_argument("--subjects", type=int, default=50)
    g.add_argument("--folds", type=int, default=4)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--name", default="A")
    g.add_argument("--write-volumes", action="store_true")
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_gen_cohort)

    lab = sub.add_parser("label", help="classical FCM + snake labeling of a volume")
    lab.add_argument("--volume", required=True)
    lab.add_argument("--out", required=True)
    lab.set_defaults(fn=cmd_label)

    t = sub.add_parser("train", help="train a network on one cohort")
    t.add_argument("--config")
    t.add_argument("--cohort")
    t.add_argument("--fold", type=int, default=0)
    t.add_argument("--out", required=True)
    t.add_argument("--verbose", action="store_true")
    t.set_defaults(fn=cmd_train)

    pr = sub.add_parser("predict", help="sliding-window prediction")
    pr.add_argument("--weights", required=True)
    pr.add_argument("--volume", required=True)
    pr.add_argument("--stride", type=int, default=16)
    pr.add_argument("--out", required=True)
    pr.set_defaults(fn=cmd_predict)

    ev = sub.add_parser("evaluate", help="compare a predicted mask with the truth")
    ev.add_argument("--pred", required=True)
    ev.add_argument("--truth", required=True)
    ev.add_argument("--out")
    ev.set_defaults(fn=cmd_evaluate)

    pf = sub.add_parser("profile", help="head-feet profiles and grouped summaries")
    pf.add_argument("masks", nargs="+")
    pf.add_argument("--covariates", help="JSON {case: {sex, age, bmi}} for grouping")
    pf.add_argument("--group-by", default="sex,age")
    pf.add_argument("--out", required=True)
    pf.set_defaults(fn=cmd_profile)

    ex = sub.add_parser("experiment", help="run the scenario matrix over folds")
    ex.add_argument("--config")
    ex.add_argument("--scenario", choices=["intra", "inter", "transfer", "joint"])
    ex.add_argument("--folds", type=int)
    ex.add_argument("--from-manifest", help="re-run exactly from a previous run_manifest.json")
    ex.add_argument("--out", required=True)
    ex.add_argument("--verbose", action="store_true")
    ex.set_defaults(fn=cmd_experiment)

    gc = sub.add_parser("gradcheck", help="finite-difference check of every op")
    gc.add_argument("--seeds", type=int, default=3)
    gc.add_argument("--tol", type=float, default=1e-4)
    gc.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return 2
    try:
        with thread_limit(args.threads):
            args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001  (any failure maps to status 1)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
