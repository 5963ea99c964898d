"""Command-line entry point: simulate -> preprocess -> reconstruct -> assemble -> train/evaluate -> report."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import data as D
from .config import apply_overrides, load_config, parse_value, validate
from .errors import CrossDatasetUnsupported, InvalidConfigError, SrcSpaceError
from .experiments import EXPERIMENTS, Lab, Report, check_cross_dataset, config_hash, run_experiment, summary_row
from .train import SearchSpace, evaluate, random_search, train_model

log = logging.getLogger("srcspace")

# ablation axis -> (config key, default sweep values)
ABLATION_AXES = {
    "highpass": ("preprocess.highpass_hz", [None, 0.1, 0.5]),
    "lowpass": ("preprocess.lowpass_hz", [25.0, 48.0, 100.0]),
    "downsample": ("preprocess.resample_hz", [50.0, 100.0, 150.0]),
    "notch": ("preprocess.notch_hz", [False, 50.0]),
    "snr": ("source.snr", [1.0, 3.0, 5.0]),
    "cov_form": ("source.cov_form", ["regular", "diagonal", "scalar"]),
    "method": ("source.method", ["min_norm", "dspm", "sloreta", "lcmv"]),
    "structurals": ("source.structurals", ["subject", "template"]),
    "voxel_size": ("scenario.voxel_size_mm", [10.0, 15.0, 20.0]),
    "voxel_type": ("source.voxel_type", ["vec", "mag"]),
    "dimred": ("source.dimred", ["none", "pca1", "pca2", "pca3", "parcels"]),
}


def _add_common(p):
    p.add_argument("--config", help="JSON config file merged over the preset")
    p.add_argument("--preset", default="desk", help="base preset: desk or paper_final")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted override, e.g. --set source.snr=5 (repeatable)")
    p.add_argument("--cache", help="cache root (default: $SRCSPACE_CACHE or ./cache)")
    p.add_argument("--force", action="store_true", help="recompute even if a cache entry exists")
    p.add_argument("--seeds", help="number of seeds (N -> 0..N-1) or a comma list")
    p.add_argument("--workers", type=int, default=1, help="parallel worker processes (default 1)")
    p.add_argument("--out", default="reports", help="output directory for reports")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="srcspace", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)
    for name in ("simulate", "preprocess", "reconstruct", "assemble"):
        p = sub.add_parser(name, help=f"run the pipeline up to '{name}' and cache the result")
        _add_common(p)
        p.add_argument("--datasets", help="comma list (default: all)")
    p = sub.add_parser("train", help="train one model family on one dataset")
    _add_common(p)
    _add_model_args(p)
    p = sub.add_parser("search", help="random hyperparameter search")
    _add_common(p)
    _add_model_args(p)
    p.add_argument("--trials", type=int, default=8)
    p.add_argument("--budget", type=int, default=None, help="max epochs per trial")
    p = sub.add_parser("eval", help="evaluate a trained model, optionally on another dataset")
    _add_common(p)
    _add_model_args(p)
    p.add_argument("--eval-dataset", default=None)
    p = sub.add_parser("experiment", help=f"run an experiment: {', '.join(EXPERIMENTS)}")
    _add_common(p)
    p.add_argument("name")
    p = sub.add_parser("ablate", help=f"sweep one pipeline axis: {', '.join(ABLATION_AXES)}")
    _add_common(p)
    p.add_argument("axis")
    p.add_argument("--values", help="comma list of values (default: the axis's standard sweep)")
    p.add_argument("--family", default="mlp")
    p = sub.add_parser("report", help="print saved reports from --out")
    _add_common(p)
    return ap


def _add_model_args(p):
    p.add_argument("--family", default="cnn_se", help="logistic, mlp, cnn_se or gat")
    p.add_argument("--dataset", default="A")
    p.add_argument("--space", default=None, help="sensor, template, native or subject:<ds>:<subject>")
    p.add_argument("--subject", default=None, help="single-subject training on this subject")


def resolve_seeds(arg, cfg):
    if arg is None:
        return [int(s) for s in cfg["experiments"]["seeds"]]
    arg = str(arg)
    if "," in arg:
        return [int(s) for s in arg.split(",") if s.strip()]
    n = int(arg)
    if n < 1:
        raise InvalidConfigError("--seeds must be >= 1")
    return list(range(n))


def _config(args) -> dict:
    cfg = load_config(args.config, args.preset, args.overrides)
    if args.cache:
        cfg["cache_root"] = args.cache
    return cfg


def _provenance(cfg) -> dict:
    return {"config_hash": config_hash(cfg), "preprocess": cfg["preprocess"], "source": cfg["source"]}


def _datasets(args, lab):
    return args.datasets.split(",") if getattr(args, "datasets", None) else lab.scn.datasets


def _emit(obj):
    print(json.dumps(obj, indent=2, sort_keys=True, default=str))


# --------------------------------------------------------------------------- stage commands

def cmd_stage(args, cfg):
    lab = Lab(cfg, cache_root=cfg.get("cache_root"), force=args.force)
    scn = lab.scn
    done = []
    for ds in _datasets(args, lab):
        space = scn.dataset(ds).get("space", "template")
        for subj, ses in scn.session_keys(ds):
            if args.command == "simulate":
                scn.simulate(ds, subj, ses)
            elif args.command == "preprocess":
                scn.preprocess(ds, subj, ses)
            elif args.command == "reconstruct":
                scn.features(ds, subj, ses, "sensor")
                scn.features(ds, subj, ses, space)
            done.append(f"{ds}/{subj}/{ses}")
        if args.command == "assemble":
            for sp in ("sensor", space):
                if sp == "native":
                    for subj in scn.dataset(ds)["subjects"]:
                        _store_sets(lab, ds, sp, subj)
                else:
                    _store_sets(lab, ds, sp, None)
            done.append(ds)
    _emit({"command": args.command, "items": len(done), "cache": scn.stats,
           "cache_root": str(scn.cache_root), "provenance": _provenance(cfg)})
    return 0


def _store_sets(lab, ds, space, subject):
    sets = lab.sets(ds, space, subject)
    key = {"stage": "assemble", "cfg": {k: lab.cfg[k] for k in ("scenario", "preprocess", "source", "assemble")},
           "dataset": ds, "space": space, "subject": subject}
    tensors = {}
    for split in D.SPLITS:
        s = sets[split]
        tensors[f"{split}/features"] = s.features
        tensors[f"{split}/labels"] = s.labels
        tensors[f"{split}/subject_index"] = s.subject_index
    path = D.cache_path(lab.scn.cache_root, key, ds, subject or "_all", space.replace(":", "_"))
    D.cache_store(path, tensors, key=key, meta={"sizes": {k: len(sets[k]) for k in D.SPLITS}})
    print(f"{ds} {space} {subject or ''}: " + ", ".join(f"{k}={len(sets[k])}" for k in D.SPLITS))


# --------------------------------------------------------------------------- train / search / eval

def _space_for(args, cfg):
    if args.space:
        return args.space
    if args.subject:
        return "native"
    return "template" if cfg["scenario"]["datasets"][args.dataset].get("space") != "sensor" else "sensor"


def _train_one(payload):
    cfg, family, ds, space, subject, seed = payload
    lab = Lab(cfg, cache_root=cfg.get("cache_root"))
    res, sets = lab.model(family, ds, space, seed, subject=subject)
    return seed, res.history, res.best_epoch, evaluate(res.model, sets["val"]), evaluate(res.model, sets["test"])


def _map(fn, items, workers):
    if workers <= 1:
        return [fn(i) for i in items]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


def cmd_train(args, cfg):
    seeds = resolve_seeds(args.seeds, cfg)
    space = _space_for(args, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    items = [(cfg, args.family, args.dataset, space, args.subject, s) for s in seeds]
    results = _map(_train_one, items, args.workers)
    rep = Report("train", config=cfg)
    for seed, hist, best, val, test in results:
        rep.add("runs", {"model": args.family, "dataset": args.dataset, "space": space, "seed": seed,
                         "best_epoch": best, "val_bacc": val, "test_bacc": test})
        with open(out / f"history_{args.family}_{args.dataset}_{seed}.csv", "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=list(hist[0]))
            w.writeheader()
            w.writerows(hist)
    rep.add("summary", summary_row(f"{args.family} {space}", [r[4] for r in results]))
    rep.save(out)
    print(rep.to_text())
    return 0


def cmd_search(args, cfg):
    space = _space_for(args, cfg)
    lab = Lab(cfg, cache_root=cfg.get("cache_root"), force=args.force)
    sets = lab.sets(args.dataset, space, args.subject)
    tr, va = sets["train"], sets["val"]
    n_subj = len({k[0] for k in tr.session_keys})
    geo = lab.geometry(tr, args.dataset)
    seed = resolve_seeds(args.seeds, cfg)[0]

    def objective(hp, trial):
        res = train_model(lab.spec(args.family, tr, n_subj), tr, va, hp, seed=seed + trial, geometry=geo)
        return res.best_val

    best, trials = random_search(SearchSpace(), args.trials, seed, objective, budget=args.budget)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / f"search_{args.family}_{args.dataset}.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(trials[0]))
        w.writeheader()
        w.writerows(trials)
    best_d = {k: v for k, v in best.to_dict().items() if k in ("lr", "batch_size", "weight_decay", "dropout")}
    (out / f"search_{args.family}_{args.dataset}_best.json").write_text(json.dumps(best_d, indent=2))
    _emit({"best": best_d, "trials": len(trials)})
    return 0


def cmd_eval(args, cfg):
    space = _space_for(args, cfg)
    target = args.eval_dataset or args.dataset
    rep_name = "sensor" if space == "sensor" else "source"
    try:
        check_cross_dataset(rep_name, f"{rep_name} {args.family}", args.dataset, target)
    except CrossDatasetUnsupported as e:
        _emit({"refused": True, "model": e.model_name, "train": e.source_dataset, "eval": e.target_dataset,
               "reason": e.reason})
        return 0
    lab = Lab(cfg, cache_root=cfg.get("cache_root"), force=args.force)
    rows = []
    for seed in resolve_seeds(args.seeds, cfg):
        res, sets = lab.model(args.family, args.dataset, space, seed, subject=args.subject)
        if target == args.dataset:
            acc = evaluate(res.model, sets["test"])
        else:
            ev_space = space if not args.subject else f"subject:{args.dataset}:{args.subject}"
            keys = list(lab.scn.split_plan(target).test)
            ev = lab.eval_set(target, ev_space, keys, grid=sets["train"].grid,
                              trained_on=(args.dataset, space, args.subject))
            acc = evaluate(res.model, ev)
        rows.append({"seed": seed, "test_bacc": acc})
    _emit({"runs": rows, "summary": summary_row(f"{args.family} {args.dataset}->{target}",
                                                [r["test_bacc"] for r in rows])})
    return 0


# --------------------------------------------------------------------------- experiments and ablations

def cmd_experiment(args, cfg):
    if args.name not in EXPERIMENTS:
        raise InvalidConfigError(f"unknown experiment {args.name!r}; valid: {list(EXPERIMENTS)}")
    lab = Lab(cfg, cache_root=cfg.get("cache_root"), force=args.force, seeds=resolve_seeds(args.seeds, cfg))
    rep = run_experiment(args.name, lab)
    rep.save(args.out)
    print(rep.to_text())
    return 0


def _parse_values(text):
    return [parse_value(v.strip()) for v in text.split(",")]


def run_ablation(cfg, axis, values=None, family="mlp", seeds=None, dataset="A") -> Report:
    if axis not in ABLATION_AXES:
        raise InvalidConfigError(f"unknown ablation axis {axis!r}; valid: {list(ABLATION_AXES)}")
    key, default_values = ABLATION_AXES[axis]
    values = list(values) if values is not None else default_values
    section, field = key.split(".")
    default = cfg[section][field]
    rep = Report(f"ablate_{axis}", config=cfg)
    seeds = seeds if seeds is not None else [int(s) for s in cfg["experiments"]["seeds"]]
    for v in values:
        c = apply_overrides(cfg, [f"{key}={json.dumps(v)}"])
        validate(c)
        lab = Lab(c, cache_root=c.get("cache_root"), seeds=seeds)
        accs = []
        for s in seeds:
            res, sets = lab.model(family, dataset, "template", s)
            accs.append(evaluate(res.model, sets["test"]))
        rep.add("summary", summary_row(str(v), accs, axis=axis, default="*" if v == default else ""))
    return rep


def cmd_ablate(args, cfg):
    values = _parse_values(args.values) if args.values else None
    rep = run_ablation(cfg, args.axis, values, args.family, resolve_seeds(args.seeds, cfg))
    rep.save(args.out)
    print(rep.to_text())
    return 0


def cmd_report(args, cfg):
    out = Path(args.out)
    files = sorted(out.glob("*.txt"))
    if not files:
        print(f"no reports in {out}")
        return 1
    for p in files:
        print(p.read_text())
    return 0


COMMANDS = {
    "simulate": cmd_stage, "preprocess": cmd_stage, "reconstruct": cmd_stage, "assemble": cmd_stage,
    "train": cmd_train, "search": cmd_search, "eval": cmd_eval, "experiment": cmd_experiment,
    "ablate": cmd_ablate, "report": cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.workers < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return 2
    try:
        cfg = _config(args)
        return COMMANDS[args.command](args, cfg)
    except SrcSpaceError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
