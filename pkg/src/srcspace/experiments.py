"""Desk-scale experiment scripts: representation and model comparisons, augmentations,
region masking, zero-shot cross-dataset evaluation and combined-dataset training."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import data as D
from .config import dumps
from .errors import CrossDatasetUnsupported, InvalidConfigError, RegionSkipped
from .nn import Geometry, ModelSpec, build_model
from .pipeline import Scenario
from .train import HParams, evaluate, probability_of_improvement, report_stats, train_model

log = logging.getLogger(__name__)

EXPERIMENTS = ("compare_spaces", "inductive_bias", "augmentations", "region_masking", "cross_dataset", "combined")

# (label, augment, param) rows of the augmentation table
AUGMENTATION_ROWS = (
    ("baseline", "none", 0.0),
    ("mixup a=1", "mixup", 1.0),
    ("mixup a=0.1", "mixup", 0.1),
    ("slice dropout p=0.05", "slice_dropout", 0.05),
    ("slice dropout p=0.1", "slice_dropout", 0.1),
    ("cube masking p=0.5", "cube_mask", 0.5),
)

# (family, representation) cells of the inductive-bias table
BIAS_CELLS = (("mlp", "sensor"), ("gat", "sensor"), ("mlp", "source"), ("gat", "source"), ("cnn_se", "source"))

SENSOR_REFUSAL = ("fixed-input sensor models depend on one dataset's sensor layout, "
                  "making cross-dataset sensor space evaluation impossible for fixed-domain models")


# --------------------------------------------------------------------------- reports

def content_hash(text: str) -> str:
    """Git blob hash of ``text``."""
    raw = text.encode()
    return hashlib.sha1(b"blob %d\0" % len(raw) + raw).hexdigest()


def config_hash(cfg: dict) -> str:
    """Content hash of a resolved config; the cache location does not affect results."""
    return content_hash(dumps({k: v for k, v in cfg.items() if k != "cache_root"}))


@dataclass
class Report:
    """Named tables of rows plus notes and provenance (resolved config and its content hash)."""

    name: str
    tables: dict = field(default_factory=dict)  # table name -> list of row dicts
    notes: list = field(default_factory=list)
    config: dict = field(default_factory=dict)
    plot_data: dict | None = None

    @property
    def provenance(self) -> dict:
        return {"experiment": self.name, "version": __version__, "config_hash": config_hash(self.config)}

    def add(self, table, row):
        self.tables.setdefault(table, []).append(row)

    def to_csv(self, table) -> str:
        rows = self.tables[table]
        buf = io.StringIO()
        cols = list(rows[0]) if rows else []
        w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(v) for k, v in r.items()})
        return buf.getvalue()

    def to_text(self) -> str:
        lines = [f"# {self.name}", f"# provenance: {json.dumps(self.provenance, sort_keys=True)}"]
        for tname, rows in self.tables.items():
            lines.append(f"\n[{tname}]")
            if not rows:
                lines.append("(empty)")
                continue
            cols = list(rows[0])
            cells = [[_fmt(r.get(c, "")) for c in cols] for r in rows]
            width = [max(len(c), *(len(x[i]) for x in cells)) for i, c in enumerate(cols)]
            lines.append("  ".join(c.ljust(w) for c, w in zip(cols, width)))
            lines += ["  ".join(x.ljust(w) for x, w in zip(row, width)) for row in cells]
        for n in self.notes:
            lines.append(f"note: {n}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps({"provenance": self.provenance, "config": self.config, "tables": self.tables,
                           "notes": self.notes, "plot_data": self.plot_data}, indent=2, sort_keys=True,
                          default=_json_default)

    def save(self, out_dir) -> list:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = []
        header = "# " + json.dumps(self.provenance, sort_keys=True) + "\n"
        for t in self.tables:
            p = out / f"{self.name}_{t}.csv"
            p.write_text(header + self.to_csv(t))
            paths.append(p)
        for suffix, text in ((".txt", self.to_text()), (".json", self.to_json())):
            p = out / f"{self.name}{suffix}"
            p.write_text(text)
            paths.append(p)
        return paths


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.4f}"
    if v is None:
        return ""
    return str(v)


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def summary_row(label, runs, **extra) -> dict:
    st = report_stats(runs)
    return {"label": label, **extra, "mean": st.mean, "std": st.std, "n_seeds": st.n}


# --------------------------------------------------------------------------- shared state

class Lab:
    """Scenario plus memoised sample sets and trained models shared across experiments.

    Model parameters are also persisted in the tensor cache so separate
    processes reuse identical (config, seed) runs.
    """

    def __init__(self, cfg: dict, cache_root=None, force: bool = False, seeds=None, scenario: Scenario | None = None):
        self.cfg = cfg
        self.scn = scenario or Scenario(cfg, cache_root=cache_root, force=force)
        self.seeds = [int(s) for s in (seeds if seeds is not None else cfg["experiments"]["seeds"])]
        self._sets, self._models = {}, {}
        self.timings = {}

    # ---------------------------------------------------------------- data

    def sets(self, ds, space="template", subject=None) -> dict:
        key = (ds, space, subject)
        if key not in self._sets:
            self._sets[key] = self.scn.build_sets(ds, space, subject=subject)
        return self._sets[key]

    def combined_sets(self) -> dict:
        """Dataset A's splits with configured dataset-B sessions appended to training (template space)."""
        key = ("combined",)
        if key in self._sets:
            return self._sets[key]
        a = self.sets("A", "template")
        extra = {s: list(v) for s, v in self.cfg["experiments"]["combined_sessions"].items()}
        b_train = [(s, e) for s, ses in extra.items() for e in ses]
        order = self.scn.split_plan("A").train_subjects() + list(extra)
        plan = D.SplitPlan(b_train, [], [], guard="session")
        sess = self.scn.sessions("B", "template", b_train, stride=int(self.cfg["assemble"]["stride"]))
        grid = a["train"].grid
        b = D.assemble(plan, sess, "source", grid, stride=1, subject_order=order)
        b = self.scn.reduce(b, grid, "B", None, "template", fit=self.scn.fits.get(("A", "template", None)))
        train = D.concat_sets([a["train"], b["train"]], split="train")
        self._sets[key] = {"train": train, "val": a["val"], "test": a["test"], "n_subjects": len(order)}
        return self._sets[key]

    def eval_set(self, ds, space, keys, subject_order=(), grid=None, trained_on=None) -> D.SampleSet:
        """Evaluation-only set of the given session keys; subjects outside ``subject_order`` get index -1.

        ``trained_on`` is the (dataset, space, subject) of the model's training split, whose
        PCA basis (if any) is reused.
        """
        memo = ("eval", ds, space, tuple(map(tuple, keys)), tuple(subject_order), trained_on)
        if memo in self._sets:
            return self._sets[memo]
        plan = D.SplitPlan([], [], keys, guard="session")
        sess = self.scn.sessions(ds, space, keys, stride=int(self.cfg["assemble"]["stride"]))
        rep = "sensor" if space == "sensor" else "source"
        grid = grid if grid is not None else (None if rep == "sensor" else self.scn.grid(space, ds))
        sets = D.assemble(plan, sess, rep, grid, stride=1, subject_order=list(subject_order))
        if rep == "source":
            fit = self.scn.fits.get(trained_on) if trained_on else None
            sets = self.scn.reduce(sets, grid, ds, None, space, fit=fit)
        self._sets[memo] = sets["test"]
        return sets["test"]

    def geometry(self, sset: D.SampleSet, ds) -> Geometry:
        return Geometry(grid=sset.grid, sensor_positions=self.scn.sensors(ds).positions)

    def hparams(self, **over) -> HParams:
        t = dict(self.cfg["train"])
        t.update(over)
        return HParams(**t)

    def spec(self, family, sset, n_subjects, target=None) -> ModelSpec:
        m = self.cfg["model"]
        return ModelSpec(family, sset.dim, n_subjects=max(1, n_subjects),
                         target_params=int(target or m["target_params"]), channels=tuple(m["channels"]),
                         pool=int(m["pool"]), se_reduction=int(m["se_reduction"]), representation=sset.representation)

    # ---------------------------------------------------------------- models

    def model(self, family, ds="A", space="template", seed=0, subject=None, augment="none", augment_param=0.0,
              combined=False):
        """Train (or fetch) one model; returns (TrainResult-like, sets)."""
        key = (family, ds, space, int(seed), subject, augment, float(augment_param), combined)
        sets = self.combined_sets() if combined else self.sets(ds, space, subject)
        if key in self._models:
            return self._models[key], sets
        tr, va = sets["train"], sets["val"]
        n_subj = sets.get("n_subjects") if combined else len({k[0] for k in tr.session_keys})
        spec = self.spec(family, tr, n_subj)
        hp = self.hparams(augment=augment, augment_param=augment_param)
        geo = self.geometry(tr, ds)
        ckey = {"stage": "model", "cfg": {k: self.cfg[k] for k in ("scenario", "preprocess", "source", "assemble",
                                                                     "model", "train")},
                "experiments": {"combined_sessions": self.cfg["experiments"]["combined_sessions"]},
                "model": list(key)}
        t0 = time.perf_counter()
        res = None
        path = None
        if self.scn.cache_root is not None:
            path = D.cache_path(self.scn.cache_root, ckey, "_models", family, str(seed))
            if path.exists() and not self.scn.force:
                state, meta = D.cache_load(path, key=ckey, with_meta=True)
                spec.hidden = int(meta["hidden"])
                m = build_model(spec, seed=seed, geometry=geo, dtype=np.float32)
                m.store.load_state(state)
                res = _Loaded(m, meta["history"], meta["best_epoch"], meta["best_val"])
        if res is None:
            res = train_model(spec, tr, va, hp, seed=seed, geometry=geo)
            if path is not None:
                D.cache_store(path, {"data": res.model.store.data}, key=ckey,
                              meta={"hidden": res.model.spec.hidden, "history": res.history,
                                    "best_epoch": res.best_epoch, "best_val": res.best_val})
        self.timings[key] = time.perf_counter() - t0
        self._models[key] = res
        return res, sets


@dataclass
class _Loaded:
    model: object
    history: list
    best_epoch: int
    best_val: float


def _seeds(lab, seeds):
    return list(seeds) if seeds is not None else lab.seeds


# --------------------------------------------------------------------------- experiments

def exp_compare_spaces(lab: Lab, seeds=None, ds="A") -> Report:
    """MLP on sensor vs source features with the same budget."""
    rep = Report("compare_spaces", config=lab.cfg)
    acc = {}
    for space in ("sensor", "template"):
        label = "sensor" if space == "sensor" else "source"
        for seed in _seeds(lab, seeds):
            res, sets = lab.model("mlp", ds, space, seed)
            a = evaluate(res.model, sets["test"])
            acc.setdefault(label, []).append(a)
            rep.add("runs", {"representation": label, "seed": seed, "test_bacc": a, "best_epoch": res.best_epoch})
    for label, runs in acc.items():
        rep.add("summary", summary_row(label, runs, dataset=ds))
    rep.add("summary", {"label": "P(source > sensor)", "dataset": ds,
                        "mean": probability_of_improvement(acc["source"], acc["sensor"]), "std": None,
                        "n_seeds": len(acc["source"])})
    return rep


def exp_inductive_bias(lab: Lab, seeds=None, ds="A", cells=BIAS_CELLS) -> Report:
    rep = Report("inductive_bias", config=lab.cfg)
    for family, rep_name in cells:
        space = "sensor" if rep_name == "sensor" else "template"
        runs = []
        for seed in _seeds(lab, seeds):
            res, sets = lab.model(family, ds, space, seed)
            a = evaluate(res.model, sets["test"])
            runs.append(a)
            rep.add("runs", {"model": family, "representation": rep_name, "seed": seed, "test_bacc": a,
                             "n_params": res.model.n_params})
        rep.add("summary", summary_row(f"{rep_name} {family}", runs, model=family, representation=rep_name))
    return rep


def exp_augmentations(lab: Lab, seeds=None, ds="A", family="cnn_se", rows=AUGMENTATION_ROWS) -> Report:
    """Augmentations act on training batches only; validation and test sets are untouched."""
    rep = Report("augmentations", config=lab.cfg)
    acc = {}
    for label, aug, p in rows:
        for seed in _seeds(lab, seeds):
            res, sets = lab.model(family, ds, "template", seed, augment=aug, augment_param=p)
            acc.setdefault(label, []).append(evaluate(res.model, sets["test"]))
        rep.add("summary", summary_row(label, acc[label], augment=aug, param=p))
    base = acc[rows[0][0]]
    others = [r[0] for r in rows[1:]]
    if others:
        best = max(others, key=lambda k: np.mean(acc[k]))
        rep.add("summary", {"label": f"P(best aug > baseline) [{best}]", "augment": "", "param": None,
                            "mean": probability_of_improvement(acc[best], base), "std": None, "n_seeds": len(base)})
    return rep


def region_masked_accuracy(model, sset: D.SampleSet, atlas, region_id, buffer_voxels) -> float:
    if region_id is None:
        return evaluate(model, sset)
    grid = sset.grid
    D.region_lattice_mask(grid, atlas, region_id, buffer_voxels)  # raises RegionSkipped early
    return evaluate(model, sset, lambda x: D.region_mask(x, grid, atlas, region_id, buffer_voxels))


def exp_region_masking(lab: Lab, seeds=None, ds="A", family="cnn_se", regions=None) -> Report:
    """Evaluate trained models on the test split with each region (plus buffer) zeroed."""
    rep = Report("region_masking", config=lab.cfg)
    anat = lab.scn.template
    buffer = int(lab.cfg["experiments"]["region_buffer"])
    ids = regions if regions is not None else anat.region_ids()
    ids = [lab.scn.region_id(r) for r in ids]
    named = {lab.scn.region_id(n): n for n in ("right", "left", "front", "back", "top")}
    per = {"baseline": []}
    skipped = set()
    for seed in _seeds(lab, seeds):
        res, sets = lab.model(family, ds, "template", seed)
        te = sets["test"]
        per["baseline"].append(region_masked_accuracy(res.model, te, anat.atlas, None, buffer))
        for rid in ids:
            try:
                a = region_masked_accuracy(res.model, te, anat.atlas, rid, buffer)
            except RegionSkipped as e:
                skipped.add((rid, e.n_voxels))
                continue
            per.setdefault(rid, []).append(a)
    base = report_stats(per["baseline"])
    rep.add("summary", summary_row("baseline", per["baseline"], region_id=0, region=""))
    for rid in ids:
        if rid in per:
            row = summary_row(f"region {rid}", per[rid], region_id=rid, region=named.get(rid, ""))
            row["drop"] = base.mean - row["mean"]
            rep.add("summary", row)
    rep.tables["summary"][0]["drop"] = 0.0
    for rid, n in sorted(skipped):
        rep.notes.append(f"region {rid} skipped: {n} voxels after masking filter")
    rep.plot_data = {"regions": [r["label"] for r in rep.tables["summary"]],
                     "mean": [r["mean"] for r in rep.tables["summary"]],
                     "std": [r["std"] for r in rep.tables["summary"]]}
    return rep


def check_cross_dataset(representation: str, model_name: str, source_ds: str, target_ds: str):
    """Sensor-space models have a fixed input layout; refuse evaluating them on another dataset."""
    if representation == "sensor" and source_ds != target_ds:
        raise CrossDatasetUnsupported(model_name, source_ds, target_ds, SENSOR_REFUSAL)


def exp_cross_dataset(lab: Lab, seeds=None, families=("cnn_se", "mlp")) -> Report:
    """A-trained template-space models on B's test sessions morphed to the template, and a
    single-subject B model on A's test subjects morphed to that subject's grid."""
    rep = Report("cross_dataset", config=lab.cfg)
    scn = lab.scn
    b_test = list(scn.split_plan("B").test)
    a_test = list(scn.split_plan("A").test)
    single = str(lab.cfg["experiments"]["single_subject"])
    for family in families:
        runs = []
        for seed in _seeds(lab, seeds):
            res, sets = lab.model(family, "A", "template", seed)
            ev = lab.eval_set("B", "template", b_test, grid=sets["train"].grid, trained_on=("A", "template", None))
            runs.append(evaluate(res.model, ev))
        rep.add("summary", summary_row(f"{family} A->B", runs, train="A", eval="B", morph="to_template"))
    space = f"subject:B:{single}"
    for family in families:
        runs = []
        for seed in _seeds(lab, seeds):
            res, sets = lab.model(family, "B", "native", seed, subject=single)
            ev = lab.eval_set("A", space, a_test, grid=sets["train"].grid, trained_on=("B", "native", single))
            runs.append(evaluate(res.model, ev))
        rep.add("summary", summary_row(f"{family} B({single})->A", runs, train="B", eval="A", morph="to_subject"))
    for src, dst in (("A", "B"), ("B", "A")):
        try:
            check_cross_dataset("sensor", "sensor mlp", src, dst)
        except CrossDatasetUnsupported as e:
            rep.add("refusals", {"model": e.model_name, "train": e.source_dataset, "eval": e.target_dataset,
                                 "reason": e.reason})
    rep.notes.append("test sets are the in-domain test splits of the evaluated dataset")
    return rep


def exp_combined(lab: Lab, seeds=None, family="cnn_se") -> Report:
    """Dataset A alone vs A plus configured B sessions; validation and test sets stay fixed."""
    rep = Report("combined", config=lab.cfg)
    scn = lab.scn
    b_test = list(scn.split_plan("B").test)
    b_subjects = sorted({k[0] for k in b_test})
    comb = lab.combined_sets()
    a_order = scn.split_plan("A").train_subjects()
    c_order = a_order + list(lab.cfg["experiments"]["combined_sessions"])
    held = [s for s in b_subjects if s not in lab.cfg["experiments"]["combined_sessions"]]
    for s in held:
        assert not any(k[0] == s for k in comb["train"].session_keys), "held-out subject leaked into training"
    acc = {"single": [], "combined": []}
    per_subject = {}
    for kind, order in (("single", a_order), ("combined", c_order)):
        for seed in _seeds(lab, seeds):
            res, sets = lab.model(family, "A", "template", seed, combined=kind == "combined")
            ev = lab.eval_set("B", "template", b_test, subject_order=order, grid=sets["train"].grid,
                              trained_on=("A", "template", None))
            acc[kind].append(evaluate(res.model, ev))
            for s in b_subjects:
                per_subject.setdefault((kind, s), []).append(evaluate(res.model, ev.for_subject(s)))
    for s in b_subjects:
        for kind in ("single", "combined"):
            rep.add("per_subject", summary_row(f"{kind} {s}", per_subject[(kind, s)], subject=s, training=kind,
                                               held_out=s in held))
    for kind in ("single", "combined"):
        rep.add("summary", summary_row(kind, acc[kind], n_train=len(lab.sets("A")["train"]) if kind == "single"
                                       else len(comb["train"])))
    rep.add("summary", {"label": "P(combined > single)", "n_train": None,
                        "mean": probability_of_improvement(acc["combined"], acc["single"]), "std": None,
                        "n_seeds": len(acc["combined"])})
    return rep


RUNNERS = {
    "compare_spaces": exp_compare_spaces,
    "inductive_bias": exp_inductive_bias,
    "augmentations": exp_augmentations,
    "region_masking": exp_region_masking,
    "cross_dataset": exp_cross_dataset,
    "combined": exp_combined,
}


def run_experiment(name: str, lab: Lab, seeds=None) -> Report:
    if name not in RUNNERS:
        raise InvalidConfigError(f"unknown experiment {name!r}; valid: {list(EXPERIMENTS)}")
    return RUNNERS[name](lab, seeds=seeds)
