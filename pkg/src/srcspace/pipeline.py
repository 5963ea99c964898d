"""Scenario wiring: simulate -> preprocess -> reconstruct -> morph -> features, with per-stage caching."""
from __future__ import annotations

import copy
import logging
import zlib
from dataclasses import replace
from functools import cached_property

import numpy as np

from . import data as D
from . import dsp, inverse, morph, sim
from .errors import InvalidConfigError, InvalidInputError
from .features import fit_voxel_pca, parcel_features

log = logging.getLogger(__name__)

SPACES = ("sensor", "template", "native")


def _crc(*parts) -> int:
    return zlib.crc32(":".join(str(p) for p in parts).encode())


def parse_space(space: str):
    """``sensor``, ``template``, ``native`` or ``subject:<dataset>:<subject>``."""
    if space in SPACES:
        return space, None
    if isinstance(space, str) and space.startswith("subject:"):
        parts = space.split(":")
        if len(parts) != 3:
            raise InvalidConfigError(f"bad space {space!r}; expected subject:<dataset>:<subject>")
        return "subject", (parts[1], parts[2])
    raise InvalidConfigError(f"unknown space {space!r}; valid: {SPACES} or subject:<dataset>:<subject>")


class Scenario:
    """Lazily built anatomies, sensor arrays and lead fields for a resolved config.

    Stage outputs are cached as tensor files under ``cache_root`` (``None``
    keeps everything in memory only).
    """

    def __init__(self, cfg: dict, cache_root=None, force: bool = False):
        self.cfg = copy.deepcopy(cfg)
        self.sc = self.cfg["scenario"]
        root = cache_root if cache_root is not None else self.cfg.get("cache_root")
        self.cache_root = D.cache_root(root) if root is not False else None
        self.force = force
        self._anat, self._sensors, self._lf, self._morphs = {}, {}, {}, {}
        self.stats = {"hits": 0, "misses": 0}
        self.fits = {}  # (ds, space, subject) -> PCA basis fit on that training split

    # ------------------------------------------------------------ structure

    def dataset(self, ds):
        try:
            return self.sc["datasets"][ds]
        except KeyError:
            raise InvalidConfigError(f"unknown dataset {ds!r}; valid: {sorted(self.sc['datasets'])}") from None

    @property
    def datasets(self):
        return list(self.sc["datasets"])

    @cached_property
    def template(self) -> sim.Anatomy:
        return sim.build_template_anatomy(self.sc["voxel_size_mm"], self.sc["head_radius_mm"], seed=self.sc["seed"])

    def anatomy(self, ds, subject) -> sim.Anatomy:
        key = (ds, subject)
        if key not in self._anat:
            self.dataset(ds)
            self._anat[key] = sim.derive_subject_anatomy(
                self.template, _crc(self.sc["seed"], ds, subject), self.sc["distortion_scale"],
                name=f"{ds}/{subject}", band=(50, 10 ** 6))
        return self._anat[key]

    def sensors(self, ds) -> sim.SensorArray:
        if ds not in self._sensors:
            d = self.dataset(ds)
            self._sensors[ds] = sim.build_sensor_array(ds, int(d["n_sensors"]), float(d["shell_radius_mm"]),
                                                       seed=self.sc["seed"], head_radius_mm=self.sc["head_radius_mm"])
        return self._sensors[ds]

    def leadfield(self, ds, subject=None) -> sim.LeadField:
        """Subject lead field; ``subject=None`` gives the template's under dataset ``ds``'s sensors."""
        key = (ds, subject)
        if key not in self._lf:
            anat = self.template if subject is None else self.anatomy(ds, subject)
            self._lf[key] = sim.compute_lead_field(anat, self.sensors(ds))
        return self._lf[key]

    def get_morph(self, src: sim.Anatomy, dst: sim.Anatomy) -> morph.Morph:
        key = (src.name, dst.name)
        if key not in self._morphs:
            self._morphs[key] = morph.compute_morph(src, dst)
        return self._morphs[key]

    def response_config(self, ds, subject) -> sim.ResponseConfig:
        d = self.dataset(ds)
        names = d.get("subject_regions", {}).get(subject) or d["regions"]
        regions = {sim.resolve_region(self.template, n): float(g) for n, g in names.items()}
        r = self.sc["response"]
        return sim.ResponseConfig(regions=regions, amplitude=r["amplitude"], latency_s=r["latency_s"],
                                  onset_gain=r["onset_gain"], sustained_gain=r["sustained_gain"])

    def region_id(self, name_or_id) -> int:
        return sim.resolve_region(self.template, name_or_id)

    def session_keys(self, ds):
        d = self.dataset(ds)
        return [(s, e) for s in d["subjects"] for e in d["sessions"]]

    def split_plan(self, ds, subjects=None) -> D.SplitPlan:
        """Split plan from the dataset's ``split`` entry (subject or session names per split)."""
        d = self.dataset(ds)
        sp = d["split"]
        subjects = subjects or d["subjects"]
        if d["guard"] == "subject":
            keys = {k: [(s, e) for s in sp[k] if s in subjects for e in d["sessions"]] for k in D.SPLITS}
        else:
            keys = {k: [(s, e) for s in subjects for e in sp[k]] for k in D.SPLITS}
        return D.SplitPlan(keys["train"], keys["val"], keys["test"], guard=d["guard"]).validate()

    def space_anatomy(self, space, ds=None, subject=None) -> sim.Anatomy | None:
        kind, ref = parse_space(space)
        if kind == "sensor":
            return None
        if kind == "template" or self.cfg["source"]["structurals"] == "template":
            return self.template
        if kind == "native":
            if subject is None:
                raise InvalidInputError("native space needs a subject")
            return self.anatomy(ds, subject)
        return self.anatomy(*ref)

    def grid(self, space, ds=None, subject=None) -> D.GridLayout | None:
        anat = self.space_anatomy(space, ds, subject)
        return None if anat is None else D.GridLayout.from_anatomy(anat)

    # ------------------------------------------------------------ cache keys

    def _sim_key(self, ds, subject, session):
        sc = {k: v for k, v in self.sc.items() if k != "datasets"}
        d = {k: v for k, v in self.dataset(ds).items() if k not in ("split", "guard", "space", "subjects", "sessions")}
        return {"stage": "simulate", "scenario": sc, "dataset": ds, "layout": d,
                "response": self.response_config(ds, subject).regions, "subject": subject, "session": session}

    def _pre_key(self, ds, subject, session):
        return {"stage": "preprocess", "up": self._sim_key(ds, subject, session), "preprocess": self.cfg["preprocess"]}

    def _feat_key(self, ds, subject, session, space):
        src = self.cfg["source"] if space != "sensor" else None
        # dimred is applied at assembly time
        src = {k: v for k, v in src.items() if k != "dimred"} if src else None
        return {"stage": "features", "up": self._pre_key(ds, subject, session), "space": space, "source": src}

    def _cached(self, key, ds, subject, session, compute):
        path = None
        if self.cache_root is not None:
            path = D.cache_path(self.cache_root, key, ds, subject, session)
            if path.exists() and not self.force:
                self.stats["hits"] += 1
                return D.cache_load(path, key=key)
        self.stats["misses"] += 1
        out = compute()
        if path is not None:
            D.cache_store(path, out, key=key, meta={"stage": key["stage"]})
        return out

    # ------------------------------------------------------------ stages

    def _session_seed(self, ds, subject, session):
        return _crc(self.sc["seed"], "session", ds, subject, session)

    def simulate(self, ds, subject, session) -> sim.SensorRecording:
        sc = self.sc

        def compute():
            seed = self._session_seed(ds, subject, session)
            stim = sim.make_stimulus_track(sc["session_s"], sc["sampling_rate_hz"], sc["speech_fraction"],
                                           sc["mean_segment_s"], seed=seed)
            rec = sim.simulate_recording(self.anatomy(ds, subject), self.leadfield(ds, subject), self.sensors(ds),
                                         stim, sim.NoiseConfig(**sc["noise"]), self.response_config(ds, subject),
                                         seed=seed + 1, subject_id=subject, session_id=session, dataset_id=ds)
            return {"data": rec.data, "labels": rec.stimulus.labels}

        t = self._cached(self._sim_key(ds, subject, session), ds, subject, session, compute)
        return self._recording(t, sc["sampling_rate_hz"], ds, subject, session)

    def _recording(self, t, fs, ds, subject, session):
        stim = sim.StimulusTrack(labels=t["labels"], sampling_rate_hz=float(fs))
        return sim.SensorRecording(t["data"], float(fs), stim, self.sensors(ds), subject, session, ds)

    def preprocess(self, ds, subject, session) -> sim.SensorRecording:
        p = self.cfg["preprocess"]

        def compute():
            rec = self.simulate(ds, subject, session)
            notch = p.get("notch_hz") or None
            spec = dsp.FilterSpec(p["highpass_hz"], p["lowpass_hz"], notch)
            out, _ = dsp.preprocess(rec, spec, p.get("resample_hz"), standardize_output=False)
            return {"data": out.data, "labels": out.stimulus.labels, "fs": np.array([out.sampling_rate_hz])}

        t = self._cached(self._pre_key(ds, subject, session), ds, subject, session, compute)
        return self._recording(t, float(t["fs"][0]), ds, subject, session)

    def reconstruct(self, ds, subject, session, rec=None) -> inverse.SourceEstimate:
        """Source estimate on the grid used for the inverse (subject or template structurals)."""
        s = self.cfg["source"]
        rec = rec if rec is not None else self.preprocess(ds, subject, session)
        cov = inverse.estimate_noise_covariance(rec, form=s["cov_form"])
        use_template = s["structurals"] == "template"
        lf = self.leadfield(ds, None if use_template else subject)
        anat = self.template if use_template else self.anatomy(ds, subject)
        dcov = inverse.data_covariance(rec) if s["method"] == "lcmv" else None
        op = inverse.make_inverse_operator(lf, cov, snr=float(s["snr"]), method=s["method"], data_cov=dcov,
                                           subject_id=subject)
        return inverse.apply_inverse(op, rec, voxel_type=s["voxel_type"], anatomy=anat)

    def features(self, ds, subject, session, space="template") -> D.SessionData:
        """Standardised (samples, dim) features of one session in ``space``."""
        kind, _ = parse_space(space)

        def compute():
            rec = self.preprocess(ds, subject, session)
            if kind == "sensor":
                z, _, _ = dsp.standardize(rec.data)
            else:
                est = self.reconstruct(ds, subject, session, rec)
                dst = self.space_anatomy(space, ds, subject)
                if dst is not est.anatomy:
                    est = morph.morph_estimate(est, est.anatomy, dst, self.get_morph(est.anatomy, dst))
                z, _, _ = dsp.standardize(est.flat())
            return {"features": np.ascontiguousarray(z.T, dtype=np.float32), "labels": rec.stimulus.labels}

        t = self._cached(self._feat_key(ds, subject, session, space), ds, subject, session, compute)
        return D.SessionData(subject, session, t["features"], t["labels"], ds)

    def sessions(self, ds, space, keys, stride: int = 1) -> dict:
        out = {}
        for subj, ses in keys:
            sd = self.features(ds, subj, ses, space)
            out[(subj, ses)] = D.SessionData(subj, ses, np.ascontiguousarray(sd.features[::stride]),
                                             sd.labels[::stride], ds)
        return out

    # ------------------------------------------------------------ assembly

    def build_sets(self, ds, space="template", plan: D.SplitPlan | None = None, subject=None,
                   subject_order=None, stride=None) -> dict:
        """Train/val/test :class:`SampleSet` for dataset ``ds`` in ``space``.

        ``subject`` restricts the plan to one subject (single-subject training);
        source features get the configured dimensionality reduction.
        """
        plan = plan or self.split_plan(ds, [subject] if subject else None)
        stride = int(stride or self.cfg["assemble"]["stride"])
        keys = sorted({k for s in D.SPLITS for k in plan.keys(s)})
        # stride on load keeps only the kept slices in memory
        sess = self.sessions(ds, space, keys, stride=stride)
        rep = "sensor" if space == "sensor" else "source"
        grid = None if rep == "sensor" else self.grid(space, ds, subject)
        sets = D.assemble(plan, sess, rep, grid, stride=1, subject_order=subject_order)
        if rep == "source":
            sets = self.reduce(sets, grid, ds, subject, space)
        return sets

    def reduce(self, sets: dict, grid, ds=None, subject=None, space="template", fit=None):
        """Apply ``source.dimred``; PCA bases are fit on the training split only."""
        dimred = str(self.cfg["source"]["dimred"])
        if dimred == "none":
            return sets
        if self.cfg["source"]["voxel_type"] != "vec":
            raise InvalidConfigError("dimred needs voxel_type=vec")
        V = grid.n_voxels

        def vox(x):
            return np.transpose(x.reshape(len(x), V, 3), (1, 2, 0)).astype(float)

        out = {}
        if dimred.startswith("pca"):
            n = int(dimred[3:])
            if fit is None:
                fit = fit_voxel_pca(vox(sets["train"].features))
                self.fits[(ds, space, subject)] = fit
            for k, s in sets.items():
                r = fit.transform(vox(s.features), n)  # (V, n, N)
                out[k] = _replace_features(s, np.transpose(r, (2, 0, 1)).reshape(len(s), V * n))
        else:
            atlas = self.space_anatomy(space, ds, subject).atlas
            ids = [i for i in np.unique(atlas) if i != 0]
            for k, s in sets.items():
                f, _ = parcel_features(vox(s.features), atlas, ids)  # (P, 12, N)
                out[k] = _replace_features(s, np.transpose(f, (2, 0, 1)).reshape(len(s), 12 * len(ids)))
        return out


def _replace_features(sset, feats):
    return replace(sset, features=np.ascontiguousarray(feats, dtype=np.float32), grid=None)
