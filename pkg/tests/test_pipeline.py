import copy

import numpy as np
import pytest

from conftest import tiny_config
from srcspace import data as D
from srcspace.errors import CorruptCacheError, InvalidConfigError, LeakageError
from srcspace.pipeline import Scenario, parse_space


def test_parse_space():
    assert parse_space("sensor") == ("sensor", None)
    assert parse_space("subject:B:001") == ("subject", ("B", "001"))
    for bad in ("mni", "subject:B", "subject:a:b:c"):
        with pytest.raises(InvalidConfigError):
            parse_space(bad)


def test_split_plans_follow_guards(tiny_cfg):
    scn = Scenario(tiny_cfg)
    a = scn.split_plan("A")
    assert a.guard == "subject"
    assert a.train_subjects() == ["a1", "a2"]
    b = scn.split_plan("B")
    assert b.guard == "session"
    assert {k[1] for k in b.test} == {"ses-3"} and {k[0] for k in b.test} == {"001", "002", "003"}
    one = scn.split_plan("B", ["002"])
    assert {k[0] for k in one.train + one.val + one.test} == {"002"}


def test_overlapping_split_config_rejected(tmp_path):
    cfg = tiny_config(tmp_path)
    cfg["scenario"]["datasets"]["A"]["split"]["test"] = ["a1"]
    with pytest.raises(LeakageError):
        Scenario(cfg).split_plan("A")


def test_response_regions_per_subject(tiny_cfg):
    scn = Scenario(tiny_cfg)
    r1 = scn.response_config("B", "001").regions
    r3 = scn.response_config("B", "003").regions
    assert scn.region_id("left") not in r1
    assert scn.region_id("left") in r3 and scn.region_id("right") in r3


def test_stage_outputs_are_deterministic_and_cached(tiny_cfg):
    s1 = Scenario(tiny_cfg)
    f1 = s1.features("A", "a1", "ses-1", "template")
    assert s1.stats["misses"] == 3  # simulate, preprocess, features
    s2 = Scenario(tiny_cfg)
    f2 = s2.features("A", "a1", "ses-1", "template")
    assert s2.stats == {"hits": 1, "misses": 0}
    assert f1.features.tobytes() == f2.features.tobytes()
    fresh = Scenario(tiny_cfg, cache_root=False).features("A", "a1", "ses-1", "template")
    assert fresh.features.tobytes() == f1.features.tobytes()
    forced = Scenario(tiny_cfg, force=True)
    forced.features("A", "a1", "ses-1", "template")
    assert forced.stats["hits"] == 0


def test_override_changes_only_downstream_keys(tiny_cfg):
    a = Scenario(tiny_cfg)
    cfg = copy.deepcopy(tiny_cfg)
    cfg["source"]["snr"] = 1.0
    b = Scenario(cfg)
    assert a._pre_key("A", "a1", "ses-1") == b._pre_key("A", "a1", "ses-1")
    assert D.key_hash(a._feat_key("A", "a1", "ses-1", "template")) != D.key_hash(b._feat_key("A", "a1", "ses-1", "template"))
    cfg2 = copy.deepcopy(tiny_cfg)
    cfg2["source"]["dimred"] = "pca1"
    assert a._feat_key("A", "a1", "ses-1", "template") == Scenario(cfg2)._feat_key("A", "a1", "ses-1", "template")
    # sensor features ignore source settings
    assert a._feat_key("A", "a1", "ses-1", "sensor") == b._feat_key("A", "a1", "ses-1", "sensor")


def test_corrupt_stage_file_is_reported(tiny_cfg):
    scn = Scenario(tiny_cfg)
    scn.simulate("A", "a2", "ses-1")
    key = scn._sim_key("A", "a2", "ses-1")
    path = D.cache_path(scn.cache_root, key, "A", "a2", "ses-1")
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) // 2])
    with pytest.raises(CorruptCacheError):
        Scenario(tiny_cfg).simulate("A", "a2", "ses-1")
    # --force rewrites the entry
    Scenario(tiny_cfg, force=True).simulate("A", "a2", "ses-1")
    assert path.read_bytes() == raw


def test_feature_shapes_per_space(tiny_cfg):
    scn = Scenario(tiny_cfg, cache_root=False)
    n_t = scn.template.n_voxels
    n_s = scn.anatomy("B", "001").n_voxels
    assert n_s != n_t
    sens = scn.features("B", "001", "ses-1", "sensor")
    nat = scn.features("B", "001", "ses-1", "native")
    tmpl = scn.features("B", "001", "ses-1", "template")
    other = scn.features("B", "001", "ses-1", "subject:B:002")
    assert sens.features.shape[1] == 40
    assert nat.features.shape[1] == 3 * n_s
    assert tmpl.features.shape[1] == 3 * n_t
    assert other.features.shape[1] == 3 * scn.anatomy("B", "002").n_voxels
    T = len(sens.labels)
    assert T == int(tiny_cfg["scenario"]["session_s"] * tiny_cfg["preprocess"]["resample_hz"])
    for f in (sens, nat, tmpl):
        assert f.features.dtype == np.float32 and f.features.shape[0] == T
        live = f.features.std(0) > 0
        assert np.all(np.abs(f.features.mean(0)) < 1e-4)
        assert np.allclose(f.features[:, live].std(0), 1.0, atol=1e-3)


def test_build_sets(tiny_cfg):
    scn = Scenario(tiny_cfg)
    sets = scn.build_sets("A", "template")
    T = int(12.0 * 100.0 / 4)
    assert (len(sets["train"]), len(sets["val"]), len(sets["test"])) == (2 * T, T, T)
    assert sets["train"].grid.n_voxels == scn.template.n_voxels
    assert np.all(sets["test"].subject_index == -1)
    sens = scn.build_sets("A", "sensor")
    assert sens["train"].grid is None and sens["train"].dim == 48
    assert np.array_equal(sens["train"].labels, sets["train"].labels)


@pytest.mark.parametrize("dimred,dim", [("pca1", 1), ("pca2", 2), ("parcels", None)])
def test_dimred_at_assembly(tmp_path, dimred, dim):
    cfg = tiny_config(tmp_path)
    cfg["source"]["dimred"] = dimred
    scn = Scenario(cfg)
    sets = scn.build_sets("A", "template")
    V = scn.template.n_voxels
    expect = V * dim if dim else 12 * len(scn.template.region_ids())
    assert all(s.dim == expect for s in sets.values())
    assert sets["train"].grid is None


def test_template_structurals_skip_morph(tmp_path):
    cfg = tiny_config(tmp_path)
    cfg["source"]["structurals"] = "template"
    scn = Scenario(cfg, cache_root=False)
    est = scn.reconstruct("A", "a1", "ses-1")
    assert est.anatomy is scn.template
    assert scn.features("A", "a1", "ses-1", "native").features.shape[1] == 3 * scn.template.n_voxels
