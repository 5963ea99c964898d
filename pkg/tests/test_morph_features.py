import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from srcspace import morph, sim
from srcspace.errors import InvalidConfigError, InvalidInputError
from srcspace.features import PARCEL_STATS, fit_voxel_pca, parcel_features, voxel_pca
from srcspace.inverse import SourceEstimate


def _shifted(template, shift_cells):
    A = np.eye(4)
    A[:3, 3] = np.asarray(shift_cells, float) * template.voxel_size_mm
    return sim.Anatomy(template.voxel_size_mm, template.head_radius_mm, template.lattice_origin,
                       template.inside_mask, template.atlas, A, name="shifted")


def test_identity_morph(template):
    m = morph.compute_morph(template, template)
    x = np.random.default_rng(0).normal(size=(template.n_voxels, 3, 4))
    assert np.array_equal(m.apply_flat(x), x)
    assert not m.flagged.any()


def test_morph_rows_sum_to_one_or_zero(template, subject):
    m = morph.compute_morph(subject, template)
    rows = np.asarray(m.matrix.sum(axis=1)).ravel()
    assert np.allclose(rows[~m.flagged], 1.0)
    assert np.all(rows[m.flagged] == 0.0)
    assert m.matrix.shape == (template.n_voxels, subject.n_voxels)
    assert np.all(m.matrix.data >= 0)


def test_one_cell_translation_is_exact(template):
    # a subject whose frame is the template shifted by one voxel: values move by exactly one cell
    shifted = _shifted(template, [0, 0, 0])
    A = np.eye(4)
    A[0, 3] = template.voxel_size_mm
    moved = sim.Anatomy(template.voxel_size_mm, template.head_radius_mm, template.lattice_origin,
                        template.inside_mask, template.atlas, A, name="moved")
    m = morph.compute_morph(moved, shifted)
    assert np.allclose(m.rotation, np.eye(3))
    x = np.random.default_rng(0).normal(size=template.n_voxels)
    y = m.apply_flat(x, vec=False)
    src_index = {tuple(c): i for i, c in enumerate(template.lattice_index.tolist())}
    for t, c in enumerate(template.lattice_index.tolist()):
        s = src_index.get((c[0] + 1, c[1], c[2]))
        if s is not None and m.interior[t]:
            assert y[t] == pytest.approx(x[s], abs=1e-12)


def test_smooth_field_round_trip_on_interior(template, subject):
    fwd = morph.compute_morph(template, subject)
    back = morph.compute_morph(subject, template)
    f = np.sin(template.centers[:, 0] / 40.0) + template.centers[:, 1] / 100.0
    out = back.apply_flat(fwd.apply_flat(f, vec=False), vec=False)
    inner = back.interior & (back.matrix @ fwd.interior.astype(float) > 0.999)
    assert inner.sum() > 0.3 * template.n_voxels
    assert np.max(np.abs(out[inner] - f[inner])) < 0.05


def test_vector_components_are_rotated(template, subject):
    m = morph.compute_morph(template, subject)
    R = m.rotation
    assert np.allclose(R @ R.T, np.eye(3)) and np.linalg.det(R) == pytest.approx(1.0)
    x = np.zeros((template.n_voxels, 3, 1))
    x[:, 0, 0] = 1.0
    y = m.apply_flat(x)
    live = ~m.flagged
    assert np.allclose(y[live, :, 0], R[:, 0][None, :])


def test_morph_estimate_carries_flags(template, subject):
    est = SourceEstimate(np.ones((subject.n_voxels, 3, 2)), "vec", 100.0, subject)
    out = morph.morph_estimate(est, subject, template)
    assert out.data.shape == (template.n_voxels, 3, 2)
    assert out.anatomy is template
    assert np.all(out.data[out.flagged] == 0)
    with pytest.raises(InvalidInputError):
        morph.compute_morph(subject, template).apply_flat(np.ones((3, 3)))


def test_morph_direction_protocol(template, subject):
    p = morph.morph_direction_for_eval("to_template", subject, template=template)
    assert p.source is subject and p.target is template
    p = morph.morph_direction_for_eval("to_subject", subject, target_subject=template)
    assert p.target is template
    assert morph.morph_direction_for_eval("in_domain", subject).is_identity
    with pytest.raises(InvalidConfigError):
        morph.morph_direction_for_eval("to_template", subject)
    with pytest.raises(InvalidConfigError):
        morph.morph_direction_for_eval("sideways", subject)


def test_singular_affine_rejected(template):
    bad = sim.Anatomy(template.voxel_size_mm, template.head_radius_mm, template.lattice_origin,
                      template.inside_mask, template.atlas, np.zeros((4, 4)), name="bad")
    with pytest.raises(InvalidInputError):
        morph.compute_morph(bad, template)


# ---------------------------------------------------------------- features

def test_pca_full_rank_round_trip(rng):
    x = rng.normal(size=(10, 3, 200)) * np.array([3.0, 1.0, 0.2])[None, :, None]
    red, fit = voxel_pca(x, 3)
    assert np.allclose(fit.inverse_transform(red), x)
    assert np.all(np.diff(fit.explained_variance, axis=1) <= 1e-12)


@given(st.integers(1, 3), st.integers(0, 1000))
@settings(max_examples=30, deadline=None)
def test_pca_components_are_orthonormal(n, seed):
    x = np.random.default_rng(seed).normal(size=(4, 3, 50))
    red, fit = voxel_pca(x, n)
    assert red.shape == (4, n, 50)
    for v in range(4):
        C = fit.components[v]
        assert np.allclose(C @ C.T, np.eye(3), atol=1e-10)


def test_pca_first_axis_follows_dominant_direction(rng):
    d = np.array([1.0, 2.0, -2.0]) / 3.0
    s = rng.normal(size=500)
    x = (d[:, None] * s[None] + 0.01 * rng.normal(size=(3, 500)))[None]
    _, fit = voxel_pca(x, 1)
    assert abs(abs(fit.components[0, 0] @ d) - 1) < 1e-3


def test_pca_reuses_training_fit(rng):
    train = rng.normal(size=(5, 3, 100))
    fit = fit_voxel_pca([train[..., :50], train[..., 50:]])
    test = rng.normal(size=(5, 3, 20))
    red, same = voxel_pca(test, 2, fit=fit)
    assert same is fit
    assert np.allclose(red, fit.transform(test, 2))


def test_pca_bad_n():
    with pytest.raises(InvalidConfigError):
        voxel_pca(np.zeros((2, 3, 5)), 4)
    with pytest.raises(InvalidInputError):
        fit_voxel_pca(np.zeros((2, 2, 5)))


def test_parcel_statistics(rng):
    x = rng.normal(size=(6, 3, 7))
    atlas = np.array([1, 1, 2, 2, 2, 0])
    f, ids = parcel_features(x, atlas)
    assert ids == [1, 2] and f.shape == (2, 12, 7)
    m = x[atlas == 2]
    assert np.allclose(f[1, 0:3], m.mean(0))
    assert np.allclose(f[1, 3:6], m.std(0))
    assert np.allclose(f[1, 6:9], m.max(0))
    assert np.allclose(f[1, 9:12], m.min(0))
    assert PARCEL_STATS == ("mean", "std", "max", "min")


def test_empty_parcel_dropped_with_warning(rng, caplog):
    x = rng.normal(size=(3, 3, 2))
    with caplog.at_level(logging.WARNING):
        f, ids = parcel_features(x, np.array([1, 1, 2]), region_ids=[1, 2, 5])
    assert ids == [1, 2]
    assert "5" in caplog.text
