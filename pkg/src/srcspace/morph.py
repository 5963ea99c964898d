"""Resample source estimates between anatomies related by known affines.

Every anatomy carries ``subject_affine`` mapping template coordinates to its
own head frame, so the point map from a target grid back into a source grid
is ``A_from @ inv(A_to)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .errors import InvalidConfigError, InvalidInputError
from .inverse import SourceEstimate
from .sim import Anatomy, _polar_rotation

EVAL_KINDS = ("to_template", "to_subject", "in_domain")
_SNAP = 1e-9


@dataclass(frozen=True, eq=False)
class Morph:
    """Linear map from one anatomy's voxels to another's.

    ``matrix`` is (target voxels, source voxels); ``rotation`` turns source-frame
    vectors into target-frame vectors; ``flagged`` marks target voxels filled with zeros.
    """

    matrix: sparse.csr_matrix
    rotation: np.ndarray
    flagged: np.ndarray
    source: Anatomy
    target: Anatomy
    # target voxels served by a full 8-corner stencil (or an exact lattice hit)
    interior: np.ndarray | None = None

    @property
    def is_identity(self) -> bool:
        return self.source is self.target

    def apply_flat(self, x: np.ndarray, vec: bool = True) -> np.ndarray:
        """Morph an array shaped (source voxels, 3, ...) if ``vec`` else (source voxels, ...)."""
        x = np.asarray(x)
        if x.shape[0] != self.matrix.shape[1]:
            raise InvalidInputError(f"estimate has {x.shape[0]} voxels; morph expects {self.matrix.shape[1]}")
        tail = x.shape[1:]
        y = self.matrix @ x.reshape(x.shape[0], -1)
        y = y.reshape((self.matrix.shape[0],) + tail)
        if vec:
            y = np.einsum("ij,vj...->vi...", self.rotation, y)
        return y


def _affine_inverse(A):
    A = np.asarray(A, float)
    if A.shape != (4, 4) or abs(np.linalg.det(A[:3, :3])) < 1e-12:
        raise InvalidInputError("affine is not invertible")
    return np.linalg.inv(A)


def compute_morph(from_anat: Anatomy, to_anat: Anatomy) -> Morph:
    """Trilinear weights over the source lattice with nearest-cell fallback at the boundary."""
    Ainv_to = _affine_inverse(to_anat.subject_affine)
    _affine_inverse(from_anat.subject_affine)
    M = from_anat.subject_affine @ Ainv_to
    n_t, n_s = to_anat.n_voxels, from_anat.n_voxels
    if from_anat.same_as(to_anat):
        return Morph(sparse.identity(n_s, format="csr"), np.eye(3), np.zeros(n_t, bool), from_anat, to_anat,
                     np.ones(n_t, bool))

    q = to_anat.centers @ M[:3, :3].T + M[:3, 3]
    u = (q - from_anat.lattice_origin) / from_anat.voxel_size_mm
    near = np.round(u)
    u = np.where(np.abs(u - near) < _SNAP, near, u)

    shape = np.array(from_anat.lattice_shape)
    index = np.full(from_anat.lattice_shape, -1, dtype=np.int64)
    index[tuple(from_anat.lattice_index.T)] = np.arange(n_s)

    def lookup(cells):
        ok = np.all((cells >= 0) & (cells < shape), axis=-1)
        out = np.full(cells.shape[:-1], -1, dtype=np.int64)
        c = cells[ok]
        out[ok] = index[c[:, 0], c[:, 1], c[:, 2]]
        return out

    base = np.floor(u).astype(np.int64)
    frac = u - base
    offsets = np.array([[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)])
    corners = lookup(base[:, None, :] + offsets[None])  # (n_t, 8)
    w = np.prod(np.where(offsets[None] == 1, frac[:, None, :], 1 - frac[:, None, :]), axis=-1)
    # corners with zero weight may sit outside the brain without harm
    full = np.all((corners >= 0) | (w == 0), axis=1)

    nearest = lookup(near.astype(np.int64))
    use_nn = ~full & (nearest >= 0)
    flagged = ~full & ~use_nn

    rows, cols, vals = [], [], []
    t_full = np.flatnonzero(full)
    if len(t_full):
        cf, wf = corners[t_full], w[t_full]
        keep = wf > 0
        rows.append(np.repeat(t_full, 8)[keep.ravel()])
        cols.append(cf[keep])
        vals.append(wf[keep])
    t_nn = np.flatnonzero(use_nn)
    rows.append(t_nn)
    cols.append(nearest[t_nn])
    vals.append(np.ones(len(t_nn)))
    mat = sparse.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n_t, n_s)
    )
    rot = _polar_rotation(to_anat.subject_affine[:3, :3] @ np.linalg.inv(from_anat.subject_affine[:3, :3]))
    return Morph(mat, rot, flagged, from_anat, to_anat, full)


def morph_estimate(est: SourceEstimate, from_anat: Anatomy, to_anat: Anatomy,
                   morph: Morph | None = None) -> SourceEstimate:
    """Resample ``est`` from ``from_anat`` onto ``to_anat``; vec components are rotated."""
    morph = morph or compute_morph(from_anat, to_anat)
    vec = est.voxel_type == "vec"
    data = morph.apply_flat(est.data, vec=vec)
    return SourceEstimate(data, est.voxel_type, est.sampling_rate_hz, to_anat, morph.flagged.copy())


@dataclass(frozen=True)
class MorphPlan:
    kind: str
    source: Anatomy
    target: Anatomy

    @property
    def is_identity(self) -> bool:
        return self.kind == "in_domain"


def morph_direction_for_eval(eval_kind: str, subject_anatomy: Anatomy, template: Anatomy | None = None,
                             target_subject: Anatomy | None = None) -> MorphPlan:
    """Choose source/target anatomies for evaluating a model on another dataset's subject.

    ``to_template`` maps the subject into the template (models trained in template
    space); ``to_subject`` maps it into ``target_subject`` (models trained on one
    subject's own grid); ``in_domain`` leaves it where it is.
    """
    if eval_kind == "to_template":
        if template is None:
            raise InvalidConfigError("to_template needs the template anatomy")
        return MorphPlan(eval_kind, subject_anatomy, template)
    if eval_kind == "to_subject":
        if target_subject is None:
            raise InvalidConfigError("to_subject needs the target subject's anatomy")
        return MorphPlan(eval_kind, subject_anatomy, target_subject)
    if eval_kind == "in_domain":
        return MorphPlan(eval_kind, subject_anatomy, subject_anatomy)
    raise InvalidConfigError(f"unknown eval kind {eval_kind!r}; valid: {EVAL_KINDS}")
