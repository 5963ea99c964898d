"""Dimensionality reductions for source estimates: per-voxel PCA and parcel summaries."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import InvalidConfigError, InvalidInputError

log = logging.getLogger(__name__)

PARCEL_STATS = ("mean", "std", "max", "min")


@dataclass(frozen=True, eq=False)
class VoxelPCA:
    """Per-voxel principal axes; ``components`` is (voxels, 3, 3) with axes as rows, sorted by variance."""

    mean: np.ndarray  # (voxels, 3)
    components: np.ndarray
    explained_variance: np.ndarray  # (voxels, 3)

    def transform(self, data: np.ndarray, n_components: int) -> np.ndarray:
        """(voxels, 3, samples) -> (voxels, n_components, samples)."""
        _check_n(n_components)
        x = np.asarray(data, float) - self.mean[:, :, None]
        return np.einsum("vkc,vcs->vks", self.components[:, :n_components], x)

    def inverse_transform(self, reduced: np.ndarray) -> np.ndarray:
        n = reduced.shape[1]
        return np.einsum("vkc,vks->vcs", self.components[:, :n], reduced) + self.mean[:, :, None]


def _check_n(n):
    if n not in (1, 2, 3):
        raise InvalidConfigError(f"n_components must be 1, 2 or 3, got {n}")


def fit_voxel_pca(data) -> VoxelPCA:
    """Fit on training samples only. ``data`` is (voxels, 3, samples) or a list of such arrays."""
    if isinstance(data, (list, tuple)):
        data = np.concatenate([np.asarray(d, float) for d in data], axis=-1)
    x = np.asarray(data, float)
    if x.ndim != 3 or x.shape[1] != 3:
        raise InvalidInputError(f"expected (voxels, 3, samples), got {x.shape}")
    mean = x.mean(axis=-1)
    xc = x - mean[:, :, None]
    cov = np.einsum("vas,vbs->vab", xc, xc) / max(x.shape[-1], 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(-evals, axis=1, kind="stable")
    evals = np.take_along_axis(evals, order, axis=1)
    evecs = np.take_along_axis(evecs, order[:, None, :], axis=2)
    return VoxelPCA(mean=mean, components=np.transpose(evecs, (0, 2, 1)), explained_variance=evals)


def voxel_pca(est, n_components: int, fit: VoxelPCA | None = None):
    """Project each voxel's 3-component series onto its top principal axes.

    ``fit`` should come from :func:`fit_voxel_pca` on training data; when omitted
    the basis is fit on ``est`` itself. Returns (reduced, fit).
    """
    _check_n(n_components)
    data = est.data if hasattr(est, "voxel_type") else np.asarray(est, float)
    if getattr(est, "voxel_type", "vec") != "vec":
        raise InvalidInputError("voxel PCA needs a vec estimate")
    fit = fit or fit_voxel_pca(data)
    return fit.transform(data, n_components), fit


def parcel_features(est, atlas: np.ndarray, region_ids=None):
    """Per parcel and axis: mean, std (population), max and min over member voxels.

    Returns (features, parcel_ids) with features shaped (parcels, 12, samples);
    feature index is ``stat * 3 + axis`` in the order of ``PARCEL_STATS``.
    Requested ``region_ids`` without members are dropped with a warning.
    """
    data = est.data if hasattr(est, "voxel_type") else np.asarray(est, float)
    if data.ndim != 3 or data.shape[1] != 3:
        raise InvalidInputError("parcel features need a vec estimate (voxels, 3, samples)")
    atlas = np.asarray(atlas)
    if len(atlas) != data.shape[0]:
        raise InvalidInputError("atlas length does not match the estimate's voxel count")
    ids = region_ids if region_ids is not None else [int(i) for i in np.unique(atlas) if i != 0]
    out, kept = [], []
    for rid in ids:
        members = data[atlas == rid]
        if len(members) == 0:
            log.warning("parcel %d is empty; excluded", rid)
            continue
        stats = [members.mean(0), members.std(0), members.max(0), members.min(0)]
        out.append(np.concatenate(stats, axis=0))
        kept.append(rid)
    if not out:
        return np.zeros((0, 12, data.shape[-1])), []
    return np.stack(out), kept
