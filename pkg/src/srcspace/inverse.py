"""Noise covariance, whitening and linear inverse operators (MNE, dSPM, sLORETA, LCMV).

All operators are built in whitened coordinates: with whitener W and lead
field L, the whitened gain is G = W L and the Tikhonov weight is
lambda^2 = 1 / snr^2.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidConfigError, InvalidInputError
from .sim import Anatomy, LeadField, SensorRecording

COV_FORMS = ("regular", "diagonal", "scalar")
METHODS = ("min_norm", "dspm", "sloreta", "lcmv")
VOXEL_TYPES = ("vec", "mag")
EIG_RTOL = 1e-10


@dataclass(frozen=True, eq=False)
class NoiseCovariance:
    matrix: np.ndarray
    form: str
    n_samples: int = 0


@dataclass(frozen=True, eq=False)
class InverseOperator:
    weights: np.ndarray  # (voxels*3, sensors)
    method: str
    snr: float
    subject_id: str = ""
    # per-row scale applied to the min-norm rows (ones for min_norm; unused for lcmv)
    normalization: np.ndarray = field(default_factory=lambda: np.zeros(0))
    # lcmv rows whose unit-gain denominator vanished
    degenerate: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    @property
    def lambda2(self) -> float:
        return 1.0 / self.snr ** 2

    @property
    def n_sensors(self) -> int:
        return self.weights.shape[1]

    @property
    def n_voxels(self) -> int:
        return self.weights.shape[0] // 3


@dataclass(frozen=True, eq=False)
class SourceEstimate:
    data: np.ndarray  # (voxels, 3, samples) for vec, (voxels, samples) for mag
    voxel_type: str
    sampling_rate_hz: float
    anatomy: Anatomy | None = None
    # voxels whose value was filled with zeros by a morph
    flagged: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    @property
    def n_voxels(self) -> int:
        return self.data.shape[0]

    def magnitude(self) -> "SourceEstimate":
        if self.voxel_type == "mag":
            return self
        return SourceEstimate(np.linalg.norm(self.data, axis=1), "mag", self.sampling_rate_hz,
                              self.anatomy, self.flagged)

    def flat(self) -> np.ndarray:
        """(voxels*k, samples) with voxel-major ordering."""
        return self.data.reshape(-1, self.data.shape[-1])


def _as_data(rec):
    return rec.data if isinstance(rec, SensorRecording) else np.asarray(rec, dtype=float)


def estimate_noise_covariance(rec, segments=None, form: str = "diagonal") -> NoiseCovariance:
    """Population covariance of mean-removed samples selected by ``segments``.

    ``segments`` defaults to silence (stimulus label 0) when ``rec`` is a recording.
    """
    if form not in COV_FORMS:
        raise InvalidConfigError(f"unknown covariance form {form!r}; valid: {COV_FORMS}")
    x = _as_data(rec)
    if segments is None:
        segments = (rec.stimulus.labels == 0) if isinstance(rec, SensorRecording) else np.ones(x.shape[1], bool)
    xs = x[:, np.asarray(segments, bool)]
    n_sens, n = xs.shape
    need = 3 * n_sens if form == "regular" else 2
    if n < need:
        raise InvalidInputError(f"form={form!r} needs at least {need} samples, got {n}")
    xs = xs - xs.mean(axis=1, keepdims=True)
    if form == "regular":
        C = xs @ xs.T / n
        C = 0.5 * (C + C.T)
    else:
        var = np.mean(xs ** 2, axis=1)
        C = np.diag(var) if form == "diagonal" else np.mean(var) * np.eye(n_sens)
    return NoiseCovariance(matrix=C, form=form, n_samples=n)


def build_whitener(cov) -> np.ndarray:
    """Symmetric whitener W with W C W^T equal to the projector onto C's retained eigenspace."""
    C = cov.matrix if isinstance(cov, NoiseCovariance) else np.asarray(cov, float)
    C = 0.5 * (C + C.T)
    evals, evecs = np.linalg.eigh(C)
    top = evals.max() if evals.size else 0.0
    if top <= 0:
        raise InvalidInputError("covariance is all zero; cannot whiten")
    keep = evals > EIG_RTOL * top
    U = evecs[:, keep]
    return (U / np.sqrt(evals[keep])) @ U.T


def _min_norm_whitened(G, lambda2):
    A = G @ G.T + lambda2 * np.eye(G.shape[0])
    return np.linalg.solve(A, G).T


def make_inverse_operator(leadfield, cov, snr: float = 3.0, method: str = "min_norm",
                          data_cov=None, subject_id: str = "") -> InverseOperator:
    """Build a linear sensor-to-source operator.

    ``data_cov`` (sensor-space data covariance) is required for ``lcmv``.
    """
    if method not in METHODS:
        raise InvalidConfigError(f"unknown method {method!r}; valid: {METHODS}")
    if snr <= 0:
        raise InvalidConfigError("snr must be positive")
    L = leadfield.matrix if isinstance(leadfield, LeadField) else np.asarray(leadfield, float)
    W = build_whitener(cov)
    if W.shape[0] != L.shape[0]:
        raise InvalidInputError("covariance and lead field disagree on the number of sensors")
    G = W @ L
    lambda2 = 1.0 / snr ** 2
    n_src = L.shape[1]

    if method == "lcmv":
        if data_cov is None:
            raise InvalidInputError("lcmv needs a data covariance")
        Cd = data_cov.matrix if isinstance(data_cov, NoiseCovariance) else np.asarray(data_cov, float)
        Ct = W @ Cd @ W.T
        Ct = 0.5 * (Ct + Ct.T)
        Ct += 1e-6 * np.trace(Ct) / Ct.shape[0] * np.eye(Ct.shape[0])
        CiG = np.linalg.solve(Ct, G)  # columns C^-1 g
        denom = np.sum(G * CiG, axis=0)
        bad = denom <= 1e-14 * max(denom.max(), 0.0) if denom.size else np.zeros(0, bool)
        bad |= ~np.isfinite(denom)
        safe = np.where(bad, 1.0, denom)
        Wt = (CiG / safe).T
        Wt[bad] = 0.0
        return InverseOperator(weights=Wt @ W, method=method, snr=snr, subject_id=subject_id,
                               normalization=np.ones(n_src), degenerate=bad)

    Kw = _min_norm_whitened(G, lambda2)
    if method == "min_norm":
        scale = np.ones(n_src)
    elif method == "dspm":
        noise_sd = np.sqrt(np.sum(Kw ** 2, axis=1))
        scale = 1.0 / np.where(noise_sd > 0, noise_sd, 1.0)
    else:  # sloreta
        res_diag = np.sum(Kw * G.T, axis=1)
        scale = 1.0 / np.sqrt(np.where(res_diag > 0, res_diag, 1.0))
    return InverseOperator(weights=(scale[:, None] * Kw) @ W, method=method, snr=snr,
                           subject_id=subject_id, normalization=scale)


def apply_inverse(op: InverseOperator, rec, voxel_type: str = "vec", anatomy=None) -> SourceEstimate:
    if voxel_type not in VOXEL_TYPES:
        raise InvalidConfigError(f"unknown voxel type {voxel_type!r}; valid: {VOXEL_TYPES}")
    x = _as_data(rec)
    if x.ndim != 2 or x.shape[0] != op.n_sensors:
        raise InvalidInputError(f"recording has shape {x.shape}; operator expects {op.n_sensors} channels")
    fs = rec.sampling_rate_hz if isinstance(rec, SensorRecording) else 0.0
    src = (op.weights @ x).reshape(op.n_voxels, 3, x.shape[1])
    est = SourceEstimate(src, "vec", fs, anatomy)
    return est if voxel_type == "vec" else est.magnitude()


def data_covariance(rec) -> NoiseCovariance:
    x = _as_data(rec)
    x = x - x.mean(axis=1, keepdims=True)
    C = x @ x.T / max(x.shape[1], 1)
    return NoiseCovariance(matrix=0.5 * (C + C.T), form="regular", n_samples=x.shape[1])
