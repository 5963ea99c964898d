"""Synthetic MEG ground truth: anatomies, sensor arrays, lead fields and recordings.

All lengths are in millimetres at the API. The forward model is an
equivalent current dipole in a homogeneous conducting sphere centred at the
origin (Sarvas closed form), measured by radially oriented magnetometers.
Lead fields are in fT per nAm.
"""
from __future__ import annotations

import warnings
import zlib
from dataclasses import dataclass, field

import numpy as np
from scipy.cluster.vq import kmeans2
from scipy.ndimage import label as ndlabel
from scipy.signal import lfilter
from scipy.spatial import cKDTree

from .errors import InvalidConfigError, InvalidInputError

DEFAULT_VOXEL_BAND = (400, 900)
# brain ellipsoid semi-axes as fractions of the head radius (x: left-right, y: back-front, z: up)
BRAIN_SEMI_AXES = (1.0, 1.1, 0.95)
# voxel centres must stay this fraction of the head radius away from the scalp
BRAIN_MARGIN = 0.97
N_ATLAS_CLUSTERS = 12
N_UNASSIGNED_CLUSTERS = 4
_MU0_OVER_4PI = 1e-7
# mm -> m for positions, nAm -> Am for moments, T -> fT for fields
_UNIT_SCALE = _MU0_OVER_4PI * 1e-9 * 1e15


@dataclass(frozen=True, eq=False)
class Anatomy:
    """Voxel grid of one brain.

    ``lattice_index`` holds integer cell coordinates of the inside voxels in
    C order of ``inside_mask``; ``centers`` are their head-frame positions.
    ``subject_affine`` maps template coordinates to this anatomy's coordinates.
    """

    voxel_size_mm: float
    head_radius_mm: float
    lattice_origin: np.ndarray
    inside_mask: np.ndarray
    atlas: np.ndarray
    subject_affine: np.ndarray
    name: str = "template"
    lattice_index: np.ndarray = field(init=False)
    centers: np.ndarray = field(init=False)

    def __post_init__(self):
        idx = np.argwhere(self.inside_mask)
        object.__setattr__(self, "lattice_index", idx)
        object.__setattr__(self, "centers", self.lattice_origin + self.voxel_size_mm * idx)
        if len(self.atlas) != len(idx):
            raise InvalidInputError("atlas length must equal the number of inside voxels")

    @property
    def n_voxels(self) -> int:
        return len(self.lattice_index)

    @property
    def lattice_shape(self) -> tuple:
        return tuple(self.inside_mask.shape)

    def region_ids(self):
        ids = np.unique(self.atlas)
        return [int(i) for i in ids if i != 0]

    def region_centroid(self, region_id):
        members = self.atlas == region_id
        if not members.any():
            raise InvalidConfigError(f"unknown region id {region_id}")
        return self.centers[members].mean(axis=0)

    def same_as(self, other: "Anatomy") -> bool:
        return (
            self.voxel_size_mm == other.voxel_size_mm
            and np.array_equal(self.lattice_origin, other.lattice_origin)
            and np.array_equal(self.inside_mask, other.inside_mask)
            and np.array_equal(self.atlas, other.atlas)
            and np.array_equal(self.subject_affine, other.subject_affine)
        )


@dataclass(frozen=True, eq=False)
class SensorArray:
    positions: np.ndarray
    orientations: np.ndarray
    layout_id: str

    @property
    def n_sensors(self) -> int:
        return len(self.positions)


@dataclass(frozen=True, eq=False)
class LeadField:
    """Sensors x (voxels*3) gain matrix; column ``3*v + k`` is voxel v, axis k."""

    matrix: np.ndarray
    zero_voxels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    @property
    def n_sensors(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_voxels(self) -> int:
        return self.matrix.shape[1] // 3

    def column(self, voxel, component):
        return self.matrix[:, 3 * voxel + component]

    def voxel_block(self, voxel):
        return self.matrix[:, 3 * voxel:3 * voxel + 3]


@dataclass(frozen=True, eq=False)
class StimulusTrack:
    labels: np.ndarray
    sampling_rate_hz: float

    @property
    def onsets(self) -> np.ndarray:
        lab = self.labels.astype(np.int8)
        return np.flatnonzero(np.diff(lab) == 1) + 1

    def __len__(self):
        return len(self.labels)


@dataclass(frozen=True, eq=False)
class SensorRecording:
    data: np.ndarray
    sampling_rate_hz: float
    stimulus: StimulusTrack
    sensors: SensorArray
    subject_id: str = "sub-01"
    session_id: str = "ses-01"
    dataset_id: str = "A"

    def __post_init__(self):
        if self.data.shape[0] != self.sensors.n_sensors:
            raise InvalidInputError(
                f"recording has {self.data.shape[0]} channels but the array has {self.sensors.n_sensors} sensors"
            )
        if self.data.shape[1] != len(self.stimulus):
            raise InvalidInputError("stimulus length must equal the number of samples")

    @property
    def n_samples(self) -> int:
        return self.data.shape[1]

    def replace(self, **changes) -> "SensorRecording":
        kw = dict(
            data=self.data,
            sampling_rate_hz=self.sampling_rate_hz,
            stimulus=self.stimulus,
            sensors=self.sensors,
            subject_id=self.subject_id,
            session_id=self.session_id,
            dataset_id=self.dataset_id,
        )
        kw.update(changes)
        return SensorRecording(**kw)


@dataclass
class NoiseConfig:
    background_std: float = 1.0
    ar_coef: float = 0.95
    # sensor noise std relative to the RMS sensor field of the background activity
    sensor_noise_rel: float = 0.2


@dataclass
class ResponseConfig:
    # region id -> gain; empty means no planted response
    regions: dict = field(default_factory=dict)
    amplitude: float = 1.0
    latency_s: float = 0.25
    onset_gain: float = 1.0
    sustained_gain: float = 0.6
    # optional explicit dipoles: voxel index -> orientation 3-vector (head frame)
    dipoles: dict = field(default_factory=dict)


# ----------------------------------------------------------------------------
# anatomy


def _lattice(voxel_size_mm, head_radius_mm):
    # smallest even lattice whose half-offset cells cover the brain's bounding sphere
    n = 2 * max(1, int(np.ceil(BRAIN_MARGIN * head_radius_mm / voxel_size_mm - 0.5)))
    origin = np.full(3, -voxel_size_mm * (n / 2 - 0.5))
    return n, origin


def _brain_contains(points, head_radius_mm):
    semi = head_radius_mm * np.asarray(BRAIN_SEMI_AXES)
    return np.sum((points / semi) ** 2, axis=-1) < 1.0


def _lattice_points(n, origin, voxel_size_mm):
    ijk = np.indices((n, n, n)).reshape(3, -1).T
    return ijk, origin + voxel_size_mm * ijk


def _largest_component_per_region(labels_grid, inside):
    out = labels_grid.copy()
    for rid in np.unique(labels_grid[inside]):
        if rid == 0:
            continue
        comp, n = ndlabel(labels_grid == rid)
        if n > 1:
            sizes = np.bincount(comp.ravel())
            sizes[0] = 0
            keep = np.argmax(sizes)
            out[(comp != keep) & (comp != 0)] = 0
    return out


def build_template_anatomy(voxel_size_mm: float = 15.0, head_radius_mm: float = 80.0, seed: int = 0,
                           band=None) -> Anatomy:
    """Template brain: an ellipsoid inside the head sphere on a cubic lattice.

    The atlas comes from seeded k-means over voxel centres; the clusters
    closest to the brain centre are left unassigned (label 0).
    """
    if not 5 <= voxel_size_mm <= 30:
        raise InvalidConfigError(f"voxel_size_mm must be in [5, 30], got {voxel_size_mm}")
    if head_radius_mm <= 2 * voxel_size_mm:
        raise InvalidConfigError(
            f"head_radius_mm ({head_radius_mm}) must exceed twice the voxel size ({voxel_size_mm})"
        )
    n, origin = _lattice(voxel_size_mm, head_radius_mm)
    ijk, pts = _lattice_points(n, origin, voxel_size_mm)
    inside = _brain_contains(pts, head_radius_mm) & (
        np.linalg.norm(pts, axis=1) < BRAIN_MARGIN * head_radius_mm
    )
    if inside.sum() < 50:
        raise InvalidConfigError(
            f"voxel size {voxel_size_mm} mm yields only {int(inside.sum())} inside voxels (< 50)"
        )
    mask = inside.reshape(n, n, n)
    centers = pts[inside]

    rng = np.random.default_rng(seed)
    k = min(N_ATLAS_CLUSTERS, len(centers))
    cent, lab = kmeans2(centers, k, minit="++", seed=rng)
    # unassign the deepest clusters
    depth_order = np.argsort(np.linalg.norm(cent, axis=1), kind="stable")
    n_unassigned = min(N_UNASSIGNED_CLUSTERS, k - 8) if k > 8 else 0
    deep = set(depth_order[:n_unassigned].tolist())
    kept = [c for c in range(k) if c not in deep]
    # relabel kept clusters 1..m ordered by centroid (x, y, z) for stable ids
    kept.sort(key=lambda c: tuple(np.round(cent[c], 6)))
    remap = np.zeros(k, dtype=np.int32)
    for new, c in enumerate(kept, start=1):
        remap[c] = new
    atlas = remap[lab]

    grid = np.zeros(mask.shape, dtype=np.int32)
    grid[mask] = atlas
    grid = _largest_component_per_region(grid, mask)
    atlas = grid[mask]

    anat = Anatomy(
        voxel_size_mm=float(voxel_size_mm),
        head_radius_mm=float(head_radius_mm),
        lattice_origin=origin,
        inside_mask=mask,
        atlas=atlas,
        subject_affine=np.eye(4),
        name="template",
    )
    _check_band(anat, band)
    return anat


def _check_band(anat, band):
    if band is None:
        return
    lo, hi = band
    if not lo <= anat.n_voxels <= hi:
        raise InvalidConfigError(f"{anat.name}: {anat.n_voxels} inside voxels outside band [{lo}, {hi}]")


def _rotation(axis, angle):
    axis = axis / np.linalg.norm(axis)
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * K @ K


def random_affine(rng, distortion_scale, voxel_size_mm):
    """Small random affine; every component shrinks to identity as the scale goes to 0."""
    frac = distortion_scale / 0.2
    axis = rng.normal(size=3)
    angle = np.deg2rad(10.0) * frac * rng.uniform(-1, 1)
    scales = 1 + distortion_scale * rng.uniform(-1, 1, size=3)
    trans = 0.5 * voxel_size_mm * frac * rng.uniform(-1, 1, size=3)
    A = np.eye(4)
    A[:3, :3] = _rotation(axis, angle) @ np.diag(scales)
    A[:3, 3] = trans
    return A


def derive_subject_anatomy(template: Anatomy, subject_seed: int, distortion_scale: float = 0.1,
                           name: str | None = None, band=None) -> Anatomy:
    """Subject brain: the template warped by a random small affine and re-voxelised."""
    if not 0 <= distortion_scale <= 0.2:
        raise InvalidConfigError(f"distortion_scale must be in [0, 0.2], got {distortion_scale}")
    name = name or f"subject-{subject_seed}"
    if distortion_scale == 0:
        return Anatomy(
            voxel_size_mm=template.voxel_size_mm,
            head_radius_mm=template.head_radius_mm,
            lattice_origin=template.lattice_origin.copy(),
            inside_mask=template.inside_mask.copy(),
            atlas=template.atlas.copy(),
            subject_affine=np.eye(4),
            name=name,
        )
    rng = np.random.default_rng([subject_seed, 0x5AB])
    A = random_affine(rng, distortion_scale, template.voxel_size_mm)
    Ainv = np.linalg.inv(A)
    vs, R = template.voxel_size_mm, template.head_radius_mm
    n, origin = _lattice(vs, R)
    ijk, pts = _lattice_points(n, origin, vs)
    q = pts @ Ainv[:3, :3].T + Ainv[:3, 3]
    inside = _brain_contains(q, R) & (np.linalg.norm(pts, axis=1) < BRAIN_MARGIN * R)
    if inside.sum() < 50:
        raise InvalidConfigError(f"subject anatomy has only {int(inside.sum())} inside voxels")
    # carry labels through the affine by nearest template centre
    _, nearest = cKDTree(template.centers).query(q[inside])
    atlas = template.atlas[nearest]
    mask = inside.reshape(n, n, n)
    grid = np.zeros(mask.shape, dtype=np.int32)
    grid[mask] = atlas
    grid = _largest_component_per_region(grid, mask)
    anat = Anatomy(
        voxel_size_mm=vs,
        head_radius_mm=R,
        lattice_origin=origin,
        inside_mask=mask,
        atlas=grid[mask],
        subject_affine=A,
        name=name,
    )
    _check_band(anat, band)
    return anat


def extremal_region(anatomy: Anatomy, direction) -> int:
    """Labelled region whose centroid lies furthest along ``direction``."""
    direction = np.asarray(direction, dtype=float)
    best, best_val = None, -np.inf
    for rid in anatomy.region_ids():
        v = float(anatomy.region_centroid(rid) @ direction)
        if v > best_val:
            best, best_val = rid, v
    return best


NAMED_DIRECTIONS = {
    "right": (1, 0, 0),
    "left": (-1, 0, 0),
    "front": (0, 1, 0),
    "back": (0, -1, 0),
    "top": (0, 0, 1),
}


def resolve_region(anatomy: Anatomy, name_or_id) -> int:
    if isinstance(name_or_id, str):
        if name_or_id not in NAMED_DIRECTIONS:
            raise InvalidConfigError(
                f"unknown region name {name_or_id!r}; use an id or one of {sorted(NAMED_DIRECTIONS)}"
            )
        return extremal_region(anatomy, NAMED_DIRECTIONS[name_or_id])
    rid = int(name_or_id)
    if rid not in anatomy.region_ids():
        raise InvalidConfigError(f"unknown response region id {rid}")
    return rid


# ----------------------------------------------------------------------------
# sensors and forward model


def _layout_seed(layout_id: str, seed: int):
    return [zlib.crc32(str(layout_id).encode()), int(seed)]


def build_sensor_array(layout_id: str, n_sensors: int, shell_radius_mm: float, seed: int = 0,
                       head_radius_mm: float = 80.0) -> SensorArray:
    """Quasi-uniform radial magnetometers on the upper hemisphere of a shell."""
    if n_sensors < 16:
        raise InvalidConfigError(f"n_sensors must be >= 16, got {n_sensors}")
    if shell_radius_mm <= head_radius_mm:
        raise InvalidConfigError(
            f"shell radius {shell_radius_mm} mm must exceed the head radius {head_radius_mm} mm"
        )
    rng = np.random.default_rng(_layout_seed(layout_id, seed))
    i = np.arange(n_sensors)
    golden = np.pi * (3 - np.sqrt(5))
    z = 1 - (i + 0.5) / n_sensors
    spacing = np.sqrt(2 * np.pi / n_sensors)
    z = np.clip(z + 0.25 * spacing * rng.uniform(-1, 1, n_sensors) * np.sqrt(1 - z ** 2), 0.0, 1.0)
    phi = i * golden + rng.uniform(0, 2 * np.pi) + 0.25 * spacing * rng.uniform(-1, 1, n_sensors)
    rho = np.sqrt(1 - z ** 2)
    unit = np.stack([rho * np.cos(phi), rho * np.sin(phi), z], axis=1)
    unit /= np.linalg.norm(unit, axis=1, keepdims=True)
    return SensorArray(positions=shell_radius_mm * unit, orientations=unit.copy(), layout_id=str(layout_id))


def _lead_vectors(r0_m, r_m, n):
    """Per (sensor, dipole) 3-vector l such that the measured field is l . Q."""
    r0 = r0_m[None, :, :]
    r = r_m[:, None, :]
    nn = n[:, None, :]
    a_vec = r - r0
    a = np.linalg.norm(a_vec, axis=-1)
    rn = np.linalg.norm(r, axis=-1)
    a_dot_r = np.sum(a_vec * r, axis=-1)
    r0_dot_r = np.sum(r0 * r, axis=-1)
    F = a * (rn * a + rn ** 2 - r0_dot_r)
    c1 = a ** 2 / rn + a_dot_r / a + 2 * a + 2 * rn
    c2 = a + 2 * rn + a_dot_r / a
    gradF_n = c1 * np.sum(r * nn, axis=-1) - c2 * np.sum(r0 * nn, axis=-1)
    r0_x_n = np.cross(r0, nn)
    r0_x_r = np.cross(r0, r)
    lead = (F[..., None] * r0_x_n - gradF_n[..., None] * r0_x_r) / (F ** 2)[..., None]
    return _UNIT_SCALE * lead


def dipole_field(position_mm, moment_nam, sensors: SensorArray) -> np.ndarray:
    """Field (fT) of one dipole at every sensor, evaluated through Q x r0 directly."""
    pos = np.asarray(position_mm, float)
    r0 = pos[None, :] * 1e-3
    q = np.asarray(moment_nam, float)
    r = sensors.positions * 1e-3
    n = sensors.orientations
    a_vec = r - r0
    a = np.linalg.norm(a_vec, axis=1)
    rn = np.linalg.norm(r, axis=1)
    a_dot_r = np.sum(a_vec * r, axis=1)
    F = a * (rn * a + rn ** 2 - r @ r0[0])
    gradF = (a ** 2 / rn + a_dot_r / a + 2 * a + 2 * rn)[:, None] * r - (a + 2 * rn + a_dot_r / a)[:, None] * r0
    # cross product in mm so a moment parallel to the position cancels exactly
    q_x_r0 = np.cross(q, pos) * 1e-3
    B = (F[:, None] * q_x_r0[None, :] - (r @ q_x_r0)[:, None] * gradF) / (F ** 2)[:, None]
    return _UNIT_SCALE * np.sum(B * n, axis=1)


def compute_lead_field(anatomy: Anatomy, sensors: SensorArray) -> LeadField:
    R = anatomy.head_radius_mm
    dist = np.linalg.norm(anatomy.centers, axis=1)
    if np.any(dist >= R):
        raise InvalidInputError("all voxel centres must lie inside the head sphere")
    if np.any(np.linalg.norm(sensors.positions, axis=1) <= R):
        raise InvalidInputError("all sensors must lie outside the head sphere")
    lead = _lead_vectors(anatomy.centers * 1e-3, sensors.positions * 1e-3, sensors.orientations)
    at_center = np.flatnonzero(dist == 0)
    if len(at_center):
        warnings.warn(f"{len(at_center)} voxel(s) at the sphere centre produce no field; columns set to zero")
        lead[:, at_center, :] = 0.0
    S, V = lead.shape[:2]
    return LeadField(matrix=lead.reshape(S, 3 * V), zero_voxels=at_center)


# ----------------------------------------------------------------------------
# stimulus and recordings


def make_stimulus_track(duration_s: float, rate_hz: float, speech_fraction: float,
                        mean_segment_s: float = 2.0, seed: int = 0) -> StimulusTrack:
    """Alternating silence/speech segments with gamma-distributed durations, starting in silence."""
    if not 0 < speech_fraction < 1:
        raise InvalidConfigError(f"speech_fraction must be in (0, 1), got {speech_fraction}")
    n = int(round(duration_s * rate_hz))
    labels = np.zeros(n, dtype=np.int8)
    rng = np.random.default_rng(seed)
    means = (mean_segment_s * (1 - speech_fraction) / speech_fraction, mean_segment_s)
    t, state = 0, 0
    while t < n:
        dur = max(1, int(round(rng.gamma(2.0, means[state] / 2.0) * rate_hz)))
        labels[t:t + dur] = state
        t += dur
        state ^= 1
    return StimulusTrack(labels=labels, sampling_rate_hz=float(rate_hz))


def response_drive(stimulus: StimulusTrack, cfg: ResponseConfig) -> np.ndarray:
    """Stimulus-locked time course: onset transients peaking at ``latency_s`` plus a sustained part."""
    fs = stimulus.sampling_rate_hz
    n = len(stimulus)
    tau = cfg.latency_s
    t = np.arange(int(np.ceil(6 * tau * fs))) / fs
    k_onset = (t / tau) * np.exp(1 - t / tau)
    impulses = np.zeros(n)
    impulses[stimulus.onsets] = 1.0
    drive = cfg.onset_gain * np.convolve(impulses, k_onset)[:n]
    ts = 0.4 * tau
    k_sus = t * np.exp(-t / ts)
    k_sus /= k_sus.sum()
    drive += cfg.sustained_gain * np.convolve(stimulus.labels.astype(float), k_sus)[:n]
    return drive


def _tangential(direction, position):
    r_hat = position / np.linalg.norm(position)
    v = direction - (direction @ r_hat) * r_hat
    nv = np.linalg.norm(v)
    if nv < 1e-12:
        return np.zeros(3)
    return v / nv


def response_sources(anatomy: Anatomy, cfg: ResponseConfig) -> np.ndarray:
    """(voxels, 3) dipole pattern of the planted response, before the time course."""
    V = anatomy.n_voxels
    src = np.zeros((V, 3))
    rot = _polar_rotation(anatomy.subject_affine[:3, :3])
    for rid, gain in cfg.regions.items():
        rid = int(rid)
        members = np.flatnonzero(anatomy.atlas == rid)
        if len(members) == 0:
            raise InvalidConfigError(f"unknown response region id {rid}")
        # region-wide reference direction: tangential 'front/back' axis in template frame
        ref_template = np.cross([0.0, 0.0, 1.0], _template_centroid(anatomy, rid))
        if np.linalg.norm(ref_template) < 1e-9:
            ref_template = np.array([1.0, 0.0, 0.0])
        ref = rot @ (ref_template / np.linalg.norm(ref_template))
        for v in members:
            src[v] = gain * _tangential(ref, anatomy.centers[v])
    for v, ori in cfg.dipoles.items():
        src[int(v)] += np.asarray(ori, float)
    return cfg.amplitude * src


def _template_centroid(anatomy, rid):
    c = anatomy.region_centroid(rid)
    A = anatomy.subject_affine
    return np.linalg.solve(A[:3, :3], c - A[:3, 3])


def _polar_rotation(M):
    U, _, Vt = np.linalg.svd(M)
    R = U @ Vt
    if np.linalg.det(R) < 0:
        U[:, -1] *= -1
        R = U @ Vt
    return R


def forward(leadfield: LeadField, sources: np.ndarray) -> np.ndarray:
    """Sensor signals from source activity of shape (voxels*3, samples) or (voxels, 3, samples)."""
    s = np.asarray(sources)
    if s.ndim == 3:
        s = s.reshape(-1, s.shape[-1])
    return leadfield.matrix @ s


def simulate_recording(anatomy: Anatomy, leadfield: LeadField, sensors: SensorArray,
                       stimulus: StimulusTrack, noise_cfg: NoiseConfig | None = None,
                       response_cfg: ResponseConfig | None = None, seed: int = 0,
                       subject_id="sub-01", session_id="ses-01", dataset_id="A",
                       chunk: int = 4096) -> SensorRecording:
    """Background AR(1) source noise + planted response, projected to sensors, plus white sensor noise."""
    noise_cfg = noise_cfg or NoiseConfig()
    response_cfg = response_cfg or ResponseConfig()
    if leadfield.n_voxels != anatomy.n_voxels or leadfield.n_sensors != sensors.n_sensors:
        raise InvalidInputError("lead field shape does not match the anatomy and sensor array")
    S, T = sensors.n_sensors, len(stimulus)
    fs = stimulus.sampling_rate_hz
    ss = np.random.SeedSequence(seed)
    rng_bg, rng_sens = (np.random.default_rng(s) for s in ss.spawn(2))

    topo = leadfield.matrix @ response_sources(anatomy, response_cfg).ravel()
    data = np.outer(topo, response_drive(stimulus, response_cfg)) if T else np.zeros((S, 0))

    sd = noise_cfg.background_std
    if sd > 0 and T:
        phi = noise_cfg.ar_coef
        b, a = [np.sqrt(1 - phi ** 2)], [1.0, -phi]
        n_src = 3 * anatomy.n_voxels
        zi = phi * rng_bg.standard_normal((n_src, 1))
        for start in range(0, T, chunk):
            stop = min(T, start + chunk)
            e = rng_bg.standard_normal((n_src, stop - start))
            x, zi = lfilter(b, a, e, axis=1, zi=zi)
            data[:, start:stop] += sd * (leadfield.matrix @ x)

    rel = noise_cfg.sensor_noise_rel
    if rel > 0 and T:
        bg_rms = sd * np.sqrt(np.mean(np.sum(leadfield.matrix ** 2, axis=1)))
        scale = rel * (bg_rms if bg_rms > 0 else 1.0)
        data += scale * rng_sens.standard_normal((S, T))

    return SensorRecording(
        data=data,
        sampling_rate_hz=float(fs),
        stimulus=stimulus,
        sensors=sensors,
        subject_id=subject_id,
        session_id=session_id,
        dataset_id=dataset_id,
    )


def in_voxel_band(anatomy: Anatomy, band=DEFAULT_VOXEL_BAND) -> bool:
    lo, hi = band
    return lo <= anatomy.n_voxels <= hi
