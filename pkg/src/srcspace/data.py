"""Sample assembly, split plans, dense voxel boxes, augmentations, region masking and the tensor cache."""
from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import CorruptCacheError, InvalidConfigError, InvalidInputError, LeakageError, RegionSkipped

SPLITS = ("train", "val", "test")
MIN_REGION_VOXELS = 5
N_BOX_CHANNELS = 6


# --------------------------------------------------------------------------- grids

@dataclass(frozen=True, eq=False)
class GridLayout:
    """Placement of a voxel set inside its bounding lattice.

    ``positions`` holds per-voxel x, y, z scaled to [-1, 1] over the occupied
    lattice extent of each axis.
    """

    dims: tuple
    lattice_index: np.ndarray  # (voxels, 3)
    inside_mask: np.ndarray
    positions: np.ndarray  # (voxels, 3)
    name: str = ""

    @classmethod
    def from_anatomy(cls, anatomy) -> "GridLayout":
        idx = np.asarray(anatomy.lattice_index)
        lo, hi = idx.min(0), idx.max(0)
        span = np.where(hi > lo, hi - lo, 1)
        pos = 2.0 * (idx - lo) / span - 1.0
        return cls(tuple(anatomy.lattice_shape), idx, np.asarray(anatomy.inside_mask), pos, anatomy.name)

    @property
    def n_voxels(self) -> int:
        return len(self.lattice_index)

    @property
    def flat_index(self) -> np.ndarray:
        return np.ravel_multi_index(tuple(self.lattice_index.T), self.dims)

    def same_as(self, other: "GridLayout") -> bool:
        return self.dims == other.dims and np.array_equal(self.lattice_index, other.lattice_index)


def inscribe_to_box(features: np.ndarray, grid: GridLayout, representation: str = "source") -> np.ndarray:
    """Scatter flat vec features (..., voxels*3) into dense (..., 6, nx, ny, nz) boxes.

    Channels 0-2 carry the vector components and 3-5 the positional values;
    cells outside the brain are zero in every channel.
    """
    if representation != "source":
        raise InvalidInputError("only source-space samples can be inscribed into a voxel box")
    x = np.asarray(features)
    lead = x.shape[:-1]
    if x.shape[-1] != 3 * grid.n_voxels:
        raise InvalidInputError(f"feature length {x.shape[-1]} != 3 x {grid.n_voxels} voxels")
    x = x.reshape(-1, grid.n_voxels, 3)
    box = np.zeros((x.shape[0], N_BOX_CHANNELS, int(np.prod(grid.dims))), dtype=x.dtype)
    fi = grid.flat_index
    box[:, 0:3, fi] = np.transpose(x, (0, 2, 1))
    box[:, 3:6, fi] = grid.positions.T.astype(x.dtype)
    return box.reshape(lead + (N_BOX_CHANNELS,) + tuple(grid.dims))


def extract_from_box(box: np.ndarray, grid: GridLayout) -> np.ndarray:
    """Inverse of :func:`inscribe_to_box` for channels 0-2: (..., 6, nx, ny, nz) -> (..., voxels*3)."""
    b = np.asarray(box)
    lead = b.shape[:-4]
    flat = b.reshape((-1, b.shape[-4], int(np.prod(grid.dims))))[:, 0:3, grid.flat_index]
    return np.transpose(flat, (0, 2, 1)).reshape(lead + (3 * grid.n_voxels,))


# --------------------------------------------------------------------------- splits and samples

@dataclass(frozen=True)
class SplitPlan:
    """Session keys ``(subject, session)`` per split.

    ``guard`` is ``"session"`` (no session in two splits) or ``"subject"``
    (no subject in two splits).
    """

    train: tuple
    val: tuple
    test: tuple
    guard: str = "session"

    def __post_init__(self):
        for name in SPLITS:
            object.__setattr__(self, name, tuple(tuple(k) for k in getattr(self, name)))
        if self.guard not in ("session", "subject"):
            raise InvalidConfigError(f"guard must be 'session' or 'subject', got {self.guard!r}")

    def keys(self, split):
        return getattr(self, split)

    def validate(self):
        unit = (lambda k: k[0]) if self.guard == "subject" else (lambda k: tuple(k))
        seen = {}
        for split in SPLITS:
            for k in self.keys(split):
                u = unit(k)
                if u in seen and seen[u] != split:
                    raise LeakageError(f"{self.guard} {u!r} appears in both {seen[u]} and {split}")
                seen[u] = split
        return self

    def train_subjects(self):
        out = []
        for subj, _ in self.train:
            if subj not in out:
                out.append(subj)
        return out


@dataclass(frozen=True, eq=False)
class SessionData:
    """One preprocessed session: ``features`` is (samples, dim), ``labels`` (samples,)."""

    subject: str
    session: str
    features: np.ndarray
    labels: np.ndarray
    dataset: str = ""


@dataclass(frozen=True, eq=False)
class SampleSet:
    """Single-time-slice samples. ``subject_index`` is -1 for subjects unseen in training."""

    features: np.ndarray
    labels: np.ndarray
    subject_index: np.ndarray
    split: str
    representation: str
    grid: GridLayout | None = None
    session_keys: tuple = ()
    session_of_sample: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int32))

    def __len__(self):
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, mask) -> "SampleSet":
        m = np.asarray(mask)
        return replace(self, features=self.features[m], labels=self.labels[m],
                       subject_index=self.subject_index[m], session_of_sample=self.session_of_sample[m])

    def for_subject(self, subject) -> "SampleSet":
        keys = [i for i, k in enumerate(self.session_keys) if k[0] == subject]
        return self.subset(np.isin(self.session_of_sample, keys))


def concat_sets(sets, split=None) -> SampleSet:
    sets = list(sets)
    if not sets:
        raise InvalidInputError("nothing to concatenate")
    keys, sess = [], []
    for s in sets:
        sess.append(s.session_of_sample + len(keys))
        keys.extend(s.session_keys)
    first = sets[0]
    return SampleSet(
        features=np.concatenate([s.features for s in sets]),
        labels=np.concatenate([s.labels for s in sets]),
        subject_index=np.concatenate([s.subject_index for s in sets]),
        split=split or first.split,
        representation=first.representation,
        grid=first.grid,
        session_keys=tuple(keys),
        session_of_sample=np.concatenate(sess),
    )


def assemble(plan: SplitPlan, sessions, representation: str = "source", grid: GridLayout | None = None,
             stride: int = 1, subject_order=None, dtype=np.float32) -> dict:
    """Build one :class:`SampleSet` per split from ``sessions`` keyed by (subject, session).

    Every ``stride``-th time slice is kept. Subject indices follow
    ``subject_order`` (default: order of first appearance in the training split).
    """
    if representation not in ("sensor", "source"):
        raise InvalidConfigError(f"representation must be 'sensor' or 'source', got {representation!r}")
    if stride < 1:
        raise InvalidConfigError("stride must be >= 1")
    plan.validate()
    order = list(subject_order) if subject_order is not None else plan.train_subjects()
    index = {s: i for i, s in enumerate(order)}
    out = {}
    for split in SPLITS:
        feats, labs, subj, sess = [], [], [], []
        keys = plan.keys(split)
        for j, key in enumerate(keys):
            if key not in sessions:
                raise InvalidInputError(f"session {key} listed in the {split} split is not available")
            sd = sessions[key]
            x = np.asarray(sd.features)[::stride]
            y = np.asarray(sd.labels)[::stride]
            feats.append(x.astype(dtype, copy=False))
            labs.append(y.astype(np.int8))
            subj.append(np.full(len(y), index.get(key[0], -1), dtype=np.int32))
            sess.append(np.full(len(y), j, dtype=np.int32))
        dim = feats[0].shape[1] if feats else 0
        out[split] = SampleSet(
            features=np.concatenate(feats) if feats else np.zeros((0, dim), dtype),
            labels=np.concatenate(labs) if labs else np.zeros(0, np.int8),
            subject_index=np.concatenate(subj) if subj else np.zeros(0, np.int32),
            split=split,
            representation=representation,
            grid=grid if representation == "source" else None,
            session_keys=keys,
            session_of_sample=np.concatenate(sess) if sess else np.zeros(0, np.int32),
        )
    return out


# --------------------------------------------------------------------------- augmentations

def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def mixup(x, y, alpha: float, seed=None, lam=None):
    """Convex combination of each sample with a randomly paired one.

    ``lam`` (scalar or per-sample) overrides the Beta(alpha, alpha) draw.
    Returns (x', y', lam, perm).
    """
    if alpha <= 0:
        raise InvalidConfigError(f"mixup alpha must be positive, got {alpha}")
    x = np.asarray(x)
    y = np.asarray(y)
    n = len(x)
    if n < 2:
        raise InvalidInputError("mixup needs a batch of at least 2")
    rng = _rng(seed)
    perm = rng.permutation(n)
    lam = rng.beta(alpha, alpha, size=n) if lam is None else np.broadcast_to(np.asarray(lam, float), (n,))
    lx = lam.reshape((n,) + (1,) * (x.ndim - 1)).astype(x.dtype)
    x2 = lx * x + (1 - lx) * x[perm]
    y2 = lam * y + (1 - lam) * y[perm]
    return x2, y2, lam, perm


def _check_prob(p, name):
    if not 0.0 <= p <= 1.0:
        raise InvalidConfigError(f"{name} must be in [0, 1], got {p}")


def slice_keep_mask(dims, n_samples: int, p: float, seed=None, forced=None) -> np.ndarray:
    """Boolean (samples, nx, ny, nz) keep mask; each x, y and z plane dropped with probability ``p``.

    ``forced`` lists ``(axis, index)`` planes to drop in every sample.
    """
    _check_prob(p, "slice dropout p")
    rng = _rng(seed)
    keep = [rng.random((n_samples, d)) >= p for d in dims]
    for axis, i in forced or ():
        keep[axis][:, i] = False
    return keep[0][:, :, None, None] & keep[1][:, None, :, None] & keep[2][:, None, None, :]


def box_mask(dims, corner_a, corner_b) -> np.ndarray:
    """Boolean lattice mask of the inclusive axis-aligned box spanned by two cells."""
    lo = np.minimum(corner_a, corner_b)
    hi = np.maximum(corner_a, corner_b)
    m = np.zeros(dims, dtype=bool)
    m[lo[0]:hi[0] + 1, lo[1]:hi[1] + 1, lo[2]:hi[2] + 1] = True
    return m


def cube_keep_mask(dims, n_samples: int, p_apply: float, seed=None, corners=None) -> np.ndarray:
    """Boolean keep mask; each sample gets a random box with probability ``p_apply``.

    ``corners`` = (a, b) forces the same box on every sample.
    """
    _check_prob(p_apply, "cube mask p_apply")
    rng = _rng(seed)
    keep = np.ones((n_samples,) + tuple(dims), dtype=bool)
    if corners is not None:
        keep &= ~box_mask(dims, *corners)[None]
        return keep
    apply = rng.random(n_samples) < p_apply
    dims_arr = np.asarray(dims)
    for i in np.flatnonzero(apply):
        a = rng.integers(0, dims_arr)
        b = rng.integers(0, dims_arr)
        keep[i] &= ~box_mask(dims, a, b)
    return keep


def apply_keep_mask(batch: np.ndarray, keep: np.ndarray, grid: GridLayout | None = None) -> np.ndarray:
    """Zero the vector channels where ``keep`` is False.

    ``batch`` is dense (B, 6, nx, ny, nz) or flat (B, voxels*3) with ``grid``.
    ``keep`` is (B, nx, ny, nz) or a single (nx, ny, nz) lattice mask.
    """
    b = np.asarray(batch)
    if b.ndim == 5:
        out = b.copy()
        k = keep if keep.ndim == 4 else np.broadcast_to(keep, (b.shape[0],) + keep.shape)
        out[:, 0:3] *= k[:, None].astype(b.dtype)
        return out
    if grid is None:
        raise InvalidInputError("flat batches need a grid layout")
    li = grid.lattice_index
    k = keep[..., li[:, 0], li[:, 1], li[:, 2]]  # (B, voxels) or (voxels,)
    x = b.reshape(b.shape[0], grid.n_voxels, 3)
    return (x * k[..., None].astype(b.dtype)).reshape(b.shape)


def _dims_of(batch, grid):
    b = np.asarray(batch)
    if b.ndim == 5:
        return tuple(b.shape[2:])
    if grid is None:
        raise InvalidInputError("flat batches need a grid layout")
    return tuple(grid.dims)


def slice_dropout(batch, p: float, seed=None, grid: GridLayout | None = None, forced=None):
    """Per-sample random plane masking of the vector channels, without survivor rescaling."""
    keep = slice_keep_mask(_dims_of(batch, grid), len(batch), p, seed, forced)
    return apply_keep_mask(batch, keep, grid)


def cube_mask(batch, p_apply: float, seed=None, grid: GridLayout | None = None, corners=None):
    """Zero the vector channels inside a random lattice box for a fraction of samples."""
    keep = cube_keep_mask(_dims_of(batch, grid), len(batch), p_apply, seed, corners)
    return apply_keep_mask(batch, keep, grid)


def region_lattice_mask(grid: GridLayout, atlas, region_id: int, buffer_voxels: int = 1,
                        min_voxels: int = MIN_REGION_VOXELS) -> np.ndarray:
    """Lattice mask of a region grown by ``buffer_voxels`` steps of 6-connected dilation."""
    atlas = np.asarray(atlas)
    members = atlas == region_id
    n = int(members.sum())
    if n < min_voxels:
        raise RegionSkipped(region_id, n, min_voxels)
    m = np.zeros(grid.dims, dtype=bool)
    li = grid.lattice_index[members]
    m[li[:, 0], li[:, 1], li[:, 2]] = True
    if buffer_voxels > 0:
        m = ndimage.binary_dilation(m, ndimage.generate_binary_structure(3, 1), iterations=buffer_voxels)
    return m


def region_mask(batch, grid: GridLayout, atlas, region_id: int, buffer_voxels: int = 1):
    """Zero the vector channels of a region plus its buffer; rejects regions under 5 voxels."""
    m = region_lattice_mask(grid, atlas, region_id, buffer_voxels)
    return apply_keep_mask(batch, ~m, grid)


# --------------------------------------------------------------------------- cache

MAGIC = b"TNS1"


def key_hash(key) -> str:
    blob = json.dumps(key, sort_keys=True, default=_json_default).encode()
    return hashlib.sha256(blob).hexdigest()[:24]


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (set, tuple)):
        return list(o)
    return str(o)


def cache_root(root=None) -> Path:
    return Path(root or os.environ.get("SRCSPACE_CACHE", "cache"))


def cache_path(root, key, dataset="_", subject="_", session="_") -> Path:
    return cache_root(root) / str(dataset) / str(subject) / str(session) / f"{key_hash(key)}.tns"


def cache_store(path, tensors, key=None, meta=None) -> Path:
    """Write named arrays to ``path`` in the TNS1 format.

    Layout: magic, uint64 header length, JSON header, raw little-endian payload.
    The header records dtype, shape and offset per tensor, the key hash and a
    sha256 of the payload.
    """
    if isinstance(tensors, (np.ndarray, np.generic)):
        tensors = {"data": tensors}
    entries, chunks, offset = [], [], 0
    for name, arr in tensors.items():
        a = np.asarray(arr, order="C")
        a = a.astype(a.dtype.newbyteorder("<"), copy=False)
        raw = a.tobytes()
        entries.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape), "offset": offset,
                        "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {
        "tensors": entries,
        "key_hash": key_hash(key) if key is not None else None,
        "key": key,
        "meta": meta or {},
        "sha256": hashlib.sha256(payload).hexdigest(),
    }
    hb = json.dumps(header, sort_keys=True, default=_json_default).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + f".tmp{os.getpid()}")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(hb)))
        f.write(hb)
        f.write(payload)
    os.replace(tmp, path)
    return path


def cache_read_header(path) -> dict:
    with open(path, "rb") as f:
        head = f.read(12)
        if len(head) < 12 or head[:4] != MAGIC:
            raise CorruptCacheError(f"{path}: bad magic or truncated header")
        (n,) = struct.unpack("<Q", head[4:])
        hb = f.read(n)
    if len(hb) != n:
        raise CorruptCacheError(f"{path}: truncated header")
    try:
        return json.loads(hb)
    except json.JSONDecodeError as e:
        raise CorruptCacheError(f"{path}: unreadable header ({e})") from None


def cache_load(path, key=None, with_meta: bool = False):
    """Read tensors written by :func:`cache_store`, verifying size, key and checksum."""
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < 12 or blob[:4] != MAGIC:
        raise CorruptCacheError(f"{path}: bad magic or truncated header")
    (n,) = struct.unpack("<Q", blob[4:12])
    try:
        header = json.loads(blob[12:12 + n])
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise CorruptCacheError(f"{path}: unreadable header ({e})") from None
    payload = blob[12 + n:]
    expected = sum(e["nbytes"] for e in header["tensors"])
    if len(payload) != expected:
        raise CorruptCacheError(f"{path}: payload has {len(payload)} bytes, expected {expected}")
    if hashlib.sha256(payload).hexdigest() != header["sha256"]:
        raise CorruptCacheError(f"{path}: checksum mismatch")
    if key is not None and header.get("key_hash") != key_hash(key):
        raise CorruptCacheError(f"{path}: key hash does not match the requested key")
    out = {}
    for e in header["tensors"]:
        a = np.frombuffer(payload, dtype=np.dtype(e["dtype"]), count=int(np.prod(e["shape"], dtype=np.int64)),
                          offset=e["offset"]).reshape(tuple(e["shape"]))
        out[e["name"]] = a.copy()
    if with_meta:
        return out, header.get("meta", {})
    return out
