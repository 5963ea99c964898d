"""Model families (logistic, MLP, SE-CNN, GAT), parameter budgets, loss and AdamW."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from ..errors import InvalidConfigError, InvalidInputError, NonFiniteLossError
from .engine import (
    AdaptiveAvgPool3d,
    ChannelDropout,
    Conv3d,
    Dropout,
    Embedding,
    GraphAttention,
    InputConv3d,
    Linear,
    ParamStore,
    ReLU,
    SqueezeExcite,
    neighbour_table,
)
from .graph import build_graph

FAMILIES = ("logistic", "mlp", "cnn_se", "gat")
EMBEDDING_DIM = 16
BUDGET_RTOL = 0.05


@dataclass
class ModelSpec:
    """Architecture description.

    ``hidden`` is the width of the fully connected hidden layers; when it is
    ``None`` it is solved from ``target_params``. ``channels`` are the two
    convolution (cnn_se) or attention (gat) widths.
    """

    family: str
    input_dim: int
    n_subjects: int = 1
    hidden: int | None = None
    target_params: int | None = None
    dropout: float = 0.0
    embedding_dim: int = EMBEDDING_DIM
    channels: tuple = (8, 8)
    pool: int = 2
    se_reduction: int = 16
    representation: str = "source"

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise InvalidConfigError(f"unknown model family {self.family!r}; valid: {FAMILIES}")
        if not 0.0 <= self.dropout < 1.0:
            raise InvalidConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        self.channels = tuple(int(c) for c in self.channels)

    def to_dict(self):
        return asdict(self)


@dataclass
class Geometry:
    """Spatial context: a GridLayout for source models, sensor positions for sensor GATs."""

    grid: object = None
    sensor_positions: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    def n_nodes(self, spec):
        if spec.representation == "source":
            if self.grid is None:
                raise InvalidInputError(f"{spec.family} on source data needs a grid layout")
            return self.grid.n_voxels
        if self.sensor_positions is None:
            raise InvalidInputError(f"{spec.family} on sensor data needs sensor positions")
        return len(self.sensor_positions)


def _se_params(c, red):
    r = max(1, c // red)
    return 2 * c * r + r + c


def count_params(spec: ModelSpec, hidden: int | None = None, geometry: Geometry | None = None) -> int:
    """Closed-form parameter count, embedding table included."""
    h = spec.hidden if hidden is None else hidden
    E = spec.embedding_dim
    emb = spec.n_subjects * E
    d = spec.input_dim
    if spec.family == "logistic":
        return d + 1
    if spec.family == "mlp":
        return (d + E) * h + h + (h + E) * h + h + (h + E) + 1 + emb
    c1, c2 = spec.channels
    if spec.family == "cnn_se":
        conv = 27 * 6 * c1 + c1 + _se_params(c1, spec.se_reduction) + 27 * c1 * c2 + c2 + _se_params(c2, spec.se_reduction)
        flat = spec.pool ** 3 * c2
    else:
        n = geometry.n_nodes(spec)
        fin = 6 if spec.representation == "source" else 4
        conv = fin * c1 + 3 * c1 + c1 * c2 + 3 * c2
        flat = n * c2
    return conv + (flat + E) * h + h + (h + E) + 1 + emb


def solve_width(spec: ModelSpec, target: int, geometry: Geometry | None = None, rtol: float = BUDGET_RTOL) -> int:
    """Hidden width whose parameter count is closest to ``target``; error if outside ``rtol``."""
    lo, hi = 1, 1
    while count_params(spec, hi, geometry) < target and hi < 1 << 24:
        hi *= 2
    while lo < hi:
        mid = (lo + hi) // 2
        if count_params(spec, mid, geometry) < target:
            lo = mid + 1
        else:
            hi = mid
    cands = [w for w in (lo - 1, lo) if w >= 1]
    best = min(cands, key=lambda w: abs(count_params(spec, w, geometry) - target))
    got = count_params(spec, best, geometry)
    if abs(got - target) > rtol * target:
        raise InvalidConfigError(
            f"{spec.family}: budget {target} unreachable within {rtol:.0%}; closest achievable count is {got}"
        )
    return best


class Model:
    """Base class: subclasses build layers in ``_build`` and implement ``_forward``/``_backward``."""

    def __init__(self, spec: ModelSpec, store: ParamStore, geometry: Geometry | None = None):
        self.spec, self.store, self.geometry = spec, store, geometry or Geometry()
        self.trace = None
        self._build()

    def _build(self):
        raise NotImplementedError

    @property
    def n_params(self) -> int:
        return self.store.size

    def _t(self, name, arr):
        if self.trace is not None:
            self.trace.append((name, arr))
        return arr

    def forward(self, x, subject_index=None, train=False, rng=None, check=False):
        x = np.asarray(x, dtype=self.store.dtype)
        if x.ndim != 2 or x.shape[1] != self.spec.input_dim:
            raise InvalidInputError(f"expected (batch, {self.spec.input_dim}) inputs, got {x.shape}")
        if subject_index is None:
            subject_index = np.zeros(len(x), dtype=np.int64)
        if train and self.spec.dropout > 0 and rng is None:
            raise InvalidInputError("training-mode forward with dropout needs an rng")
        self.trace = [] if check else None
        return self._forward(x, np.asarray(subject_index), train, rng)[:, 0]

    def backward(self, dlogits):
        self._backward(np.asarray(dlogits, self.store.dtype)[:, None])

    def predict_proba(self, x, subject_index=None, batch_size=512):
        out = [self.forward(x[i:i + batch_size], None if subject_index is None else subject_index[i:i + batch_size])
               for i in range(0, len(x), batch_size)]
        z = np.concatenate(out) if out else np.zeros(0)
        return 1.0 / (1.0 + np.exp(-z))


class _Head:
    """Two fully connected layers with the subject embedding concatenated before each."""

    def __init__(self, model, n_in, prefix="fc"):
        s, E = model.spec, model.spec.embedding_dim
        self.m = model
        self.d1 = Dropout(s.dropout)
        self.fc1 = Linear(model.store, f"{prefix}1", n_in + E, s.hidden)
        self.act = ReLU()
        self.d2 = Dropout(s.dropout)
        self.fc2 = Linear(model.store, f"{prefix}2", s.hidden + E, 1)
        self.n_in, self.E = n_in, E

    def forward(self, f, e, train, rng):
        t = self.m._t
        z = t("fc1", self.fc1.forward(np.concatenate([self.d1.forward(f, train, rng), e], axis=1)))
        h = t("fc1.relu", self.act.forward(z))
        return t("fc2", self.fc2.forward(np.concatenate([self.d2.forward(h, train, rng), e], axis=1)))

    def backward(self, dy):
        g = self.fc2.backward(dy)
        dh, de = g[:, :-self.E], g[:, -self.E:]
        g = self.fc1.backward(self.act.backward(self.d2.backward(dh)))
        df, de1 = g[:, :self.n_in], g[:, self.n_in:]
        return self.d1.backward(df), de + de1


class Logistic(Model):
    def _build(self):
        self.fc = Linear(self.store, "fc", self.spec.input_dim, 1)

    def _forward(self, x, subj, train, rng):
        return self._t("fc", self.fc.forward(x))

    def _backward(self, dy):
        self.fc.backward(dy)


class MLP(Model):
    """Three fully connected layers; the subject embedding is concatenated before each."""

    def _build(self):
        s, st, E = self.spec, self.store, self.spec.embedding_dim
        self.emb = Embedding(st, "embedding", s.n_subjects, E)
        self.d0 = Dropout(s.dropout)
        self.fc0 = Linear(st, "fc0", s.input_dim + E, s.hidden)
        self.act0 = ReLU()
        self.head = _Head(self, s.hidden)

    def _forward(self, x, subj, train, rng):
        e = self.emb.forward(subj, train)
        z = self._t("fc0", self.fc0.forward(np.concatenate([self.d0.forward(x, train, rng), e], axis=1)))
        h = self._t("fc0.relu", self.act0.forward(z))
        return self.head.forward(h, e, train, rng)

    def _backward(self, dy):
        dh, de = self.head.backward(dy)
        g = self.fc0.backward(self.act0.backward(dh))
        E = self.spec.embedding_dim
        self.emb.backward(de + g[:, -E:])


class SECNN(Model):
    """Two conv + squeeze-excite blocks on the dense voxel box, adaptive pooling, two FC layers.

    Inputs are flat vec features (batch, voxels*3); positions are added as
    three extra channels inside the network, so the network sees the same
    6-channel box as :func:`srcspace.data.inscribe_to_box` produces.
    """

    def _build(self):
        s, st = self.spec, self.store
        grid = self.geometry.grid
        if grid is None:
            raise InvalidInputError("cnn_se needs a grid layout")
        if s.input_dim != 3 * grid.n_voxels:
            raise InvalidInputError(f"input_dim {s.input_dim} != 3 x {grid.n_voxels} voxels")
        c1, c2 = s.channels
        dims = grid.dims
        box_cells = np.argwhere(np.ones(dims, bool))
        nbr_in = neighbour_table(dims, box_cells, grid.lattice_index)
        nbr_box = neighbour_table(dims, box_cells, box_cells)
        self.V = grid.n_voxels
        self.p = s.dropout
        self.conv1 = InputConv3d(st, "conv1", 3, 3, c1, nbr_in, grid.positions)
        self.act1 = ReLU()
        self.se1 = SqueezeExcite(st, "se1", c1, s.se_reduction)
        self.cd2 = ChannelDropout(s.dropout)
        self.conv2 = Conv3d(st, "conv2", c1, c2, nbr_box, nbr_box)
        self.act2 = ReLU()
        self.se2 = SqueezeExcite(st, "se2", c2, s.se_reduction)
        self.pool = AdaptiveAvgPool3d(dims, s.pool)
        self.emb = Embedding(st, "embedding", s.n_subjects, s.embedding_dim)
        self.head = _Head(self, s.pool ** 3 * c2)

    def conv_stage(self, x, train=False, rng=None):
        """Output of the second SE block, (batch, box cells, channels)."""
        B = len(x)
        xv = np.asarray(x, self.store.dtype).reshape(B, self.V, 3)
        scale = None
        if train and self.p > 0:
            keep = rng.random((B, 6)) >= self.p
            scale = keep.astype(xv.dtype) / (1 - self.p)
        t = self._t
        h = t("conv1", self.conv1.forward(xv, chan_scale=scale))
        h = t("se1", self.se1.forward(self.act1.forward(h)))
        h = t("conv2", self.conv2.forward(self.cd2.forward(h, train, rng)))
        return t("se2", self.se2.forward(self.act2.forward(h)))

    def _forward(self, x, subj, train, rng):
        e = self.emb.forward(subj, train)
        h = self.conv_stage(x, train, rng)
        f = self._t("pool", self.pool.forward(h)).reshape(len(x), -1)
        return self.head.forward(f, e, train, rng)

    def _backward(self, dy):
        df, de = self.head.backward(dy)
        self.emb.backward(de)
        c2 = self.spec.channels[1]
        g = self.pool.backward(df.reshape(len(df), -1, c2))
        g = self.act2.backward(self.se2.backward(g))
        g = self.cd2.backward(self.conv2.backward(g))
        self.conv1.backward(self.act1.backward(self.se1.backward(g)))


class GAT(Model):
    """Two graph-attention layers over voxels or sensors, then two FC layers on the flattened nodes."""

    def _build(self):
        s, st = self.spec, self.store
        geo = self.geometry
        if s.representation == "source":
            grid = geo.grid
            if grid is None:
                raise InvalidInputError("gat on source data needs a grid layout")
            graph = geo.extra.get("graph") or build_graph("voxel_knn6", grid.lattice_index)
            self.pos = grid.positions
            self.k = 3
        else:
            if geo.sensor_positions is None:
                raise InvalidInputError("gat on sensor data needs sensor positions")
            P = np.asarray(geo.sensor_positions, float)
            graph = geo.extra.get("graph") or build_graph("sensor_knn5", P)
            lo, hi = P.min(0), P.max(0)
            self.pos = 2 * (P - lo) / np.where(hi > lo, hi - lo, 1) - 1
            self.k = 1
        self.n = graph.n_nodes
        if s.input_dim != self.k * self.n:
            raise InvalidInputError(f"input_dim {s.input_dim} != {self.k} x {self.n} nodes")
        self.graph = graph
        src, dst = graph.with_self_loops()
        c1, c2 = s.channels
        fin = self.k + 3
        self.cd1 = ChannelDropout(s.dropout)
        self.g1 = GraphAttention(st, "gat1", fin, c1, src, dst, self.n)
        self.a1 = ReLU()
        self.cd2 = ChannelDropout(s.dropout)
        self.g2 = GraphAttention(st, "gat2", c1, c2, src, dst, self.n)
        self.a2 = ReLU()
        self.emb = Embedding(st, "embedding", s.n_subjects, s.embedding_dim)
        self.head = _Head(self, self.n * c2)

    def _forward(self, x, subj, train, rng):
        B = len(x)
        pos = np.broadcast_to(self.pos.astype(x.dtype), (B, self.n, 3))
        nodes = np.concatenate([x.reshape(B, self.n, self.k), pos], axis=2)
        e = self.emb.forward(subj, train)
        h = self._t("gat1", self.g1.forward(self.cd1.forward(nodes, train, rng)))
        h = self.a1.forward(h)
        h = self._t("gat2", self.g2.forward(self.cd2.forward(h, train, rng)))
        h = self.a2.forward(h)
        return self.head.forward(h.reshape(B, -1), e, train, rng)

    def _backward(self, dy):
        df, de = self.head.backward(dy)
        self.emb.backward(de)
        g = self.a2.backward(df.reshape(len(df), self.n, -1))
        g = self.cd2.backward(self.g2.backward(g))
        self.g1.backward(self.a1.backward(g))


_CLASSES = {"logistic": Logistic, "mlp": MLP, "cnn_se": SECNN, "gat": GAT}


def build_model(spec: ModelSpec, seed=0, geometry: Geometry | None = None, dtype=np.float64,
                grid=None, sensor_positions=None) -> Model:
    """Instantiate a model; the hidden width is solved from ``target_params`` when not given."""
    geometry = geometry or Geometry(grid=grid, sensor_positions=sensor_positions)
    if spec.family != "logistic" and spec.hidden is None:
        if spec.target_params is None:
            raise InvalidConfigError("give either hidden or target_params")
        spec.hidden = solve_width(spec, spec.target_params, geometry)
    store = ParamStore(dtype)
    model = _CLASSES[spec.family](spec, store, geometry)
    store.finalize(np.random.default_rng(seed))
    return model


# --------------------------------------------------------------------------- loss and optimiser

def bce_with_logits(z, y):
    """Mean binary cross-entropy of logits ``z`` against (possibly soft) labels ``y``; returns (loss, dz)."""
    z = np.asarray(z)
    y = np.asarray(y, dtype=z.dtype)
    loss = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    p = np.exp(-np.logaddexp(0.0, -z))
    return float(np.mean(loss)), (p - y) / len(z)


def _offending_layer(model, x, subj, train, rng_state):
    bad = [n for n in model.store.names() if not np.all(np.isfinite(model.store[n]))]
    if bad:
        return f"parameter {bad[0]}"
    rng = np.random.default_rng()
    if rng_state is not None:
        rng.bit_generator.state = rng_state
    try:
        with np.errstate(all="ignore"):
            model.forward(x, subj, train=train, rng=rng, check=True)
    except Exception:  # diagnostics only
        return "unknown"
    for name, arr in model.trace or []:
        if not np.all(np.isfinite(arr)):
            return name
    return "loss"


def loss_and_grad(model: Model, x, y, subject_index=None, train=True, rng=None):
    """Mean BCE and gradients accumulated into ``model.store.grad`` (zeroed first)."""
    y = np.asarray(y)
    state = rng.bit_generator.state if rng is not None else None
    model.store.zero_grad()
    with np.errstate(over="ignore", invalid="ignore"):
        z = model.forward(x, subject_index, train=train, rng=rng)
        loss, dz = bce_with_logits(z, y)
    if not np.isfinite(loss):
        layer = _offending_layer(model, x, subject_index, train, state)
        raise NonFiniteLossError(f"non-finite loss ({loss}); first non-finite output at {layer}", layer=layer)
    model.backward(dz)
    return loss, model.store.grad


def adamw_step(store: ParamStore, lr: float, weight_decay: float = 0.0, betas=(0.9, 0.999), eps: float = 1e-8):
    """Decoupled weight decay followed by a bias-corrected Adam update, in place."""
    b1, b2 = betas
    store.step += 1
    t = store.step
    g = store.grad
    if weight_decay:
        store.data *= 1.0 - lr * weight_decay
    store.m *= b1
    store.m += (1 - b1) * g
    store.v *= b2
    store.v += (1 - b2) * g * g
    mhat = store.m / (1 - b1 ** t)
    vhat = store.v / (1 - b2 ** t)
    store.data -= lr * mhat / (np.sqrt(vhat) + eps)
    return store
