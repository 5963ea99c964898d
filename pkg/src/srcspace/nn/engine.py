"""Flat parameter storage and hand-written forward/backward layers.

Every layer caches what its backward pass needs on ``self`` during
``forward`` and accumulates parameter gradients into the shared
:class:`ParamStore`. Activations are channels-last: (batch, nodes, channels)
for spatial layers and (batch, features) for dense ones.
"""
from __future__ import annotations

import numpy as np
from scipy import sparse

from ..errors import InvalidInputError


class ParamStore:
    """One flat vector for all parameters plus matching gradient and AdamW moment buffers."""

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self._specs = []  # (name, shape, init)
        self.slices = {}
        self.data = np.zeros(0, self.dtype)
        self.grad = np.zeros(0, self.dtype)
        self.m = np.zeros(0, self.dtype)
        self.v = np.zeros(0, self.dtype)
        self.step = 0

    def declare(self, name, shape, init):
        if name in self.slices or any(s[0] == name for s in self._specs):
            raise ValueError(f"duplicate parameter {name}")
        self._specs.append((name, tuple(int(d) for d in shape), init))
        return name

    def finalize(self, rng):
        """Allocate buffers and run each parameter's initializer in declaration order."""
        total = sum(int(np.prod(s)) for _, s, _ in self._specs)
        self.data = np.zeros(total, self.dtype)
        self.grad = np.zeros(total, self.dtype)
        self.m = np.zeros(total, self.dtype)
        self.v = np.zeros(total, self.dtype)
        off = 0
        for name, shape, init in self._specs:
            n = int(np.prod(shape))
            self.slices[name] = (off, off + n, shape)
            self[name][...] = init(rng, shape)
            off += n
        return self

    def __getitem__(self, name):
        a, b, shape = self.slices[name]
        return self.data[a:b].reshape(shape)

    def g(self, name):
        a, b, shape = self.slices[name]
        return self.grad[a:b].reshape(shape)

    def names(self):
        return list(self.slices)

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self):
        self.grad[...] = 0.0

    def state(self) -> dict:
        return {"data": self.data.copy(), "m": self.m.copy(), "v": self.v.copy(),
                "step": np.array([self.step], dtype=np.int64)}

    def load_state(self, state):
        self.data[...] = state["data"]
        if "m" in state:
            self.m[...] = state["m"]
            self.v[...] = state["v"]
            self.step = int(np.asarray(state["step"]).ravel()[0])


def fan_in_uniform(fan_in):
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return lambda rng, shape: rng.uniform(-bound, bound, size=shape)


def zeros_init(rng, shape):
    return np.zeros(shape)


def normal_init(std=1.0):
    return lambda rng, shape: std * rng.standard_normal(shape)


def const_init(value):
    return lambda rng, shape: np.full(shape, float(value))


class Layer:
    name = "layer"

    def forward(self, x, train=False, rng=None):
        raise NotImplementedError

    def backward(self, dy):
        raise NotImplementedError


class Linear(Layer):
    def __init__(self, store, name, n_in, n_out):
        self.store, self.name = store, name
        self.n_in, self.n_out = n_in, n_out
        self.w = store.declare(f"{name}.weight", (n_in, n_out), fan_in_uniform(n_in))
        self.b = store.declare(f"{name}.bias", (n_out,), fan_in_uniform(n_in))

    def forward(self, x, train=False, rng=None):
        self.x = x
        return x @ self.store[self.w] + self.store[self.b]

    def backward(self, dy):
        x2 = self.x.reshape(-1, self.n_in)
        d2 = dy.reshape(-1, self.n_out)
        self.store.g(self.w)[...] += x2.T @ d2
        self.store.g(self.b)[...] += d2.sum(0)
        return dy @ self.store[self.w].T


class ReLU(Layer):
    name = "relu"

    def forward(self, x, train=False, rng=None):
        self.mask = x > 0
        return np.maximum(x, 0.0).astype(x.dtype, copy=False)  # NaN propagates

    def backward(self, dy):
        return dy * self.mask


class Dropout(Layer):
    """Inverted dropout on individual features; identity in eval mode."""

    name = "dropout"

    def __init__(self, p):
        self.p = float(p)

    def forward(self, x, train=False, rng=None):
        if not train or self.p == 0.0:
            self.mask = None
            return x
        keep = rng.random(x.shape) >= self.p
        self.mask = keep.astype(x.dtype) / (1.0 - self.p)
        return x * self.mask

    def backward(self, dy):
        return dy if self.mask is None else dy * self.mask


class ChannelDropout(Dropout):
    """Inverted dropout of whole channels of (batch, nodes, channels) activations."""

    name = "channel_dropout"

    def forward(self, x, train=False, rng=None):
        if not train or self.p == 0.0:
            self.mask = None
            return x
        keep = rng.random((x.shape[0], 1, x.shape[2])) >= self.p
        self.mask = keep.astype(x.dtype) / (1.0 - self.p)
        return x * self.mask


class Embedding(Layer):
    """Subject lookup table; index -1 maps to the mean of all rows (eval only)."""

    def __init__(self, store, name, n_subjects, dim=16):
        self.store, self.name = store, name
        self.n, self.dim = n_subjects, dim
        self.t = store.declare(f"{name}.table", (n_subjects, dim), normal_init(1.0))

    def forward(self, idx, train=False, rng=None):
        idx = np.asarray(idx)
        if idx.size and (idx.max() >= self.n or idx.min() < -1):
            raise InvalidInputError(f"subject index out of range for {self.n} subjects")
        unknown = idx < 0
        if train and unknown.any():
            raise InvalidInputError("unknown subject in training mode; the mean embedding is for evaluation only")
        table = self.store[self.t]
        out = table[np.where(unknown, 0, idx)]
        if unknown.any():
            out[unknown] = table.mean(0)
        self.idx, self.unknown = idx, unknown
        return out

    def backward(self, dy):
        g = self.store.g(self.t)
        known = ~self.unknown
        np.add.at(g, self.idx[known], dy[known])
        if self.unknown.any():
            g += dy[self.unknown].sum(0) / self.n
        return None


def conv_offsets():
    return np.array([[i, j, k] for i in (-1, 0, 1) for j in (-1, 0, 1) for k in (-1, 0, 1)])


def neighbour_table(dims, cells=None, targets=None):
    """(len(cells), 27) indices of the 3x3x3 neighbourhood of each cell.

    ``cells`` are the lattice cells where outputs are computed (default: the
    whole box). Neighbours are looked up in ``targets`` (lattice index array;
    default: the whole box) and missing ones point at ``len(targets)``, the
    zero padding row.
    """
    dims = np.asarray(dims)
    if cells is None:
        cells = np.argwhere(np.ones(tuple(dims), bool))
    lookup = np.full(tuple(dims), -1, dtype=np.int64)
    if targets is None:
        targets = np.argwhere(np.ones(tuple(dims), bool))
    lookup[tuple(targets.T)] = np.arange(len(targets))
    nb = cells[:, None, :] + conv_offsets()[None]
    ok = np.all((nb >= 0) & (nb < dims), axis=-1)
    out = np.full(ok.shape, len(targets), dtype=np.int64)
    c = nb[ok]
    hit = lookup[c[:, 0], c[:, 1], c[:, 2]]
    out[ok] = np.where(hit >= 0, hit, len(targets))
    return out


def _pad_rows(x):
    """Append a zero node row: (B, N, C) -> (B, N+1, C)."""
    return np.concatenate([x, np.zeros((x.shape[0], 1, x.shape[2]), x.dtype)], axis=1)


class Conv3d(Layer):
    """3x3x3 convolution, stride 1, zero padding, over nodes laid out on a lattice.

    Outputs live on the ``n_out`` nodes of ``nbr``; inputs on ``n_in`` nodes.
    ``flip_nbr`` (n_in, 27) is the transposed table used to send gradients
    back to the inputs; pass ``None`` for a first layer that needs no input gradient.
    """

    def __init__(self, store, name, c_in, c_out, nbr, flip_nbr=None):
        self.store, self.name = store, name
        self.c_in, self.c_out = c_in, c_out
        self.nbr, self.flip = nbr, flip_nbr
        self.w = store.declare(f"{name}.weight", (27 * c_in, c_out), fan_in_uniform(27 * c_in))
        self.b = store.declare(f"{name}.bias", (c_out,), fan_in_uniform(27 * c_in))

    def forward(self, x, train=False, rng=None):
        B = x.shape[0]
        cols = np.take(_pad_rows(x), self.nbr, axis=1).reshape(B, self.nbr.shape[0], 27 * self.c_in)
        self.cols = cols
        return cols @ self.store[self.w] + self.store[self.b]

    def backward(self, dy):
        B, N, _ = dy.shape
        d2 = dy.reshape(-1, self.c_out)
        self.store.g(self.w)[...] += self.cols.reshape(-1, 27 * self.c_in).T @ d2
        self.store.g(self.b)[...] += d2.sum(0)
        self.cols = None
        if self.flip is None:
            return None
        # input grad = correlation of dy with the spatially flipped kernel
        W = self.store[self.w].reshape(27, self.c_in, self.c_out)
        Wf = W[::-1].transpose(0, 2, 1).reshape(27 * self.c_out, self.c_in)
        dcols = np.take(_pad_rows(dy), self.flip, axis=1).reshape(B, self.flip.shape[0], 27 * self.c_out)
        return dcols @ Wf


class InputConv3d(Layer):
    """First convolution over sparse inside-voxel inputs plus fixed positional channels.

    Data channels are nonzero only at the ``V`` inside voxels, so the gather
    reads from a (B, V+1, c_data) array. Positional channels are the same for
    every sample, so their contribution is one (N, c_out) map per channel,
    scaled by the per-sample channel-dropout mask when given.
    """

    def __init__(self, store, name, c_data, c_pos, c_out, nbr, pos):
        self.store, self.name = store, name
        self.c_data, self.c_pos, self.c_out = c_data, c_pos, c_out
        self.c_in = c_data + c_pos
        self.nbr = nbr  # (N, 27) into inside voxels, V = padding
        self.pos_cols = np.take(np.vstack([pos, np.zeros((1, c_pos))]), nbr, axis=0)  # (N, 27, c_pos)
        fan = 27 * self.c_in
        self.w = store.declare(f"{name}.weight", (27 * self.c_in, c_out), fan_in_uniform(fan))
        self.b = store.declare(f"{name}.bias", (c_out,), fan_in_uniform(fan))

    def _split(self, W):
        W = W.reshape(27, self.c_in, self.c_out)
        return W[:, :self.c_data].reshape(27 * self.c_data, self.c_out), W[:, self.c_data:]

    def forward(self, x, train=False, rng=None, chan_scale=None):
        """``x`` is (B, V, c_data); ``chan_scale`` optional (B, c_in) channel multipliers."""
        B = x.shape[0]
        Wd, Wp = self._split(self.store[self.w])
        self.chan_scale = chan_scale
        if chan_scale is not None:
            x = x * chan_scale[:, None, :self.c_data]
        cols = np.take(_pad_rows(x), self.nbr, axis=1).reshape(B, self.nbr.shape[0], 27 * self.c_data)
        self.cols = cols
        pos_cols = self.pos_cols.astype(x.dtype)
        pos_maps = np.stack([pos_cols[:, :, c] @ Wp[:, c, :] for c in range(self.c_pos)])  # (c_pos, N, c_out)
        self.pos_maps = pos_maps
        if chan_scale is None:
            pos = pos_maps.sum(0)[None]
        else:
            pos = (chan_scale[:, self.c_data:] @ pos_maps.reshape(self.c_pos, -1)).reshape(B, -1, self.c_out)
        return cols @ Wd + pos + self.store[self.b]

    def backward(self, dy):
        d2 = dy.reshape(-1, self.c_out)
        gW = self.store.g(self.w).reshape(27, self.c_in, self.c_out)
        gd = self.cols.reshape(-1, 27 * self.c_data).T @ d2
        gW[:, :self.c_data] += gd.reshape(27, self.c_data, self.c_out)
        if self.chan_scale is None:
            dpos = np.broadcast_to(dy.sum(0), (self.c_pos,) + dy.shape[1:])
        else:
            B = dy.shape[0]
            dpos = (self.chan_scale[:, self.c_data:].T @ dy.reshape(B, -1)).reshape((self.c_pos,) + dy.shape[1:])
        for c in range(self.c_pos):
            gW[:, self.c_data + c] += self.pos_cols[:, :, c].T @ dpos[c]
        self.store.g(self.b)[...] += d2.sum(0)
        self.cols = None
        return None


class SqueezeExcite(Layer):
    """Channel gating: mean over nodes -> FC -> ReLU -> FC -> sigmoid -> scale."""

    def __init__(self, store, name, channels, reduction=16):
        self.store, self.name = store, name
        self.c = channels
        self.h = max(1, channels // reduction)
        self.fc1 = Linear(store, f"{name}.fc1", channels, self.h)
        self.fc2 = Linear(store, f"{name}.fc2", self.h, channels)
        self.act = ReLU()

    def forward(self, x, train=False, rng=None):
        self.x = x
        s = x.mean(axis=1)
        z = self.fc2.forward(self.act.forward(self.fc1.forward(s)))
        g = 1.0 / (1.0 + np.exp(-z))
        self.gate = g
        return x * g[:, None, :]

    def backward(self, dy):
        g = self.gate
        dx = dy * g[:, None, :]
        dg = np.sum(dy * self.x, axis=1)
        dz = dg * g * (1 - g)
        ds = self.fc1.backward(self.act.backward(self.fc2.backward(dz)))
        dx += ds[:, None, :] / self.x.shape[1]
        self.x = None
        return dx


def adaptive_pool_matrix(dims, out):
    """(out^3, prod(dims)) averaging matrix with adaptive bin edges floor(i*n/P), ceil((i+1)*n/P)."""
    axes = []
    for n in dims:
        m = np.zeros((out, n))
        for i in range(out):
            a, b = (i * n) // out, -(-((i + 1) * n) // out)
            m[i, a:b] = 1.0 / (b - a)
        axes.append(m)
    return np.einsum("ax,by,cz->abcxyz", *axes).reshape(out ** 3, int(np.prod(dims)))


class AdaptiveAvgPool3d(Layer):
    name = "pool"

    def __init__(self, dims, out):
        self.P = adaptive_pool_matrix(dims, out)

    def forward(self, x, train=False, rng=None):
        return np.matmul(self.P.astype(x.dtype), x)

    def backward(self, dy):
        return np.matmul(self.P.T.astype(dy.dtype), dy)


class GraphAttention(Layer):
    """Single-head additive graph attention with self-loops.

    For an edge j -> i the score is LeakyReLU(a_dst . h_i + a_src . h_j) with
    h = x W; scores are softmax-normalised over each node's incoming edges.
    """

    def __init__(self, store, name, n_in, n_out, src, dst, n_nodes, slope=0.2):
        self.store, self.name = store, name
        self.n_in, self.n_out = n_in, n_out
        order = np.lexsort((src, dst))
        self.src, self.dst = np.asarray(src)[order], np.asarray(dst)[order]
        if not np.array_equal(np.unique(self.dst), np.arange(n_nodes)):
            raise InvalidInputError("every node needs at least one incoming edge (self-loops)")
        self.starts = np.flatnonzero(np.r_[True, self.dst[1:] != self.dst[:-1]])
        E = len(self.src)
        self.S_src = sparse.csr_matrix((np.ones(E), (self.src, np.arange(E))), shape=(n_nodes, E))
        self.n_nodes, self.slope = n_nodes, slope
        self.w = store.declare(f"{name}.weight", (n_in, n_out), fan_in_uniform(n_in))
        self.a_src = store.declare(f"{name}.att_src", (n_out,), fan_in_uniform(n_out))
        self.a_dst = store.declare(f"{name}.att_dst", (n_out,), fan_in_uniform(n_out))
        self.b = store.declare(f"{name}.bias", (n_out,), zeros_init)

    def _seg_sum(self, e):
        return np.add.reduceat(e, self.starts, axis=1)

    def _scatter_src(self, e):
        # (B, E, ...) summed by source node -> (B, V, ...)
        B = e.shape[0]
        tail = e.shape[2:]
        flat = np.moveaxis(e, 1, 0).reshape(e.shape[1], -1)
        out = self.S_src @ flat
        return np.moveaxis(out.reshape((self.n_nodes, B) + tail), 0, 1)

    def forward(self, x, train=False, rng=None):
        self.x = x
        h = x @ self.store[self.w]
        s_src = h @ self.store[self.a_src]
        s_dst = h @ self.store[self.a_dst]
        raw = s_dst[:, self.dst] + s_src[:, self.src]
        e = np.where(raw > 0, raw, self.slope * raw)
        e = e - np.maximum.reduceat(e, self.starts, axis=1)[:, self.dst]
        p = np.exp(e)
        alpha = p / self._seg_sum(p)[:, self.dst]
        hs = h[:, self.src]
        out = np.add.reduceat(alpha[..., None] * hs, self.starts, axis=1)
        self.h, self.raw, self.alpha, self.hs = h, raw, alpha, hs
        return out + self.store[self.b]

    def backward(self, dy):
        alpha, h, hs = self.alpha, self.h, self.hs
        self.store.g(self.b)[...] += dy.sum(axis=(0, 1))
        dy_e = dy[:, self.dst]  # (B, E, F)
        dalpha = np.sum(dy_e * hs, axis=-1)
        dh = self._scatter_src(alpha[..., None] * dy_e)
        de = alpha * (dalpha - self._seg_sum(alpha * dalpha)[:, self.dst])
        draw = de * np.where(self.raw > 0, 1.0, self.slope)
        ds_dst = self._seg_sum(draw)
        ds_src = self._scatter_src(draw)
        a_src, a_dst = self.store[self.a_src], self.store[self.a_dst]
        self.store.g(self.a_src)[...] += np.einsum("bv,bvf->f", ds_src, h)
        self.store.g(self.a_dst)[...] += np.einsum("bv,bvf->f", ds_dst, h)
        dh = dh + ds_src[..., None] * a_src + ds_dst[..., None] * a_dst
        x = self.x
        self.store.g(self.w)[...] += x.reshape(-1, self.n_in).T @ dh.reshape(-1, self.n_out)
        self.hs = None
        return dh @ self.store[self.w].T
