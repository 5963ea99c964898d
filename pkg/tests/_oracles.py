"""Shared helpers: tiny model builders and a central-difference gradient check."""
import numpy as np

from srcspace import data as D
from srcspace.nn import ModelSpec, build_model, loss_and_grad


def small_grid(shape=(3, 3, 3), drop_corner=True):
    mask = np.ones(shape, bool)
    if drop_corner:
        mask[0, 0, 0] = False
    idx = np.argwhere(mask)
    lo, hi = idx.min(0), idx.max(0)
    pos = 2.0 * (idx - lo) / np.where(hi > lo, hi - lo, 1) - 1.0
    return D.GridLayout(tuple(shape), idx, mask, pos, "small")


def tiny_model(family, seed=0, dropout=0.0, representation="source", n_subjects=3):
    grid = small_grid((4, 4, 4) if family == "logistic" else (3, 3, 3))
    sensors = np.random.default_rng(1).normal(size=(9, 3))
    if representation == "sensor":
        dim = len(sensors)
    else:
        dim = 3 * grid.n_voxels
    spec = ModelSpec(family, dim, n_subjects=n_subjects, hidden=5, dropout=dropout, embedding_dim=4,
                     channels=(3, 4), pool=2, se_reduction=2, representation=representation)
    return build_model(spec, seed=seed, grid=grid, sensor_positions=sensors)


def gradcheck(model, n_check=120, batch=4, train=False, seed=0, eps=1e-5):
    """Max relative error between backprop and central differences over sampled parameters.

    Gradients below ~1e-6 sit at the finite-difference noise floor, so the
    denominator is floored there.
    """
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(batch, model.spec.input_dim))
    y = rng.integers(0, 2, batch).astype(float)
    subj = rng.integers(0, model.spec.n_subjects, batch)
    state = np.random.default_rng(seed + 1).bit_generator.state

    def run():
        r = np.random.default_rng()
        r.bit_generator.state = state
        return loss_and_grad(model, x, y, subj, train=train, rng=r)

    _, g = run()
    g = g.copy()
    idx = rng.choice(model.store.size, size=min(n_check, model.store.size), replace=False)
    worst = 0.0
    for i in idx:
        old = model.store.data[i]
        model.store.data[i] = old + eps
        lp, _ = run()
        model.store.data[i] = old - eps
        lm, _ = run()
        model.store.data[i] = old
        num = (lp - lm) / (2 * eps)
        err = abs(num - g[i]) / max(abs(num) + abs(g[i]), 1e-6)
        worst = max(worst, err)
    return worst, len(idx)
