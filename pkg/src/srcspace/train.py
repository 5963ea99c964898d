"""Training loop with early stopping, random hyperparameter search and evaluation statistics."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import data as D
from .errors import InvalidConfigError, UndefinedMetricError
from .nn import Geometry, ModelSpec, adamw_step, build_model, loss_and_grad


AUGMENTATIONS = ("none", "mixup", "slice_dropout", "cube_mask")


@dataclass
class HParams:
    lr: float = 1e-3
    batch_size: int = 64
    weight_decay: float = 1e-2
    dropout: float = 0.1
    max_epochs: int = 100
    patience: int = 10
    # accuracy fraction; 1e-4 is 0.01 %
    min_delta: float = 1e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    augment: str = "none"
    augment_param: float = 0.0
    eval_batch: int = 512

    def __post_init__(self):
        if self.augment not in AUGMENTATIONS:
            raise InvalidConfigError(f"unknown augmentation {self.augment!r}; valid: {AUGMENTATIONS}")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise InvalidConfigError("batch_size, max_epochs and patience must be positive")
        if self.lr <= 0:
            raise InvalidConfigError("lr must be positive")
        self.betas = tuple(self.betas)

    def to_dict(self):
        return asdict(self)


# --------------------------------------------------------------------------- metrics

def balanced_accuracy(predictions, labels) -> float:
    """Mean of the per-class recalls of binary predictions."""
    p = np.asarray(predictions).astype(int).ravel()
    y = np.asarray(labels).astype(int).ravel()
    if p.shape != y.shape:
        raise ValueError("predictions and labels differ in length")
    pos, neg = y == 1, y == 0
    if not pos.any() or not neg.any():
        raise UndefinedMetricError("balanced accuracy needs both classes in the labels")
    return 0.5 * (np.mean(p[pos] == 1) + np.mean(p[neg] == 0))


def probability_of_improvement(a, b) -> float:
    """Fraction of pairs (x in a, y in b) with x > y, ties counting one half."""
    a = np.sort(np.asarray(a, float).ravel())
    b = np.sort(np.asarray(b, float).ravel())
    if a.size == 0 or b.size == 0:
        raise ValueError("both samples must be non-empty")
    # integer counts keep P(a,b) + P(b,a) == 1 exact
    below = np.searchsorted(b, a, side="left").sum()
    tied = (np.searchsorted(b, a, side="right") - np.searchsorted(b, a, side="left")).sum()
    return float((2 * int(below) + int(tied)) / (2 * a.size * b.size))


@dataclass(frozen=True)
class RunStats:
    mean: float
    std: float | None
    n: int

    def format(self, scale: float = 1.0, digits: int = 1) -> str:
        m = f"{self.mean * scale:.{digits}f}"
        if self.std is None:
            return m
        return f"{m} ± {self.std * scale:.{digits}f}"


def report_stats(runs, min_runs: int = 3) -> RunStats:
    """Mean and sample (n-1) standard deviation; the std is withheld below ``min_runs`` runs."""
    r = np.asarray(runs, float).ravel()
    if r.size == 0:
        raise ValueError("no runs to summarise")
    std = float(np.std(r, ddof=1)) if r.size >= min_runs else None
    return RunStats(float(np.mean(r)), std, int(r.size))


# --------------------------------------------------------------------------- training

@dataclass
class TrainResult:
    model: object
    history: list
    best_epoch: int
    best_val: float
    stopped_epoch: int
    hparams: HParams
    seed: int


def predict(model, sset: D.SampleSet, transform=None, batch: int = 512) -> np.ndarray:
    """Binary predictions (logit > 0); ``transform`` maps a feature batch before the forward pass."""
    out = []
    for i in range(0, len(sset), batch):
        x = sset.features[i:i + batch]
        if transform is not None:
            x = transform(x)
        out.append(model.forward(x, sset.subject_index[i:i + batch]) > 0)
    return np.concatenate(out) if out else np.zeros(0, bool)


def evaluate(model, sset: D.SampleSet, transform=None, batch: int = 512) -> float:
    return balanced_accuracy(predict(model, sset, transform, batch), sset.labels)


def _augment(x, y, hp: HParams, grid, rng):
    if hp.augment == "none" or (hp.augment != "mixup" and hp.augment_param == 0):
        # p=0 masking draws nothing, so the run matches the baseline exactly
        return x, y
    if hp.augment == "mixup":
        x2, y2, _, _ = D.mixup(x, y, hp.augment_param, rng)
        return x2, y2
    if grid is None:
        raise InvalidConfigError(f"{hp.augment} needs source-space samples on a grid")
    if hp.augment == "slice_dropout":
        return D.slice_dropout(x, hp.augment_param, rng, grid=grid), y
    return D.cube_mask(x, hp.augment_param, rng, grid=grid), y


def train_model(spec: ModelSpec, train_set: D.SampleSet, val_set: D.SampleSet, hparams: HParams,
                seed: int = 0, geometry: Geometry | None = None, dtype=np.float32, on_epoch=None) -> TrainResult:
    """Mini-batch AdamW with early stopping on validation balanced accuracy.

    Stops once ``patience`` epochs pass without an improvement larger than
    ``min_delta`` (or at ``max_epochs``) and restores the best checkpoint.
    """
    hp = hparams
    spec = replace(spec, dropout=hp.dropout)
    geometry = geometry or Geometry(grid=train_set.grid)
    model = build_model(spec, seed=seed, geometry=geometry, dtype=dtype)
    rng = np.random.default_rng([seed, 0x7EA1])
    n = len(train_set)
    X, Y, S = train_set.features, train_set.labels.astype(dtype), train_set.subject_index
    grid = train_set.grid
    history, best_val, best_epoch, best_state, wait = [], -np.inf, 0, model.store.state(), 0
    epoch = 0
    for epoch in range(1, hp.max_epochs + 1):
        order = rng.permutation(n)
        losses = []
        for i in range(0, n, hp.batch_size):
            idx = np.sort(order[i:i + hp.batch_size])
            xb, yb = _augment(X[idx], Y[idx], hp, grid, rng)
            loss, _ = loss_and_grad(model, xb, yb, S[idx], train=True, rng=rng)
            adamw_step(model.store, hp.lr, hp.weight_decay, hp.betas, hp.eps)
            losses.append(loss * len(idx))
        val = evaluate(model, val_set, batch=hp.eval_batch)
        rec = {"epoch": epoch, "train_loss": float(np.sum(losses) / max(n, 1)), "val_bacc": float(val)}
        history.append(rec)
        if on_epoch:
            on_epoch(rec)
        if val > best_val + hp.min_delta:
            best_val, best_epoch, best_state, wait = val, epoch, model.store.state(), 0
        else:
            wait += 1
            if wait >= hp.patience:
                break
    model.store.load_state(best_state)
    return TrainResult(model, history, best_epoch, float(best_val), epoch, hp, seed)


# --------------------------------------------------------------------------- random search

@dataclass
class SearchSpace:
    dropout: tuple = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6)
    log10_lr: tuple = (-7.0, -3.0)
    batch_size: tuple = (16, 32, 64, 128, 256, 512, 1024)
    log10_weight_decay: tuple = (-5.0, -0.5)
    max_epochs: int = 100
    patience: int = 10
    min_delta: float = 1e-4

    def sample(self, rng) -> HParams:
        return HParams(
            dropout=float(rng.choice(self.dropout)),
            lr=float(10 ** rng.uniform(*self.log10_lr)),
            batch_size=int(rng.choice(self.batch_size)),
            weight_decay=float(10 ** rng.uniform(*self.log10_weight_decay)),
            max_epochs=self.max_epochs,
            patience=self.patience,
            min_delta=self.min_delta,
        )


def random_search(space: SearchSpace, n_trials: int, seed: int, objective, budget: int | None = None):
    """Draw ``n_trials`` hyperparameter sets and score each with ``objective(hparams, trial)``.

    ``budget`` caps the epochs of every trial. Returns (best hparams, trial rows),
    the best being the highest validation score (first one on ties).
    """
    rng = np.random.default_rng([seed, 0x5EA])
    trials, best, best_score = [], None, -math.inf
    for t in range(n_trials):
        hp = space.sample(rng)
        if budget is not None:
            hp.max_epochs = min(hp.max_epochs, int(budget))
        score = float(objective(hp, t))
        row = {"trial": t, **{k: v for k, v in hp.to_dict().items() if k in
                               ("lr", "batch_size", "weight_decay", "dropout", "max_epochs")}, "val_bacc": score}
        trials.append(row)
        if score > best_score:
            best, best_score = hp, score
    return best, trials
