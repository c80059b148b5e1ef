"""Optimisation loop: hybrid loss, AdamW, clipping, plateau schedule, splits."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, EmptyBatch, LambdaOutOfRange, NonFinite, TooSmall
from .model import DepthRegressor, ModelConfig

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SchedulerConfig:
    factor: float = 0.5
    patience: int = 5
    min_improve: float = 1e-6


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 0.5
    lr: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 8
    epochs: int = 100
    clip_max_norm: float = 1.0
    scheduler: SchedulerConfig = field(default_factory=SchedulerConfig)
    split: tuple = (0.70, 0.15, 0.15)
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise LambdaOutOfRange(f"lam must lie in [0, 1], got {self.lam!r}")
        for name in ("lr", "batch_size", "clip_max_norm"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)!r}")
        if self.epochs < 0 or self.weight_decay < 0:
            raise ConfigError("epochs and weight_decay must be non-negative")
        if abs(sum(self.split) - 1.0) > 1e-9 or any(r <= 0 for r in self.split):
            raise ConfigError(f"split ratios must be positive and sum to 1, got {self.split!r}")
        if isinstance(self.scheduler, dict):
            object.__setattr__(self, "scheduler", SchedulerConfig(**self.scheduler))
        object.__setattr__(self, "split", tuple(self.split))

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d or {})
        known = set(cls.__dataclass_fields__)
        bad = set(d) - known
        if bad:
            raise ConfigError(f"unknown training field(s): {sorted(bad)}")
        return cls(**d)


# -- loss --------------------------------------------------------------------

def hybrid_loss(pred, target, lam=0.5) -> float:
    """``lam * MSE + (1 - lam) * MAE``."""
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.size == 0 or pred.shape != target.shape:
        raise EmptyBatch(f"need equal non-empty inputs, got {pred.shape} and {target.shape}")
    if not 0.0 <= lam <= 1.0:
        raise LambdaOutOfRange(f"lam must lie in [0, 1], got {lam!r}")
    r = pred - target
    return float(lam * np.mean(r * r) + (1.0 - lam) * np.mean(np.abs(r)))


# -- gradient clipping -------------------------------------------------------

def global_norm(grads) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g))) for g in grads.values()))


def clip_gradients(grads, max_norm=1.0):
    """Rescale so the global L2 norm is at most ``max_norm``."""
    norm = global_norm(grads)
    if not math.isfinite(norm):
        raise NonFinite("non-finite gradient norm")
    if norm <= max_norm:
        return dict(grads)
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}


# -- AdamW -------------------------------------------------------------------

@dataclass
class OptimizerState:
    m: dict
    v: dict
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params, **kw):
        return cls(
            {k: np.zeros_like(p, dtype=float) for k, p in params.items()},
            {k: np.zeros_like(p, dtype=float) for k, p in params.items()},
            **kw,
        )


def adamw_step(params, grads, state: OptimizerState, lr=1e-3, wd=1e-4):
    """One AdamW update with decoupled weight decay.  Pure: returns new
    ``(params, state)`` and leaves the inputs untouched."""
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape or state.m[k].shape != p.shape:
            raise ValueError(f"shape mismatch for {k}: {p.shape} vs {g.shape}")
        m = b1 * state.m[k] + (1.0 - b1) * g
        v = b2 * state.v[k] + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        upd = p - lr * (m_hat / (np.sqrt(v_hat) + state.eps) + wd * p)
        if not np.all(np.isfinite(upd)):
            raise NonFinite(f"non-finite parameter after AdamW step: {k}", {"parameter": k})
        new_p[k], new_m[k], new_v[k] = upd, m, v
    return new_p, OptimizerState(new_m, new_v, t, b1, b2, state.eps)


# -- plateau scheduler -------------------------------------------------------

@dataclass(frozen=True)
class SchedulerState:
    lr: float
    best: float = math.inf
    bad_epochs: int = 0


def scheduler_step(state: SchedulerState, val_loss: float, cfg: SchedulerConfig = SchedulerConfig()):
    """Halve (by ``cfg.factor``) after ``patience`` epochs without the
    validation loss dropping below ``best - min_improve``."""
    if not math.isfinite(val_loss):
        raise NonFinite("validation loss is not finite")
    if val_loss < state.best - cfg.min_improve:
        return SchedulerState(state.lr, val_loss, 0)
    bad = state.bad_epochs + 1
    if bad >= cfg.patience:
        return SchedulerState(state.lr * cfg.factor, state.best, 0)
    return SchedulerState(state.lr, state.best, bad)


# -- splitting ---------------------------------------------------------------

def split_sizes(n, ratios=(0.70, 0.15, 0.15)):
    n_train = int(math.floor(ratios[0] * n + 1e-9))
    n_val = int(math.floor(ratios[1] * n + 1e-9))
    return n_train, n_val, n - n_train - n_val


def split_dataset(labels, ratios=(0.70, 0.15, 0.15), seed=0):
    """Stratified deterministic split returning index arrays ``(train, val, test)``.

    Overall sizes are ``floor(0.70 n)``, ``floor(0.15 n)`` and the rest.
    Each split first receives its floor share of every class; the leftover
    quota is then filled from a seeded shuffle of the remaining samples.
    """
    labels = np.asarray(labels)
    n = len(labels)
    if n == 0:
        raise TooSmall("cannot split an empty dataset")
    sizes = split_sizes(n, ratios)
    if min(sizes) < 1:
        raise TooSmall(f"split sizes {sizes} leave an empty partition for n={n}")
    rng = np.random.default_rng(seed)
    classes = np.unique(labels)
    parts = [[], [], []]
    leftovers = []
    for c in classes:
        idx = rng.permutation(np.flatnonzero(labels == c))
        k_tr = int(math.floor(ratios[0] * len(idx) + 1e-9))
        k_va = int(math.floor(ratios[1] * len(idx) + 1e-9))
        k_te = int(math.floor(ratios[2] * len(idx) + 1e-9))
        parts[0].extend(idx[:k_tr])
        parts[1].extend(idx[k_tr:k_tr + k_va])
        parts[2].extend(idx[k_tr + k_va:k_tr + k_va + k_te])
        leftovers.extend(idx[k_tr + k_va + k_te:])
    leftovers = list(rng.permutation(np.array(leftovers, dtype=int)))
    for i, want in enumerate(sizes):
        need = want - len(parts[i])
        if need < 0:
            raise TooSmall("per-class shares exceed the split quota")
        parts[i].extend(leftovers[:need])
        leftovers = leftovers[need:]
    return tuple(np.sort(np.array(p, dtype=int)) for p in parts)


# -- training loop -----------------------------------------------------------

@dataclass
class LossHistory:
    epoch: list = field(default_factory=list)
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    lr: list = field(default_factory=list)

    def append(self, epoch, train_loss, val_loss, lr):
        self.epoch.append(epoch)
        self.train_loss.append(train_loss)
        self.val_loss.append(val_loss)
        self.lr.append(lr)

    def __len__(self):
        return len(self.epoch)

    def rows(self):
        return list(zip(self.epoch, self.train_loss, self.val_loss, self.lr))

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "val_loss", "lr"])
            for e, tr, va, lr in self.rows():
                w.writerow([e, repr(float(tr)), repr(float(va)), repr(float(lr))])

    @classmethod
    def from_csv(cls, path):
        h = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                h.append(int(row["epoch"]), float(row["train_loss"]), float(row["val_loss"]), float(row["lr"]))
        return h


@dataclass
class TrainResult:
    params: dict  # best-validation parameters
    history: LossHistory
    final_params: dict
    best_epoch: int | None


def evaluate_loss(model, params, x, y, lam):
    return hybrid_loss(model.predict(params, x), y, lam)


def train(cfg: TrainConfig, x_train, y_train, x_val, y_val, model_cfg: ModelConfig = ModelConfig(),
          model: DepthRegressor | None = None, init=None) -> TrainResult:
    """Minibatch training with best-validation checkpointing.

    ``x_*`` are normalised model inputs, ``y_*`` depths in mm.
    """
    model = model or DepthRegressor(model_cfg)
    x_train = np.asarray(x_train, dtype=float)
    y_train = np.asarray(y_train, dtype=float)
    x_val = np.asarray(x_val, dtype=float)
    y_val = np.asarray(y_val, dtype=float)
    if len(x_train) == 0:
        raise EmptyBatch("empty training set")

    params = init if init is not None else model.init_params(cfg.seed, labels=y_train)
    params = {k: np.array(v, dtype=float) for k, v in params.items()}
    history = LossHistory()
    if cfg.epochs == 0:
        return TrainResult(params, history, params, None)

    # separate streams so shuffling and dropout do not perturb each other
    ss_shuffle, ss_drop = np.random.SeedSequence(cfg.seed).spawn(2)
    shuffle_rng = np.random.default_rng(ss_shuffle)
    drop_rng = np.random.default_rng(ss_drop)
    opt = OptimizerState.zeros_like(params)
    sched = SchedulerState(cfg.lr)
    best, best_params, best_epoch = math.inf, params, None
    has_val = len(x_val) > 0

    for epoch in range(1, cfg.epochs + 1):
        order = shuffle_rng.permutation(len(x_train))
        lr = sched.lr
        total = 0.0
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            try:
                loss, grads, _ = model.gradients(params, x_train[idx], y_train[idx], cfg.lam, rng=drop_rng)
                grads = clip_gradients(grads, cfg.clip_max_norm)
                params, opt = adamw_step(params, grads, opt, lr, cfg.weight_decay)
            except NonFinite as err:
                ctx = {**err.context, "epoch": epoch, "batch": b}
                raise NonFinite(f"{err} (epoch {epoch}, batch {b})", ctx) from err
            total += loss * len(idx)
        train_loss = total / len(order)
        val_loss = evaluate_loss(model, params, x_val, y_val, cfg.lam) if has_val else train_loss
        if not (math.isfinite(train_loss) and math.isfinite(val_loss)):
            raise NonFinite(f"non-finite loss at epoch {epoch}", {"epoch": epoch})
        history.append(epoch, train_loss, val_loss, lr)
        if val_loss < best:
            best, best_params, best_epoch = val_loss, params, epoch
        sched = scheduler_step(sched, val_loss, cfg.scheduler)
        log.info("epoch %d train %.6f val %.6f lr %.2e", epoch, train_loss, val_loss, lr)

    return TrainResult(best_params, history, params, best_epoch)
