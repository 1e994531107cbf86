"""Semi-supervised losses, AdaBelief, and the epoch loop with early stopping."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensorcore as tc

log = logging.getLogger(__name__)


@dataclass
class LossConfig:
    eta: float = 1e-2
    guard_eps: float = 1e-6
    n_a: int = 0                 # abnormal labels in the training set
    n_n: int = 0                 # normal labels in the training set
    max_epochs: int = 300
    patience: int = 15
    lr: float = 1e-3
    lr_decay: float = 0.9
    batch_size: int = 50
    seed: int = 0
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-16
    shuffle: bool = True
    val_blend: float = 0.5       # weight of L1 in the monitored validation loss
    detach_classifier: bool = False   # stop L2 gradients at R (classifier sees R but does not shape it)

    def __post_init__(self):
        if self.eta < 0 or self.guard_eps <= 0:
            raise ValueError("eta must be >= 0 and guard_eps > 0")
        if self.max_epochs < 1 or self.patience < 1 or self.batch_size < 1:
            raise ValueError("max_epochs, patience and batch_size must be >= 1")
        self.betas = tuple(self.betas)

    @property
    def positive_weight(self):
        return self.n_n / self.n_a if self.n_a > 0 else 1.0

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


def class_counts(labels):
    labels = np.asarray(labels)
    return int((labels == 1).sum()), int((labels == 0).sum())


# -- residual, scores, losses -----------------------------------------------------
def residual(M, L, S, recon, trace_proj):
    """R = [M - M', L - L', W_s (S_i,: - S'_i,:)] for the last graph of each window.

    M (B, N, F_m), L (B, N, F_l), S (B, N, N, F_s) are targets; ``recon`` holds
    the tensors M', L', S'; ``trace_proj`` maps N*F_s -> F_s (no bias).
    """
    B, N = M.shape[:2]
    if recon.metrics.shape != M.shape or recon.logs.shape != L.shape or recon.traces.shape != S.shape:
        raise ValueError(f"reconstruction shapes {recon.metrics.shape}/{recon.logs.shape}/{recon.traces.shape} "
                         f"do not match targets {M.shape}/{L.shape}/{S.shape}")
    dm = tc.as_tensor(M, recon.metrics.dtype) - recon.metrics
    dl = tc.as_tensor(L, recon.logs.dtype) - recon.logs
    ds = tc.reshape(tc.as_tensor(S, recon.traces.dtype) - recon.traces, (B, N, -1))
    return tc.concat([dm, dl, trace_proj(ds)], axis=-1)


def scores(R, head):
    """RE = row sums of R*R; P = softmax(MLP(R*R)). Returns (RE (B, N), P (B, N, 2))."""
    sq = R * R
    return tc.tsum(sq, axis=-1), tc.softmax(head.mlp(sq), axis=-1)


def _mask(y, value, dtype):
    return (np.asarray(y) == value).astype(dtype)


def loss_l1(RE, y, eta=1e-2, guard_eps=1e-6):
    """(1/(m+n)) (eta * sum_unlabeled RE + sum_abnormal 1/(RE + guard) + sum_normal RE)."""
    RE = tc.as_tensor(RE)
    y = np.asarray(y)
    if y.shape != RE.shape:
        raise ValueError(f"labels {y.shape} do not match RE {RE.shape}")
    total = y.size
    if total == 0:
        raise ValueError("loss_l1 needs at least one instance")
    dt = RE.dtype
    w = eta * _mask(y, -1, dt) + _mask(y, 0, dt)
    out = tc.tsum(RE * w)
    ab = _mask(y, 1, dt)
    if ab.any():
        out = out + tc.tsum(tc.reciprocal(RE + guard_eps) * ab)
    return out * (1.0 / total)


def loss_l2(P, y, positive_weight=1.0, guard_eps=1e-6):
    """Weighted BCE on P(abnormal) over labeled instances.

    Returns (loss, has_labels); with no labeled instance the loss is a
    constant zero and has_labels is False.
    """
    P = tc.as_tensor(P)
    y = np.asarray(y)
    labeled = y >= 0
    n = int(labeled.sum())
    if n == 0:
        return tc.Tensor(np.zeros((), dtype=P.dtype)), False
    dt = P.dtype
    p_ab = P[..., 1]
    pos = positive_weight * _mask(y, 1, dt)
    neg = _mask(y, 0, dt)
    ll = tc.log(p_ab + guard_eps) * pos + tc.log((1.0 + guard_eps) - p_ab) * neg
    return tc.tsum(ll) * (-1.0 / n), True


def combined_weights(epoch):
    if epoch < 1:
        raise ValueError(f"epoch must be >= 1, got {epoch}")
    return 1.0 / epoch, 1.0 - 1.0 / epoch


def combined_loss(l1, l2, epoch):
    w1, w2 = combined_weights(epoch)
    return l1 * w1 + l2 * w2


def blend(l1, l2, w1):
    return l1 * w1 + l2 * (1.0 - w1)


def forward_losses(model, M, L, S, y, cfg: LossConfig):
    """Model forward plus (RE, P, L1, L2, has_labels) for one batch."""
    recon = model(M, L, S)
    R = residual(M[:, -1], L[:, -1], S[:, -1], recon, model.head.trace_proj)
    RE, P = scores(R, model.head)
    if cfg.detach_classifier:
        _, P = scores(R.detach(), model.head)
    l1 = loss_l1(RE, y, cfg.eta, cfg.guard_eps)
    l2, has = loss_l2(P, y, cfg.positive_weight, cfg.guard_eps)
    return RE, P, l1, l2, has


# -- optimiser -------------------------------------------------------------------
class AdaBelief:
    """Adam variant whose second moment tracks (g - m)^2."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-16):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.s = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        b1, b2, eps = self.b1, self.b2, self.eps
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, m, s in zip(self.params, self.m, self.s):
            g = p.grad
            if g is None:
                continue
            m *= b1
            m += (1.0 - b1) * g
            d = g - m
            s *= b2
            s += (1.0 - b2) * d * d
            s += eps
            p.data -= (self.lr / c1) * m / (np.sqrt(s / c2) + eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


# -- loop ------------------------------------------------------------------------
class EarlyStopping:
    """Stop once ``patience`` consecutive epochs fail to beat the best value."""

    def __init__(self, patience):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = 0
        self.bad = 0

    def step(self, epoch, value):
        """Record ``value`` for ``epoch``; return (improved, stop)."""
        if value < self.best:
            self.best, self.best_epoch, self.bad = value, epoch, 0
            return True, False
        self.bad += 1
        return False, self.bad >= self.patience


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float


@dataclass
class TrainResult:
    best_state: dict
    best_epoch: int
    epochs_run: int
    history: list = field(default_factory=list)
    stopped_early: bool = False
    seconds: float = 0.0


def evaluate_loss(model, ds, cfg: LossConfig, w1, batch_size=None):
    """Mean blended loss over a dataset with dropout off (no graph built)."""
    if len(ds) == 0:
        return math.nan
    bs = batch_size or max(cfg.batch_size, 200)
    was = model.training
    model.eval()
    total = 0.0
    with tc.no_grad():
        for start in range(0, len(ds), bs):
            pos = np.arange(start, min(start + bs, len(ds)))
            M, L, S, y = ds.batch(pos)
            _, _, l1, l2, _ = forward_losses(model, M, L, S, y, cfg)
            total += float(blend(l1, l2, w1).data) * len(pos)
    model.train(was)
    return total / len(ds)


def _param_report(model):
    return ", ".join(f"{n}: |w|={np.abs(p.data).max():.3g}" for n, p in model.named_parameters()
                     if not np.all(np.isfinite(p.data)))[:500] or "all parameters finite"


def train(model, train_ds, val_ds, cfg: LossConfig, history_path=None, max_seconds=None):
    """Mini-batch training; returns the best-validation state.

    The per-epoch loss is (1/epoch) L1 + (1 - 1/epoch) L2. Validation uses a
    fixed L1/L2 blend (``cfg.val_blend``) so the monitored value means the
    same thing every epoch; without validation data the train loss is used.
    """
    if len(train_ds) == 0:
        raise ValueError("empty training set")
    opt = AdaBelief(model.parameters(), cfg.lr, cfg.betas, cfg.adam_eps)
    rng = np.random.default_rng(cfg.seed)
    stopper = EarlyStopping(cfg.patience)
    history = []
    best_state = model.state_dict()
    t0 = time.perf_counter()
    stopped = False
    epoch = 0
    for epoch in range(1, cfg.max_epochs + 1):
        opt.lr = cfg.lr * cfg.lr_decay ** (epoch - 1)
        w1, w2 = combined_weights(epoch)
        order = rng.permutation(len(train_ds)) if cfg.shuffle else np.arange(len(train_ds))
        model.train()
        total, count = 0.0, 0
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            pos = order[start:start + cfg.batch_size]
            model.reseed_dropout((cfg.seed * 1_000_003 + epoch) * 100_003 + b)
            M, L, S, y = train_ds.batch(pos)
            _, _, l1, l2, _ = forward_losses(model, M, L, S, y, cfg)
            loss = l1 * w1 + l2 * w2
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch} batch {b}: L1={float(l1.data)!r} "
                                       f"L2={float(l2.data)!r}; {_param_report(model)}")
            opt.zero_grad()
            tc.backward(loss)
            opt.step()
            total += value * len(pos)
            count += len(pos)
        train_loss = total / count
        val_loss = evaluate_loss(model, val_ds, cfg, cfg.val_blend) if val_ds is not None and len(val_ds) else train_loss
        if not math.isfinite(val_loss):
            raise TrainingDiverged(f"non-finite validation loss at epoch {epoch}; {_param_report(model)}")
        history.append(EpochRecord(epoch, train_loss, val_loss, opt.lr))
        improved, stop = stopper.step(epoch, val_loss)
        if improved:
            best_state = model.state_dict()
        log.info("epoch %d train %.6g val %.6g lr %.3g%s", epoch, train_loss, val_loss, opt.lr,
                 " *" if improved else "")
        if history_path is not None:
            write_history(history_path, history)
        if stop:
            stopped = True
            break
        if max_seconds is not None and time.perf_counter() - t0 > max_seconds:
            log.warning("training time budget of %.0f s reached after epoch %d", max_seconds, epoch)
            break
    model.load_state_dict(best_state)
    model.eval()
    return TrainResult(best_state, stopper.best_epoch, epoch, history, stopped, time.perf_counter() - t0)


def write_history(path, history):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss", "lr"])
        for r in history:
            w.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss), repr(r.lr)])


def read_history(path):
    with open(path, newline="") as fh:
        return [EpochRecord(int(r["epoch"]), float(r["train_loss"]), float(r["val_loss"]), float(r["lr"]))
                for r in csv.DictReader(fh)]
