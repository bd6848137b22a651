"""Training recipe and evaluation.

SGD with heavy-ball momentum (default 0.99) under a one-cycle LR
schedule, binary cross-entropy on the positive-class softmax
probability, salt-and-pepper noise injected into the latent features of
a configurable stage, and stochastic weight averaging over the tail of
the run. Adam/AdamW are available behind the same interface for the
optimizer ablation axis only.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError
from .head import nc_metrics
from .model import Model
from .tensor import RngStream, Tensor

__all__ = [
    "OptimizerState",
    "ScheduleConfig",
    "SWAState",
    "MetricsReport",
    "TrainConfig",
    "bce_loss",
    "init_optimizer",
    "sgd_momentum_step",
    "optimizer_step",
    "onecycle_lr",
    "swa_update",
    "swa_finalize",
    "swa_apply",
    "inject_salt_pepper_latent",
    "train_epoch",
    "evaluate",
    "fit",
]

PROB_CLAMP = 1e-7  # keeps log() finite on saturated predictions

# latent noise lives in tensor.py so the model forward can reach it
inject_salt_pepper_latent = T.salt_pepper_noise


def bce_loss(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Binary cross-entropy on the positive-class softmax probability.

    logits: (B, 2); targets: (B,) integer labels in {0, 1}. Probabilities
    are clamped to [1e-7, 1 - 1e-7] before the log.
    """
    targets = np.asarray(targets)
    if logits.ndim != 2 or logits.shape[1] != 2:
        raise ContractError(f"bce expects (B,2) logits, got {logits.shape}")
    if targets.shape != (logits.shape[0],):
        raise ContractError(
            f"targets shape {targets.shape} vs batch {logits.shape[0]}"
        )
    if not np.isin(targets, (0, 1)).all():
        raise ContractError("bce targets must lie in {0, 1}")
    t = Tensor(targets.astype(logits.dtype))
    p = T.clip(T.index_last(T.softmax(logits), 1), PROB_CLAMP, 1.0 - PROB_CLAMP)
    terms = T.add(T.mul(t, T.log(p)),
                  T.mul(1.0 - t, T.log(1.0 - p)))
    return T.neg(T.reduce_mean(terms))


# -- optimizers ---------------------------------------------------------------


@dataclass
class OptimizerState:
    kind: str = "sgd"
    momentum: float = 0.99
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01      # adamw only
    velocities: Dict[str, np.ndarray] = field(default_factory=dict)
    second_moments: Dict[str, np.ndarray] = field(default_factory=dict)
    step_count: int = 0


def init_optimizer(kind: str = "sgd", momentum: float = 0.99) -> OptimizerState:
    if kind not in ("sgd", "adam", "adamw"):
        raise ConfigError(f"unknown optimizer {kind!r}")
    return OptimizerState(kind=kind, momentum=momentum)


def sgd_momentum_step(opt: OptimizerState,
                      params: Iterable[Tuple[str, Tensor]], lr: float) -> None:
    """Classic momentum: v <- mu*v + g; w <- w - lr*v.

    No dampening, no weight decay, no Nesterov. Tensors without
    requires_grad are untouched and carry no velocity buffers.
    """
    mu = opt.momentum
    for name, p in params:
        if not p.requires_grad:
            continue
        if p.grad is None:
            raise ContractError(f"parameter {name!r} has no gradient")
        if p.grad.shape != p.data.shape:
            raise ContractError(f"gradient shape mismatch on {name!r}")
        v = opt.velocities.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        v = mu * v + p.grad
        opt.velocities[name] = v
        p.data -= lr * v
    opt.step_count += 1


def _adam_step(opt: OptimizerState, params, lr: float, decoupled: bool) -> None:
    opt.step_count += 1
    t = opt.step_count
    c1 = 1.0 - opt.beta1 ** t
    c2 = 1.0 - opt.beta2 ** t
    for name, p in params:
        if not p.requires_grad:
            continue
        if p.grad is None:
            raise ContractError(f"parameter {name!r} has no gradient")
        g = p.grad
        m = opt.velocities.get(name)
        v = opt.second_moments.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = opt.beta1 * m + (1.0 - opt.beta1) * g
        v = opt.beta2 * v + (1.0 - opt.beta2) * (g * g)
        opt.velocities[name] = m
        opt.second_moments[name] = v
        update = (m / c1) / (np.sqrt(v / c2) + opt.eps)
        if decoupled:
            p.data -= lr * (update + opt.weight_decay * p.data)
        else:
            p.data -= lr * update


def optimizer_step(opt: OptimizerState,
                   params: Iterable[Tuple[str, Tensor]], lr: float) -> None:
    params = list(params)
    if opt.kind == "sgd":
        sgd_momentum_step(opt, params, lr)
    elif opt.kind == "adam":
        _adam_step(opt, params, lr, decoupled=False)
    else:
        _adam_step(opt, params, lr, decoupled=True)


# -- learning-rate schedule -----------------------------------------------------


@dataclass
class ScheduleConfig:
    total_steps: int
    max_lr: float
    pct_start: float = 0.3
    div_factor: float = 25.0
    final_div_factor: float = 1e4

    def validate(self) -> None:
        if self.total_steps < 1:
            raise ConfigError("total_steps must be positive")
        if not 0.0 < self.pct_start < 1.0:
            raise ConfigError(f"pct_start must be in (0,1), got {self.pct_start}")
        if self.div_factor <= 1.0 or self.final_div_factor <= 1.0:
            raise ConfigError("div factors must exceed 1")


def onecycle_lr(s: ScheduleConfig, step: int) -> float:
    """Cosine ramp from max_lr/div_factor to max_lr over the first
    pct_start of the run, then cosine decay to max_lr/final_div_factor."""
    s.validate()
    if not 0 <= step <= s.total_steps:
        raise ContractError(f"step {step} outside [0, {s.total_steps}]")
    low = s.max_lr / s.div_factor
    final = s.max_lr / s.final_div_factor
    peak = s.pct_start * s.total_steps
    if step <= peak:
        t = step / peak
        return float(low + (s.max_lr - low) * 0.5 * (1.0 - np.cos(np.pi * t)))
    t = (step - peak) / (s.total_steps - peak)
    return float(final + (s.max_lr - final) * 0.5 * (1.0 + np.cos(np.pi * t)))


# -- stochastic weight averaging ---------------------------------------------------


@dataclass
class SWAState:
    start_epoch: int
    average: Dict[str, np.ndarray] = field(default_factory=dict)
    count: int = 0


def swa_update(s: SWAState, model: Model) -> SWAState:
    """Fold the model's current trainable parameters into the running mean."""
    n = s.count
    for name, p in model.trainable_parameters():
        w = p.data.astype(np.float64)
        if n == 0:
            s.average[name] = w.copy()
        else:
            s.average[name] = (s.average[name] * n + w) / (n + 1)
    s.count = n + 1
    return s


def swa_finalize(s: SWAState) -> Dict[str, np.ndarray]:
    if s.count < 1:
        raise ContractError("swa_finalize before any update")
    return {k: v.copy() for k, v in s.average.items()}


def swa_apply(model: Model, s: SWAState) -> None:
    avg = swa_finalize(s)
    for name, p in model.trainable_parameters():
        p.copy_(avg[name].astype(p.data.dtype))


# -- evaluation ----------------------------------------------------------------------


@dataclass
class MetricsReport:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    @property
    def accuracy(self) -> float:
        return (self.tp + self.tn) / self.total if self.total else 0.0

    @property
    def precision(self) -> float:
        denom = self.tp + self.fp
        return self.tp / denom if denom else 0.0

    @property
    def recall(self) -> float:
        denom = self.tp + self.fn
        return self.tp / denom if denom else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2.0 * p * r / (p + r) if (p + r) > 0 else 0.0

    def normalized_rates(self) -> np.ndarray:
        """Rows are actual (positive, negative); each row sums to 1."""
        pos = max(self.tp + self.fn, 1)
        neg = max(self.fp + self.tn, 1)
        return np.array([[self.tp / pos, self.fn / pos],
                         [self.fp / neg, self.tn / neg]])

    def to_flat_dict(self) -> dict:
        rates = self.normalized_rates()
        return {
            "tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn,
            "accuracy": self.accuracy, "precision": self.precision,
            "recall": self.recall, "f1": self.f1,
            "rate_tp": float(rates[0, 0]), "rate_fn": float(rates[0, 1]),
            "rate_fp": float(rates[1, 0]), "rate_tn": float(rates[1, 1]),
        }


def _batched_logits(model: Model, images: np.ndarray, batch_size: int,
                    want_features: bool):
    logits_all = []
    feats_all = []
    with T.no_grad():
        for lo in range(0, images.shape[0], batch_size):
            xb = Tensor(images[lo:lo + batch_size])
            capture: Optional[dict] = {} if want_features else None
            out = model.forward(xb, capture=capture)
            logits_all.append(out.data)
            if want_features:
                feats_all.append(capture["head_pre_final"].data)
    logits = np.concatenate(logits_all, axis=0)
    feats = np.concatenate(feats_all, axis=0) if want_features else None
    return logits, feats


def evaluate(model: Model, images: np.ndarray, labels: np.ndarray,
             batch_size: int = 64,
             return_features: bool = False):
    """Argmax predictions against integer labels; class 1 is positive."""
    if images.shape[0] == 0:
        raise ContractError("evaluate on an empty dataset")
    prev_mode = model.mode
    model.eval()
    try:
        logits, feats = _batched_logits(model, images, batch_size,
                                        return_features)
    finally:
        model.mode = prev_mode
    preds = logits.argmax(axis=1)
    labels = np.asarray(labels)
    report = MetricsReport(
        tp=int(((preds == 1) & (labels == 1)).sum()),
        fp=int(((preds == 1) & (labels == 0)).sum()),
        fn=int(((preds == 0) & (labels == 1)).sum()),
        tn=int(((preds == 0) & (labels == 0)).sum()),
    )
    if return_features:
        return report, feats
    return report


# -- training loop --------------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    max_lr: float = 1e-5
    momentum: float = 0.99
    optimizer: str = "sgd"
    pct_start: float = 0.3
    div_factor: float = 25.0
    final_div_factor: float = 1e4
    noise_salt: float = 0.05
    noise_pepper: float = 0.05
    swa_start_frac: float = 0.75
    eval_batch_size: int = 64

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if self.noise_salt + self.noise_pepper > 1.0:
            raise ConfigError("noise probabilities must sum to at most 1")
        if not 0.0 < self.swa_start_frac <= 1.0:
            raise ConfigError("swa_start_frac must be in (0, 1]")


def train_epoch(model: Model, images: np.ndarray, labels: np.ndarray,
                opt: OptimizerState, sched: ScheduleConfig,
                noise: Tuple[float, float], rng: RngStream,
                batch_size: int, step_offset: int) -> dict:
    """One pass over the data in a seed-determined order; one optimizer
    step per batch. Returns the mean loss and the per-batch lr trace."""
    n = images.shape[0]
    if n == 0:
        raise ContractError("train_epoch on an empty dataset")
    model.train()
    order = rng.permutation(n)
    losses = []
    lr_trace = []
    params = list(model.named_parameters())
    step = step_offset
    for lo in range(0, n, batch_size):
        idx = order[lo:lo + batch_size]
        xb = Tensor(images[idx])
        model.zero_grad()
        logits = model.forward(xb, rng=rng, noise=noise)
        loss = bce_loss(logits, labels[idx])
        loss.backward()
        lr = onecycle_lr(sched, step)
        optimizer_step(opt, params, lr)
        losses.append(loss.item())
        lr_trace.append(lr)
        step += 1
    return {"mean_loss": float(np.mean(losses)), "lr_trace": lr_trace,
            "steps": step - step_offset}


def fit(model: Model, splits: dict, cfg: TrainConfig, seed: int,
        nc_trace: bool = True) -> dict:
    """Full training run.

    ``splits`` maps 'train'/'val' (and optionally 'test') to (images,
    labels) pairs. Returns a history dict with one record per epoch
    {epoch, mean_loss, lr, val_accuracy, val_f1}, a neural-collapse
    trace on the validation features, and the final test metrics
    (computed on the SWA average when one was accumulated).
    """
    cfg.validate()
    train_x, train_y = splits["train"]
    val_x, val_y = splits["val"]
    steps_per_epoch = -(-train_x.shape[0] // cfg.batch_size)
    sched = ScheduleConfig(total_steps=steps_per_epoch * cfg.epochs,
                           max_lr=cfg.max_lr, pct_start=cfg.pct_start,
                           div_factor=cfg.div_factor,
                           final_div_factor=cfg.final_div_factor)
    opt = init_optimizer(cfg.optimizer, momentum=cfg.momentum)
    root = RngStream(seed)
    swa_start = max(1, int(np.ceil(cfg.swa_start_frac * cfg.epochs)))
    swa = SWAState(start_epoch=swa_start)
    history: List[dict] = []
    nc_rows: List[dict] = []
    noise = (cfg.noise_salt, cfg.noise_pepper)
    for epoch in range(1, cfg.epochs + 1):
        epoch_rng = root.child(f"epoch{epoch}")
        log = train_epoch(model, train_x, train_y, opt, sched, noise,
                          epoch_rng, cfg.batch_size,
                          step_offset=(epoch - 1) * steps_per_epoch)
        report, feats = evaluate(model, val_x, val_y,
                                 batch_size=cfg.eval_batch_size,
                                 return_features=True)
        record = {
            "epoch": epoch,
            "mean_loss": log["mean_loss"],
            "lr": log["lr_trace"][-1],
            "val_accuracy": report.accuracy,
            "val_f1": report.f1,
        }
        history.append(record)
        if nc_trace:
            nc = nc_metrics(feats, val_y)
            nc_rows.append({"epoch": epoch,
                            "within_class_variance": nc.within_class_variance})
        if epoch >= swa_start:
            swa_update(swa, model)
    if swa.count > 0:
        swa_apply(model, swa)
    result = {"history": history, "nc_trace": nc_rows, "swa_count": swa.count}
    if "test" in splits:
        test_x, test_y = splits["test"]
        result["test_metrics"] = evaluate(model, test_x, test_y,
                                          batch_size=cfg.eval_batch_size)
    return result
