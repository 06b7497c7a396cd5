"""Losses, Adagrad, and the training loop with auxiliary heads and early stopping."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .analysis import auc
from .data import EncodedTable, batch_iterator
from .model import NONModel
from .tensor import Tape, Tensor

logger = logging.getLogger(__name__)

BCE_EPS = 1e-12


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.5
    alpha_decay: float = 1.0
    gamma: float = 1e-5
    eps: float = BCE_EPS
    alpha_layers: tuple[float, ...] = ()   # optional per-head override of alpha

    def __post_init__(self):
        if self.alpha < 0 or self.gamma < 0 or any(a < 0 for a in self.alpha_layers):
            raise ValueError("alpha and gamma must be non-negative")
        if not 0 < self.alpha_decay <= 1:
            raise ValueError("alpha_decay must lie in (0, 1]")

    @classmethod
    def from_config(cls, config) -> LossConfig:
        return cls(alpha=config.alpha, alpha_decay=config.alpha_decay, gamma=config.gamma)

    def alpha_at(self, epoch: int) -> float:
        return self.alpha * self.alpha_decay ** epoch


def bce(logit: Tensor, labels) -> Tensor:
    """Mean binary cross-entropy of sigmoid(logit), log arguments clamped at BCE_EPS."""
    return _bce(logit, labels, BCE_EPS)


def _bce(logit: Tensor, labels, eps: float) -> Tensor:
    y = Tensor(np.asarray(labels, dtype=np.float64).reshape(logit.shape))
    p = T.sigmoid(logit)
    log_p = T.log(T.clip(p, eps, 1.0))
    log_q = T.log(T.clip(T.sub(1.0, p), eps, 1.0))
    ll = T.add(T.mul(y, log_p), T.mul(T.sub(1.0, y), log_q))
    return T.scale(T.reduce_mean(ll), -1.0)


def l2_penalty(weights: Sequence[Tensor]) -> Tensor:
    total = Tensor(0.0)
    for w in weights:
        total = T.add(total, T.reduce_sum(T.mul(w, w)))
    return total


def total_loss(logit: Tensor, aux_logits: Sequence[Tensor], labels, weights: Sequence[Tensor],
               cfg: LossConfig, epoch: int = 0) -> Tensor:
    """bce(final) + alpha_epoch * sum of auxiliary bce terms + gamma * squared L2 of ``weights``."""
    loss = _bce(logit, labels, cfg.eps)
    if aux_logits:
        if cfg.alpha_layers and len(cfg.alpha_layers) != len(aux_logits):
            raise ValueError(f"{len(cfg.alpha_layers)} per-layer alphas for {len(aux_logits)} auxiliary heads")
        decay = cfg.alpha_decay ** epoch
        for i, a in enumerate(aux_logits):
            coef = (cfg.alpha_layers[i] if cfg.alpha_layers else cfg.alpha) * decay
            if coef:
                loss = T.add(loss, T.scale(_bce(a, labels, cfg.eps), coef))
    if cfg.gamma and weights:
        loss = T.add(loss, T.scale(l2_penalty(weights), cfg.gamma))
    return loss


@dataclass
class AdagradState:
    accumulators: list[np.ndarray]
    lr: float = 0.1
    eps: float = 1e-10

    @classmethod
    def zeros(cls, shapes, lr: float = 0.1, eps: float = 1e-10) -> AdagradState:
        return cls([np.zeros(s) for s in shapes], lr, eps)


def adagrad_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray | None], state: AdagradState) -> None:
    """In place: acc += g^2; theta -= lr * g / (sqrt(acc) + eps). A None gradient skips the parameter."""
    for p, g, acc in zip(params, grads, state.accumulators):
        if g is None:
            continue
        acc += g * g
        p -= state.lr * g / (np.sqrt(acc) + state.eps)


class Adagrad:
    """Adagrad over Tensor parameters, reading their ``.grad``."""

    def __init__(self, params: Sequence[Tensor], lr: float = 0.1, eps: float = 1e-10):
        self.params = list(params)
        self.state = AdagradState.zeros([p.shape for p in self.params], lr, eps)

    @property
    def accumulators(self) -> list[np.ndarray]:
        return self.state.accumulators

    def step(self) -> None:
        adagrad_step([p.values for p in self.params], [p.grad for p in self.params], self.state)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


class EarlyStopping:
    """Stop once ``patience`` consecutive epochs fail to beat the best score."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = -math.inf
        self.best_epoch = -1
        self.bad_epochs = 0

    def update(self, epoch: int, score: float) -> bool:
        """Record a score; True when this epoch is the new best."""
        if score > self.best:
            self.best, self.best_epoch, self.bad_epochs = score, epoch, 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs >= self.patience


@dataclass
class FitReport:
    train_loss: list[float] = field(default_factory=list)
    valid_auc: list[float] = field(default_factory=list)
    alpha: list[float] = field(default_factory=list)
    epoch_seconds: list[float] = field(default_factory=list)
    best_epoch: int = -1
    best_valid_auc: float = float("nan")
    stopped_early: bool = False
    best_state: dict | None = field(default=None, repr=False)

    @property
    def epochs_run(self) -> int:
        return len(self.train_loss)

    def metrics(self) -> dict:
        """Everything except wall-clock timings and parameter arrays."""
        return {"train_loss": self.train_loss, "valid_auc": self.valid_auc, "alpha": self.alpha,
                "best_epoch": self.best_epoch, "best_valid_auc": self.best_valid_auc,
                "stopped_early": self.stopped_early}


def evaluate(model: NONModel, table: EncodedTable, batch_size: int = 4096) -> tuple[float, float]:
    """(AUC, mean bce) in inference mode; auxiliary heads are not evaluated."""
    scores = predict(model, table, batch_size)
    y = table.labels.astype(np.float64)
    sig = T.sigmoid_values(scores)
    p = np.clip(sig, BCE_EPS, 1.0)
    q = np.clip(1.0 - sig, BCE_EPS, 1.0)
    loss = float(-np.mean(y * np.log(p) + (1 - y) * np.log(q)))
    return auc(scores, table.labels), loss


def predict(model: NONModel, table: EncodedTable, batch_size: int = 4096) -> np.ndarray:
    return np.concatenate([model.predict_logits(b) for b in batch_iterator(table, batch_size)]) \
        if len(table) else np.zeros(0)


def fit(model: NONModel, train: EncodedTable, valid: EncodedTable, loss_cfg: LossConfig | None = None,
        optimizer: Adagrad | None = None, epochs: int | None = None, patience: int | None = None,
        seed=0, batch_size: int | None = None,
        on_epoch: Callable[[dict], None] | None = None,
        stop_when: Callable[[int, FitReport], bool] | None = None) -> FitReport:
    """Train with auxiliary losses, select the epoch with the best validation AUC.

    The model ends holding the best epoch's parameters. ``on_epoch`` receives one
    metric record per epoch; ``stop_when(epoch, report)`` may end training early.
    """
    cfg = model.config
    loss_cfg = loss_cfg or LossConfig.from_config(cfg)
    optimizer = optimizer or Adagrad(model.parameters(), lr=cfg.learning_rate)
    epochs = epochs or cfg.epochs
    patience = patience or cfg.patience
    batch_size = batch_size or cfg.batch_size
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    weights = model.decayed_parameters()
    stopper = EarlyStopping(patience)
    report = FitReport()
    start = time.perf_counter()

    for epoch in range(epochs):
        t0 = time.perf_counter()
        total, rows = 0.0, 0
        for i, batch in enumerate(batch_iterator(train, batch_size, shuffle=True, seed=rng)):
            with Tape() as tape:
                logit, aux = model.forward(batch, training=True)
                loss = total_loss(logit, aux, batch.labels, weights, loss_cfg, epoch)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss {value} at epoch {epoch}, batch {i}")
            optimizer.zero_grad()
            tape.backward(loss)
            optimizer.step()
            total += value * batch.size
            rows += batch.size
        valid_auc, _ = evaluate(model, valid)
        report.train_loss.append(total / max(rows, 1))
        report.valid_auc.append(valid_auc)
        report.alpha.append(loss_cfg.alpha_at(epoch))
        report.epoch_seconds.append(time.perf_counter() - t0)
        if stopper.update(epoch, valid_auc):
            report.best_state = model.state_dict()
        record = {"epoch": epoch, "train_loss": report.train_loss[-1], "valid_auc": valid_auc,
                  "alpha": report.alpha[-1], "elapsed": time.perf_counter() - start}
        logger.info(json.dumps(record))
        if on_epoch is not None:
            on_epoch(record)
        if stopper.should_stop:
            report.stopped_early = epoch + 1 < epochs
            break
        if stop_when is not None and stop_when(epoch, report):
            break

    report.best_epoch, report.best_valid_auc = stopper.best_epoch, stopper.best
    if report.best_state is not None:
        model.load_state_dict(report.best_state)
    return report
