"""Minibatch training with validation-mAP model selection."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import tensor_core as tc
from .exceptions import ConfigurationError, ContractError, TrainingDivergedError, UndefinedMetricError
from .metrics import mean_average_precision
from .model import FineGrainNet
from .params import Adam
from .tensor_core import Tape

log = logging.getLogger(__name__)


@dataclass
class EncodedSet:
    """Model-ready arrays: token ids (N, L), true lengths (N,), values (N, F), labels (N, 4)."""

    ids: np.ndarray
    lengths: np.ndarray
    values: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        n = len(self.values)
        if len(self.ids) != n or len(self.lengths) != n or (self.labels is not None and len(self.labels) != n):
            raise ContractError("ids, lengths, values and labels must have the same number of rows")

    def __len__(self) -> int:
        return len(self.values)

    def take(self, idx: np.ndarray) -> "EncodedSet":
        return EncodedSet(self.ids[idx], self.lengths[idx], self.values[idx],
                          None if self.labels is None else self.labels[idx])


@dataclass
class TrainConfig:
    batch_size: int = 32
    max_epochs: int = 50
    lr: float = 1e-3
    patience: int | None = None
    target_map: float | None = None
    seed: int = 0

    def validate(self) -> None:
        if self.batch_size < 1 or self.max_epochs < 1 or self.lr <= 0:
            raise ConfigurationError("batch_size, max_epochs and lr must be positive")
        if self.patience is not None and self.patience < 1:
            raise ConfigurationError("patience must be positive when set")


@dataclass
class History:
    train_loss: list[float] = field(default_factory=list)
    val_map: list[float] = field(default_factory=list)
    best_epoch: int = -1
    best_val_map: float = float("-inf")
    seconds: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def predict_logits(net: FineGrainNet, data: EncodedSet, batch_size: int = 256) -> np.ndarray:
    """Eval-mode logits for every row, batched."""
    out = np.empty((len(data), net.config.n_classes))
    for start in range(0, len(data), batch_size):
        sl = slice(start, start + batch_size)
        logits, _ = net.forward(data.ids[sl], data.lengths[sl], data.values[sl], train=False)
        out[sl] = logits.data
    return out


def evaluate_map(net: FineGrainNet, data: EncodedSet) -> float:
    try:
        return mean_average_precision(tc.sigmoid(predict_logits(net, data)), data.labels)
    except UndefinedMetricError:
        return float("nan")


def train(net: FineGrainNet, train_set: EncodedSet, val_set: EncodedSet | None, cfg: TrainConfig,
          on_epoch: Callable[[int, float, float], None] | None = None) -> History:
    """Fit ``net`` in place and restore the parameters of the best epoch.

    Selection uses validation mAP, or training mAP when no validation set is
    given. Epoch ``e`` shuffles with ``default_rng([seed, e])`` and step ``s``
    draws its dropout mask from ``default_rng([seed, e, s])``, so a rerun with
    the same seed replays the same arithmetic.
    """
    cfg.validate()
    if train_set.labels is None:
        raise ContractError("training rows need labels")
    selection = val_set if val_set is not None else train_set
    opt = Adam(net.store, lr=cfg.lr)
    hist = History()
    best_state = net.store.state()
    stale = 0
    t0 = time.perf_counter()
    n = len(train_set)
    for epoch in range(cfg.max_epochs):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        total, seen = 0.0, 0
        for step, start in enumerate(range(0, n, cfg.batch_size)):
            b = train_set.take(order[start:start + cfg.batch_size])
            net.store.zero_grad()
            with Tape() as tape:
                logits, _ = net.forward(b.ids, b.lengths, b.values, train=True,
                                        rng=np.random.default_rng([cfg.seed, epoch, step]))
                loss = tc.bce_with_logits(logits, b.labels)
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingDivergedError(
                    f"non-finite loss {value} at epoch {epoch}, step {step} (lr={cfg.lr}, batch={len(b)})")
            tape.backward(loss)
            opt.step()
            # ReLU maps NaN to 0, so a poisoned weight can hide behind a finite loss
            bad = next((k for k, t in net.store if not np.isfinite(t.data).all()), None)
            if bad is not None:
                raise TrainingDivergedError(
                    f"parameter {bad} became non-finite at epoch {epoch}, step {step} (lr={cfg.lr})")
            total += value * len(b)
            seen += len(b)
        score = evaluate_map(net, selection)
        hist.train_loss.append(total / seen)
        hist.val_map.append(score)
        if score > hist.best_val_map:
            hist.best_val_map, hist.best_epoch = score, epoch
            best_state = net.store.state()
            stale = 0
        else:
            stale += 1
        log.info("epoch %d loss %.5f selection mAP %.5f", epoch, total / seen, score)
        if on_epoch is not None:
            on_epoch(epoch, total / seen, score)
        if cfg.patience is not None and stale >= cfg.patience:
            break
        if cfg.target_map is not None and hist.best_val_map >= cfg.target_map:
            break
    net.store.load_state(best_state)
    hist.seconds = time.perf_counter() - t0
    return hist
