"""Cross-entropy training with lowest-validation-loss checkpoint selection."""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .dataio import REFLECTANCE_SCALE, stack

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


def scale_input(raw, dtype=np.float32):
    """Map raw reflectance to [0, 1]: divide by 10000 and clip."""
    raw = np.asarray(raw)
    dtype = np.dtype(dtype).type
    if raw.size and raw.min() < 0:
        log.warning("clamping %d negative pixel values to 0", int((raw < 0).sum()))
    return np.clip(raw.astype(dtype) / dtype(REFLECTANCE_SCALE), 0, 1).astype(dtype)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    learning_rate: float = 1e-3
    seed: int = 0
    validation_fraction: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    eval_batch_size: int = 8

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")
        if not 0 <= self.validation_fraction < 1:
            raise ValueError("validation_fraction must lie in [0, 1)")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    seconds: float


@dataclass
class TrainLog:
    records: list = field(default_factory=list)

    @property
    def selected_epoch(self):
        best = min(range(len(self.records)), key=lambda i: (self.records[i].val_loss, i))
        return self.records[best].epoch

    def __len__(self):
        return len(self.records)

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss", "seconds"])
        for r in self.records:
            w.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss), f"{r.seconds:.3f}"])
        return buf.getvalue()


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1**self.t
        c2 = 1 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            dt = p.dtype.type
            m *= dt(b1)
            m += dt(1 - b1) * g
            v *= dt(b2)
            v += dt(1 - b2) * g * g
            step = (m / dt(c1)) / (np.sqrt(v / dt(c2)) + dt(self.eps))
            p.data = p.data - dt(self.lr) * step


def epoch_order(n, seed, epoch):
    """Sample order for one epoch, a pure function of (seed, epoch)."""
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(epoch,)))
    return rng.permutation(n)


def _prepare(samples, dtype):
    bands, masks = stack(samples)
    return scale_input(bands, dtype), masks.astype(np.int64)


def dataset_loss(model, images, masks, batch_size=8):
    """Pixel-weighted mean cross-entropy in eval mode, summed over fixed chunks."""
    was_training = model.training
    model.eval()
    total = 0.0
    try:
        with T.no_grad():
            for i in range(0, len(images), batch_size):
                probs = model.forward(images[i:i + batch_size])
                total += float(T.cross_entropy(probs, masks[i:i + batch_size]).data) * len(
                    probs.data
                )
    finally:
        model.training = was_training
    return total / len(images)


def train(model, train_set, val_set, config=None, progress=None):
    """Train ``model`` in place and return (model at best epoch, TrainLog)."""
    config = config or TrainConfig()
    if not train_set:
        raise TrainingError("training set is empty")
    if not val_set:
        raise TrainingError("validation set is empty")
    x_train, y_train = _prepare(train_set, model.dtype)
    x_val, y_val = _prepare(val_set, model.dtype)
    opt = Adam(model.parameters(), config.learning_rate, config.beta1, config.beta2,
               config.adam_eps)
    tlog = TrainLog()
    best_state = None
    best_loss = math.inf
    for epoch in range(config.epochs):
        start = time.perf_counter()
        order = epoch_order(len(x_train), config.seed, epoch)
        model.train()
        running = 0.0
        for b in range(0, len(order), config.batch_size):
            idx = order[b:b + config.batch_size]
            probs = model.forward(x_train[idx])
            loss = T.cross_entropy(probs, y_train[idx])
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss {value} at epoch {epoch}, batch {b}")
            model.zero_grad()
            loss.backward()
            opt.step()
            running += value * len(idx)
        train_loss = running / len(x_train)
        val_loss = dataset_loss(model, x_val, y_val, config.eval_batch_size)
        if not math.isfinite(val_loss):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}")
        rec = EpochRecord(epoch, train_loss, val_loss, time.perf_counter() - start)
        tlog.records.append(rec)
        log.info("epoch %d train %.5f val %.5f (%.1fs)", epoch, train_loss, val_loss, rec.seconds)
        if progress is not None:
            progress(rec)
        if val_loss < best_loss:
            best_loss = val_loss
            best_state = model.state_arrays()
    model.load_state_arrays(best_state)
    model.eval()
    return model, tlog


def config_dict(config):
    return asdict(config)
