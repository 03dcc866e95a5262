"""Deterministic mini-batch training with Huber loss and Adam.

Identical config and data produce byte-identical checkpoints: parameter
init, epoch shuffling, and batch order all derive from the config seed, and
the update itself has a fixed parameter iteration order.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import DataError, DivergenceError, NonFiniteError
from .grid_data import Sample, Scaler, write_text_atomic
from .model import FULL, ModelConfig, ParameterSet, PastaModel, Variant
from .spatial_stats import moran_volume


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 16
    learning_rate: float = 1e-3
    huber_delta: float = 1.0
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    shuffle: bool = True

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise DataError("epochs and batch_size must be at least 1")
        if self.learning_rate <= 0 or self.huber_delta <= 0:
            raise DataError("learning_rate and huber_delta must be positive")


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_rmse: float
    seconds: float


@dataclass
class TrainHistory:
    records: list[EpochRecord]

    def to_csv(self) -> str:
        lines = ["epoch,train_loss,val_rmse,seconds"]
        for r in self.records:
            lines.append(f"{r.epoch},{r.train_loss!r},{r.val_rmse!r},{r.seconds!r}")
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        write_text_atomic(path, self.to_csv())


class AdamState:
    """First/second moment estimates plus the shared step counter."""

    def __init__(self, params: ParameterSet):
        self.step = 0
        self.m = {name: np.zeros_like(t.value) for name, t in params.items()}
        self.v = {name: np.zeros_like(t.value) for name, t in params.items()}


def adam_step(
    params: ParameterSet,
    grads: dict[str, np.ndarray],
    state: AdamState,
    config: TrainConfig,
) -> None:
    """One bias-corrected moment update, in place, in fixed name order."""
    state.step += 1
    t = state.step
    b1, b2 = config.beta1, config.beta2
    for name in params.names():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        mhat = m / (1.0 - b1**t)
        vhat = v / (1.0 - b2**t)
        params[name].value -= config.learning_rate * mhat / (np.sqrt(vhat) + config.eps)


@dataclass
class SampleBatch:
    """Samples stacked into arrays, with the Moran stack precomputed once."""

    x: np.ndarray  # (count, n, m, t)
    moran: np.ndarray  # (count, n, m, t)
    ext: np.ndarray  # (count, dext)
    target: np.ndarray  # (count, n, m) normalized
    target_raw: np.ndarray  # (count, n, m)
    indices: list[int]

    def __len__(self) -> int:
        return self.x.shape[0]

    def take(self, idx: np.ndarray) -> "SampleBatch":
        return SampleBatch(
            self.x[idx],
            self.moran[idx],
            self.ext[idx],
            self.target[idx],
            self.target_raw[idx],
            [self.indices[i] for i in idx],
        )


def stack_samples(samples: Sequence[Sample]) -> SampleBatch:
    if not samples:
        raise DataError("empty sample list")
    x = np.stack([s.input for s in samples])
    return SampleBatch(
        x=x,
        moran=moran_volume(x),
        ext=np.stack([s.external for s in samples]),
        target=np.stack([s.target for s in samples]),
        target_raw=np.stack([s.target_raw for s in samples]),
        indices=[s.target_index for s in samples],
    )


def chronological_split(samples: Sequence[Sample], val_fraction: float = 0.1):
    """Last fraction of samples (by position) becomes the validation set."""
    samples = list(samples)
    if len(samples) < 2:
        return samples, list(samples)
    n_val = min(len(samples) - 1, max(1, round(val_fraction * len(samples))))
    return samples[:-n_val], samples[-n_val:]


def _validation_rmse(model: PastaModel, data: SampleBatch, variant: Variant) -> float:
    pred, _ = model.predict(data.x, data.ext, moran=data.moran, variant=variant)
    return float(np.sqrt(np.mean((pred - data.target) ** 2)))


def train(
    train_samples: Sequence[Sample],
    val_samples: Sequence[Sample],
    model_cfg: ModelConfig,
    config: TrainConfig,
    scaler: Scaler,
    variant: Variant = FULL,
    checkpoint_path=None,
    best_path=None,
    history_path=None,
) -> tuple[PastaModel, TrainHistory]:
    """Minimize mean Huber loss over mini-batches; returns model and history.

    Writes the final model to checkpoint_path and the best-validation model
    to best_path when those paths are given. Validation RMSE is on the
    normalized scale; with no separate validation samples the training set
    stands in.
    """
    if not train_samples:
        raise DataError("training requires at least one sample")
    model = PastaModel.initialize(model_cfg, scaler, config.seed)
    data = stack_samples(train_samples)
    val = stack_samples(val_samples) if val_samples else data
    state = AdamState(model.params)
    rng = np.random.default_rng(config.seed)

    records: list[EpochRecord] = []
    best_rmse = np.inf
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(data)) if config.shuffle else np.arange(len(data))
        loss_sum = 0.0
        try:
            for lo in range(0, len(order), config.batch_size):
                batch = data.take(order[lo : lo + config.batch_size])
                pred, _ = model.forward_graph(batch.x, batch.ext, moran=batch.moran, variant=variant)
                loss = T.huber_loss(pred, T.Tensor(batch.target), config.huber_delta)
                T.backward(loss)
                # blocks bypassed by the variant never enter the graph, so
                # their parameters see a zero gradient and stay at init
                grads = {
                    name: t.grad if t.grad is not None else np.zeros_like(t.value)
                    for name, t in model.params.items()
                }
                adam_step(model.params, grads, state, config)
                loss_sum += float(loss.value) * len(batch)
            val_rmse = _validation_rmse(model, val, variant)
        except NonFiniteError as exc:
            raise DivergenceError(f"training diverged at epoch {epoch}: {exc}") from exc
        train_loss = loss_sum / len(data)
        if not np.isfinite(train_loss) or not np.isfinite(val_rmse):
            raise DivergenceError(f"training diverged at epoch {epoch}")
        records.append(EpochRecord(epoch, train_loss, val_rmse, time.perf_counter() - t0))
        if val_rmse < best_rmse:
            best_rmse = val_rmse
            if best_path is not None:
                model.save(best_path)
        if history_path is not None:
            TrainHistory(records).save(history_path)

    if checkpoint_path is not None:
        model.save(checkpoint_path)
    history = TrainHistory(records)
    if history_path is not None:
        history.save(history_path)
    return model, history
