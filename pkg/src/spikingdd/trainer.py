"""Mini-batch surrogate-gradient training with Adam and a step learning-rate schedule."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .checkpoint import save_checkpoint
from .dataset import FeatureSet, as_feature_set
from .errors import ConfigError, TrainingError
from .loss import LossConfig, classify, spike_grad, spike_rate_loss
from .network import NetworkModel, backward, forward_features

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class OptimConfig:
    lr0: float = 0.1
    decay_factor: float = 0.1
    decay_every: int = 4
    epochs: int = 30
    batch_size: int = 16
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 10.0
    eval_batch_size: int = 256
    seed: int = 0

    def __post_init__(self):
        if not self.lr0 > 0 or not 0 < self.decay_factor < 1 or self.decay_every < 1:
            raise ConfigError("need lr0 > 0, 0 < decay_factor < 1, decay_every >= 1")
        if self.epochs < 0 or self.batch_size < 1 or self.eval_batch_size < 1:
            raise ConfigError("need epochs >= 0 and positive batch sizes")
        if not (0 < self.adam_beta1 < 1 and 0 < self.adam_beta2 < 1 and self.adam_eps > 0):
            raise ConfigError("invalid Adam hyperparameters")


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, weights: Sequence[np.ndarray]) -> "AdamState":
        return cls([np.zeros(w.shape) for w in weights], [np.zeros(w.shape) for w in weights], 0)


@dataclass
class EpochMetrics:
    epoch: int
    mean_loss: float
    accuracy: float
    lr: float
    wall_time_s: float
    val_loss: float = float("nan")
    train_accuracy: float = float("nan")

    def to_json(self, timing: bool = True) -> str:
        d = {k: (None if isinstance(v, float) and not math.isfinite(v) else v) for k, v in asdict(self).items()}
        if not timing:
            d.pop("wall_time_s")
        return json.dumps(d, sort_keys=True)


def lr_at(epoch: int, cfg: OptimConfig) -> float:
    """Step schedule, ``epoch`` counted from 0."""
    if epoch < 0:
        raise ConfigError("epoch must be >= 0")
    return cfg.lr0 * cfg.decay_factor ** (epoch // cfg.decay_every)


def adam_step(weights, grads, state: AdamState, lr: float, cfg: OptimConfig = OptimConfig()):
    """One bias-corrected Adam update.

    Moments are kept in float64; updated weights keep their own dtype.

    Returns:
        ``(new_weights, new_state)``; inputs are not modified.
    """
    if len(weights) != len(grads) or any(w.shape != g.shape for w, g in zip(weights, grads)):
        raise ConfigError("weights and gradients disagree in shape")
    if not all(np.all(np.isfinite(g)) for g in grads):
        raise TrainingError("non-finite gradient")
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    t = state.t + 1
    new_w, new_m, new_v = [], [], []
    for w, g, m, v in zip(weights, grads, state.m, state.v):
        g = np.asarray(g, dtype=np.float64)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        w2 = np.asarray(w, dtype=np.float64) - lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
        new_w.append(w2.astype(w.dtype))
        new_m.append(m)
        new_v.append(v)
    return new_w, AdamState(new_m, new_v, t)


def clip_by_global_norm(grads: Sequence[np.ndarray], max_norm: float) -> list[np.ndarray]:
    total = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads))
    if not math.isfinite(total):
        raise TrainingError("non-finite gradient norm")
    if max_norm > 0 and total > max_norm:
        return [g * (max_norm / total) for g in grads]
    return list(grads)


def batch_seed(seed: int, epoch: int, batch: int) -> int:
    return int(np.random.SeedSequence([seed, epoch, batch]).generate_state(1)[0])


def predict(model: NetworkModel, data: FeatureSet, loss_cfg: LossConfig | None = None, batch_size: int = 256):
    """Per-segment predictions, output rates and (if ``loss_cfg``) losses, dropout off."""
    preds, rates, losses = [], [], []
    for start in range(0, len(data), batch_size):
        idx = slice(start, start + batch_size)
        out, _ = forward_features(model, data.features(idx, model.dtype))
        preds.append(classify(out.s))
        rates.append(out.s.mean(axis=-2))
        if loss_cfg is not None:
            losses.append(spike_rate_loss(out.s, data.labels[idx], loss_cfg)[0])
    if not preds:
        return np.zeros(0, np.int64), np.zeros((0, model.n_outputs)), np.zeros(0)
    return np.concatenate(preds), np.concatenate(rates), (np.concatenate(losses) if losses else None)


def evaluate(model: NetworkModel, dataset, loss_cfg: LossConfig = LossConfig(), batch_size: int = 256) -> EpochMetrics:
    """Accuracy and mean loss over ``dataset`` with dropout disabled."""
    data = as_feature_set(model, dataset)
    if len(data) == 0:
        raise ConfigError("cannot evaluate on an empty dataset")
    t0 = time.perf_counter()
    preds, _, losses = predict(model, data, loss_cfg, batch_size)
    acc = float(np.mean(preds == data.labels))
    return EpochMetrics(0, float(np.mean(losses)), acc, 0.0, time.perf_counter() - t0, float(np.mean(losses)))


def train_step(model: NetworkModel, data: FeatureSet, idx: np.ndarray, loss_cfg: LossConfig, seed: int):
    """Forward + backward on one mini-batch; returns ``(mean_loss, n_correct, grads)``."""
    x = data.features(idx, model.dtype)
    labels = data.labels[idx]
    out, trace = forward_features(model, x, training=True, rng_seed=seed)
    loss, g_rate = spike_rate_loss(out.s, labels, loss_cfg)
    B = len(idx)
    g_s = spike_grad(g_rate, out.s.shape[-2], loss_cfg) / B
    grads = backward(model, trace, d_spikes=g_s)
    return float(np.mean(loss)), int(np.sum(classify(out.s) == labels)), grads


def write_metrics(metrics: Sequence[EpochMetrics], path, timing: bool = True) -> None:
    Path(path).write_text("".join(m.to_json(timing) + "\n" for m in metrics))


def read_metrics(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def train(
    model: NetworkModel,
    train_set,
    val_set,
    loss_cfg: LossConfig = LossConfig(),
    opt_cfg: OptimConfig = OptimConfig(),
    checkpoint_path=None,
    on_epoch: Callable[[EpochMetrics], None] | None = None,
) -> tuple[NetworkModel, list[EpochMetrics]]:
    """Train and return the best-validation-accuracy model with per-epoch metrics.

    ``mean_loss`` in the metrics is the training loss of the epoch; ``accuracy``
    and ``val_loss`` come from ``val_set``. Ties in validation accuracy keep the
    earlier epoch; without validation data the final epoch is returned. With
    ``checkpoint_path`` the best model is saved whenever it
    improves (and once up front, so the file exists even for zero epochs).
    """
    train_data = as_feature_set(model, train_set)
    val_data = as_feature_set(model, val_set)
    if len(train_data) == 0:
        raise ConfigError("empty training set")
    if train_data.counts.shape[-1] != model.dense_layers[0].in_units:
        raise ConfigError("training features do not match the model input")

    best = model.copy()
    if checkpoint_path is not None:
        save_checkpoint(best, checkpoint_path)
    best_acc = -1.0
    weights = [w.copy() for w in model.weights]
    state = AdamState.zeros_like(weights)
    metrics: list[EpochMetrics] = []
    rng = np.random.default_rng(opt_cfg.seed)

    for epoch in range(opt_cfg.epochs):
        t0 = time.perf_counter()
        lr = lr_at(epoch, opt_cfg)
        order = rng.permutation(len(train_data))
        total_loss, correct = 0.0, 0
        current = model.with_weights(weights)
        for b, start in enumerate(range(0, len(order), opt_cfg.batch_size)):
            idx = np.sort(order[start : start + opt_cfg.batch_size])
            loss, n_ok, grads = train_step(current, train_data, idx, loss_cfg, batch_seed(opt_cfg.seed, epoch, b))
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch + 1}, batch {b}")
            grads = clip_by_global_norm(grads, opt_cfg.clip_norm)
            weights, state = adam_step(weights, grads, state, lr, opt_cfg)
            current = model.with_weights(weights)
            total_loss += loss * len(idx)
            correct += n_ok
        current = model.with_weights(weights)
        if len(val_data):
            val = evaluate(current, val_data, loss_cfg, opt_cfg.eval_batch_size)
            acc, val_loss = val.accuracy, val.mean_loss
        else:
            acc, val_loss = float("nan"), float("nan")
        m = EpochMetrics(
            epoch + 1,
            total_loss / len(train_data),
            acc,
            lr,
            time.perf_counter() - t0,
            val_loss,
            correct / len(train_data),
        )
        metrics.append(m)
        logger.info(
            "epoch %d lr %.1e train loss %.5f acc %.4f | val loss %.5f acc %.4f",
            m.epoch, lr, m.mean_loss, m.train_accuracy, val_loss, acc,
        )
        if on_epoch is not None:
            on_epoch(m)
        if acc > best_acc or not len(val_data):
            best_acc = acc
            best = current.copy()
            if checkpoint_path is not None:
                save_checkpoint(best, checkpoint_path)
    return best, metrics
