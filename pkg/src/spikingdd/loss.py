"""Spike-rate loss, target construction and rate-based classification.

The loss is half the squared distance between output spike rates and a
per-class target vector (``r_true`` for the labelled class, ``r_false`` for the
rest). In moving-window mode the rate is re-measured over every length-``L``
window (stride 1) and the loss is averaged over windows.

Records may carry leading batch axes: spikes are ``(..., T, N)`` and
``label`` broadcasts against the batch shape.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .neuron import SpikeRecord

WHOLE_TRIAL = "whole_trial"
MOVING_WINDOW = "moving_window"


@dataclass(frozen=True)
class RateTarget:
    r_true: float = 0.2
    r_false: float = 0.03

    def __post_init__(self):
        if not (0.0 < self.r_true <= 1.0 and 0.0 <= self.r_false < 1.0 and self.r_true > self.r_false):
            raise ConfigError(f"need 0 <= r_false < r_true <= 1, got {self.r_false}, {self.r_true}")


@dataclass(frozen=True)
class LossConfig:
    mode: str = WHOLE_TRIAL
    window_len: int = 0
    target: RateTarget = field(default_factory=RateTarget)

    def __post_init__(self):
        if self.mode not in (WHOLE_TRIAL, MOVING_WINDOW):
            raise ConfigError(f"unknown loss mode {self.mode!r}")
        if self.mode == MOVING_WINDOW and self.window_len < 1:
            raise ConfigError("moving_window needs window_len >= 1")


def _spikes(record) -> np.ndarray:
    return record.s if isinstance(record, SpikeRecord) else np.asarray(record)


def target_rates(label, n_classes: int, target: RateTarget) -> np.ndarray:
    """Target vector(s): ``r_true`` at ``label``, ``r_false`` elsewhere."""
    label = np.asarray(label)
    if np.any(label < 0) or np.any(label >= n_classes):
        raise IndexError(f"label {label} out of range for {n_classes} classes")
    onehot = label[..., None] == np.arange(n_classes)
    return np.where(onehot, target.r_true, target.r_false)


def spike_rate(record) -> np.ndarray:
    """Mean spikes per timestep for each neuron."""
    s = _spikes(record)
    if s.shape[-2] == 0:
        raise ValueError("cannot take the rate of an empty record")
    return s.mean(axis=-2)


def window_rates(record, window_len: int) -> np.ndarray:
    """Rates over every stride-1 window of ``window_len`` steps: ``(..., T - L + 1, N)``."""
    s = _spikes(record)
    T = s.shape[-2]
    if not 1 <= window_len <= T:
        raise ConfigError(f"window_len {window_len} must lie in [1, {T}]")
    c = np.cumsum(s, axis=-2, dtype=np.float64)
    zero = np.zeros_like(c[..., :1, :])
    c = np.concatenate([zero, c], axis=-2)
    return (c[..., window_len:, :] - c[..., :-window_len, :]) / window_len


def rate_loss(rates: np.ndarray, target: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``0.5 * sum((r - target)^2)`` over the last axis, and its gradient."""
    resid = np.asarray(rates, dtype=np.float64) - target
    return 0.5 * np.sum(resid * resid, axis=-1), resid


def spike_rate_loss(record, label, cfg: LossConfig = LossConfig()):
    """Loss and ``dL/d(rate)``.

    Returns:
        ``(loss, grad)``. For ``whole_trial`` the gradient has shape ``(..., N)``;
        for ``moving_window`` it is ``(..., n_windows, N)`` with the
        ``1 / n_windows`` averaging already folded in.
    """
    s = _spikes(record)
    target = target_rates(label, s.shape[-1], cfg.target)
    if cfg.mode == WHOLE_TRIAL:
        return rate_loss(spike_rate(s), target)
    if cfg.window_len > s.shape[-2]:
        raise ConfigError(f"window_len {cfg.window_len} exceeds record length {s.shape[-2]}")
    r = window_rates(s, cfg.window_len)
    per_window, resid = rate_loss(r, target[..., None, :])
    n_windows = r.shape[-2]
    return per_window.mean(axis=-1), resid / n_windows


def spike_grad(grad: np.ndarray, T: int, cfg: LossConfig) -> np.ndarray:
    """Convert the loss gradient w.r.t. rates into ``dL/ds`` of shape ``(..., T, N)``."""
    grad = np.asarray(grad)
    if cfg.mode == WHOLE_TRIAL:
        return np.broadcast_to(grad[..., None, :] / T, (*grad.shape[:-1], T, grad.shape[-1])).copy()
    L = cfg.window_len
    # spike at t contributes 1/L to every window whose span [w, w+L) covers t
    c = np.cumsum(grad, axis=-2)
    zero = np.zeros_like(c[..., :1, :])
    c = np.concatenate([zero, c], axis=-2)
    n_windows = grad.shape[-2]
    t = np.arange(T)
    hi = np.minimum(t, n_windows - 1) + 1
    lo = np.maximum(t - L + 1, 0)
    return (c[..., hi, :] - c[..., lo, :]) / L


def classify(record) -> np.ndarray | int:
    """Index of the highest-rate output neuron; ties go to the lower index."""
    pred = np.argmax(spike_rate(record), axis=-1)
    return int(pred) if np.ndim(pred) == 0 else pred
