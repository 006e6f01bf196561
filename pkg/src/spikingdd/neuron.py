"""Leaky integrate-and-fire dynamics with hard reset and a triangular surrogate derivative.

Two variants share one parameter set:

* ``single`` -- one state, ``v[t] = (1 - voltage_decay) * v[t-1] + x[t]``.
* ``cuba``   -- current-based: the input charges a leaky synaptic current ``u``
  which in turn drives ``v``.

In both, a neuron spikes when ``v >= threshold`` and ``v`` (never ``u``) is then
multiplied by ``1 - s``. All functions are pure and broadcast over leading
batch dimensions; the neuron axis is last.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError

SINGLE = "single"
CUBA = "cuba"

# Published surrogate hyperparameters are quoted in the units of the training
# framework they were tuned in, which stretches the width and shrinks the peak
# by these factors before use.
TAU_GRAD_MULT = 100.0
SCALE_GRAD_MULT = 0.1


@dataclass(frozen=True)
class LifParams:
    threshold: float = 1.25
    voltage_decay: float = 0.03
    current_decay: float = 0.25
    tau_grad: float = 0.03
    scale_grad: float = 3.0
    mode: str = CUBA

    def __post_init__(self):
        if not self.threshold > 0:
            raise ConfigError(f"threshold must be > 0, got {self.threshold}")
        for name in ("voltage_decay", "current_decay"):
            val = getattr(self, name)
            if not 0.0 <= val <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {val}")
        if not self.tau_grad > 0 or not self.scale_grad > 0:
            raise ConfigError("tau_grad and scale_grad must be positive")
        if self.mode not in (SINGLE, CUBA):
            raise ConfigError(f"unknown neuron mode {self.mode!r}")

    @classmethod
    def from_framework(cls, tau_rho: float = 0.03, scale_rho: float = 3.0, **kwargs) -> "LifParams":
        """Build params from framework-style surrogate settings.

        >>> p = LifParams.from_framework(0.03, 3.0)
        >>> p.tau_grad, p.scale_grad
        (3.0, 0.3)
        """
        # rounding keeps 3 * 0.1 from printing as 0.30000000000000004
        tau, scale = round(tau_rho * TAU_GRAD_MULT, 12), round(scale_rho * SCALE_GRAD_MULT, 12)
        return cls(tau_grad=tau, scale_grad=scale, **kwargs)


@dataclass(frozen=True)
class LifState:
    u: np.ndarray
    v: np.ndarray

    @classmethod
    def zeros(cls, shape, dtype=np.float64) -> "LifState":
        return cls(np.zeros(shape, dtype=dtype), np.zeros(shape, dtype=dtype))


@dataclass(frozen=True)
class SpikeRecord:
    """Per-timestep outputs of a LIF population, time on axis ``-2``.

    ``s`` holds the spikes, ``v_pre_reset`` the membrane potential before reset
    and ``u`` the synaptic current (equal to the input drive in single mode).
    """

    s: np.ndarray
    v_pre_reset: np.ndarray
    u: np.ndarray | None = None

    @property
    def T(self) -> int:
        return self.s.shape[-2]


def lif_step(state: LifState, x: np.ndarray, params: LifParams):
    """Advance one timestep.

    Returns:
        ``(new_state, spikes, v_pre_reset)``; spikes share the dtype of ``x``.
    """
    x = np.asarray(x)
    if state.v.shape != x.shape or state.u.shape != x.shape:
        raise ShapeError(f"state {state.v.shape} and input {x.shape} disagree")
    if params.mode == CUBA:
        u = (1.0 - params.current_decay) * state.u + x
        v = (1.0 - params.voltage_decay) * state.v + u
    else:
        u = state.u
        v = (1.0 - params.voltage_decay) * state.v + x
    s = (v >= params.threshold).astype(x.dtype if x.dtype.kind == "f" else np.float64)
    return LifState(u, v * (1.0 - s)), s, v


def lif_run(x_seq: np.ndarray, params: LifParams, initial: LifState | None = None) -> SpikeRecord:
    """Run ``T`` steps over ``x_seq`` of shape ``(..., T, N)``."""
    x_seq = np.asarray(x_seq)
    if x_seq.ndim < 2:
        raise ShapeError(f"x_seq must be (..., T, N), got {x_seq.shape}")
    if x_seq.dtype.kind != "f":
        x_seq = x_seq.astype(np.float64)
    T = x_seq.shape[-2]
    step_shape = x_seq.shape[:-2] + x_seq.shape[-1:]
    state = LifState.zeros(step_shape, x_seq.dtype) if initial is None else initial
    s_out = np.empty_like(x_seq)
    v_out = np.empty_like(x_seq)
    u_out = np.empty_like(x_seq)
    for t in range(T):
        state, s, v = lif_step(state, x_seq[..., t, :], params)
        s_out[..., t, :] = s
        v_out[..., t, :] = v
        u_out[..., t, :] = state.u if params.mode == CUBA else x_seq[..., t, :]
    return SpikeRecord(s_out, v_out, u_out)


def surrogate_grad(v_pre_reset, params: LifParams) -> np.ndarray:
    """Triangular pseudo-derivative of the spike with respect to the potential."""
    v = np.asarray(v_pre_reset)
    return params.scale_grad * np.maximum(0.0, 1.0 - np.abs(v - params.threshold) / params.tau_grad)


def relaxed_spike(v_pre_reset, params: LifParams) -> np.ndarray:
    """Antiderivative of :func:`surrogate_grad`, zero below ``threshold - tau_grad``.

    Substituting this smooth ramp for the hard spike output yields a network
    whose exact gradient is what backpropagation with the surrogate computes;
    gradient checks use it as the differentiable reference.
    """
    v = np.asarray(v_pre_reset)
    tau, k = params.tau_grad, params.scale_grad
    d = np.clip(v - params.threshold, -tau, tau)
    lower = (d + tau) ** 2 / (2 * tau)
    upper = tau / 2 + d - d * d / (2 * tau)
    return k * np.where(d <= 0, lower, upper)
