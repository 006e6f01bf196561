"""Spiking-DD layer stack: average pooling, flattening and bias-free dense LIF layers.

Dense layers are feed-forward, so the synaptic drive of a whole layer over all
timesteps is one matrix product; only the neuron recurrence loops over time.
Backpropagation through time treats the reset factor ``1 - s`` as a constant
and routes spike gradients through :func:`~spikingdd.neuron.surrogate_grad`.

Arrays carry optional leading batch dimensions. Dense inputs and outputs are
``(..., T, units)``; spike tensors are ``(..., T, C, H, W)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import ConfigError, ShapeError
from .events import SpikeTensor
from .neuron import CUBA, LifParams, SpikeRecord, lif_run, relaxed_spike, surrogate_grad

POOL, FLATTEN, DENSE = "pool", "flatten", "dense"


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    kernel: int = 0
    in_units: int = 0
    out_units: int = 0
    neuron: LifParams | None = None
    dropout_p: float = 0.0

    def __post_init__(self):
        if self.kind == POOL:
            if self.kernel < 1:
                raise ConfigError(f"pool kernel must be >= 1, got {self.kernel}")
        elif self.kind == DENSE:
            if self.in_units <= 0 or self.out_units <= 0:
                raise ConfigError(f"dense units must be positive, got {self.in_units}->{self.out_units}")
            if self.neuron is None:
                raise ConfigError("dense layer needs neuron parameters")
            if not 0.0 <= self.dropout_p < 1.0:
                raise ConfigError(f"dropout_p must lie in [0, 1), got {self.dropout_p}")
        elif self.kind != FLATTEN:
            raise ConfigError(f"unknown layer kind {self.kind!r}")

    @classmethod
    def pool(cls, kernel: int) -> "LayerSpec":
        return cls(POOL, kernel=kernel)

    @classmethod
    def flatten(cls) -> "LayerSpec":
        return cls(FLATTEN)

    @classmethod
    def dense(cls, in_units: int, out_units: int, neuron: LifParams | None = None, dropout_p: float = 0.0):
        return cls(DENSE, in_units=in_units, out_units=out_units, neuron=neuron or default_neuron(), dropout_p=dropout_p)


def pooled_hw(height: int, width: int, k: int) -> tuple[int, int]:
    """Output size of the pool: rows are zero-padded up, columns truncated."""
    if k < 1:
        raise ConfigError(f"pool kernel must be >= 1, got {k}")
    ho, wo = -(-height // k), width // k
    if ho < 1 or wo < 1 or (k > height and k > width):
        raise ConfigError(f"pool kernel {k} too large for {height}x{width} input")
    return ho, wo


def pool_counts(spikes, k: int) -> np.ndarray:
    """Sum of each ``k x k`` window; integer counts for binary input."""
    data = spikes.data if isinstance(spikes, SpikeTensor) else np.asarray(spikes)
    *lead, h, w = data.shape
    ho, wo = pooled_hw(h, w, k)
    if ho * k > h:
        pad = np.zeros((*lead, ho * k - h, w), dtype=data.dtype)
        data = np.concatenate([data, pad], axis=-2)
    data = data[..., : wo * k]
    blocks = data.reshape(*lead, ho, k, wo, k)
    acc = np.int32 if data.dtype.kind in "biu" else None
    return blocks.sum(axis=(-3, -1), dtype=acc)


def pool_forward(spikes, k: int, dtype=np.float64) -> np.ndarray:
    """Non-overlapping ``k x k`` average pooling per timestep and channel."""
    return (pool_counts(spikes, k) / (k * k)).astype(dtype, copy=False)


def flatten(x: np.ndarray) -> np.ndarray:
    """Collapse the trailing ``(C, H, W)`` axes in row-major order."""
    x = np.asarray(x)
    return x.reshape(*x.shape[:-3], -1)


def unflatten(x: np.ndarray, chw: Sequence[int]) -> np.ndarray:
    x = np.asarray(x)
    return x.reshape(*x.shape[:-1], *chw)


@dataclass
class NetworkModel:
    """Ordered layer stack plus one ``out x in`` weight matrix per dense layer."""

    input_geometry: tuple[int, int, int]
    layers: list[LayerSpec]
    weights: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        self.input_geometry = tuple(int(d) for d in self.input_geometry)
        self.layers = list(self.layers)
        c, h, w = self.input_geometry
        shape: tuple[int, ...] = (c, h, w)
        seen_dense = 0
        for i, spec in enumerate(self.layers):
            if spec.kind == POOL:
                if len(shape) != 3:
                    raise ConfigError(f"layer {i}: pool needs a C x H x W input")
                shape = (shape[0], *pooled_hw(shape[1], shape[2], spec.kernel))
            elif spec.kind == FLATTEN:
                shape = (math.prod(shape),)
            else:
                if len(shape) != 1 or shape[0] != spec.in_units:
                    raise ConfigError(f"layer {i}: dense expects {spec.in_units} inputs, previous layer gives {shape}")
                shape = (spec.out_units,)
                seen_dense += 1
        if seen_dense and len(shape) != 1:
            raise ConfigError("model must end in a dense layer")
        dense = self.dense_layers
        if len(self.weights) != len(dense):
            raise ConfigError(f"{len(dense)} dense layers but {len(self.weights)} weight matrices")
        for spec, W in zip(dense, self.weights):
            if W.shape != (spec.out_units, spec.in_units):
                raise ShapeError(f"weight shape {W.shape} != {(spec.out_units, spec.in_units)}")

    @property
    def dense_layers(self) -> list[LayerSpec]:
        return [spec for spec in self.layers if spec.kind == DENSE]

    @property
    def n_outputs(self) -> int:
        return self.dense_layers[-1].out_units

    @property
    def dtype(self):
        return self.weights[0].dtype if self.weights else np.dtype(np.float64)

    @property
    def pool_kernel(self) -> int | None:
        return next((s.kernel for s in self.layers if s.kind == POOL), None)

    def feature_shape(self) -> tuple[int, ...]:
        """Shape right after pooling (``C x H' x W'``), or the raw input if there is no pool."""
        c, h, w = self.input_geometry
        k = self.pool_kernel
        return (c, h, w) if k is None else (c, *pooled_hw(h, w, k))

    def with_weights(self, weights: Sequence[np.ndarray]) -> "NetworkModel":
        return replace(self, weights=[np.array(W) for W in weights])

    def copy(self) -> "NetworkModel":
        return self.with_weights(self.weights)

    def chain(self) -> list[str]:
        parts = ["x".join(str(d) for d in self.input_geometry)]
        for spec in self.layers:
            if spec.kind == POOL:
                parts.append(f"pool{spec.kernel}")
            elif spec.kind == FLATTEN:
                parts.append("flatten")
            else:
                parts.append(f"dense {spec.in_units}->{spec.out_units}")
        return parts


def init_weights(layers: Sequence[LayerSpec], seed: int = 0, dtype=np.float32) -> list[np.ndarray]:
    """Uniform ``[-b, b]`` with ``b = sqrt(1 / in_units)`` per dense layer."""
    rng = np.random.default_rng(seed)
    out = []
    for spec in layers:
        if spec.kind == DENSE:
            b = math.sqrt(1.0 / spec.in_units)
            out.append(rng.uniform(-b, b, size=(spec.out_units, spec.in_units)).astype(dtype))
    return out


def build_model(
    layers: Sequence[LayerSpec],
    input_geometry: tuple[int, int, int],
    seed: int = 0,
    dtype=np.float32,
) -> NetworkModel:
    return NetworkModel(tuple(input_geometry), list(layers), init_weights(layers, seed, dtype))


def default_neuron() -> LifParams:
    """CUBA neuron with the published hyperparameters, surrogate converted to potential units."""
    return LifParams.from_framework(0.03, 3.0, threshold=1.25, current_decay=0.25, voltage_decay=0.03)


def spiking_dd(
    height: int = 480,
    width: int = 640,
    pool_kernel: int = 7,
    hidden: Sequence[int] = (32, 8),
    n_classes: int = 2,
    neuron: LifParams | None = None,
    dropout_p: float = 0.05,
    seed: int = 0,
    dtype=np.float32,
) -> NetworkModel:
    """The default architecture: pool, flatten, then dense ``features -> 32 -> 8 -> 2``.

    >>> spiking_dd().chain()
    ['2x480x640', 'pool7', 'flatten', 'dense 12558->32', 'dense 32->8', 'dense 8->2']
    """
    neuron = neuron or default_neuron()
    ho, wo = pooled_hw(height, width, pool_kernel)
    sizes = [2 * ho * wo, *hidden, n_classes]
    layers = [LayerSpec.pool(pool_kernel), LayerSpec.flatten()]
    layers += [LayerSpec.dense(a, b, neuron, dropout_p) for a, b in zip(sizes[:-1], sizes[1:])]
    return build_model(layers, (2, height, width), seed, dtype)


def count_params(model: NetworkModel) -> int:
    return sum(spec.in_units * spec.out_units for spec in model.dense_layers)


# ------------------------------------------------------------------ forward


@dataclass
class DenseTrace:
    inputs: np.ndarray  # dropout-scaled inputs, (..., T, in)
    record: SpikeRecord
    outputs: np.ndarray  # what the next layer sees: hard spikes, or relaxed ones
    scale: np.ndarray | None  # mask / (1 - p), broadcastable to inputs


@dataclass
class ForwardTrace:
    features: np.ndarray  # pooled + flattened input, (..., T, F)
    dense: list[DenseTrace]
    relaxed: bool = False

    @property
    def records(self) -> list[SpikeRecord]:
        return [d.record for d in self.dense]


def encode_input(model: NetworkModel, spikes) -> np.ndarray:
    """Run the parameter-free front (pool and flatten) on ``(..., T, C, H, W)`` spikes."""
    data = spikes.data if isinstance(spikes, SpikeTensor) else np.asarray(spikes)
    if data.ndim < 4 or tuple(data.shape[-3:]) != model.input_geometry:
        raise ShapeError(f"input {data.shape} does not match model geometry {model.input_geometry}")
    x = data
    for spec in model.layers:
        if spec.kind == POOL:
            x = pool_forward(x, spec.kernel, model.dtype)
        elif spec.kind == FLATTEN:
            x = flatten(x)
        else:
            break
    return np.asarray(x, dtype=model.dtype)


def dropout_masks(model: NetworkModel, batch_shape: tuple[int, ...], rng_seed: int) -> list[np.ndarray | None]:
    """One inverted-dropout scale per sample and dense layer, shared by all timesteps."""
    rng = np.random.default_rng(rng_seed)
    masks: list[np.ndarray | None] = []
    for spec in model.dense_layers:
        if spec.dropout_p > 0:
            keep = rng.random((*batch_shape, 1, spec.in_units)) >= spec.dropout_p
            masks.append((keep / (1.0 - spec.dropout_p)).astype(model.dtype))
        else:
            masks.append(None)
    return masks


def dense_forward(inputs, W, neuron: LifParams, dropout_mask=None, dropout_p: float = 0.0) -> SpikeRecord:
    """One dense LIF layer; ``dropout_mask`` is a binary keep-vector for the inputs."""
    inputs = np.asarray(inputs)
    if inputs.shape[-1] != W.shape[1]:
        raise ShapeError(f"inputs have {inputs.shape[-1]} units, weights expect {W.shape[1]}")
    if dropout_mask is not None:
        inputs = inputs * (np.asarray(dropout_mask) / (1.0 - dropout_p))
    return lif_run(inputs @ W.T, neuron)


def forward_features(
    model: NetworkModel,
    features: np.ndarray,
    training: bool = False,
    rng_seed: int = 0,
    relaxed: bool = False,
) -> tuple[SpikeRecord, ForwardTrace | None]:
    """Dense part of the forward pass on already pooled and flattened input.

    ``relaxed`` passes :func:`relaxed_spike` values downstream instead of hard
    spikes (the reset still uses hard spikes); used only for gradient checks.
    """
    x = np.asarray(features, dtype=model.dtype)
    masks = dropout_masks(model, x.shape[:-2], rng_seed) if training else [None] * len(model.weights)
    traces = []
    record = None
    for spec, W, scale in zip(model.dense_layers, model.weights, masks):
        if x.shape[-1] != spec.in_units:
            raise ShapeError(f"layer expects {spec.in_units} inputs, got {x.shape[-1]}")
        xin = x if scale is None else x * scale
        record = lif_run(xin @ W.T, spec.neuron)
        out = relaxed_spike(record.v_pre_reset, spec.neuron).astype(x.dtype) if relaxed else record.s
        if training:
            traces.append(DenseTrace(xin, record, out, scale))
        x = out
    if record is None:
        raise ConfigError("model has no dense layers")
    if relaxed:
        record = SpikeRecord(x, record.v_pre_reset, record.u)
    trace = ForwardTrace(np.asarray(features), traces, relaxed) if training else None
    return record, trace


def forward(model: NetworkModel, spikes, training: bool = False, rng_seed: int = 0, relaxed: bool = False):
    """Full pass: pool, flatten, dense layers.

    Returns ``(output_record, trace)``; ``trace`` is None unless ``training``.
    Dropout masks are active only when ``training`` is set.
    """
    return forward_features(model, encode_input(model, spikes), training, rng_seed, relaxed)


# ----------------------------------------------------------------- backward


def _dense_backward(spec: LifParams, tr: DenseTrace, g_out: np.ndarray) -> np.ndarray:
    """Gradient of the loss w.r.t. the layer's synaptic drive, same shape as ``g_out``."""
    rec = tr.record
    gs = g_out * surrogate_grad(rec.v_pre_reset, spec)
    keep = (1.0 - spec.voltage_decay) * (1.0 - rec.s)
    cu = 1.0 - spec.current_decay
    cuba = spec.mode == CUBA
    gx = np.empty_like(gs)
    gv = np.zeros_like(gs[..., 0, :])
    gu = np.zeros_like(gv)
    for t in range(gs.shape[-2] - 1, -1, -1):
        # v[t+1] sees v[t] only through the (detached) reset of step t
        gv = gs[..., t, :] + keep[..., t, :] * gv
        if cuba:
            gu = gv + cu * gu
            gx[..., t, :] = gu
        else:
            gx[..., t, :] = gv
    return gx


def spike_grad_from_rate(d_rate: np.ndarray, T: int) -> np.ndarray:
    """Spread ``dL/d(rate)`` of shape ``(..., N)`` evenly over ``T`` timesteps."""
    d_rate = np.asarray(d_rate)
    return np.broadcast_to(d_rate[..., None, :] / T, (*d_rate.shape[:-1], T, d_rate.shape[-1]))


def backward(model: NetworkModel, trace: ForwardTrace | None, d_rate=None, d_spikes=None) -> list[np.ndarray]:
    """Backpropagation through time.

    Pass either ``d_rate`` (``(..., n_out)``, gradient w.r.t. the output spike
    rates) or ``d_spikes`` (``(..., T, n_out)``, per-timestep). Gradients are
    summed over any batch dimensions.

    Returns:
        One gradient per dense weight matrix, shaped like the weights.
    """
    if trace is None or not trace.dense:
        raise ConfigError("backward needs the trace of a training-mode forward pass")
    T = trace.features.shape[-2]
    if (d_rate is None) == (d_spikes is None):
        raise ConfigError("pass exactly one of d_rate or d_spikes")
    g = spike_grad_from_rate(d_rate, T) if d_spikes is None else np.asarray(d_spikes)
    g = g.astype(model.dtype, copy=False)
    grads: list[np.ndarray] = [None] * len(model.weights)  # type: ignore[list-item]
    dense = model.dense_layers
    for i in range(len(dense) - 1, -1, -1):
        tr = trace.dense[i]
        if g.shape != tr.record.s.shape:
            raise ShapeError(f"gradient {g.shape} does not match layer output {tr.record.s.shape}")
        gx = _dense_backward(dense[i].neuron, tr, g)
        n_in = tr.inputs.shape[-1]
        grads[i] = gx.reshape(-1, gx.shape[-1]).T @ tr.inputs.reshape(-1, n_in)
        if i:
            g = gx @ model.weights[i]
            if tr.scale is not None:
                g = g * tr.scale
    return grads


def pool_backward(grad_pooled: np.ndarray, height: int, width: int, k: int) -> np.ndarray:
    """Distribute pooled gradients uniformly (``1/k^2``) back to input cells.

    Truncated columns and padded rows receive nothing.
    """
    g = np.asarray(grad_pooled) / (k * k)
    up = np.repeat(np.repeat(g, k, axis=-2), k, axis=-1)
    out = np.zeros((*g.shape[:-2], height, width), dtype=up.dtype)
    h = min(height, up.shape[-2])
    out[..., :h, : up.shape[-1]] = up[..., :h, :]
    return out
