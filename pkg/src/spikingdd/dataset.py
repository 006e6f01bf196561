"""Segment datasets with the pooling stage precomputed.

Pooling is parameter-free, so each segment is stored once as integer window
counts (``uint8``, at most ``k*k``) instead of a dense binary tensor. Dividing
by ``k*k`` recovers exactly what :func:`spikingdd.network.pool_forward` gives.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError
from .events import DEFAULT_DT_US, DEFAULT_SEGMENT_US, EventStream, Segment, iter_segment_windows
from .network import NetworkModel, pool_counts, pooled_hw


def window_counts(stream: EventStream, sl: slice, t0_us: int, dt_us: int, T: int, k: int) -> np.ndarray:
    """Pooled counts ``(T, 2*H'*W')`` of the binary spikes of one segment, straight from events."""
    ho, wo = pooled_hw(stream.height, stream.width, k)
    out = np.zeros(T * 2 * ho * wo, dtype=np.int32)
    if sl.stop > sl.start:
        tb = (stream.t[sl] - t0_us) // dt_us
        x, y, p = stream.x[sl].astype(np.int64), stream.y[sl].astype(np.int64), stream.p[sl].astype(np.int64)
        keep = x < wo * k
        tb, x, y, p = tb[keep], x[keep], y[keep], p[keep]
        # binarise: one hit per (bin, polarity, pixel)
        cell = np.unique(((tb * 2 + p) * stream.height + y) * stream.width + x)
        x = cell % stream.width
        rest = cell // stream.width
        y = rest % stream.height
        tc = rest // stream.height
        np.add.at(out, (tc * ho + y // k) * wo + x // k, 1)
    return out.reshape(T, 2 * ho * wo)


@dataclass
class FeatureSet:
    """Pooled segment inputs ``(N, T, F)`` with labels and source ids."""

    counts: np.ndarray
    labels: np.ndarray
    source_ids: np.ndarray
    kernel: int

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def T(self) -> int:
        return self.counts.shape[1]

    def features(self, idx=slice(None), dtype=np.float32) -> np.ndarray:
        k2 = self.kernel * self.kernel
        return (self.counts[idx] / k2).astype(dtype, copy=False)

    def subset(self, idx) -> "FeatureSet":
        idx = np.asarray(idx)
        return FeatureSet(self.counts[idx], self.labels[idx], self.source_ids[idx], self.kernel)

    @classmethod
    def from_segments(cls, model: NetworkModel, segments: Sequence[Segment]) -> "FeatureSet":
        k = model.pool_kernel
        if k is None:
            raise ConfigError("FeatureSet needs a model with a pooling layer")
        if not segments:
            return cls(np.zeros((0, 0, 0), np.uint8), np.zeros(0, np.int64), np.zeros(0, object), k)
        for seg in segments:
            if tuple(seg.spikes.shape[1:]) != model.input_geometry:
                raise ConfigError(f"segment geometry {seg.spikes.shape[1:]} != model {model.input_geometry}")
        counts = np.stack([pool_counts(seg.spikes, k).reshape(seg.spikes.T, -1) for seg in segments])
        return cls(
            counts.astype(np.uint8),
            np.array([seg.label for seg in segments], dtype=np.int64),
            np.array([seg.source_id for seg in segments], dtype=object),
            k,
        )

    @classmethod
    def from_streams(
        cls,
        model: NetworkModel,
        streams: Sequence,
        segment_us: int = DEFAULT_SEGMENT_US,
        dt_us: int = DEFAULT_DT_US,
    ) -> "FeatureSet":
        """Segment and pool labelled streams (objects with ``stream``, ``label``, ``source_id``)."""
        k = model.pool_kernel
        if k is None:
            raise ConfigError("FeatureSet needs a model with a pooling layer")
        T = segment_us // dt_us
        counts, labels, ids = [], [], []
        for ls in streams:
            st = ls.stream
            if (2, st.height, st.width) != model.input_geometry:
                raise ConfigError(f"stream geometry {st.width}x{st.height} does not match model {model.input_geometry}")
            for t0, sl in iter_segment_windows(st, segment_us, dt_us):
                counts.append(window_counts(st, sl, t0, dt_us, T, k).astype(np.uint8))
                labels.append(ls.label)
                ids.append(ls.source_id)
        F = 2 * int(np.prod(pooled_hw(model.input_geometry[1], model.input_geometry[2], k)))
        arr = np.stack(counts) if counts else np.zeros((0, T, F), np.uint8)
        return cls(arr, np.array(labels, dtype=np.int64), np.array(ids, dtype=object), k)


def as_feature_set(model: NetworkModel, data) -> FeatureSet:
    if isinstance(data, FeatureSet):
        return data
    return FeatureSet.from_segments(model, list(data))


def split_by_source(
    source_ids: Sequence[str], fractions=(0.70, 0.15, 0.15), seed: int = 0
) -> tuple[np.ndarray, ...]:
    """Index arrays for each split; all segments of one source land in the same split."""
    if abs(sum(fractions) - 1.0) > 1e-9 or any(f < 0 for f in fractions):
        raise ConfigError(f"split fractions must be non-negative and sum to 1, got {fractions}")
    ids = np.asarray(source_ids, dtype=object)
    uniq = sorted(set(ids.tolist()))
    order = np.random.default_rng(seed).permutation(len(uniq))
    bounds = np.round(np.cumsum(fractions) * len(uniq)).astype(int)
    group = np.empty(len(uniq), dtype=np.int64)
    start = 0
    for g, stop in enumerate(bounds):
        group[order[start:stop]] = g
        start = stop
    lookup = dict(zip(uniq, group.tolist()))
    assign = np.array([lookup[s] for s in ids.tolist()], dtype=np.int64)
    return tuple(np.flatnonzero(assign == g) for g in range(len(fractions)))


def stratified_split_by_source(source_ids, labels, fractions=(0.70, 0.15, 0.15), seed: int = 0):
    """Like :func:`split_by_source` but splits each class separately to keep the balance."""
    labels = np.asarray(labels)
    ids = np.asarray(source_ids, dtype=object)
    parts: list[list[np.ndarray]] = [[] for _ in fractions]
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        for g, idx in enumerate(split_by_source(ids[members], fractions, seed + int(c))):
            parts[g].append(members[idx])
    return tuple(np.sort(np.concatenate(p)) for p in parts)

