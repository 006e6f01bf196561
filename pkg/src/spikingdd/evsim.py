"""Ideal DVS pixel model: contrast-threshold crossings of log intensity between frames.

Each pixel keeps a reference log intensity. When a new frame moves the pixel
``k`` whole thresholds away from its reference, ``k`` events of the matching
polarity are emitted at evenly spaced times inside the inter-frame interval and
the reference advances by ``k`` thresholds. No noise, leak or refractory
effects are modelled.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .events import OFF, ON, EventStream


@dataclass(frozen=True)
class SimConfig:
    contrast_threshold: float = 0.2
    eps: float = 1e-3

    def __post_init__(self):
        if not self.contrast_threshold > 0 or not self.eps > 0:
            raise ConfigError("contrast_threshold and eps must be positive")


@dataclass(frozen=True)
class FrameSequence:
    """Luminance frames in ``[0, 1]``, shape ``(N, H, W)``, sampled at ``fps``."""

    frames: np.ndarray
    fps: float

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim != 3:
            raise ConfigError(f"frames must be (N, H, W), got {frames.shape}")
        if not self.fps > 0:
            raise ConfigError(f"fps must be positive, got {self.fps}")
        object.__setattr__(self, "frames", frames)

    @property
    def timestamps_us(self) -> np.ndarray:
        return np.round(np.arange(len(self.frames)) * (1e6 / self.fps)).astype(np.int64)


class PixelSimulator:
    """Incremental form of :func:`simulate_events`, fed one frame at a time.

    Lets callers render frames lazily instead of holding a whole clip in memory.
    """

    def __init__(self, first_frame: np.ndarray, cfg: SimConfig = SimConfig(), t0_us: int = 0):
        first = np.asarray(first_frame, dtype=np.float64)
        if first.ndim != 2:
            raise ConfigError(f"frame must be H x W, got {first.shape}")
        self.cfg = cfg
        self.shape = first.shape
        self.ref = np.log(first + cfg.eps)
        self.t_us = int(t0_us)
        self._chunks: list[tuple[np.ndarray, ...]] = []

    def feed(self, frame: np.ndarray, t_us: int) -> int:
        """Compare ``frame`` (taken at ``t_us``) with the reference; returns events emitted."""
        frame = np.asarray(frame, dtype=np.float64)
        if frame.shape != self.shape:
            raise ConfigError(f"frame shape {frame.shape} != {self.shape}")
        if t_us <= self.t_us:
            raise ConfigError("frame timestamps must increase")
        thr = self.cfg.contrast_threshold
        diff = np.log(frame + self.cfg.eps) - self.ref
        k = np.floor(np.abs(diff) / thr).astype(np.int64)
        ys, xs = np.nonzero(k)
        t_prev, span = self.t_us, t_us - self.t_us
        self.t_us = t_us
        if ys.size == 0:
            return 0
        kk = k[ys, xs]
        if kk.max() > span:
            raise ConfigError(f"{kk.max()} events in a {span} us interval cannot get distinct timestamps")
        sign = np.sign(diff[ys, xs])
        self.ref[ys, xs] += sign * kk * thr
        # j-th of k events (j = 1..k) lands at t_prev + floor(j * span / k)
        rep = np.repeat(np.arange(ys.size), kk)
        j = np.arange(rep.size) - np.repeat(np.cumsum(kk) - kk, kk) + 1
        t = t_prev + (j * span) // kk[rep]
        p = np.where(sign[rep] > 0, ON, OFF)
        self._chunks.append((t, xs[rep], ys[rep], p))
        return int(rep.size)

    def stream(self, duration_us: int | None = None) -> EventStream:
        h, w = self.shape
        if self._chunks:
            t, x, y, p = (np.concatenate(c) for c in zip(*self._chunks))
        else:
            t = x = y = p = np.zeros(0, dtype=np.int64)
        # deterministic global order: time, then row, then column
        order = np.lexsort((x, y, t))
        dur = self.t_us if duration_us is None else duration_us
        return EventStream.from_arrays(w, h, t[order], x[order], y[order], p[order], dur)


def simulate_events(seq: FrameSequence, cfg: SimConfig = SimConfig()) -> EventStream:
    """Convert a frame sequence to a time-sorted event stream spanning the clip."""
    if len(seq.frames) < 2:
        raise ConfigError("need at least two frames to simulate events")
    ts = seq.timestamps_us
    sim = PixelSimulator(seq.frames[0], cfg, int(ts[0]))
    for frame, t in zip(seq.frames[1:], ts[1:]):
        sim.feed(frame, int(t))
    return sim.stream()


def read_pgm(path) -> np.ndarray:
    """Load a binary (P5) 8-bit PGM as floats in ``[0, 1]``."""
    from PIL import Image

    with Image.open(path) as img:
        if img.format != "PPM" or img.mode != "L":
            raise ConfigError(f"{path}: expected an 8-bit grayscale PGM")
        return np.asarray(img, dtype=np.float64) / 255.0


def write_pgm(frame: np.ndarray, path) -> None:
    from PIL import Image

    data = np.clip(np.round(np.asarray(frame) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data, mode="L").save(path, format="PPM")


def load_frame_dir(directory, fps: float) -> FrameSequence:
    """Read every ``*.pgm`` in ``directory`` in name order."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"{directory}: no such directory")
    paths = sorted(directory.glob("*.pgm"))
    if not paths:
        raise ConfigError(f"{directory}: no .pgm frames")
    return FrameSequence(np.stack([read_pgm(p) for p in paths]), fps)
