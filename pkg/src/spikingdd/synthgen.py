"""Seeded two-class synthetic event streams standing in for recorded driver clips.

Every stream renders a bright Gaussian blob on a dark background and passes
the frames through :mod:`spikingdd.evsim`:

* class 0 ("focused"): the blob drifts slowly, bouncing off the borders.
* class 1 ("distracted"): the same drift plus periodic jitter bursts, short
  episodes of large random displacement that produce dense event bursts.

Poisson background events are mixed into both classes. Stream ``i`` draws
from ``np.random.default_rng([seed, i])`` so streams can be produced in any
order or in parallel without changing the output.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .events import EventStream, concat_streams, read_events, write_events
from .evsim import PixelSimulator, SimConfig


@dataclass(frozen=True)
class MotionProfile:
    slow_drift: float = 40.0  # px/s
    burst_rate_hz: float = 0.0
    burst_amplitude: float = 0.0  # px, std of per-frame displacement during a burst
    burst_ms: float = 8.0

    def __post_init__(self):
        if self.slow_drift < 0 or self.burst_rate_hz < 0 or self.burst_amplitude < 0 or self.burst_ms < 0:
            raise ConfigError("motion profile values must be non-negative")


FOCUSED = MotionProfile()
DISTRACTED = MotionProfile(burst_rate_hz=40.0, burst_amplitude=3.0)


@dataclass(frozen=True)
class SynthConfig:
    width: int = 640
    height: int = 480
    n_streams_per_class: int = 200
    stream_duration_us: int = 3_000_000
    class0: MotionProfile = FOCUSED
    class1: MotionProfile = DISTRACTED
    noise_rate: float = 0.1  # events / pixel / s
    fps: float = 500.0
    blob_sigma_frac: float = 0.06  # blob std as a fraction of the width
    background: float = 0.15
    foreground: float = 0.85
    contrast_threshold: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ConfigError("geometry must be positive")
        if self.n_streams_per_class < 0 or self.stream_duration_us <= 0:
            raise ConfigError("need n_streams_per_class >= 0 and stream_duration_us > 0")
        if self.noise_rate < 0:
            raise ConfigError("noise_rate must be >= 0")
        if not self.fps > 0 or not self.blob_sigma_frac > 0:
            raise ConfigError("fps and blob_sigma_frac must be positive")
        if not 0 <= self.background <= 1 or not 0 <= self.foreground <= 1:
            raise ConfigError("intensities must lie in [0, 1]")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown synth config keys: {sorted(unknown)}")
        for key in ("class0", "class1"):
            if key in d and isinstance(d[key], dict):
                try:
                    d[key] = MotionProfile(**d[key])
                except TypeError as exc:
                    raise ConfigError(str(exc)) from None
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class LabeledStream:
    stream: EventStream
    label: int
    source_id: str
    index: int


def _positions(profile: MotionProfile, cfg: SynthConfig, n_frames: int, rng: np.random.Generator) -> np.ndarray:
    """Blob centre per frame, ``(n_frames, 2)`` as (x, y)."""
    w, h = cfg.width, cfg.height
    dt = 1.0 / cfg.fps
    start = rng.uniform([0.3 * w, 0.3 * h], [0.7 * w, 0.7 * h])
    angle = rng.uniform(0, 2 * math.pi)
    vel = profile.slow_drift * np.array([math.cos(angle), math.sin(angle)])
    # reflect the straight-line path into the frame (triangle wave per axis)
    raw = start + np.arange(n_frames)[:, None] * dt * vel
    span = np.array([w - 1.0, h - 1.0])
    m = np.mod(raw, 2 * span)
    pos = np.where(m > span, 2 * span - m, m)

    if profile.burst_rate_hz > 0 and profile.burst_amplitude > 0:
        t = np.arange(n_frames) * dt
        period = 1.0 / profile.burst_rate_hz
        phase = rng.uniform(0, period)
        in_burst = np.mod(t - phase, period) < profile.burst_ms * 1e-3
        offsets = rng.normal(0.0, profile.burst_amplitude, size=(n_frames, 2))
        pos = pos + np.where(in_burst[:, None], offsets, 0.0)
    return pos


def _noise(cfg: SynthConfig, rng: np.random.Generator) -> EventStream:
    lam = cfg.noise_rate * cfg.width * cfg.height * cfg.stream_duration_us * 1e-6
    n = int(rng.poisson(lam)) if lam > 0 else 0
    t = np.sort(rng.integers(0, cfg.stream_duration_us, n))
    x = rng.integers(0, cfg.width, n)
    y = rng.integers(0, cfg.height, n)
    p = rng.integers(0, 2, n)
    return EventStream.from_arrays(cfg.width, cfg.height, t, x, y, p, cfg.stream_duration_us)


def generate_stream(cfg: SynthConfig, label: int, index: int) -> LabeledStream:
    """Render and simulate one stream; deterministic in ``(cfg.seed, index)``."""
    rng = np.random.default_rng([cfg.seed, index])
    profile = cfg.class1 if label else cfg.class0
    n_frames = int(math.floor(cfg.stream_duration_us * 1e-6 * cfg.fps)) + 1
    ts = np.round(np.arange(n_frames) * (1e6 / cfg.fps)).astype(np.int64)
    ts = ts[ts <= cfg.stream_duration_us]
    pos = _positions(profile, cfg, len(ts), rng)
    sigma = cfg.blob_sigma_frac * cfg.width
    xs = np.arange(cfg.width, dtype=np.float64)
    ys = np.arange(cfg.height, dtype=np.float64)
    amp = cfg.foreground - cfg.background

    def render(cx: float, cy: float) -> np.ndarray:
        gx = np.exp(-((xs - cx) ** 2) / (2 * sigma * sigma))
        gy = np.exp(-((ys - cy) ** 2) / (2 * sigma * sigma))
        return cfg.background + amp * np.outer(gy, gx)

    sim = PixelSimulator(render(*pos[0]), SimConfig(cfg.contrast_threshold), int(ts[0]))
    for (cx, cy), t in zip(pos[1:], ts[1:]):
        sim.feed(render(cx, cy), int(t))
    events = sim.stream(cfg.stream_duration_us)
    if cfg.noise_rate > 0:
        events = concat_streams([events, _noise(cfg, rng)])
    return LabeledStream(events, label, f"synth-{cfg.seed}-{index:05d}", index)


def generate(cfg: SynthConfig) -> list[LabeledStream]:
    """All streams, class 0 first; indices ``0..n-1`` are class 0, ``n..2n-1`` class 1."""
    n = cfg.n_streams_per_class
    return [generate_stream(cfg, int(i >= n), i) for i in range(2 * n)]


def write_dataset(cfg: SynthConfig, out_dir, streams: list[LabeledStream] | None = None) -> Path:
    """Write ``streams/*.bin`` plus ``manifest.json``; returns the manifest path."""
    out_dir = Path(out_dir)
    (out_dir / "streams").mkdir(parents=True, exist_ok=True)
    if streams is None:
        streams = generate(cfg)
    entries = []
    for ls in streams:
        rel = f"streams/{ls.index:05d}.bin"
        write_events(ls.stream, out_dir / rel, "bin")
        entries.append({"path": rel, "label": ls.label, "source_id": ls.source_id, "seed": [cfg.seed, ls.index]})
    manifest = {
        "config": cfg.to_dict(),
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "streams": entries,
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def read_dataset(directory) -> list[LabeledStream]:
    """Load a dataset written by :func:`write_dataset`."""
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.is_file():
        raise ConfigError(f"{directory}: no manifest.json")
    manifest = json.loads(manifest_path.read_text())
    out = []
    for i, entry in enumerate(manifest.get("streams", [])):
        path = directory / entry["path"]
        fmt = "bin" if path.suffix == ".bin" else "csv"
        out.append(LabeledStream(read_events(path, fmt), int(entry["label"]), entry.get("source_id", entry["path"]), i))
    return out
