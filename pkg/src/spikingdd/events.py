"""Event-camera streams: file I/O, binary spike binning and fixed-length segmentation.

Events are held column-wise (one numpy array per field) so that binning a
stream of a few hundred thousand events stays a handful of vectorised calls.

Two on-disk formats are supported:

``csv``
    Header line ``W,H,duration_us`` followed by one ``t_us,x,y,p`` line per event.
``bin``
    Magic ``EVS1``, little-endian ``u32 W, u32 H, u64 duration_us, u64 count``,
    then packed 13-byte records ``u64 t_us, u16 x, u16 y, u8 p``.
"""

from __future__ import annotations

import io
import logging
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from .errors import BoundsError, ConfigError, ParseError

logger = logging.getLogger(__name__)

OFF, ON = 0, 1
DEFAULT_DT_US = 1000
DEFAULT_SEGMENT_US = 33_000

BIN_MAGIC = b"EVS1"
_BIN_HEADER = struct.Struct("<4sIIQQ")
_BIN_RECORD = np.dtype([("t", "<u8"), ("x", "<u2"), ("y", "<u2"), ("p", "u1")])
assert _BIN_RECORD.itemsize == 13


class Event(NamedTuple):
    t_us: int
    x: int
    y: int
    p: int


def _frozen(a: np.ndarray, dtype) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class EventStream:
    """An immutable, time-sorted sequence of DVS events.

    Attributes:
        width, height: Sensor geometry in pixels.
        t, x, y, p: Per-event columns (``int64``, ``int32``, ``int32``, ``uint8``).
        duration_us: Stream length; never smaller than the last timestamp.
        resorted: True when the source was not time-ordered and had to be sorted.
    """

    width: int
    height: int
    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    p: np.ndarray
    duration_us: int
    resorted: bool = field(default=False, compare=False)

    @classmethod
    def from_arrays(
        cls,
        width: int,
        height: int,
        t,
        x,
        y,
        p,
        duration_us: int | None = None,
        *,
        sort: bool = True,
    ) -> "EventStream":
        """Validate columns and build a stream, sorting by timestamp if needed.

        Sorting is stable, so events sharing a timestamp keep their input order.
        ``duration_us`` defaults to the last timestamp (0 for an empty stream).
        """
        t = np.asarray(t, dtype=np.int64).reshape(-1)
        x = np.asarray(x, dtype=np.int64).reshape(-1)
        y = np.asarray(y, dtype=np.int64).reshape(-1)
        p = np.asarray(p, dtype=np.int64).reshape(-1)
        if not (len(t) == len(x) == len(y) == len(p)):
            raise ConfigError("event columns differ in length")
        if width <= 0 or height <= 0:
            raise ConfigError(f"invalid geometry {width}x{height}")
        n = len(t)
        t_max = int(t.max()) if n else 0
        if duration_us is None:
            duration_us = t_max
        if n:
            if t.min() < 0:
                raise BoundsError("negative timestamp")
            if x.min() < 0 or x.max() >= width or y.min() < 0 or y.max() >= height:
                raise BoundsError(f"event coordinates outside {width}x{height}")
            if not np.isin(p, (OFF, ON)).all():
                raise ParseError("polarity must be 0 or 1")
        if duration_us < t_max:
            raise BoundsError(f"duration {duration_us} us precedes last event at {t_max} us")

        resorted = False
        if n > 1 and np.any(np.diff(t) < 0):
            if not sort:
                raise ConfigError("events are not sorted by timestamp")
            order = np.argsort(t, kind="stable")
            t, x, y, p = t[order], x[order], y[order], p[order]
            resorted = True
        return cls(
            int(width),
            int(height),
            _frozen(t, np.int64),
            _frozen(x, np.int32),
            _frozen(y, np.int32),
            _frozen(p, np.uint8),
            int(duration_us),
            resorted,
        )

    @classmethod
    def empty(cls, width: int, height: int, duration_us: int = 0) -> "EventStream":
        return cls.from_arrays(width, height, [], [], [], [], duration_us)

    @property
    def geometry(self) -> tuple[int, int]:
        return self.width, self.height

    def __len__(self) -> int:
        return len(self.t)

    def __iter__(self) -> Iterator[Event]:
        for row in zip(self.t.tolist(), self.x.tolist(), self.y.tolist(), self.p.tolist()):
            yield Event(*row)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, EventStream):
            return NotImplemented
        return (
            self.geometry == other.geometry
            and self.duration_us == other.duration_us
            and np.array_equal(self.t, other.t)
            and np.array_equal(self.x, other.x)
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.p, other.p)
        )

    __hash__ = None  # type: ignore[assignment]

    def window(self, start_us: int, stop_us: int) -> slice:
        """Index range of events with ``start_us <= t < stop_us``."""
        lo, hi = np.searchsorted(self.t, [start_us, stop_us], side="left")
        return slice(int(lo), int(hi))


@dataclass(frozen=True, eq=False)
class SpikeTensor:
    """Binary spike frames indexed ``[t, c, h, w]``; channel 0 is OFF, 1 is ON."""

    data: np.ndarray
    dt_us: int

    def __post_init__(self):
        if self.data.ndim != 4 or self.data.shape[1] != 2:
            raise ConfigError(f"spike tensor must be T x 2 x H x W, got {self.data.shape}")

    @property
    def T(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape


@dataclass(frozen=True)
class Segment:
    spikes: SpikeTensor
    label: int
    source_id: str


# ---------------------------------------------------------------- file I/O


def _check_format(fmt: str) -> str:
    if fmt not in ("csv", "bin"):
        raise ConfigError(f"unknown event format {fmt!r} (expected 'csv' or 'bin')")
    return fmt


def _parse_int_fields(line: str, n: int, lineno: int) -> list[int]:
    parts = line.rstrip("\r\n").split(",")
    if len(parts) != n:
        raise ParseError(f"expected {n} comma-separated integers, got {line.strip()!r}", lineno)
    try:
        return [int(s) for s in parts]
    except ValueError:
        raise ParseError(f"non-integer field in {line.strip()!r}", lineno) from None


def _read_csv(path: Path) -> EventStream:
    text = path.read_text()
    lines = text.splitlines()
    if not lines:
        raise ParseError("missing header", 1)
    width, height, duration = _parse_int_fields(lines[0], 3, 1)
    body = lines[1:]
    if body:
        try:
            rows = np.loadtxt(io.StringIO("\n".join(body)), delimiter=",", dtype=np.int64, ndmin=2)
            if rows.shape[1] != 4 or len(rows) != len(body):
                raise ValueError
        except ValueError:
            # slow path only to locate the offending line
            for i, line in enumerate(body, start=2):
                _parse_int_fields(line, 4, i)
            raise ParseError("unparseable event body") from None
        bad = np.flatnonzero(~np.isin(rows[:, 3], (OFF, ON)))
        if bad.size:
            raise ParseError("polarity must be 0 or 1", int(bad[0]) + 2)
        t, x, y, p = rows.T
    else:
        t = x = y = p = np.zeros(0, dtype=np.int64)
    return EventStream.from_arrays(width, height, t, x, y, p, duration)


def _read_bin(path: Path) -> EventStream:
    raw = path.read_bytes()
    if len(raw) < _BIN_HEADER.size:
        raise ParseError("truncated header")
    magic, width, height, duration, count = _BIN_HEADER.unpack_from(raw)
    if magic != BIN_MAGIC:
        raise ParseError(f"bad magic {magic!r}")
    expected = _BIN_HEADER.size + count * _BIN_RECORD.itemsize
    if len(raw) != expected:
        raise ParseError(f"expected {expected} bytes for {count} events, got {len(raw)}")
    rec = np.frombuffer(raw, dtype=_BIN_RECORD, count=count, offset=_BIN_HEADER.size)
    return EventStream.from_arrays(width, height, rec["t"], rec["x"], rec["y"], rec["p"], duration)


def read_events(path, format: str = "csv") -> EventStream:
    """Load an event file.

    Unsorted input is accepted: events are stably sorted, ``resorted`` is set
    on the result and a :class:`UserWarning` is emitted.

    Raises:
        ParseError: malformed line or record (carries the 1-based line number for csv).
        BoundsError: coordinates outside the header geometry.
    """
    path = Path(path)
    reader = _read_csv if _check_format(format) == "csv" else _read_bin
    stream = reader(path)
    if stream.resorted:
        msg = f"{path}: events were not time-ordered and have been sorted"
        warnings.warn(msg, stacklevel=2)
        logger.warning(msg)
    return stream


def write_events(stream: EventStream, path, format: str = "csv") -> None:
    path = Path(path)
    if _check_format(format) == "csv":
        buf = io.StringIO()
        buf.write(f"{stream.width},{stream.height},{stream.duration_us}\n")
        if len(stream):
            rows = np.column_stack([stream.t, stream.x, stream.y, stream.p.astype(np.int64)])
            np.savetxt(buf, rows, fmt="%d", delimiter=",")
        path.write_text(buf.getvalue())
    else:
        rec = np.empty(len(stream), dtype=_BIN_RECORD)
        rec["t"], rec["x"], rec["y"], rec["p"] = stream.t, stream.x, stream.y, stream.p
        header = _BIN_HEADER.pack(BIN_MAGIC, stream.width, stream.height, stream.duration_us, len(stream))
        path.write_bytes(header + rec.tobytes())


def format_from_suffix(path) -> str:
    return "bin" if Path(path).suffix.lower() in (".bin", ".evs") else "csv"


# ------------------------------------------------------------------ binning


def bin_to_spikes(stream: EventStream, dt_us: int = DEFAULT_DT_US, t0_us: int = 0, T: int = 33) -> SpikeTensor:
    """Scatter events in ``[t0_us, t0_us + T*dt_us)`` into a binary ``T x 2 x H x W`` tensor.

    Several events landing on the same (bin, polarity, pixel) still give 1.
    """
    if dt_us <= 0 or T <= 0 or t0_us < 0:
        raise ConfigError(f"need dt_us > 0, T > 0, t0_us >= 0 (got {dt_us}, {T}, {t0_us})")
    data = np.zeros((T, 2, stream.height, stream.width), dtype=np.uint8)
    sl = stream.window(t0_us, t0_us + T * dt_us)
    if sl.stop > sl.start:
        tb = (stream.t[sl] - t0_us) // dt_us
        data[tb, stream.p[sl], stream.y[sl], stream.x[sl]] = 1
    return SpikeTensor(data, dt_us)


def segment_stream(
    stream: EventStream,
    segment_us: int = DEFAULT_SEGMENT_US,
    dt_us: int = DEFAULT_DT_US,
    label: int = 0,
    source_id: str = "",
) -> list[Segment]:
    """Cut a stream into consecutive ``segment_us`` slices; a shorter tail is dropped."""
    if dt_us <= 0 or segment_us <= 0 or segment_us % dt_us:
        raise ConfigError(f"segment_us={segment_us} must be a positive multiple of dt_us={dt_us}")
    T = segment_us // dt_us
    n = stream.duration_us // segment_us
    return [
        Segment(bin_to_spikes(stream, dt_us, k * segment_us, T), label, source_id)
        for k in range(n)
    ]


def iter_segment_windows(stream: EventStream, segment_us: int, dt_us: int) -> Iterator[tuple[int, slice]]:
    """Yield ``(t0_us, event slice)`` per full segment without materialising tensors."""
    if dt_us <= 0 or segment_us <= 0 or segment_us % dt_us:
        raise ConfigError(f"segment_us={segment_us} must be a positive multiple of dt_us={dt_us}")
    for k in range(stream.duration_us // segment_us):
        t0 = k * segment_us
        yield t0, stream.window(t0, t0 + segment_us)


def concat_streams(streams: Sequence[EventStream]) -> EventStream:
    """Merge streams sharing one geometry into a single time-sorted stream."""
    if not streams:
        raise ConfigError("nothing to merge")
    w, h = streams[0].geometry
    if any(s.geometry != (w, h) for s in streams):
        raise ConfigError("cannot merge streams with different geometry")
    t = np.concatenate([s.t for s in streams])
    order = np.argsort(t, kind="stable")
    cols = [np.concatenate([getattr(s, f) for s in streams])[order] for f in "txyp"]
    return EventStream.from_arrays(w, h, *cols, max(s.duration_us for s in streams))
