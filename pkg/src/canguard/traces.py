"""Trace loading, labeling, and summary statistics.

Traces hold their frames in a column-oriented ``FrameBlock`` (numpy
arrays) so that million-line logs stay cheap to load, scan, and window;
``CanFrame`` objects are materialized lazily on iteration.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import re
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from . import _codec
from ._codec_py import FLAG_EXTENDED, FLAG_REMOTE, ParsedBlock
from .errors import DataFileError
from .frames import CanFrame

log = logging.getLogger(__name__)

UNKNOWN = "unknown"

DRIVER_LABEL_RE = re.compile(r"^(male|female)-(under30|30-55|over55|all-ages)-([1-9]\d*)$")

#: the 14 single-driver-trace labels plus the two mixed-trace-only drivers
DRIVER_ROSTER = frozenset(
    [
        "female-all-ages-1",
        "female-all-ages-2",
        "female-all-ages-3",
        "female-all-ages-4",
        "female-all-ages-5",
        "male-under30-1",
        "male-under30-2",
        "male-under30-3",
        "male-under30-4",
        "male-30-55-1",
        "male-30-55-2",
        "male-30-55-3",
        "male-30-55-4",
        "male-over55-1",
        "male-over55-2",
        "male-over55-3",
    ]
)


def is_valid_driver_label(label: str) -> bool:
    return label == UNKNOWN or DRIVER_LABEL_RE.match(label) is not None


def normalize_driver_label(text: str) -> str:
    """Map arbitrary text to a valid driver label, degrading to unknown."""
    text = text.strip().lower()
    return text if DRIVER_LABEL_RE.match(text) else UNKNOWN


class Device(str, Enum):
    CANEDGE2 = "canedge2"
    KVASER = "kvaser"
    USB2CAN = "usb2can"
    SYNTHETIC = "synthetic"


class RouteType(str, Enum):
    DAILY = "daily"
    FIXED = "fixed"
    MIXED = "mixed"
    UNKNOWN = "unknown"


@dataclass(frozen=True, slots=True)
class TraceMeta:
    driver_label: str = UNKNOWN
    vehicle: str = UNKNOWN
    device: Device | None = None
    route_type: RouteType = RouteType.UNKNOWN
    source_path: str = ""
    multi_channel: bool = False
    segments: tuple[str, ...] = ()

    def __post_init__(self):
        if not is_valid_driver_label(self.driver_label):
            raise ValueError(f"invalid driver label {self.driver_label!r}")
        if self.route_type is RouteType.MIXED and self.driver_label != UNKNOWN:
            raise ValueError("mixed-driver traces cannot carry a single driver label")


class FrameBlock:
    """Column store for a frame sequence (timestamps, ids, flags, payload)."""

    __slots__ = ("ts", "ids", "flags", "dlc", "payload", "chan", "channels")

    def __init__(self, ts, ids, flags, dlc, payload, chan, channels):
        self.ts = np.asarray(ts, dtype=np.float64)
        self.ids = np.asarray(ids, dtype=np.uint32)
        self.flags = np.asarray(flags, dtype=np.uint8)
        self.dlc = np.asarray(dlc, dtype=np.uint8)
        self.payload = np.asarray(payload, dtype=np.uint8).reshape(len(self.ts), 8)
        self.chan = np.asarray(chan, dtype=np.uint16)
        self.channels = list(channels)

    @classmethod
    def empty(cls) -> "FrameBlock":
        return cls(
            np.empty(0), np.empty(0, np.uint32), np.empty(0, np.uint8),
            np.empty(0, np.uint8), np.empty((0, 8), np.uint8), np.empty(0, np.uint16), [],
        )

    @classmethod
    def from_parsed(cls, parsed: ParsedBlock) -> "FrameBlock":
        return cls(parsed.ts, parsed.ids, parsed.flags, parsed.dlc,
                   parsed.payload, parsed.chan, parsed.channels)

    @classmethod
    def from_frames(cls, frames: Iterable[CanFrame]) -> "FrameBlock":
        frames = list(frames)
        n = len(frames)
        ts = np.empty(n)
        ids = np.empty(n, np.uint32)
        flags = np.zeros(n, np.uint8)
        dlc = np.zeros(n, np.uint8)
        payload = np.zeros((n, 8), np.uint8)
        chan = np.zeros(n, np.uint16)
        channels: list[str] = []
        index: dict[str, int] = {}
        for i, f in enumerate(frames):
            ts[i] = f.timestamp
            ids[i] = f.arb_id
            flags[i] = (FLAG_EXTENDED if f.is_extended else 0) | (FLAG_REMOTE if f.is_remote else 0)
            dlc[i] = len(f.data)
            payload[i, : len(f.data)] = list(f.data)
            idx = index.get(f.channel)
            if idx is None:
                idx = index[f.channel] = len(channels)
                channels.append(f.channel)
            chan[i] = idx
        return cls(ts, ids, flags, dlc, payload, chan, channels)

    def __len__(self) -> int:
        return len(self.ts)

    def frame(self, i: int) -> CanFrame:
        d = int(self.dlc[i])
        fl = int(self.flags[i])
        return CanFrame(
            timestamp=float(self.ts[i]),
            channel=self.channels[self.chan[i]] if self.channels else "can0",
            arb_id=int(self.ids[i]),
            data=bytes(self.payload[i, :d]),
            is_extended=bool(fl & FLAG_EXTENDED),
            is_remote=bool(fl & FLAG_REMOTE),
        )

    def __iter__(self) -> Iterator[CanFrame]:
        return (self.frame(i) for i in range(len(self)))

    def take(self, order) -> "FrameBlock":
        return FrameBlock(self.ts[order], self.ids[order], self.flags[order],
                          self.dlc[order], self.payload[order], self.chan[order], self.channels)

    def slice(self, i0: int, i1: int) -> "FrameBlock":
        return FrameBlock(self.ts[i0:i1], self.ids[i0:i1], self.flags[i0:i1],
                          self.dlc[i0:i1], self.payload[i0:i1], self.chan[i0:i1], self.channels)

    def sorted_by_time(self) -> "FrameBlock":
        if len(self) and np.any(np.diff(self.ts) < 0):
            return self.take(np.argsort(self.ts, kind="stable"))
        return self

    @staticmethod
    def concat(blocks: list["FrameBlock"]) -> "FrameBlock":
        blocks = [b for b in blocks if len(b)]
        if not blocks:
            return FrameBlock.empty()
        channels: list[str] = []
        index: dict[str, int] = {}
        chans = []
        for b in blocks:
            remap = np.zeros(max(len(b.channels), 1), np.uint16)
            for i, name in enumerate(b.channels):
                if name not in index:
                    index[name] = len(channels)
                    channels.append(name)
                remap[i] = index[name]
            chans.append(remap[b.chan])
        return FrameBlock(
            np.concatenate([b.ts for b in blocks]),
            np.concatenate([b.ids for b in blocks]),
            np.concatenate([b.flags for b in blocks]),
            np.concatenate([b.dlc for b in blocks]),
            np.concatenate([b.payload for b in blocks]),
            np.concatenate(chans),
            channels,
        )

    def to_candump_text(self) -> bytes:
        return _codec.impl.format_block(self.ts, self.chan, self.channels,
                                        self.ids, self.flags, self.dlc, self.payload)

    def id_texts(self) -> np.ndarray:
        """Canonical per-frame hex ID strings (3 digits std, 8 extended)."""
        return np.array([id_text(int(i), bool(f & FLAG_EXTENDED))
                         for i, f in zip(self.ids, self.flags)])


def id_text(arb_id: int, is_extended: bool = False) -> str:
    return f"{arb_id:08X}" if is_extended else f"{arb_id:03X}"


@dataclass(frozen=True)
class Trace:
    meta: TraceMeta
    block: FrameBlock
    parse_errors: tuple[tuple[int, int, str, str], ...] = ()

    def __post_init__(self):
        if len(self.block) and np.any(np.diff(self.block.ts) < 0):
            raise ValueError("trace timestamps must be non-decreasing")
        if len(self.block.channels) > 1 and not self.meta.multi_channel:
            raise ValueError("multiple channels present but meta.multi_channel is not set")

    def __len__(self) -> int:
        return len(self.block)

    def __iter__(self) -> Iterator[CanFrame]:
        return iter(self.block)

    @property
    def frames(self) -> list[CanFrame]:
        return list(self.block)

    @classmethod
    def from_frames(cls, frames: Iterable[CanFrame], meta: TraceMeta | None = None) -> "Trace":
        block = FrameBlock.from_frames(frames).sorted_by_time()
        meta = meta or TraceMeta()
        if len(block.channels) > 1:
            meta = replace(meta, multi_channel=True)
        return cls(meta, block)


# --- loading and writing ---

CSV_COLUMNS = ("timestamp", "arbitration_id", "dlc", "data")


def _sidecar_path(path: Path) -> Path:
    return path.with_name(path.name + ".meta.json")


def save_sidecar(meta: TraceMeta, trace_path: str | Path) -> Path:
    """Persist labels next to a trace file (candump logs carry none)."""
    path = _sidecar_path(Path(trace_path))
    record = {
        "driver_label": meta.driver_label,
        "vehicle": meta.vehicle,
        "device": meta.device.value if meta.device else None,
        "route_type": meta.route_type.value,
    }
    path.write_text(json.dumps(record, sort_keys=True) + "\n")
    return path


def _load_sidecar(path: Path) -> TraceMeta | None:
    sidecar = _sidecar_path(path)
    if not sidecar.exists():
        return None
    try:
        raw = json.loads(sidecar.read_text())
        return TraceMeta(
            driver_label=raw.get("driver_label", UNKNOWN),
            vehicle=raw.get("vehicle", UNKNOWN),
            device=Device(raw["device"]) if raw.get("device") else None,
            route_type=RouteType(raw.get("route_type", "unknown")),
        )
    except (ValueError, KeyError) as e:
        log.warning("ignoring malformed sidecar %s: %s", sidecar, e)
        return None


def _merge_meta(explicit: TraceMeta | None, sidecar: TraceMeta | None) -> TraceMeta:
    if sidecar is None:
        return explicit or TraceMeta()
    if explicit is None:
        return sidecar
    return TraceMeta(
        driver_label=explicit.driver_label if explicit.driver_label != UNKNOWN else sidecar.driver_label,
        vehicle=explicit.vehicle if explicit.vehicle != UNKNOWN else sidecar.vehicle,
        device=explicit.device or sidecar.device,
        route_type=explicit.route_type if explicit.route_type is not RouteType.UNKNOWN else sidecar.route_type,
        multi_channel=explicit.multi_channel,
        segments=explicit.segments,
    )


def load_trace(
    path: str | Path,
    format: str = "auto",
    meta: TraceMeta | None = None,
    *,
    malformed_limit: float = 0.01,
    csv_columns: dict[str, str] | None = None,
) -> Trace:
    """Load a .log or .csv trace, sorting frames by timestamp (stable).

    Aborts with DataFileError if more than ``malformed_limit`` of the
    non-blank lines fail to parse; otherwise the errors are logged and
    kept on the Trace.
    """
    path = Path(path)
    if format == "auto":
        format = "csv" if path.suffix.lower() == ".csv" else "log"
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise DataFileError(f"cannot read {path}: {e}") from e

    if format == "log":
        parsed = _codec.impl.parse_block(raw)
        block = FrameBlock.from_parsed(parsed)
        errors = list(parsed.errors)
        total = len(block) + len(errors)
    elif format == "csv":
        block, errors, total = _parse_csv(raw, csv_columns)
    else:
        raise DataFileError(f"unknown trace format {format!r}")

    if errors:
        for lno, col, kind, msg in errors[:10]:
            log.warning("%s:%d:%d: %s (%s)", path, lno, col, msg, kind)
        if total and len(errors) / total > malformed_limit:
            raise DataFileError(
                f"{path}: {len(errors)}/{total} lines malformed "
                f"(limit {malformed_limit:.1%}); first: line {errors[0][0]}: {errors[0][3]}"
            )

    meta = _merge_meta(meta, _load_sidecar(path))
    meta = replace(meta, source_path=str(path))
    if len(block.channels) > 1 and not meta.multi_channel:
        meta = replace(meta, multi_channel=True)
    return Trace(meta, block.sorted_by_time(), tuple(errors))


def load_trip(paths: list[str | Path], meta: TraceMeta | None = None,
              *, max_gap: float = 5.0, **kw) -> Trace:
    """Load a multi-file trip in filename order, verifying timestamp continuity."""
    paths = sorted(Path(p) for p in paths)
    parts = [load_trace(p, meta=meta, **kw) for p in paths]
    for prev, cur in zip(parts, parts[1:]):
        if not len(prev.block) or not len(cur.block):
            continue
        gap = cur.block.ts[0] - prev.block.ts[-1]
        if gap < 0 or gap >= max_gap:
            raise DataFileError(
                f"segment {cur.meta.source_path} is not continuous with its predecessor "
                f"(gap {gap:.3f} s, limit {max_gap} s)"
            )
    block = FrameBlock.concat([p.block for p in parts])
    meta = (meta or TraceMeta())
    meta = replace(meta, source_path=str(paths[0].parent),
                   segments=tuple(str(p) for p in paths),
                   multi_channel=len(block.channels) > 1)
    errors = tuple(e for p in parts for e in p.parse_errors)
    return Trace(meta, block.sorted_by_time(), errors)


def _parse_csv(raw: bytes, columns: dict[str, str] | None):
    names = dict(zip(CSV_COLUMNS, CSV_COLUMNS))
    if columns:
        names.update(columns)
    text = raw.decode("utf-8", "replace")
    reader = csv.reader(io.StringIO(text))
    rows = list(reader)
    frames: list[CanFrame] = []
    errors: list[tuple[int, int, str, str]] = []
    start = 0
    idx = {c: i for i, c in enumerate(CSV_COLUMNS)}
    if rows and rows[0] and not _is_float(rows[0][0]):
        header = [h.strip() for h in rows[0]]
        try:
            idx = {c: header.index(names[c]) for c in CSV_COLUMNS}
        except ValueError as e:
            raise DataFileError(f"csv header missing required column: {e}") from e
        start = 1

    total = 0
    for lno, row in enumerate(rows[start:], start=start + 1):
        if not row or all(not c.strip() for c in row):
            continue
        total += 1
        try:
            frames.append(_csv_row_frame(row, idx))
        except (ValueError, IndexError) as e:
            errors.append((lno, 1, "malformed", str(e)))
    return FrameBlock.from_frames(frames), errors, total


def _csv_row_frame(row, idx) -> CanFrame:
    ts = float(row[idx["timestamp"]])
    id_field = row[idx["arbitration_id"]].strip()
    if not re.fullmatch(r"[0-9A-Fa-f]{1,8}", id_field):
        raise ValueError(f"bad arbitration id {id_field!r}")
    data_field = row[idx["data"]].strip()
    is_remote = data_field.upper() == "R"
    data = b"" if is_remote else bytes.fromhex(data_field)
    dlc = int(row[idx["dlc"]])
    if not is_remote and dlc != len(data):
        raise ValueError(f"dlc {dlc} does not match {len(data)} data bytes")
    return CanFrame(
        timestamp=ts,
        channel="can0",
        arb_id=int(id_field, 16),
        data=data,
        is_extended=len(id_field) == 8,
        is_remote=is_remote,
    )


def _is_float(s: str) -> bool:
    try:
        float(s)
        return True
    except ValueError:
        return False


def rebase(trace: Trace, start: float = 0.0) -> Trace:
    """Shift timestamps so the trace begins at ``start`` (bus-time replay)."""
    b = trace.block
    if not len(b):
        return trace
    shifted = FrameBlock(b.ts - b.ts[0] + start, b.ids, b.flags, b.dlc,
                         b.payload, b.chan, b.channels)
    return Trace(trace.meta, shifted, trace.parse_errors)


def write_trace(trace: Trace, path: str | Path, format: str = "auto") -> None:
    path = Path(path)
    if format == "auto":
        format = "csv" if path.suffix.lower() == ".csv" else "log"
    if format == "log":
        path.write_bytes(trace.block.to_candump_text())
    elif format == "csv":
        b = trace.block
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_COLUMNS)
            for i in range(len(b)):
                d = int(b.dlc[i])
                remote = bool(b.flags[i] & FLAG_REMOTE)
                us = round(float(b.ts[i]) * 1e6)
                w.writerow([
                    f"{us // 1_000_000}.{us % 1_000_000:06d}",
                    id_text(int(b.ids[i]), bool(b.flags[i] & FLAG_EXTENDED)),
                    d,
                    "R" if remote else bytes(b.payload[i, :d]).hex().upper(),
                ])
    else:
        raise DataFileError(f"unknown trace format {format!r}")


# --- statistics ---

@dataclass(frozen=True)
class IdStats:
    count: int
    iat_mean: float
    iat_std: float
    byte_change_rate: tuple[float, ...]


@dataclass(frozen=True)
class TraceStats:
    duration: float
    frame_count: int
    mean_rate: float | None
    unique_ids: int
    per_id: dict[str, IdStats]
    empty: bool = False

    def to_record(self) -> dict:
        return {
            "duration": self.duration,
            "frame_count": self.frame_count,
            "mean_rate": self.mean_rate,
            "unique_ids": self.unique_ids,
            "empty": self.empty,
            "per_id": {
                k: {
                    "count": v.count,
                    "iat_mean": v.iat_mean,
                    "iat_std": v.iat_std,
                    "byte_change_rate": list(v.byte_change_rate),
                }
                for k, v in self.per_id.items()
            },
        }


def compute_stats(trace: Trace) -> TraceStats:
    """Deterministic whole-trace statistics; empty traces yield zeroed stats."""
    b = trace.block
    n = len(b)
    if n == 0:
        return TraceStats(0.0, 0, None, 0, {}, empty=True)
    duration = float(b.ts[-1] - b.ts[0])
    rate = (n - 1) / duration if n >= 2 and duration > 0 else None

    # group frames by (id, extended flag); ts is already sorted so a stable
    # sort on ids keeps per-id arrival order
    keys = b.ids.astype(np.uint64) | (np.uint64(1) << np.uint64(32)) * (b.flags & FLAG_EXTENDED)
    order = np.argsort(keys, kind="stable")
    sorted_keys = keys[order]
    starts = np.flatnonzero(np.r_[True, sorted_keys[1:] != sorted_keys[:-1]])
    bounds = np.r_[starts, n]

    per_id: dict[str, IdStats] = {}
    for g in range(len(starts)):
        i0, i1 = bounds[g], bounds[g + 1]
        idxs = order[i0:i1]
        count = i1 - i0
        t = b.ts[idxs]
        if count >= 2:
            iat = np.diff(t)
            iat_mean, iat_std = float(iat.mean()), float(iat.std())
        else:
            iat_mean = iat_std = 0.0
        max_dlc = int(b.dlc[idxs].max())
        if count >= 2 and max_dlc:
            pay = b.payload[idxs, :max_dlc]
            changes = (pay[1:] != pay[:-1]).mean(axis=0)
            change_rate = tuple(float(c) for c in changes)
        else:
            change_rate = tuple(0.0 for _ in range(max_dlc))
        first = int(idxs[0])
        key = id_text(int(b.ids[first]), bool(b.flags[first] & FLAG_EXTENDED))
        per_id[key] = IdStats(int(count), iat_mean, iat_std, change_rate)

    return TraceStats(duration, n, rate, len(per_id), per_id)


def stats_table(stats: TraceStats, name: str = "") -> str:
    """Human-readable summary table, one row per arbitration ID."""
    head = (
        f"trace: {name}\n"
        f"frames: {stats.frame_count}  duration: {stats.duration:.6f} s  "
        f"mean rate: {('%.1f Hz' % stats.mean_rate) if stats.mean_rate is not None else 'undefined'}  "
        f"unique ids: {stats.unique_ids}\n"
    )
    lines = [head, f"{'id':>8} {'count':>9} {'iat mean':>10} {'iat std':>10}  byte change rates"]
    for key in sorted(stats.per_id):
        s = stats.per_id[key]
        rates = " ".join(f"{r:.2f}" for r in s.byte_change_rate)
        lines.append(f"{key:>8} {s.count:>9} {s.iat_mean:>10.6f} {s.iat_std:>10.6f}  {rates}")
    return "\n".join(lines) + "\n"


# --- dataset scanning ---

TRACE_SUFFIXES = {".log", ".csv"}
_DEVICE_NAMES = {d.value: d for d in Device}
_ROUTE_NAMES = {"daily": RouteType.DAILY, "fixed": RouteType.FIXED, "mixed": RouteType.MIXED}


def scan_dataset(root: str | Path) -> list[TraceMeta]:
    """Walk a dataset tree and build one TraceMeta per trace file or trip folder.

    Driver, vehicle, device, and route type are inferred from directory
    names when they match the label taxonomy; anything else degrades to
    unknown. A folder holding multiple segment files for one trip becomes
    a single multi-segment entry.
    """
    root = Path(root)
    metas: list[TraceMeta] = []
    if not root.exists():
        return metas

    def classify(parts: tuple[str, ...]):
        driver, vehicle, device, route = UNKNOWN, UNKNOWN, None, RouteType.UNKNOWN
        for part in parts:
            low = part.lower()
            if DRIVER_LABEL_RE.match(low):
                driver = low
            elif low in _DEVICE_NAMES:
                device = _DEVICE_NAMES[low]
            elif low in _ROUTE_NAMES:
                route = _ROUTE_NAMES[low]
            elif vehicle == UNKNOWN:
                vehicle = low
        if route is RouteType.MIXED:
            driver = UNKNOWN
        return driver, vehicle, device, route

    def walk(d: Path, parts: tuple[str, ...]):
        files = sorted(p for p in d.iterdir() if p.is_file() and p.suffix.lower() in TRACE_SUFFIXES)
        dirs = sorted(p for p in d.iterdir() if p.is_dir())
        is_trip_folder = (
            d != root and len(files) >= 2 and not dirs and not DRIVER_LABEL_RE.match(d.name.lower())
        )
        if is_trip_folder:
            driver, vehicle, device, route = classify(parts)
            metas.append(TraceMeta(driver, vehicle, device, route,
                                   source_path=str(d),
                                   segments=tuple(str(f) for f in files)))
            return
        for f in files:
            driver, vehicle, device, route = classify(parts)
            metas.append(TraceMeta(driver, vehicle, device, route, source_path=str(f)))
        for sub in dirs:
            walk(sub, parts + (sub.name,))

    walk(root, ())
    return metas
