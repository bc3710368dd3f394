"""In-process broadcast CAN bus with timestamp-faithful replay.

One logical sequencer drives everything: replayed frames, live
injections, and scheduled callbacks all land in a single priority queue
ordered by (bus time, source, sequence). Instant mode processes that
queue as fast as possible and is fully deterministic; realtime and
scaled modes pace delivery against the wall clock, finishing each wait
with a short spin so delivery jitter stays inside the 2 ms p95 budget.
"""

from __future__ import annotations

import heapq
import math
import threading
import time as _time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import BusError
from .frames import CanFrame
from .traces import FrameBlock, Trace, TraceMeta

INBOX_LIMIT_DEFAULT = 65_536


@dataclass(frozen=True)
class BusClock:
    mode: str  # "instant" | "realtime" | "scaled"
    factor: float = 1.0

    def __post_init__(self):
        if self.mode not in ("instant", "realtime", "scaled"):
            raise BusError(f"unknown clock mode {self.mode!r}")
        if not (self.factor > 0) or not math.isfinite(self.factor):
            raise BusError("clock factor must be a positive finite number")

    @classmethod
    def instant(cls) -> "BusClock":
        return cls("instant")

    @classmethod
    def realtime(cls) -> "BusClock":
        return cls("realtime", 1.0)

    @classmethod
    def scaled(cls, factor: float) -> "BusClock":
        return cls("scaled", factor)

    @property
    def paced(self) -> bool:
        return self.mode != "instant"


class BusNode:
    """A bus participant: ordered inbox of everything broadcast, plus inject()."""

    def __init__(self, bus: "VirtualBus", node_id: str, source_idx: int,
                 inbox_limit: int | None, on_frame: Callable[[CanFrame], None] | None,
                 collect: bool):
        self.bus = bus
        self.node_id = node_id
        self._source_idx = source_idx
        self._inbox: list[CanFrame] = []
        self._inbox_limit = inbox_limit
        self._collect = collect
        self._on_frame = on_frame
        self.delivered = 0
        self.overflow = 0

    def _deliver(self, frame: CanFrame) -> None:
        self.delivered += 1
        if self._collect:
            if self._inbox_limit is not None and len(self._inbox) >= self._inbox_limit:
                self.overflow += 1
            else:
                self._inbox.append(frame)
        if self._on_frame is not None:
            self._on_frame(frame)

    def drain(self) -> list[CanFrame]:
        out, self._inbox = self._inbox, []
        return out

    def peek(self) -> list[CanFrame]:
        return list(self._inbox)

    def inject(self, frame: CanFrame) -> CanFrame:
        return self.bus.inject(self, frame)


@dataclass
class ReplaySummary:
    frames_delivered: int = 0
    wall_duration: float = 0.0
    timing_err_p50: float = 0.0
    timing_err_p95: float = 0.0
    timing_err_max: float = 0.0
    errors: list = field(default_factory=list)


class VirtualBus:
    """Single-sequencer broadcast bus; see module docstring."""

    def __init__(self, clock: BusClock | None = None):
        self.clock = clock or BusClock.instant()
        self._nodes: dict[str, BusNode] = {}
        self._heap: list = []
        self._lock = threading.RLock()
        self._seq = 0
        self._sources = 0
        self._now = 0.0
        self._stopped = False
        self._running = False
        self._wall0: float | None = None
        self._t0: float | None = None
        self._thread: threading.Thread | None = None
        self._wake = threading.Condition(self._lock)
        self._dispatching: int | None = None  # thread id while running callbacks

    # --- attachment ---

    def attach(self, node_id: str, *, inbox_limit: int | None = INBOX_LIMIT_DEFAULT,
               on_frame: Callable[[CanFrame], None] | None = None,
               collect: bool = True) -> BusNode:
        with self._lock:
            if node_id in self._nodes:
                raise BusError(f"duplicate node id {node_id!r}")
            self._sources += 1
            node = BusNode(self, node_id, self._sources, inbox_limit, on_frame, collect)
            self._nodes[node_id] = node
            return node

    def detach(self, node: BusNode) -> None:
        with self._lock:
            self._nodes.pop(node.node_id, None)

    # --- time ---

    @property
    def now(self) -> float:
        """Current bus time.

        Inside event callbacks this is the logical time of the event being
        processed, so everything scheduled or injected from callbacks is
        deterministic across clock modes; other threads (e.g. HTTP handlers)
        see wall-interpolated time in paced modes.
        """
        with self._lock:
            if self._dispatching == threading.get_ident():
                return self._now
            if self.clock.paced and self._wall0 is not None and self._running:
                wall = self._t0 + (_time.perf_counter() - self._wall0) / self.clock.factor
                return max(self._now, wall)
            return self._now

    def _push(self, when: float, source_idx: int, kind: str, payload) -> None:
        with self._lock:
            if self._stopped:
                raise BusError("bus stopped")
            self._seq += 1
            heapq.heappush(self._heap, (when, source_idx, self._seq, kind, payload))
            self._wake.notify_all()

    def schedule(self, when: float, action: Callable[[], None]) -> None:
        """Run ``action`` at bus time ``when`` (in event order)."""
        self._push(when, 0, "call", action)

    def schedule_in(self, delay: float, action: Callable[[], None]) -> None:
        self.schedule(self.now + delay, action)

    # --- traffic ---

    def inject(self, node: BusNode, frame: CanFrame) -> CanFrame:
        """Broadcast ``frame`` stamped with the current bus time."""
        if node.node_id not in self._nodes:
            raise BusError(f"node {node.node_id!r} is not attached")
        stamped = CanFrame(
            timestamp=max(self.now, 0.0),
            channel=frame.channel,
            arb_id=frame.arb_id,
            data=frame.data,
            is_extended=frame.is_extended,
            is_remote=frame.is_remote,
        )
        self._push(stamped.timestamp, node._source_idx, "frame", stamped)
        return stamped

    def add_replay(self, trace: Trace) -> "_ReplayTracker":
        """Enqueue a trace for delivery at its own timestamps.

        Only a cursor lives in the queue; each delivered frame schedules
        the next one, so million-frame replays stay memory-flat.
        """
        with self._lock:
            self._sources += 1
            src = self._sources
        tracker = _ReplayTracker(trace.block)
        if len(trace.block):
            self._push(float(trace.block.ts[0]), src, "replay", (tracker, src))
        return tracker

    # --- the sequencer ---

    def _process_one(self, item, summary_sink) -> None:
        when, _src, _seq, kind, payload = item
        with self._lock:
            self._now = max(self._now, when)
            self._dispatching = threading.get_ident()
        try:
            if kind == "call":
                payload()
                return
            if kind == "replay":
                tracker, src = payload
                frame = tracker.block.frame(tracker.delivered)
                tracker.delivered += 1
                if summary_sink is not None:
                    tracker.errors.append(summary_sink())
                if tracker.delivered < len(tracker.block) and not self._stopped:
                    self._push(float(tracker.block.ts[tracker.delivered]), src, "replay", payload)
            else:
                frame = payload
            for node in list(self._nodes.values()):
                node._deliver(frame)
        finally:
            with self._lock:
                self._dispatching = None

    def run(self, until: float | None = None) -> None:
        """Process queued events; paced modes sleep between them.

        Processes events with time <= ``until`` (all of them when None),
        then advances bus time to ``until``.
        """
        with self._lock:
            if self._running:
                raise BusError("bus already running")
            self._running = True
        try:
            while True:
                with self._lock:
                    if self._stopped or not self._heap:
                        break
                    if until is not None and self._heap[0][0] > until:
                        break
                    item = heapq.heappop(self._heap)
                sink = self._pace(item[0])
                self._process_one(item, sink)
            if until is not None:
                with self._lock:
                    self._now = max(self._now, until)
        finally:
            with self._lock:
                self._running = False

    def _pace(self, when: float):
        """Wall-pace the next event; returns a delivery-error probe or None."""
        if not self.clock.paced:
            return None
        if self._wall0 is None:
            self._wall0 = _time.perf_counter()
            self._t0 = when
        target = self._wall0 + (when - self._t0) * self.clock.factor
        while True:
            remaining = target - _time.perf_counter()
            if remaining <= 0:
                break
            if remaining > 0.0015:
                _time.sleep(remaining - 0.001)
            # spin out the last millisecond for tight delivery jitter
        return lambda: _time.perf_counter() - target

    # --- background operation ---

    def start(self) -> None:
        """Run the sequencer on a background thread until stop()."""
        with self._lock:
            if self._thread is not None:
                raise BusError("bus already started")
            self._running = True
        self._thread = threading.Thread(target=self._background_loop, daemon=True)
        self._thread.start()

    def _background_loop(self) -> None:
        while True:
            with self._lock:
                if self._stopped:
                    break
                if not self._heap:
                    self._wake.wait(timeout=0.05)
                    continue
                item = heapq.heappop(self._heap)
            sink = self._pace(item[0])
            with self._lock:
                if self._stopped:
                    break
            self._process_one(item, sink)
        with self._lock:
            self._running = False

    def stop(self) -> None:
        with self._lock:
            self._stopped = True
            self._wake.notify_all()
        if self._thread is not None:
            self._thread.join(timeout=5)
            self._thread = None


class _ReplayTracker:
    def __init__(self, block: FrameBlock):
        self.block = block
        self.total = len(block)
        self.delivered = 0
        self.errors: list[float] = []


def replay(bus: VirtualBus, trace: Trace, clock: BusClock | None = None) -> ReplaySummary:
    """Replay a trace through the bus and run it to completion."""
    if clock is not None:
        bus.clock = clock
    wall_start = _time.perf_counter()
    tracker = bus.add_replay(trace)
    bus.run()
    summary = ReplaySummary(frames_delivered=tracker.delivered,
                            wall_duration=_time.perf_counter() - wall_start)
    if tracker.errors:
        errs = np.abs(np.asarray(tracker.errors))
        summary.timing_err_p50 = float(np.percentile(errs, 50))
        summary.timing_err_p95 = float(np.percentile(errs, 95))
        summary.timing_err_max = float(errs.max())
        summary.errors = tracker.errors
    return summary


class Capture:
    """Bus node that records all traffic for audit/persistence."""

    def __init__(self, bus: VirtualBus, node_id: str = "capture"):
        self.node = bus.attach(node_id, inbox_limit=None)

    def frames(self) -> list[CanFrame]:
        return self.node.peek()

    def to_trace(self, meta: TraceMeta | None = None) -> Trace:
        block = FrameBlock.from_frames(self.node.peek()).sorted_by_time()
        return Trace(meta or TraceMeta(), block)

    def write(self, path, format: str = "log") -> None:
        from .traces import write_trace

        write_trace(self.to_trace(), path, format)
