"""Anti-theft authentication state machine and its bus runner.

Phases: Pending (yellow) -> Authenticated (green) on passing decisions;
any smoothed failure sends Authenticated to Warning (flashing red) with
a grace deadline; an expired grace period escalates to Disabled (solid
red) and starts repeated disable-frame injection; a valid, unexpired,
unused override code returns any phase to Authenticated and halts
injection. Decisions are smoothed by majority over the last N windows
so a single noisy window never triggers an intervention.
"""

from __future__ import annotations

import hashlib
import hmac
import json
import math
import queue
import threading
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .bus import VirtualBus
from .errors import CanguardError
from .features import (
    FeatureVector,
    WindowSpec,
    _vocab_keys,
    build_schema,
    check_schema,
    window_values,
)
from .frames import CanFrame
from .models import AuthDecision, AuthModel, Verdict
from .simulator import DISABLE_PAYLOAD, POWERTRAIN_ID, decode_speed_mph
from .traces import FrameBlock

#: production audible-warning text, emitted verbatim in the warning event
WARNING_TEXT = (
    "You are not authenticated. Acceleration will be disabled in five minutes. "
    "Please find a safe place to stop and request an override code from the "
    "owner of the vehicle."
)


class GuardPhase(str, Enum):
    PENDING = "pending"
    AUTHENTICATED = "authenticated"
    WARNING = "warning"
    DISABLED = "disabled"


LED_FOR_PHASE = {
    GuardPhase.PENDING: "yellow",
    GuardPhase.AUTHENTICATED: "green",
    GuardPhase.WARNING: "flashing_red",
    GuardPhase.DISABLED: "solid_red",
}


class EventKind(str, Enum):
    DECISION = "decision"
    PHASE_CHANGE = "phase_change"
    WARNING_ISSUED = "warning_issued"
    INJECTION_STARTED = "injection_started"
    INJECTION_STOPPED = "injection_stopped"
    OVERRIDE_ACCEPTED = "override_accepted"
    OVERRIDE_REJECTED = "override_rejected"
    RESTRICTION_VIOLATION = "restriction_violation"


@dataclass(frozen=True, slots=True)
class GuardEvent:
    time: float
    seq: int
    kind: EventKind
    detail: dict

    def to_record(self) -> dict:
        return {"time": self.time, "seq": self.seq, "kind": self.kind.value,
                "detail": self.detail}


@dataclass(frozen=True)
class GuardConfig:
    initial_window: float = 60.0
    grace_period: float = 300.0
    smoothing: int = 5
    injection_id: int = POWERTRAIN_ID
    injection_payload: bytes = DISABLE_PAYLOAD
    injection_period: float = 0.001
    max_speed: float | None = None  # restriction policy, reporting only
    simulated: bool = False         # joystick mode: verdicts come from inputs

    def __post_init__(self):
        if self.grace_period <= 0:
            raise ValueError("grace_period must be positive")
        if self.injection_period <= 0:
            raise ValueError("injection period must be positive")
        if self.smoothing < 1:
            raise ValueError("smoothing must be >= 1")


@dataclass(frozen=True)
class OverrideGrant:
    code: str     # 8 decimal digits
    expiry: float
    issuer: str


class OverrideScheme:
    """Time-limited 8-digit override codes from a keyed MAC.

    The MAC covers (vehicle_id, expiry) with expiry quantized to
    ``quantum``-second boundaries; the verifier recomputes codes for the
    next ``horizon`` boundaries, so possession of the shared secret is
    enough to verify offline while a flipped digit survives with
    probability only horizon * 1e-8.
    """

    def __init__(self, secret: bytes, vehicle_id: str, *,
                 quantum: float = 60.0, horizon: int = 10, issuer: str = "owner"):
        if not secret:
            raise ValueError("empty owner secret")
        self.secret = secret
        self.vehicle_id = vehicle_id
        self.quantum = quantum
        self.horizon = horizon
        self.issuer = issuer

    def _code_for(self, expiry: float) -> str:
        msg = f"{self.vehicle_id}|{round(expiry * 1e6)}".encode()
        digest = hmac.new(self.secret, msg, hashlib.sha256).digest()
        return f"{int.from_bytes(digest[:8], 'big') % 10**8:08d}"

    def issue(self, validity: float, now: float) -> OverrideGrant:
        """Issue a code valid until now+validity, rounded up to a boundary."""
        if validity <= 0:
            raise ValueError("validity must be positive")
        if validity > self.quantum * (self.horizon - 1):
            raise ValueError(
                f"validity above {self.quantum * (self.horizon - 1):.0f} s is not verifiable"
            )
        expiry = math.ceil((now + validity) / self.quantum) * self.quantum
        return OverrideGrant(self._code_for(expiry), expiry, self.issuer)

    def verify(self, code: str, now: float) -> float | None:
        """Return the matching expiry if the code is valid and unexpired."""
        if len(code) != 8 or not code.isdigit():
            return None
        base = math.floor(now / self.quantum)
        for k in range(1, self.horizon + 1):
            expiry = (base + k) * self.quantum
            if hmac.compare_digest(self._code_for(expiry), code):
                return expiry
        return None


def issue_override(owner_secret: bytes, vehicle_id: str, validity: float,
                   now: float, **kw) -> OverrideGrant:
    return OverrideScheme(owner_secret, vehicle_id, **kw).issue(validity, now)


@dataclass(frozen=True)
class GuardState:
    phase: GuardPhase = GuardPhase.PENDING
    phase_entered_at: float = 0.0
    grace_deadline: float | None = None
    active_override: OverrideGrant | None = None

    def __post_init__(self):
        if (self.grace_deadline is not None) != (self.phase is GuardPhase.WARNING):
            raise ValueError("grace_deadline is set exactly in the Warning phase")

    @property
    def led(self) -> str:
        return LED_FOR_PHASE[self.phase]


class GuardCore:
    """The pure state machine: feed it time, decisions, and inputs."""

    def __init__(self, config: GuardConfig, start_time: float = 0.0,
                 scheme: OverrideScheme | None = None):
        self.config = config
        self.scheme = scheme
        self.start_time = start_time
        self.state = GuardState(phase_entered_at=start_time)
        self.last_score: float | None = None
        self._verdicts: deque[Verdict] = deque(maxlen=config.smoothing)
        self._seq = 0
        self._now = start_time
        self._used_codes: set[str] = set()

    # --- helpers ---

    def _event(self, events: list, kind: EventKind, detail: dict) -> None:
        self._seq += 1
        events.append(GuardEvent(self._now, self._seq, kind, detail))

    def _smoothed(self) -> Verdict | None:
        if not self._verdicts:
            return None
        good = sum(1 for v in self._verdicts if v is Verdict.AUTHORIZED)
        bad = len(self._verdicts) - good
        if good > bad:
            return Verdict.AUTHORIZED
        if bad > good:
            return Verdict.UNAUTHORIZED
        return None

    def _enter(self, events: list, phase: GuardPhase) -> None:
        old = self.state.phase
        deadline = self._now + self.config.grace_period if phase is GuardPhase.WARNING else None
        override = self.state.active_override if phase is GuardPhase.AUTHENTICATED else None
        self.state = GuardState(phase, self._now, deadline, override)
        self._event(events, EventKind.PHASE_CHANGE,
                    {"from": old.value, "to": phase.value, "led": self.state.led})
        if phase is GuardPhase.WARNING:
            self._event(events, EventKind.WARNING_ISSUED,
                        {"text": WARNING_TEXT, "grace_deadline": deadline,
                         "grace_period": self.config.grace_period})
        if phase is GuardPhase.DISABLED:
            self._event(events, EventKind.INJECTION_STARTED, {
                "arb_id": self.config.injection_id,
                "payload": self.config.injection_payload.hex().upper(),
                "period": self.config.injection_period,
            })
        if old is GuardPhase.DISABLED and phase is not GuardPhase.DISABLED:
            self._event(events, EventKind.INJECTION_STOPPED, {})

    # --- the step function ---

    def step(
        self,
        now: float,
        decision: AuthDecision | None = None,
        override_attempt: str | None = None,
        simulated_verdict: Verdict | None = None,
    ) -> list[GuardEvent]:
        if now < self._now - 1e-9:
            raise CanguardError(f"guard time went backwards: {now} < {self._now}")
        self._now = max(self._now, now)
        events: list[GuardEvent] = []
        cfg = self.config

        if decision is not None and not cfg.simulated:
            self._verdicts.append(decision.verdict)
            self.last_score = decision.score
            self._event(events, EventKind.DECISION, {
                "verdict": decision.verdict.value,
                "score": decision.score,
                "threshold": decision.threshold,
                "window_start": decision.window_start,
                "predicted_label": decision.predicted_label,
            })

        if simulated_verdict is not None and cfg.simulated:
            # joystick input stands in for the smoothed model decision
            self._verdicts.clear()
            self._verdicts.extend([simulated_verdict] * cfg.smoothing)
            self.last_score = 0.0 if simulated_verdict is Verdict.AUTHORIZED else 1.0
            self._event(events, EventKind.DECISION, {
                "verdict": simulated_verdict.value, "simulated": True,
                "score": self.last_score, "threshold": 0.5, "window_start": now,
            })

        if override_attempt is not None:
            expiry = self.scheme.verify(override_attempt, now) if self.scheme else None
            if expiry is not None and override_attempt in self._used_codes:
                expiry = None
            if expiry is not None:
                self._used_codes.add(override_attempt)
                grant = OverrideGrant(override_attempt, expiry,
                                      self.scheme.issuer if self.scheme else "owner")
                self._event(events, EventKind.OVERRIDE_ACCEPTED,
                            {"expiry": expiry, "code_suffix": override_attempt[-2:]})
                self._verdicts.clear()
                if self.state.phase is not GuardPhase.AUTHENTICATED:
                    self._enter(events, GuardPhase.AUTHENTICATED)
                self.state = GuardState(GuardPhase.AUTHENTICATED,
                                        self.state.phase_entered_at, None, grant)
            else:
                self._event(events, EventKind.OVERRIDE_REJECTED, {"reason": "invalid or expired"})

        smoothed = self._smoothed()
        phase = self.state.phase
        if phase is GuardPhase.PENDING:
            if smoothed is Verdict.AUTHORIZED:
                self._enter(events, GuardPhase.AUTHENTICATED)
            elif (smoothed is Verdict.UNAUTHORIZED
                  and self._now - self.start_time >= cfg.initial_window):
                self._enter(events, GuardPhase.WARNING)
        elif phase is GuardPhase.AUTHENTICATED:
            if smoothed is Verdict.UNAUTHORIZED:
                self._enter(events, GuardPhase.WARNING)
        elif phase is GuardPhase.WARNING:
            if smoothed is Verdict.AUTHORIZED:
                self._enter(events, GuardPhase.AUTHENTICATED)
            elif self._now >= self.state.grace_deadline:
                self._enter(events, GuardPhase.DISABLED)
        # DISABLED exits only via override, handled above

        return events

    def custom_event(self, now: float, kind: EventKind, detail: dict) -> GuardEvent:
        self._now = max(self._now, now)
        events: list[GuardEvent] = []
        self._event(events, kind, detail)
        return events[0]


def check_restriction(state: GuardState, decoded_speed: float,
                      max_speed: float | None) -> dict | None:
    """Violation detail if the decoded speed exceeds the policy cap."""
    if max_speed is None or decoded_speed <= max_speed:
        return None
    return {"speed_mph": decoded_speed, "max_speed_mph": max_speed,
            "phase": state.phase.value}


class GuardRunner:
    """Guard attached to a bus: windows traffic, queries the model, and
    drives interventions; while Disabled it injects the configured
    payload at the configured period in bus time."""

    def __init__(
        self,
        bus: VirtualBus,
        model: AuthModel | None,
        config: GuardConfig,
        window: WindowSpec,
        vocab: list[str] | None = None,
        *,
        scheme: OverrideScheme | None = None,
        log_path: str | Path | None = None,
        speed_decoder=decode_speed_mph,
        node_id: str = "guard",
    ):
        if model is None and not config.simulated:
            raise CanguardError("a model is required unless simulated mode is on")
        if model is not None:
            if vocab is None:
                raise CanguardError("vocab is required with a model")
            check_schema(model.raw_schema, build_schema(vocab))  # abort before attaching
        self.bus = bus
        self.model = model
        self.config = config
        self.window = window
        self.vocab = vocab or []
        self._vocab_pos = _vocab_keys(self.vocab) if self.vocab else {}
        self._schema = build_schema(self.vocab) if self.vocab else ()
        self.core = GuardCore(config, start_time=bus.now, scheme=scheme)
        self.events: list[GuardEvent] = []
        self.decisions: list[AuthDecision] = []
        self._log_fh = open(log_path, "w") if log_path else None
        self._subscribers: list[queue.Queue] = []
        self._sub_lock = threading.Lock()
        self._commands: queue.SimpleQueue = queue.SimpleQueue()
        self._speed_decoder = speed_decoder
        self._in_violation = False
        self._stopped = False
        self._inject_generation = 0
        self.injected: list[float] = []  # bus times of injected disable frames

        self._buf_ts: list[float] = []
        self._buf_ids: list[int] = []
        self._buf_flags: list[int] = []
        self._buf_dlc: list[int] = []
        self._buf_pay: list[bytes] = []

        self.node = bus.attach(node_id, collect=False, on_frame=self._on_frame)
        self._anchor: float | None = None  # first seen frame anchors the windows
        self._next_eval: float | None = None

    # --- frame intake ---

    def _on_frame(self, frame: CanFrame) -> None:
        if self._stopped:
            return
        if self._anchor is None:
            self._anchor = frame.timestamp
            self.core.start_time = frame.timestamp
            self.core._now = max(self.core._now, frame.timestamp)
            if self.model is not None:
                self._next_eval = self._anchor + self.window.length
                self.bus.schedule(self._next_eval, self._evaluate_window)
        self._buf_ts.append(frame.timestamp)
        self._buf_ids.append(frame.arb_id)
        self._buf_flags.append(0x01 if frame.is_extended else 0)
        self._buf_dlc.append(len(frame.data))
        self._buf_pay.append(frame.data)
        if self.config.max_speed is not None:
            speed = self._speed_decoder(frame)
            if speed is not None:
                violation = check_restriction(self.core.state, speed, self.config.max_speed)
                if violation and not self._in_violation:
                    self._emit(self.core.custom_event(self.bus.now,
                                                      EventKind.RESTRICTION_VIOLATION, violation))
                self._in_violation = violation is not None

    # --- windowed decisions ---

    def _evaluate_window(self) -> None:
        if self._stopped:
            return
        t_end = self._next_eval
        self._next_eval += self.window.stride
        self.bus.schedule(self._next_eval, self._evaluate_window)

        ts = np.asarray(self._buf_ts)
        keep = ts > t_end - self.window.length - 1e-9
        drop = int(np.argmax(keep)) if keep.any() else len(ts)
        if drop:
            del self._buf_ts[:drop], self._buf_ids[:drop], self._buf_flags[:drop]
            del self._buf_dlc[:drop], self._buf_pay[:drop]
            ts = ts[drop:]
        i1 = int(np.searchsorted(ts, t_end, side="right"))
        if i1 < self.window.min_frames:
            self._dispatch(self.core.step(t_end))
            return
        n = i1
        payload = np.zeros((n, 8), np.uint8)
        for i in range(n):
            d = self._buf_pay[i]
            payload[i, : len(d)] = list(d)
        block = FrameBlock(ts[:n], np.asarray(self._buf_ids[:n], np.uint32),
                           np.asarray(self._buf_flags[:n], np.uint8),
                           np.asarray(self._buf_dlc[:n], np.uint8),
                           payload, np.zeros(n, np.uint16), ["can0"])
        values = window_values(block, 0, n, self.window.length,
                               self._vocab_pos, len(self.vocab))
        vector = FeatureVector(values, self._schema, t_end - self.window.length)
        decision = self.model.decide(vector)
        self.decisions.append(decision)
        self._step_and_react(t_end, decision=decision)

    # --- commands and timers ---

    def submit_override(self, code: str) -> None:
        """Thread-safe; processed at the current bus time."""
        self._commands.put(("override", code))
        self._kick()

    def submit_simulated(self, verdict: str) -> None:
        v = Verdict.AUTHORIZED if verdict in ("pass", "up", "authorized") else Verdict.UNAUTHORIZED
        self._commands.put(("simulate", v))
        self._kick()

    def _kick(self) -> None:
        try:
            self.bus.schedule(self.bus.now, self._drain_commands)
        except CanguardError:
            pass  # bus stopped; commands stay queued

    def _drain_commands(self) -> None:
        if self._stopped:
            return
        now = self.bus.now
        while True:
            try:
                kind, value = self._commands.get_nowait()
            except queue.Empty:
                break
            if kind == "override":
                self._step_and_react(now, override_attempt=value)
            else:
                self._step_and_react(now, simulated_verdict=value)

    def _step_and_react(self, now: float, **kw) -> None:
        before = self.core.state.phase
        events = self.core.step(now, **kw)
        self._dispatch(events)
        after = self.core.state.phase
        if after is GuardPhase.WARNING and before is not GuardPhase.WARNING:
            deadline = self.core.state.grace_deadline
            self.bus.schedule(deadline, lambda: self._grace_check(deadline))
        if after is GuardPhase.DISABLED and before is not GuardPhase.DISABLED:
            self._inject_generation += 1
            self._schedule_injection(self._inject_generation)
        if after is GuardPhase.PENDING and self.core._verdicts:
            # a failing verdict inside the initial window defers the Warning
            # transition; revisit once the window has elapsed
            t_check = self.core.start_time + self.config.initial_window
            if now < t_check:
                self.bus.schedule(t_check, lambda: self._recheck(t_check))

    def _recheck(self, at: float) -> None:
        if not self._stopped and self.core.state.phase is GuardPhase.PENDING:
            self._step_and_react(at)

    def _grace_check(self, deadline: float) -> None:
        if self._stopped:
            return
        st = self.core.state
        if st.phase is GuardPhase.WARNING and st.grace_deadline == deadline:
            self._step_and_react(deadline)

    def _schedule_injection(self, generation: int) -> None:
        if self._stopped or generation != self._inject_generation:
            return
        if self.core.state.phase is not GuardPhase.DISABLED:
            return
        frame = CanFrame(0.0, "can0", self.config.injection_id,
                         self.config.injection_payload)
        stamped = self.node.inject(frame)
        self.injected.append(stamped.timestamp)
        self.bus.schedule(self.bus.now + self.config.injection_period,
                          lambda: self._schedule_injection(generation))

    # --- event fan-out ---

    def _emit(self, event: GuardEvent) -> None:
        self.events.append(event)
        record = self.api_event(event)
        if self._log_fh is not None:
            self._log_fh.write(json.dumps(event.to_record(), sort_keys=True) + "\n")
            self._log_fh.flush()
        with self._sub_lock:
            subs = list(self._subscribers)
        for q in subs:
            q.put(record)

    def _dispatch(self, events: list[GuardEvent]) -> None:
        for e in events:
            self._emit(e)

    def api_event(self, event: GuardEvent) -> dict:
        return {"event": event.to_record(), "state": self.snapshot(at=event.time)}

    def snapshot(self, at: float | None = None) -> dict:
        st = self.core.state
        now = self.bus.now if at is None else at
        grace = None
        if st.grace_deadline is not None:
            grace = max(0.0, st.grace_deadline - now)
        return {
            "phase": st.phase.value,
            "led": st.led,
            "grace_remaining": grace,
            "grace_deadline": st.grace_deadline,
            "last_score": self.core.last_score,
            "mode": "simulated" if self.config.simulated else "model",
            "time": now,
        }

    def subscribe(self) -> queue.Queue:
        q: queue.Queue = queue.Queue()
        with self._sub_lock:
            self._subscribers.append(q)
        return q

    def unsubscribe(self, q: queue.Queue) -> None:
        with self._sub_lock:
            if q in self._subscribers:
                self._subscribers.remove(q)

    def stop(self) -> None:
        self._stopped = True
        if self._log_fh is not None:
            self._log_fh.close()
            self._log_fh = None
        with self._sub_lock:
            subs = list(self._subscribers)
        for q in subs:
            q.put(None)  # stream sentinel


def run_guard(
    bus: VirtualBus,
    model: AuthModel | None,
    config: GuardConfig,
    window: WindowSpec,
    vocab: list[str] | None = None,
    *,
    duration: float,
    scheme: OverrideScheme | None = None,
    log_path: str | Path | None = None,
) -> GuardRunner:
    """Attach a guard, run the bus for ``duration`` of bus time, stop."""
    runner = GuardRunner(bus, model, config, window, vocab,
                         scheme=scheme, log_path=log_path)
    bus.run(until=bus.now + duration)
    runner.stop()
    return runner
