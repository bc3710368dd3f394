"""Synthetic vehicle plant and driver-behavior traffic generator.

Emits CAN traffic at realistic rates (aggregate ~1.1 kHz) from a small
documented ID map, driven by a parameterized driver profile, and reacts
to repeated disable-frame injection the way the road-tested vehicle
did: acceleration keeps working until the pedal is released during an
active injection burst, then a latch engages and the vehicle can only
coast (braking always works).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .bus import VirtualBus
from .frames import CanFrame
from .traces import Device, FrameBlock, Trace, TraceMeta, UNKNOWN, id_text

# --- synthetic ID map ---

POWERTRAIN_ID = 0x0C9   # bytes 2-3: rpm * 4, big-endian; 10 ms period
SPEED_ID = 0x3E9        # bytes 0-1: mph * 100, big-endian; 10 ms period
ACCEL_ID = 0x1A1        # byte 2: pedal * 255; 25 ms period

DISABLE_PAYLOAD = bytes.fromhex("0000000000001800")

#: arbitration id -> emission period (seconds)
FILLER_IDS = {0x110 + 8 * i: p for i, p in enumerate([0.020] * 12 + [0.025] * 6 + [0.050] * 2)}

SYNTHETIC_ID_MAP: dict[int, float] = {
    POWERTRAIN_ID: 0.010,
    SPEED_ID: 0.010,
    ACCEL_ID: 0.025,
    **FILLER_IDS,
}

#: total frames/second of the map; inside the 1,000-2,500 Hz band
AGGREGATE_RATE_HZ = sum(1.0 / p for p in SYNTHETIC_ID_MAP.values())

#: per-emission timing jitter as a fraction of the period (scheduler noise;
#: keeps mean periods exact while giving rate/inter-arrival features honest
#: variance instead of pure boundary quantization)
EMISSION_JITTER_FRAC = 0.15


def synthetic_vocab() -> list[str]:
    return sorted(id_text(i) for i in SYNTHETIC_ID_MAP)


def decode_speed_mph(frame: CanFrame) -> float | None:
    if frame.arb_id != SPEED_ID or len(frame.data) < 2:
        return None
    return (frame.data[0] << 8 | frame.data[1]) / 100.0


def decode_rpm(frame: CanFrame) -> float | None:
    if frame.arb_id != POWERTRAIN_ID or len(frame.data) < 4:
        return None
    return (frame.data[2] << 8 | frame.data[3]) / 4.0


# --- plant ---

VALIDATED_MAX_MPH = 35.0  # road-trial ceiling; beyond it the model extrapolates

IDLE_RPM = 650.0
MAX_RPM = 6500.0
MAX_ACCEL_MPHPS = 6.0
DRAG_PER_S = 0.06
MAX_BRAKE_MPHPS = 15.0
DISABLE_RATE_WINDOW = 0.1    # seconds over which injection rate is measured
DISABLE_RATE_MIN = 500.0     # frames/s; half the demonstrated 1 kHz burst


@dataclass(frozen=True)
class PlantParams:
    coast_half_life: float = 8.0
    max_accel: float = MAX_ACCEL_MPHPS
    drag: float = DRAG_PER_S
    max_brake: float = MAX_BRAKE_MPHPS


DEFAULT_PLANT = PlantParams()


@dataclass(frozen=True)
class PlantState:
    speed: float = 0.0
    rpm: float = IDLE_RPM
    accelerator: float = 0.0
    accel_disabled: bool = False
    clock: float = 0.0
    injection_active: bool = False
    extrapolated: bool = False
    disable_history: tuple[tuple[float, int], ...] = ()  # (time, frames) in rate window


def plant_step(
    state: PlantState,
    pedal: float,
    injected: list[CanFrame],
    dt: float,
    *,
    brake: float = 0.0,
    params: PlantParams = DEFAULT_PLANT,
) -> PlantState:
    """Advance the plant one tick.

    The disable latch engages only when disable frames arrive at >= 500
    frames/s AND the pedal is released during that regime; with the
    pedal held, acceleration continues despite the injection. Once
    latched, pedal input is ignored, speed decays by coast drag, and
    braking still works.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    pedal = min(max(pedal, 0.0), 1.0)
    brake = min(max(brake, 0.0), 1.0)
    now = state.clock + dt

    n_disable = sum(
        1 for f in injected if f.arb_id == POWERTRAIN_ID and f.data == DISABLE_PAYLOAD
    )
    history = tuple(
        (t, c) for t, c in (*state.disable_history, (now, n_disable))
        if t > now - DISABLE_RATE_WINDOW and c
    )
    rate = sum(c for _, c in history) / DISABLE_RATE_WINDOW
    injection_active = rate >= DISABLE_RATE_MIN

    latched = state.accel_disabled or (injection_active and pedal <= 0.0)

    if latched:
        decay = math.log(2.0) / params.coast_half_life
        dv = -decay * state.speed * dt - params.max_brake * brake * dt
        speed = max(0.0, min(state.speed, state.speed + dv))
    else:
        dv = (params.max_accel * pedal - params.drag * state.speed
              - params.max_brake * brake) * dt
        speed = max(0.0, state.speed + dv)

    if latched and speed > state.speed + 1e-9:
        raise RuntimeError("plant invariant violated: speed increased while disabled")

    # revving still follows the pedal even while drive is latched out
    rpm = min(MAX_RPM, IDLE_RPM + 45.0 * speed + 1800.0 * pedal)

    return PlantState(
        speed=speed,
        rpm=rpm,
        accelerator=pedal,
        accel_disabled=latched,
        clock=now,
        injection_active=injection_active,
        extrapolated=state.extrapolated or speed > VALIDATED_MAX_MPH,
        disable_history=history,
    )


# --- driver profiles ---

@dataclass(frozen=True)
class DriverProfile:
    name: str
    pedal_aggressiveness: float  # 0-1, pedal ramp rate
    target_speed_mean: float     # mph
    target_speed_std: float
    brake_intensity: float       # 0-1
    pedal_jitter: float          # >= 0, high-frequency pedal noise
    stop_frequency: float        # stops per minute

    def __post_init__(self):
        if not 0 <= self.pedal_aggressiveness <= 1:
            raise ValueError("pedal_aggressiveness must be in 0..1")
        if not 0 <= self.brake_intensity <= 1:
            raise ValueError("brake_intensity must be in 0..1")
        if self.pedal_jitter < 0 or self.stop_frequency < 0:
            raise ValueError("pedal_jitter and stop_frequency must be >= 0")
        if self.target_speed_mean < 0 or self.target_speed_std < 0:
            raise ValueError("target speed distribution must be non-negative")

    @classmethod
    def from_file(cls, path: str | Path) -> "DriverProfile":
        import json

        raw = json.loads(Path(path).read_text())
        return cls(**raw)


PROFILE_PRESETS = {
    "calm": DriverProfile("calm", 0.15, 26.0, 2.0, 0.2, 0.01, 0.2),
    "aggressive": DriverProfile("aggressive", 0.9, 58.0, 7.0, 0.95, 0.15, 1.2),
}


def resolve_profile(spec: str) -> DriverProfile:
    """A preset name or the path of a JSON profile file."""
    if spec in PROFILE_PRESETS:
        return PROFILE_PRESETS[spec]
    return DriverProfile.from_file(spec)


class DriverBrain:
    """Turns a profile into pedal/brake commands, one tick at a time."""

    RETARGET_S = 25.0
    KP = 0.06

    def __init__(self, profile: DriverProfile, seed: int):
        self.profile = profile
        self.rng = np.random.default_rng(seed)
        self.target = max(0.0, self.rng.normal(profile.target_speed_mean,
                                               profile.target_speed_std))
        self.pedal = 0.0
        self.mode = "drive"        # drive | stop_brake | stop_dwell
        self.dwell_until = 0.0
        self.next_retarget = self.RETARGET_S

    def step(self, t: float, speed: float, dt: float) -> tuple[float, float]:
        p = self.profile
        if t >= self.next_retarget:
            self.target = max(0.0, self.rng.normal(p.target_speed_mean, p.target_speed_std))
            self.next_retarget = t + self.RETARGET_S * (0.6 + 0.8 * self.rng.random())

        if self.mode == "drive":
            if speed > 5.0 and self.rng.random() < p.stop_frequency * dt / 60.0:
                self.mode = "stop_brake"
        if self.mode == "stop_brake":
            if speed < 0.5:
                self.mode = "stop_dwell"
                self.dwell_until = t + 2.0 + 4.0 * self.rng.random()
            else:
                self.pedal = 0.0
                return 0.0, max(0.2, p.brake_intensity)
        if self.mode == "stop_dwell":
            if t < self.dwell_until:
                # impatient drivers blip the throttle while waiting
                blip = min(abs(p.pedal_jitter * self.rng.standard_normal()), 0.3)
                self.pedal = 0.0
                return blip, 0.3
            self.mode = "drive"

        err = self.target - speed
        desired = min(max(self.KP * err, 0.0), 1.0)
        desired = min(max(desired + p.pedal_jitter * self.rng.standard_normal(), 0.0), 1.0)
        ramp = (0.3 + 2.7 * p.pedal_aggressiveness) * dt
        self.pedal += min(max(desired - self.pedal, -ramp), ramp)
        self.pedal = min(max(self.pedal, 0.0), 1.0)
        brake = 0.0
        if err < -4.0:
            brake = min(1.0, 0.3 * p.brake_intensity + 0.02 * (-err))
            self.pedal = 0.0
        return self.pedal, brake


# --- offline traffic generation ---

PLANT_TICK = 0.01


def generate_traffic(
    profile: DriverProfile,
    duration: float,
    seed: int,
    *,
    driver_label: str = UNKNOWN,
    params: PlantParams = DEFAULT_PLANT,
) -> Trace:
    """Deterministic synthetic trace for (profile, seed, duration)."""
    if duration <= 0:
        raise ValueError("duration must be positive")
    steps = int(round(duration / PLANT_TICK))
    brain = DriverBrain(profile, seed)
    state = PlantState()
    speed = np.empty(steps)
    rpm = np.empty(steps)
    pedal = np.empty(steps)
    for i in range(steps):
        t = i * PLANT_TICK
        p, b = brain.step(t, state.speed, PLANT_TICK)
        state = plant_step(state, p, [], PLANT_TICK, brake=b, params=params)
        speed[i] = state.speed
        rpm[i] = state.rpm
        pedal[i] = state.accelerator

    all_ts, all_ids, all_dlc, all_pay = [], [], [], []

    def emit(arb_id: int, period: float, offset: float, payload_fn):
        base = np.arange(offset, duration, period)
        jitter = period * EMISSION_JITTER_FRAC
        rng = np.random.default_rng([seed & 0x7FFFFFFF, arb_id])
        times = np.clip(base + rng.uniform(-jitter, jitter, len(base)), 0.0, None)
        idx = np.minimum((times / PLANT_TICK).astype(np.int64), steps - 1)
        pay, dlc = payload_fn(times, idx)
        all_ts.append(times)
        all_ids.append(np.full(len(times), arb_id, np.uint32))
        all_dlc.append(np.full(len(times), dlc, np.uint8))
        all_pay.append(pay)

    def powertrain(times, idx):
        pay = np.zeros((len(times), 8), np.uint8)
        quarter = np.clip(rpm[idx] * 4.0, 0, 0xFFFF).astype(np.uint16)
        pay[:, 0] = 0x80
        pay[:, 1] = 0x20
        pay[:, 2] = quarter >> 8
        pay[:, 3] = quarter & 0xFF
        return pay, 8

    def speed_pay(times, idx):
        pay = np.zeros((len(times), 8), np.uint8)
        centi = np.clip(speed[idx] * 100.0, 0, 0xFFFF).astype(np.uint16)
        pay[:, 0] = centi >> 8
        pay[:, 1] = centi & 0xFF
        return pay, 4

    def accel_pay(times, idx):
        pay = np.zeros((len(times), 8), np.uint8)
        pay[:, 2] = np.clip(pedal[idx] * 255.0, 0, 255).astype(np.uint8)
        return pay, 8

    emit(POWERTRAIN_ID, SYNTHETIC_ID_MAP[POWERTRAIN_ID], 0.0, powertrain)
    emit(SPEED_ID, SYNTHETIC_ID_MAP[SPEED_ID], 0.0023, speed_pay)
    emit(ACCEL_ID, SYNTHETIC_ID_MAP[ACCEL_ID], 0.0041, accel_pay)
    for j, (fid, period) in enumerate(sorted(FILLER_IDS.items())):
        def filler(times, idx, fid=fid):
            pay = np.zeros((len(times), 8), np.uint8)
            # 4-bit rolling counter with a per-trace starting phase; it wraps
            # hundreds of times per window, so its statistics are neither
            # time- nor trace-locked
            phase = np.random.default_rng([seed & 0x7FFFFFFF, fid, 1]).integers(16)
            pay[:, 0] = (phase + np.arange(len(times))) & 0x0F
            pay[:, 1] = fid & 0xFF
            pay[:, 2] = (fid >> 4) & 0xFF
            return pay, 8 if fid % 16 else 4
        emit(fid, period, ((j * 7 + 3) % 17) * 1e-4, filler)

    ts = np.concatenate(all_ts)
    order = np.argsort(ts, kind="stable")
    block = FrameBlock(
        ts[order],
        np.concatenate(all_ids)[order],
        np.zeros(len(ts), np.uint8),
        np.concatenate(all_dlc)[order],
        np.concatenate(all_pay)[order],
        np.zeros(len(ts), np.uint16),
        ["can0"],
    )
    meta = TraceMeta(driver_label=driver_label, vehicle="synthetic",
                     device=Device.SYNTHETIC, route_type=TraceMeta().route_type)
    return Trace(meta, block)


# --- live plant on the bus ---

class PlantNode:
    """Plant attached to a virtual bus: ticks in bus time, consumes
    injected disable frames, and emits per the synthetic ID map."""

    def __init__(self, bus: VirtualBus, profile: DriverProfile, seed: int,
                 *, driver=None, params: PlantParams = DEFAULT_PLANT,
                 node_id: str = "plant"):
        self.bus = bus
        self.profile = profile
        self.params = params
        self.seed = seed
        self.brain = DriverBrain(profile, seed)
        self.driver = driver  # optional callable (t, speed) -> (pedal, brake)
        self.state = PlantState(clock=bus.now)
        self.node = bus.attach(node_id, collect=False, on_frame=self._on_frame)
        self._pending: list[CanFrame] = []
        self._osc = 0
        self._stopped = False
        self._start = bus.now
        bus.schedule(self._start + PLANT_TICK, self._tick)
        self._schedule_emitter(POWERTRAIN_ID, 0.0, self._powertrain_frame)
        self._schedule_emitter(SPEED_ID, 0.0023, self._speed_frame)
        self._schedule_emitter(ACCEL_ID, 0.0041, self._accel_frame)
        for j, fid in enumerate(sorted(FILLER_IDS)):
            self._schedule_emitter(fid, ((j * 7 + 3) % 17) * 1e-4,
                                   self._make_filler(fid))

    def _on_frame(self, frame: CanFrame) -> None:
        if frame.arb_id == POWERTRAIN_ID and frame.data == DISABLE_PAYLOAD:
            self._pending.append(frame)

    def stop(self) -> None:
        self._stopped = True

    def _tick(self) -> None:
        if self._stopped:
            return
        t = self.state.clock
        if self.driver is not None:
            pedal, brake = self.driver(t - self._start, self.state.speed)
        else:
            pedal, brake = self.brain.step(t - self._start, self.state.speed, PLANT_TICK)
        injected, self._pending = self._pending, []
        self.state = plant_step(self.state, pedal, injected, PLANT_TICK,
                                brake=brake, params=self.params)
        self.bus.schedule(t + PLANT_TICK, self._tick)

    def _schedule_emitter(self, arb_id: int, offset: float, frame_fn) -> None:
        """Emit on the ID's period grid with the same jitter model as
        generate_traffic, so live and offline traffic are statistically
        interchangeable."""
        period = SYNTHETIC_ID_MAP[arb_id]
        jitter = period * EMISSION_JITTER_FRAC
        rng = np.random.default_rng([self.seed & 0x7FFFFFFF, arb_id])
        base = self._start + offset
        k = 0

        def emit():
            nonlocal k
            if self._stopped:
                return
            self.node.inject(frame_fn())
            k += 1
            nxt = base + k * period + rng.uniform(-jitter, jitter)
            self.bus.schedule(max(nxt, self.bus.now), emit)

        first = max(base + rng.uniform(-jitter, jitter), self._start + 1e-9)
        self.bus.schedule(first, emit)

    def _powertrain_frame(self) -> CanFrame:
        rpm = self.state.rpm
        if self.state.injection_active:
            # emitted value alternates between the injected zero and true rpm
            self._osc ^= 1
            if self._osc:
                rpm = 0.0
        quarter = int(min(max(rpm * 4.0, 0), 0xFFFF))
        return CanFrame(0.0, "can0", POWERTRAIN_ID,
                        bytes([0x80, 0x20, quarter >> 8, quarter & 0xFF, 0, 0, 0, 0]))

    def _speed_frame(self) -> CanFrame:
        centi = int(min(max(self.state.speed * 100.0, 0), 0xFFFF))
        return CanFrame(0.0, "can0", SPEED_ID, bytes([centi >> 8, centi & 0xFF, 0, 0]))

    def _accel_frame(self) -> CanFrame:
        b = int(min(max(self.state.accelerator * 255.0, 0), 255))
        return CanFrame(0.0, "can0", ACCEL_ID, bytes([0, 0, b, 0, 0, 0, 0, 0]))

    def _make_filler(self, fid: int):
        phase = np.random.default_rng([self.seed & 0x7FFFFFFF, fid, 1]).integers(16)
        counter = [int(phase)]

        def build() -> CanFrame:
            data = bytes([counter[0] & 0x0F, fid & 0xFF, (fid >> 4) & 0xFF, 0, 0, 0, 0, 0])
            dlc = 8 if fid % 16 else 4
            counter[0] += 1
            return CanFrame(0.0, "can0", fid, data[:dlc])

        return build


def attach_plant(bus: VirtualBus, profile: DriverProfile, seed: int, **kw) -> PlantNode:
    return PlantNode(bus, profile, seed, **kw)


# --- timestamped command scripts (one "time action value" per line) ---

def parse_script(text: str) -> list[tuple[float, str, str]]:
    events = []
    for lno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 3:
            raise ValueError(f"script line {lno}: expected 'time action value'")
        events.append((float(parts[0]), parts[1], parts[2]))
    events.sort(key=lambda e: e[0])
    return events


class ScriptedDriver:
    """Driver replaying a pedal/brake script; values hold until changed."""

    def __init__(self, events: list[tuple[float, str, str]]):
        self.events = [(t, a, float(v)) for t, a, v in events if a in ("pedal", "brake")]
        self.pedal = 0.0
        self.brake = 0.0
        self._i = 0

    def __call__(self, t: float, speed: float) -> tuple[float, float]:
        while self._i < len(self.events) and self.events[self._i][0] <= t:
            _, action, value = self.events[self._i]
            if action == "pedal":
                self.pedal = value
            else:
                self.brake = value
            self._i += 1
        return self.pedal, self.brake


class Injector:
    """Repeatedly injects a fixed payload at a fixed period (attack rig)."""

    def __init__(self, bus: VirtualBus, payload: CanFrame = None, period: float = 0.001,
                 node_id: str = "injector"):
        self.bus = bus
        self.payload = payload or CanFrame(0.0, "can0", POWERTRAIN_ID, DISABLE_PAYLOAD)
        self.period = period
        self.node = bus.attach(node_id, collect=False)
        self.active = False
        self.sent = 0

    def start(self) -> None:
        if self.active:
            return
        self.active = True
        self.bus.schedule(self.bus.now + self.period, self._emit)

    def stop(self) -> None:
        self.active = False

    def _emit(self) -> None:
        if not self.active:
            return
        self.node.inject(self.payload)
        self.sent += 1
        self.bus.schedule(self.bus.now + self.period, self._emit)
