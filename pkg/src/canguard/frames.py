"""CAN frame model, candump text codec, and OBD-II query/response PDUs.

The candump line format is ``(<sec>.<usec6>) <channel> <HEXID>#<HEXDATA>``
with a 3-digit ID for standard (11-bit) frames and an 8-digit ID for
extended (29-bit) frames. Lowercase hex is accepted on input; output is
always uppercase with the timestamp printed to exactly six fractional
digits, so parse/serialize is a bijection on well-formed lines.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from . import _codec
from .errors import PARSE_ERROR_KINDS, CandumpParseError, ObdError

MAX_STANDARD_ID = 0x7FF
MAX_EXTENDED_ID = 0x1FFF_FFFF

FLAG_EXTENDED = 0x01
FLAG_REMOTE = 0x02


@dataclass(frozen=True, slots=True)
class CanFrame:
    """One timestamped CAN message; the atom of every pipeline."""

    timestamp: float
    channel: str
    arb_id: int
    data: bytes = b""
    is_extended: bool = False
    is_remote: bool = False

    def __post_init__(self):
        limit = MAX_EXTENDED_ID if self.is_extended else MAX_STANDARD_ID
        if not 0 <= self.arb_id <= limit:
            raise ValueError(f"arbitration id 0x{self.arb_id:X} out of range")
        if len(self.data) > 8:
            raise ValueError(f"data length {len(self.data)} exceeds 8 bytes")
        if not math.isfinite(self.timestamp) or self.timestamp < 0:
            raise ValueError(f"timestamp {self.timestamp!r} must be finite and >= 0")
        if self.is_remote and self.data:
            raise ValueError("remote frames carry no data")

    @property
    def dlc(self) -> int:
        return len(self.data)

    def id_text(self) -> str:
        """Canonical hex ID: 3 digits standard, 8 digits extended."""
        return f"{self.arb_id:08X}" if self.is_extended else f"{self.arb_id:03X}"


def parse_candump_line(line: str, line_no: int = 1) -> CanFrame:
    """Parse one candump log line into a CanFrame.

    Raises a kind-specific subclass of CandumpParseError carrying the line
    number and column on malformed input.
    """
    parsed = _codec.impl.parse_block(line.encode(), line_no)
    if parsed.errors:
        lno, col, kind, msg = parsed.errors[0]
        raise PARSE_ERROR_KINDS[kind](msg, lno, col)
    if parsed.count != 1:
        raise CandumpParseError("empty line", line_no, 1)
    return block_frame(parsed, 0)


def block_frame(parsed, i: int) -> CanFrame:
    """Materialize frame ``i`` of a parsed column block."""
    flags = int(parsed.flags[i])
    dlc = int(parsed.dlc[i])
    return CanFrame(
        timestamp=float(parsed.ts[i]),
        channel=parsed.channels[parsed.chan[i]],
        arb_id=int(parsed.ids[i]),
        data=bytes(parsed.payload[i, :dlc]),
        is_extended=bool(flags & FLAG_EXTENDED),
        is_remote=bool(flags & FLAG_REMOTE),
    )


def write_candump_line(frame: CanFrame) -> str:
    """Serialize a frame to candump text (no trailing newline)."""
    us = round(frame.timestamp * 1e6)
    body = "R" if frame.is_remote else frame.data.hex().upper()
    return f"({us // 1_000_000}.{us % 1_000_000:06d}) {frame.channel} {frame.id_text()}#{body}"


# --- OBD-II diagnostics (single-frame PDUs on the functional pair 0x7DF/0x7E8) ---

OBD_REQUEST_ID = 0x7DF
OBD_RESPONSE_ID = 0x7E8
OBD_PAD = 0x55
OBD_MODE_CURRENT_DATA = 0x01

PID_ENGINE_RPM = 0x0C
PID_VEHICLE_SPEED = 0x0D

#: pid -> (decoder over value bytes, unit, expected value-byte count)
PID_DECODERS = {
    PID_ENGINE_RPM: (lambda b: (256 * b[0] + b[1]) / 4.0, "rpm", 2),
    PID_VEHICLE_SPEED: (lambda b: float(b[0]), "km/h", 1),
}


@dataclass(frozen=True, slots=True)
class ObdRequest:
    mode: int = OBD_MODE_CURRENT_DATA
    pid: int = 0x00

    def __post_init__(self):
        if not 0 <= self.mode <= 0xFF or not 0 <= self.pid <= 0xFF:
            raise ValueError("mode and pid must be single bytes")


@dataclass(frozen=True, slots=True)
class ObdResponse:
    mode_echo: int
    pid: int
    value_bytes: bytes
    decoded_value: float | None = None
    unit: str | None = None


def encode_obd_request(req: ObdRequest, channel: str = "can0", timestamp: float = 0.0) -> CanFrame:
    """Build the 8-byte functional-broadcast query frame on 0x7DF."""
    data = bytes([0x02, req.mode, req.pid]) + bytes([OBD_PAD] * 5)
    return CanFrame(timestamp=timestamp, channel=channel, arb_id=OBD_REQUEST_ID, data=data)


def decode_obd_request(frame: CanFrame) -> ObdRequest:
    if frame.arb_id != OBD_REQUEST_ID:
        raise ObdError(f"not an OBD query: id 0x{frame.arb_id:03X} != 0x7DF")
    if len(frame.data) != 8 or frame.data[0] != 0x02:
        raise ObdError("query must be 8 bytes with length byte 0x02")
    return ObdRequest(mode=frame.data[1], pid=frame.data[2])


def encode_obd_response(
    mode: int,
    pid: int,
    value_bytes: bytes,
    channel: str = "can0",
    timestamp: float = 0.0,
) -> CanFrame:
    """Build a single-frame response on 0x7E8 (mode echoed with +0x40)."""
    if len(value_bytes) > 5:
        raise ObdError("single-frame response carries at most 5 value bytes")
    data = bytes([2 + len(value_bytes), mode + 0x40, pid]) + value_bytes
    data += bytes([OBD_PAD] * (8 - len(data)))
    return CanFrame(timestamp=timestamp, channel=channel, arb_id=OBD_RESPONSE_ID, data=data)


def decode_obd_response(frame: CanFrame) -> ObdResponse:
    """Decode a response frame; known PIDs (0x0C, 0x0D) get numeric values.

    Unknown PIDs pass through with raw value bytes and no decoded_value.
    """
    if frame.arb_id != OBD_RESPONSE_ID:
        raise ObdError(f"wrong responder id 0x{frame.arb_id:03X}, expected 0x7E8")
    if len(frame.data) < 3:
        raise ObdError("response shorter than length/mode/pid header")
    length = frame.data[0]
    if not 2 <= length <= len(frame.data) - 1:
        raise ObdError(f"length byte {length} inconsistent with payload")
    mode_echo, pid = frame.data[1], frame.data[2]
    if mode_echo < 0x40:
        raise ObdError(f"mode echo 0x{mode_echo:02X} lacks the +0x40 response offset")
    value = bytes(frame.data[3 : 3 + (length - 2)])
    decoder = PID_DECODERS.get(pid)
    if decoder is None:
        return ObdResponse(mode_echo, pid, value)
    func, unit, nbytes = decoder
    if len(value) != nbytes:
        raise ObdError(f"pid 0x{pid:02X} expects {nbytes} value bytes, got {len(value)}")
    return ObdResponse(mode_echo, pid, value, decoded_value=func(value), unit=unit)
