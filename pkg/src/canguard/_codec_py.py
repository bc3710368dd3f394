"""Pure-Python candump codec lane.

Behaviorally identical to the compiled lane in ``_codec_c``; used as the
import-time fallback and as the reference half of the lane-parity tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MAX_STANDARD_ID = 0x7FF
MAX_EXTENDED_ID = 0x1FFF_FFFF
FLAG_EXTENDED = 0x01
FLAG_REMOTE = 0x02

_HEX = {c: i for i, c in enumerate(b"0123456789ABCDEF")}
_HEX.update({c: i for i, c in enumerate(b"0123456789abcdef")})


@dataclass(slots=True)
class ParsedBlock:
    """Column-oriented result of parsing a block of candump text."""

    count: int
    ts: np.ndarray        # float64 seconds
    ids: np.ndarray       # uint32
    flags: np.ndarray     # uint8, FLAG_* bits
    dlc: np.ndarray       # uint8
    payload: np.ndarray   # uint8 (count, 8), zero-padded
    chan: np.ndarray      # uint16 index into channels
    channels: list[str]
    errors: list[tuple[int, int, str, str]] = field(default_factory=list)
    # errors: (line_no, col, kind, message)


def _alloc(n: int):
    return (
        np.empty(n, dtype=np.float64),
        np.empty(n, dtype=np.uint32),
        np.zeros(n, dtype=np.uint8),
        np.zeros(n, dtype=np.uint8),
        np.zeros((n, 8), dtype=np.uint8),
        np.zeros(n, dtype=np.uint16),
    )


def parse_block(data: bytes, base_line: int = 1) -> ParsedBlock:
    """Parse newline-separated candump lines into columns.

    Malformed lines are skipped and reported in ``errors`` with 1-based
    line/column positions; blank lines are ignored.
    """
    lines = data.split(b"\n")
    ts, ids, flags, dlc, payload, chan = _alloc(len(lines))
    channels: list[str] = []
    chan_index: dict[bytes, int] = {}
    errors: list[tuple[int, int, str, str]] = []
    n = 0

    for off, raw in enumerate(lines):
        line = raw.rstrip(b"\r\t ")
        if not line:
            continue
        line_no = base_line + off
        try:
            t, ch, arb, fl, body = _parse_line(line)
        except _Err as e:
            errors.append((line_no, e.col, e.kind, e.msg))
            continue
        idx = chan_index.get(ch)
        if idx is None:
            idx = chan_index[ch] = len(channels)
            channels.append(ch.decode("ascii", "replace"))
        ts[n] = t
        ids[n] = arb
        flags[n] = fl
        dlc[n] = len(body)
        payload[n, : len(body)] = list(body)
        chan[n] = idx
        n += 1

    return ParsedBlock(n, ts[:n], ids[:n], flags[:n], dlc[:n], payload[:n], chan[:n], channels, errors)


class _Err(Exception):
    def __init__(self, col: int, kind: str, msg: str):
        self.col = col
        self.kind = kind
        self.msg = msg


def _parse_line(line: bytes):
    m = len(line)
    if line[0:1] != b"(":
        raise _Err(1, "malformed", "line must start with '('")
    i = 1
    sec_start = i
    while i < m and 0x30 <= line[i] <= 0x39:
        i += 1
    if i == sec_start or i - sec_start > 12:
        raise _Err(i + 1, "timestamp", "bad seconds field")
    sec = int(line[sec_start:i])
    if line[i : i + 1] != b".":
        raise _Err(i + 1, "timestamp", "expected '.' in timestamp")
    i += 1
    usec_start = i
    while i < m and 0x30 <= line[i] <= 0x39:
        i += 1
    if i - usec_start != 6:
        raise _Err(usec_start + 1, "timestamp", "timestamp needs exactly 6 fractional digits")
    usec = int(line[usec_start:i])
    if line[i : i + 1] != b")":
        raise _Err(i + 1, "timestamp", "unterminated timestamp")
    i += 1

    if line[i : i + 1] != b" ":
        raise _Err(i + 1, "malformed", "expected space after timestamp")
    while i < m and line[i] == 0x20:
        i += 1
    ch_start = i
    while i < m and line[i] != 0x20:
        i += 1
    if i == ch_start:
        raise _Err(ch_start + 1, "malformed", "missing channel")
    ch = line[ch_start:i]
    while i < m and line[i] == 0x20:
        i += 1

    id_start = i
    arb = 0
    while i < m and line[i] in _HEX:
        arb = (arb << 4) | _HEX[line[i]]
        i += 1
    id_digits = i - id_start
    if line[i : i + 1] != b"#":
        raise _Err(i + 1, "malformed", "expected '#' after arbitration id")
    if id_digits not in (3, 8):
        raise _Err(id_start + 1, "malformed", "arbitration id must be 3 or 8 hex digits")
    fl = 0
    if id_digits == 8:
        fl |= FLAG_EXTENDED
        if arb > MAX_EXTENDED_ID:
            raise _Err(id_start + 1, "id_range", f"extended id 0x{arb:X} exceeds 29 bits")
    elif arb > MAX_STANDARD_ID:
        raise _Err(id_start + 1, "id_range", f"standard id 0x{arb:X} exceeds 11 bits")
    i += 1

    if line[i : i + 1] == b"R":
        return _finish(line, i + 1, sec, usec, ch, arb, fl | FLAG_REMOTE, b"")
    data_start = i
    nibbles = []
    while i < m and line[i] in _HEX:
        nibbles.append(_HEX[line[i]])
        i += 1
    if len(nibbles) % 2:
        raise _Err(data_start + 1, "odd_hex", "odd number of data hex digits")
    if len(nibbles) > 16:
        raise _Err(data_start + 1, "data_too_long", "data field exceeds 8 bytes")
    body = bytes((nibbles[j] << 4) | nibbles[j + 1] for j in range(0, len(nibbles), 2))
    return _finish(line, i, sec, usec, ch, arb, fl, body)


def _finish(line, i, sec, usec, ch, arb, fl, body):
    if i != len(line):
        raise _Err(i + 1, "malformed", "trailing garbage after data field")
    return sec + usec * 1e-6, ch, arb, fl, body


def format_block(ts, chan, channels, ids, flags, dlc, payload) -> bytes:
    """Serialize columns back to candump text, one newline-terminated line each."""
    out = []
    for i in range(len(ts)):
        us = round(float(ts[i]) * 1e6)
        fl = int(flags[i])
        arb = int(ids[i])
        ident = f"{arb:08X}" if fl & FLAG_EXTENDED else f"{arb:03X}"
        body = "R" if fl & FLAG_REMOTE else bytes(payload[i, : dlc[i]]).hex().upper()
        out.append(f"({us // 1_000_000}.{us % 1_000_000:06d}) {channels[chan[i]]} {ident}#{body}\n")
    return "".join(out).encode("ascii")
