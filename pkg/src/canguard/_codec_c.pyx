# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled candump codec lane (hot kernels for parse and serialize).

Mirrors ``_codec_py`` exactly; lane parity is enforced by tests.
"""

from libc.string cimport memchr, memcpy

import numpy as np

cimport numpy as cnp

cnp.import_array()

from ._codec_py import ParsedBlock

DEF MAX_STANDARD_ID = 0x7FF
DEF MAX_EXTENDED_ID = 0x1FFFFFFF
DEF FLAG_EXTENDED = 0x01
DEF FLAG_REMOTE = 0x02


cdef inline int hexval(unsigned char c) noexcept nogil:
    if 0x30 <= c <= 0x39:
        return c - 0x30
    if 0x41 <= c <= 0x46:
        return c - 0x41 + 10
    if 0x61 <= c <= 0x66:
        return c - 0x61 + 10
    return -1


def parse_block(bytes data, int base_line=1):
    """Parse newline-separated candump lines into columns (see _codec_py)."""
    cdef const unsigned char* buf = data
    cdef Py_ssize_t size = len(data)
    cdef Py_ssize_t pos = 0, eol, line_len, i, j
    cdef int line_no = base_line - 1
    cdef Py_ssize_t cap = 0

    # upper bound on frames = number of lines
    for i in range(size):
        if buf[i] == 0x0A:
            cap += 1
    cap += 1

    cdef cnp.ndarray[cnp.float64_t, ndim=1] ts = np.empty(cap, dtype=np.float64)
    cdef cnp.ndarray[cnp.uint32_t, ndim=1] ids = np.empty(cap, dtype=np.uint32)
    cdef cnp.ndarray[cnp.uint8_t, ndim=1] flags = np.zeros(cap, dtype=np.uint8)
    cdef cnp.ndarray[cnp.uint8_t, ndim=1] dlc = np.zeros(cap, dtype=np.uint8)
    cdef cnp.ndarray[cnp.uint8_t, ndim=2] payload = np.zeros((cap, 8), dtype=np.uint8)
    cdef cnp.ndarray[cnp.uint16_t, ndim=1] chan = np.zeros(cap, dtype=np.uint16)

    channels = []
    chan_index = {}
    errors = []
    cdef Py_ssize_t n = 0

    cdef const unsigned char* line
    cdef Py_ssize_t m, sec_start, usec_start, ch_start, id_start, data_start
    cdef long long sec, usec
    cdef unsigned long long arb
    cdef int hv, fl, id_digits, nib_count, err
    cdef unsigned char byte_acc

    while pos <= size:
        eol = pos
        while eol < size and buf[eol] != 0x0A:
            eol += 1
        line = buf + pos
        line_len = eol - pos
        line_no += 1
        pos = eol + 1
        if pos > size + 1:
            break
        # strip trailing whitespace/CR
        m = line_len
        while m > 0 and (line[m - 1] == 0x20 or line[m - 1] == 0x09 or line[m - 1] == 0x0D):
            m -= 1
        if m == 0:
            if eol >= size:
                break
            continue

        # --- timestamp ---
        if line[0] != 0x28:  # '('
            errors.append((line_no, 1, "malformed", "line must start with '('"))
            continue
        i = 1
        sec_start = i
        sec = 0
        while i < m and 0x30 <= line[i] <= 0x39:
            sec = sec * 10 + (line[i] - 0x30)
            i += 1
        if i == sec_start or i - sec_start > 12:
            errors.append((line_no, i + 1, "timestamp", "bad seconds field"))
            continue
        if i >= m or line[i] != 0x2E:  # '.'
            errors.append((line_no, i + 1, "timestamp", "expected '.' in timestamp"))
            continue
        i += 1
        usec_start = i
        usec = 0
        while i < m and 0x30 <= line[i] <= 0x39:
            usec = usec * 10 + (line[i] - 0x30)
            i += 1
        if i - usec_start != 6:
            errors.append((line_no, usec_start + 1, "timestamp",
                           "timestamp needs exactly 6 fractional digits"))
            continue
        if i >= m or line[i] != 0x29:  # ')'
            errors.append((line_no, i + 1, "timestamp", "unterminated timestamp"))
            continue
        i += 1

        # --- channel ---
        if i >= m or line[i] != 0x20:
            errors.append((line_no, i + 1, "malformed", "expected space after timestamp"))
            continue
        while i < m and line[i] == 0x20:
            i += 1
        ch_start = i
        while i < m and line[i] != 0x20:
            i += 1
        if i == ch_start:
            errors.append((line_no, ch_start + 1, "malformed", "missing channel"))
            continue
        ch = bytes(line[ch_start:i])
        while i < m and line[i] == 0x20:
            i += 1

        # --- arbitration id ---
        id_start = i
        arb = 0
        while i < m:
            hv = hexval(line[i])
            if hv < 0:
                break
            arb = (arb << 4) | <unsigned long long>hv
            i += 1
        id_digits = <int>(i - id_start)
        if i >= m or line[i] != 0x23:  # '#'
            errors.append((line_no, i + 1, "malformed", "expected '#' after arbitration id"))
            continue
        if id_digits != 3 and id_digits != 8:
            errors.append((line_no, id_start + 1, "malformed",
                           "arbitration id must be 3 or 8 hex digits"))
            continue
        fl = 0
        if id_digits == 8:
            fl |= FLAG_EXTENDED
            if arb > MAX_EXTENDED_ID:
                errors.append((line_no, id_start + 1, "id_range",
                               f"extended id 0x{arb:X} exceeds 29 bits"))
                continue
        elif arb > MAX_STANDARD_ID:
            errors.append((line_no, id_start + 1, "id_range",
                           f"standard id 0x{arb:X} exceeds 11 bits"))
            continue
        i += 1

        # --- data field ---
        err = 0
        if i < m and line[i] == 0x52:  # 'R'
            fl |= FLAG_REMOTE
            i += 1
            if i != m:
                errors.append((line_no, i + 1, "malformed", "trailing garbage after data field"))
                continue
        else:
            data_start = i
            nib_count = 0
            byte_acc = 0
            while i < m:
                hv = hexval(line[i])
                if hv < 0:
                    break
                if nib_count < 16:
                    if nib_count & 1:
                        payload[n, nib_count >> 1] = (byte_acc << 4) | <unsigned char>hv
                    else:
                        byte_acc = <unsigned char>hv
                nib_count += 1
                i += 1
            if nib_count & 1:
                errors.append((line_no, data_start + 1, "odd_hex",
                               "odd number of data hex digits"))
                err = 1
            elif nib_count > 16:
                errors.append((line_no, data_start + 1, "data_too_long",
                               "data field exceeds 8 bytes"))
                err = 1
            elif i != m:
                errors.append((line_no, i + 1, "malformed", "trailing garbage after data field"))
                err = 1
            if err:
                for j in range(8):
                    payload[n, j] = 0
                continue
            dlc[n] = <unsigned char>(nib_count >> 1)

        idx = chan_index.get(ch)
        if idx is None:
            idx = len(channels)
            chan_index[ch] = idx
            channels.append(ch.decode("ascii", "replace"))
        ts[n] = sec + usec * 1e-6
        ids[n] = <unsigned int>arb
        flags[n] = <unsigned char>fl
        chan[n] = <unsigned short>idx
        n += 1
        if eol >= size:
            break

    return ParsedBlock(n, ts[:n], ids[:n], flags[:n], dlc[:n], payload[:n], chan[:n],
                       channels, errors)


cdef inline Py_ssize_t write_uint(unsigned char* out, unsigned long long v) noexcept nogil:
    cdef unsigned char tmp[24]
    cdef Py_ssize_t k = 0, w = 0
    if v == 0:
        out[0] = 0x30
        return 1
    while v > 0:
        tmp[k] = 0x30 + <unsigned char>(v % 10)
        v //= 10
        k += 1
    while k > 0:
        k -= 1
        out[w] = tmp[k]
        w += 1
    return w


cdef inline unsigned char hexdigit(unsigned int v) noexcept nogil:
    return 0x30 + v if v < 10 else 0x41 + v - 10


def format_block(cnp.ndarray[cnp.float64_t, ndim=1] ts,
                 cnp.ndarray[cnp.uint16_t, ndim=1] chan,
                 list channels,
                 cnp.ndarray[cnp.uint32_t, ndim=1] ids,
                 cnp.ndarray[cnp.uint8_t, ndim=1] flags,
                 cnp.ndarray[cnp.uint8_t, ndim=1] dlc,
                 cnp.ndarray[cnp.uint8_t, ndim=2] payload) -> bytes:
    """Serialize columns back to candump text, one newline-terminated line each."""
    cdef Py_ssize_t n = ts.shape[0]
    cdef list chan_bytes = [c.encode("ascii") for c in channels]
    cdef Py_ssize_t max_ch = 1
    for c in chan_bytes:
        if len(c) > max_ch:
            max_ch = len(c)
    # "(", <=20 sec digits, ".", 6, ") ", chan, " ", 8 id digits, "#", 16 data, "\n"
    cdef bytearray out = bytearray(n * (1 + 20 + 1 + 6 + 2 + max_ch + 1 + 8 + 1 + 16 + 1))
    cdef unsigned char* o = out
    cdef Py_ssize_t w = 0, i, j, clen
    cdef unsigned long long us, sec
    cdef unsigned int frac, arb
    cdef int fl, d
    cdef const unsigned char* cstr

    for i in range(n):
        us = <unsigned long long>(ts[i] * 1e6 + 0.5)
        sec = us // 1000000
        frac = <unsigned int>(us % 1000000)
        o[w] = 0x28; w += 1
        w += write_uint(o + w, sec)
        o[w] = 0x2E; w += 1
        for j in range(5, -1, -1):
            o[w + j] = 0x30 + frac % 10
            frac //= 10
        w += 6
        o[w] = 0x29; w += 1
        o[w] = 0x20; w += 1
        cb = chan_bytes[chan[i]]
        cstr = cb
        clen = len(cb)
        memcpy(o + w, cstr, clen)
        w += clen
        o[w] = 0x20; w += 1
        arb = ids[i]
        fl = flags[i]
        d = 8 if fl & FLAG_EXTENDED else 3
        for j in range(d - 1, -1, -1):
            o[w + j] = hexdigit(arb & 0xF)
            arb >>= 4
        w += d
        o[w] = 0x23; w += 1
        if fl & FLAG_REMOTE:
            o[w] = 0x52; w += 1
        else:
            for j in range(dlc[i]):
                o[w] = hexdigit(payload[i, j] >> 4); w += 1
                o[w] = hexdigit(payload[i, j] & 0xF); w += 1
        o[w] = 0x0A; w += 1

    return bytes(out[:w])
