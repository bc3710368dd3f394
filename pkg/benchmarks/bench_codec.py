#!/usr/bin/env python3
"""Benchmark the compiled candump codec against the pure-Python fallback.

Generates synthetic traffic, serializes it once, then times parse and
format on both lanes over identical inputs.

    python benchmarks/bench_codec.py [--frames N] [--repeat R]
"""

import argparse
import statistics
import sys
import time

from canguard import _codec_py
from canguard.simulator import PROFILE_PRESETS, generate_traffic

try:
    from canguard import _codec_c
except ImportError:
    _codec_c = None


def timeit(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times), statistics.median(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--frames", type=int, default=500_000)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()

    duration = args.frames / 1120.0  # synthetic map aggregate rate
    trace = generate_traffic(PROFILE_PRESETS["calm"], duration, seed=0)
    block = trace.block
    text = block.to_candump_text()
    n = len(block)
    mb = len(text) / 1e6
    print(f"dataset: {n} frames, {mb:.1f} MB of candump text\n")

    lanes = [("python", _codec_py)]
    if _codec_c is not None:
        lanes.append(("compiled", _codec_c))
    else:
        print("compiled lane unavailable (extension not built)", file=sys.stderr)

    results = {}
    for name, impl in lanes:
        best_p, med_p = timeit(lambda: impl.parse_block(text), args.repeat)
        parsed = impl.parse_block(text)
        assert parsed.count == n and not parsed.errors
        fmt = lambda: impl.format_block(parsed.ts, parsed.chan, parsed.channels,
                                        parsed.ids, parsed.flags, parsed.dlc,
                                        parsed.payload)
        assert fmt() == text
        best_f, med_f = timeit(fmt, args.repeat)
        results[name] = (best_p, best_f)
        print(f"{name:>9}: parse {best_p:.3f} s ({n / best_p / 1e6:.2f} Mframes/s)   "
              f"format {best_f:.3f} s ({n / best_f / 1e6:.2f} Mframes/s)")

    if len(results) == 2:
        sp_p = results["python"][0] / results["compiled"][0]
        sp_f = results["python"][1] / results["compiled"][1]
        print(f"\nspeedup: parse {sp_p:.1f}x, format {sp_f:.1f}x")


if __name__ == "__main__":
    main()
