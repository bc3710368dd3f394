"""Acceptance gate: every criterion runs at its stated tolerance and
prints one PASS/FAIL line (to the real stdout, visible under capture)."""

import functools
import json
import sys
import time
from collections import Counter
from pathlib import Path

import numpy as np
import pytest

from canguard.bus import BusClock, Capture, VirtualBus
from canguard.features import (
    WindowSpec,
    apply_standardizer,
    extract_windows,
    fit_standardizer,
)
from canguard.frames import (
    CanFrame,
    decode_obd_request,
    decode_obd_response,
    parse_candump_line,
    write_candump_line,
)
from canguard.guard import EventKind, GuardConfig, GuardRunner, OverrideScheme
from canguard.models import Verdict, knn_train, knn_predict
from canguard.models.autoencoder import init_params, loss_and_grads
from canguard.models.kmeans import kmeans_fit, kmeans_decide
from canguard.simulator import (
    DISABLE_PAYLOAD,
    POWERTRAIN_ID,
    PROFILE_PRESETS,
    ScriptedDriver,
    attach_plant,
    parse_script,
    synthetic_vocab,
)
from canguard.traces import compute_stats, load_trace
from canguard.simulator import generate_traffic

OWNER = "female-all-ages-5"
THIEF = "male-under30-1"


def criterion(name, budget_s):
    def deco(fn):
        @functools.wraps(fn)
        def wrapper(*args, **kw):
            start = time.perf_counter()
            try:
                fn(*args, **kw)
            except BaseException:
                print(f"FAIL: {name}", file=sys.__stdout__, flush=True)
                raise
            elapsed = time.perf_counter() - start
            print(f"PASS: {name} ({elapsed:.1f}s, budget {budget_s:.0f}s)",
                  file=sys.__stdout__, flush=True)
            assert elapsed < budget_s, f"{name} exceeded its {budget_s}s runtime budget"
        return wrapper
    return deco


@criterion("codec fidelity: 60 fixture lines round-trip, 26 ids, ~1666.7 Hz", 1.0)
def test_codec_fidelity(raw_lines, obd_lines, raw_log_path):
    lines = raw_lines + obd_lines
    assert len(lines) == 60
    for line in lines:
        assert write_candump_line(parse_candump_line(line)) == line
    stats = compute_stats(load_trace(raw_log_path))
    assert stats.unique_ids == 26
    assert abs(stats.mean_rate - 1666.7) <= 0.1
    assert 1000.0 <= stats.mean_rate <= 2500.0


@criterion("OBD decode: query recognized, (256A+B)/4 oracle on 100 pairs", 1.0)
def test_obd_decode():
    query = parse_candump_line("(1751066848.336901) can0 7DF#02010C5555555555")
    req = decode_obd_request(query)
    assert req.mode == 0x01 and req.pid == 0x0C

    rng = np.random.default_rng(2024)
    for a, b in rng.integers(0, 256, size=(100, 2)):
        frame = CanFrame(0.0, "can0", 0x7E8,
                         bytes([0x04, 0x41, 0x0C, a, b, 0x55, 0x55, 0x55]))
        resp = decode_obd_response(frame)
        oracle = (256 * int(a) + int(b)) / 4  # hand-computed scaling
        assert resp.decoded_value == oracle


@criterion("oracle equivalence: knn brute force, kmeans monotone + fixture", 10.0)
def test_oracle_equivalence():
    from canguard.features import FeatureVector

    def fv(vals, label=None, t=0.0):
        vals = np.asarray(vals, float)
        return FeatureVector(vals, tuple(f"f{i}" for i in range(len(vals))), t, label)

    # k-NN vs exhaustive scan: 200 points x 50 queries, k in {1, 3, 5}
    rng = np.random.default_rng(7)
    X = rng.normal(size=(200, 5))
    labels = [OWNER, THIEF, "male-30-55-2"]
    y = [labels[i] for i in rng.integers(0, 3, 200)]
    train = [fv(x, label=l, t=float(i)) for i, (x, l) in enumerate(zip(X, y))]
    queries = rng.normal(size=(50, 5))

    def oracle(q, k):
        order = sorted(range(len(X)),
                       key=lambda i: (float(np.linalg.norm(X[i] - q)), y[i]))[:k]
        counts = Counter(y[i] for i in order)
        top = max(counts.values())
        return min((lab for lab in counts if counts[lab] == top),
                   key=lambda lab: (sum(float(np.linalg.norm(X[i] - q))
                                        for i in order if y[i] == lab), lab))

    for k in (1, 3, 5):
        model = knn_train(train, k)
        for q in queries:
            assert knn_predict(model, fv(q)) == oracle(q, k)

    # k-means inertia non-increasing across 100 seeded runs
    for seed in range(100):
        data = [fv(row) for row in np.random.default_rng(seed).normal(size=(30, 4))]
        hist = kmeans_fit(data, k=3, seed=seed).inertia_history
        assert all(b <= a + 1e-9 for a, b in zip(hist, hist[1:]))

    # 4-point fixture: enumeration-oracle optimum
    pts = [fv(p) for p in [[0, 0], [0, 1], [10, 10], [10, 11]]]
    model = kmeans_fit(pts, k=2, seed=0)
    got = sorted(map(tuple, np.round(model.centroids, 9)))
    assert got == [(0.0, 0.5), (10.0, 10.5)]


@criterion("gradient check: 6-4-2-4-6, every parameter, rel err < 1e-4", 30.0)
def test_gradient_check():
    rng = np.random.default_rng(17)
    X = rng.normal(size=(10, 6))
    weights, biases = init_params((6, 4, 2, 4, 6), seed=3)
    _, gw, gb = loss_and_grads(weights, biases, X)
    eps = 1e-5
    for arrs, grads in ((weights, gw), (biases, gb)):
        for A, G in zip(arrs, grads):
            it = np.nditer(A, flags=["multi_index"])
            while not it.finished:
                ix = it.multi_index
                old = A[ix]
                A[ix] = old + eps
                lp, _, _ = loss_and_grads(weights, biases, X)
                A[ix] = old - eps
                lm, _, _ = loss_and_grads(weights, biases, X)
                A[ix] = old
                fd = (lp - lm) / (2 * eps)
                rel = abs(G[ix] - fd) / max(abs(G[ix]), abs(fd), 1e-8)
                assert rel < 1e-4, f"param {ix}: rel err {rel:.2e}"
                it.iternext()


@criterion("synthetic separation: knn >= 95%, owner FRR <= 5%, FAR <= 20%", 300.0)
def test_synthetic_separation():
    spec = WindowSpec(60.0, 10.0, 100)
    vocab = synthetic_vocab()
    owner_trace = generate_traffic(PROFILE_PRESETS["calm"], 600.0, seed=101,
                                   driver_label=OWNER)
    thief_trace = generate_traffic(PROFILE_PRESETS["aggressive"], 600.0, seed=202,
                                   driver_label=THIEF)
    owner_vs = extract_windows(owner_trace, spec, vocab)
    thief_vs = extract_windows(thief_trace, spec, vocab)
    assert len(owner_vs) >= 50 and len(thief_vs) >= 50

    # supervised k-NN, time-based split: first 35 windows train, rest test
    owner_train, owner_test = owner_vs[:35], owner_vs[35:]
    thief_train, thief_test = thief_vs[:35], thief_vs[35:]
    std = fit_standardizer(owner_train + thief_train)
    knn = knn_train(apply_standardizer(std, owner_train + thief_train), k=5)
    test_set = apply_standardizer(std, owner_test + thief_test)
    correct = sum(knn_predict(knn, v) == v.label for v in test_set)
    accuracy = correct / len(test_set)
    assert accuracy >= 0.95, f"knn window accuracy {accuracy:.3f}"

    # owner-only k-means authenticator; every third owner window held out
    km_train = [v for i, v in enumerate(owner_vs) if i % 3]
    km_held = [v for i, v in enumerate(owner_vs) if not i % 3]
    std_o = fit_standardizer(km_train)
    km = kmeans_fit(apply_standardizer(std_o, km_train), k=4, seed=11,
                    quantile=0.99)
    frr = np.mean([kmeans_decide(km, v).verdict is Verdict.UNAUTHORIZED
                   for v in apply_standardizer(std_o, km_held)])
    far = np.mean([kmeans_decide(km, v).verdict is Verdict.AUTHORIZED
                   for v in apply_standardizer(std_o, thief_vs)])
    assert frr <= 0.05, f"owner FRR {frr:.3f}"
    assert far <= 0.20, f"thief FAR {far:.3f}"


@criterion("workflow conformance: warning, injection, overrides, plant physics", 120.0)
def test_workflow_conformance():
    secret = b"acceptance-secret"
    scheme = OverrideScheme(secret, "acceptance-vehicle")

    def scenario(pedal_script, fail_at, override_at=None, override_code=None,
                 until=60.0, grace=10.0):
        bus = VirtualBus(BusClock.instant())
        cap = Capture(bus)
        plant = attach_plant(bus, PROFILE_PRESETS["calm"], seed=0,
                             driver=ScriptedDriver(parse_script(pedal_script)))
        runner = GuardRunner(
            bus, None,
            GuardConfig(initial_window=1.0, grace_period=grace, smoothing=1,
                        simulated=True),
            WindowSpec(5, 1, 10), scheme=scheme)
        bus.schedule(fail_at, lambda: runner.submit_simulated("fail"))
        if override_at is not None:
            bus.schedule(override_at, lambda: runner.submit_override(override_code))
        speeds = []
        bus.schedule(0.5, lambda: _sample(bus, plant, speeds))
        bus.run(until=until)
        runner.stop()
        return bus, cap, plant, runner, speeds

    def _sample(bus, plant, speeds):
        speeds.append((bus.now, plant.state.speed, plant.state.accel_disabled))
        bus.schedule(bus.now + 0.5, lambda: _sample(bus, plant, speeds))

    # stage 1-3: warning issued, grace expiry, exact injection at 1 ms
    bus, cap, plant, runner, speeds = scenario(
        "0 pedal 0.8\n30 pedal 0.0\n", fail_at=5.0, until=60.0)
    events = runner.events
    warn = next(e for e in events if e.kind is EventKind.WARNING_ISSUED)
    assert warn.time == pytest.approx(5.0, abs=0.1)
    start = next(e for e in events if e.kind is EventKind.INJECTION_STARTED)
    assert start.time == pytest.approx(15.0, abs=0.1)  # grace 10 s
    injected = [f for f in cap.frames()
                if f.arb_id == POWERTRAIN_ID and f.data == DISABLE_PAYLOAD]
    assert injected, "no disable frames injected"
    assert all(f.data == DISABLE_PAYLOAD and f.arb_id == 0x0C9 for f in injected)
    spacing = np.diff([f.timestamp for f in injected])
    assert float(np.percentile(np.abs(spacing - 0.001), 95)) <= 0.002
    # pedal held 0.8 during injection: still accelerating until release at 30
    held = [s for t, s, d in speeds if 16.0 <= t <= 29.0]
    assert held[-1] > held[0], "plant should keep accelerating while pedal held"
    # after release: latch engages, speed never increases again
    after = [(t, s) for t, s, d in speeds if t >= 31.0]
    values = [s for _, s in after]
    assert all(b <= a + 1e-9 for a, b in zip(values, values[1:]))
    assert plant.state.accel_disabled

    # stage 4a: valid override during Warning: no injection ever
    grant = scheme.issue(300.0, now=0.0)
    bus, cap, plant, runner, _ = scenario(
        "0 pedal 0.5\n", fail_at=5.0, override_at=8.0, override_code=grant.code,
        until=30.0)
    assert runner.core.state.phase.value == "authenticated"
    assert not [f for f in cap.frames() if f.data == DISABLE_PAYLOAD]
    assert not [e for e in runner.events if e.kind is EventKind.INJECTION_STARTED]

    # stage 4b: valid override during Disabled: injection stops
    grant2 = scheme.issue(300.0, now=0.0)
    bus, cap, plant, runner, _ = scenario(
        "0 pedal 0.5\n", fail_at=2.0, override_at=20.0, override_code=grant2.code,
        until=40.0)
    stopped = next(e for e in runner.events if e.kind is EventKind.INJECTION_STOPPED)
    assert stopped.time == pytest.approx(20.0, abs=0.1)
    last_injection = max(f.timestamp for f in cap.frames()
                         if f.data == DISABLE_PAYLOAD)
    assert last_injection <= 20.0 + 1e-6
    assert runner.core.state.phase.value == "authenticated"

    # invalid override changes nothing
    bus, cap, plant, runner, _ = scenario(
        "0 pedal 0.5\n", fail_at=2.0, override_at=5.0, override_code="00000000",
        until=14.0, grace=30.0)
    rejected = [e for e in runner.events if e.kind is EventKind.OVERRIDE_REJECTED]
    assert rejected and runner.core.state.phase.value == "warning"


@criterion("determinism: seeded gen->features->train->eval->guard bit-identical", 300.0)
def test_determinism(tmp_path):
    from canguard.cli import main

    def pipeline(d: Path):
        d.mkdir(parents=True, exist_ok=True)
        assert main(["gen", "--profile", "calm", "--duration", "60", "--seed", "5",
                     "--driver", OWNER, "--out", str(d / "owner.log")]) == 0
        assert main(["gen", "--profile", "aggressive", "--duration", "60",
                     "--seed", "6", "--driver", THIEF,
                     "--out", str(d / "thief.log")]) == 0
        assert main(["features", str(d / "owner.log"), str(d / "thief.log"),
                     "--window", "5", "--stride", "1", "--min-frames", "50",
                     "--out", str(d / "features.csv")]) == 0
        assert main(["train", str(d / "features.csv"), "--model", "kmeans",
                     "--authorized", OWNER, "--seed", "7",
                     "--out", str(d / "model.json")]) == 0
        assert main(["eval", str(d / "model.json"), str(d / "features.csv"),
                     "--out", str(d / "metrics.json")]) == 0
        assert main(["guard", str(d / "model.json"), "--source", "trace",
                     "--trace", str(d / "thief.log"), "--grace", "5",
                     "--initial-window", "5", "--window", "5", "--stride", "1",
                     "--min-frames", "50", "--instant", "--seed", "8",
                     "--log", str(d / "events.ndjson")]) == 0

    a, b = tmp_path / "run-a", tmp_path / "run-b"
    pipeline(a)
    pipeline(b)
    files = ["owner.log", "thief.log", "features.csv", "model.json",
             "metrics.json", "events.ndjson"]
    for name in files:
        assert (a / name).read_bytes() == (b / name).read_bytes(), \
            f"{name} differs between identically-seeded runs"
