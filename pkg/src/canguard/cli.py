"""Command-line entry point: ingest, stats, features, train, eval, gen,
replay, guard, and the scripted anti-theft demo.

Exit codes: 0 success, 1 usage error, 2 data error, 3 model/schema
error. Randomized commands print their seed in the output header so
every run is reproducible. ``CANGUARD_DATA_ROOT`` is honored by ingest
and stats for relative trace paths.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import CODEC_BACKEND, __version__
from .bus import BusClock, Capture, VirtualBus, replay as bus_replay
from .errors import (
    BusError,
    CandumpParseError,
    CanguardError,
    DataFileError,
    SchemaMismatchError,
    TrainingError,
)
from .features import (
    WindowSpec,
    add_lag_features,
    apply_standardizer,
    build_schema,
    extract_windows,
    fit_pca,
    fit_standardizer,
    project_all,
    read_features_csv,
    to_matrix,
    vocab_from_schema,
    vocab_from_trace,
    write_features_csv,
)
from .guard import GuardConfig, GuardPhase, GuardRunner, OverrideScheme, run_guard
from .models import (
    AuthModel,
    Verdict,
    autoencoder_train,
    evaluate,
    kmeans_fit,
    knn_train,
    load_model,
    save_model,
)
from .simulator import (
    DriverBrain,
    PLANT_TICK,
    PROFILE_PRESETS,
    attach_plant,
    generate_traffic,
    resolve_profile,
    synthetic_vocab,
)
from .traces import (
    TraceMeta,
    UNKNOWN,
    compute_stats,
    load_trace,
    load_trip,
    normalize_driver_label,
    rebase,
    save_sidecar,
    scan_dataset,
    stats_table,
    write_trace,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_MODEL = 0, 1, 2, 3

RATE_BAND = (1000.0, 2500.0)
DEFAULT_SECRET = b"canguard-demo-secret"


def _data_path(p: str) -> Path:
    root = os.environ.get("CANGUARD_DATA_ROOT")
    path = Path(p)
    if root and not path.is_absolute() and not path.exists():
        candidate = Path(root) / path
        if candidate.exists():
            return candidate
    return path


def _meta_from_args(args, path: Path) -> TraceMeta:
    driver = args.driver
    if driver is None:
        for part in path.parts:
            if normalize_driver_label(part) != UNKNOWN:
                driver = part.lower()
                break
    return TraceMeta(driver_label=normalize_driver_label(driver or UNKNOWN),
                     vehicle=(args.vehicle or UNKNOWN).lower())


# --- commands ---

def cmd_ingest(args) -> int:
    records = []
    for spec in args.path:
        path = _data_path(spec)
        entries = []
        if path.is_dir():
            for m in scan_dataset(path):
                entries.append((m, list(m.segments) or [m.source_path]))
        else:
            entries.append((_meta_from_args(args, path), [str(path)]))
        for meta, files in entries:
            trace = (load_trip(files, meta=meta) if len(files) > 1
                     else load_trace(files[0], format=args.format, meta=meta))
            stats = compute_stats(trace)
            rec = {"source": trace.meta.source_path, "driver": trace.meta.driver_label,
                   "vehicle": trace.meta.vehicle,
                   "device": trace.meta.device.value if trace.meta.device else None,
                   "route_type": trace.meta.route_type.value,
                   "segments": list(trace.meta.segments),
                   "malformed_lines": len(trace.parse_errors),
                   **stats.to_record()}
            rec.pop("per_id")
            records.append(rec)
            print(f"{trace.meta.source_path}: {stats.frame_count} frames, "
                  f"driver={trace.meta.driver_label}, vehicle={trace.meta.vehicle}")
    if args.out:
        with open(args.out, "w") as fh:
            for rec in records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        print(f"wrote {len(records)} records to {args.out}")
    return EXIT_OK


def cmd_stats(args) -> int:
    records = []
    for spec in args.trace:
        path = _data_path(spec)
        trace = load_trace(path, format=args.format, meta=_meta_from_args(args, path))
        stats = compute_stats(trace)
        print(stats_table(stats, str(path)))
        if stats.mean_rate is not None:
            lo, hi = RATE_BAND
            inside = lo <= stats.mean_rate <= hi
            print(f"mean rate {stats.mean_rate:.1f} Hz is "
                  f"{'inside' if inside else 'outside'} the {lo:.0f}-{hi:.0f} Hz band\n")
        records.append({"source": str(path), **stats.to_record()})
    if args.out:
        with open(args.out, "w") as fh:
            for rec in records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_features(args) -> int:
    spec = WindowSpec(args.window, args.stride, args.min_frames)
    traces = []
    for p in args.trace:
        path = _data_path(p)
        traces.append(load_trace(path, format=args.format, meta=_meta_from_args(args, path)))
    if args.vocab:
        vocab = [v.strip().upper() for v in Path(args.vocab).read_text().split()]
    else:
        vocab = sorted(set().union(*(vocab_from_trace(t) for t in traces)))
    vectors = []
    for t in traces:
        vs = extract_windows(t, spec, vocab)
        if args.lags:
            vs = add_lag_features(vs, args.lags)
        vectors.extend(vs)
    if not vectors:
        raise DataFileError("no windows satisfied the spec (too few frames?)")
    if args.pca:
        std = fit_standardizer(vectors)
        vectors = apply_standardizer(std, vectors)
        model = fit_pca(vectors, args.pca)
        vectors = project_all(model, vectors)
    write_features_csv(vectors, args.out)
    print(f"wrote {len(vectors)} windows x {len(vectors[0].schema)} features to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    print(f"# seed: {args.seed}")
    vectors = read_features_csv(args.features)
    authorized = frozenset(a.strip() for a in args.authorized.split(",") if a.strip())
    if not authorized:
        raise TrainingError("--authorized must name at least one driver label")

    if args.model in ("kmeans", "autoencoder"):
        train_vs = [v for v in vectors if v.label in authorized]
        rejected = len(vectors) - len(train_vs)
        if rejected:
            print(f"# owner-only training: rejected {rejected} non-authorized windows")
        if not train_vs:
            raise TrainingError("no windows labeled with an authorized driver")
    else:
        train_vs = vectors

    std = fit_standardizer(train_vs)
    standardized = apply_standardizer(std, train_vs)
    pca = None
    if args.pca:
        pca = fit_pca(standardized, args.pca)
        standardized = project_all(pca, standardized)

    calibration = {"seed": args.seed, "n_train": len(train_vs),
                   "quantile": args.quantile, "model": args.model}
    if args.model == "knn":
        core = knn_train(standardized, args.k if args.k is not None else 5)
    elif args.model == "kmeans":
        core = kmeans_fit(standardized, args.k if args.k is not None else 4,
                          args.seed, quantile=args.quantile)
    elif args.model == "autoencoder":
        hidden = tuple(int(h) for h in args.hidden.split(","))
        core = autoencoder_train(standardized, hidden, args.epochs, args.lr,
                                 args.seed, quantile=args.quantile)
        calibration["final_loss"] = core.loss_history[-1]
    else:
        raise TrainingError(f"unknown model {args.model!r}")

    bundle = AuthModel(args.model, std, core, authorized, pca, calibration)
    save_model(bundle, args.out)
    print(f"trained {args.model} on {len(train_vs)} windows -> {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = load_model(args.model)
    vectors = read_features_csv(args.features)
    if not vectors:
        raise DataFileError("empty feature file")
    unlabeled = sum(1 for v in vectors if v.label is None)
    if unlabeled:
        raise DataFileError(f"{unlabeled} windows lack ground-truth labels")
    decisions = [model.decide(v) for v in vectors]
    truths = [Verdict.AUTHORIZED if v.label in model.authorized else Verdict.UNAUTHORIZED
              for v in vectors]
    metrics = evaluate(decisions, truths)
    rec = metrics.to_record()
    for key in ("accuracy", "precision", "recall", "f1", "far", "frr",
                "mean_time_to_detection"):
        value = rec[key]
        print(f"{key}: {'undefined' if value is None else f'{value:.4f}'}")
    if args.out:
        Path(args.out).write_text(json.dumps(rec, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_gen(args) -> int:
    print(f"# seed: {args.seed}")
    profile = resolve_profile(args.profile)
    label = normalize_driver_label(args.driver) if args.driver else UNKNOWN
    trace = generate_traffic(profile, args.duration, args.seed, driver_label=label)
    write_trace(trace, args.out)
    save_sidecar(trace.meta, args.out)
    stats = compute_stats(trace)
    print(f"generated {stats.frame_count} frames over {stats.duration:.1f} s "
          f"({stats.mean_rate:.0f} Hz) -> {args.out}")
    return EXIT_OK


def cmd_replay(args) -> int:
    trace = load_trace(_data_path(args.trace), format=args.format)
    clock = BusClock.instant() if args.instant else BusClock.scaled(args.speed)
    bus = VirtualBus(clock)
    capture = Capture(bus) if args.capture else None
    summary = bus_replay(bus, trace)
    print(f"delivered {summary.frames_delivered} frames "
          f"({clock.mode} mode, wall {summary.wall_duration:.3f} s)")
    if clock.paced:
        print(f"timing error p50 {summary.timing_err_p50 * 1e3:.3f} ms, "
              f"p95 {summary.timing_err_p95 * 1e3:.3f} ms, "
              f"max {summary.timing_err_max * 1e3:.3f} ms")
    if capture:
        capture.write(args.capture)
        print(f"captured bus traffic -> {args.capture}")
    return EXIT_OK


def _clock_from_args(args) -> BusClock:
    if args.instant:
        return BusClock.instant()
    return BusClock.scaled(args.speed) if args.speed != 1.0 else BusClock.realtime()


def cmd_guard(args) -> int:
    print(f"# seed: {args.seed}")
    model = None
    vocab = None
    if args.model != "-":
        model = load_model(args.model)
        vocab = vocab_from_schema(model.raw_schema)
    elif not args.simulated:
        raise TrainingError("a model file is required unless --simulated is set")

    config = GuardConfig(
        initial_window=args.initial_window,
        grace_period=args.grace,
        smoothing=args.smoothing,
        max_speed=args.max_speed,
        simulated=args.simulated,
    )
    window = WindowSpec(args.window, args.stride, args.min_frames)
    scheme = OverrideScheme(args.secret.encode(), args.vehicle_id)
    clock = _clock_from_args(args)
    bus = VirtualBus(clock)

    if args.source == "trace":
        if not args.trace:
            raise DataFileError("--source trace requires --trace")
        trace = rebase(load_trace(_data_path(args.trace), format=args.format))
        duration = float(trace.block.ts[-1]) + window.stride if len(trace) else 0.0
        bus.add_replay(trace)
    else:
        profile = resolve_profile(args.profile)
        attach_plant(bus, profile, args.seed)
        duration = args.duration

    runner = GuardRunner(bus, model, config, window, vocab,
                         scheme=scheme, log_path=args.log)
    if args.serve:
        from .service import serve

        service = serve(runner, args.serve)
        host, port = service.address
        print(f"serving guard on http://{host}:{port} "
              f"(state/events/override/simulate); Ctrl-C to stop")
        bus.start()
        try:
            import time as _t

            end = bus.now + duration
            while bus.now < end:
                _t.sleep(0.2)
        except KeyboardInterrupt:
            pass
        bus.stop()
        runner.stop()
        service.stop()
    else:
        bus.run(until=bus.now + duration)
        runner.stop()

    _print_guard_summary(runner)
    return EXIT_OK


def _print_guard_summary(runner: GuardRunner) -> None:
    changes = [e for e in runner.events if e.kind.value == "phase_change"]
    path = " -> ".join(["pending"] + [e.detail["to"] for e in changes])
    print(f"phases: {path}")
    print(f"events: {len(runner.events)}, decisions: {len(runner.decisions)}, "
          f"disable frames injected: {len(runner.injected)}")


def cmd_demo(args) -> int:
    """Owner drives, thief takes over: Pending -> Authenticated -> Warning
    -> Disabled with the 10-second demo grace preset."""
    print(f"# seed: {args.seed}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    owner_label = "female-all-ages-5"
    owner = PROFILE_PRESETS["calm"]
    thief = PROFILE_PRESETS["aggressive"]
    window = WindowSpec(10.0, 2.0, 50)

    print("[1/3] training owner profile on three synthetic trips")
    vocab = synthetic_vocab()
    vectors = []
    for trip in range(3):
        train_trace = generate_traffic(owner, 120.0, args.seed + 10 * trip,
                                       driver_label=owner_label)
        vectors.extend(extract_windows(train_trace, window, vocab))
    std = fit_standardizer(vectors)
    core = kmeans_fit(apply_standardizer(std, vectors), k=4, seed=args.seed)
    model = AuthModel("kmeans", std, core, frozenset([owner_label]),
                      calibration={"seed": args.seed, "demo": True})
    model_path = out / "owner-model.json"
    save_model(model, model_path)

    print(f"[2/3] live run: owner drives, thief takes over at t={args.swap:.0f}s "
          f"(grace {args.grace:.0f}s)")
    clock = _clock_from_args(args)
    bus = VirtualBus(clock)
    owner_brain = DriverBrain(owner, args.seed + 1)
    thief_brain = DriverBrain(thief, args.seed + 2)

    def swapped_driver(t: float, speed: float):
        brain = owner_brain if t < args.swap else thief_brain
        return brain.step(t, speed, PLANT_TICK)

    plant = attach_plant(bus, owner, args.seed + 1, driver=swapped_driver)
    scheme = OverrideScheme(args.secret.encode(), args.vehicle_id)
    config = GuardConfig(initial_window=10.0, grace_period=args.grace,
                         smoothing=5, simulated=False)
    log_path = out / "events.ndjson"
    runner = GuardRunner(bus, model, config, window, vocab,
                         scheme=scheme, log_path=log_path)

    if args.serve:
        from .service import serve

        service = serve(runner, args.serve)
        host, port = service.address
        print(f"serving demo on http://{host}:{port}; Ctrl-C to stop early")
        bus.start()
        try:
            import time as _t

            while bus.now < args.duration:
                _t.sleep(0.2)
        except KeyboardInterrupt:
            pass
        bus.stop()
        service.stop()
    else:
        bus.run(until=args.duration)
    runner.stop()
    plant.stop()

    print("[3/3] results")
    _print_guard_summary(runner)
    phases = [e.detail["to"] for e in runner.events if e.kind.value == "phase_change"]
    expected = ["authenticated", "warning", "disabled"]
    ok = phases == expected
    print(f"phase sequence {'matches' if ok else 'DOES NOT match'} the scripted scenario")
    print(f"event log -> {log_path}\nmodel -> {model_path}")
    return EXIT_OK if ok else EXIT_DATA


# --- parser ---

def _add_meta_flags(p):
    p.add_argument("--driver", help="driver label (taxonomy or 'unknown')")
    p.add_argument("--vehicle", help="vehicle name")


def _add_format_flag(p):
    p.add_argument("--format", choices=["auto", "log", "csv"], default="auto",
                   help="trace file format (default: by suffix)")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="canguard",
        description="CAN bus driver-authentication toolkit and anti-theft simulator "
                    f"(codec backend: {CODEC_BACKEND})",
    )
    p.add_argument("--version", action="version", version=f"canguard {__version__}")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    q = sub.add_parser("ingest", help="load traces or a dataset tree and summarize")
    q.add_argument("path", nargs="+", help="trace file(s) or dataset root directory")
    _add_format_flag(q)
    _add_meta_flags(q)
    q.add_argument("--out", help="write NDJSON summary records here")
    q.set_defaults(func=cmd_ingest)

    q = sub.add_parser("stats", help="per-trace statistics table")
    q.add_argument("trace", nargs="+")
    _add_format_flag(q)
    _add_meta_flags(q)
    q.add_argument("--out", help="write NDJSON stats records here")
    q.set_defaults(func=cmd_stats)

    q = sub.add_parser("features", help="extract windowed feature vectors to CSV")
    q.add_argument("trace", nargs="+")
    _add_format_flag(q)
    _add_meta_flags(q)
    q.add_argument("--window", type=float, default=60.0, help="window length (s)")
    q.add_argument("--stride", type=float, default=10.0, help="window stride (s)")
    q.add_argument("--min-frames", type=int, default=100)
    q.add_argument("--lags", type=lambda s: [int(x) for x in s.split(",")],
                   help="comma-separated lag offsets, e.g. 1,2")
    q.add_argument("--pca", type=int, help="standardize then project to N components")
    q.add_argument("--vocab", help="file with one arbitration ID per line")
    q.add_argument("--out", required=True, help="output feature CSV")
    q.set_defaults(func=cmd_features)

    q = sub.add_parser("train", help="train an authenticator from a feature CSV")
    q.add_argument("features")
    q.add_argument("--model", choices=["knn", "kmeans", "autoencoder"], required=True)
    q.add_argument("--authorized", required=True,
                   help="comma-separated authorized driver labels")
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--k", type=int, default=None,
                   help="neighbors (knn, default 5) or clusters (kmeans, default 4)")
    q.add_argument("--quantile", type=float, default=0.99,
                   help="threshold calibration quantile")
    q.add_argument("--pca", type=int, help="project to N components inside the model")
    q.add_argument("--epochs", type=int, default=200)
    q.add_argument("--lr", type=float, default=0.01)
    q.add_argument("--hidden", default="32,8,32", help="autoencoder hidden sizes")
    q.add_argument("--out", required=True, help="output model file")
    q.set_defaults(func=cmd_train)

    q = sub.add_parser("eval", help="evaluate a model against labeled features")
    q.add_argument("model")
    q.add_argument("features")
    q.add_argument("--out", help="write metrics JSON here")
    q.set_defaults(func=cmd_eval)

    q = sub.add_parser("gen", help="generate synthetic driver traffic")
    q.add_argument("--profile", required=True,
                   help=f"preset ({', '.join(PROFILE_PRESETS)}) or JSON profile file")
    q.add_argument("--duration", type=float, required=True, help="seconds")
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--driver", help="driver label to stamp on the trace")
    q.add_argument("--out", required=True, help="output trace (.log or .csv)")
    q.set_defaults(func=cmd_gen)

    q = sub.add_parser("replay", help="replay a trace through the virtual bus")
    q.add_argument("trace")
    _add_format_flag(q)
    q.add_argument("--speed", type=float, default=1.0, help="wall-clock scale factor")
    q.add_argument("--instant", action="store_true", help="no pacing, order only")
    q.add_argument("--capture", help="write observed bus traffic back to this log")
    q.set_defaults(func=cmd_replay)

    q = sub.add_parser("guard", help="run the anti-theft guard on a trace or the simulator")
    q.add_argument("model", help="model file, or '-' with --simulated")
    q.add_argument("--source", choices=["trace", "sim"], required=True)
    q.add_argument("--trace", help="trace file for --source trace")
    _add_format_flag(q)
    q.add_argument("--profile", default="calm", help="driver profile for --source sim")
    q.add_argument("--duration", type=float, default=120.0,
                   help="bus-time duration for --source sim")
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--grace", type=float, default=300.0, help="grace period (s)")
    q.add_argument("--initial-window", type=float, default=60.0)
    q.add_argument("--smoothing", type=int, default=5)
    q.add_argument("--window", type=float, default=60.0)
    q.add_argument("--stride", type=float, default=10.0)
    q.add_argument("--min-frames", type=int, default=100)
    q.add_argument("--max-speed", type=float, help="restriction policy (mph)")
    q.add_argument("--simulated", action="store_true",
                   help="joystick mode: verdicts come from /simulate")
    q.add_argument("--secret", default=DEFAULT_SECRET.decode(),
                   help="owner secret for override codes")
    q.add_argument("--vehicle-id", default="vehicle")
    q.add_argument("--speed", type=float, default=1.0)
    q.add_argument("--instant", action="store_true")
    q.add_argument("--serve", metavar="HOST:PORT",
                   help="expose state/events/override/simulate over HTTP")
    q.add_argument("--log", default="guard-events.ndjson",
                   help="event log (newline-delimited JSON)")
    q.set_defaults(func=cmd_guard)

    q = sub.add_parser("demo", help="scripted owner-then-thief scenario (10 s grace)")
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--grace", type=float, default=10.0)
    q.add_argument("--swap", type=float, default=45.0, help="thief takeover time (s)")
    q.add_argument("--duration", type=float, default=100.0)
    q.add_argument("--speed", type=float, default=1.0)
    q.add_argument("--instant", action="store_true", default=None)
    q.add_argument("--serve", metavar="HOST:PORT")
    q.add_argument("--secret", default=DEFAULT_SECRET.decode())
    q.add_argument("--vehicle-id", default="vehicle")
    q.add_argument("--out", default="demo-out", help="output directory")
    q.set_defaults(func=cmd_demo)

    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE
    if getattr(args, "command", None) == "demo" and args.instant is None:
        args.instant = not args.serve  # demo defaults to instant unless serving
    try:
        return args.func(args)
    except (SchemaMismatchError, TrainingError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MODEL
    except (DataFileError, CandumpParseError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (BusError, CanguardError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
