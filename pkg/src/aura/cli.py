"""Command line interface: run, bench, tune, serve, policy-batch."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .adapt import (
    evaluate_candidate,
    propose_suggestion,
    resolve_suggestion_in_store,
    run_policy_batch,
)
from .automl import NoLabeledWindows
from .fusion import HyperParams
from .harness import default_suite, load_suite, run_benchmark, summary_table
from .ingest import load_scene_config_file, open_frame_source, window_frames
from .pipeline import StreamPipeline
from .store import DataStore


def _data_dir(args) -> str:
    return args.data_dir or os.environ.get("AURA_DATA_DIR", "./aura-data")


def cmd_run(args) -> int:
    config = load_scene_config_file(args.config)
    store = DataStore(_data_dir(args)) if not args.no_store else None
    source = open_frame_source(
        args.source,
        expected_dims=(config.frame_width, config.frame_height),
        fps=config.fps,
        stream_id=config.stream_id,
        downscale=args.downscale,
    )
    hyperparams = store.current_hyperparams if store else None
    policy = store.load_policy if store else None
    pipeline = StreamPipeline(
        config,
        hyperparams=hyperparams,
        policy=policy,
        seed=args.seed,
        snc_enabled=not args.disable_snc,
        store=store,
        dump_motion=args.dump_motion,
        dump_chroma=args.dump_chroma,
    )
    if store:
        store.record_registration(
            config.stream_id, config.to_dict(), str(args.source), "running"
        )
    count = 0
    for result in pipeline.run(window_frames(source, config.fps)):
        for event in result.events:
            print(json.dumps(event.to_dict(), separators=(",", ":")))
        count += 1
        if args.max_windows and count >= args.max_windows:
            break
    if store:
        store.update_stream_status(config.stream_id, "stopped")
    print(
        f"processed {count} windows ({source.dropped_frames} dropped frames)",
        file=sys.stderr,
    )
    return 0


def cmd_bench(args) -> int:
    suite = load_suite(args.suite) if args.suite else default_suite()
    out_dir = args.out or "./bench-out"
    summary = run_benchmark(
        suite, out_dir=out_dir, disable_snc=args.disable_snc, seed=args.seed
    )
    from .harness import MetricsReport

    reports = {
        name: MetricsReport(
            condition=name, tp=c["tp"], fp=c["fp"], fn=c["fn"], tn=c["tn"]
        )
        for name, c in summary["conditions"].items()
    }
    print(summary_table(reports), end="")
    print(f"reports written to {out_dir}", file=sys.stderr)
    return 0


def cmd_tune(args) -> int:
    store = DataStore(_data_dir(args))
    if args.replay:
        doc = json.loads(Path(args.replay).read_text())
        h = HyperParams.from_dict(doc)
        try:
            f1 = evaluate_candidate(store, h)
        except NoLabeledWindows as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 1
        print(json.dumps({"f1": f1, "hyperparams": h.to_dict()}))
        return 0
    if args.propose:
        try:
            suggestion = propose_suggestion(store, seed=args.seed)
        except NoLabeledWindows as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 1
        print(json.dumps(suggestion.to_dict(), indent=2))
        return 0
    if args.approve or args.reject:
        suggestion_id = args.approve or args.reject
        resolved = resolve_suggestion_in_store(
            store, suggestion_id, approve=bool(args.approve), operator=args.operator
        )
        print(json.dumps(resolved.to_dict(), indent=2))
        return 0
    if args.set:
        current = store.current_hyperparams()
        changes = {}
        for item in args.set:
            key, _, value = item.partition("=")
            if key not in current.to_dict() or key == "version":
                print(f"error: unknown hyperparameter '{key}'", file=sys.stderr)
                return 1
            changes[key] = float(value)
        updated = current.bumped(**changes)
        store.apply_hyperparams(updated, reason="cli override")
        print(json.dumps(updated.to_dict()))
        return 0
    print("nothing to do: pass --replay/--propose/--approve/--reject/--set")
    return 1


def cmd_serve(args) -> int:
    from .service import serve

    serve(config_dir=args.config_dir, data_dir=args.data_dir, bind=args.bind)
    return 0


def cmd_policy_batch(args) -> int:
    store = DataStore(_data_dir(args))
    params, consumed = run_policy_batch(store)
    print(
        json.dumps(
            {
                "version": params.version,
                "mode": params.mode,
                "labeled_windows_consumed": consumed,
                "baseline": params.baseline,
            }
        )
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="aura",
        description="Real-time industrial smoke plume detection service",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="process a frame source against a scene config")
    p_run.add_argument("--config", required=True, help="scene config JSON file")
    p_run.add_argument("--source", required=True, help="image directory or raw stream file")
    p_run.add_argument("--max-windows", type=int, default=0)
    p_run.add_argument("--seed", type=int, default=0)
    p_run.add_argument("--downscale", type=int, default=1)
    p_run.add_argument("--disable-snc", action="store_true")
    p_run.add_argument("--dump-motion", metavar="DIR")
    p_run.add_argument("--dump-chroma", metavar="DIR")
    p_run.add_argument("--data-dir", default=None)
    p_run.add_argument(
        "--no-store", action="store_true", help="print events without persisting"
    )
    p_run.set_defaults(func=cmd_run)

    p_bench = sub.add_parser("bench", help="run the synthetic benchmark suite")
    p_bench.add_argument("--suite", help="JSON list of scene specs (default: built-in)")
    p_bench.add_argument("--out", help="output directory (default ./bench-out)")
    p_bench.add_argument("--disable-snc", action="store_true")
    p_bench.add_argument("--seed", type=int, default=0)
    p_bench.set_defaults(func=cmd_bench)

    p_tune = sub.add_parser("tune", help="hyperparameter replay and suggestions")
    p_tune.add_argument("--replay", metavar="FILE", help="evaluate a hyperparams JSON")
    p_tune.add_argument("--propose", action="store_true")
    p_tune.add_argument("--approve", metavar="ID")
    p_tune.add_argument("--reject", metavar="ID")
    p_tune.add_argument("--set", nargs="+", metavar="KEY=VALUE")
    p_tune.add_argument("--operator", default="cli")
    p_tune.add_argument("--seed", type=int, default=0)
    p_tune.add_argument("--data-dir", default=None)
    p_tune.set_defaults(func=cmd_tune)

    p_serve = sub.add_parser("serve", help="run the HTTP service")
    p_serve.add_argument("--config-dir", help="directory of scene configs to register")
    p_serve.add_argument("--data-dir", default=None)
    p_serve.add_argument("--bind", default=None, help="host:port (AURA_BIND_ADDR)")
    p_serve.set_defaults(func=cmd_serve)

    p_batch = sub.add_parser(
        "policy-batch", help="consume fresh feedback into a policy update"
    )
    p_batch.add_argument("--data-dir", default=None)
    p_batch.set_defaults(func=cmd_policy_batch)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
