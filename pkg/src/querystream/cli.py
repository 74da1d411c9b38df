"""Command-line entry point: simulate, train, eval, bench, track, selfcheck."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Any, Sequence

from querystream.engine import DecoderConfig, StreamEngine
from querystream.errors import ConfigError, DivergenceError, ParseError
from querystream.evaluate import write_metrics
from querystream.sim import SceneConfig, read_scene, simulate, write_scene

log = logging.getLogger("querystream")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_DIVERGENCE = 4
EXIT_SELFCHECK = 5

OUTDIR_ENV = "QUERYSTREAM_OUTDIR"
SECTIONS = ("scene", "decoder", "train", "eval", "bench", "tracker")


# -- configuration -------------------------------------------------------------

def parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg: dict, overrides: Sequence[str]) -> dict:
    """``section.key=value`` pairs; values are JSON when they parse, else strings."""
    out = {k: dict(v) for k, v in cfg.items()}
    for item in overrides:
        key, sep, value = item.partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot or not name:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section {section!r}")
        out.setdefault(section, {})[name] = parse_value(value)
    return out


def load_config(path: str | None, overrides: Sequence[str]) -> dict:
    raw: dict = {}
    if path:
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be an object")
    unknown = set(raw) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections {sorted(unknown)}")
    return apply_overrides(raw, overrides)


def resolve(raw: dict) -> dict:
    """Validate every section against its owning type and fill defaults."""
    try:
        return _resolve(raw)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc


def _resolve(raw: dict) -> dict:
    from querystream.paradigms import BenchConfig
    from querystream.track import TrackerConfig
    from querystream.train import TrainConfig

    scene = SceneConfig.from_dict(raw.get("scene", {}))
    decoder = DecoderConfig.from_dict(raw.get("decoder", {}))
    train = TrainConfig.from_dict(raw.get("train", {}))
    ev = {"split_speed": 1.0, "memoryless": False}
    _merge_known(ev, raw.get("eval", {}), "eval")
    bench = {k: v for k, v in BenchConfig().__dict__.items() if k != "decoder"}
    _merge_known(bench, raw.get("bench", {}), "bench")
    tracker = dict(TrackerConfig().__dict__)
    _merge_known(tracker, raw.get("tracker", {}), "tracker")
    TrackerConfig(**tracker)
    return {"scene": scene.to_dict(), "decoder": decoder.to_dict(), "train": train.to_dict(), "eval": ev,
            "bench": bench, "tracker": tracker}


def _merge_known(base: dict, extra: dict, section: str) -> None:
    unknown = set(extra) - set(base)
    if unknown:
        raise ConfigError(f"unknown {section} config keys {sorted(unknown)}")
    base.update(extra)


def default_outdir() -> str:
    return os.environ.get(OUTDIR_ENV, "runs")


def write_snapshot(outdir: Path, command: str, resolved: dict, extra: dict | None = None) -> None:
    outdir.mkdir(parents=True, exist_ok=True)
    snap = {"command": command, **resolved, **({"args": extra} if extra else {})}
    (outdir / "resolved_config.json").write_text(json.dumps(snap, indent=2, sort_keys=True, default=str))


# -- scenes ------------------------------------------------------------------------

def load_scenes(paths: Sequence[str], scene_cfg: SceneConfig, count: int, seed: int, offset: int = 0):
    if paths:
        return [read_scene(p) for p in paths]
    return [simulate(replace(scene_cfg, seed=1000 * seed + offset + i)) for i in range(count)]


# -- subcommands ---------------------------------------------------------------

def cmd_simulate(args, resolved: dict, outdir: Path) -> int:
    scene = SceneConfig.from_dict(resolved["scene"])
    updates = {k: v for k, v in (("seed", args.seed), ("frames", args.frames), ("n_objects", args.objects))
               if v is not None}
    scene = replace(scene, **updates)
    resolved["scene"] = scene.to_dict()
    write_snapshot(outdir, "simulate", resolved)
    frames, tokens = simulate(scene)
    out = Path(args.scene_out) if args.scene_out else outdir / "scene.jsonl"
    write_scene(out, frames, tokens)
    per_frame = sum(len(t) for t in tokens) / max(1, len(tokens))
    n_obj = len({o.id for f in frames for o in f.objects})
    print(f"wrote {out}: {len(frames)} frames, {n_obj} objects, {per_frame:.1f} tokens/frame")
    return EXIT_OK


def _train_one(job: tuple) -> dict:
    from querystream.train import TrainConfig, train_streaming

    resolved, scene_paths, n_scenes, seed, outdir = job
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    tcfg = TrainConfig.from_dict({**resolved["train"], "seed": seed})
    dcfg = DecoderConfig.from_dict({**resolved["decoder"], "seed": seed})
    scenes = load_scenes(scene_paths, SceneConfig.from_dict(resolved["scene"]), n_scenes, seed)
    engine = StreamEngine(dcfg)
    result = train_streaming(engine, scenes, tcfg)
    engine.save(outdir / "checkpoint.json", include_state=False, extra={"train": tcfg.to_dict()})
    with open(outdir / "losses.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        for i, l in enumerate(result.losses):
            w.writerow([i, repr(l)])
    return {"seed": seed, "final_loss": result.losses[-1] if result.losses else None, "outdir": str(outdir)}


def cmd_train(args, resolved: dict, outdir: Path) -> int:
    train = dict(resolved["train"])
    if args.frames_per_seq is not None:
        train["seq_len"] = args.frames_per_seq
        if args.detach_prefix is None:
            train["detach_prefix"] = max(0, args.frames_per_seq - 2)
    if args.detach_prefix is not None:
        train["detach_prefix"] = args.detach_prefix
    if args.updates is not None:
        train["updates"] = args.updates
    from querystream.train import TrainConfig
    resolved["train"] = TrainConfig.from_dict(train).to_dict()
    seeds = args.seeds if args.seeds else [args.seed if args.seed is not None else resolved["train"]["seed"]]
    write_snapshot(outdir, "train", resolved, {"seeds": seeds, "scenes": args.scenes, "n_scenes": args.n_scenes})
    jobs = [(resolved, args.scenes, args.n_scenes, s, outdir if len(seeds) == 1 else outdir / f"seed{s}")
            for s in seeds]
    if args.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_train_one, jobs))
    else:
        results = [_train_one(j) for j in jobs]
    for r in results:
        loss = "n/a" if r["final_loss"] is None else f"{r['final_loss']:.4f}"
        print(f"seed {r['seed']}: final loss {loss} -> {r['outdir']}")
    return EXIT_OK


def cmd_eval(args, resolved: dict, outdir: Path) -> int:
    from querystream.train import evaluate_engine

    ev = resolved["eval"]
    if args.split_speed is not None:
        ev["split_speed"] = args.split_speed
    if args.memoryless:
        ev["memoryless"] = True
    write_snapshot(outdir, "eval", resolved, {"checkpoint": args.checkpoint, "scenes": args.scenes})
    engine = StreamEngine.load(args.checkpoint, with_state=False)
    seed = args.seed if args.seed is not None else 0
    scenes = load_scenes(args.scenes, SceneConfig.from_dict(resolved["scene"]), args.n_scenes, seed, offset=900)
    reports = evaluate_engine(engine, scenes, ev["memoryless"], ev["split_speed"])
    write_metrics(outdir, reports)
    for name, rep in reports.items():
        ate = "n/a" if rep.mATE is None else f"{rep.mATE:.3f}"
        ave = "n/a" if rep.mAVE is None else f"{rep.mAVE:.3f}"
        print(f"{name:<7} mAP {rep.mAP:.4f}  mATE {ate}  mAVE {ave}  gt {rep.n_gt}")
    return EXIT_OK


def cmd_bench(args, resolved: dict, outdir: Path) -> int:
    from querystream.paradigms import BenchConfig, benchmark, write_csv

    b = resolved["bench"]
    if args.trials is not None:
        b["trials"] = args.trials
    if args.tokens is not None:
        b["n_tokens"] = args.tokens
    cfg = BenchConfig(**b, decoder=DecoderConfig.from_dict(resolved["decoder"]))
    write_snapshot(outdir, "bench", resolved, {"methods": args.methods, "histories": args.histories})
    rows = benchmark(args.methods, args.histories, cfg)
    out = Path(args.csv_out) if args.csv_out else outdir / "bench.csv"
    write_csv(out, rows)
    for r in rows:
        print(f"{r['method']:<15} k={r['history']:<3} median {r['latency_us_median']:>10.0f} us  "
              f"state {r['state_bytes']} B")
    return EXIT_OK


def cmd_track(args, resolved: dict, outdir: Path) -> int:
    from querystream.track import TrackerConfig, greedy_track
    from querystream.train import run_stream

    tcfg = TrackerConfig(**resolved["tracker"])
    write_snapshot(outdir, "track", resolved, {"checkpoint": args.checkpoint, "scene": args.scene})
    engine = StreamEngine.load(args.checkpoint, with_state=False)
    frames, tokens = read_scene(args.scene)
    dets = run_stream(engine, frames, tokens, score_floor=args.score_floor)
    for f, ds in zip(frames, dets):
        for d in ds:
            d.center = f.ego_pose.apply(d.center)  # global frame for tracking
    ids = greedy_track(dets, tcfg)
    out = outdir / "tracks.csv"
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "track_id", "label", "score", "x", "y", "z"])
        for fi, (ds, tid) in enumerate(zip(dets, ids)):
            for d, t in zip(ds, tid):
                if t is not None:
                    w.writerow([fi, t, d.label, f"{d.score:.6f}", *(f"{c:.6f}" for c in d.center)])
    n_tracks = len({t for frame in ids for t in frame if t is not None})
    print(f"wrote {out}: {len(frames)} frames, {n_tracks} tracks")
    return EXIT_OK


def cmd_selfcheck(args, resolved: dict, outdir: Path) -> int:
    from querystream.selfcheck import format_table, run_selfcheck

    write_snapshot(outdir, "selfcheck", resolved, {"inject_fault": args.inject_fault})
    results = run_selfcheck(inject_fault=args.inject_fault)
    print(format_table(results))
    ok = all(r.passed for r in results)
    print("selfcheck passed" if ok else "selfcheck FAILED")
    return EXIT_OK if ok else EXIT_SELFCHECK


# -- parser ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with scene/decoder/train/eval/bench/tracker sections")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable)")
    common.add_argument("--outdir", help=f"output directory (default ${OUTDIR_ENV} or ./runs)")
    common.add_argument("--seed", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="querystream", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="generate one synthetic scene")
    s.add_argument("--frames", type=int)
    s.add_argument("--objects", type=int)
    s.add_argument("--scene-out")
    s.set_defaults(func=cmd_simulate)

    t = sub.add_parser("train", parents=[common], help="streaming training")
    t.add_argument("--scenes", "--scene-in", nargs="*", default=[], help="scene files; simulated when omitted")
    t.add_argument("--n-scenes", type=int, default=32)
    t.add_argument("--frames-per-seq", type=int)
    t.add_argument("--detach-prefix", type=int)
    t.add_argument("--updates", type=int)
    t.add_argument("--seeds", type=int, nargs="*")
    t.add_argument("--jobs", type=int, default=1, help="parallel seeds")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--scenes", "--scene-in", nargs="*", default=[])
    e.add_argument("--n-scenes", type=int, default=4)
    e.add_argument("--split-speed", type=float)
    e.add_argument("--memoryless", action="store_true")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", parents=[common], help="temporal-fusion latency and state benchmark")
    b.add_argument("--methods", nargs="*", default=["object_centric", "perspective", "bev_concat"])
    b.add_argument("--histories", type=int, nargs="*", default=[1, 4])
    b.add_argument("--trials", type=int)
    b.add_argument("--tokens", type=int)
    b.add_argument("--csv-out")
    b.set_defaults(func=cmd_bench)

    k = sub.add_parser("track", parents=[common], help="detect and track over one scene")
    k.add_argument("--checkpoint", required=True)
    k.add_argument("--scene", "--scene-in", dest="scene", required=True)
    k.add_argument("--score-floor", type=float, default=0.1)
    k.set_defaults(func=cmd_track)

    c = sub.add_parser("selfcheck", parents=[common], help="run the invariant suites")
    c.add_argument("--inject-fault", action="store_true", help="add a deliberately wrong gradient")
    c.set_defaults(func=cmd_selfcheck)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    outdir = Path(args.outdir or default_outdir())
    try:
        raw = load_config(args.config, args.overrides)
        if args.seed is not None:
            raw.setdefault("train", {})["seed"] = args.seed
        resolved = resolve(raw)
        return args.func(args, resolved, outdir)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (OSError, ParseError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
