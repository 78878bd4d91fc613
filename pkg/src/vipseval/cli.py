"""Command line entry point: ``vipseval <subcommand> ...``.

Exit status is 0 on success, 1 on data errors and 2 on usage errors.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import threading
import time
from pathlib import Path

from vipseval import __version__
from vipseval.convert import instance_to_panoptic, semantic_to_panoptic, to_instance, to_semantic
from vipseval.core import CategoryTable, VipsEvalError, validate_sequence
from vipseval.dataset_io import (
    load_categories,
    load_manifest,
    load_sequence,
    load_sidecar_extra,
    read_logits,
    read_weights,
    resize_short_side,
    save_dataset,
    write_weights,
)
from vipseval.ema import DEFAULT_DECAY, ema
from vipseval.overlap import default_threads
from vipseval.vpq import DEFAULT_WINDOWS, aggregate_vpq, vpq

log = logging.getLogger("vipseval")

SCHEMA_VERSION = 1


class UsageError(Exception):
    pass


def _int_list(text):
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not vals or min(vals) < 1:
        raise argparse.ArgumentTypeError("expected positive integers")
    return vals


def _float_list(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _positive_int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}")
    if v < 1:
        raise argparse.ArgumentTypeError("expected an integer >= 1")
    return v


def _envelope(kind, args, body):
    config = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items()
              if k not in ("func",) and not callable(v)}
    return {"schema_version": SCHEMA_VERSION, "tool": "vipseval", "version": __version__,
            "kind": kind, "config": config, **body}


def _write_json(obj, path):
    path = Path(path)
    if path.parent != Path(""):
        path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=2)
        f.write("\n")


def _loaders(manifest_path, cats, resize=None):
    manifest = load_manifest(manifest_path)

    def make(entry):
        def load():
            seq = load_sequence(entry, cats)
            return resize_short_side(seq, resize) if resize else seq
        return load

    return {v.video_id: make(v) for v in manifest.videos}


def _pct(x):
    return "null" if x is None else f"{100.0 * x:.4f}"


# -- subcommands -------------------------------------------------------------

def cmd_eval_vpq(args):
    cats = load_manifest(args.gt).categories()
    report = vpq(_loaders(args.gt, cats, args.resize), _loaders(args.pred, cats, args.resize),
                 args.windows, cats, args.threads, ignore_void_preds=not args.count_void_preds)
    body = report.to_json()
    body.pop("kind")
    body["metric_rules"] = body.pop("config")
    _write_json(_envelope("vpq", args, body), args.out)
    for k in report.windows:
        print(f"VPQ{k}\t{_pct(report.vpq_k[k])}")
    print(f"VPQ\t{_pct(report.overall_vpq)}")
    if args.figure:
        from vipseval.plots import class_vpq_figure

        class_vpq_figure(body, args.figure, {c.category_id: c.name for c in cats})
    return 0


def cmd_eval_stq(args):
    from vipseval.stq import stq

    cats = load_manifest(args.gt).categories()
    report = stq(_loaders(args.gt, cats, args.resize), _loaders(args.pred, cats, args.resize),
                 cats, args.threads)
    body = report.to_json()
    body.pop("kind")
    body["metric_rules"] = body.pop("config")
    _write_json(_envelope("stq", args, body), args.out)
    for key in ("aq", "sq", "stq"):
        v = body[key]
        print(f"{key.upper()}\t{'null' if v is None else f'{v:.4f}'}")
    return 0


def cmd_convert(args):
    manifest = load_manifest(args.input)
    cats = manifest.categories()
    out = Path(args.out)
    seqs = []
    for entry in manifest.videos:
        seq = load_sequence(entry, cats)
        if args.mode == "semantic":
            seqs.append(semantic_to_panoptic(to_semantic(seq, cats)))
        else:
            seqs.append(instance_to_panoptic(to_instance(seq, cats)))
    path = save_dataset(seqs, cats, out, f"{manifest.dataset_name}-{args.mode}")
    print(path)
    return 0


def cmd_resize(args):
    manifest = load_manifest(args.input)
    cats = manifest.categories()
    seqs = [resize_short_side(load_sequence(v, cats), args.target) for v in manifest.videos]
    print(save_dataset(seqs, cats, args.out, manifest.dataset_name))
    return 0


def cmd_validate(args):
    manifest = load_manifest(args.manifest)
    cats = manifest.categories()
    from vipseval.dataset_io import load_sidecar, read_id_png

    bad = 0
    for entry in manifest.videos:
        frames = [read_id_png(entry.frame_path(i)) for i in range(len(entry.frame_raster_paths))]
        res = validate_sequence(frames, cats, segments=load_sidecar(entry.sidecar_path))
        for v in res.violations:
            print(f"{entry.video_id}\t{v.kind}\t{v.message}")
        bad += len(res.violations)
    print(f"{len(manifest.videos)} videos, {bad} violations")
    return 1 if bad else 0


def cmd_fuse(args):
    from vipseval.fusion import average_softmax, instances_from_sequence, merge_panoptic

    manifest = load_manifest(args.instances)
    cats = manifest.categories()
    vids = [v.video_id for v in manifest.videos]
    vid = args.video_id or (vids[0] if len(vids) == 1 else None)
    if vid is None:
        raise UsageError(f"instance manifest holds {len(vids)} videos; choose one with --video-id")
    entry = manifest.entry(vid)
    inst_seq = load_sequence(entry, cats)
    confidences = load_sidecar_extra(entry.sidecar_path, "confidence")
    stuff = cats.stuff_ids
    sources = []
    for p in args.logits:
        vol = read_logits(p, cats)
        missing = [c for c in stuff if c not in vol.class_index]
        if missing:
            raise VipsEvalError(f"{p}: no logits for stuff category {missing[0]}")
        sources.append(vol.select(stuff))
    weights = args.weights
    if weights is not None and len(weights) != len(sources):
        raise UsageError(f"--weights has {len(weights)} values for {len(sources)} logit files")
    probs = average_softmax(sources, weights)
    if probs.values.shape[:3] != inst_seq.frames.shape:
        raise VipsEvalError(
            f"logits cover {probs.values.shape[:3]} but instances are {inst_seq.frames.shape}")
    seq = merge_panoptic(probs, instances_from_sequence(inst_seq, confidences), cats,
                         min_area=args.min_area, overlap_keep=args.overlap_keep, video_id=vid)
    print(save_dataset([seq], cats, args.out, "fused"))
    return 0


def cmd_decode(args):
    from vipseval.querydecode import QueryMatrix, assignment_to_panoptic, decode_masks

    cats = load_categories(args.categories)
    wm = read_weights(args.queries)
    if "queries" not in wm:
        raise VipsEvalError(f"{args.queries}: no 'queries' tensor")
    attrs = wm.attrs
    try:
        q = QueryMatrix(wm["queries"], attrs["kinds"], attrs["category_ids"])
    except KeyError as exc:
        raise VipsEvalError(f"{args.queries}: header attrs lack {exc}") from None
    feats = read_logits(args.features)
    assignment = decode_masks(q, feats.values, args.tau, normalize=args.normalize)
    seq = assignment_to_panoptic(assignment, q, cats, args.video_id)
    print(save_dataset([seq], cats, args.out, "decoded"))
    return 0


def cmd_ema(args):
    snaps = [read_weights(p) for p in args.snapshots]
    out = ema(snaps, args.decay)
    write_weights(out, args.out)
    print(f"{len(out)} tensors averaged over {len(snaps)} snapshots -> {args.out}")
    return 0


def cmd_synth(args):
    from vipseval.synth import generate, load_scenario, random_scenario

    if args.spec:
        spec = load_scenario(args.spec)
    else:
        spec = random_scenario(args.seed, args.height, args.width, args.frames)
    pair = generate(spec)
    print(save_dataset([pair.gt], pair.categories, args.out_gt, "synthetic-gt"))
    print(save_dataset([pair.pred], pair.categories, args.out_pred, "synthetic-pred"))
    return 0


def _load_report_rows(args):
    rows = {}

    def row(name):
        return rows.setdefault(name, {"name": name, "vpq_k": {}, "vpq": None, "stq": None})

    for item in args.reports:
        name, _, path = item.rpartition("=")
        path = Path(path)
        name = name or path.stem
        try:
            obj = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise VipsEvalError(f"missing file: {path}") from None
        except json.JSONDecodeError as exc:
            raise VipsEvalError(f"malformed report {path}: {exc}") from None
        kind = obj.get("kind")
        r = row(name)
        if kind == "vpq":
            r["vpq_k"] = {int(k): 100.0 * v["vpq"] for k, v in obj["per_window"].items()}
            r["vpq"] = 100.0 * obj["overall_vpq"]
        elif kind == "stq":
            r["stq"] = obj["stq"]
        else:
            raise VipsEvalError(f"{path}: not a vpq or stq report")
    for item in args.scores or []:
        name, sep, vals = item.partition(":")
        if not sep:
            raise UsageError(f"--scores expects NAME:v1,v2,...; got {item!r}")
        values = _float_list(vals)
        if len(values) != len(args.windows):
            raise UsageError(f"--scores {name}: {len(values)} values for windows {args.windows}")
        r = row(name)
        r["vpq_k"] = dict(zip(args.windows, values))
        r["vpq"] = aggregate_vpq(values)
    for item in args.stq or []:
        name, _, val = item.partition(":")
        row(name)["stq"] = float(val)
    if not rows:
        raise UsageError("report needs at least one report file or --scores entry")
    return list(rows.values())


def _column_ranks(rows, key):
    vals = sorted({key(r) for r in rows if key(r) is not None}, reverse=True)
    return {id(r): (vals.index(key(r)) + 1 if key(r) is not None else None) for r in rows}


def cmd_report(args):
    rows = _load_report_rows(args)
    windows = sorted({k for r in rows for k in r["vpq_k"]})
    rows.sort(key=lambda r: (-(r["vpq"] if r["vpq"] is not None else -1.0), r["name"]))
    cols = [("VPQ", lambda r: r["vpq"])] + [
        (f"VPQ{k}", (lambda k: lambda r: r["vpq_k"].get(k))(k)) for k in windows
    ] + [("STQ", lambda r: r["stq"])]
    ranks = {name: _column_ranks(rows, fn) for name, fn in cols}

    def cell(name, fn, r):
        v = fn(r)
        if v is None:
            return "-"
        return f"{v:.4f} ({ranks[name][id(r)]})"

    header = ["Rank", "Name"] + [c for c, _ in cols]
    table = [[str(i + 1), r["name"]] + [cell(c, fn, r) for c, fn in cols] for i, r in enumerate(rows)]
    widths = [max(len(h), *(len(t[i]) for t in table)) for i, h in enumerate(header)]
    print(" | ".join(h.ljust(w) for h, w in zip(header, widths)))
    print("-+-".join("-" * w for w in widths))
    for t in table:
        print(" | ".join(c.ljust(w) for c, w in zip(t, widths)))

    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "ranking.csv", "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f, delimiter=args.delimiter)
            w.writerow(["rank", "name"] + [c.lower() for c, _ in cols])
            for i, r in enumerate(rows):
                w.writerow([i + 1, r["name"]] + ["" if fn(r) is None else f"{fn(r):.4f}" for _, fn in cols])
        body = {"rows": [
            {"rank": i + 1, "name": r["name"], "vpq": r["vpq"],
             "vpq_k": {str(k): v for k, v in r["vpq_k"].items()}, "stq": r["stq"]}
            for i, r in enumerate(rows)
        ], "units": {"vpq": "percent", "stq": "fraction"}}
        _write_json(_envelope("ranking", args, body), out / "ranking.json")
        if not args.no_figure:
            from vipseval.plots import ranking_figure

            plotted = [r for r in rows if r["vpq"] is not None]
            if plotted:
                ranking_figure(plotted, out / "ranking.png", windows)
    return 0


def cmd_bench(args):
    """Throughput of the VPQ engine on synthetic videos, reported as JSON."""
    from vipseval.stq import stq as stq_fn
    from vipseval.synth import generate, random_scenario

    cats = CategoryTable([{"category_id": c, "name": f"class{c}", "is_thing": c > 3}
                          for c in range(1, 7)])

    def spec(i):
        return random_scenario(args.seed + i, args.height, args.width, args.frames,
                               max_things=8,
                               perturbation_types=("id_switch", "drop", "class_flip", "spurious"),
                               min_things=1, video_id=f"bench{i:04d}", categories=cats)

    # Videos are rendered inside the workers; only in-flight pairs are held in memory.
    pending = {}
    lock = threading.Lock()

    def gt_loader(i):
        def load():
            pair = generate(spec(i))
            with lock:
                pending[i] = pair.pred
            return pair.gt
        return load

    def pred_loader(i):
        def load():
            with lock:
                return pending.pop(i)
        return load

    t0 = time.perf_counter()
    generate(spec(0))
    gen_s = time.perf_counter() - t0
    gt = {f"bench{i:04d}": gt_loader(i) for i in range(args.videos)}
    pred = {f"bench{i:04d}": pred_loader(i) for i in range(args.videos)}
    timings = {}
    results = {}
    for n in args.thread_counts:
        t = time.perf_counter()
        rep = vpq(gt, pred, args.windows, cats, threads=n)
        timings[n] = time.perf_counter() - t
        results[n] = rep.overall_vpq
    t = time.perf_counter()
    stq_fn(gt, pred, cats, args.thread_counts[-1])
    stq_s = time.perf_counter() - t
    body = {
        "videos": args.videos,
        "frames": args.frames,
        "height": args.height,
        "width": args.width,
        "generation_seconds_per_video": gen_s,
        "note": "timings include rendering each synthetic video pair",
        "vpq_seconds_by_threads": {str(n): s for n, s in timings.items()},
        "stq_seconds": stq_s,
        "overall_vpq_by_threads": {str(n): v for n, v in results.items()},
        "cpu_count": os.cpu_count(),
    }
    print(json.dumps(body, indent=2))
    if args.out:
        _write_json(_envelope("bench", args, body), args.out)
    return 0


# -- parser ------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="vipseval", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"vipseval {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def threads_arg(sp):
        sp.add_argument("--threads", type=_positive_int, default=None,
                        help="worker threads (default: $VIPSEVAL_THREADS or CPU count)")

    sp = sub.add_parser("eval-vpq", help="tube-based VPQ over window sizes")
    sp.add_argument("--gt", required=True)
    sp.add_argument("--pred", required=True)
    sp.add_argument("--windows", type=_int_list, default=list(DEFAULT_WINDOWS))
    sp.add_argument("--out", required=True)
    sp.add_argument("--resize", type=_positive_int, default=None,
                    help="resize both sides so the short side equals this before evaluating")
    sp.add_argument("--count-void-preds", action="store_true",
                    help="count unmatched predictions lying mostly on gt void as FP")
    sp.add_argument("--figure", default=None, help="write a per-class VPQ heatmap here")
    threads_arg(sp)
    sp.set_defaults(func=cmd_eval_vpq)

    sp = sub.add_parser("eval-stq", help="STQ = sqrt(AQ * SQ)")
    sp.add_argument("--gt", required=True)
    sp.add_argument("--pred", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--resize", type=_positive_int, default=None)
    threads_arg(sp)
    sp.set_defaults(func=cmd_eval_stq)

    sp = sub.add_parser("convert", help="panoptic -> semantic or instance annotations")
    sp.add_argument("--mode", choices=("semantic", "instance"), required=True)
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_convert)

    sp = sub.add_parser("fuse", help="average stuff logits, softmax, merge with instances")
    sp.add_argument("--logits", nargs="+", required=True)
    sp.add_argument("--instances", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--weights", type=_float_list, default=None)
    sp.add_argument("--min-area", type=int, default=0)
    sp.add_argument("--overlap-keep", type=float, default=0.5)
    sp.add_argument("--video-id", default=None)
    sp.set_defaults(func=cmd_fuse)

    sp = sub.add_parser("decode", help="query/feature inner-product mask decoding")
    sp.add_argument("--queries", required=True)
    sp.add_argument("--features", required=True)
    sp.add_argument("--categories", required=True)
    sp.add_argument("--tau", type=float, default=0.0)
    sp.add_argument("--normalize", action="store_true")
    sp.add_argument("--video-id", default="decoded")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_decode)

    sp = sub.add_parser("ema", help="exponential moving average of weight snapshots")
    sp.add_argument("--snapshots", nargs="+", required=True)
    sp.add_argument("--decay", type=float, default=DEFAULT_DECAY)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_ema)

    sp = sub.add_parser("synth", help="render a synthetic gt/pred pair")
    src = sp.add_mutually_exclusive_group(required=True)
    src.add_argument("--spec")
    src.add_argument("--seed", type=int)
    sp.add_argument("--height", type=_positive_int, default=8)
    sp.add_argument("--width", type=_positive_int, default=8)
    sp.add_argument("--frames", type=_positive_int, default=6)
    sp.add_argument("--out-gt", required=True)
    sp.add_argument("--out-pred", required=True)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("resize", help="nearest-neighbour short-side resize of a dataset")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--target", type=_positive_int, default=720)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_resize)

    sp = sub.add_parser("validate", help="list invariant violations of a dataset")
    sp.add_argument("--manifest", required=True)
    sp.set_defaults(func=cmd_validate)

    sp = sub.add_parser("report", help="ranking table (and figure) from metric reports")
    sp.add_argument("reports", nargs="*", help="report JSON files, optionally NAME=path")
    sp.add_argument("--scores", action="append", help="NAME:v1,v2,... VPQ percentages per window")
    sp.add_argument("--stq", action="append", help="NAME:value")
    sp.add_argument("--windows", type=_int_list, default=list(DEFAULT_WINDOWS),
                    help="window sizes the --scores values refer to")
    sp.add_argument("--out-dir", default=None, help="write ranking.csv, ranking.json, ranking.png")
    sp.add_argument("--delimiter", default=",")
    sp.add_argument("--no-figure", action="store_true")
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("bench", help="engine throughput on synthetic videos")
    sp.add_argument("--videos", type=_positive_int, default=100)
    sp.add_argument("--frames", type=_positive_int, default=30)
    sp.add_argument("--height", type=_positive_int, default=480)
    sp.add_argument("--width", type=_positive_int, default=854)
    sp.add_argument("--windows", type=_int_list, default=list(DEFAULT_WINDOWS))
    sp.add_argument("--thread-counts", type=_int_list, default=[1])
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", default=None)
    sp.set_defaults(func=cmd_bench)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "threads", "absent") is None:
        try:
            args.threads = default_threads()
        except VipsEvalError as exc:
            parser.error(str(exc))
    try:
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except (VipsEvalError, ValueError, OSError, KeyError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"vipseval {args.command}: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
