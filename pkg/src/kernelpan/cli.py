"""Command line entry point.

Subcommands: gen, infer, bench-postproc, eval-pq, gradcheck, augment-stats.
Exit status is 0 on success, 1 when a computation fails and 2 for usage or
configuration errors.
"""

from __future__ import annotations

import argparse
import csv
import glob
import json
import os
import statistics
import sys
import time
from dataclasses import replace

import numpy as np

from kernelpan import augment, gradcheck
from kernelpan.config import Config, load_config
from kernelpan.evaluation import PQAccumulator
from kernelpan.kernel_update import ConfigError, load_bundle, run_pipeline, save_bundle
from kernelpan.numerics import load_tensor, save_tensor
from kernelpan.postprocess import (PanopticLabelMap, PostprocConfig,
                                   baseline_postprocess, optimized_postprocess,
                                   random_postproc_inputs)
from kernelpan.scene import GroundTruthScene
from kernelpan.synthetic import (generate_synthetic_scene, oracle_pipeline_config,
                                 oracle_weights)

EXIT_FAILURE = 1
EXIT_USAGE = 2


class UsageError(Exception):
    pass


def _dump(doc, path=None) -> None:
    text = json.dumps(doc, indent=1, sort_keys=True) + "\n"
    if path:
        with open(path, "w") as f:
            f.write(text)
    else:
        sys.stdout.write(text)


def _hw(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from None
    if h < 1 or w < 1:
        raise argparse.ArgumentTypeError("sizes must be positive")
    return h, w


def _postproc_for(cfg: Config, thing_classes: int, num_classes: int) -> PostprocConfig:
    pc = cfg.postproc
    if pc.class_table:
        return pc
    table = tuple(c < thing_classes for c in range(num_classes))
    return replace(pc, class_table=table)


# gen


def cmd_gen(args, cfg: Config) -> int:
    spec = cfg.synthetic
    overrides = {k: v for k, v in (("height", args.height), ("width", args.width),
                                   ("num_things", args.things),
                                   ("num_stuff", args.stuff),
                                   ("channels", args.channels),
                                   ("noise", args.noise)) if v is not None}
    os.makedirs(os.path.join(args.out, "gt"), exist_ok=True)
    names = []
    for i in range(args.count):
        spec_i = replace(spec, seed=args.seed + i, **overrides)
        scene, features = generate_synthetic_scene(spec_i)
        name = f"scene_{i:03d}"
        names.append(name)
        d = os.path.join(args.out, name)
        os.makedirs(d, exist_ok=True)
        scene.save(os.path.join(d, "scene.json"))
        save_tensor(os.path.join(d, "features.json"), features[None])
        pcfg = oracle_pipeline_config(scene, spec_i, cfg.pipeline.num_updates)
        init, stages = oracle_weights(scene, spec_i, pcfg)
        save_bundle(os.path.join(d, "weights"), pcfg, init, stages)
        post = _postproc_for(cfg, spec_i.thing_classes, spec_i.num_classes)
        scene.to_label_map(post).save(os.path.join(args.out, "gt", name + ".json"))
    _dump({"config": cfg.to_json(), "scenes": names, "seed": args.seed},
          os.path.join(args.out, "dataset.json"))
    return 0


# infer


def _infer_one(weights_dir, features_path, out_path, cfg: Config, threads: int):
    pcfg, init, stages = load_bundle(weights_dir)
    features = load_tensor(features_path)
    if features.ndim == 3:
        features = features[None]
    out = run_pipeline(features, init, stages, pcfg)
    post = _postproc_for(cfg, pcfg.thing_classes, pcfg.num_classes)
    pred = optimized_postprocess(out.final.masks[0], out.final.probs[0], post,
                                 threads=threads)
    pred.save(out_path)


def cmd_infer(args, cfg: Config) -> int:
    if args.data:
        if args.weights or args.features:
            raise UsageError("--data cannot be combined with --weights/--features")
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.data, "dataset.json")) as f:
            names = json.load(f)["scenes"]
        for name in names:
            d = os.path.join(args.data, name)
            _infer_one(os.path.join(d, "weights"), os.path.join(d, "features.json"),
                       os.path.join(args.out, name + ".json"), cfg, args.threads)
        return 0
    if not (args.weights and args.features):
        raise UsageError("give --data, or both --weights and --features")
    parent = os.path.dirname(args.out)
    if parent:
        os.makedirs(parent, exist_ok=True)
    _infer_one(args.weights, args.features, args.out, cfg, args.threads)
    return 0


# bench-postproc


def cmd_bench(args, cfg: Config) -> int:
    h, w = args.hw
    if args.runs < 20:
        raise UsageError("--runs must be at least 20")
    rng = np.random.default_rng(args.seed)
    num_classes = args.classes
    masks, p = random_postproc_inputs(args.n, num_classes, h, w, rng)
    post = _postproc_for(cfg, cfg.pipeline.thing_classes, num_classes) \
        if not cfg.postproc.class_table else cfg.postproc
    if post.num_classes != num_classes:
        raise ConfigError(f"class table has {post.num_classes} classes, bench uses "
                          f"{num_classes}")
    methods = {
        "baseline": lambda: baseline_postprocess(masks, p, post),
        "optimized": lambda: optimized_postprocess(masks, p, post, threads=args.threads),
    }
    if methods["baseline"]() != methods["optimized"]():
        print("optimized output differs from baseline", file=sys.stderr)
        return EXIT_FAILURE
    rows, times = [], {m: [] for m in methods}
    for run in range(args.warmup + args.runs):
        for name, fn in methods.items():
            t0 = time.perf_counter()
            fn()
            ms = (time.perf_counter() - t0) * 1e3
            if run >= args.warmup:
                idx = run - args.warmup
                times[name].append(ms)
                rows.append((name, args.n, h, w, args.threads, idx, f"{ms:.4f}"))
    rows.sort(key=lambda r: (r[0], r[5]))
    header = ("method", "n_masks", "height", "width", "threads", "run_index", "millis")
    f = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
    finally:
        if args.out:
            f.close()
    med = {m: statistics.median(v) for m, v in times.items()}
    summary = {"median_ms": med, "ratio": med["optimized"] / med["baseline"]}
    print(json.dumps(summary, sort_keys=True), file=sys.stderr)
    return 0


# eval-pq


def cmd_eval(args, cfg: Config) -> int:
    gt_files = sorted(glob.glob(os.path.join(args.gt, "*.json")))
    if not gt_files:
        raise FileNotFoundError(f"no label maps in {args.gt}")
    acc = PQAccumulator()
    for path in gt_files:
        name = os.path.basename(path)
        pred_path = os.path.join(args.pred, name)
        if not os.path.exists(pred_path):
            raise FileNotFoundError(f"prediction {pred_path} is missing")
        acc.add(PanopticLabelMap.load(pred_path), PanopticLabelMap.load(path))
    things = None
    if cfg.postproc.class_table:
        things = {c for c, t in enumerate(cfg.postproc.class_table) if t}
    result = acc.result(things)
    doc = result.to_json()
    doc["images"] = len(gt_files)
    _dump(doc, args.out)
    return 0


# gradcheck


def cmd_gradcheck(args, cfg: Config) -> int:
    results = gradcheck.run_suites(args.seed, args.instances)
    ok = all(r.passed for r in results)
    _dump({"passed": ok, "suites": [r.to_json() for r in results]}, args.out)
    for r in results:
        if not r.passed:
            print(f"gradcheck {r.name}: error {r.max_error:.3e} exceeds "
                  f"{r.tolerance:.0e}", file=sys.stderr)
    return 0 if ok else EXIT_FAILURE


# augment-stats


def cmd_augment_stats(args, cfg: Config) -> int:
    h, w = args.hw
    ch, cw = args.crop
    aug = replace(cfg.augment, crop_h=ch, crop_w=cw)
    scene = augment.single_thing_scene(h, w, args.thing_top, args.thing_left,
                                       args.thing_size)
    stats = augment.crop_acceptance_stats(scene, aug, args.trials, args.seed)
    stats["instance_aware_better"] = stats["instance_aware_rate"] > stats["random_rate"]
    _dump(stats, args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS,
                        help="random seed (default 0)")
    common.add_argument("--config", default=argparse.SUPPRESS,
                        help="JSON config document")

    parser = argparse.ArgumentParser(prog="kernelpan", parents=[common],
                                     description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", parents=[common], help="write a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--things", type=int)
    p.add_argument("--stuff", type=int)
    p.add_argument("--channels", type=int)
    p.add_argument("--noise", type=float)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("infer", parents=[common],
                       help="run the pipeline and mask pasting")
    p.add_argument("--data", help="dataset directory written by gen")
    p.add_argument("--weights", help="weight bundle directory")
    p.add_argument("--features", help="feature tensor manifest")
    p.add_argument("--out", required=True,
                   help="label map path, or output directory with --data")
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("bench-postproc", parents=[common],
                       help="time baseline vs optimized mask pasting")
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--hw", type=_hw, default=(256, 512))
    p.add_argument("--classes", type=int, default=19)
    p.add_argument("--runs", type=int, default=20)
    p.add_argument("--warmup", type=int, default=2)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", help="CSV path (stdout when omitted)")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("eval-pq", parents=[common], help="panoptic quality")
    p.add_argument("--pred", required=True, help="directory of predicted label maps")
    p.add_argument("--gt", required=True, help="directory of ground-truth label maps")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", parents=[common],
                       help="finite-difference checks of all loss gradients")
    p.add_argument("--instances", type=int, default=50)
    p.add_argument("--out")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("augment-stats", parents=[common],
                       help="crop acceptance rates, instance-aware vs single draw")
    p.add_argument("--trials", type=int, default=10000)
    p.add_argument("--hw", type=_hw, default=(64, 64))
    p.add_argument("--crop", type=_hw, default=(32, 32))
    p.add_argument("--thing-top", type=int, default=4)
    p.add_argument("--thing-left", type=int, default=4)
    p.add_argument("--thing-size", type=int, default=3)
    p.add_argument("--out")
    p.set_defaults(func=cmd_augment_stats)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    args.seed = getattr(args, "seed", 0)
    try:
        cfg = load_config(getattr(args, "config", None))
    except ConfigError as exc:
        print(f"kernelpan: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args, cfg)
    except (UsageError, ConfigError) as exc:
        print(f"kernelpan: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, OSError, RuntimeError, KeyError) as exc:
        print(f"kernelpan: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
