"""Single command-line entry point for every workflow.

Subcommands: corrupt, schedule-corrupt, datagen, train, eval, sdr-map,
gradcheck, report. Exit codes: 0 on success, 1 on usage errors, 2 on
runtime errors. Every seeded subcommand is end-to-end deterministic.
The ACDK_THREADS environment variable caps worker parallelism for the
batch corruption loops (default: available cores).
"""

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor

from . import corruption, datagen, evalsuite, gradcheck, report, trainer
from .imagecore import Rng, load_image, load_pfm, save_image, worker_count
from .sdr import METRICS

USAGE_EXIT = 1
RUNTIME_EXIT = 2


class _Parser(argparse.ArgumentParser):
    """argparse with exit code 1 for usage errors (default would be 2)."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(USAGE_EXIT)


def _image_files(directory):
    names = sorted(n for n in os.listdir(directory)
                   if n.endswith((".pgm", ".ppm")))
    if not names:
        raise ValueError(f"no .pgm/.ppm images in {directory}")
    return names


def _parse_query(text):
    parts = text.split(",")
    if len(parts) != 2:
        raise ValueError(f"query must be 'ROW,COL', got {text!r}")
    return int(parts[0]), int(parts[1])


# ---------------------------------------------------------------------------
# Subcommand bodies
# ---------------------------------------------------------------------------


def _cmd_corrupt(args):
    os.makedirs(args.out, exist_ok=True)
    names = _image_files(getattr(args, "in"))
    root = Rng(args.seed)

    def run(name):
        img = load_image(os.path.join(getattr(args, "in"), name))
        out = corruption.apply_corruption(img, args.kind, args.severity,
                                          root.fork(name))
        save_image(out, os.path.join(args.out, name))

    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        list(pool.map(run, names))
    print(f"corrupted {len(names)} image(s) with {args.kind} "
          f"severity {args.severity}")
    return 0


def _cmd_schedule_corrupt(args):
    os.makedirs(args.out, exist_ok=True)
    names = _image_files(getattr(args, "in"))
    cfg = corruption.SchedulerConfig(p_blur=args.p_blur,
                                     p_weather=args.p_weather,
                                     apply_dark=not args.no_dark)
    root = Rng(args.seed)

    def run(name):
        img = load_image(os.path.join(getattr(args, "in"), name))
        out, applied = corruption.schedule_perturb(img, cfg, root.fork(name))
        save_image(out, os.path.join(args.out, name))
        return {"file": name, "kinds": [k for k, _ in applied],
                "severities": [s for _, s in applied], "seed": args.seed}

    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        records = list(pool.map(run, names))
    log_path = args.log or os.path.join(args.out, "manifest.jsonl")
    with open(log_path, "w") as f:
        for rec in records:
            f.write(json.dumps(rec) + "\n")
    print(f"perturbed {len(names)} image(s); manifest at {log_path}")
    return 0


def _cmd_datagen(args):
    records = datagen.generate_dataset(args.count, args.size, args.seed, args.out)
    print(f"wrote {len(records)} scene(s) to {args.out}")
    return 0


def _cmd_train(args):
    cfg = trainer.parse_config(args.config)
    reports = trainer.train(cfg, args.data, args.out, log_path=args.log)
    if reports:
        last = reports[-1]
        print(f"finished {len(reports)} step(s); final total loss "
              f"{last.total:.6f}; checkpoint at {args.out}")
    else:
        print(f"no training steps configured; checkpoint at {args.out}")
    return 0


def _cmd_eval(args):
    kinds = [k for k in args.kinds.split(",") if k] if args.kinds else []
    severities = [int(s) for s in args.severities.split(",") if s] \
        if args.severities else []
    for kind in kinds:
        if kind not in corruption.KINDS:
            raise ValueError(f"unknown corruption kind {kind!r}")
    rep = evalsuite.robustness_sweep(args.ckpt, args.data, kinds, severities,
                                     args.seed, report_path=args.report)
    print(f"clean: absrel={rep.absrel:.4f} delta1={rep.delta1:.4f}")
    for (kind, sev), row in rep.breakdown.items():
        print(f"{kind} s{sev}: absrel={row['absrel']:.4f} "
              f"delta1={row['delta1']:.4f}")
    if args.pairs:
        from .model import forward, load_checkpoint

        model = load_checkpoint(args.ckpt)
        pairs_by_image = evalsuite.load_ordinal_pairs(args.pairs)
        dataset = {name: img for name, img, _ in
                   datagen.load_dataset(args.data, with_gt=False)}
        correct, total = 0.0, 0
        for image_name, pairs in pairs_by_image.items():
            if image_name not in dataset:
                raise ValueError(f"pairs file references unknown image "
                                 f"{image_name!r}")
            pred, _ = forward(model, dataset[image_name])
            acc = evalsuite.ordinal_accuracy(pred.data, pairs)
            correct += acc * len(pairs)
            total += len(pairs)
        print(f"ordinal accuracy: {correct / total:.4f} over {total} pair(s)")
        if args.report:
            with open(args.report, "a") as f:
                f.write(json.dumps({"ordinal_accuracy": correct / total,
                                    "n_pairs": total}) + "\n")
    return 0


def _cmd_sdr_map(args):
    from .sdr import patchify, sdr_row_map
    from .imagecore import ImageBuffer

    dmap = load_pfm(args.disparity)
    h = (dmap.height // args.patch) * args.patch
    w = (dmap.width // args.patch) * args.patch
    if h == 0 or w == 0:
        raise ValueError("disparity map smaller than one patch")
    grid = patchify(dmap.data[:h, :w], args.patch)
    heat = sdr_row_map(grid, _parse_query(args.query), args.metric)
    save_image(ImageBuffer(heat[:, :, None]), args.out)
    print(f"wrote {grid.hp}x{grid.wp} heat field to {args.out}")
    return 0


def _cmd_gradcheck(args):
    lines, ok, fault = gradcheck.run_gradcheck(args.seed)
    for line in lines:
        print(line)
    print(f"gradcheck: {'PASS' if ok else 'FAIL'}")
    return 0 if ok else RUNTIME_EXIT


def _cmd_report(args):
    queries = []
    if args.queries:
        queries = [_parse_query(q) for q in args.queries.split(";") if q]
    written = report.render_report(args.steps, args.sweep, args.out,
                                   disparity_path=args.disparity,
                                   queries=queries, patch_size=args.patch,
                                   metric=args.metric)
    print(f"wrote {', '.join(written)} to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# Parser wiring
# ---------------------------------------------------------------------------


def build_parser():
    parser = _Parser(prog="acdk",
                     description="Corruption-robust relative-depth toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    fmt = argparse.ArgumentDefaultsHelpFormatter

    p = sub.add_parser("corrupt", formatter_class=fmt,
                       help="apply one corruption kind to a directory of images")
    p.add_argument("--kind", choices=corruption.KINDS, required=True,
                   help="corruption to apply")
    p.add_argument("--severity", type=int, default=3, help="severity level 1..5")
    p.add_argument("--seed", type=int, default=0, help="corruption seed")
    p.add_argument("--in", required=True, help="input directory of PGM/PPM images")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_corrupt)

    p = sub.add_parser("schedule-corrupt", formatter_class=fmt,
                       help="apply the probabilistic perturbation schedule")
    p.add_argument("--p-blur", type=float, default=0.1, dest="p_blur",
                   help="probability of one blur perturbation")
    p.add_argument("--p-weather", type=float, default=0.2, dest="p_weather",
                   help="probability of one weather/contrast perturbation")
    p.add_argument("--no-dark", action="store_true",
                   help="skip the always-on darkness stage")
    p.add_argument("--seed", type=int, default=0, help="schedule seed")
    p.add_argument("--in", required=True, help="input directory of PGM/PPM images")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--log", default=None,
                   help="manifest JSONL path (default: <out>/manifest.jsonl)")
    p.set_defaults(func=_cmd_schedule_corrupt)

    p = sub.add_parser("datagen", formatter_class=fmt,
                       help="generate synthetic scenes with ground truth")
    p.add_argument("--count", type=int, default=10, help="number of scenes")
    p.add_argument("--size", type=int, default=64,
                   help="square image size (divisible by 8)")
    p.add_argument("--seed", type=int, default=0, help="generation seed")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_datagen)

    p = sub.add_parser("train", formatter_class=fmt,
                       help="run the training protocol from a config file")
    p.add_argument("--config", required=True, help="key = value config file")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output checkpoint path")
    p.add_argument("--log", default=None, help="step-report JSONL path")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", formatter_class=fmt,
                       help="evaluate a checkpoint on clean and corrupted data")
    p.add_argument("--ckpt", required=True, help="checkpoint path")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--kinds", default="fog,snow,dark,motion_blur",
                   help="comma-separated corruption kinds")
    p.add_argument("--severities", default="1,3,5",
                   help="comma-separated severity levels")
    p.add_argument("--seed", type=int, default=0, help="corruption seed")
    p.add_argument("--report", default=None, help="output JSONL path")
    p.add_argument("--pairs", default=None,
                   help="ordinal pairs JSONL {image, ax, ay, bx, by, closer}")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("sdr-map", formatter_class=fmt,
                       help="export a spatial-distance heat field for one patch")
    p.add_argument("--disparity", required=True, help="input PFM disparity map")
    p.add_argument("--patch", type=int, default=14, help="patch size in pixels")
    p.add_argument("--query", required=True, help="query patch as ROW,COL")
    p.add_argument("--metric", choices=METRICS, default="euclidean",
                   help="distance metric")
    p.add_argument("--out", required=True, help="output PGM path")
    p.set_defaults(func=_cmd_sdr_map)

    p = sub.add_parser("gradcheck", formatter_class=fmt,
                       help="verify analytic gradients against finite differences")
    p.add_argument("--seed", type=int, default=0, help="sampling seed")
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("report", formatter_class=fmt,
                       help="render metric grids, figures, and heatmaps")
    p.add_argument("--steps", default=None, help="step-report JSONL from train")
    p.add_argument("--sweep", default=None, help="sweep JSONL from eval")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--disparity", default=None,
                   help="PFM disparity map for query heatmaps")
    p.add_argument("--queries", default=None,
                   help="semicolon-separated ROW,COL query patches")
    p.add_argument("--patch", type=int, default=14, help="patch size in pixels")
    p.add_argument("--metric", choices=METRICS, default="euclidean",
                   help="distance metric")
    p.set_defaults(func=_cmd_report)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, RuntimeError) as exc:
        sys.stderr.write(f"acdk {args.command}: error: {exc}\n")
        return RUNTIME_EXIT


if __name__ == "__main__":
    sys.exit(main())
