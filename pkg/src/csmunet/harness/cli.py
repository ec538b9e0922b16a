"""Command-line entry point.

Exit codes: 0 ok, 1 invariant or test failure, 2 configuration error, 3 I/O error.
"""

import argparse
import json
import sys
from contextlib import nullcontext
from pathlib import Path

from .. import io
from ..cmsa import BoundednessError, ConfigurationError
from ..io import FormatError

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_IO = 0, 1, 2, 3


def _thread_limit(n):
    if n is None:
        return nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def _load_cfg(path, threads=None):
    from .config import RunConfig, from_mapping
    cfg = from_mapping(io.load_config(path)) if path else RunConfig().validate()
    return cfg.replace(threads=threads) if threads else cfg


def cmd_gradcheck(args):
    from .gradcheck import TOL, run_all
    rows = run_all(args.seed)
    for r in rows:
        print(f"{'ok ' if r.ok else 'BAD'} {r.module:22s} {r.group:16s} rel={r.rel_error:.2e} |g|={r.grad_norm:.2e}")
    bad = [r for r in rows if not r.ok]
    print(f"{len(rows) - len(bad)}/{len(rows)} groups within rel {TOL:g}")
    return EXIT_FAIL if bad else EXIT_OK


def cmd_train(args):
    from .train import TrainingDiverged, train
    cfg = _load_cfg(args.config, args.threads)
    if args.out_dir:
        cfg = cfg.replace(out_dir=args.out_dir)
    log = Path(args.log) if args.log else Path(cfg.out_dir) / "log.jsonl"

    def progress(ev):
        print(f"step {ev['step']:5d}  mDice {ev['mDice']:.4f}  mIoU {ev['mIoU']:.4f}", flush=True)
    try:
        res = train(cfg, log_path=log, progress=None if args.quiet else progress)
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    print(json.dumps({"hash": cfg.config_hash(), "log": str(log), "checkpoint": str(res.checkpoint),
                      "mDice": res.final["mDice"], "mIoU": res.final["mIoU"],
                      "seconds": round(res.seconds, 2)}))
    return EXIT_OK


def cmd_eval(args):
    from .. import metrics
    from . import model
    from .data import load_dataset
    from .train import load_run
    params, cfg = load_run(args.checkpoint)
    images, masks = load_dataset(args.data)
    preds = model.predict(images, params, cfg)
    out = open(args.out, "w") if args.out else sys.stdout
    try:
        for i, (pr, gt) in enumerate(zip(preds, masks)):
            for rec in metrics.metric_records(i, pr, gt, cfg.classes):
                out.write(json.dumps(rec) + "\n")
    finally:
        if args.out:
            out.close()
    _, _, mdice, miou = metrics.dataset_scores(preds, masks, cfg.classes)
    print(json.dumps({"images": len(images), "mDice": mdice, "mIoU": miou}),
          file=sys.stderr if not args.out else sys.stdout)
    return EXIT_OK


def cmd_sweep(args):
    from .train import sweep
    cfg = _load_cfg(args.config, args.threads)
    values = [v for v in args.values.split(",") if v.strip()]
    if not values:
        raise ConfigurationError("--values is empty")
    rows = sweep(cfg, args.param, values, log_dir=args.log_dir)
    print(f"{args.param:>6s}  {'mDice':>7s}  {'mIoU':>7s}")
    for r in rows:
        print(f"{r['value']:>6g}  {r['mDice']:7.4f}  {r['mIoU']:7.4f}")
    if args.out:
        Path(args.out).write_text("".join(json.dumps(r) + "\n" for r in rows))
    return EXIT_OK


def cmd_scan_bench(args):
    from .bench import scan_bench
    try:
        res = scan_bench(args.len, args.state, args.channels, args.reps)
    except ValueError as exc:
        raise ConfigurationError(str(exc)) from exc
    print(json.dumps(res))
    return EXIT_OK


def cmd_report(args):
    from .report import report
    summary = report(args.log, args.out, bench=not args.no_bench)
    print(json.dumps(summary["metrics"]))
    return EXIT_OK


def cmd_synth(args):
    from .data import save_dataset, synth_dataset
    images, masks = synth_dataset(args.seed, args.n, args.size, args.noise)
    save_dataset(args.out, images, masks)
    print(f"wrote {len(images)} image/mask pairs to {args.out}")
    return EXIT_OK


def build_parser():
    ap = argparse.ArgumentParser(prog="csmunet", description=__doc__.splitlines()[0])
    ap.add_argument("--threads", type=int, default=None,
                    help="cap BLAS/OpenMP threads (1 gives bit-reproducible runs)")
    sp = ap.add_subparsers(dest="command", required=True)

    p = sp.add_parser("gradcheck", help="finite-difference audit of all adjoints")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sp.add_parser("train", help="train the toy network")
    p.add_argument("--config", required=False)
    p.add_argument("--log")
    p.add_argument("--out-dir")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sp.add_parser("eval", help="per-image metrics for a checkpoint on a PGM dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="JSON-lines output (default stdout)")
    p.set_defaults(func=cmd_eval)

    p = sp.add_parser("sweep", help="one training run per hyperparameter value")
    p.add_argument("--param", required=True, choices=["mu_R", "mu_E", "G"])
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--config")
    p.add_argument("--log-dir")
    p.add_argument("--out")
    p.set_defaults(func=cmd_sweep)

    p = sp.add_parser("scan-bench", help="ns/token of each scan implementation")
    p.add_argument("--len", type=int, default=1024)
    p.add_argument("--state", type=int, default=16)
    p.add_argument("--channels", type=int, default=16)
    p.add_argument("--reps", type=int, default=3)
    p.set_defaults(func=cmd_scan_bench)

    p = sp.add_parser("report", help="JSON summary and heatmaps from a training log")
    p.add_argument("--log", required=True)
    p.add_argument("--out")
    p.add_argument("--no-bench", action="store_true")
    p.set_defaults(func=cmd_report)

    p = sp.add_parser("synth", help="write a synthetic PGM dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--noise", type=float, default=0.03)
    p.set_defaults(func=cmd_synth)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        with _thread_limit(args.threads):
            return args.func(args)
    except BoundednessError as exc:
        print(f"invariant failure: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except FormatError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
