"""Command line entry point.

Subcommands: gen (dataset), train, eval, ablate, gradcheck, bench.
Exit codes: 0 success, 2 contract violation, 3 failed check.
"""

import argparse
import json
import sys
from pathlib import Path

from . import harness, synthdata, training
from .validation import ContractViolation

EXIT_OK = 0
EXIT_CONTRACT = 2
EXIT_CHECK_FAILED = 3


def _load_config(path):
    if path is None:
        return {}
    return json.loads(Path(path).read_text())


def cmd_gen(args):
    cfg = _load_config(args.config)
    mcfg = synthdata.MotionConfig(**cfg.get("motion", {}))
    rcfg = synthdata.RenderConfig(**cfg.get("render", {}))
    base_seed = args.seed if args.seed is not None else cfg.get("base_seed", 0)
    splits = synthdata.generate_dataset(
        args.out, cfg.get("n_sequences", 10), mcfg=mcfg, rcfg=rcfg,
        base_seed=base_seed, n_frames=cfg.get("n_frames"),
        manual_test=cfg.get("manual_test", True))
    print(json.dumps({"out": str(args.out), "splits": splits}))
    return EXIT_OK


def cmd_train(args):
    cfg = _load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    run_cfg = training.RunConfig(**cfg)
    base = training.train(run_cfg, args.data, args.out, resume=args.resume)
    print(json.dumps({"checkpoint": str(base)}))
    return EXIT_OK


def cmd_eval(args):
    report = training.evaluate(args.ckpt, args.data, args.split,
                               seed=args.seed or 0)
    report.write(args.out)
    print(report.to_json())
    return EXIT_OK


def cmd_ablate(args):
    cfg = _load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    run_cfg = training.RunConfig(**cfg)
    base_report, preset_report = training.run_ablation(
        args.preset, run_cfg, args.data, args.out, split=args.split)
    print(json.dumps({
        "preset": args.preset,
        "baseline_err_px": base_report.aggregate.err_px,
        "preset_err_px": preset_report.aggregate.err_px,
        "delta_csv": str(Path(args.out) / "delta.csv"),
    }))
    return EXIT_OK


def cmd_gradcheck(args):
    ok, report = harness.gradcheck_report(args.seed or 0)
    print(report)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "gradcheck.txt").write_text(report + "\n")
    return EXIT_OK if ok else EXIT_CHECK_FAILED


def cmd_bench(args):
    lengths = [int(v) for v in args.lengths.split(",")]
    rows, ratios = harness.bench_scan(lengths, n_state=args.n_state,
                                      channels=args.channels,
                                      repeats=args.repeats, chunk=args.chunk,
                                      seed=args.seed or 0)
    out = Path(args.out) if args.out else Path("bench")
    harness.write_bench_csv(out / "bench.csv", rows, ratios)
    for t_len, variant, sec in rows:
        print(f"{t_len:8d} {variant:8s} {sec:.6f}s")
    for (a, b, variant), r in sorted(ratios.items()):
        print(f"doubling {a}->{b} {variant}: {r:.3f}")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="needletrack",
        description="Synthetic needle-tip tracking: data, training, evaluation.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", help="output directory")

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    common(p)
    p.set_defaults(fn=cmd_gen)

    p = sub.add_parser("train", help="train a tracker")
    common(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--resume", help="checkpoint base path to resume from")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True, help="checkpoint base path")
    p.add_argument("--split", default="test")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="train/evaluate baseline vs a preset")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--preset", required=True,
                   choices=sorted(training.PRESETS))
    p.add_argument("--split", default="test")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference check of all ops")
    common(p)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("bench", help="time the scan kernels")
    common(p)
    p.add_argument("--lengths", default="1024,2048,4096")
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--chunk", type=int, default=64)
    p.add_argument("--n-state", type=int, default=8)
    p.add_argument("--channels", type=int, default=16)
    p.set_defaults(fn=cmd_bench)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    required_out = args.command in ("gen", "train", "eval", "ablate")
    try:
        if required_out and not args.out:
            raise ContractViolation(f"{args.command} requires --out")
        return args.fn(args)
    except ContractViolation as exc:
        print(f"contract violation: {exc}", file=sys.stderr)
        return EXIT_CONTRACT


if __name__ == "__main__":
    sys.exit(main())
