"""Command-line entry point: train, match, eval-homography, bench, gradcheck, selftest.

Exit codes: 0 success, 1 contract or I/O error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

from .errors import HybridMatchError, NumericalError
from .model import PRESETS, ModelConfig, build, load, save

EXIT_OK, EXIT_CONTRACT, EXIT_NUMERICAL = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONTRACT, f"{self.prog}: error: {message}\n")


def _echo(command: str, config: dict) -> None:
    print(f"config: {json.dumps({'command': command, **config}, sort_keys=True, default=str)}")


def _model_from_args(args):
    if getattr(args, "weights", None):
        model = load(args.weights)
    else:
        model = build(ModelConfig.preset(args.preset), args.model_seed)
    if getattr(args, "optimized", False):
        model.cfg.optimized = True
    return model


# -- commands ----------------------------------------------------------------------

def cmd_train(args) -> int:
    from .training import SyntheticDataset, TrainConfig, train_loop

    grad_accum = args.grad_accum or (8 if args.preset == "B" else 32)
    tcfg = TrainConfig(lr=args.lr, weight_decay=args.weight_decay, grad_accum=grad_accum,
                       epochs=args.epochs, alpha=args.alpha, beta=args.beta, seed=args.seed,
                       schedule=args.schedule, swap=args.swap, dihedral=args.dihedral)
    mcfg = ModelConfig.preset(args.preset, coarse_dim=args.coarse_dim)
    loss_csv = Path(args.loss_csv or Path(args.out).with_suffix(".loss.csv"))
    _echo("train", {"model": mcfg.to_dict(), "train": asdict(tcfg), "pairs": args.pairs, "size": args.size,
                    "out": str(args.out), "loss_csv": str(loss_csv)})
    model = build(mcfg, args.seed)
    dataset = SyntheticDataset.range(args.pairs, size=args.size)
    if args.epochs > 0:
        def progress(step, vals):
            if args.verbose:
                print(f"step {step} L_total {vals[3]:.6f}", file=sys.stderr)
        result = train_loop(model, dataset, tcfg, progress)
        if args.select_tau:
            from .evaluation import select_tau
            n = min(args.select_tau, len(dataset))
            model.cfg.tau, aucs = select_tau(model, [dataset[i] for i in range(n)])
            print(f"tau: {model.cfg.tau:g}  AUC@3px on {n} training pairs: {100 * aucs[model.cfg.tau]:.2f}%")
        if args.calibrate and not mcfg.optimized:
            from .variants import calibrate_score_threshold
            model.cfg.score_threshold = calibrate_score_threshold(model, dataset)
            print(f"score_threshold: {model.cfg.score_threshold:.6f}")
        loss_csv.write_text(result.to_csv())
        if result.trace:
            first, last = result.trace[0][4], result.trace[-1][4]
            print(f"steps: {result.steps}  initial L_total: {first:.6f}  final L_total: {last:.6f}")
    else:
        loss_csv.write_text("step,L_c,L_f1,L_f2,L_total\n")
        print("steps: 0")
    save(model, args.out)
    print(f"weights: {args.out}  parameters: {model.num_parameters()}")
    return EXIT_OK


def cmd_match(args) -> int:
    from .pgm import read_pgm

    img_a, img_b = read_pgm(args.image_a), read_pgm(args.image_b)
    model = _model_from_args(args)
    timings_path = Path(args.timings or Path(args.out).with_suffix(".timings.csv"))
    _echo("match", {"weights": args.weights, "image_a": args.image_a, "image_b": args.image_b,
                    "optimized": model.cfg.optimized, "out": str(args.out), "timings": str(timings_path)})
    if img_a.shape != img_b.shape:
        print(f"error: image shapes differ: {img_a.shape} vs {img_b.shape}", file=sys.stderr)
        return EXIT_CONTRACT
    matches, timings = model.match_pair(img_a, img_b)
    lines = ["xa,ya,xb,yb,confidence"]
    lines += [",".join(f"{v:.4f}" for v in row) for row in matches.fine]
    Path(args.out).write_text("\n".join(lines) + "\n")
    timings_path.write_text(timings.to_csv())
    print(f"matches: {len(matches)}")
    return EXIT_OK


def cmd_eval_homography(args) -> int:
    from .evaluation import evaluate_homography, model_matcher, oracle_matcher

    if args.oracle:
        match_fn = oracle_matcher()
        cfg = {"oracle": True}
    else:
        model = _model_from_args(args)
        match_fn = model_matcher(model)
        cfg = {"weights": args.weights, "model": model.cfg.to_dict()}
    _echo("eval-homography", {**cfg, "pairs": args.pairs, "seed": args.seed, "size": args.size})
    report = evaluate_homography(match_fn, args.pairs, args.seed, args.size)
    for line in report.summary_lines():
        print(line)
    if args.out:
        rows = ["seed,matches,precision,corner_error"]
        rows += [f"{p.seed},{p.n_matches},{p.precision:.6f},{p.corner_error:.6f}" for p in report.pairs]
        Path(args.out).write_text("\n".join(rows) + "\n")
    return EXIT_OK


def cmd_bench(args) -> int:
    from .bench import bench, bench_csv

    sizes = [int(s) for s in args.sizes.split(",") if s]
    model = _model_from_args(args)
    _echo("bench", {"weights": args.weights, "sizes": sizes, "runs": args.runs, "warmup": args.warmup,
                    "single_thread": args.single_thread, "seed": args.seed})
    rows = bench(model, sizes, args.runs, args.warmup, args.seed, args.single_thread)
    text = bench_csv(rows)
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    import contextlib

    from .gradsuite import TOLERANCE, run_gradcheck
    from .numerics import inject_backward_fault

    _echo("gradcheck", {"seed": args.seed, "tolerance": TOLERANCE, "inject_fault": args.inject_fault})
    ctx = inject_backward_fault(args.inject_fault) if args.inject_fault else contextlib.nullcontext()
    with ctx:
        results = run_gradcheck(args.seed)
    for r in results:
        print(f"{r.name:16s} max_rel_err={r.max_error:.3e} {'PASS' if r.passed else 'FAIL'}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"gradcheck failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .selftest import run_selftest

    _echo("selftest", {"seed": args.seed})
    results = run_selftest(args.seed)
    for name, ok, detail in results:
        print(f"{name:24s} {'PASS' if ok else 'FAIL'} {detail}")
    failed = [name for name, ok, _ in results if not ok]
    if failed:
        print(f"selftest failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


# -- parser -------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    from .training.loop import SCHEDULES

    p = _Parser(prog="hybridmatch", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train on synthetic homography pairs")
    t.add_argument("--preset", choices=sorted(PRESETS), default="T")
    t.add_argument("--epochs", type=int, default=1)
    t.add_argument("--pairs", type=int, default=200)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", default="weights.hmw")
    t.add_argument("--loss-csv")
    t.add_argument("--lr", type=float, default=1e-4)
    t.add_argument("--weight-decay", type=float, default=0.1)
    t.add_argument("--grad-accum", type=int, help="default 8 for preset B, 32 for preset T")
    t.add_argument("--schedule", choices=SCHEDULES, default="constant", help="learning-rate schedule")
    t.add_argument("--swap", action="store_true", help="train on (B, A, inverse H) for a random half of the visits")
    t.add_argument("--dihedral", action="store_true",
                   help="apply a random flip or transpose to both images of each visit")
    t.add_argument("--select-tau", type=int, default=0, metavar="N",
                   help="pick the match threshold with the best AUC@3px on the first N training pairs")
    t.add_argument("--alpha", type=float, default=1.0)
    t.add_argument("--beta", type=float, default=0.25)
    t.add_argument("--coarse-dim", type=int, default=128)
    t.add_argument("--size", type=int, default=128)
    t.add_argument("--calibrate", action="store_true",
                   help="fit the raw-score threshold of the optimised variant after training")
    t.add_argument("--verbose", action="store_true")
    t.set_defaults(func=cmd_train)

    m = sub.add_parser("match", help="match two PGM images")
    m.add_argument("image_a")
    m.add_argument("image_b")
    m.add_argument("--weights", required=True)
    m.add_argument("--optimized", action="store_true")
    m.add_argument("--out", default="matches.csv")
    m.add_argument("--timings")
    m.set_defaults(func=cmd_match)

    e = sub.add_parser("eval-homography", help="homography accuracy on synthetic pairs")
    e.add_argument("--weights")
    e.add_argument("--preset", choices=sorted(PRESETS), default="T")
    e.add_argument("--model-seed", type=int, default=0, help="initialisation seed when no weights are given")
    e.add_argument("--pairs", type=int, default=50)
    e.add_argument("--seed", type=int, default=10_000)
    e.add_argument("--size", type=int, default=128)
    e.add_argument("--optimized", action="store_true")
    e.add_argument("--oracle", action="store_true", help="score ground-truth matches instead of a model")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval_homography)

    b = sub.add_parser("bench", help="per-stage timing table")
    b.add_argument("--weights")
    b.add_argument("--preset", choices=sorted(PRESETS), default="T")
    b.add_argument("--model-seed", type=int, default=0, help="initialisation seed when no weights are given")
    b.add_argument("--sizes", default="128,256,512")
    b.add_argument("--runs", type=int, default=20)
    b.add_argument("--warmup", type=int, default=2)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--optimized", action="store_true")
    b.add_argument("--single-thread", action="store_true")
    b.add_argument("--out")
    b.set_defaults(func=cmd_bench)

    g = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--inject-fault", metavar="OP", help=argparse.SUPPRESS)
    g.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("selftest", help="fast internal consistency checks")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_selftest)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # usage errors and --help
        return exc.code if isinstance(exc.code, int) else EXIT_CONTRACT
    try:
        return args.func(args)
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (HybridMatchError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONTRACT


if __name__ == "__main__":
    sys.exit(main())
