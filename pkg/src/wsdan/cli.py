"""Command line: synth, train, eval, ablate, gradcheck, export-attn."""

import argparse
import logging
import os
import sys

from .checkpoint import Checkpoint
from .config import ConfigError, load_config
from .data import (
    SynthSpecError,
    generate,
    image_only_baseline,
    question_only_baseline,
    write_dataset,
)
from .train import (
    ablate,
    evaluate,
    export_attention,
    gradcheck,
    load_data,
    model_from_checkpoint,
    train,
    write_report,
)


def _config(args, **extra):
    overrides = {"seed": args.seed, "out": args.out}
    overrides.update(extra)
    return load_config(args.config, **overrides)


def cmd_synth(args):
    cfg = _config(args, reproduce_label_shift=True if args.reproduce_label_shift else None)
    spec = cfg.synth_spec()
    ds = generate(spec)
    write_dataset(ds, cfg.out)
    print(f"wrote {len(ds.train)}/{len(ds.val)}/{len(ds.test)} examples to {cfg.out}")
    print(f"question-only baseline {question_only_baseline(ds.train, ds.test):.4f}")
    print(f"image-only baseline    {image_only_baseline(ds.train, ds.test):.4f}")
    if ds.unknown_test_answers:
        print(f"test answers never seen in training: {ds.unknown_test_answers}")
    return 0


def cmd_train(args):
    cfg = _config(args)
    res = train(cfg)
    last = res.log[-1] if res.log else None
    if last is not None:
        print(f"best epoch {res.best_epoch}; last epoch val_acc={last.val_acc:.4f} lr={last.lr:g}")
    print(f"checkpoint: {os.path.join(cfg.out, 'best.ckpt')}")
    return 0


def cmd_eval(args):
    cfg = _config(args)
    ckpt = Checkpoint.load(args.checkpoint)
    model = model_from_checkpoint(ckpt, {"data_dir": cfg.data_dir} if cfg.data_dir else None)
    ds = load_data(model.config)
    examples = ds.splits()[args.split]
    report = evaluate(model, examples, ckpt.meta.get("answers") or ds.answers)
    write_report(report, cfg.out, prefix=args.split)
    print(report.format())
    return 0


def cmd_ablate(args):
    cfg = _config(args)
    result = ablate(cfg)
    for row in result.table:
        print(",".join(row))
    return 0


def cmd_gradcheck(args):
    cfg = _config(args, dropout=0.0, dtype="float64", freeze_embedding=True if args.freeze_embedding else None)
    if args.config is None:
        cfg = cfg.replace(d=8, h=2, n=4, L=2)
    report, groups = gradcheck(cfg, h=args.h, tol=args.tol, n_answers=args.answers)
    for name in sorted(groups):
        status = "ok" if groups[name] < args.tol else "FAIL"
        print(f"{name:<16} max_rel_err={groups[name]:.3e} {status}")
    for name in ("tse.uq", "tse.uk"):
        chk = report.params[name]
        print(f"{name}: max|analytic|={chk.max_abs_analytic:.3e} max|numeric|={chk.max_abs_numeric:.3e}")
    bad = sorted(g for g, e in groups.items() if e >= args.tol)
    if bad:
        print("groups over tolerance: " + ", ".join(bad), file=sys.stderr)
        return 1
    return 0


def cmd_export_attn(args):
    cfg = _config(args)
    ckpt = Checkpoint.load(args.checkpoint)
    model = model_from_checkpoint(ckpt, {"data_dir": cfg.data_dir} if cfg.data_dir else None)
    ds = load_data(model.config)
    pool = [e for split in ds.splits().values() for e in split]
    if args.example:
        matches = [e for e in pool if e.id == args.example]
        if not matches:
            print(f"no example with id {args.example!r}", file=sys.stderr)
            return 2
        example = matches[0]
    else:
        example = ds.test[0] if ds.test else pool[0]
    paths = export_attention(model, example, ds.vocab, cfg.out)
    print(f"wrote {len(paths)} attention matrices for {example.id} to {cfg.out}")
    return 0


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value configuration file")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="wsdan", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic dataset")
    p.add_argument("--reproduce-label-shift", action="store_true",
                   help="hold one answer out of training so it appears only in test")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="train a model")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", parents=[common], help="train all three guided-attention modes")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--answers", type=int, default=5)
    p.add_argument("--freeze-embedding", action="store_true")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("export-attn", parents=[common], help="dump attention matrices as CSV")
    p.add_argument("checkpoint")
    p.add_argument("--example", help="example id (default: first test example)")
    p.set_defaults(func=cmd_export_attn)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, SynthSpecError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
