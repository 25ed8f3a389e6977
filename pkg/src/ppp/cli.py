"""Command-line entry point: ``ppp {train,enroll,prune,eval,report,selftest}``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from .errors import InsufficientEnrollmentError, PPPError
from .harness import (EvalReport, RunConfig, artifact_root, evaluate, format_report,
                      load_checkpoint, load_splits, model_from_checkpoint, report_records,
                      save_checkpoint, train)
from .prototypes import enroll, load_prototype, save_prototype
from .pruning import build_plan, prune, save_pruned, utilization_rate


def _default(path, name):
    if path:
        return path
    root = artifact_root()
    os.makedirs(root, exist_ok=True)
    return os.path.join(root, name)


def cmd_train(args):
    cfg = RunConfig.from_file(args.config)
    ckpt = train(cfg, pretrained=args.pretrained)
    out = _default(args.out, f"{cfg.mode}-seed{cfg.seed}.pt")
    save_checkpoint(ckpt, out)
    last = ckpt["history"]["epochs"][-1]
    print(f"wrote {out} (steps={ckpt['step']}, train_acc={last['train_acc']:.1f}, "
          f"on_rate={last['on_rate']:.3f})")
    return 0


def _personal_batch(cfg, identity, n, split):
    train_ds, test_ds = load_splits(cfg.data)
    ds = test_ds if split == "test" else train_ds
    idx = ds.indices_of(identity)
    if len(idx) == 0:
        raise InsufficientEnrollmentError(f"identity {identity} has no examples in the {split} split")
    return ds.x[idx[:n]]


def cmd_enroll(args):
    ckpt = load_checkpoint(args.checkpoint)
    model, cfg = model_from_checkpoint(ckpt)
    n = args.batch_size or cfg.enroll_batch_size
    x = _personal_batch(cfg, args.identity, n, args.split)
    proto = enroll(model, x, args.identity, cfg.loss.tau)
    out = _default(args.out, f"prototype-{args.identity}.json")
    save_prototype(proto, out)
    kept = sum(int(v.sum()) for v in proto.hard_masks.values())
    total = sum(v.numel() for v in proto.hard_masks.values())
    print(f"wrote {out} (identity={proto.identity}, samples={proto.sample_count}, "
          f"channels kept {kept}/{total})")
    return 0


def cmd_prune(args):
    ckpt = load_checkpoint(args.checkpoint)
    model, cfg = model_from_checkpoint(ckpt)
    proto = load_prototype(args.prototype)
    plan = build_plan(model, proto)
    pruned = prune(model, plan, provenance={"identity": proto.identity, "tau": proto.tau,
                                            "target_rate": cfg.loss.target_rate})
    out = _default(args.out, f"pruned-{proto.identity}.pt")
    save_pruned(pruned, out)
    cert = pruned.certificate
    print(f"certificate: probes={cert['probe_count']} "
          f"max_abs_deviation={cert['max_abs_deviation']!r} tolerance={cert['tolerance']}")
    print(f"utilization: propagated={utilization_rate(plan, model):.4f} "
          f"output_only={utilization_rate(plan, model, 'output_only'):.4f}")
    print(f"wrote {out}")
    return 0


def cmd_eval(args):
    ckpt = load_checkpoint(args.checkpoint)
    _, cfg = model_from_checkpoint(ckpt)
    _, test_ds = load_splits(cfg.data)
    report = evaluate(ckpt, test_ds, args.mode, enroll_batch_size=args.enroll_batch_size)
    out = _default(args.out, f"eval-{cfg.mode}-{args.mode}.json")
    report.save(out)
    print(format_report([report]).split("\n\n")[0])
    if report.omitted_identities:
        print(f"identities without test data: {report.omitted_identities}")
    print(f"wrote {out}")
    return 0


def cmd_report(args):
    reports = [EvalReport.load(p) for p in args.reports]
    print(format_report(reports), end="")
    if args.out:
        with open(args.out, "w") as f:
            json.dump(report_records(reports), f, indent=2, sort_keys=True)
            f.write("\n")
    return 0


def cmd_selftest(args):
    from .selftest import run
    return 0 if run(verbose=True) else 1


def build_parser():
    parser = argparse.ArgumentParser(
        prog="ppp", description="Prototype-based personalized pruning of gated residual networks. "
                                "Default output directory: $PPP_ARTIFACT_ROOT (else ./artifacts).")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch training progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a JSON RunConfig")
    p.add_argument("--config", required=True)
    p.add_argument("--pretrained", help="checkpoint whose network weights seed the model")
    p.add_argument("--out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("enroll", help="compute one identity's prototype")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--identity", type=int, required=True)
    p.add_argument("--batch-size", type=int, help="enrollment batch size (default from config)")
    p.add_argument("--split", choices=("test", "train"), default="test")
    p.add_argument("--out")
    p.set_defaults(func=cmd_enroll)

    p = sub.add_parser("prune", help="prune a checkpoint with a prototype file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--prototype", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mode", choices=("single", "prototype", "vanilla"), required=True)
    p.add_argument("--enroll-batch-size", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="tabulate evaluation reports next to the published reference rows")
    p.add_argument("reports", nargs="+")
    p.add_argument("--out", help="also write the machine-readable summary here")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("selftest", help="run the built-in property checks")
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    try:
        return args.func(args)
    except PPPError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return e.exit_code
    except (FileNotFoundError, IsADirectoryError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
