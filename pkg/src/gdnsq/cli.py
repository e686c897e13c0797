"""Command-line entry point.

Subcommands cover the full pipeline: train-fp (FP teacher), ptq (min-max
10-bit calibration), qat (gradual bit-width convergence + LR annealing),
audit (unique-value bit-width report), verify (oracle suite),
export-metrics and fuse (integer weights + scales).

Flag precedence: command-line flags override --config (JSON), which
overrides built-in defaults; the resolved merge is written to run.json
next to the outputs. GDNSQ_SEED serves as a fallback seed. Exit codes:
0 success, 1 runtime failure, 2 usage error, 3 oracle failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .checkpoint import load_arrays, save_arrays
from .errors import GdnsqError
from .models import build_model, make_model_spec, train_teacher
from .oracles import run_all
from .pipeline import (METRICS_HEADER, RunConfig, audit_bitwidth,
                       build_student_arrays, fuse_student,
                       init_quantizers_noptq, input_features, load_dataset,
                       load_student, load_teacher, ptq_minmax, qat_run,
                       save_teacher, snap_weights)


def _env_seed():
    v = os.environ.get("GDNSQ_SEED")
    return int(v) if v else None


def _merge_config(args, defaults: dict, keys) -> dict:
    """defaults < --config file < explicitly passed flags."""
    merged = dict(defaults)
    cfg_path = getattr(args, "config", None)
    if cfg_path:
        with open(cfg_path) as f:
            file_cfg = json.load(f)
        unknown = set(file_cfg) - set(defaults)
        if unknown:
            raise GdnsqError(f"unknown config keys: {sorted(unknown)}")
        merged.update(file_cfg)
    for key in keys:
        val = getattr(args, key, None)
        if val is not None:
            merged[key] = val
    if merged.get("seed") is None:
        merged["seed"] = _env_seed() or 0
    return merged


def _write_run_json(out_dir, merged: dict):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "run.json"), "w") as f:
        json.dump(merged, f, indent=2, sort_keys=True)


def _add_data_flags(p):
    p.add_argument("--data", help="dataset id: two_gaussians, concentric_rings "
                                  "or idx:<train_img>:<train_lbl>:<val_img>:<val_lbl>")
    p.add_argument("--data-seed", type=int, dest="data_seed",
                   help="generator seed for synthetic datasets")
    p.add_argument("--n-train", type=int, dest="n_train")
    p.add_argument("--n-val", type=int, dest="n_val")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gdnsq",
        description="Quantization-aware training with learnable noise scale, "
                    "clamp bounds and exterior-point bit-width constraints.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-fp", help="train the FP teacher")
    p.add_argument("--model", help="model spec id (mlp2, mlp3, mlp4, conv3)")
    _add_data_flags(p)
    p.add_argument("--seed", type=int, help="init + shuffle seed")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float, help="constant learning rate lambda")
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--out", required=True, help="teacher checkpoint path")

    p = sub.add_parser("ptq", help="build the quantized student and run "
                                   "min-max calibration to 10-bit")
    p.add_argument("--ckpt", required=True, help="FP teacher checkpoint")
    _add_data_flags(p)
    p.add_argument("--noise-mode", dest="noise_mode",
                   choices=["bernoulli", "bernoulli_variance_matched",
                            "rounding_residual"],
                   help="backward probe for the scale gradient d(sr)/ds")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--out", required=True, help="student checkpoint path")

    p = sub.add_parser("qat", help="gradual bit-width convergence then LR "
                                   "annealing")
    p.add_argument("--ckpt", help="PTQ student checkpoint (omit with --no-ptq)")
    p.add_argument("--teacher", required=True, help="FP teacher checkpoint")
    p.add_argument("--wbits", type=float, help="weight bit-width target omega_w*")
    p.add_argument("--abits", type=float,
                   help="activation bit-width target omega_a*")
    p.add_argument("--lr0", type=float,
                   help="constant-phase learning rate lambda_0")
    p.add_argument("--epochs", type=int)
    p.add_argument("--noise-mode", dest="noise_mode",
                   choices=["bernoulli", "bernoulli_variance_matched",
                            "rounding_residual"],
                   help="backward probe for the scale gradient d(sr)/ds")
    p.add_argument("--distill", choices=["jeffreys", "cross_entropy",
                                         "hard_label_ce"],
                   help="distillation distance d (jeffreys = symmetrized KL)")
    p.add_argument("--no-ptq", action="store_true", dest="no_ptq",
                   help="skip PTQ: near-FP quantizer init straight from the "
                        "teacher (ablation)")
    p.add_argument("--freeze-bn", action="store_true", dest="freeze_bn",
                   default=None, help="freeze batchnorm running statistics "
                                      "during QAT (ablation)")
    p.add_argument("--tq-init", type=float, dest="tq_init",
                   help="additive offset on the temperature t_q; large "
                        "values disable gradual bit-width scaling (ablation)")
    p.add_argument("--seed", type=int, help="run seed (shuffle + probes)")
    p.add_argument("--batch-size", type=int, dest="batch_size")
    _add_data_flags(p)
    p.add_argument("--resume", help="resume from a qat last.ckpt")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--out", required=True, help="run output directory")

    p = sub.add_parser("audit", help="unique-value bit-width report")
    p.add_argument("--ckpt", required=True, help="student checkpoint")
    _add_data_flags(p)

    p = sub.add_parser("verify", help="run the oracle suite")
    p.add_argument("--filter", help="only oracles whose name contains this")
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("export-metrics", help="re-emit a run's metrics CSV")
    p.add_argument("--run-dir", required=True, dest="run_dir")
    p.add_argument("--format", default="csv", choices=["csv"])
    p.add_argument("--out", help="target file (stdout when omitted)")

    p = sub.add_parser("fuse", help="emit integer weights + scales for a "
                                    "converged student")
    p.add_argument("--ckpt", required=True, help="student checkpoint")
    p.add_argument("--out", required=True, help="fused container path")
    return parser


def _resolve_dataset(merged):
    return load_dataset(merged["dataset"], merged["data_seed"],
                        merged["n_train"], merged["n_val"])


def cmd_train_fp(args) -> int:
    defaults = {"model": "mlp3", "dataset": "two_gaussians", "data_seed": 0,
                "n_train": 1024, "n_val": 512, "seed": None, "epochs": 60,
                "lr": 0.01, "batch_size": 32}
    merged = _merge_config(args, defaults, list(defaults))
    if args.data:
        merged["dataset"] = args.data
    if args.lr is not None:
        merged["lr"] = args.lr
    train, val = _resolve_dataset(merged)
    spec = make_model_spec(merged["model"], input_features(train),
                           train.num_classes)
    model, meta = train_teacher(spec, train, val, epochs=merged["epochs"],
                                lam=merged["lr"], seed=merged["seed"],
                                batch_size=merged["batch_size"])
    meta.update({k: merged[k] for k in ("model", "dataset", "data_seed",
                                        "seed", "epochs", "lr")})
    meta.pop("val_acc_history", None)
    save_teacher(args.out, spec, model, meta)
    _write_run_json(os.path.dirname(os.path.abspath(args.out)), merged)
    print(f"teacher saved to {args.out} (val acc {meta['val_acc']:.4f})")
    return 0


def cmd_ptq(args) -> int:
    defaults = {"dataset": None, "data_seed": None, "n_train": None,
                "n_val": None, "noise_mode": "bernoulli", "seed": None}
    merged = _merge_config(args, defaults, list(defaults))
    spec, teacher, meta = load_teacher(args.ckpt)
    for key, fallback in (("dataset", meta.get("dataset")),
                          ("data_seed", meta.get("data_seed", 0)),
                          ("n_train", 1024), ("n_val", 512)):
        if merged.get(key) is None:
            merged[key] = fallback
    if args.data:
        merged["dataset"] = args.data
    train, val = _resolve_dataset(merged)
    config = RunConfig(model=meta.get("model", "custom"),
                       dataset=merged["dataset"],
                       data_seed=merged["data_seed"],
                       n_train=merged["n_train"], n_val=merged["n_val"],
                       noise_mode=merged["noise_mode"], seed=merged["seed"])
    student = build_model(spec, quantized=True, noise_mode=config.noise_mode)
    student.copy_weights_from(teacher)
    ptq_minmax(student, train)
    acc = student.accuracy(val.inputs, val.labels)
    arrays = build_student_arrays(config, spec, student, val_acc=acc)
    save_arrays(args.out, arrays)
    _write_run_json(os.path.dirname(os.path.abspath(args.out)),
                    config.to_dict())
    print(f"ptq student saved to {args.out} (val acc {acc:.4f}, "
          f"teacher {meta.get('val_acc')})")
    return 0


def cmd_qat(args) -> int:
    base = RunConfig().to_dict()
    if args.ckpt and not args.no_ptq:
        cfg0, spec, student, _ = load_student(args.ckpt)
        base.update(cfg0.to_dict())
    elif not args.no_ptq:
        raise GdnsqError("qat needs --ckpt (a PTQ student) unless --no-ptq")
    else:
        spec = student = None
    keys = ["wbits", "abits", "lr0", "epochs", "noise_mode", "distill",
            "tq_init", "seed", "batch_size", "data_seed", "n_train", "n_val"]
    base["seed"] = None
    merged = _merge_config(args, base, keys)
    if args.data:
        merged["dataset"] = args.data
    if args.freeze_bn is not None:
        merged["batchnorm_frozen"] = bool(args.freeze_bn)
    merged["ptq_enabled"] = not args.no_ptq
    config = RunConfig.from_dict(merged)
    _, teacher, _ = load_teacher(args.teacher)
    train, val = _resolve_dataset(merged)
    if args.no_ptq:
        spec = teacher.spec
        student = build_model(spec, quantized=True,
                              noise_mode=config.noise_mode)
        student.copy_weights_from(teacher)
        init_quantizers_noptq(student, train)
    else:
        student.set_noise_mode(config.noise_mode)
    os.makedirs(args.out, exist_ok=True)
    _write_run_json(args.out, config.to_dict())
    summary = qat_run(config, teacher, student, args.out, train, val,
                      resume_path=args.resume)
    print(json.dumps(summary, indent=2))
    return 0


def cmd_audit(args) -> int:
    config, _, student, _ = load_student(args.ckpt)
    merged = {"dataset": args.data or config.dataset,
              "data_seed": args.data_seed if args.data_seed is not None
              else config.data_seed,
              "n_train": args.n_train or config.n_train,
              "n_val": args.n_val or config.n_val}
    _, val = load_dataset(merged["dataset"], merged["data_seed"],
                          merged["n_train"], merged["n_val"])
    report = audit_bitwidth(student, val.inputs)
    print(report.format())
    acc = student.accuracy(val.inputs, val.labels)
    print(f"val accuracy: {acc:.4f}")
    return 0


def cmd_verify(args) -> int:
    seed = args.seed if args.seed is not None else (_env_seed() or 0)
    reports = run_all(name_filter=args.filter, seed=seed)
    for r in reports:
        print(r.format())
    failures = [r for r in reports if not r.passed]
    print(f"{len(reports) - len(failures)}/{len(reports)} oracle checks passed")
    return 3 if failures else 0


def cmd_export_metrics(args) -> int:
    path = os.path.join(args.run_dir, "metrics.csv")
    if not os.path.exists(path):
        raise GdnsqError(f"no metrics.csv under {args.run_dir}")
    with open(path) as f:
        content = f.read()
    header = content.splitlines()[0].split(",") if content else []
    if header != METRICS_HEADER:
        raise GdnsqError(f"{path}: unexpected metrics header")
    if args.out:
        with open(args.out, "w") as f:
            f.write(content)
    else:
        sys.stdout.write(content)
    return 0


def cmd_fuse(args) -> int:
    config, spec, student, _ = load_student(args.ckpt)
    snap_weights(student)
    fused = fuse_student(student)
    arrays = {}
    for i, f in fused.items():
        arrays[f"fuse/layer{i}/int_weights"] = f.int_weights
        arrays[f"fuse/layer{i}/scales"] = np.asarray([f.s_w, f.s_a])
        arrays[f"fuse/layer{i}/act_bounds"] = np.asarray([f.a_lo, f.a_hi])
        arrays[f"fuse/layer{i}/bias"] = student.layers[i].b.data
    save_arrays(args.out, arrays)
    print(f"fused {len(fused)} layer(s) to {args.out}")
    return 0


_COMMANDS = {
    "train-fp": cmd_train_fp,
    "ptq": cmd_ptq,
    "qat": cmd_qat,
    "audit": cmd_audit,
    "verify": cmd_verify,
    "export-metrics": cmd_export_metrics,
    "fuse": cmd_fuse,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except GdnsqError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
