"""Training pipeline: PTQ calibration, the QAT loop, auditing and persistence.

Stage order is layer replacement (build the quantized student), min-max PTQ
to 10 bits, gradual bit-width convergence under the exterior-point loss,
then exponential LR annealing once the audited max bit-width meets the
target at every site. The unique-value auditor runs once per epoch on the
validation split and drives both the LR phase switch and best-checkpoint
selection (best val accuracy among audits where max actual <= target).
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import os
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .checkpoint import (array_to_json, config_hash, json_to_array, load_arrays,
                         pack_rng_state, save_arrays, unpack_rng_state)
from .data import Dataset, load_idx_dataset, make_synthetic
from .errors import (DegenerateRangeError, DomainError, FormatError,
                     NumericError, PipelineError)
from .losses import LossState, total_loss, update_schedule
from .models import (Model, ModelSpec, build_model, make_model_spec,
                     spec_from_dict, spec_to_dict)
from .optim import LrPolicy, RAdam, lr_next
from .quantizer import FusedLinear, QuantizedLayer, integer_fuse

logger = logging.getLogger("gdnsq")

METRICS_HEADER = [
    "step", "phase", "lambda", "t_q", "c_r", "loss", "distill_d",
    "potential_P", "val_acc", "mean_w_est", "mean_w_act", "max_w_act",
    "mean_a_est", "mean_a_act", "max_a_act",
]

PTQ_BITS = 10.0
NO_PTQ_INIT_BITS = 24.0  # near-FP warm start for the no-PTQ ablation


@dataclass
class RunConfig:
    model: str = "mlp3"
    dataset: str = "two_gaussians"
    data_seed: int = 0
    n_train: int = 1024
    n_val: int = 512
    wbits: float = 4.0
    abits: float = 4.0
    lr0: float = 0.01
    batch_size: int = 32
    epochs: int = 100
    noise_mode: str = "bernoulli"
    batchnorm_frozen: bool = False
    distill: str = "jeffreys"
    ptq_enabled: bool = True
    tq_init: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.wbits < 1 or self.abits < 1:
            raise DomainError("target bit-widths must be >= 1")
        if self.distill not in ("jeffreys", "cross_entropy", "hard_label_ce"):
            raise DomainError(f"unknown distill loss {self.distill!r}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return cls(**d)


def load_dataset(dataset: str, data_seed: int, n_train: int, n_val: int):
    """Train/val pair for a dataset id.

    Synthetic ids draw disjoint substreams; "idx:tr_img:tr_lbl:va_img:va_lbl"
    reads two IDX file pairs.
    """
    if dataset.startswith("idx:"):
        parts = dataset.split(":")
        if len(parts) != 5:
            raise FormatError(
                "idx dataset id must be idx:<train_images>:<train_labels>"
                ":<val_images>:<val_labels>"
            )
        train = load_idx_dataset(parts[1], parts[2], split="train")
        val = load_idx_dataset(parts[3], parts[4], split="val",
                               num_classes=train.num_classes)
        return train, val
    train = make_synthetic(dataset, n_train, data_seed, split="train")
    val = make_synthetic(dataset, n_val, data_seed, split="val")
    return train, val


def input_features(ds: Dataset) -> int:
    # flat feature count for MLPs, channel count for image tensors
    if ds.inputs.ndim == 2:
        return ds.inputs.shape[1]
    return ds.inputs.shape[1]


# -- PTQ ----------------------------------------------------------------------


def ptq_minmax(student: Model, train_ds: Dataset, bits: float = PTQ_BITS,
               batch_size: int = 256) -> Model:
    """Min-max calibration over the training set, then bit-width = `bits`.

    Weight ranges come straight from the tensors; activation ranges are the
    min/max of each site's pre-quantization input over one full pass with
    the quantizers bypassed. Weights are untouched, only quantizer
    parameters are set.
    """
    if not student.inner_layers():
        raise PipelineError("model has no quantized layers to calibrate")
    observer = {}
    n = len(train_ds)
    with T.no_grad():
        for start in range(0, n, batch_size):
            student.forward(train_ds.inputs[start:start + batch_size],
                            train=False, bypass_quant=True, observer=observer)
    for layer in student.inner_layers():
        w = layer.W.data
        lo, hi = float(w.min()), float(w.max())
        if not hi > lo:
            raise DegenerateRangeError(
                f"{layer.weight_fq.name}: constant weight tensor (min == max "
                f"== {lo})"
            )
        layer.weight_fq.init_from_minmax(lo, hi, bits)
        alo, ahi = observer[layer.act_fq.name]
        if layer.act_fq.lower_fixed_zero:
            alo = 0.0
        if not ahi > alo:
            raise DegenerateRangeError(
                f"{layer.act_fq.name}: degenerate activation range "
                f"[{alo}, {ahi}]"
            )
        layer.act_fq.init_from_minmax(alo, ahi, bits)
    return student


def init_quantizers_noptq(student: Model, train_ds: Dataset,
                          bits: float = NO_PTQ_INIT_BITS) -> Model:
    """Quantizer init for the no-PTQ ablation: same min-max observation but
    at a near-FP bit-width, so QAT starts from an effectively unquantized
    model."""
    return ptq_minmax(student, train_ds, bits=bits)


# -- bit-width audit -----------------------------------------------------------


@dataclass
class SiteAudit:
    name: str
    kind: str  # weight | activation
    estimated: float
    levels: int
    actual: int
    degenerate: bool = False


@dataclass
class BitWidthReport:
    sites: list

    def _group(self, kind):
        return [s for s in self.sites if s.kind == kind]

    def aggregates(self, kind):
        g = self._group(kind)
        return {
            "mean_est": float(np.mean([s.estimated for s in g])),
            "mean_act": float(np.mean([s.actual for s in g])),
            "max_act": int(max(s.actual for s in g)),
        }

    def reached(self, targets) -> bool:
        wb, ab = targets
        return (self.aggregates("weight")["max_act"] <= wb
                and self.aggregates("activation")["max_act"] <= ab)

    def format(self) -> str:
        lines = [f"{'site':<24}{'est':>10}{'levels':>10}{'actual':>8}"]
        for s in self.sites:
            flag = "  (degenerate)" if s.degenerate else ""
            lines.append(f"{s.name:<24}{s.estimated:>10.4f}{s.levels:>10}"
                         f"{s.actual:>8}{flag}")
        for kind in ("weight", "activation"):
            a = self.aggregates(kind)
            lines.append(
                f"{kind}s: mean est {a['mean_est']:.4f}  mean actual "
                f"{a['mean_act']:.4f}  max actual {a['max_act']}"
            )
        return "\n".join(lines)


def _actual_bits(count: int) -> int:
    return 0 if count <= 1 else int(math.ceil(math.log2(count)))


def audit_bitwidth(model: Model, val_inputs) -> BitWidthReport:
    """Count unique dequantized values per site in a deterministic forward."""
    sites = []
    collect = {}
    with T.no_grad():
        model.forward(val_inputs, train=False, collect_acts=collect)
    for layer in model.inner_layers():
        wq = layer.weight_fq
        levels = int(np.unique(wq.quantize_array(layer.W.data)).size)
        sites.append(SiteAudit(wq.name, "weight", wq.bitwidth_value(),
                               levels, _actual_bits(levels),
                               degenerate=levels <= 1))
        aq = layer.act_fq
        vals = np.concatenate([a.reshape(-1) for a in collect[aq.name]])
        alevels = int(np.unique(vals).size)
        sites.append(SiteAudit(aq.name, "activation", aq.bitwidth_value(),
                               alevels, _actual_bits(alevels),
                               degenerate=alevels <= 1))
    for s in sites:
        if s.degenerate:
            logger.debug("degenerate site %s: %d unique value(s)",
                         s.name, s.levels)
    return BitWidthReport(sites)


# -- checkpoints ---------------------------------------------------------------


def build_student_arrays(config: RunConfig, spec: ModelSpec, model: Model,
                         opt: RAdam = None, state: LossState = None,
                         policy: LrPolicy = None, rng=None, epoch=0,
                         reached_ever=False, val_acc=None) -> dict:
    cfg = config.to_dict()
    arrays = {
        "config/json": json_to_array(cfg),
        "spec/json": json_to_array(spec_to_dict(spec)),
        "meta/config_hash": config_hash(cfg),
        "meta/epoch": np.asarray(epoch, dtype=np.int64),
    }
    arrays.update(model.state_arrays())
    for fq in model.all_quantizers():
        arrays[f"quant/{fq.name}/initialized"] = np.asarray(
            int(fq.initialized), dtype=np.int64)
    if val_acc is not None:
        arrays["meta/val_acc"] = np.asarray(float(val_acc))
    if opt is not None:
        for k, v in opt.state_arrays().items():
            arrays[f"opt/{k}"] = v
    if state is not None:
        arrays["sched/step_n"] = np.asarray(state.step_n, dtype=np.int64)
        arrays["sched/t_q"] = np.asarray(state.t_q)
        arrays["sched/c_r"] = np.asarray(state.c_r)
        arrays["sched/c_r_sum"] = np.asarray(state.c_r_sum)
    if policy is not None:
        arrays["lr/phase"] = np.asarray(
            0 if policy.phase == "constant" else 1, dtype=np.int64)
        arrays["lr/lam"] = np.asarray(policy.lam)
        arrays["lr/reached"] = np.asarray(int(reached_ever), dtype=np.int64)
    if rng is not None:
        arrays["rng/state"] = pack_rng_state(rng)
    return arrays


def load_student(path):
    """Rebuild (config, spec, model, arrays) from a student checkpoint."""
    arrays = load_arrays(path)
    config = RunConfig.from_dict(array_to_json(arrays["config/json"]))
    spec = spec_from_dict(array_to_json(arrays["spec/json"]))
    model = build_model(spec, quantized=True, noise_mode=config.noise_mode)
    model.load_state_arrays(arrays)
    for fq in model.all_quantizers():
        key = f"quant/{fq.name}/initialized"
        if key in arrays:
            fq.initialized = bool(int(arrays[key]))
    model.set_bn_frozen(config.batchnorm_frozen)
    return config, spec, model, arrays


def save_teacher(path, spec: ModelSpec, model: Model, meta: dict):
    arrays = {
        "config/json": json_to_array(meta),
        "spec/json": json_to_array(spec_to_dict(spec)),
        "meta/config_hash": config_hash(meta),
    }
    arrays.update(model.state_arrays())
    if meta.get("val_acc") is not None:
        arrays["meta/val_acc"] = np.asarray(float(meta["val_acc"]))
    save_arrays(path, arrays)


def load_teacher(path):
    arrays = load_arrays(path)
    meta = array_to_json(arrays["config/json"])
    spec = spec_from_dict(array_to_json(arrays["spec/json"]))
    model = build_model(spec, quantized=False)
    model.load_state_arrays(arrays)
    return spec, model, meta


# -- the QAT loop ----------------------------------------------------------------


def qat_run(config: RunConfig, teacher: Model, student: Model, out_dir,
            train_ds: Dataset, val_ds: Dataset, resume_path=None):
    """Gradual bit-width convergence plus final LR annealing.

    Writes metrics.csv, last.ckpt (every epoch) and best.ckpt (best val
    accuracy among audits where the max actual bit-width meets the target)
    into out_dir. Returns a summary dict.
    """
    for fq in student.all_quantizers():
        if not fq.initialized:
            raise PipelineError(
                f"quantizer {fq.name} was never initialized; run PTQ or "
                "explicit init before QAT"
            )
    os.makedirs(out_dir, exist_ok=True)
    spec = student.spec
    targets = (config.wbits, config.abits)
    state = LossState(targets=targets, tq_init=config.tq_init)
    policy = LrPolicy(lam0=config.lr0)
    opt = RAdam(student.named_parameters(), lr=config.lr0)
    rng = np.random.default_rng([config.seed, 0x514154])
    start_epoch = 0
    reached_ever = False
    if resume_path is not None:
        arrays = load_arrays(resume_path)
        student.load_state_arrays(arrays)
        opt.load_state_arrays(
            {k[len("opt/"):]: v for k, v in arrays.items()
             if k.startswith("opt/")})
        state.step_n = int(arrays["sched/step_n"])
        state.t_q = float(arrays["sched/t_q"])
        state.c_r = float(arrays["sched/c_r"])
        state.c_r_sum = float(arrays["sched/c_r_sum"])
        policy.phase = "annealing" if int(arrays["lr/phase"]) else "constant"
        policy.lam = float(arrays["lr/lam"])
        reached_ever = bool(int(arrays["lr/reached"]))
        rng = unpack_rng_state(arrays["rng/state"])
        start_epoch = int(arrays["meta/epoch"])
    for fq in student.all_quantizers():
        fq.rng = rng
    student.set_bn_frozen(config.batchnorm_frozen)

    metrics_path = os.path.join(out_dir, "metrics.csv")
    mode = "a" if (resume_path is not None and os.path.exists(metrics_path)) else "w"
    mfile = open(metrics_path, mode, newline="")
    writer = csv.writer(mfile)
    if mode == "w":
        writer.writerow(METRICS_HEADER)

    def fmt(x):
        return f"{x:.17g}"

    weight_fqs = student.weight_quantizers()
    act_fqs = student.act_quantizers()
    n = len(train_ds)
    best = {"val_acc": -1.0, "epoch": None}
    reached_epoch = None
    prev_max = {"weight": None, "activation": None}
    summary = {}
    try:
        for epoch in range(start_epoch, config.epochs):
            order = rng.permutation(n)
            for start in range(0, n, config.batch_size):
                idx = order[start:start + config.batch_size]
                xb, yb = train_ds.inputs[idx], train_ds.labels[idx]
                lam = lr_next(policy, reached_ever)
                opt.lr = lam
                state.t_q = state.tq_init + lam * state.step_n
                T.reset_tape()
                with T.no_grad():
                    t_logits = teacher.forward(xb, train=False).data
                s_logits = student.forward(xb, train=True)
                loss, info = total_loss(s_logits, t_logits, weight_fqs,
                                        act_fqs, state, labels=yb,
                                        kind=config.distill)
                if not np.isfinite(loss.data):
                    raise NumericError(
                        f"non-finite loss at epoch {epoch}, step "
                        f"{state.step_n}; last checkpoint retained"
                    )
                opt.zero_grad()
                loss.backward()
                opt.step()
                writer.writerow([state.step_n, policy.phase, fmt(lam),
                                 fmt(info["t_q"]), fmt(info["c_r"]),
                                 fmt(float(loss.data)), fmt(info["d"]),
                                 fmt(info["P"]), "", "", "", "", "", "", ""])
                update_schedule(state, lam, info["d"])
            T.reset_tape()

            report = audit_bitwidth(student, val_ds.inputs)
            val_acc = student.accuracy(val_ds.inputs, val_ds.labels)
            wagg = report.aggregates("weight")
            aagg = report.aggregates("activation")
            writer.writerow([state.step_n, policy.phase, fmt(policy.lam),
                             "", "", "", "", "", fmt(val_acc),
                             fmt(wagg["mean_est"]), fmt(wagg["mean_act"]),
                             wagg["max_act"], fmt(aagg["mean_est"]),
                             fmt(aagg["mean_act"]), aagg["max_act"]])
            mfile.flush()
            for kind, agg in (("weight", wagg), ("activation", aagg)):
                if reached_ever and prev_max[kind] is not None \
                        and agg["max_act"] > prev_max[kind]:
                    logger.warning(
                        "max actual bit-width for %ss rose %d -> %d after "
                        "the constraint activated", kind, prev_max[kind],
                        agg["max_act"])
                prev_max[kind] = agg["max_act"]
            reached_now = report.reached(targets)
            if reached_now and reached_epoch is None:
                reached_epoch = epoch
            reached_ever = reached_ever or reached_now
            ckpt = build_student_arrays(
                config, spec, student, opt=opt, state=state, policy=policy,
                rng=rng, epoch=epoch + 1, reached_ever=reached_ever,
                val_acc=val_acc)
            save_arrays(os.path.join(out_dir, "last.ckpt"), ckpt)
            if reached_now and val_acc > best["val_acc"]:
                best = {"val_acc": val_acc, "epoch": epoch}
                save_arrays(os.path.join(out_dir, "best.ckpt"), ckpt)
    finally:
        mfile.close()
    summary.update({
        "best_val_acc": best["val_acc"] if best["epoch"] is not None else None,
        "best_epoch": best["epoch"],
        "reached_epoch": reached_epoch,
        "final_lambda": policy.lam,
        "phase": policy.phase,
        "steps": state.step_n,
        "last_ckpt": os.path.join(out_dir, "last.ckpt"),
        "best_ckpt": (os.path.join(out_dir, "best.ckpt")
                      if best["epoch"] is not None else None),
        "metrics": metrics_path,
    })
    return summary


# -- integer fusion at model level ------------------------------------------------


def snap_weights(model: Model):
    """Replace inner-layer weights by their dequantized values.

    Idempotence of the fake quantizer makes this observationally identical;
    afterwards the weights sit exactly on the grid and fuse losslessly.
    """
    for layer in model.inner_layers():
        layer.W.data = layer.weight_fq.quantize_array(layer.W.data)


def fuse_student(model: Model) -> dict:
    """Integer-fuse every quantized linear layer: index -> FusedLinear."""
    fused = {}
    for i, layer in enumerate(model.layers):
        if layer.weight_fq is None:
            continue
        if layer.spec.kind != "linear":
            raise PipelineError("integer fusion covers linear layers only")
        ql = QuantizedLayer(layer.W, layer.weight_fq, layer.act_fq,
                            layer.spec.activation)
        fused[i] = integer_fuse(ql)
    return fused


def fused_model_forward(model: Model, fused: dict, x: np.ndarray) -> np.ndarray:
    """Eval forward where quantized layers run on the integer path."""
    h = np.asarray(x, dtype=np.float64)
    for i, layer in enumerate(model.layers):
        if layer.spec.kind == "linear" and h.ndim == 4:
            h = h.mean(axis=(2, 3))
        if i in fused:
            f: FusedLinear = fused[i]
            ka = np.floor(np.clip(h, f.a_lo, f.a_hi) / f.s_a + 0.5)
            h = (ka @ f.int_weights) * (f.s_w * f.s_a) + layer.b.data
            if layer.spec.activation == "relu":
                h = np.maximum(h, 0.0)
        else:
            with T.no_grad():
                t = layer.forward(T.constant(h), train=False, bypass_quant=False)
            h = t.data
    return h
