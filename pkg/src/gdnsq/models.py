"""Desk-scale models: MLPs and a small conv net, FP or with quantized inner layers.

A model is an ordered list of linear / conv2d layers. When built quantized,
every inner layer (all but the first and last) gets a weight quantizer on
its kernel and an activation quantizer on its input; first and last layers
stay floating point. Conv blocks are conv-bn-relu; a global average pool
bridges the last conv layer to the linear head.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import NumericError, ShapeError, SpecError
from .kernels import conv2d_backward_input, conv2d_backward_weight, conv2d_forward
from .losses import hard_label_loss
from .optim import RAdam
from .quantizer import FakeQuantizer
from .tensor import Tensor


@dataclass
class Linear:
    in_features: int
    out_features: int
    activation: str = "relu"
    batchnorm: bool = False
    kind: str = field(default="linear", init=False)


@dataclass
class Conv2d:
    in_channels: int
    out_channels: int
    kernel: int = 3
    stride: int = 1
    padding: int = 1
    activation: str = "relu"
    batchnorm: bool = True
    kind: str = field(default="conv2d", init=False)


@dataclass
class ModelSpec:
    layers: list
    num_classes: int

    def __post_init__(self):
        if not self.layers:
            raise SpecError("empty layer list")
        prev_out = None
        for i, layer in enumerate(self.layers):
            cur_in = (layer.in_features if layer.kind == "linear"
                      else layer.in_channels)
            if prev_out is not None and cur_in != prev_out:
                raise SpecError(
                    f"layer {i} expects {cur_in} inputs but layer {i-1} "
                    f"produces {prev_out}"
                )
            prev_out = (layer.out_features if layer.kind == "linear"
                        else layer.out_channels)
        last = self.layers[-1]
        if last.kind != "linear" or last.out_features != self.num_classes:
            raise SpecError("final layer must be linear emitting num_classes")


def make_model_spec(spec_id: str, in_features: int, num_classes: int) -> ModelSpec:
    """Named desk-scale architectures. `in_features` is the flat input size
    for MLPs and the channel count for the conv net."""
    h = 48
    if spec_id == "mlp2":
        layers = [Linear(in_features, h), Linear(h, num_classes, "identity")]
    elif spec_id == "mlp3":
        layers = [Linear(in_features, h), Linear(h, h),
                  Linear(h, num_classes, "identity")]
    elif spec_id == "mlp4":
        layers = [Linear(in_features, h), Linear(h, h), Linear(h, h),
                  Linear(h, num_classes, "identity")]
    elif spec_id == "conv3":
        layers = [
            Conv2d(in_features, 8, stride=2),
            Conv2d(8, 16, stride=2),
            Conv2d(16, 16, stride=2),
            Linear(16, num_classes, "identity"),
        ]
    else:
        raise SpecError(f"unknown model spec id {spec_id!r}")
    return ModelSpec(layers, num_classes)


def spec_to_dict(spec: ModelSpec) -> dict:
    layers = []
    for l in spec.layers:
        if l.kind == "linear":
            layers.append({"kind": "linear", "in": l.in_features,
                           "out": l.out_features, "act": l.activation,
                           "bn": l.batchnorm})
        else:
            layers.append({"kind": "conv2d", "in": l.in_channels,
                           "out": l.out_channels, "kernel": l.kernel,
                           "stride": l.stride, "pad": l.padding,
                           "act": l.activation, "bn": l.batchnorm})
    return {"layers": layers, "num_classes": spec.num_classes}


def spec_from_dict(d: dict) -> ModelSpec:
    layers = []
    for l in d["layers"]:
        if l["kind"] == "linear":
            layers.append(Linear(l["in"], l["out"], l["act"], l["bn"]))
        else:
            layers.append(Conv2d(l["in"], l["out"], l["kernel"], l["stride"],
                                 l["pad"], l["act"], l["bn"]))
    return ModelSpec(layers, d["num_classes"])


class BatchNorm:
    """Batch normalization with freezable running statistics."""

    def __init__(self, num_features, momentum=0.1, eps=1e-5, frozen=False):
        self.num_features = num_features
        self.momentum = momentum
        self.eps = eps
        self.frozen = frozen
        self.gamma = Tensor(np.ones(num_features), requires_grad=True)
        self.beta = Tensor(np.zeros(num_features), requires_grad=True)
        self.running_mean = np.zeros(num_features)
        self.running_var = np.ones(num_features)

    def forward(self, x: Tensor, train: bool) -> Tensor:
        if x.data.ndim == 2:
            axes, pshape = (0,), (1, self.num_features)
        elif x.data.ndim == 4:
            axes, pshape = (0, 2, 3), (1, self.num_features, 1, 1)
        else:
            raise ShapeError(f"batchnorm expects 2-d or 4-d input, got {x.shape}")
        if train and not self.frozen:
            mu = T.mean(x, axis=axes, keepdims=True)
            centered = T.sub(x, T.broadcast_to(mu, x.shape))
            var = T.mean(T.mul(centered, centered), axis=axes, keepdims=True)
            self.running_mean = ((1 - self.momentum) * self.running_mean
                                 + self.momentum * mu.data.reshape(-1))
            self.running_var = ((1 - self.momentum) * self.running_var
                                + self.momentum * var.data.reshape(-1))
            denom = T.sqrt(T.add(var, self.eps))
            xhat = T.div(centered, T.broadcast_to(denom, x.shape))
        else:
            mu = self.running_mean.reshape(pshape)
            sd = np.sqrt(self.running_var.reshape(pshape) + self.eps)
            xhat = T.div(T.sub(x, T.constant(np.broadcast_to(mu, x.data.shape).copy())),
                         T.constant(np.broadcast_to(sd, x.data.shape).copy()))
        g = T.broadcast_to(T.reshape(self.gamma, pshape), x.shape)
        b = T.broadcast_to(T.reshape(self.beta, pshape), x.shape)
        return T.add(T.mul(xhat, g), b)


def _conv2d_op(x: Tensor, w: Tensor, stride: int, pad: int) -> Tensor:
    out = conv2d_forward(x.data, w.data, stride, pad)
    x_shape, w_shape = x.data.shape, w.data.shape
    xd, wd = x.data, w.data

    def rule(g):
        return (conv2d_backward_input(g, wd, x_shape, stride, pad),
                conv2d_backward_weight(g, xd, w_shape, stride, pad))

    return T._record([x, w], out, rule, "conv2d")


class _Layer:
    """One linear or conv layer with optional batchnorm and quantizers."""

    def __init__(self, spec, rng):
        self.spec = spec
        self.weight_fq = None
        self.act_fq = None
        if spec.kind == "linear":
            fan_in = spec.in_features
            gain = 2.0 if spec.activation == "relu" else 1.0
            self.W = Tensor(rng.normal(0.0, np.sqrt(gain / fan_in),
                                       size=(spec.in_features, spec.out_features)),
                            requires_grad=True)
            self.b = Tensor(np.zeros(spec.out_features), requires_grad=True)
            n_out = spec.out_features
        else:
            fan_in = spec.in_channels * spec.kernel * spec.kernel
            self.W = Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in),
                                       size=(spec.out_channels, spec.in_channels,
                                             spec.kernel, spec.kernel)),
                            requires_grad=True)
            self.b = Tensor(np.zeros(spec.out_channels), requires_grad=True)
            n_out = spec.out_channels
        self.bn = BatchNorm(n_out) if spec.batchnorm else None

    def attach_quantizers(self, noise_mode, rng, name):
        self.weight_fq = FakeQuantizer("weight", noise_mode, name=f"{name}/weight",
                                       rng=rng)
        self.act_fq = FakeQuantizer("activation", noise_mode, name=f"{name}/act",
                                    rng=rng)

    def forward(self, x: Tensor, train: bool, bypass_quant=False,
                observer=None, collect_acts=None) -> Tensor:
        quant = self.weight_fq is not None and not bypass_quant
        if self.act_fq is not None and observer is not None:
            lo, hi = observer.get(self.act_fq.name, (np.inf, -np.inf))
            observer[self.act_fq.name] = (min(lo, float(x.data.min())),
                                          max(hi, float(x.data.max())))
        if quant:
            x = self.act_fq.apply(x)
            w = self.weight_fq.apply(self.W)
            if collect_acts is not None:
                collect_acts.setdefault(self.act_fq.name, []).append(x.data)
        else:
            w = self.W
        if self.spec.kind == "linear":
            y = T.matmul(x, w)
            bb = T.broadcast_to(T.reshape(self.b, (1, -1)), y.shape)
        else:
            y = _conv2d_op(x, w, self.spec.stride, self.spec.padding)
            bb = T.broadcast_to(T.reshape(self.b, (1, -1, 1, 1)), y.shape)
        y = T.add(y, bb)
        if self.bn is not None:
            y = self.bn.forward(y, train)
        if self.spec.activation == "relu":
            y = T.relu(y)
        return y


class Model:
    def __init__(self, spec: ModelSpec, quantized=False, noise_mode="bernoulli",
                 init_seed=0, quant_rng=None):
        self.spec = spec
        self.quantized = quantized
        rng = np.random.default_rng([init_seed, 0x6D6F64])
        self.layers = [_Layer(ls, rng) for ls in spec.layers]
        if quantized:
            if len(spec.layers) < 3:
                raise SpecError(
                    "quantized model needs at least 3 layers so an inner "
                    "layer exists (first and last stay FP)"
                )
            qrng = quant_rng if quant_rng is not None else np.random.default_rng()
            for i in range(1, len(self.layers) - 1):
                self.layers[i].attach_quantizers(noise_mode, qrng, f"layer{i}")

    # -- structure ---------------------------------------------------------

    def inner_layers(self):
        return [l for l in self.layers if l.weight_fq is not None]

    def weight_quantizers(self):
        return [l.weight_fq for l in self.inner_layers()]

    def act_quantizers(self):
        return [l.act_fq for l in self.inner_layers()]

    def all_quantizers(self):
        out = []
        for l in self.inner_layers():
            out.extend([l.weight_fq, l.act_fq])
        return out

    def named_parameters(self):
        ps = []
        for i, l in enumerate(self.layers):
            ps.append((f"model/{i}/W", l.W))
            ps.append((f"model/{i}/b", l.b))
            if l.bn is not None:
                ps.append((f"model/{i}/bn_gamma", l.bn.gamma))
                ps.append((f"model/{i}/bn_beta", l.bn.beta))
        for l in self.inner_layers():
            for fq in (l.weight_fq, l.act_fq):
                ps.extend(fq.parameters())
        return ps

    def set_bn_frozen(self, frozen: bool):
        for l in self.layers:
            if l.bn is not None:
                l.bn.frozen = frozen

    def set_noise_mode(self, mode: str):
        for fq in self.all_quantizers():
            fq.noise_mode = mode

    # -- forward -------------------------------------------------------------

    def forward(self, x, train=True, bypass_quant=False, observer=None,
                collect_acts=None) -> Tensor:
        h = T.as_tensor(x)
        for i, layer in enumerate(self.layers):
            if layer.spec.kind == "linear" and h.data.ndim == 4:
                h = T.mean(h, axis=(2, 3))  # global average pool
            h = layer.forward(h, train, bypass_quant=bypass_quant,
                              observer=observer, collect_acts=collect_acts)
        return h

    def predict_logits(self, x, bypass_quant=False) -> np.ndarray:
        with T.no_grad():
            return self.forward(x, train=False, bypass_quant=bypass_quant).data

    def accuracy(self, inputs, labels) -> float:
        logits = self.predict_logits(inputs)
        return float(np.mean(np.argmax(logits, axis=1) == labels))

    # -- persistence -----------------------------------------------------------

    def state_arrays(self):
        out = {}
        for i, l in enumerate(self.layers):
            out[f"model/{i}/W"] = l.W.data
            out[f"model/{i}/b"] = l.b.data
            if l.bn is not None:
                out[f"model/{i}/bn_gamma"] = l.bn.gamma.data
                out[f"model/{i}/bn_beta"] = l.bn.beta.data
                out[f"model/{i}/bn_rmean"] = l.bn.running_mean
                out[f"model/{i}/bn_rvar"] = l.bn.running_var
        for l in self.inner_layers():
            for fq in (l.weight_fq, l.act_fq):
                for k, v in fq.state_arrays().items():
                    out[f"quant/{fq.name}/{k}"] = v
        return out

    def load_state_arrays(self, arrays):
        for i, l in enumerate(self.layers):
            l.W.data = np.asarray(arrays[f"model/{i}/W"]).reshape(l.W.data.shape)
            l.b.data = np.asarray(arrays[f"model/{i}/b"]).reshape(l.b.data.shape)
            if l.bn is not None:
                l.bn.gamma.data = np.asarray(arrays[f"model/{i}/bn_gamma"])
                l.bn.beta.data = np.asarray(arrays[f"model/{i}/bn_beta"])
                l.bn.running_mean = np.asarray(arrays[f"model/{i}/bn_rmean"])
                l.bn.running_var = np.asarray(arrays[f"model/{i}/bn_rvar"])
        for l in self.inner_layers():
            for fq in (l.weight_fq, l.act_fq):
                prefix = f"quant/{fq.name}/"
                sub = {k[len(prefix):]: v for k, v in arrays.items()
                       if k.startswith(prefix)}
                if sub:
                    fq.load_state_arrays(sub)

    def copy_weights_from(self, other: "Model"):
        for mine, theirs in zip(self.layers, other.layers):
            mine.W.data = theirs.W.data.copy()
            mine.b.data = theirs.b.data.copy()
            if mine.bn is not None and theirs.bn is not None:
                mine.bn.gamma.data = theirs.bn.gamma.data.copy()
                mine.bn.beta.data = theirs.bn.beta.data.copy()
                mine.bn.running_mean = theirs.bn.running_mean.copy()
                mine.bn.running_var = theirs.bn.running_var.copy()


def build_model(spec: ModelSpec, quantized: bool, noise_mode="bernoulli",
                init_seed=0, quant_rng=None) -> Model:
    return Model(spec, quantized=quantized, noise_mode=noise_mode,
                 init_seed=init_seed, quant_rng=quant_rng)


def train_teacher(spec: ModelSpec, train_ds, val_ds, epochs=50, lam=0.01,
                  seed=0, batch_size=32):
    """Train the FP reference model with hard-label cross-entropy.

    Returns (model, history); history carries per-epoch val accuracy and
    the final value ends up in checkpoint metadata.
    """
    model = build_model(spec, quantized=False, init_seed=seed)
    opt = RAdam(model.named_parameters(), lr=lam)
    shuffle_rng = np.random.default_rng([seed, 0x7368])
    n = train_ds.inputs.shape[0]
    history = []
    for epoch in range(epochs):
        order = shuffle_rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            T.reset_tape()
            logits = model.forward(train_ds.inputs[idx], train=True)
            loss = hard_label_loss(logits, train_ds.labels[idx])
            if not np.isfinite(loss.data):
                raise NumericError(
                    f"teacher training diverged at epoch {epoch} "
                    f"(loss {float(loss.data)!r})"
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
        history.append(model.accuracy(val_ds.inputs, val_ds.labels))
    T.reset_tape()
    return model, {"val_acc": history[-1] if history else None,
                   "val_acc_history": history}
