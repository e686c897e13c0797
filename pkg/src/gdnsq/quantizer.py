"""Fake quantizer with learnable scale and clamp bounds.

Forward computes the dequantized value D(Q(x)) = clamp(x,l,u) + s*r(q(x))
with q(x) = (clamp(x,l,u) - z)/s, r(v) = floor(v + 1/2) - v and z fixed at
0. The implementation evaluates the algebraically equal grid form
s*round(clamp(x)/s) so that every element of a bucket yields the exact
same float (the unique-value audit and integer fusion depend on this).

Backward follows the straight-through overrides: the noise term s*r
contributes exactly zero to the input gradient, and its scale gradient is
a per-element probe whose distribution is picked by ``noise_mode``:

* ``bernoulli``: samples from {-1/2, +1/2} (default),
* ``bernoulli_variance_matched``: the same probe scaled by 1/sqrt(3) so
  its variance matches uniform rounding noise on [-1/2, 1/2),
* ``rounding_residual``: the true clipped residual r(q(x)).

Clamp-path gradients are ordinary almost-everywhere derivatives: gradient
flows to x on [l, u] (ties included), to l below, to u above.

Positivity and ordering constraints are carried by the parameterization:
s = exp(log_s); weight sites learn l and log_range with u = l +
exp(log_range); activation sites following relu keep l = 0 and learn u
through a softplus.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DomainError, FusionError, ShapeError
from .kernels import fake_quant as fq_kernel
from .kernels import round_half_up
from .tensor import Tensor

NOISE_MODES = ("bernoulli", "bernoulli_variance_matched", "rounding_residual")

_INV_SQRT3 = 1.0 / np.sqrt(3.0)


def softplus_inv(y: float) -> float:
    """Inverse of log(1 + exp(x)), stable for large y."""
    if y > 30.0:
        return y + np.log1p(-np.exp(-y))
    if y <= 0.0:
        raise DomainError(f"softplus_inv needs y > 0, got {y}")
    return float(np.log(np.expm1(y)))


def _softplus_t(x: Tensor) -> Tensor:
    # max(x,0) + log(1 + exp(-|x|)): overflow-free composition
    m = T.maximum(x, 0.0)
    ax = T.maximum(x, T.neg(x))
    return T.add(m, T.log(T.add(T.exp(T.neg(ax)), 1.0)))


def clamp(x, l, u) -> Tensor:
    """max(l, min(u, x)) from primitives; ties route gradient to x."""
    x, l, u = T.as_tensor(x), T.as_tensor(l), T.as_tensor(u)
    if np.all(l.data >= u.data):
        raise DomainError(f"clamp requires l < u, got l={l.data}, u={u.data}")
    return T.maximum(T.minimum(x, u), l)


class FakeQuantizer:
    """Learnable (s, l, u) for one weight or activation site."""

    def __init__(self, site_kind, noise_mode="bernoulli", name=None,
                 lower_fixed_zero=None, rng=None):
        if site_kind not in ("weight", "activation"):
            raise DomainError(f"unknown site_kind {site_kind!r}")
        if noise_mode not in NOISE_MODES:
            raise DomainError(f"unknown noise_mode {noise_mode!r}")
        self.site_kind = site_kind
        self.noise_mode = noise_mode
        self.name = name or site_kind
        self.z = 0.0  # offset quantization is out of scope, fixed
        if lower_fixed_zero is None:
            lower_fixed_zero = site_kind == "activation"
        self.lower_fixed_zero = lower_fixed_zero
        self.rng = rng if rng is not None else np.random.default_rng()
        self.initialized = False
        self.log_s = Tensor(0.0, requires_grad=True, name=f"{self.name}/log_s")
        if self.lower_fixed_zero:
            self.raw_u = Tensor(softplus_inv(1.0), requires_grad=True,
                                name=f"{self.name}/raw_u")
            self.l_param = None
            self.log_range = None
        else:
            self.l_param = Tensor(-1.0, requires_grad=True,
                                  name=f"{self.name}/l")
            self.log_range = Tensor(np.log(2.0), requires_grad=True,
                                    name=f"{self.name}/log_range")
            self.raw_u = None

    # -- parameter plumbing ---------------------------------------------

    def parameters(self):
        ps = [(self.log_s.name, self.log_s)]
        if self.lower_fixed_zero:
            ps.append((self.raw_u.name, self.raw_u))
        else:
            ps.append((self.l_param.name, self.l_param))
            ps.append((self.log_range.name, self.log_range))
        return ps

    def init_from_minmax(self, lo: float, hi: float, bits: float):
        """Set (l, u) to the observed range and s so the bit-width is `bits`."""
        if self.lower_fixed_zero:
            lo = 0.0
        if not hi > lo:
            raise DomainError(
                f"{self.name}: cannot initialize from degenerate range "
                f"[{lo}, {hi}]"
            )
        if self.lower_fixed_zero:
            self.raw_u.data = np.asarray(softplus_inv(hi))
        else:
            self.l_param.data = np.asarray(float(lo))
            self.log_range.data = np.asarray(np.log(hi - lo))
        s = (hi - lo) / (2.0 ** bits - 1.0)
        self.log_s.data = np.asarray(np.log(s))
        self.initialized = True

    # -- graph builders ---------------------------------------------------

    def scale_tensor(self) -> Tensor:
        return T.exp(self.log_s)

    def bound_tensors(self):
        if self.lower_fixed_zero:
            l = T.constant(0.0)
            u = _softplus_t(self.raw_u)
        else:
            l = self.l_param
            u = T.add(self.l_param, T.exp(self.log_range))
        return l, u

    def bitwidth_tensor(self) -> Tensor:
        """Differentiable omega = log2((u - l)/s + 1)."""
        l, u = self.bound_tensors()
        s = self.scale_tensor()
        ratio = T.div(T.sub(u, l), s)
        return T.mul(T.log(T.add(ratio, 1.0)), 1.0 / np.log(2.0))

    def apply(self, x: Tensor) -> Tensor:
        """Fake-quantize a tensor, recording the STE backward node."""
        l_t, u_t = self.bound_tensors()
        s_t = self.scale_tensor()
        xv = x.data
        lv, uv, sv = float(l_t.data), float(u_t.data), float(s_t.data)
        out = fq_kernel(xv, lv, uv, sv)

        def rule(g):
            gx, gs, gl, gu = self.ste_backward(g, xv, lv, uv, sv)
            return gx, gl, gu, gs

        return T._record([x, l_t, u_t, s_t], out, rule, f"fake_quant[{self.name}]")

    def ste_backward(self, g_up, x, l, u, s):
        """Gradients of the fake-quant output for (x, s, l, u).

        The clamp path is differentiated as usual; the noise path gives
        exactly zero for x and the noise-mode probe for s.
        """
        below = x < l
        above = x > u
        inside = ~(below | above)
        gx = g_up * inside
        gl = np.sum(g_up * below)
        gu = np.sum(g_up * above)
        if self.noise_mode == "rounding_residual":
            v = np.clip(x, l, u) / s
            probe = round_half_up(v) - v
        else:
            probe = self.rng.integers(0, 2, size=x.shape).astype(np.float64) - 0.5
            if self.noise_mode == "bernoulli_variance_matched":
                probe *= _INV_SQRT3
        gs = np.sum(g_up * probe)
        return gx, np.asarray(gl), np.asarray(gu), np.asarray(gs)

    # -- numpy-side views --------------------------------------------------

    def scale_value(self) -> float:
        return float(np.exp(self.log_s.data))

    def bound_values(self):
        if self.lower_fixed_zero:
            r = float(self.raw_u.data)
            u = max(r, 0.0) + np.log1p(np.exp(-abs(r)))
            return 0.0, float(u)
        l = float(self.l_param.data)
        return l, l + float(np.exp(self.log_range.data))

    def bitwidth_value(self) -> float:
        l, u = self.bound_values()
        return float(np.log2((u - l) / self.scale_value() + 1.0))

    def quantize_array(self, x: np.ndarray) -> np.ndarray:
        """Deterministic dequantized-grid values, no tape involvement."""
        l, u = self.bound_values()
        return fq_kernel(np.asarray(x, dtype=np.float64), l, u, self.scale_value())

    def quantize_int(self, x: np.ndarray) -> np.ndarray:
        l, u = self.bound_values()
        v = np.clip(np.asarray(x, dtype=np.float64), l, u) / self.scale_value()
        return round_half_up(v).astype(np.int64)

    def state_arrays(self):
        """Named parameter arrays for checkpointing."""
        out = {"log_s": self.log_s.data}
        if self.lower_fixed_zero:
            out["raw_u"] = self.raw_u.data
        else:
            out["l"] = self.l_param.data
            out["log_range"] = self.log_range.data
        return out

    def load_state_arrays(self, arrays):
        self.log_s.data = np.asarray(arrays["log_s"], dtype=np.float64)
        if self.lower_fixed_zero:
            self.raw_u.data = np.asarray(arrays["raw_u"], dtype=np.float64)
        else:
            self.l_param.data = np.asarray(arrays["l"], dtype=np.float64)
            self.log_range.data = np.asarray(arrays["log_range"], dtype=np.float64)
        self.initialized = True


def fake_quant_forward(x, fq: FakeQuantizer) -> Tensor:
    return fq.apply(T.as_tensor(x))


def bitwidth(fq: FakeQuantizer) -> Tensor:
    return fq.bitwidth_tensor()


@dataclass
class QuantizedLayer:
    """A linear layer with both operands fake-quantized: a(Qw(W) @ Qa(x))."""

    weights: Tensor  # [in, out]
    weight_quantizer: FakeQuantizer
    activation_quantizer: FakeQuantizer
    activation_fn: str = "relu"


def quantized_layer_forward(layer: QuantizedLayer, x) -> Tensor:
    x = T.as_tensor(x)
    if x.data.ndim != 2 or x.shape[1] != layer.weights.shape[0]:
        raise ShapeError(
            f"layer expects [batch, {layer.weights.shape[0]}], got {x.shape}"
        )
    xq = layer.activation_quantizer.apply(x)
    wq = layer.weight_quantizer.apply(layer.weights)
    y = T.matmul(xq, wq)
    if layer.activation_fn == "relu":
        y = T.relu(y)
    elif layer.activation_fn != "identity":
        raise DomainError(f"unknown activation {layer.activation_fn!r}")
    return y


@dataclass
class FusedLinear:
    """Integer weights plus the scales that reproduce the fake-quant product."""

    int_weights: np.ndarray  # int64 [in, out]
    s_w: float
    s_a: float
    a_lo: float
    a_hi: float
    activation_fn: str = "relu"

    @property
    def scales(self):
        return self.s_w, self.s_a

    def forward(self, x: np.ndarray) -> np.ndarray:
        ka = round_half_up(np.clip(x, self.a_lo, self.a_hi) / self.s_a)
        y = (ka @ self.int_weights) * (self.s_w * self.s_a)
        if self.activation_fn == "relu":
            y = np.maximum(y, 0.0)
        return y


def integer_fuse(layer: QuantizedLayer, tol: float = 1e-9) -> FusedLinear:
    """Extract integer weights and scales from a converged quantized layer.

    The stored weights must already sit on the dequantized grid (within
    `tol` grid steps); anything farther signals a non-converged quantizer.
    Snap weights first (w := quantize_array(w)) when exporting, which is
    observationally identical by idempotence of the fake quantizer.
    """
    wq = layer.weight_quantizer
    aq = layer.activation_quantizer
    s_w = wq.scale_value()
    l, u = wq.bound_values()
    v = layer.weights.data / s_w
    k = round_half_up(v)
    residual = np.max(np.abs(v - k)) if v.size else 0.0
    if residual > tol:
        raise FusionError(
            f"{wq.name}: weights off the quantization grid by up to "
            f"{residual:.3e} steps (> {tol}); quantizer not converged"
        )
    # achievable levels are round(l/s) .. round(u/s); anything outside means
    # the stored weights disagree with the clamp range
    k_lo, k_hi = round_half_up(l / s_w), round_half_up(u / s_w)
    if k.size and (k.min() < k_lo or k.max() > k_hi):
        raise FusionError(
            f"{wq.name}: integer levels [{int(k.min())}, {int(k.max())}] fall "
            f"outside the clamp range levels [{int(k_lo)}, {int(k_hi)}]"
        )
    a_lo, a_hi = aq.bound_values()
    return FusedLinear(
        int_weights=k.astype(np.int64),
        s_w=s_w,
        s_a=aq.scale_value(),
        a_lo=a_lo,
        a_hi=a_hi,
        activation_fn=layer.activation_fn,
    )
