"""RAdam optimizer and the two-phase learning-rate policy.

RAdam follows the rectified-Adam recipe with defaults beta1=0.9,
beta2=0.999, eps=1e-8 and no weight decay. While the variance-rectification
term rho_t <= 4 the step falls back to bias-corrected SGD-with-momentum;
once rho_t > 4 the adaptive step with the rectification factor r_t is used.

The learning rate stays constant while bit-widths converge and switches to
exact exponential decay (lambda *= 0.9985 per batch) after the first audit
where the max actual bit-width meets the target everywhere. The switch is
one-way.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import NumericError
from .tensor import Tensor


class RAdam:
    def __init__(self, params, lr=0.01, beta1=0.9, beta2=0.999, eps=1e-8):
        # params: iterable of (name, Tensor) with requires_grad set
        self.params = list(params)
        seen = set()
        for name, _ in self.params:
            if name in seen:
                raise ValueError(f"duplicate parameter name {name!r}")
            seen.add(name)
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}

    @property
    def rho_inf(self) -> float:
        return 2.0 / (1.0 - self.beta2) - 1.0

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None

    def step(self):
        for name, p in self.params:
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise NumericError(f"non-finite gradient for {name!r}; step rejected")
        self.t += 1
        t = self.t
        b1, b2 = self.beta1, self.beta2
        b1t, b2t = b1 ** t, b2 ** t
        rho_inf = self.rho_inf
        rho_t = rho_inf - 2.0 * t * b2t / (1.0 - b2t)
        for name, p in self.params:
            g = p.grad
            if g is None:
                continue
            g = np.asarray(g, dtype=np.float64)
            m = self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            v = self.v[name] = b2 * self.v[name] + (1.0 - b2) * (g * g)
            m_hat = m / (1.0 - b1t)
            if rho_t > 4.0:
                r_t = math.sqrt(
                    (rho_t - 4.0) * (rho_t - 2.0) * rho_inf
                    / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t)
                )
                v_hat = np.sqrt(v / (1.0 - b2t))
                p.data = p.data - self.lr * r_t * m_hat / (v_hat + self.eps)
            else:
                p.data = p.data - self.lr * m_hat

    def state_arrays(self):
        out = {"t": np.asarray(self.t, dtype=np.int64)}
        for name, _ in self.params:
            out[f"m/{name}"] = self.m[name]
            out[f"v/{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays):
        self.t = int(arrays["t"])
        for name, p in self.params:
            self.m[name] = np.asarray(arrays[f"m/{name}"], dtype=np.float64).reshape(
                p.data.shape
            )
            self.v[name] = np.asarray(arrays[f"v/{name}"], dtype=np.float64).reshape(
                p.data.shape
            )


@dataclass
class LrPolicy:
    lam0: float
    alpha: float = 0.9985
    phase: str = "constant"
    lam: float = None

    def __post_init__(self):
        if self.lam is None:
            self.lam = self.lam0


def lr_next(policy: LrPolicy, audit_reached_target: bool) -> float:
    """Learning rate for the upcoming batch; switches phase at most once."""
    if policy.phase == "constant" and audit_reached_target:
        policy.phase = "annealing"
    if policy.phase == "annealing":
        policy.lam = policy.lam * policy.alpha
    return policy.lam
