"""Independent numerical verification of the mathematical claims.

Each oracle produces OracleReports whose pass rule is uniformly
|statistic - expected| <= tolerance. Monte-Carlo zero-mean checks use a
4-sigma/sqrt(m) tolerance (false-failure probability < 1e-4 per check).
The rounding-lemma and Jeffreys-Hamming oracles use their own scalar
arithmetic so they stay independent of the quantizer code paths they
cross-check. Two distinct deltas appear: fd_delta is the finite-difference
half-step of the rounding lemma, jeffreys_delta the per-flipped-bit
divergence constant of the binary channel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DomainError
from .optim import RAdam
from .quantizer import FakeQuantizer
from .tensor import Tensor


@dataclass
class OracleReport:
    name: str
    trials: int
    statistic: float
    expected: float
    tolerance: float
    passed: bool
    details: str = ""

    @classmethod
    def make(cls, name, trials, statistic, expected, tolerance, details=""):
        passed = abs(statistic - expected) <= tolerance
        return cls(name, trials, float(statistic), float(expected),
                   float(tolerance), passed, details)

    def format(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        return (f"{tag}  {self.name:<42} statistic={self.statistic:+.6e} "
                f"expected={self.expected:+.6e} tol={self.tolerance:.3e}")


def _round_half_up(x):
    return np.floor(x + 0.5)


# -- rounding lemma: E floor(x + d + 1/2) - E floor(x - d + 1/2) - 2d = 0 ----


def lemma_fd_round(l: int, u: int, fd_delta: float, m: int, seed=0):
    """Monte-Carlo check of the centered-difference rounding identity on
    x ~ Uniform[l, u) with integer bounds, plus the component means."""
    if not (0.0 < fd_delta < 0.5):
        raise DomainError(f"fd_delta must lie in (0, 1/2), got {fd_delta}")
    if not (isinstance(l, (int, np.integer)) and isinstance(u, (int, np.integer))
            and l < u):
        raise DomainError(f"need integer l < u, got l={l}, u={u}")
    rng = np.random.default_rng([seed, 0x4C454D])
    x = rng.uniform(l, u, size=m)
    plus = _round_half_up(x + fd_delta)
    minus = _round_half_up(x - fd_delta)
    diff = plus - minus - 2.0 * fd_delta
    v_hat = float(diff.mean())
    sd = float(diff.std(ddof=1))
    tag = f"[l={l},u={u},d={fd_delta}]"
    reports = [OracleReport.make(
        f"lemma_fd_round{tag}", m, v_hat, 0.0, 4.0 * sd / math.sqrt(m))]
    mid = (l + u) / 2.0
    sd_plus = float(plus.std(ddof=1))
    reports.append(OracleReport.make(
        f"lemma_component_mean{tag}", m, float(plus.mean()), mid + fd_delta,
        4.0 * sd_plus / math.sqrt(m),
        details="E floor(x+d+1/2) against (l+u)/2 + d"))
    return reports


# -- rounding-noise statistics ------------------------------------------------


def noise_uniformity(fq: FakeQuantizer, input_dist="gaussian", m=200_000,
                     seed=0):
    """Moments of the clipped rounding residual r(q(x)) for a busy input:
    mean 0 and variance 1/12 (uniform on [-1/2, 1/2))."""
    rng = np.random.default_rng([seed, 0x4E4F49])
    l, u = fq.bound_values()
    s = fq.scale_value()
    if callable(input_dist):
        x = input_dist(rng, m)
    elif input_dist == "gaussian":
        x = rng.normal((l + u) / 2.0, (u - l) / 6.0, size=m)
    elif input_dist == "uniform":
        x = rng.uniform(l, u, size=m)
    elif input_dist == "grid":
        x = s * rng.integers(0, int(round((u - l) / s)) + 1, size=m)
    else:
        raise DomainError(f"unknown input_dist {input_dist!r}")
    v = np.clip(x, l, u) / s
    r = _round_half_up(v) - v
    if float(np.max(np.abs(r))) < 1e-9:
        return [OracleReport.make(
            f"noise_mean[{input_dist}]", m, 0.0, 0.0, 0.0,
            details="inconclusive: degenerate input (all residuals zero)"),
            OracleReport.make(
            f"noise_variance[{input_dist}]", m, 0.0, 0.0, 0.0,
            details="inconclusive: degenerate input (all residuals zero)")]
    sd = float(r.std(ddof=1))
    return [
        OracleReport.make(f"noise_mean[{input_dist}]", m, float(r.mean()),
                          0.0, 4.0 * sd / math.sqrt(m)),
        OracleReport.make(f"noise_variance[{input_dist}]", m, float(r.var()),
                          1.0 / 12.0, 0.02 / 12.0,
                          details="variance within 2% of 1/12"),
    ]


def default_noise_quantizer() -> FakeQuantizer:
    # 4-bit site whose clamp range spans mean +- 3 sigma of the gaussian
    # input; l = 0 aligns the grid so clipped tails land on exact levels
    fq = FakeQuantizer("activation", name="oracle/noise")
    fq.init_from_minmax(0.0, 6.0, 4.0)
    return fq


# -- Jeffreys divergence vs Hamming distance ----------------------------------


def _kl2(p, q):
    # KL between two Bernoulli distributions (p, 1-p) || (q, 1-q)
    return p * math.log(p / q) + (1.0 - p) * math.log((1.0 - p) / (1.0 - q))


def _soft_label(b, p0, p1):
    return (1.0 - p0, p0) if b == 0 else (p1, 1.0 - p1)


def _j2(a, b):
    # Jeffreys between two 2-point distributions given as tuples
    def kl(x, y):
        return sum(xi * math.log(xi / yi) for xi, yi in zip(x, y))
    return kl(a, b) + kl(b, a)


def jeffreys_hamming(p0: float, p1: float, n: int = 64, trials: int = 1000,
                     seed=0):
    """Total per-bit Jeffreys divergence equals jeffreys_delta * d_H.

    jeffreys_delta is computed once from a single flipped bit; the check
    sums J over all positions of random (true, observed) vectors and
    compares with the Hamming count, and also verifies the b=1 flip gives
    the same constant.
    """
    if not (0.0 < p0 < 1.0 and 0.0 < p1 < 1.0):
        raise DomainError("p0, p1 must lie strictly inside (0, 1)")
    rng = np.random.default_rng([seed, 0x4A4546])
    delta0 = _j2(_soft_label(0, p0, p1), _soft_label(1, p0, p1))
    delta1 = _j2(_soft_label(1, p0, p1), _soft_label(0, p0, p1))
    worst = abs(delta0 - delta1)
    for _ in range(trials):
        b = rng.integers(0, 2, size=n)
        flips = rng.random(n) < rng.uniform(0.05, 0.5)
        bt = np.where(flips, 1 - b, b)
        total = sum(
            _j2(_soft_label(int(bi), p0, p1), _soft_label(int(bo), p0, p1))
            for bi, bo in zip(b, bt)
        )
        d_h = int(np.sum(b != bt))
        worst = max(worst, abs(total - delta0 * d_h))
    return [OracleReport.make(
        f"jeffreys_hamming[p0={p0},p1={p1},n={n}]", trials, worst, 0.0, 1e-9,
        details=f"jeffreys_delta={delta0:.12f}")]


def bsc_reduction(p: float, seed=0):
    """With p0 = p1 the channel is symmetric: J = 2*KL and J = 2*H(Q(b),
    Q(b~)) - 2*H(Q(b))."""
    if not (0.0 < p < 1.0):
        raise DomainError("p must lie strictly inside (0, 1)")
    a = _soft_label(0, p, p)
    b = _soft_label(1, p, p)
    j = _j2(a, b)
    kl_ab = sum(x * math.log(x / y) for x, y in zip(a, b))
    cross = -sum(x * math.log(y) for x, y in zip(a, b))
    ent = -sum(x * math.log(x) for x in a)
    worst = max(abs(j - 2.0 * kl_ab), abs(j - (2.0 * cross - 2.0 * ent)))
    details = "trivial: p = 1/2 gives J = 0" if p == 0.5 else ""
    return [OracleReport.make(f"bsc_reduction[p={p}]", 1, worst, 0.0, 1e-12,
                              details=details)]


# -- STE structure ---------------------------------------------------------------


def _fd_scalar(f, x0, h=1e-5):
    return (f(x0 + h) - f(x0 - h)) / (2.0 * h)


def ste_gradient_check(seed=0, n=512, kink_radius=1e-3):
    """Clamp-path gradients against finite differences of the clamp
    function (inputs near l, u or grid midpoints excluded), and exact
    equality of the fake-quant and clamp-only input gradients."""
    rng = np.random.default_rng([seed, 0x535445])
    fq = FakeQuantizer("weight", noise_mode="bernoulli", name="oracle/ste",
                       rng=rng)
    fq.init_from_minmax(-1.2, 0.9, 4.0)
    l, u = fq.bound_values()
    s = fq.scale_value()
    x = rng.uniform(l - 0.5, u + 0.5, size=n)
    # keep clear of the clamp kinks and the rounding midpoints
    v = (np.clip(x, l, u) - 0.0) / s
    near_mid = np.abs((v - np.floor(v)) - 0.5) < kink_radius / s
    keep = (np.abs(x - l) > kink_radius) & (np.abs(x - u) > kink_radius) \
        & ~near_mid
    x = x[keep]

    gx, gl, gu, _ = fq.ste_backward(np.ones_like(x), x, l, u, s)

    def clamp_val(xv, lv=l, uv=u):
        return np.minimum(np.maximum(xv, lv), uv)

    worst = 0.0
    h = 1e-6
    fd_x = (clamp_val(x + h) - clamp_val(x - h)) / (2.0 * h)
    worst = max(worst, float(np.max(np.abs(gx - fd_x))))
    fd_l = _fd_scalar(lambda lv: float(np.sum(clamp_val(x, lv=lv))), l, h)
    fd_u = _fd_scalar(lambda uv: float(np.sum(clamp_val(x, uv=uv))), u, h)
    worst = max(worst, abs(float(gl) - fd_l), abs(float(gu) - fd_u))
    rep_fd = OracleReport.make("ste_clamp_fd", int(x.size), worst, 0.0, 1e-6,
                               details="clamp-path grads vs central FD")

    # noise path contributes exactly zero to the input gradient
    xt1 = Tensor(x, requires_grad=True)
    out1 = fq.apply(xt1)
    T.sum_(out1).backward()
    xt2 = Tensor(x, requires_grad=True)
    out2 = T.maximum(T.minimum(xt2, u), l)
    T.sum_(out2).backward()
    exact = float(np.max(np.abs(xt1.grad - xt2.grad))) if x.size else 0.0
    T.reset_tape()
    rep_zero = OracleReport.make(
        "ste_noise_zero", int(x.size), exact, 0.0, 0.0,
        details="fake-quant x-grad == clamp-only x-grad, exactly")
    return [rep_fd, rep_zero]


def bernoulli_clt_check(m: int = 100, trials: int = 10_000, seed=0):
    """Batch means of the variance-matched Bernoulli probe behave like
    N(0, (1/12)/m), and match true uniform rounding noise at the same
    variance."""
    if m < 1:
        raise DomainError("batch size must be >= 1")
    rng = np.random.default_rng([seed, 0x434C54])
    probes = (rng.integers(0, 2, size=(trials, m)) - 0.5) / math.sqrt(3.0)
    means = probes.mean(axis=1)
    var_target = (1.0 / 12.0) / m
    sd = float(means.std(ddof=1))
    reports = [
        OracleReport.make(f"bernoulli_clt_mean[m={m}]", trials,
                          float(means.mean()), 0.0,
                          4.0 * sd / math.sqrt(trials)),
        OracleReport.make(f"bernoulli_clt_variance[m={m}]", trials,
                          float(means.var(ddof=1)), var_target,
                          0.05 * var_target,
                          details="variance of batch means vs (1/12)/m"),
    ]
    uni = rng.uniform(-0.5, 0.5, size=(trials, m))
    ratio = float(means.var(ddof=1) / uni.mean(axis=1).var(ddof=1))
    reports.append(OracleReport.make(
        f"bernoulli_vs_uniform_ratio[m={m}]", trials, ratio, 1.0, 0.1,
        details="variance ratio of proxy vs true-uniform batch means"))
    return reports


# -- gradient integrity over random graphs ----------------------------------------


def finite_difference_grads(f, arrays, h=1e-5):
    """Central finite differences of scalar f(list of arrays) wrt each entry."""
    grads = []
    for k, a in enumerate(arrays):
        g = np.zeros_like(a)
        flat = a.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            fp = f(arrays)
            flat[i] = keep - h
            fm = f(arrays)
            flat[i] = keep
            gf[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def _random_graph_loss(arrays, labels):
    """Small two-layer network with the primitive op set exercised."""
    w1, b1, w2, b2, x = [Tensor(a, requires_grad=True) for a in arrays]
    h = T.relu(T.add(T.matmul(x, w1), T.broadcast_to(
        T.reshape(b1, (1, -1)), (x.shape[0], w1.shape[1]))))
    z = T.add(T.matmul(h, w2), T.broadcast_to(
        T.reshape(b2, (1, -1)), (h.shape[0], w2.shape[1])))
    p = T.softmax_rows(z)
    pick = T.select_columns(T.maximum(p, 1e-12), labels)
    loss = T.neg(T.mean(T.log(pick)))
    # exercise exp/log/sqrt/div on a side branch with a tiny weight
    side = T.mean(T.sqrt(T.add(T.mul(h, h), 1.0)))
    return T.add(loss, T.mul(side, 0.01)), [w1, b1, w2, b2, x]


def gradcheck_random_models(n_models: int = 100, seed=0, rtol=1e-4):
    """Analytic gradients of random small graphs vs central differences."""
    rng = np.random.default_rng([seed, 0x475243])
    worst = 0.0
    for _ in range(n_models):
        b, din, dh, dout = (int(rng.integers(2, 5)), int(rng.integers(2, 5)),
                            int(rng.integers(3, 7)), int(rng.integers(2, 4)))
        arrays = [rng.normal(size=(din, dh)), rng.normal(size=dh),
                  rng.normal(size=(dh, dout)), rng.normal(size=dout),
                  rng.normal(size=(b, din))]
        labels = rng.integers(0, dout, size=b)
        T.reset_tape()
        loss, params = _random_graph_loss(arrays, labels)
        loss.backward()
        analytic = [p.grad.copy() for p in params]
        T.reset_tape()

        def f(arrs):
            T.reset_tape()
            val = float(_random_graph_loss(arrs, labels)[0].data)
            T.reset_tape()
            return val

        numeric = finite_difference_grads(f, arrays)
        for a, nmr in zip(analytic, numeric):
            denom = np.maximum(np.abs(nmr), 1.0)
            worst = max(worst, float(np.max(np.abs(a - nmr) / denom)))
    return [OracleReport.make("gradcheck_random_models", n_models, worst,
                              0.0, rtol,
                              details="max relative error vs central FD")]


# -- optimizer cross-check ----------------------------------------------------------


def _radam_scalar_reference(x0, lr, steps, b1=0.9, b2=0.999, eps=1e-8):
    # minimizes f(x) = x^2; written independently of optim.RAdam
    x, m, v = float(x0), 0.0, 0.0
    rho_inf = 2.0 / (1.0 - b2) - 1.0
    path = []
    for t in range(1, steps + 1):
        g = 2.0 * x
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        rho = rho_inf - 2.0 * t * b2 ** t / (1.0 - b2 ** t)
        if rho > 4.0:
            r = math.sqrt((rho - 4.0) * (rho - 2.0) * rho_inf
                          / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho))
            x = x - lr * r * m_hat / (math.sqrt(v / (1.0 - b2 ** t)) + eps)
        else:
            x = x - lr * m_hat
        path.append(x)
    return path


def radam_reference_check(steps: int = 10, lr: float = 0.1):
    p = Tensor(1.0, requires_grad=True)
    opt = RAdam([("x", p)], lr=lr)
    worst = 0.0
    ref = _radam_scalar_reference(1.0, lr, steps)
    for t in range(steps):
        p.grad = np.asarray(2.0 * float(p.data))
        opt.step()
        worst = max(worst, abs(float(p.data) - ref[t]))
        p.grad = None
    return [OracleReport.make("radam_reference", steps, worst, 0.0, 1e-10,
                              details="trajectory vs independent scalar RAdam")]


# -- registry -------------------------------------------------------------------


def oracle_registry(seed=0):
    """(group name, thunk) pairs for every check in the suite."""
    entries = []
    for l, u, d in ((0, 4, 0.25), (-3, 2, 0.1), (0, 1, 0.49)):
        entries.append((f"lemma_fd_round[l={l},u={u},d={d}]",
                        lambda l=l, u=u, d=d: lemma_fd_round(
                            l, u, d, m=1_000_000, seed=seed)))
    entries.append(("noise_uniformity[gaussian]",
                    lambda: noise_uniformity(default_noise_quantizer(),
                                             "gaussian", seed=seed)))
    entries.append(("noise_uniformity[uniform]",
                    lambda: noise_uniformity(default_noise_quantizer(),
                                             "uniform", seed=seed)))
    for p0, p1 in ((0.1, 0.1), (0.2, 0.05), (0.4, 0.3)):
        entries.append((f"jeffreys_hamming[p0={p0},p1={p1},n=64]",
                        lambda p0=p0, p1=p1: jeffreys_hamming(
                            p0, p1, n=64, trials=1000, seed=seed)))
    for p in (0.1, 0.3, 0.5):
        entries.append((f"bsc_reduction[p={p}]",
                        lambda p=p: bsc_reduction(p, seed=seed)))
    entries.append(("ste_gradient_check",
                    lambda: ste_gradient_check(seed=seed)))
    entries.append(("bernoulli_clt_check[m=100]",
                    lambda: bernoulli_clt_check(m=100, trials=10_000,
                                                seed=seed)))
    entries.append(("bernoulli_clt_check[m=1]",
                    lambda: bernoulli_clt_check(m=1, trials=10_000,
                                                seed=seed)))
    entries.append(("gradcheck_random_models",
                    lambda: gradcheck_random_models(n_models=100, seed=seed)))
    entries.append(("radam_reference", radam_reference_check))
    return entries


def run_all(name_filter=None, seed=0):
    """Run the oracle suite; returns the list of OracleReports."""
    reports = []
    for name, thunk in oracle_registry(seed=seed):
        if name_filter and name_filter not in name:
            continue
        reports.extend(thunk())
    return reports
