"""Finite-difference oracle suite for every differentiable operation.

Each check builds a small random instance from a seed, reduces the output to
a scalar with a fixed random projection and compares backpropagated (or
closed-form) gradients with central differences.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import losses
from .birnn import BiRNNParams, CLSTMParams, birnn_forward_stacked, clstm_cell
from .pnet import PNetParams, pnet_forward
from .tensor import (GradCheckResult, RunningStats, Tensor, activation, batchnorm, conv2d, deconv2d,
                     grad_check, maxpool2d, relative_error)

TOLERANCE = 1e-4
JAC_TOLERANCE = 1e-8
MODULES = ("tensor", "pnet", "birnn", "losses")


@dataclass
class OracleResult:
    name: str
    module: str
    seeds: int
    max_rel_error: float
    tolerance: float
    checked: int
    skipped: int
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def line(self) -> str:
        status = "ok" if self.passed else "FAIL"
        return (f"{self.module:<7} {self.name:<16} max_rel_error={self.max_rel_error:.3e} "
                f"(< {self.tolerance:.0e}) coords={self.checked} skipped={self.skipped} {status}")


def _projected(out_fn: Callable[[], Tensor], shape, rng) -> Callable[[], Tensor]:
    r = Tensor(rng.normal(size=shape))
    return lambda: (out_fn() * r).sum()


def _param(rng, *shape, scale=1.0) -> Tensor:
    return Tensor(rng.normal(0.0, scale, size=shape), True)


def check_conv2d(seed: int) -> GradCheckResult:
    rng = np.random.default_rng(seed)
    stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    x, w, b = _param(rng, 2, 2, 6, 6), _param(rng, 3, 2, 3, 3), _param(rng, 3)
    out = conv2d(x, w, b, stride, pad)
    fn = _projected(lambda: conv2d(x, w, b, stride, pad), out.shape, rng)
    return grad_check(fn, [x, w, b])


def check_deconv2d(seed: int) -> GradCheckResult:
    rng = np.random.default_rng(seed)
    k, s, p = [(2, 1, 0), (4, 2, 1), (8, 4, 2), (3, 1, 1)][seed % 4]
    x, w = _param(rng, 2, 3, 3, 3), _param(rng, 3, 2, k, k)
    out = deconv2d(x, w, s, p)
    fn = _projected(lambda: deconv2d(x, w, s, p), out.shape, rng)
    return grad_check(fn, [x, w])


def check_maxpool2d(seed: int) -> GradCheckResult:
    rng = np.random.default_rng(seed)
    x = _param(rng, 2, 2, 6, 6)
    fn = _projected(lambda: maxpool2d(x, 2, 2)[0], (2, 2, 3, 3), rng)
    return grad_check(fn, [x])


def check_batchnorm(seed: int) -> GradCheckResult:
    rng = np.random.default_rng(seed)
    x, g, b = _param(rng, 3, 2, 4, 4, scale=2.0), _param(rng, 2), _param(rng, 2)
    train = seed % 2 == 0
    stats = RunningStats(rng.normal(size=2), rng.uniform(0.5, 2.0, size=2))
    fn = _projected(lambda: batchnorm(x, g, b, stats, train), x.shape, rng)
    return grad_check(fn, [x, g, b])


def check_activations(seed: int) -> GradCheckResult:
    rng = np.random.default_rng(seed)
    kind = ("relu", "sigmoid", "tanh")[seed % 3]
    x = _param(rng, 2, 3, 4)
    fn = _projected(lambda: activation(x, kind), x.shape, rng)
    return grad_check(fn, [x])


def check_pnet(seed: int) -> GradCheckResult:
    rng = np.random.default_rng(seed)
    params = PNetParams.create(K=2, width=4, agg_channels=3, seed=seed)
    params.fusion_logits.data[:] = rng.normal(size=2)
    x = _param(rng, 2, 3, 8, 8)
    train = seed % 2 == 0
    fn = _projected(lambda: pnet_forward(x, params, train).fused, (2, 1, 8, 8), rng)
    wrt = [x] + [t for _, t in params.parameters()]
    return grad_check(fn, wrt, max_coords=6, rng=rng)


def _random_clstm(rng) -> CLSTMParams:
    return CLSTMParams(_param(rng, 4, 2, 3, 3, scale=0.5), _param(rng, 3, scale=0.5), _param(rng, 4, scale=0.5))


def check_clstm_cell(seed: int) -> GradCheckResult:
    rng = np.random.default_rng(seed)
    p = _random_clstm(rng)
    y, h, c = _param(rng, 1, 5, 5), _param(rng, 1, 5, 5, scale=0.5), _param(rng, 1, 5, 5)

    def out():
        hn, cn = clstm_cell(y, h, c, p)
        return hn * 2.0 + cn

    fn = _projected(out, y.shape, rng)
    return grad_check(fn, [y, h, c, p.kernels, p.peephole, p.bias], perturbation=1e-4, stencil=4)


def check_birnn(seed: int) -> GradCheckResult:
    rng = np.random.default_rng(seed)
    params = BiRNNParams(_random_clstm(rng), _random_clstm(rng), _param(rng, 2))
    seq = Tensor(rng.uniform(size=(4, 1, 5, 5)), True)
    fn = _projected(lambda: birnn_forward_stacked(seq, params), seq.shape, rng)
    return grad_check(fn, [seq] + [t for _, t in params.parameters()], perturbation=1e-4, stencil=4)


def _loss_check(kind: str, seed: int, h: float) -> GradCheckResult:
    rng = np.random.default_rng(seed)
    shape = (5, 6)
    truth = (rng.random(shape) < rng.uniform(0.1, 0.5)).astype(np.uint8)
    if seed % 5 == 4:
        truth[:] = 0
    pred = rng.uniform(0.05, 0.95, size=shape)
    fn = losses.get_loss(kind)
    analytic = fn(pred, truth).grad
    worst, where = 0.0, None
    flat = pred.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn(pred, truth).value
        flat[i] = orig - h
        fm = fn(pred, truth).value
        flat[i] = orig
        err = relative_error(analytic.reshape(-1)[i], (fp - fm) / (2 * h))
        if err >= worst:
            worst, where = err, (kind, tuple(int(j) for j in np.unravel_index(i, shape)))
    return GradCheckResult(worst, flat.size, 0, where)


def check_jaccard(seed: int) -> GradCheckResult:
    return _loss_check("jac", seed, 1e-5)


def check_ce(seed: int) -> GradCheckResult:
    return _loss_check("ce", seed, 1e-6)


def check_cbce(seed: int) -> GradCheckResult:
    return _loss_check("cbce", seed, 1e-6)


# name -> (module, check, tolerance)
CHECKS: dict[str, tuple[str, Callable[[int], GradCheckResult], float]] = {
    "conv2d": ("tensor", check_conv2d, TOLERANCE),
    "deconv2d": ("tensor", check_deconv2d, TOLERANCE),
    "maxpool2d": ("tensor", check_maxpool2d, TOLERANCE),
    "batchnorm": ("tensor", check_batchnorm, TOLERANCE),
    "activations": ("tensor", check_activations, TOLERANCE),
    "pnet_forward": ("pnet", check_pnet, TOLERANCE),
    "clstm_cell": ("birnn", check_clstm_cell, TOLERANCE),
    "birnn_forward": ("birnn", check_birnn, TOLERANCE),
    "jaccard_loss": ("losses", check_jaccard, JAC_TOLERANCE),
    "ce_loss": ("losses", check_ce, TOLERANCE),
    "cbce_loss": ("losses", check_cbce, TOLERANCE),
}


def run_check(name: str, seeds: int = 20) -> OracleResult:
    module, fn, tol = CHECKS[name]
    t0 = time.perf_counter()
    worst, checked, skipped = 0.0, 0, 0
    for seed in range(seeds):
        r = fn(seed)
        worst = max(worst, r.max_rel_error)
        checked += r.checked
        skipped += r.skipped
    return OracleResult(name, module, seeds, worst, tol, checked, skipped, time.perf_counter() - t0)


def run_suite(module: str = "all", seeds: int = 20) -> list[OracleResult]:
    if module != "all" and module not in MODULES:
        raise ValueError(f"unknown module {module!r}; expected 'all' or one of {MODULES}")
    return [run_check(name, seeds) for name, (mod, _, _) in CHECKS.items() if module in ("all", mod)]
