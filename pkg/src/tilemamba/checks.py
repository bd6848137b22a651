"""Gradient-check and scan-scaling suites.

Shared by the ``gradcheck`` CLI command and the acceptance tests: every
differentiable op and every block is validated in 64-bit against central
finite differences at small shapes, over several seeds. Inputs for
kinked ops (relu) are nudged away from the kink; that input class is
excluded by the checker's contract.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Tuple

import numpy as np

from . import blocks as B
from . import head as H
from . import tensor as T
from . import train as TR
from .tensor import RngStream, Tensor

__all__ = ["CheckResult", "gradient_check_suite", "scan_times", "DEFAULT_TOL"]

DEFAULT_TOL = 1e-4
_H_SMOOTH = 1e-5
# blocks mix truncation-dominated coordinates (layer norm over few
# channels wants small h) with coordinates whose true gradient sits at
# the 1e-8 denominator floor, where central-difference roundoff scales
# as 1/h and wants large h; each coordinate keeps its best step
_H_BLOCK = (1e-6, 1e-5, 1e-4, 1e-3, 1e-2)


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tolerance


def _nudge(x: np.ndarray, margin: float = 0.05) -> np.ndarray:
    close = np.abs(x) < margin
    return x + close * np.where(x >= 0, margin, -margin) * 2.0


def _weighted_sum(rng: RngStream, out: Tensor) -> Tensor:
    return T.reduce_sum(T.mul(Tensor(rng.normal(out.shape)), out))


def _check_conv2d(seed: int) -> float:
    rng = RngStream(seed).child("conv2d")
    worst = 0.0
    cases = [
        dict(shape=(2, 4, 6, 6), w=(6, 2, 3, 3), stride=1, padding=1, groups=2),
        dict(shape=(1, 3, 7, 7), w=(3, 1, 7, 7), stride=1, padding=3, groups=3),
        dict(shape=(2, 2, 6, 6), w=(4, 2, 2, 2), stride=2, padding=0, groups=1),
    ]
    for case in cases:
        x = Tensor(rng.normal(case["shape"]), requires_grad=True)
        w = Tensor(rng.normal(case["w"], 0.4), requires_grad=True)
        b = Tensor(rng.normal((case["w"][0],), 0.4), requires_grad=True)
        coef = rng.normal(T.conv2d(x, w, b, case["stride"], case["padding"],
                                   case["groups"]).shape)

        def f():
            out = T.conv2d(x, w, b, case["stride"], case["padding"],
                           case["groups"])
            return T.reduce_sum(T.mul(Tensor(coef), out))

        worst = max(worst, T.gradcheck_parameters(f, [x, w, b], h=_H_SMOOTH))
    return worst


def _check_linear(seed: int) -> float:
    rng = RngStream(seed).child("linear")
    x = Tensor(rng.normal((3, 4, 5)), requires_grad=True)
    w = Tensor(rng.normal((6, 5), 0.5), requires_grad=True)
    b = Tensor(rng.normal((6,), 0.5), requires_grad=True)
    coef = rng.normal((3, 4, 6))
    f = lambda: T.reduce_sum(T.mul(Tensor(coef), T.linear(x, w, b)))
    return T.gradcheck_parameters(f, [x, w, b], h=_H_SMOOTH)


def _check_layer_norm(seed: int) -> float:
    rng = RngStream(seed).child("ln")
    x = Tensor(rng.normal((2, 3, 5)), requires_grad=True)
    g = Tensor(rng.normal((5,)), requires_grad=True)
    b = Tensor(rng.normal((5,)), requires_grad=True)
    coef = rng.normal((2, 3, 5))
    f = lambda: T.reduce_sum(T.mul(Tensor(coef), T.layer_norm(x, g, b)))
    return T.gradcheck_parameters(f, [x, g, b], h=_H_SMOOTH)


def _check_activations(seed: int) -> float:
    rng = RngStream(seed).child("act")
    worst = 0.0
    for kind in ("gelu", "silu", "sigmoid", "relu"):
        data = rng.normal((4, 5))
        if kind == "relu":
            data = _nudge(data)
        x = Tensor(data, requires_grad=True)
        coef = rng.normal((4, 5))
        f = lambda: T.reduce_sum(T.mul(Tensor(coef), T.activation(kind, x)))
        worst = max(worst, T.gradcheck_parameters(f, [x], h=_H_SMOOTH))
    return worst


def _check_softmax(seed: int) -> float:
    rng = RngStream(seed).child("softmax")
    x = Tensor(rng.normal((3, 4)), requires_grad=True)
    coef = rng.normal((3, 4))
    f = lambda: T.reduce_sum(T.mul(Tensor(coef), T.softmax(x)))
    return T.gradcheck_parameters(f, [x], h=_H_SMOOTH)


def _check_pooling(seed: int) -> float:
    rng = RngStream(seed).child("pool")
    worst = 0.0
    x = Tensor(rng.normal((2, 3, 5, 7)), requires_grad=True)
    for kind, out_hw in (("adaptive_avg", (2, 3)), ("global_avg", None),
                         ("channelwise_avg_over_C", None),
                         ("channelwise_max_over_C", None)):
        out = T.pool2d(kind, x, out_hw)
        coef = rng.normal(out.shape)
        f = lambda: T.reduce_sum(T.mul(Tensor(coef), T.pool2d(kind, x, out_hw)))
        worst = max(worst, T.gradcheck_parameters(f, [x], h=_H_SMOOTH))
    return worst


def _check_reshape_ops(seed: int) -> float:
    rng = RngStream(seed).child("shape")
    x = Tensor(rng.normal((2, 8, 3, 3)), requires_grad=True)
    coef = rng.normal((2, 8, 3, 3))

    def f():
        parts = T.split_channels(x, 4)
        cat = T.concat_channels(list(parts))
        perm = T.permute(cat, (0, 2, 3, 1))
        back = T.permute(perm, (0, 3, 1, 2))
        return T.reduce_sum(T.mul(Tensor(coef), back))

    return T.gradcheck_parameters(f, [x], h=_H_SMOOTH)


def _check_scan(seed: int) -> float:
    rng = RngStream(seed).child("scan")
    length, e, n = 5, 3, 2
    ab = Tensor(rng.uniform((length, e, n)) * 0.8 + 0.1, requires_grad=True)
    bb = Tensor(rng.normal((length, e, n)), requires_grad=True)
    c = Tensor(rng.normal((length, n)), requires_grad=True)
    d = Tensor(rng.normal((e,)), requires_grad=True)
    x = Tensor(rng.normal((length, e)), requires_grad=True)
    coef = rng.normal((length, e))
    f = lambda: T.reduce_sum(T.mul(Tensor(coef),
                                   B.selective_scan(ab, bb, c, d, x)))
    return T.gradcheck_parameters(f, [ab, bb, c, d, x], h=_H_SMOOTH)


def _check_discretize(seed: int) -> float:
    rng = RngStream(seed).child("disc")
    e, n, length = 3, 2, 4
    a = Tensor(-np.abs(rng.normal((e, n))) - 0.1, requires_grad=True)
    delta = Tensor(rng.uniform((length, e)) * 0.5 + 0.05, requires_grad=True)
    b_seq = Tensor(rng.normal((length, n)), requires_grad=True)
    ca = rng.normal((length, e, n))
    cb = rng.normal((length, e, n))

    def f():
        abar, bbar = B.ssm_discretize(a, delta, b_seq)
        return T.add(T.reduce_sum(T.mul(Tensor(ca), abar)),
                     T.reduce_sum(T.mul(Tensor(cb), bbar)))

    return T.gradcheck_parameters(f, [a, delta, b_seq], h=_H_SMOOTH)


def _check_conv1d(seed: int) -> float:
    rng = RngStream(seed).child("conv1d")
    x = Tensor(rng.normal((2, 6, 3)), requires_grad=True)
    w = Tensor(rng.normal((3, 4), 0.5), requires_grad=True)
    coef = rng.normal((2, 6, 3))
    f = lambda: T.reduce_sum(T.mul(Tensor(coef),
                                   T.conv1d_depthwise_causal(x, w)))
    return T.gradcheck_parameters(f, [x, w], h=_H_SMOOTH)


def _check_convnext(seed: int) -> float:
    rng = RngStream(seed).child("convnext")
    p = B.init_convnext_block(4, rng, dtype=np.float64, gamma_init=0.5)
    x = Tensor(rng.normal((1, 4, 5, 5)), requires_grad=True)
    coef = rng.normal((1, 4, 5, 5))
    f = lambda: T.reduce_sum(T.mul(Tensor(coef), B.convnext_forward(p, x)))
    params = [t for _, t in p.tensors()] + [x]
    return T.gradcheck_parameters(f, params, h=_H_BLOCK)


def _check_mamba(seed: int) -> float:
    rng = RngStream(seed).child("mamba")
    p = B.init_mamba(4, rng, dtype=np.float64, state=3, kernel=4)
    x = Tensor(rng.normal((1, 6, 4)), requires_grad=True)
    coef = rng.normal((1, 6, 4))
    f = lambda: T.reduce_sum(T.mul(Tensor(coef), B.mamba_forward(p, x)))
    params = [t for _, t in p.tensors()] + [x]
    return T.gradcheck_parameters(f, params, h=_H_BLOCK)


def _check_pvm(seed: int) -> float:
    rng = RngStream(seed).child("pvm")
    p = B.init_pvm_layer(8, rng, dtype=np.float64, state=2, kernel=2)
    x = Tensor(rng.normal((1, 8, 2, 3)), requires_grad=True)
    coef = rng.normal((1, 8, 2, 3))
    f = lambda: T.reduce_sum(T.mul(Tensor(coef), B.pvm_forward(p, x)))
    params = [t for _, t in p.tensors()] + [x]
    return T.gradcheck_parameters(f, params, h=_H_BLOCK)


def _check_scab(seed: int) -> float:
    rng = RngStream(seed).child("scab")
    p = B.init_scab([4, 6], rng, dtype=np.float64, hidden=3)
    f1 = Tensor(rng.normal((2, 4, 5, 5)), requires_grad=True)
    f2 = Tensor(rng.normal((2, 6, 3, 3)), requires_grad=True)
    c1 = rng.normal((2, 4, 5, 5))
    c2 = rng.normal((2, 6, 3, 3))

    def f():
        outs = B.scab_forward(p, [f1, f2])
        return T.add(T.reduce_sum(T.mul(Tensor(c1), outs[0])),
                     T.reduce_sum(T.mul(Tensor(c2), outs[1])))

    params = [t for _, t in p.tensors()] + [f1, f2]
    return T.gradcheck_parameters(f, params, h=_H_BLOCK)


def _check_heads(seed: int) -> float:
    rng = RngStream(seed).child("head")
    worst = 0.0
    cfg = H.HeadConfig([H.LayerSpec("linear", 10, 8),
                        H.LayerSpec("fno", 8, 4),
                        H.LayerSpec("hadamard", 4, 2)])
    layers = H.init_head(cfg, 10, 2, rng, dtype=np.float64)
    x = Tensor(rng.normal((3, 10)), requires_grad=True)
    coef = rng.normal((3, 2))
    f = lambda: T.reduce_sum(T.mul(Tensor(coef),
                                   H.hybrid_head_forward(layers, x)))
    params = [x]
    for layer in layers:
        params.extend(t for _, t in layer.tensors() if t.requires_grad)
    worst = max(worst, T.gradcheck_parameters(f, params, h=_H_BLOCK))

    # loss composition end to end
    logits = Tensor(rng.normal((4, 2)), requires_grad=True)
    targets = np.array([0, 1, 1, 0])
    worst = max(worst, T.finite_diff_gradcheck(
        lambda v: TR.bce_loss(v, targets), logits, h=_H_SMOOTH))
    return worst


_CHECKS: List[Tuple[str, Callable[[int], float]]] = [
    ("op.conv2d", _check_conv2d),
    ("op.linear", _check_linear),
    ("op.layer_norm", _check_layer_norm),
    ("op.activation", _check_activations),
    ("op.softmax", _check_softmax),
    ("op.pool2d", _check_pooling),
    ("op.split_concat_permute", _check_reshape_ops),
    ("op.conv1d_causal", _check_conv1d),
    ("op.ssm_discretize", _check_discretize),
    ("op.selective_scan", _check_scan),
    ("block.convnext", _check_convnext),
    ("block.mamba", _check_mamba),
    ("block.pvm", _check_pvm),
    ("block.scab", _check_scab),
    ("block.heads_and_loss", _check_heads),
]


def gradient_check_suite(seeds: int = 10,
                         tolerance: float = DEFAULT_TOL) -> List[CheckResult]:
    """Worst finite-difference error per item across ``seeds`` random draws."""
    results = []
    for name, fn in _CHECKS:
        worst = max(fn(seed) for seed in range(seeds))
        results.append(CheckResult(name=name, max_rel_err=worst,
                                   tolerance=tolerance))
    return results


def scan_times(lengths=(1024, 2048, 4096), e: int = 8, n: int = 8,
               repeats: int = 3) -> Dict[int, float]:
    """Median wall time of the forward scan per sequence length."""
    rng = RngStream(1234)
    times: Dict[int, float] = {}
    for length in lengths:
        ab = Tensor(rng.uniform((length, e, n)) * 0.8 + 0.1)
        bb = Tensor(rng.normal((length, e, n)))
        c = Tensor(rng.normal((length, n)))
        d = Tensor(rng.normal((e,)))
        x = Tensor(rng.normal((length, e)))
        B.selective_scan(ab, bb, c, d, x)  # warm-up
        samples = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            B.selective_scan(ab, bb, c, d, x)
            samples.append(time.perf_counter() - t0)
        times[length] = float(np.median(samples))
    return times
