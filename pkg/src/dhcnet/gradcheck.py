"""Central-difference gradient suites for every differentiable operation."""

from __future__ import annotations

import time
from typing import Callable, Dict, List

import numpy as np

from . import hce, losses, nn
from .backbone import BackboneConfig, StagedBackbone
from .config import TrainConfig
from .tensor import Tensor, exp, grad_check, log, matmul, maximum, mul, neg, parameters_grad_check, \
    reduce, relu, sub, add

TOLERANCE = 1e-4
EPS = 1e-6


def _rand(rng, *shape):
    return rng.normal(size=shape)


def _weighted_sum(rng, shape) -> Callable[[Tensor], Tensor]:
    """Random linear functional, so every output coordinate matters."""
    w = rng.normal(size=shape)
    return lambda t: reduce("sum", mul(t, w))


def suite_elementwise(rng) -> float:
    x = _rand(rng, 3, 4)
    y = rng.normal(size=(4,))
    pos = rng.uniform(0.5, 2.0, size=(3, 4))
    probe = _weighted_sum(rng, (3, 4))
    fns = [
        (lambda t: probe(add(t, y)), x),
        (lambda t: probe(sub(y, t)), x),
        (lambda t: probe(mul(t, t)), x),
        (lambda t: probe(neg(t)), x),
        (lambda t: probe(exp(t)), x),
        (lambda t: probe(log(t)), pos),
        (lambda t: probe(relu(t)), x),
        (lambda t: probe(maximum(t, 0.1)), x),
    ]
    return max(grad_check(f, v, EPS) for f, v in fns)


def suite_matmul(rng) -> float:
    a, b = _rand(rng, 3, 4), _rand(rng, 4, 2)
    probe = _weighted_sum(rng, (3, 2))
    return max(grad_check(lambda t: probe(matmul(t, b)), a, EPS),
               grad_check(lambda t: probe(matmul(a, t)), b, EPS))


def suite_reduce(rng) -> float:
    x = _rand(rng, 2, 3, 4)
    p1 = _weighted_sum(rng, (2, 4))
    p2 = _weighted_sum(rng, (3,))
    return max(grad_check(lambda t: p1(reduce("mean", t, 1)), x, EPS),
               grad_check(lambda t: p2(reduce("sum", t, (0, 2))), x, EPS))


def suite_conv2d(rng) -> float:
    x = _rand(rng, 2, 3, 7, 7)
    w = _rand(rng, 4, 3, 3, 3) * 0.5
    b = _rand(rng, 4)
    errs = []
    for stride, pad in ((1, 1), (2, 1), (2, 0)):
        out_hw = (7 + 2 * pad - 3) // stride + 1
        probe = _weighted_sum(rng, (2, 4, out_hw, out_hw))
        conv = lambda inp, ww, bb: nn.conv2d(inp, nn.ConvParams(ww, bb, stride, pad))
        errs.append(grad_check(lambda t: probe(conv(t, Tensor(w), Tensor(b))), x, EPS))
        errs.append(grad_check(lambda t: probe(conv(Tensor(x), t, Tensor(b))), w, EPS))
        errs.append(grad_check(lambda t: probe(conv(Tensor(x), Tensor(w), t)), b, EPS))
    return max(errs)


def suite_linear(rng) -> float:
    x, w, b = _rand(rng, 3, 5), _rand(rng, 4, 5), _rand(rng, 4)
    probe = _weighted_sum(rng, (3, 4))
    return max(grad_check(lambda t: probe(nn.linear(t, Tensor(w), Tensor(b))), x, EPS),
               grad_check(lambda t: probe(nn.linear(Tensor(x), t, Tensor(b))), w, EPS),
               grad_check(lambda t: probe(nn.linear(Tensor(x), Tensor(w), t)), b, EPS))


def suite_global_avg_pool(rng) -> float:
    probe = _weighted_sum(rng, (2, 3))
    return grad_check(lambda t: probe(nn.global_avg_pool(t)), _rand(rng, 2, 3, 4, 5), EPS)


def suite_log_softmax(rng) -> float:
    probe = _weighted_sum(rng, (3, 6))
    return grad_check(lambda t: probe(nn.log_softmax(t)), _rand(rng, 3, 6) * 3, EPS)


def suite_rms_normalize(rng) -> float:
    probe = _weighted_sum(rng, (2, 3, 4, 4))
    return grad_check(lambda t: probe(nn.rms_normalize(t)), _rand(rng, 2, 3, 4, 4), EPS)


def suite_bilinear_resize(rng) -> float:
    x = _rand(rng, 1, 2, 5, 6)
    errs = []
    for oh, ow in ((10, 12), (3, 4), (7, 5)):
        probe = _weighted_sum(rng, (1, 2, oh, ow))
        errs.append(grad_check(lambda t: probe(nn.bilinear_resize(t, oh, ow)), x, EPS))
    return max(errs)


def suite_roi_align(rng) -> float:
    feat = _rand(rng, 2, 6, 6)
    x0, y0 = rng.uniform(0, 3, size=2)
    box = nn.Box(x0, y0, x0 + rng.uniform(1, 3), y0 + rng.uniform(1, 3))
    probe = _weighted_sum(rng, (2, 3, 3))
    return grad_check(lambda t: probe(nn.roi_align(t, box, 3, 3, 2)), feat, EPS)


def suite_losses(rng) -> float:
    k, n = 5, 3
    labels = rng.integers(0, k, size=n)
    errs = [grad_check(lambda t: losses.cls_loss(nn.log_softmax(t), labels), _rand(rng, n, k), EPS)]
    base = [_rand(rng, n, k) for _ in range(3)]
    for mode in ("hinge", "raw"):
        def hor(t, mode=mode):
            ordered = [(t, labels)] + [(Tensor(b), labels) for b in base[1:]]
            return losses.hor_loss(ordered, mode)[0]
        errs.append(grad_check(hor, base[0], EPS))
    fg, fl = _rand(rng, 4, 3, 2, 2), _rand(rng, 4, 3, 2, 2)
    errs.append(grad_check(lambda t: losses.exp_loss(t, Tensor(fl)), fg, EPS))
    errs.append(grad_check(lambda t: losses.exp_loss(Tensor(fg), t), fl, EPS))
    w = losses.LossWeights()
    c, h, e = rng.uniform(0.5, 2, size=3)
    errs.append(grad_check(lambda t: losses.total_loss(t, Tensor(h), Tensor(e), w).total_tensor, c, EPS))
    return max(errs)


def miniature_setup(rng, hce_mode: str = "online"):
    """Tiny backbone and batch exercising every branch of the objective."""
    seed = int(rng.integers(2 ** 31))
    bcfg = BackboneConfig(num_classes=3, input_size=16, stage_channels=[2, 3, 3, 4],
                          blocks_per_stage=1, seed=seed)
    model = StagedBackbone(bcfg)
    # nonzero biases keep pre-activations off the relu kink when a whole map is dark
    for blocks in model.stages:
        for conv in blocks:
            conv.bias.data[...] = rng.uniform(0.05, 0.3, size=conv.bias.shape)
    images = rng.uniform(0, 1, size=(2, 3, 16, 16))
    labels = rng.integers(0, 3, size=2)
    cfg = TrainConfig(image_size=16, stage_channels=[2, 3, 3, 4], blocks_per_stage=1,
                      hce_mode=hce_mode, ordering_mode="raw")
    return model, images, labels, cfg, seed


def suite_composite(rng, coords_per_param: int = 3) -> float:
    from .train import compute_losses

    model, images, labels, cfg, seed = miniature_setup(rng)

    def loss_fn():
        report, _ = compute_losses(model, images, labels, cfg, np.random.default_rng(seed))
        return report.total_tensor

    return parameters_grad_check(loss_fn, model.parameters(), EPS, coords_per_param, rng)


SUITES: Dict[str, Callable] = {
    "elementwise": suite_elementwise,
    "matmul": suite_matmul,
    "reduce": suite_reduce,
    "conv2d": suite_conv2d,
    "linear": suite_linear,
    "global_avg_pool": suite_global_avg_pool,
    "log_softmax": suite_log_softmax,
    "rms_normalize": suite_rms_normalize,
    "bilinear_resize": suite_bilinear_resize,
    "roi_align": suite_roi_align,
    "losses": suite_losses,
    "composite": suite_composite,
}


def run_all(points: int = 10, seed: int = 0, suites: List[str] = None) -> Dict[str, float]:
    """Max relative error of each suite over ``points`` random draws."""
    rng = np.random.default_rng(seed)
    out = {}
    for name in suites or list(SUITES):
        out[name] = max(SUITES[name](rng) for _ in range(points))
    return out


def main(points: int = 10, seed: int = 0, stream=None) -> bool:
    import sys

    stream = stream or sys.stdout
    t0 = time.time()
    ok = True
    for name, err in run_all(points, seed).items():
        passed = err <= TOLERANCE
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'} {name:16s} max_rel_err={err:.3e}", file=stream)
    print(f"{'all suites passed' if ok else 'gradient check FAILED'} in {time.time() - t0:.1f}s", file=stream)
    return ok
