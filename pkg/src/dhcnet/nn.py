"""Differentiable building blocks: convolution, pooling, linear maps,
log-softmax, bilinear resizing and RoIAlign.

Resize and RoIAlign use half-pixel centers: pixel ``i`` covers the continuous
interval ``[i, i + 1)`` and its value sits at ``i + 0.5``. Samples falling
outside the plane are clamped to the border.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .tensor import Tensor, _make, add, as_tensor, exp, log, mul, reduce, reshape


@dataclass
class ConvParams:
    weight: Tensor  # out_ch x in_ch x k x k
    bias: Tensor  # out_ch
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.stride < 1 or self.padding < 0:
            raise ValueError(f"invalid stride/padding {self.stride}/{self.padding}")
        if self.weight.ndim != 4 or self.weight.shape[2] != self.weight.shape[3]:
            raise ValueError(f"conv weight must be out x in x k x k, got {self.weight.shape}")

    def out_extent(self, size: int) -> int:
        k = self.weight.shape[2]
        return (size + 2 * self.padding - k) // self.stride + 1


@dataclass(frozen=True)
class Box:
    """Axis-aligned rectangle in continuous plane coordinates."""

    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise ValueError(f"degenerate box {self}")

    def scaled(self, factor: float) -> "Box":
        return Box(self.x0 * factor, self.y0 * factor, self.x1 * factor, self.y1 * factor)

    def within(self, width: float, height: float, tol: float = 1e-9) -> bool:
        return (self.x0 >= -tol and self.y0 >= -tol
                and self.x1 <= width + tol and self.y1 <= height + tol)


def conv2d(x: Tensor, params: ConvParams) -> Tensor:
    """Cross-correlation of an N x C x H x W batch, plus bias."""
    x = as_tensor(x)
    w, b = params.weight, params.bias
    s, p = params.stride, params.padding
    if x.ndim != 4:
        raise ValueError(f"conv2d input must be N x C x H x W, got {x.shape}")
    n, c, h, wd = x.shape
    oc, ic, k, _ = w.shape
    if c != ic:
        raise ValueError(f"conv2d channel mismatch: input has {c}, weight expects {ic}")
    ho, wo = params.out_extent(h), params.out_extent(wd)
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d output extent {ho}x{wo} is empty")

    # channel-major buffers keep every im2col reshape a free view
    xc = x.data.transpose(1, 0, 2, 3)
    if p:
        xc = np.pad(xc, ((0, 0), (0, 0), (p, p), (p, p)))
    cols = np.empty((c, k, k, n, ho, wo))
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xc[:, :, i:i + s * ho:s, j:j + s * wo:s]
    cols2 = cols.reshape(c * k * k, n * ho * wo)
    w2 = w.data.reshape(oc, -1)
    out = (w2 @ cols2 + b.data[:, None]).reshape(oc, n, ho, wo).transpose(1, 0, 2, 3)

    def back(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(oc, -1)
        gw = (g2 @ cols2.T).reshape(w.shape)
        gb = g2.sum(axis=1)
        gx = None
        if x.requires_grad:
            gcols = (w2.T @ g2).reshape(c, k, k, n, ho, wo)
            gxc = np.zeros((c, n, h + 2 * p, wd + 2 * p))
            for i in range(k):
                for j in range(k):
                    gxc[:, :, i:i + s * ho:s, j:j + s * wo:s] += gcols[:, i, j]
            gx = gxc[:, :, p:p + h, p:p + wd].transpose(1, 0, 2, 3)
        return gx, gw, gb

    return _make(out, (x, w, b), back, "conv2d")


def global_avg_pool(x: Tensor) -> Tensor:
    """N x C x H x W -> N x C spatial mean."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ValueError(f"global_avg_pool needs N x C x H x W, got {x.shape}")
    shape = x.shape
    area = shape[2] * shape[3]

    def back(g):
        return (np.broadcast_to(g[:, :, None, None] / area, shape).copy(),)

    return _make(x.data.mean(axis=(2, 3)), (x,), back, "global_avg_pool")


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``x @ weight.T + bias`` with weight stored out x in."""
    x = as_tensor(x)
    if x.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"linear width mismatch: input {x.shape}, weight {weight.shape}")
    xd, wd = x.data, weight.data

    def back(g):
        return g @ wd, g.T @ xd, g.sum(axis=0)

    return _make(xd @ wd.T + bias.data, (x, weight, bias), back, "linear")


def log_softmax(logits: Tensor) -> Tensor:
    """Row-wise log-softmax, stabilized by subtracting the row max."""
    logits = as_tensor(logits)
    z = logits.data
    if not np.all(np.isfinite(z)):
        raise ValueError("log_softmax received non-finite logits")
    shifted = z - z.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    soft = np.exp(out)

    def back(g):
        return (g - soft * g.sum(axis=-1, keepdims=True),)

    return _make(out, (logits,), back, "log_softmax")


def rms_normalize(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Divide each sample of an N x ... batch by its root-mean-square value.

    Parameter-free, so it fixes the feature scale without adding weights.
    """
    x = as_tensor(x)
    axes = tuple(range(1, x.ndim))
    ms = add(reduce("mean", mul(x, x), axes), eps)
    inv = exp(mul(log(ms), -0.5))
    return mul(x, reshape(inv, (x.shape[0],) + (1,) * (x.ndim - 1)))


# ---------------------------------------------------------------- sampling

def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row i holds the linear-interpolation weights of output sample i (half-pixel convention)."""
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    return _linear_weights(src, n_in)


def _linear_weights(coords: np.ndarray, n: int) -> np.ndarray:
    """Weights for sampling at pixel-index coordinates ``coords`` (clamped to [0, n-1])."""
    coords = np.clip(coords, 0.0, n - 1)
    lo = np.floor(coords).astype(int)
    hi = np.minimum(lo + 1, n - 1)
    frac = coords - lo
    m = np.zeros((coords.size, n))
    rows = np.arange(coords.size)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def _separable_sample(x: Tensor, ry: np.ndarray, rx: np.ndarray, op: str) -> Tensor:
    """out[..., i, j] = sum_ab ry[i, a] x[..., a, b] rx[j, b]."""
    x = as_tensor(x)
    out = np.einsum("ia,...ab,jb->...ij", ry, x.data, rx, optimize=True)

    def back(g):
        return (np.einsum("ia,...ij,jb->...ab", ry, g, rx, optimize=True),)

    return _make(out, (x,), back, op)


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Resize the two trailing axes with bilinear interpolation."""
    x = as_tensor(x)
    if out_h < 1 or out_w < 1:
        raise ValueError(f"resize target {out_h}x{out_w} must be positive")
    h, w = x.shape[-2:]
    if (h, w) == (out_h, out_w):
        return _separable_sample(x, np.eye(h), np.eye(w), "bilinear_resize")
    return _separable_sample(x, _interp_matrix(h, out_h), _interp_matrix(w, out_w), "bilinear_resize")


def roi_sampling_matrices(box: Box, h: int, w: int, out_h: int, out_w: int,
                          samples_per_bin: int = 2) -> Tuple[np.ndarray, np.ndarray]:
    """Separable RoIAlign weights: (out_h x h, out_w x w).

    Each bin averages a regular ``samples_per_bin`` grid of bilinear samples;
    averaging commutes with the separable structure, so the row/column factors
    are averaged independently.
    """
    if samples_per_bin < 1:
        raise ValueError("samples_per_bin must be >= 1")

    def axis(lo: float, hi: float, n_out: int, n: int) -> np.ndarray:
        bin_size = (hi - lo) / n_out
        offs = (np.arange(samples_per_bin) + 0.5) / samples_per_bin
        pts = lo + (np.arange(n_out)[:, None] + offs[None, :]) * bin_size  # continuous coords
        weights = _linear_weights(pts.reshape(-1) - 0.5, n)
        return weights.reshape(n_out, samples_per_bin, n).mean(axis=1)

    return axis(box.y0, box.y1, out_h, h), axis(box.x0, box.x1, out_w, w)


def roi_align(feat: Tensor, box: Box, out_h: int, out_w: int, samples_per_bin: int = 2) -> Tensor:
    """Quantization-free crop of a C x h x w plane to C x out_h x out_w."""
    feat = as_tensor(feat)
    if feat.ndim != 3:
        raise ValueError(f"roi_align needs a C x h x w plane, got {feat.shape}")
    _, h, w = feat.shape
    if not box.within(w, h):
        raise ValueError(f"box {box} lies outside the {h}x{w} feature plane")
    ry, rx = roi_sampling_matrices(box, h, w, out_h, out_w, samples_per_bin)
    return _separable_sample(feat, ry, rx, "roi_align")


def init_conv(rng: np.random.Generator, in_ch: int, out_ch: int, k: int,
              stride: int = 1, padding: Optional[int] = None) -> ConvParams:
    """Fan-in scaled uniform (He) initialization."""
    bound = np.sqrt(6.0 / (in_ch * k * k))
    weight = Tensor(rng.uniform(-bound, bound, size=(out_ch, in_ch, k, k)), requires_grad=True)
    bias = Tensor(np.zeros(out_ch), requires_grad=True)
    return ConvParams(weight, bias, stride, k // 2 if padding is None else padding)
