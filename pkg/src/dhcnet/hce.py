"""Corner views of an image and the matching RoIAlign crops of its feature map."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from . import nn
from .backbone import StagedBackbone
from .tensor import Tensor, _make, as_tensor

MIN_VIEW_SIGMA = 0.25


@dataclass
class ViewSet:
    boxes: List[nn.Box]  # top-left, top-right, bottom-left, bottom-right
    views: np.ndarray  # 4 x C x H x W, resized to the input resolution
    sigma_v: float
    height: int
    width: int


def view_boxes(height: int, width: int, sigma_v: float) -> List[nn.Box]:
    if not MIN_VIEW_SIGMA <= sigma_v <= 1:
        raise ValueError(
            f"view proportion {sigma_v} must lie in [{MIN_VIEW_SIGMA}, 1]; "
            "smaller views would not cover the image")
    sh = math.floor(math.sqrt(sigma_v) * height + 1e-9)
    sw = math.floor(math.sqrt(sigma_v) * width + 1e-9)
    return [
        nn.Box(0, 0, sw, sh),
        nn.Box(width - sw, 0, width, sh),
        nn.Box(0, height - sh, sw, height),
        nn.Box(width - sw, height - sh, width, height),
    ]


def crop(image: np.ndarray, box: nn.Box) -> np.ndarray:
    return image[:, int(box.y0):int(box.y1), int(box.x0):int(box.x1)]


def extract_views(image, sigma_v: float) -> ViewSet:
    """Four corner crops of a C x H x W image, each resized back to H x W."""
    img = np.asarray(getattr(image, "data", image), dtype=np.float64)
    _, h, w = img.shape
    boxes = view_boxes(h, w, sigma_v)
    views = np.stack([nn.bilinear_resize(Tensor(crop(img, b)), h, w).data for b in boxes])
    return ViewSet(boxes, views, float(sigma_v), h, w)


def view_proportion(sigma: float) -> float:
    """Views reuse the shuffle proportion but never drop below full coverage."""
    return max(sigma, MIN_VIEW_SIGMA)


def local_features(model: StagedBackbone, views, mode: str = "online") -> Tensor:
    """Backbone features of the resized views.

    ``views`` is a ViewSet or an already stacked (4N) x C x H x W array. In
    ``frozen`` mode the result is cut from the graph.
    """
    if mode not in ("online", "frozen"):
        raise ValueError(f"hce mode must be 'online' or 'frozen', got {mode!r}")
    arr = views.views if isinstance(views, ViewSet) else np.asarray(views)
    size = model.config.input_size
    if arr.shape[-2:] != (size, size):
        raise ValueError(f"views are {arr.shape[-2:]}, model expects {size}x{size}")
    feats = model.forward_full(Tensor(arr))
    return feats.detach() if mode == "frozen" else feats


def feature_boxes(views_or_boxes, image_size: Sequence[int], feat_size: Sequence[int]) -> List[nn.Box]:
    boxes = views_or_boxes.boxes if isinstance(views_or_boxes, ViewSet) else views_or_boxes
    (ih, iw), (fh, fw) = image_size, feat_size
    out = []
    for b in boxes:
        fb = nn.Box(b.x0 * fw / iw, b.y0 * fh / ih, b.x1 * fw / iw, b.y1 * fh / ih)
        if not fb.within(fw, fh):
            raise ValueError(f"view box {b} maps to {fb}, outside the {fh}x{fw} feature plane")
        out.append(fb)
    return out


def roi_align_many(feat: Tensor, boxes: Sequence[nn.Box], out_h: int, out_w: int,
                   samples_per_bin: int = 2) -> Tensor:
    """RoIAlign of the same boxes on every item of an N x C x h x w batch -> N x B x C x out_h x out_w."""
    feat = as_tensor(feat)
    h, w = feat.shape[-2:]
    mats = [nn.roi_sampling_matrices(b, h, w, out_h, out_w, samples_per_bin) for b in boxes]
    ry = np.stack([m[0] for m in mats])
    rx = np.stack([m[1] for m in mats])
    if feat.ndim != 4:
        raise ValueError(f"expected an N x C x h x w batch, got {feat.shape}")
    out = np.einsum("bia,ncay,bjy->nbcij", ry, feat.data, rx, optimize=True)

    def back(g):
        return (np.einsum("bia,nbcij,bjy->ncay", ry, g, rx, optimize=True),)

    return _make(out, (feat,), back, "roi_align")


def global_features(feat: Tensor, views, out_h: int, out_w: int, samples_per_bin: int = 2,
                    image_size: Sequence[int] = None) -> Tensor:
    """Crops of a C x h x w (or N x C x h x w) feature map under the view boxes.

    Boxes move from image to feature coordinates by the ratio of the two
    planes, i.e. the backbone's total stride.
    """
    feat = as_tensor(feat)
    single = feat.ndim == 3
    if single:
        feat = feat.reshape((1,) + feat.shape)
    if image_size is None:
        image_size = (views.height, views.width)
    boxes = feature_boxes(views, image_size, feat.shape[-2:])
    out = roi_align_many(feat, boxes, out_h, out_w, samples_per_bin)
    return out.reshape(out.shape[1:]) if single else out
