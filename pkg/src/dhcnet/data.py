"""Synthetic contour dataset: classes differ only in the harmonic shape of a
filled closed curve, rendered over a textured background.

Images are stored as 8-bit RGB PNGs next to a ``manifest.csv`` with header
``path,label,split``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from PIL import Image

MANIFEST_NAME = "manifest.csv"
SPLITS = ("train", "test")

BACKGROUND_RGB = np.array([0.55, 0.45, 0.35])
FOREGROUND_RGB = np.array([0.25, 0.55, 0.22])


@dataclass
class DatasetSpec:
    num_classes: int = 20
    train_per_class: int = 3
    test_per_class: int = 3
    image_size: int = 64
    contour_harmonics: int = 6
    class_separation: float = 0.08
    instance_jitter: float = 0.02
    coefficient_range: float = 0.07
    base_radius: float = 0.34  # fraction of the image side
    max_shift: int = 3  # pixels of per-instance translation
    texture_strength: float = 0.12
    texture_seed: int = 1234
    seed: int = 0

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        if not 1 <= self.train_per_class <= 9:
            raise ValueError("train_per_class must lie in [1, 9]")
        if self.test_per_class < 1:
            raise ValueError("test_per_class must be >= 1")
        if self.class_separation <= self.instance_jitter:
            raise ValueError("class_separation must exceed instance_jitter")
        if self.image_size < 8:
            raise ValueError("image_size too small")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Dataset:
    train_images: np.ndarray  # N x 3 x S x S in [0, 1]
    train_labels: np.ndarray
    test_images: np.ndarray
    test_labels: np.ndarray
    num_classes: int

    def split(self, name: str) -> Tuple[np.ndarray, np.ndarray]:
        if name == "train":
            return self.train_images, self.train_labels
        if name == "test":
            return self.test_images, self.test_labels
        raise ValueError(f"unknown split {name!r}")


# ---------------------------------------------------------------- rendering

def contour_radius(theta: np.ndarray, coeffs: np.ndarray, r0: float) -> np.ndarray:
    """r(theta) = r0 (1 + sum_h a_h cos(h theta) + b_h sin(h theta)); coeffs = [a_1, b_1, a_2, b_2, ...]."""
    coeffs = np.asarray(coeffs, dtype=np.float64)
    r = np.ones_like(theta)
    for h in range(len(coeffs) // 2):
        r = r + coeffs[2 * h] * np.cos((h + 1) * theta) + coeffs[2 * h + 1] * np.sin((h + 1) * theta)
    return r0 * r


def texture_field(size: int, seed: int) -> np.ndarray:
    """Smooth value-noise texture of shape (2*size) x (2*size) in [-1, 1]."""
    rng = np.random.default_rng(seed)
    big = 2 * size
    field = np.zeros((big, big))
    for cells, amp in ((4, 1.0), (8, 0.5), (16, 0.25), (32, 0.125)):
        grid = rng.uniform(-1, 1, size=(cells + 1, cells + 1))
        t = np.linspace(0, cells, big, endpoint=False)
        i = t.astype(int)
        f = t - i
        f = f * f * (3 - 2 * f)
        rows = grid[i] * (1 - f)[:, None] + grid[i + 1] * f[:, None]
        field += amp * (rows[:, i] * (1 - f)[None, :] + rows[:, i + 1] * f[None, :])
    return field / np.abs(field).max()


def jitter_coefficients(class_params: np.ndarray, rng: np.random.Generator, radius: float) -> np.ndarray:
    """Uniform draw from the L2 ball of ``radius`` around the class coefficients."""
    coeffs = np.asarray(class_params, dtype=np.float64)
    if radius <= 0:
        return coeffs.copy()
    direction = rng.normal(size=coeffs.shape)
    direction /= max(np.linalg.norm(direction), 1e-12)
    return coeffs + direction * radius * rng.uniform() ** (1 / coeffs.size)


def render_instance(class_params: np.ndarray, instance_rng: np.random.Generator,
                    spec: Optional[DatasetSpec] = None, texture: Optional[np.ndarray] = None) -> np.ndarray:
    """Render one 3 x S x S image of a class.

    The coefficient vector is perturbed by a random vector of L2 norm at most
    ``instance_jitter``; the shape is shifted by up to ``max_shift`` pixels and
    drawn over a randomly offset crop of the shared texture.
    """
    spec = spec or DatasetSpec()
    size = spec.image_size
    if texture is None:
        texture = texture_field(size, spec.texture_seed)
    coeffs = jitter_coefficients(class_params, instance_rng, spec.instance_jitter)
    shift = instance_rng.integers(-spec.max_shift, spec.max_shift + 1, size=2)
    offset = instance_rng.integers(0, size, size=2)
    brightness = instance_rng.uniform(-0.05, 0.05)

    r0 = spec.base_radius * size
    check = contour_radius(np.linspace(0, 2 * np.pi, 720, endpoint=False), coeffs, r0)
    if check.min() <= 0:
        raise ValueError("contour radius is non-positive for some angle; shrink the coefficients")

    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    cy = size / 2 + shift[0]
    cx = size / 2 + shift[1]
    dy, dx = yy - cy, xx - cx
    rho = np.hypot(dx, dy)
    theta = np.arctan2(dy, dx)
    alpha = np.clip(contour_radius(theta, coeffs, r0) - rho + 0.5, 0.0, 1.0)

    tex = texture[offset[0]:offset[0] + size, offset[1]:offset[1] + size]
    shade = 1.0 + spec.texture_strength * tex + brightness
    img = (alpha[None] * FOREGROUND_RGB[:, None, None] + (1 - alpha[None]) * BACKGROUND_RGB[:, None, None])
    return np.clip(img * shade[None], 0.0, 1.0)


def sample_class_params(spec: DatasetSpec, rng: np.random.Generator,
                        max_attempts: int = 100000) -> np.ndarray:
    """Rejection-sample class coefficient vectors at pairwise distance >= class_separation."""
    dim = 2 * spec.contour_harmonics
    params: List[np.ndarray] = []
    attempts = 0
    while len(params) < spec.num_classes:
        attempts += 1
        if attempts > max_attempts:
            raise RuntimeError(
                f"could only place {len(params)} of {spec.num_classes} classes at separation "
                f"{spec.class_separation}; try a smaller separation or fewer classes")
        cand = rng.uniform(-spec.coefficient_range, spec.coefficient_range, size=dim)
        if all(np.linalg.norm(cand - p) >= spec.class_separation for p in params):
            params.append(cand)
    return np.stack(params)


def to_bytes(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)


def save_png(img: np.ndarray, path: Path) -> None:
    Image.fromarray(to_bytes(img), mode="RGB").save(path, format="PNG", optimize=False)


def gen_dataset(spec: DatasetSpec, out_dir) -> Path:
    """Write the PNG tree, ``manifest.csv`` and ``classes.json``; return the manifest path."""
    spec.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    root_rng = np.random.default_rng(spec.seed)
    params = sample_class_params(spec, root_rng)
    texture = texture_field(spec.image_size, spec.texture_seed)
    per_split = {"train": spec.train_per_class, "test": spec.test_per_class}
    rows = []
    for label in range(spec.num_classes):
        for split in SPLITS:
            for i in range(per_split[split]):
                inst_rng = np.random.default_rng([spec.seed, label, SPLITS.index(split), i])
                img = render_instance(params[label], inst_rng, spec, texture)
                rel = Path(split) / f"c{label:03d}_{i}.png"
                (out / rel.parent).mkdir(parents=True, exist_ok=True)
                save_png(img, out / rel)
                rows.append((rel.as_posix(), label, split))
    manifest = out / MANIFEST_NAME
    with open(manifest, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["path", "label", "split"])
        writer.writerows(rows)
    meta = {"spec": spec.to_dict(), "class_params": params.tolist()}
    (out / "classes.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return manifest


def read_manifest(path) -> List[Tuple[str, int, str]]:
    path = Path(path)
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["path", "label", "split"]:
            raise ValueError(f"{path}: expected header path,label,split, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 3:
                raise ValueError(f"{path}: row {lineno} is malformed: {row}")
            rel, label, split = row
            try:
                label_i = int(label)
            except ValueError:
                raise ValueError(f"{path}: row {lineno} has non-integer label {label!r}") from None
            if split not in SPLITS:
                raise ValueError(f"{path}: row {lineno} has unknown split {split!r}")
            rows.append((rel, label_i, split))
    return rows


def load(manifest_path, image_size: Optional[int] = None) -> Dataset:
    """Load every image listed in the manifest, scaled to [0, 1], in manifest order."""
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / MANIFEST_NAME
    rows = read_manifest(manifest_path)
    base = manifest_path.parent
    data: Dict[str, Tuple[list, list]] = {s: ([], []) for s in SPLITS}
    for lineno, (rel, label, split) in enumerate(rows, start=2):
        fp = base / rel
        if not fp.exists():
            raise FileNotFoundError(f"{manifest_path}: row {lineno} references missing file {fp}")
        with Image.open(fp) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
        if arr.shape[0] != arr.shape[1] or (image_size is not None and arr.shape[0] != image_size):
            raise ValueError(f"{manifest_path}: row {lineno} image {fp} has size {arr.shape[:2]}")
        data[split][0].append(arr.transpose(2, 0, 1))
        data[split][1].append(label)
    labels = sorted({r[1] for r in rows})
    if labels != list(range(len(labels))):
        raise ValueError(f"{manifest_path}: labels are not a contiguous range from 0")

    def arrays(split):
        imgs, labs = data[split]
        if not imgs:
            return np.zeros((0, 3, 1, 1)), np.zeros(0, dtype=int)
        return np.stack(imgs), np.asarray(labs, dtype=int)

    tr, te = arrays("train"), arrays("test")
    return Dataset(tr[0], tr[1], te[0], te[1], len(labels))
