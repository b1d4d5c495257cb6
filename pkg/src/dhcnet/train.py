"""Training, evaluation and ablation orchestration."""

from __future__ import annotations

import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import hce, hcl, losses, nn
from .backbone import StagedBackbone
from .checkpoint import Checkpoint
from .config import TrainConfig
from .data import Dataset, load
from .tensor import Tensor, backward

logger = logging.getLogger(__name__)


class SGD:
    """SGD with heavy-ball momentum and L2 weight decay folded into the gradient."""

    def __init__(self, params: Sequence[Tensor], momentum: float = 0.9, weight_decay: float = 1e-4):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        for p, v in zip(self.params, self.velocity):
            g = p.grad if p.grad is not None else 0.0
            g = g + self.weight_decay * p.data
            v *= self.momentum
            v += g
            p.data -= lr * v


@dataclass
class StepResult:
    report: losses.LossReport
    correct: int
    forwards_per_image: float


def _hflip(images: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    flips = rng.random(len(images)) < 0.5
    out = images.copy()
    out[flips] = out[flips, :, :, ::-1]
    return out


def hcl_inputs(images: np.ndarray, config: TrainConfig, rng: np.random.Generator,
               num_stages: int) -> List[Tuple[int, np.ndarray]]:
    """Per schedule entry (ascending k): (last stage, batch of shuffled images)."""
    schedule = hcl.granularity_schedule(config.m, num_stages)
    batches = [np.empty_like(images) for _ in schedule]
    for i, img in enumerate(images):
        aug = hcl.augment(img, i, config.sigma, config.m, rng, num_stages, config.independent_regions)
        for b, entry in zip(batches, aug.entries):
            b[i] = entry.image
    return [(stage, b) for (_, _, stage), b in zip(schedule, batches)]


def compute_losses(model: StagedBackbone, images: np.ndarray, labels: np.ndarray,
                   config: TrainConfig, rng: np.random.Generator) -> Tuple[losses.LossReport, np.ndarray]:
    """Forward every enabled branch on a batch; returns the report and main-branch logits."""
    n = len(images)
    x = Tensor(images)
    feats = model.forward_full(x)
    logits = model.head_logits(model.num_stages, feats)
    if config.mixup_baseline:
        perm = rng.permutation(n)
        lam = float(rng.beta(config.mixup_alpha, config.mixup_alpha))
        onehot = np.eye(model.config.num_classes)[labels]
        mixed, targets = hcl.mixup(images, images[perm], onehot, onehot[perm], lam)
        mixed_logits = model.head_logits(model.num_stages, model.forward_full(Tensor(mixed)))
        cls = losses.soft_cls_loss(nn.log_softmax(mixed_logits), targets)
        return losses.total_loss(cls, None, None, config.weights), logits.data

    cls = losses.cls_loss(nn.log_softmax(logits), labels)
    hor = exp = None
    confs: List[float] = []
    if config.enable_hcl:
        ordered = []
        for stage, batch in hcl_inputs(images, config, rng, model.num_stages):
            f = model.forward_truncated(Tensor(batch), stage)
            ordered.append((model.head_logits(stage, f), labels))
        hor, confs = losses.hor_loss(ordered, config.ordering_mode, with_ordering=config.hcl_loss == "hor")
    if config.enable_hce:
        sigma_v = hce.view_proportion(config.sigma)
        view_sets = [hce.extract_views(img, sigma_v) for img in images]
        stacked = np.concatenate([v.views for v in view_sets])
        f_local = hce.local_features(model, stacked, config.hce_mode)
        c, fh, fw = f_local.shape[1:]
        if config.hce_loss == "exp":
            f_local = f_local.reshape(n, 4, c, fh, fw)
            f_global = hce.global_features(feats, view_sets[0], fh, fw, config.samples_per_bin)
            exp = losses.exp_loss(f_global, f_local)
        else:
            view_logits = model.head_logits(model.num_stages, f_local)
            exp = losses.cls_loss(nn.log_softmax(view_logits), np.repeat(labels, 4))
    return losses.total_loss(cls, hor, exp, config.weights, confs), logits.data


def train_step(model: StagedBackbone, batch: Tuple[np.ndarray, np.ndarray], config: TrainConfig,
               rng: np.random.Generator, optimizer: SGD, lr: float) -> StepResult:
    images, labels = batch
    labels = np.asarray(labels, dtype=int)
    before = model.forward_count
    model.zero_grad()
    report, logits = compute_losses(model, images, labels, config, rng)
    if not np.isfinite(report.total):
        raise FloatingPointError(f"non-finite loss: {report.to_dict()}")
    backward(report.total_tensor)
    optimizer.step(lr)
    correct = int((logits.argmax(axis=1) == labels).sum())
    return StepResult(report, correct, (model.forward_count - before) / len(images))


def predict(model: StagedBackbone, images: np.ndarray, batch_size: int = 32) -> np.ndarray:
    preds = []
    for s in range(0, len(images), batch_size):
        preds.append(model.predict_logits(Tensor(images[s:s + batch_size])).data.argmax(axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=int)


def accuracy(model: StagedBackbone, images: np.ndarray, labels: np.ndarray) -> float:
    if len(images) == 0:
        return float("nan")
    return float((predict(model, images) == labels).mean())


def model_from_checkpoint(ckpt: Checkpoint) -> StagedBackbone:
    config = TrainConfig.from_dict(ckpt.config)
    num_classes = ckpt.params["head4.bias"].shape[0]
    model = StagedBackbone(config.backbone(num_classes))
    model.load_state_dict(ckpt.params)
    return model


def checkpoint_of(model: StagedBackbone, config: TrainConfig, epoch: int, metrics: dict) -> Checkpoint:
    return Checkpoint(config.to_dict(), model.state_dict(), epoch, metrics)


@dataclass
class TrainResult:
    final: Checkpoint
    best: Checkpoint
    history: List[dict] = field(default_factory=list)

    @property
    def final_test_acc(self) -> float:
        return self.history[-1]["test_acc"]

    @property
    def best_test_acc(self) -> float:
        return max(h["test_acc"] for h in self.history)


def _round(v: float) -> float:
    return float(f"{v:.10g}")


def train(config: TrainConfig, out_dir=None, dataset: Optional[Dataset] = None) -> TrainResult:
    """Run all epochs; write ``metrics.jsonl``, ``final.ckpt`` and ``best.ckpt`` into ``out_dir``."""
    config.validate()
    if dataset is None:
        dataset = load(config.dataset, config.image_size)
    rng = np.random.default_rng(config.seed)
    model = StagedBackbone(config.backbone(dataset.num_classes))
    opt = SGD(model.parameters(), config.momentum, config.weight_decay)
    out = Path(out_dir) if out_dir is not None else None
    metrics_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics_fh = open(out / "metrics.jsonl", "w", encoding="utf-8")
    history: List[dict] = []
    best: Optional[Checkpoint] = None
    best_acc = -1.0
    x_train, y_train = dataset.train_images, dataset.train_labels
    try:
        for epoch in range(config.epochs):
            lr = config.lr_at(epoch)
            order = rng.permutation(len(x_train))
            sums = {"cls": 0.0, "hor": 0.0, "exp": 0.0, "total": 0.0}
            correct, steps = 0, 0
            for s in range(0, len(order), config.batch_size):
                idx = order[s:s + config.batch_size]
                images = x_train[idx]
                if config.hflip:
                    images = _hflip(images, rng)
                res = train_step(model, (images, y_train[idx]), config, rng, opt, lr)
                for k in sums:
                    sums[k] += getattr(res.report, k)
                correct += res.correct
                steps += 1
            record = {"epoch": epoch, "lr": _round(lr)}
            record.update({k: _round(v / steps) for k, v in sums.items()})
            record["train_acc"] = _round(correct / len(x_train))
            record["test_acc"] = _round(accuracy(model, dataset.test_images, dataset.test_labels))
            history.append(record)
            logger.info("epoch %d %s", epoch, record)
            if metrics_fh is not None:
                metrics_fh.write(json.dumps(record, sort_keys=True) + "\n")
                metrics_fh.flush()
            if record["test_acc"] > best_acc:
                best_acc = record["test_acc"]
                best = checkpoint_of(model, config, epoch, record)
    finally:
        if metrics_fh is not None:
            metrics_fh.close()
    final = checkpoint_of(model, config, config.epochs - 1, history[-1])
    if out is not None:
        final.save(out / "final.ckpt")
        best.save(out / "best.ckpt")
    return TrainResult(final, best, history)


def evaluate(checkpoint, images: np.ndarray, labels: np.ndarray, num_classes: Optional[int] = None) -> dict:
    """Top-1 accuracy of the recognition branch alone, with a per-class breakdown."""
    ckpt = checkpoint if isinstance(checkpoint, Checkpoint) else Checkpoint.load(checkpoint)
    model = model_from_checkpoint(ckpt)
    k = model.config.num_classes
    if num_classes is not None and num_classes != k:
        raise ValueError(f"checkpoint has {k} classes, dataset has {num_classes}")
    labels = np.asarray(labels, dtype=int)
    if labels.size and labels.max() >= k:
        raise ValueError(f"dataset label {labels.max()} exceeds the checkpoint's {k} classes")
    preds = predict(model, images)
    per_class = {}
    for c in range(k):
        mask = labels == c
        if mask.any():
            per_class[str(c)] = float((preds[mask] == c).mean())
    return {"accuracy": float((preds == labels).mean()) if labels.size else float("nan"),
            "count": int(labels.size), "per_class": per_class}


# ---------------------------------------------------------------- ablation

TABLE1_GRID = {
    "baseline": {"enable_hcl": False, "enable_hce": False},
    "+hcl": {"enable_hcl": True, "enable_hce": False},
    "+hce": {"enable_hcl": False, "enable_hce": True},
    "full": {"enable_hcl": True, "enable_hce": True},
}

TABLE2_GRID = {
    "hcl_ce+hce_ce": {"hcl_loss": "ce", "hce_loss": "ce"},
    "hcl_hor+hce_ce": {"hcl_loss": "hor", "hce_loss": "ce"},
    "hcl_ce+hce_exp": {"hcl_loss": "ce", "hce_loss": "exp"},
    "hcl_hor+hce_exp": {"hcl_loss": "hor", "hce_loss": "exp"},
}


def ablation_grid(include_losses: bool = True, sigmas: Iterable[float] = (), ms: Iterable[int] = (),
                  hce_modes: Iterable[str] = (), mixup: bool = False,
                  ordering_modes: Iterable[str] = ()) -> Dict[str, dict]:
    grid = dict(TABLE1_GRID)
    if include_losses:
        grid.update(TABLE2_GRID)
    for s in sigmas:
        grid[f"sigma={s:g}"] = {"sigma": float(s)}
    for m in ms:
        grid[f"m={m}"] = {"m": int(m)}
    for mode in hce_modes:
        grid[f"hce_mode={mode}"] = {"hce_mode": mode}
    for mode in ordering_modes:
        grid[f"ordering={mode}"] = {"ordering_mode": mode}
    if mixup:
        grid["mixup"] = {"mixup_baseline": True, "enable_hcl": False, "enable_hce": False}
    return grid


def _run_cell(args) -> Tuple[str, int, float, float]:
    name, cfg_dict, seed, out_dir = args
    cfg = TrainConfig.from_dict(cfg_dict).replace(seed=seed)
    cell_dir = Path(out_dir) / name.replace("/", "_") / f"seed{seed}" if out_dir else None
    t0 = time.time()
    res = train(cfg, cell_dir)
    logger.info("cell %s seed %d done in %.1fs", name, seed, time.time() - t0)
    return name, seed, res.best_test_acc, res.final_test_acc


def worker_count() -> int:
    env = os.environ.get("DHCNET_THREADS")
    cap = int(env) if env else 1
    return max(1, min(cap, os.cpu_count() or 1))


def ablate(base: TrainConfig, grid: Dict[str, dict], seeds: Sequence[int], out_dir=None) -> dict:
    """Train every grid cell for every seed and tabulate test accuracy.

    ``test_acc`` is the best per-epoch test accuracy; ``final_acc`` the last epoch's.
    """
    jobs = []
    for name, overrides in grid.items():
        cfg = base.replace(**overrides).validate()
        for seed in seeds:
            jobs.append((name, cfg.to_dict(), int(seed), str(out_dir) if out_dir else None))
    workers = worker_count()
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_run_cell, jobs))
    else:
        results = [_run_cell(j) for j in jobs]
    rows = []
    for name, overrides in grid.items():
        cell = [r for r in results if r[0] == name]
        best = np.array([r[2] for r in cell])
        final = np.array([r[3] for r in cell])
        rows.append({
            "name": name,
            "overrides": overrides,
            "seeds": [r[1] for r in cell],
            "test_acc": best.tolist(),
            "final_acc": final.tolist(),
            "mean": float(best.mean()),
            "spread": float(best.std()),
            "final_mean": float(final.mean()),
            "final_spread": float(final.std()),
        })
    return {"base": base.to_dict(), "rows": rows}
