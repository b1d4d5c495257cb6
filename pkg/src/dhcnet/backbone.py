"""Staged convolutional backbone with one classifier head per stage."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import nn
from .tensor import Tensor, exp, mul, relu, sub

NUM_STAGES = 4


@dataclass
class BackboneConfig:
    num_classes: int
    input_size: int = 64
    stage_channels: List[int] = field(default_factory=lambda: [16, 32, 64, 128])
    blocks_per_stage: int = 2
    seed: int = 0
    in_channels: int = 3
    # fixed input standardization; pixels arrive in [0, 1]
    input_mean: float = 0.5
    input_scale: float = 0.25
    # per-sample RMS rescaling of every stage output; keeps features at a fixed scale
    stage_norm: bool = True

    def validate(self) -> None:
        if len(self.stage_channels) != NUM_STAGES:
            raise ValueError(f"backbone needs exactly {NUM_STAGES} stages, got {len(self.stage_channels)}")
        if any(c < 1 for c in self.stage_channels):
            raise ValueError("stage channel counts must be positive")
        if self.blocks_per_stage < 1:
            raise ValueError("blocks_per_stage must be >= 1")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if self.input_size % (2 ** NUM_STAGES):
            raise ValueError(f"input_size {self.input_size} is not divisible by {2 ** NUM_STAGES}")

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def total_stride(self) -> int:
        return 2 ** NUM_STAGES

    def param_count(self) -> int:
        """Closed-form parameter count: 3x3 convs plus per-stage linear heads."""
        total, prev = 0, self.in_channels
        for ch in self.stage_channels:
            total += (prev * 9 + 1) * ch
            total += (self.blocks_per_stage - 1) * (ch * 9 + 1) * ch
            total += ch * self.num_classes + self.num_classes
            prev = ch
        return total


class StagedBackbone:
    """Plain stride-2 conv/relu pyramid.

    ``forward_count`` counts image forwards (batch items) through stage 1 and
    ``head_calls`` counts head evaluations per stage; both are instrumentation
    for tests and never affect results.
    """

    def __init__(self, config: BackboneConfig):
        config.validate()
        self.config = config
        rng = np.random.default_rng(config.seed)
        self.stages: List[List[nn.ConvParams]] = []
        prev = config.in_channels
        for ch in config.stage_channels:
            blocks = [nn.init_conv(rng, prev, ch, 3, stride=2)]
            blocks += [nn.init_conv(rng, ch, ch, 3, stride=1) for _ in range(config.blocks_per_stage - 1)]
            self.stages.append(blocks)
            prev = ch
        self.heads: List[Tuple[Tensor, Tensor]] = []
        for ch in config.stage_channels:
            bound = 1.0 / np.sqrt(ch)
            w = Tensor(rng.uniform(-bound, bound, size=(config.num_classes, ch)), requires_grad=True)
            b = Tensor(np.zeros(config.num_classes), requires_grad=True)
            self.heads.append((w, b))
        self.forward_count = 0
        self.head_calls = [0] * NUM_STAGES

    @property
    def num_stages(self) -> int:
        return NUM_STAGES

    def named_parameters(self) -> "OrderedDict[str, Tensor]":
        out: "OrderedDict[str, Tensor]" = OrderedDict()
        for s, blocks in enumerate(self.stages, start=1):
            for b, conv in enumerate(blocks):
                out[f"stage{s}.conv{b}.weight"] = conv.weight
                out[f"stage{s}.conv{b}.bias"] = conv.bias
        for s, (w, b) in enumerate(self.heads, start=1):
            out[f"head{s}.weight"] = w
            out[f"head{s}.bias"] = b
        return out

    def parameters(self) -> List[Tensor]:
        return list(self.named_parameters().values())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def reset_counters(self) -> None:
        self.forward_count = 0
        self.head_calls = [0] * NUM_STAGES

    def run_stages(self, x: Tensor, first: int, last: int) -> Tensor:
        """Run stages ``first..last`` (1-based, inclusive) on ``x``."""
        if not 1 <= first <= last <= NUM_STAGES:
            raise ValueError(f"stage range {first}..{last} is outside 1..{NUM_STAGES}")
        h = x
        if first == 1:
            self.forward_count += x.shape[0]
            h = mul(sub(x, self.config.input_mean), 1.0 / self.config.input_scale)
        for blocks in self.stages[first - 1:last]:
            for conv in blocks:
                h = relu(nn.conv2d(h, conv))
            if self.config.stage_norm:
                h = nn.rms_normalize(h)
        return h

    def forward_truncated(self, x: Tensor, last_stage: int) -> Tensor:
        if not isinstance(last_stage, (int, np.integer)) or not 1 <= last_stage <= NUM_STAGES:
            raise ValueError(f"last_stage must be in [1, {NUM_STAGES}], got {last_stage}")
        self._check_input(x)
        return self.run_stages(x, 1, int(last_stage))

    def forward_full(self, x: Tensor) -> Tensor:
        return self.forward_truncated(x, NUM_STAGES)

    def head_logits(self, stage_index: int, feature: Tensor) -> Tensor:
        """Logits from a stage feature map: linear head over its global average pool."""
        if not 1 <= stage_index <= NUM_STAGES:
            raise ValueError(f"stage_index must be in [1, {NUM_STAGES}], got {stage_index}")
        w, b = self.heads[stage_index - 1]
        if feature.ndim != 4 or feature.shape[1] != w.shape[1]:
            raise ValueError(
                f"head {stage_index} expects {w.shape[1]} channels, got feature of shape {feature.shape}")
        self.head_calls[stage_index - 1] += 1
        return nn.linear(nn.global_avg_pool(feature), w, b)

    def predict_logits(self, x: Tensor) -> Tensor:
        """Inference path: full forward and the final head only."""
        return self.head_logits(NUM_STAGES, self.forward_full(x))

    def confidence(self, stage_index: int, feature: Tensor, labels) -> np.ndarray:
        logp = nn.log_softmax(self.head_logits(stage_index, feature))
        labels = np.asarray(labels, dtype=int)
        return exp(logp).data[np.arange(len(labels)), labels]

    def stage_shapes(self, input_size: Optional[int] = None) -> List[Tuple[int, int, int]]:
        size = input_size or self.config.input_size
        shapes = []
        for ch in self.config.stage_channels:
            size //= 2
            shapes.append((ch, size, size))
        return shapes

    def _check_input(self, x: Tensor) -> None:
        c = self.config
        if x.ndim != 4 or x.shape[1] != c.in_channels:
            raise ValueError(f"backbone input must be N x {c.in_channels} x H x W, got {x.shape}")
        if x.shape[2] % c.total_stride or x.shape[3] % c.total_stride:
            raise ValueError(f"input spatial size {x.shape[2:]} must be divisible by {c.total_stride}")

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise ValueError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, p in params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"parameter {k}: shape {arr.shape} != {p.shape}")
            p.data[...] = arr
