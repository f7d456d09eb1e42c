"""Feature extractors, the expandable classification head and frozen snapshots."""
from __future__ import annotations

import copy
import hashlib
import math
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .losses import LogitsSplit

HEAD_MODES = ("dot", "cosine")


class MLPExtractor(nn.Module):
    def __init__(self, in_dim: int, hidden: int = 64, out_dim: int = 32, depth: int = 2, batchnorm: bool = True):
        super().__init__()
        layers, d = [], in_dim
        for i in range(depth):
            width = out_dim if i == depth - 1 else hidden
            layers.append(nn.Linear(d, width, bias=not batchnorm))
            if batchnorm:
                layers.append(nn.BatchNorm1d(width))
            layers.append(nn.ReLU())
            d = width
        self.net = nn.Sequential(*layers)
        self.out_dim = out_dim

    def forward(self, x):
        return self.net(x.flatten(1))


class _BasicBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int, last_relu: bool = True):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))
        self.last_relu = last_relu

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        out = out + (x if self.shortcut is None else self.shortcut(x))
        return F.relu(out) if self.last_relu else out


class CifarResNet(nn.Module):
    """ResNet for 32x32 inputs with ``6n + 2`` layers (n=5 gives ResNet-32)."""

    def __init__(self, n: int = 5, mean=(0.5071, 0.4866, 0.4409), std=(0.2009, 0.1984, 0.2023),
                 last_relu: bool = False):
        super().__init__()
        self.register_buffer("mean", torch.tensor(mean).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(std).view(1, 3, 1, 1))
        self.conv = nn.Conv2d(3, 16, 3, 1, 1, bias=False)
        self.bn = nn.BatchNorm2d(16)
        blocks, cin = [], 16
        for stage, cout in enumerate((16, 32, 64)):
            for i in range(n):
                stride = 2 if stage > 0 and i == 0 else 1
                last = stage == 2 and i == n - 1
                blocks.append(_BasicBlock(cin, cout, stride, last_relu=not last or last_relu))
                cin = cout
        self.blocks = nn.Sequential(*blocks)
        self.out_dim = 64
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")

    def forward(self, x):
        x = (x - self.mean) / self.std
        x = F.relu(self.bn(self.conv(x)))
        x = self.blocks(x)
        return F.adaptive_avg_pool2d(x, 1).flatten(1)


class ResNet18(nn.Module):
    """ImageNet-style ResNet-18 (7x7 stem, max-pool, four stages of two blocks)."""

    def __init__(self, mean=(0.485, 0.456, 0.406), std=(0.229, 0.224, 0.225), last_relu: bool = False):
        super().__init__()
        self.register_buffer("mean", torch.tensor(mean).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(std).view(1, 3, 1, 1))
        self.stem = nn.Sequential(nn.Conv2d(3, 64, 7, 2, 3, bias=False), nn.BatchNorm2d(64), nn.ReLU(),
                                  nn.MaxPool2d(3, 2, 1))
        blocks, cin = [], 64
        for stage, cout in enumerate((64, 128, 256, 512)):
            for i in range(2):
                last = stage == 3 and i == 1
                blocks.append(_BasicBlock(cin, cout, 2 if stage > 0 and i == 0 else 1, last_relu=not last or last_relu))
                cin = cout
        self.blocks = nn.Sequential(*blocks)
        self.out_dim = 512
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")

    def forward(self, x):
        x = self.blocks(self.stem((x - self.mean) / self.std))
        return F.adaptive_avg_pool2d(x, 1).flatten(1)


def build_extractor(arch: str, input_shape: tuple[int, ...], **kw) -> nn.Module:
    if arch == "mlp":
        return MLPExtractor(math.prod(input_shape), **kw)
    if arch == "resnet18":
        return ResNet18(**kw)
    if arch == "resnet32":
        return CifarResNet(n=5, **kw)
    if arch.startswith("resnet") and arch[6:].isdigit():
        depth = int(arch[6:])
        if (depth - 2) % 6:
            raise ValueError(f"CIFAR ResNet depth must be 6n+2, got {depth}")
        return CifarResNet(n=(depth - 2) // 6, **kw)
    raise ValueError(f"unknown architecture {arch!r}")


class IncrementalClassifier(nn.Module):
    """Shared feature extractor plus a head that grows by whole classes.

    ``dot`` heads compute ``W f + b``; ``cosine`` heads compute
    ``scale * <w/|w|, f/|f|>`` with a learnable scale and no bias.
    """

    def __init__(self, extractor: nn.Module, num_classes: int, head_mode: str = "dot",
                 scale_init: float = 1.0, generator: torch.Generator | None = None):
        super().__init__()
        if head_mode not in HEAD_MODES:
            raise ValueError(f"head_mode must be one of {HEAD_MODES}")
        self.feature_extractor = extractor
        self.head_mode = head_mode
        self.feat_dim = extractor.out_dim
        self.weight = nn.Parameter(self._init_rows(num_classes, generator))
        self.bias = nn.Parameter(self._init_rows(num_classes, generator)[:, 0]) if head_mode == "dot" else None
        self.scale = nn.Parameter(torch.tensor(float(scale_init))) if head_mode == "cosine" else None
        self.num_old = 0

    def _init_rows(self, n: int, generator) -> torch.Tensor:
        bound = 1.0 / math.sqrt(self.feat_dim)
        w = torch.empty(n, self.feat_dim)
        return w.uniform_(-bound, bound, generator=generator)

    @property
    def num_classes(self) -> int:
        return self.weight.shape[0]

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.feature_extractor(x)

    def head(self, f: torch.Tensor) -> torch.Tensor:
        if self.head_mode == "cosine":
            return self.scale * F.linear(F.normalize(f, dim=1), F.normalize(self.weight, dim=1))
        return F.linear(f, self.weight, self.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x))

    def split(self, x: torch.Tensor) -> LogitsSplit:
        return LogitsSplit(self(x), self.num_old)

    @torch.no_grad()
    def expand_head(self, num_new: int, generator: torch.Generator | None = None) -> "IncrementalClassifier":
        """Append ``num_new`` freshly initialised class rows; existing rows are copied bit-for-bit."""
        if num_new < 1:
            raise ValueError("num_new must be >= 1")
        self.num_old = self.num_classes
        rows = self._init_rows(num_new, generator).to(self.weight)
        self.weight = nn.Parameter(torch.cat([self.weight.data, rows]))
        if self.bias is not None:
            extra = self._init_rows(num_new, generator)[:, 0].to(self.bias)
            self.bias = nn.Parameter(torch.cat([self.bias.data, extra]))
        return self

    def parameter_hash(self) -> str:
        h = hashlib.sha256()
        for name, t in sorted(self.state_dict().items()):
            h.update(name.encode())
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()


class ModelSnapshot:
    """Frozen copy of a classifier, always evaluated in inference mode without gradients."""

    def __init__(self, model: IncrementalClassifier):
        self._model = copy.deepcopy(model).eval()
        for p in self._model.parameters():
            p.requires_grad_(False)

    @property
    def num_classes(self) -> int:
        return self._model.num_classes

    @property
    def head_mode(self) -> str:
        return self._model.head_mode

    @torch.no_grad()
    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        return self._model(x)

    @torch.no_grad()
    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self._model.features(x)

    def parameter_hash(self) -> str:
        return self._model.parameter_hash()

    def thaw(self) -> IncrementalClassifier:
        """Trainable deep copy of the frozen model."""
        m = copy.deepcopy(self._model)
        for p in m.parameters():
            p.requires_grad_(True)
        return m.train()


def snapshot(model) -> ModelSnapshot:
    if isinstance(model, ModelSnapshot):
        return model
    return ModelSnapshot(model)


def weight_norms(model, old_span: range, new_span: range) -> tuple[float | None, float | None]:
    """Mean L2 norm of the head rows in each span; ``None`` for an empty span."""
    w = model._model.weight if isinstance(model, ModelSnapshot) else model.weight
    norms = w.detach().norm(dim=1)

    def mean(span):
        return float(norms[span.start : span.stop].mean()) if len(span) else None

    return mean(old_span), mean(new_span)


def save_checkpoint(model: IncrementalClassifier, path, **meta) -> None:
    state = {
        "state_dict": model.state_dict(),
        "num_classes": model.num_classes,
        "num_old": model.num_old,
        "head_mode": model.head_mode,
        "meta": meta,
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(state, path)


def load_checkpoint(path, extractor: nn.Module) -> tuple[IncrementalClassifier, dict]:
    state = torch.load(path, map_location="cpu", weights_only=False)
    model = IncrementalClassifier(extractor, state["num_classes"], state["head_mode"])
    model.load_state_dict(state["state_dict"])
    model.num_old = state["num_old"]
    return model, state["meta"]
