"""Architecture registry behind one classifier contract.

Classifiers consume channels-last batches ``(B, H, W, 3)`` in [0, 1] pixel
space.  Optional pixel filters (grayscale, bit-depth reduction) and the
per-channel normalization run inside :meth:`Classifier.forward`, so attacks
and crafting always work in pixel space.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ._serde import from_dict, to_dict
from .errors import ConfigError
from .mitigations import apply_prefilters

ARCHS = ("mlp", "small_cnn", "resnet18", "densenet121", "vgg11")


@dataclasses.dataclass
class ModelSpec:
    arch: str
    class_count: int = 10
    input_shape: tuple[int, int, int] = (32, 32, 3)
    mean: tuple[float, float, float] = (0.5, 0.5, 0.5)
    std: tuple[float, float, float] = (0.5, 0.5, 0.5)
    init_seed: int = 0
    mlp_hidden: tuple[int, ...] = (1024, 512)
    cnn_width: tuple[int, int] = (16, 32)

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ConfigError(f"unknown arch {self.arch!r}; expected one of {ARCHS}")
        if len(self.mean) != 3 or len(self.std) != 3:
            raise ConfigError("normalization mean/std need 3 entries each")
        self.input_shape = tuple(self.input_shape)
        self.mean, self.std = tuple(self.mean), tuple(self.std)
        self.mlp_hidden, self.cnn_width = tuple(self.mlp_hidden), tuple(self.cnn_width)

    def to_dict(self):
        return to_dict(self)

    @classmethod
    def from_dict(cls, d):
        return from_dict(cls, d, "model")


class SmallCNN(nn.Module):
    """Two conv blocks and a linear head; a CPU-scale test model."""

    def __init__(self, class_count, input_shape, width=(16, 32)):
        super().__init__()
        h, w, _ = input_shape
        self.features = nn.Sequential(
            nn.Conv2d(3, width[0], 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(width[0], width[1], 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
        )
        self.head = nn.Linear(width[1] * (h // 4) * (w // 4), class_count)

    def forward(self, x):
        return self.head(self.features(x).flatten(1))


class MLP(nn.Module):
    def __init__(self, class_count, input_shape, hidden=(1024, 512)):
        super().__init__()
        dims = [int(np.prod(input_shape)), *hidden]
        layers = []
        for a, b in zip(dims[:-1], dims[1:]):
            layers += [nn.Linear(a, b), nn.ReLU()]
        self.body = nn.Sequential(*layers)
        self.head = nn.Linear(dims[-1], class_count)

    def forward(self, x):
        # channels-last flatten so a feature index is (row, col, channel)
        return self.head(self.body(x.permute(0, 2, 3, 1).flatten(1)))


def _resnet18(c):
    import torchvision
    net = torchvision.models.resnet18(num_classes=c)
    net.conv1 = nn.Conv2d(3, 64, kernel_size=3, stride=1, padding=1, bias=False)
    net.maxpool = nn.Identity()
    return net


def _densenet121(c):
    import torchvision
    net = torchvision.models.densenet121(num_classes=c)
    net.features.conv0 = nn.Conv2d(3, 64, kernel_size=3, stride=1, padding=1, bias=False)
    net.features.pool0 = nn.Identity()
    return net


def _vgg11(c):
    import torchvision
    net = torchvision.models.vgg11_bn(num_classes=c)
    net.avgpool = nn.AdaptiveAvgPool2d(1)
    net.classifier = nn.Linear(512, c)
    return net


class Classifier(nn.Module):
    def __init__(self, spec: ModelSpec, net: nn.Module, input_filters: Sequence[tuple] = ()):
        super().__init__()
        self.spec = spec
        self.net = net
        self.input_filters = [tuple(f) for f in input_filters]
        self.register_buffer("mean", torch.tensor(spec.mean, dtype=torch.float32).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(spec.std, dtype=torch.float32).view(1, 3, 1, 1))
        self.input_hook = None  # called with the filtered pixel batch; used by tests

    @property
    def training_mode(self):
        return self.training

    def forward(self, x):
        if x.dim() != 4 or tuple(x.shape[1:]) != tuple(self.spec.input_shape):
            raise ValueError(f"expected input (B, {', '.join(map(str, self.spec.input_shape))}), "
                             f"got {tuple(x.shape)}")
        x = apply_prefilters(x, self.input_filters)
        if self.input_hook is not None:
            self.input_hook(x)
        x = x.permute(0, 3, 1, 2)
        x = (x - self.mean.to(x.dtype)) / self.std.to(x.dtype)
        return self.net(x)


def build(spec: ModelSpec, input_filters: Sequence[tuple] = ()) -> Classifier:
    """Fresh classifier; the same ``init_seed`` yields bit-identical parameters."""
    c = spec.class_count
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(spec.init_seed)
        if spec.arch == "mlp":
            net = MLP(c, spec.input_shape, spec.mlp_hidden)
        elif spec.arch == "small_cnn":
            net = SmallCNN(c, spec.input_shape, spec.cnn_width)
        elif spec.arch == "resnet18":
            net = _resnet18(c)
        elif spec.arch == "densenet121":
            net = _densenet121(c)
        elif spec.arch == "vgg11":
            net = _vgg11(c)
        else:  # guarded by ModelSpec, kept for direct callers
            raise ConfigError(f"unknown arch {spec.arch!r}")
    return Classifier(spec, net, input_filters)


def _as_batch(model, x, y):
    if isinstance(x, np.ndarray):
        x = torch.from_numpy(x)
    if isinstance(y, np.ndarray):
        y = torch.from_numpy(y)
    p = next(model.parameters())
    x = x.to(device=p.device, dtype=p.dtype)
    y = y.to(p.device)
    if y.dim() == 1 and y.shape[0] != x.shape[0] or y.dim() == 2 and y.shape != (x.shape[0], model.spec.class_count):
        raise ValueError(f"label shape {tuple(y.shape)} does not match batch of {x.shape[0]}")
    return x, y


def cross_entropy(logits, y):
    """Mean cross-entropy; ``y`` is either class indices or soft label rows."""
    if y.dim() == 2:
        return -(y.to(logits.dtype) * F.log_softmax(logits, dim=1)).sum(dim=1).mean()
    return F.cross_entropy(logits, y.long())


def loss_and_grads(model: Classifier, x, y, wrt: str = "params", keep_logits: bool = False):
    """Mean cross-entropy on a pixel-space batch and the requested gradients.

    Returns ``(loss, grads)`` where ``grads`` has keys ``"params"`` (list aligned
    with ``model.parameters()``) and/or ``"input"`` (shaped like ``x``), plus
    ``"logits"`` when ``keep_logits`` is set.
    """
    if wrt not in ("params", "input", "both"):
        raise ValueError(f"wrt must be params|input|both, got {wrt!r}")
    x, y = _as_batch(model, x, y)
    x = x.detach().clone().requires_grad_(wrt in ("input", "both"))
    logits = model(x)
    loss = cross_entropy(logits, y)
    params = [p for p in model.parameters() if p.requires_grad] if wrt in ("params", "both") else []
    inputs = ([x] if wrt in ("input", "both") else []) + params
    g = torch.autograd.grad(loss, inputs, allow_unused=True)
    grads = {}
    if wrt in ("input", "both"):
        grads["input"] = g[0]
        g = g[1:]
    if params:
        grads["params"] = [torch.zeros_like(p) if gi is None else gi for p, gi in zip(params, g)]
    if keep_logits:
        grads["logits"] = logits.detach()
    return loss.detach(), grads


def make_optimizer(model, lr=0.1, momentum=0.9, weight_decay=5e-4):
    return torch.optim.SGD([p for p in model.parameters() if p.requires_grad], lr=lr,
                           momentum=momentum, weight_decay=weight_decay)


def apply_update(model: Classifier, grads, optimizer, lr: Optional[float] = None):
    """One SGD(-momentum) step using ``grads["params"]``; ``lr`` overrides the current rate."""
    params = [p for p in model.parameters() if p.requires_grad]
    gl = grads["params"] if isinstance(grads, dict) else grads
    if len(gl) != len(params):
        raise ValueError("gradient list does not match model parameters")
    for p, g in zip(params, gl):
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {tuple(g.shape)} != parameter shape {tuple(p.shape)}")
        p.grad = g.detach().clone()
    if lr is not None:
        for group in optimizer.param_groups:
            group["lr"] = lr
    optimizer.step()
    return model


def lr_at(step: int, total_steps: int, base_lr: float, schedule: str = "cosine",
          milestones=(0.5, 0.75), gamma: float = 0.1) -> float:
    """Learning rate for ``step`` of ``total_steps`` under a cosine / step / constant schedule."""
    if schedule == "constant":
        return base_lr
    if schedule == "cosine":
        return 0.5 * base_lr * (1.0 + math.cos(math.pi * min(step, total_steps) / max(total_steps, 1)))
    if schedule == "step":
        frac = step / max(total_steps, 1)
        return base_lr * gamma ** sum(frac >= m for m in milestones)
    raise ConfigError(f"unknown lr schedule {schedule!r}")


@torch.no_grad()
def predict(model: Classifier, x, batch_size: int = 500) -> np.ndarray:
    was = model.training
    model.eval()
    p = next(model.parameters())
    preds = []
    for i in range(0, len(x), batch_size):
        xb = torch.as_tensor(x[i:i + batch_size]).to(device=p.device, dtype=p.dtype)
        preds.append(model(xb).argmax(1).cpu().numpy())
    model.train(was)
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)
