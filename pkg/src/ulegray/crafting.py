"""Sample-wise error-minimizing perturbations (min-min bi-level optimization).

One crafting run alternates two phases until the source model's training
error on the perturbed data drops below ``stop_error``:

* outer: ``outer_steps`` SGD mini-batch steps on the currently perturbed images
  (perturbations frozen);
* inner: for every sample, ``inner_steps`` signed-gradient *descent* steps on
  its perturbation (model frozen), each followed by projection onto the
  L-inf ball and onto the set of valid images.

Variants differ in what the source model sees:

=============  ===========================  ==========================
variant        model input                  perturbation
=============  ===========================  ==========================
uleo           x + d                        3 channels
uleo_aug       Aug(x) + d                   3 channels
uleo_gray      Gray(x) + d                  1 channel, replicated
uleo_grayaug   Gray(Aug(x)) + d             1 channel, replicated
=============  ===========================  ==========================
"""

from __future__ import annotations

import dataclasses
import logging
import time
from typing import Callable, Optional

import numpy as np
import torch

from ._serde import from_dict, to_dict
from .data import ImageDataset
from .errors import ConfigError, InvariantError
from .mitigations import TransformStack, augment, crop, flip, grayscale
from .models import ModelSpec, build, cross_entropy, make_optimizer, apply_update, loss_and_grads

log = logging.getLogger(__name__)

VARIANTS = ("uleo", "uleo_aug", "uleo_gray", "uleo_grayaug")
BUDGET_TOL = 1e-6


@dataclasses.dataclass
class CraftSpec:
    variant: str = "uleo"
    source_model: ModelSpec = dataclasses.field(default_factory=lambda: ModelSpec("resnet18"))
    epsilon: float = 8 / 255
    inner_steps: int = 20
    inner_step_size: Optional[float] = None  # default epsilon / 10
    outer_steps: int = 10
    batch_size: int = 128
    inner_batch_size: int = 512
    stop_error: float = 0.01
    max_rounds: int = 30
    aug_stack: TransformStack = dataclasses.field(default_factory=lambda: TransformStack([crop(), flip()]))
    augment_outer: bool = True
    stop_on_augmented: bool = True  # aug variants: measure the stop error on fresh augmented views
    restart_each_round: bool = False
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    device: str = "auto"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown crafting variant {self.variant!r}; expected one of {VARIANTS}")
        if self.inner_step_size is None:
            self.inner_step_size = self.epsilon / 10
        if not 0 < self.inner_step_size <= self.epsilon + 1e-12:
            raise ConfigError("inner_step_size must lie in (0, epsilon]")
        if not 0.0 < self.stop_error < 1.0:
            raise ConfigError("stop_error must lie in (0, 1)")
        if self.max_rounds < 1 or self.inner_steps < 0 or self.outer_steps < 0:
            raise ConfigError("max_rounds >= 1 and non-negative step counts required")

    @property
    def gray(self):
        return self.variant in ("uleo_gray", "uleo_grayaug")

    @property
    def augmented(self):
        return self.variant in ("uleo_aug", "uleo_grayaug")

    def to_dict(self):
        return to_dict(self)

    @classmethod
    def from_dict(cls, d):
        return from_dict(cls, d, "craft")


@dataclasses.dataclass(eq=False)
class PerturbationBank:
    sample_ids: np.ndarray
    delta: np.ndarray  # (N, H, W, 3) pixel units
    epsilon: float
    gray_constrained: bool = False
    variant: str = "uleo"
    crafting_meta: dict = dataclasses.field(default_factory=dict)

    def __post_init__(self):
        self.sample_ids = np.asarray(self.sample_ids, dtype=np.int64)
        self.delta = np.asarray(self.delta, dtype=np.float32)
        self._index = {int(s): i for i, s in enumerate(self.sample_ids)}
        self.validate()

    def validate(self):
        if self.delta.ndim != 4 or self.delta.shape[-1] != 3 or len(self.delta) != len(self.sample_ids):
            raise InvariantError(f"delta must be (N, H, W, 3) aligned with sample_ids, got {self.delta.shape}")
        if len(self._index) != len(self.sample_ids):
            raise InvariantError("bank sample_ids must be unique")
        if len(self.delta):
            if not np.isfinite(self.delta).all():
                raise InvariantError("bank contains non-finite perturbations")
            linf = float(np.abs(self.delta).max())
            if linf > self.epsilon + BUDGET_TOL:
                raise InvariantError(f"perturbation budget violated: {linf} > {self.epsilon}")
            if self.gray_constrained and channel_spread(self.delta) != 0.0:
                raise InvariantError("gray-constrained bank has unequal channel values")

    def __len__(self):
        return len(self.sample_ids)

    def rows_for(self, sample_ids) -> np.ndarray:
        missing = [int(s) for s in sample_ids if int(s) not in self._index]
        if missing:
            raise KeyError(f"bank has no perturbation for sample ids {missing[:20]}"
                           + (f" (+{len(missing) - 20} more)" if len(missing) > 20 else ""))
        return np.fromiter((self._index[int(s)] for s in sample_ids), dtype=np.int64, count=len(sample_ids))

    def for_sample(self, sample_id: int) -> np.ndarray:
        return self.delta[self._index[int(sample_id)]]

    @classmethod
    def zeros(cls, ds: ImageDataset, epsilon: float = 8 / 255, gray_constrained=False):
        return cls(ds.sample_ids.copy(), np.zeros_like(ds.images), epsilon, gray_constrained, "zero")

    @property
    def converged(self):
        return bool(self.crafting_meta.get("converged", False))

    def content_hash(self):
        from .storage import bank_hash
        return bank_hash(self)


def channel_spread(delta: np.ndarray) -> float:
    """Largest per-pixel range across channels (0 exactly for gray perturbations)."""
    if not len(delta):
        return 0.0
    return float((delta.max(axis=-1) - delta.min(axis=-1)).max())


@dataclasses.dataclass
class Constraints:
    epsilon: float
    gray: bool = False
    # lower/upper feasibility bounds for delta so that x + delta stays in [0, 1]
    lower: Optional[torch.Tensor] = None
    upper: Optional[torch.Tensor] = None

    @classmethod
    def for_images(cls, x: torch.Tensor, epsilon: float, gray: bool):
        if gray:
            # one value must suit all three channels
            lower = -x.amin(dim=-1, keepdim=True)
            upper = 1.0 - x.amax(dim=-1, keepdim=True)
        else:
            lower, upper = -x, 1.0 - x
        return cls(epsilon, gray, lower, upper)

    def project(self, delta: torch.Tensor) -> torch.Tensor:
        delta = delta.clamp(-self.epsilon, self.epsilon)
        if self.lower is not None:
            delta = torch.maximum(torch.minimum(delta, self.upper), self.lower)
        return delta


def inner_min_step(model, x, y, delta, step_size: float, constraints: Constraints):
    """One signed-gradient descent step on ``delta`` against a frozen ``model``.

    ``x`` is the (possibly augmented / grayscaled) view the model sees; a
    single-channel ``delta`` is broadcast over channels, so its gradient is the
    channel sum.  Returns the projected new ``delta``.
    """
    d = delta.detach().clone().requires_grad_(True)
    inp = (x + d.expand_as(x)).clamp(0.0, 1.0)
    loss = cross_entropy(model(inp), y)
    (g,) = torch.autograd.grad(loss, d)
    with torch.no_grad():
        return constraints.project(d - step_size * g.sign())


def _device(name: str) -> torch.device:
    if name == "auto":
        return torch.device("cuda" if torch.cuda.is_available() else "cpu")
    return torch.device(name)


class _BatchCycler:
    """Endless shuffled mini-batch indices, reshuffled each pass."""

    def __init__(self, n, batch_size, rng):
        self.n, self.bs, self.rng = n, batch_size, rng
        self.order, self.pos = rng.permutation(n), 0

    def next(self):
        if self.pos + self.bs > self.n:
            self.order, self.pos = self.rng.permutation(self.n), 0
        idx = self.order[self.pos:self.pos + self.bs]
        self.pos += self.bs
        return idx


def craft(ds: ImageDataset, spec: CraftSpec, on_round: Optional[Callable[[dict], None]] = None) -> PerturbationBank:
    """Run the alternating min-min loop on ``ds`` and return the perturbation bank.

    Hitting ``max_rounds`` with error still >= ``stop_error`` does not raise;
    the bank is returned with ``crafting_meta["converged"] = False``.
    """
    if ds.split_tag != "train":
        raise ValueError("crafting expects a training split")
    if tuple(spec.source_model.input_shape) != ds.image_shape or spec.source_model.class_count != ds.class_count:
        raise ValueError("source model shape/class count does not match the dataset")
    device = _device(spec.device)
    torch.manual_seed(spec.seed)
    rng = np.random.default_rng(spec.seed)
    gen = torch.Generator().manual_seed(spec.seed)

    def fresh_model():
        m = build(spec.source_model).to(device)
        return m, make_optimizer(m, spec.lr, spec.momentum, spec.weight_decay)

    model, opt = fresh_model()
    x = torch.from_numpy(ds.images).to(device)
    y = torch.from_numpy(ds.labels).to(device)
    n = len(ds)
    gray, aug = spec.gray, spec.augmented
    base = grayscale(x) if gray else x
    channels = 1 if gray else 3
    constraints = Constraints.for_images(x, spec.epsilon, gray)
    delta = (torch.rand((n, *ds.image_shape[:2], channels), generator=gen) * 2 - 1) * spec.epsilon
    delta = constraints.project(delta.to(device))
    spatial = spec.aug_stack.spatial

    def view(idx, augmented):
        if not augmented:
            return base[idx]
        v = augment(x[idx], spatial, rng)
        return grayscale(v) if gray else v

    @torch.no_grad()
    def evaluate():
        model.eval()
        wrong, total_loss = 0, 0.0
        for s in range(0, n, spec.inner_batch_size):
            idx = torch.arange(s, min(s + spec.inner_batch_size, n), device=device)
            v = view(idx, aug and spec.stop_on_augmented)
            inp = (v + delta[idx].expand_as(v)).clamp(0, 1)
            logits = model(inp)
            total_loss += float(cross_entropy(logits, y[idx])) * len(idx)
            wrong += int((logits.argmax(1) != y[idx]).sum())
        return wrong / n, total_loss / n

    cycler = _BatchCycler(n, min(spec.batch_size, n), rng)
    history = []
    converged, error = False, 1.0
    t_start = time.time()
    for rnd in range(1, spec.max_rounds + 1):
        t0 = time.time()
        if spec.restart_each_round and rnd > 1:
            model, opt = fresh_model()
        # outer: train the source model, perturbations frozen
        model.train()
        train_loss = 0.0
        for _ in range(spec.outer_steps):
            idx = torch.from_numpy(cycler.next()).to(device)
            v = view(idx, aug and spec.augment_outer)
            inp = (v + delta[idx].expand_as(v)).clamp(0, 1)
            loss, grads = loss_and_grads(model, inp, y[idx], wrt="params")
            apply_update(model, grads, opt)
            train_loss += float(loss)
        # inner: minimize the loss w.r.t. each perturbation, model frozen
        _, loss_before = evaluate()
        model.eval()
        for s in range(0, n, spec.inner_batch_size):
            idx = torch.arange(s, min(s + spec.inner_batch_size, n), device=device)
            cons = Constraints(spec.epsilon, gray, constraints.lower[idx], constraints.upper[idx])
            d = delta[idx]
            for _ in range(spec.inner_steps):
                d = inner_min_step(model, view(idx, aug), y[idx], d, spec.inner_step_size, cons)
            delta[idx] = d
        linf = float(delta.abs().max())
        if linf > spec.epsilon + BUDGET_TOL:
            raise InvariantError(f"round {rnd}: budget violated ({linf} > {spec.epsilon})")
        error, loss_after = evaluate()
        entry = {"round": rnd, "train_error": error, "outer_loss": train_loss / max(spec.outer_steps, 1),
                 "loss_before_inner": loss_before, "loss_after_inner": loss_after,
                 "linf": linf, "budget_ok": True, "seconds": round(time.time() - t0, 3)}
        history.append(entry)
        log.info("round %d: train error %.4f, loss %.4f -> %.4f, linf %.5f", rnd, error,
                 loss_before, loss_after, linf)
        if on_round is not None:
            on_round(entry)
        if error < spec.stop_error:
            converged = True
            break

    full = delta.expand(n, *ds.image_shape).detach().cpu().numpy().astype(np.float32)
    meta = {
        "spec": spec.to_dict(),
        "rounds": len(history),
        "final_error": error,
        "converged": converged,
        "non_converged": not converged,
        "log": history,
        "seconds": round(time.time() - t_start, 3),
        "dataset": ds.name,
    }
    return PerturbationBank(ds.sample_ids.copy(), full, spec.epsilon, gray, spec.variant, meta)


def craft_with_mlp(ds: ImageDataset, spec: CraftSpec, on_round=None) -> PerturbationBank:
    """Crafting with an MLP source model (inputs flattened inside the model)."""
    if spec.source_model.arch != "mlp":
        raise ConfigError("craft_with_mlp needs source_model.arch == 'mlp'")
    return craft(ds, spec, on_round)
