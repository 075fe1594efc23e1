"""Train classifiers on clean, poisoned or mixed data under a mitigation stack."""

from __future__ import annotations

import copy
import dataclasses
import io
import logging
import math
import time
from typing import Callable, Optional

import numpy as np
import torch

from ._serde import from_dict, to_dict
from .data import ImageDataset
from .errors import ConfigError, DivergenceError
from .evaluation import clean_accuracy, pgd
from .mitigations import TransformStack
from .models import ModelSpec, apply_update, build, loss_and_grads, lr_at, make_optimizer

log = logging.getLogger(__name__)


@dataclasses.dataclass
class AdversarialTraining:
    attack: str = "pgd"
    steps: int = 7
    epsilon: float = 8 / 255
    step_size: Optional[float] = None  # default epsilon / 4
    random_start: bool = True

    def __post_init__(self):
        if self.attack != "pgd":
            raise ConfigError("adversarial training supports attack='pgd' only")
        if self.step_size is None:
            self.step_size = self.epsilon / 4
        if self.steps < 1:
            raise ConfigError("adversarial training needs steps >= 1")


@dataclasses.dataclass
class EarlyStop:
    patience: float = 10
    validation: str = "holdout:0.1"  # dataset id, or holdout:<fraction> of the training set


@dataclasses.dataclass
class ExploiterSpec:
    model: ModelSpec = dataclasses.field(default_factory=lambda: ModelSpec("resnet18"))
    train_transforms: TransformStack = dataclasses.field(default_factory=TransformStack.standard)
    adversarial_training: Optional[AdversarialTraining] = None
    epochs: int = 60
    batch_size: int = 128
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    schedule: str = "cosine"
    early_stop: Optional[EarlyStop] = None
    seed: int = 0
    deterministic: bool = True
    device: str = "auto"
    eval_batch_size: int = 500

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        lr_at(0, 1, self.lr, self.schedule)  # validates the schedule name

    @property
    def gray(self):
        return self.train_transforms.has("grayscale")

    def to_dict(self):
        return to_dict(self)

    @classmethod
    def from_dict(cls, d):
        return from_dict(cls, d, "exploiter")


@dataclasses.dataclass
class RunRecord:
    spec: dict
    provenance: dict = dataclasses.field(default_factory=dict)
    bank_hash: Optional[str] = None
    train_loss: list = dataclasses.field(default_factory=list)
    train_acc: list = dataclasses.field(default_factory=list)
    test_acc: list = dataclasses.field(default_factory=list)
    val_acc: list = dataclasses.field(default_factory=list)
    final_test_acc: Optional[float] = None
    robust_acc: dict = dataclasses.field(default_factory=dict)
    epochs_run: int = 0
    best_epoch: Optional[int] = None
    stopped_early: bool = False
    diverged: bool = False
    wall_time: float = 0.0
    seed: int = 0
    label: str = ""

    def to_dict(self):
        return to_dict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def epochs_csv(self) -> str:
        buf = io.StringIO()
        buf.write("epoch,train_loss,train_acc,test_acc,val_acc\n")
        for e in range(self.epochs_run):
            val = self.val_acc[e] if e < len(self.val_acc) else ""
            buf.write(f"{e + 1},{self.train_loss[e]:.6f},{self.train_acc[e]:.6f},{self.test_acc[e]:.6f},{val}\n")
        return buf.getvalue()


@dataclasses.dataclass
class StopDecision:
    stop: bool
    best_epoch: Optional[int]


def early_stop_monitor(val_history, patience: float) -> StopDecision:
    """Stop once validation accuracy has not improved for ``patience`` epochs.

    Epochs are 1-based; ``best_epoch`` is the first epoch reaching the maximum.
    """
    if not val_history:
        return StopDecision(False, None)
    best = int(np.argmax(val_history)) + 1
    since = len(val_history) - best
    return StopDecision(bool(since >= patience), best)


def _device(name):
    if name == "auto":
        return torch.device("cuda" if torch.cuda.is_available() else "cpu")
    return torch.device(name)


def train(ds: ImageDataset, spec: ExploiterSpec, test: ImageDataset, validation: Optional[ImageDataset] = None,
          on_epoch: Optional[Callable[[int, RunRecord], None]] = None, label: str = "",
          provenance: Optional[dict] = None, bank_hash: Optional[str] = None):
    """Train one exploiter; returns ``(classifier, RunRecord)``.

    Per batch: stack transforms (bdr, crop/flip, grayscale, mixup), optional
    PGD adversarial examples, then an SGD-momentum step.  Grayscale and BDR
    are also part of the model's input stage, so test images are filtered the
    same way.  With an early-stop monitor the returned model is the best
    validation epoch's.
    """
    if ds.class_count != test.class_count or ds.image_shape != test.image_shape:
        raise ValueError("training and test sets differ in class count or image shape")
    device = _device(spec.device)
    if spec.deterministic:
        torch.use_deterministic_algorithms(True, warn_only=True)
    torch.manual_seed(spec.seed)
    order_rng = np.random.default_rng(spec.seed)
    aug_rng = np.random.default_rng([spec.train_transforms.rng_seed, spec.seed])
    at_gen = torch.Generator().manual_seed(spec.seed + 1)
    stack = spec.train_transforms

    model = build(spec.model, input_filters=stack.prefilters()).to(device)
    opt = make_optimizer(model, spec.lr, spec.momentum, spec.weight_decay)
    x_all = torch.from_numpy(ds.images)
    y_all = torch.from_numpy(ds.labels)
    n = len(ds)
    bs = min(spec.batch_size, n)
    steps_per_epoch = n // bs if n > bs else 1  # drop the ragged tail batch
    total_steps = steps_per_epoch * spec.epochs

    record = RunRecord(spec=spec.to_dict(), provenance=provenance or {"train": ds.name, "n_train": n,
                                                                       "test": test.name},
                       bank_hash=bank_hash, seed=spec.seed, label=label)
    best_state, t0, step = None, time.time(), 0
    for epoch in range(1, spec.epochs + 1):
        model.train()
        perm = order_rng.permutation(n)
        loss_sum, correct, seen = 0.0, 0, 0
        for b in range(steps_per_epoch):
            idx = torch.from_numpy(perm[b * bs:(b + 1) * bs])
            xb, yb = stack.apply(x_all[idx], y_all[idx], aug_rng, ds.class_count)
            xb, yb = xb.to(device), yb.to(device)
            if spec.adversarial_training is not None:
                at = spec.adversarial_training
                model.eval()
                x_adv = pgd(model, xb, yb, at.epsilon, at.steps, at.step_size, at.random_start, at_gen)
                if float((x_adv - xb).abs().max()) > at.epsilon + 1e-6:
                    raise AssertionError("adversarial example left the epsilon ball")
                xb = x_adv
                model.train()
            lr = lr_at(step, total_steps, spec.lr, spec.schedule)
            loss, grads = loss_and_grads(model, xb, yb, wrt="params", keep_logits=True)
            if not torch.isfinite(loss):
                record.diverged = True
                record.wall_time = time.time() - t0
                raise DivergenceError(f"non-finite loss at epoch {epoch}, step {b}", record)
            apply_update(model, grads, opt, lr=lr)
            step += 1
            hard = yb if yb.dim() == 1 else yb.argmax(1)
            correct += int((grads["logits"].argmax(1) == hard).sum())
            loss_sum += float(loss) * len(idx)
            seen += len(idx)
        record.train_loss.append(loss_sum / max(seen, 1))
        record.train_acc.append(correct / max(seen, 1))
        record.test_acc.append(clean_accuracy(model, test, spec.eval_batch_size))
        record.epochs_run = epoch
        if validation is not None:
            record.val_acc.append(clean_accuracy(model, validation, spec.eval_batch_size))
        log.info("epoch %d: loss %.4f test %.4f", epoch, record.train_loss[-1], record.test_acc[-1])
        if on_epoch is not None:
            on_epoch(epoch, record)
        if validation is not None and spec.early_stop is not None:
            decision = early_stop_monitor(record.val_acc, spec.early_stop.patience)
            if decision.best_epoch == epoch:
                best_state = copy.deepcopy(model.state_dict())
            if decision.stop:
                record.stopped_early = True
                break
    if best_state is not None:
        model.load_state_dict(best_state)
        record.best_epoch = early_stop_monitor(record.val_acc, math.inf).best_epoch
        record.final_test_acc = record.test_acc[record.best_epoch - 1]
    else:
        record.best_epoch = record.epochs_run
        record.final_test_acc = record.test_acc[-1]
    record.wall_time = time.time() - t0
    model.eval()
    return model, record


def train_adversarial(ds: ImageDataset, spec: ExploiterSpec, test: ImageDataset, **kwargs):
    """PGD adversarial training (examples generated around the training batch each step)."""
    if spec.adversarial_training is None:
        raise ConfigError("train_adversarial needs spec.adversarial_training")
    return train(ds, spec, test, **kwargs)
