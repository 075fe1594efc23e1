"""Clean / robust accuracy, transferability, mixed-data deltas and perturbation metrics."""

from __future__ import annotations

import csv
import dataclasses
import io
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np
import torch

from ._serde import from_dict, to_dict
from .data import ImageDataset, MixSpec, assemble_poisoned, mixed_training_set
from .errors import ConfigError
from .models import cross_entropy


@dataclasses.dataclass
class AttackSpec:
    kind: str = "pgd"  # fgsm | pgd
    epsilon: float = 8 / 255
    steps: int = 20
    step_size: Optional[float] = None  # default epsilon / 8 for pgd
    random_start: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("fgsm", "pgd"):
            raise ConfigError(f"unknown attack kind {self.kind!r}")
        if self.kind == "pgd":
            if self.steps < 1:
                raise ConfigError("pgd needs steps >= 1")
            if self.step_size is None:
                self.step_size = self.epsilon / 8
            if self.step_size > self.epsilon + 1e-12:
                raise ConfigError("pgd step_size must not exceed epsilon")

    @property
    def name(self):
        return "fgsm" if self.kind == "fgsm" else f"pgd{self.steps}"

    def to_dict(self):
        return to_dict(self)

    @classmethod
    def from_dict(cls, d):
        return from_dict(cls, d, "attack")


@dataclasses.dataclass
class PerturbationProfile:
    channel_dispersion: float
    spatial_energy: float
    linf: float
    l2: float

    def as_row(self):
        return dataclasses.asdict(self)


def _model_device(model):
    p = next(model.parameters())
    return p.device, p.dtype


@torch.no_grad()
def clean_accuracy(model, test: ImageDataset, batch_size: int = 500) -> float:
    """Top-1 accuracy over the whole split (model put in eval mode)."""
    was = model.training
    model.eval()
    device, dtype = _model_device(model)
    correct = 0
    for i in range(0, len(test), batch_size):
        xb = torch.from_numpy(test.images[i:i + batch_size]).to(device=device, dtype=dtype)
        yb = torch.from_numpy(test.labels[i:i + batch_size]).to(device)
        correct += int((model(xb).argmax(1) == yb).sum())
    model.train(was)
    return correct / len(test)


def fgsm(model, x, y, epsilon):
    """Single signed-gradient step of size ``epsilon``, clamped to valid pixels."""
    x = x.detach().clone().requires_grad_(True)
    loss = cross_entropy(model(x), y)
    (g,) = torch.autograd.grad(loss, x)
    with torch.no_grad():
        return (x + epsilon * g.sign()).clamp(0.0, 1.0)


def pgd(model, x, y, epsilon, steps, step_size, random_start=True, generator=None):
    """Projected gradient ascent on the loss inside the L-inf ball around ``x``."""
    delta = torch.zeros_like(x)
    if random_start and epsilon > 0:
        noise = torch.rand(x.shape, generator=generator, dtype=x.dtype).to(x.device)
        delta = (noise * 2 - 1) * epsilon
        delta = (x + delta).clamp(0, 1) - x
    for _ in range(steps):
        delta = delta.detach().requires_grad_(True)
        loss = cross_entropy(model(x + delta), y)
        (g,) = torch.autograd.grad(loss, delta)
        with torch.no_grad():
            delta = (delta + step_size * g.sign()).clamp(-epsilon, epsilon)
            delta = (x + delta).clamp(0, 1) - x
    return (x + delta).detach()


def adversarial_batch(model, x, y, attack: AttackSpec, generator=None):
    if attack.kind == "fgsm":
        return fgsm(model, x, y, attack.epsilon)
    return pgd(model, x, y, attack.epsilon, attack.steps, attack.step_size, attack.random_start, generator)


def robust_accuracy(model, test: ImageDataset, attack: AttackSpec, batch_size: int = 500) -> float:
    """White-box accuracy on per-sample adversarial examples against ``model`` itself."""
    was = model.training
    model.eval()
    device, dtype = _model_device(model)
    gen = torch.Generator().manual_seed(attack.seed)
    correct = 0
    for i in range(0, len(test), batch_size):
        xb = torch.from_numpy(test.images[i:i + batch_size]).to(device=device, dtype=dtype)
        yb = torch.from_numpy(test.labels[i:i + batch_size]).to(device)
        x_adv = adversarial_batch(model, xb, yb, attack, gen)
        with torch.no_grad():
            correct += int((model(x_adv).argmax(1) == yb).sum())
    model.train(was)
    return correct / len(test)


def perturbation_profile(bank) -> PerturbationProfile:
    """Channel-wise vs spatial structure of a bank, averaged over samples.

    channel_dispersion: mean over samples and pixels of the (population) std of
    the three channel values.  spatial_energy: per channel, sum of absolute
    horizontal and vertical neighbour differences divided by H*W, averaged over
    channels and samples.  linf: largest |delta|; l2: mean per-sample L2 norm.
    """
    d = np.asarray(bank.delta, dtype=np.float64)
    if not len(d):
        raise ValueError("empty bank")
    n, h, w, _ = d.shape
    dispersion = d.std(axis=-1).mean()
    tv = np.abs(np.diff(d, axis=1)).sum(axis=(1, 2)) + np.abs(np.diff(d, axis=2)).sum(axis=(1, 2))
    spatial = (tv / (h * w)).mean()
    return PerturbationProfile(
        channel_dispersion=float(dispersion),
        spatial_energy=float(spatial),
        linf=float(np.abs(d).max()),
        l2=float(np.sqrt((d.reshape(n, -1) ** 2).sum(axis=1)).mean()),
    )


def transfer_matrix(banks: Mapping[str, object], train: ImageDataset, test: ImageDataset,
                    exploiter_spec_for, exploiter_archs: Sequence[str], gray_modes=(False, True),
                    on_cell=None):
    """Clean test accuracy for every (defender arch, exploiter arch, gray) triple.

    ``exploiter_spec_for(arch, gray)`` returns the ExploiterSpec to train.
    Returns ``(array, cells)`` with ``array[i, j, k]`` indexed by defender,
    exploiter and gray mode, and ``cells`` the same values keyed by tuple.
    """
    from .exploiter import train as train_exploiter

    eps = {round(float(b.epsilon), 9) for b in banks.values()}
    if len(eps) > 1:
        raise ValueError(f"banks were crafted with different epsilons: {sorted(eps)}")
    defenders = list(banks)
    out = np.full((len(defenders), len(exploiter_archs), len(gray_modes)), np.nan)
    cells = {}
    for i, d in enumerate(defenders):
        bank = banks[d]
        missing = np.setdiff1d(train.sample_ids, bank.sample_ids)
        if len(missing):
            raise ValueError(f"bank for {d!r} does not match the training set ({len(missing)} ids missing)")
        poisoned = assemble_poisoned(train, bank)
        for j, e in enumerate(exploiter_archs):
            for k, g in enumerate(gray_modes):
                _, rec = train_exploiter(poisoned, exploiter_spec_for(e, g), test,
                                         label=f"{d}->{e}{'/gray' if g else ''}")
                out[i, j, k] = rec.final_test_acc
                cells[(d, e, g)] = rec.final_test_acc
                if on_cell is not None:
                    on_cell((d, e, g), rec)
    return out, cells


def mix_study(train: ImageDataset, test: ImageDataset, banks: Mapping[str, object],
              exploiter_spec_for, original_fraction=0.05, added_fractions=(0.1, 0.3),
              gray_modes=(False, True), seed=0, on_run=None):
    """Accuracy deltas of adding poisoned vs clean data to a clean original subset.

    Returns rows ``{"ori", "add", "gray", "clean", <bank name>: delta, ...}``;
    ``add`` is None for the original-only control.  Deltas are measured
    against the same-size all-clean control.
    """
    from .exploiter import train as train_exploiter

    def run(ds, gray, label):
        _, rec = train_exploiter(ds, exploiter_spec_for(gray), test, label=label)
        if on_run is not None:
            on_run(label, rec)
        return rec.final_test_acc

    from .data import subset

    rows = []
    for gray in gray_modes:
        tag = "gray" if gray else "std"
        base = subset(train, original_fraction, seed)
        rows.append({"ori": original_fraction, "add": None, "gray": gray,
                     "clean": run(base, gray, f"{tag}/ori{original_fraction}")})
        for add in added_fractions:
            clean_ds = mixed_training_set(train, MixSpec(original_fraction, add, "clean"), seed)
            clean_acc = run(clean_ds, gray, f"{tag}/ori{original_fraction}+clean{add}")
            row = {"ori": original_fraction, "add": add, "gray": gray, "clean": clean_acc}
            for name, bank in banks.items():
                pois = mixed_training_set(train, MixSpec(original_fraction, add, "poisoned"), seed, bank)
                row[name] = run(pois, gray, f"{tag}/ori{original_fraction}+{name}{add}") - clean_acc
            rows.append(row)
    return rows


def learning_curves(records: Sequence, labels: Optional[Sequence[str]] = None, out_dir=None,
                    title: str = "clean test accuracy") -> dict:
    """Per-epoch clean test accuracy series, optionally written as CSV + PNG overlay."""
    labels = list(labels) if labels is not None else [r.label or f"run{i}" for i, r in enumerate(records)]
    series = {lab: list(r.test_acc) for lab, r in zip(labels, records)}
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "learning_curves.csv").write_text(curves_csv(series))
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(5, 3.5))
        for lab, ys in series.items():
            ax.plot(range(1, len(ys) + 1), [100 * v for v in ys], label=lab)
        ax.set_xlabel("epoch")
        ax.set_ylabel("accuracy (%)")
        ax.set_title(title)
        ax.set_ylim(0, 100)
        ax.legend(fontsize=8)
        fig.tight_layout()
        fig.savefig(out_dir / "learning_curves.png", dpi=120)
        plt.close(fig)
    return series


def curves_csv(series: Mapping[str, Sequence[float]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf)
    names = list(series)
    w.writerow(["epoch", *names])
    longest = max((len(v) for v in series.values()), default=0)
    for e in range(longest):
        w.writerow([e + 1, *[f"{series[n][e]:.6f}" if e < len(series[n]) else "" for n in names]])
    return buf.getvalue()


def write_rows_csv(path, rows: Iterable[dict]):
    rows = list(rows)
    keys = []
    for r in rows:
        keys += [k for k in r if k not in keys]
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=keys)
    w.writeheader()
    w.writerows(rows)
    Path(path).write_text(buf.getvalue())
