"""Command-line entry point: ``ulegray <command> --config experiment.yaml [overrides]``.

Commands: craft, train, eval, matrix, mix-study, report, paper-suite.

Every command that writes a run directory stores the fully resolved config
there as ``config.yaml``.  ``--set section.key=value`` overrides any config
key (values parsed as YAML); the dedicated flags are shorthands for common
keys.

Exit codes: 0 success, 2 config error, 3 missing artifact or dataset,
4 crafting did not converge, 5 training diverged, 6 corrupt artifact
(hash, schema or invariant failure).
"""

from __future__ import annotations

import argparse
import copy
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from . import data, evaluation, storage
from ._serde import from_dict, to_dict
from .crafting import CraftSpec, PerturbationBank, craft
from .errors import (ConfigError, DatasetError, DivergenceError, IntegrityError, InvariantError,
                     MissingArtifactError, SchemaVersionError)
from .evaluation import AttackSpec
from .exploiter import AdversarialTraining, ExploiterSpec, train
from .mitigations import TransformStack, bdr, gray, mix

log = logging.getLogger("ulegray")

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NOT_CONVERGED, EXIT_DIVERGED, EXIT_CORRUPT = 0, 2, 3, 4, 5, 6


class NotConverged(Exception):
    pass


# ------------------------------------------------------------------ config

@dataclasses.dataclass
class DatasetSection:
    train: str = "synthetic-3class"
    test: str = "synthetic-3class-test"
    root: Optional[str] = None
    download: bool = False
    subset: float = 1.0  # stratified fraction of the training split
    subset_seed: int = 0


@dataclasses.dataclass
class EvalSection:
    attacks: list[AttackSpec] = dataclasses.field(default_factory=list)
    checkpoint: Optional[str] = None
    profile: bool = True


@dataclasses.dataclass
class MatrixSection:
    defenders: list[str] = dataclasses.field(default_factory=lambda: ["resnet18", "densenet121", "vgg11"])
    exploiters: list[str] = dataclasses.field(default_factory=lambda: ["resnet18", "densenet121", "vgg11"])
    gray_modes: list[bool] = dataclasses.field(default_factory=lambda: [False, True])
    banks: dict = dataclasses.field(default_factory=dict)  # defender arch -> bank dir; crafted if absent


@dataclasses.dataclass
class MixSection:
    original_fraction: float = 0.05
    added_fractions: list[float] = dataclasses.field(default_factory=lambda: [0.1, 0.3])
    gray_modes: list[bool] = dataclasses.field(default_factory=lambda: [False, True])
    banks: dict = dataclasses.field(default_factory=dict)  # name -> bank dir


@dataclasses.dataclass
class ExperimentConfig:
    name: str = "experiment"
    dataset: DatasetSection = dataclasses.field(default_factory=DatasetSection)
    craft: CraftSpec = dataclasses.field(default_factory=CraftSpec)
    exploiter: ExploiterSpec = dataclasses.field(default_factory=ExploiterSpec)
    eval: EvalSection = dataclasses.field(default_factory=EvalSection)
    matrix: MatrixSection = dataclasses.field(default_factory=MatrixSection)
    mix: MixSection = dataclasses.field(default_factory=MixSection)
    bank: Optional[str] = None  # bank dir applied to the training set by `train`
    output_dir: str = "runs/experiment"
    seeds: list[int] = dataclasses.field(default_factory=lambda: [0])
    deterministic: bool = True

    def to_dict(self):
        return to_dict(self)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)


def _dataset_defaults(name: str) -> dict:
    mean, std = data.normalization_for(name)
    return {"class_count": 10 if name.startswith("cifar10") else 3, "mean": list(mean), "std": list(std)}


def _set_path(tree: dict, dotted: str, value):
    keys = dotted.split(".")
    node = tree
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot set '{dotted}': '{k}' is not a section")
    node[keys[-1]] = value


def resolve_config(raw: Optional[dict] = None, overrides=()) -> ExperimentConfig:
    """Config mapping + ``(dotted_key, value)`` overrides -> validated ExperimentConfig.

    Model sections that omit ``class_count`` / ``mean`` / ``std`` inherit them
    from the training dataset id.
    """
    tree = copy.deepcopy(raw or {})
    if not isinstance(tree, dict):
        raise ConfigError("config file must contain a mapping")
    for key, value in overrides:
        _set_path(tree, key, value)
    train_name = tree.get("dataset", {}).get("train", DatasetSection.train)
    defaults = _dataset_defaults(train_name)
    for section, field in (("craft", "source_model"), ("exploiter", "model")):
        sec = tree.setdefault(section, {})
        if not isinstance(sec, dict):
            raise ConfigError(f"'{section}' must be a mapping")
        model = sec.setdefault(field, {"arch": "resnet18"})
        if isinstance(model, dict):
            for k, v in defaults.items():
                model.setdefault(k, v)
    return from_dict(ExperimentConfig, tree, "config")


def load_config(path, overrides=()) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({exc})") from None
    return resolve_config(raw, overrides)


def persist_config(cfg: ExperimentConfig, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    storage.atomic_write_text(out_dir / "config.yaml", cfg.to_yaml())
    return out_dir


# ------------------------------------------------------------------ shared steps

def load_splits(cfg: ExperimentConfig):
    root = cfg.dataset.root
    train_ds = data.load_dataset(cfg.dataset.train, root, cfg.dataset.download)
    test_ds = data.load_dataset(cfg.dataset.test, root, cfg.dataset.download)
    if cfg.dataset.subset < 1.0:
        train_ds = data.subset(train_ds, cfg.dataset.subset, cfg.dataset.subset_seed)
    return train_ds, test_ds


def _load_bank(path) -> PerturbationBank:
    path = Path(path)
    if not (path / "manifest.json").exists():
        raise MissingArtifactError(f"bank not found: expected {path / 'manifest.json'}")
    return storage.load_bank(path)


def craft_bank(cfg: ExperimentConfig, train_ds, out_dir, spec: Optional[CraftSpec] = None, echo=print):
    """Craft, save under ``out_dir`` (bank files + craft_log.csv) and return the bank."""
    spec = spec or cfg.craft
    out_dir = Path(out_dir)
    rows = []

    def on_round(entry):
        rows.append(entry)
        echo(f"round {entry['round']:3d}  train_error {entry['train_error']:.4f}  "
             f"loss {entry['loss_before_inner']:.4f}->{entry['loss_after_inner']:.4f}  "
             f"linf {entry['linf'] * 255:.3f}/255  budget_ok {entry['budget_ok']}")

    bank = craft(train_ds, spec, on_round=on_round)
    storage.save_bank(out_dir, bank)
    if rows:
        evaluation.write_rows_csv(out_dir / "craft_log.csv", rows)
    echo(f"bank: {out_dir} ({'converged' if bank.converged else 'NOT converged'} after "
         f"{bank.crafting_meta['rounds']} rounds, error {bank.crafting_meta['final_error']:.4f})")
    return bank


def exploiter_variant(base: ExploiterSpec, arch: Optional[str] = None, gray_mode: Optional[bool] = None,
                      seed: Optional[int] = None) -> ExploiterSpec:
    spec = copy.deepcopy(base)
    if arch is not None:
        spec.model = dataclasses.replace(spec.model, arch=arch)
    if gray_mode is not None:
        kept = [t for t in spec.train_transforms.transforms if t.kind != "grayscale"]
        if gray_mode:
            at = next((i for i, t in enumerate(kept) if t.kind == "mixup"), len(kept))
            kept.insert(at, gray())
        spec.train_transforms = TransformStack(kept, spec.train_transforms.rng_seed)
    if seed is not None:
        spec.seed = seed
        spec.model = dataclasses.replace(spec.model, init_seed=seed)
    return spec


def validation_split(train_ds, spec: ExploiterSpec, root=None, seed: int = 0):
    """``(train, validation)``; validation is None without an early-stop monitor."""
    if spec.early_stop is None:
        return train_ds, None
    source = spec.early_stop.validation
    if source.startswith("holdout:"):
        try:
            frac = float(source.split(":", 1)[1])
        except ValueError:
            raise ConfigError(f"bad early_stop.validation {source!r}") from None
        return data.holdout(train_ds, frac, seed)
    return train_ds, data.load_dataset(source, root)


def train_run(cfg, train_ds, test_ds, spec: ExploiterSpec, out_dir, label, bank=None, bank_dir=None,
              save_model=True):
    """One exploiter run saved as ``out_dir/{record,checkpoint}``; returns (model, record)."""
    spec = dataclasses.replace(spec, deterministic=cfg.deterministic)
    ds = data.assemble_poisoned(train_ds, bank) if bank is not None else train_ds
    fit_ds, val_ds = validation_split(ds, spec, cfg.dataset.root, spec.seed)
    provenance = {"train": train_ds.name, "n_train": len(fit_ds), "test": test_ds.name,
                  "bank": str(bank_dir) if bank_dir else None,
                  "bank_variant": bank.variant if bank is not None else None,
                  "epsilon": float(bank.epsilon) if bank is not None else None,
                  "transforms": spec.train_transforms.describe(), "gray": spec.gray,
                  "adversarial_training": spec.adversarial_training is not None}
    model, record = train(fit_ds, spec, test_ds, validation=val_ds, label=label, provenance=provenance,
                          bank_hash=bank.content_hash() if bank is not None else None)
    out_dir = Path(out_dir)
    storage.save_record(out_dir / "record", record)
    if save_model:
        storage.save_checkpoint(out_dir / "checkpoint", model, epoch=record.best_epoch,
                                metrics={"final_test_acc": record.final_test_acc})
    return model, record


def _pct(v):
    return f"{100 * v:.2f}"


# ------------------------------------------------------------------ commands

def cmd_craft(cfg: ExperimentConfig, args) -> int:
    out = persist_config(cfg, cfg.output_dir)
    train_ds, _ = load_splits(cfg)
    bank = craft_bank(cfg, train_ds, out / "bank")
    if cfg.eval.profile:
        evaluation.write_rows_csv(out / "profile.csv", [evaluation.perturbation_profile(bank).as_row()])
    if not bank.converged:
        raise NotConverged(f"crafting stopped at max_rounds={cfg.craft.max_rounds} with train error "
                           f"{bank.crafting_meta['final_error']:.4f} >= {cfg.craft.stop_error}")
    return EXIT_OK


def cmd_train(cfg: ExperimentConfig, args) -> int:
    out = persist_config(cfg, cfg.output_dir)
    train_ds, test_ds = load_splits(cfg)
    bank = _load_bank(cfg.bank) if cfg.bank else None
    records, rows = [], []
    for seed in cfg.seeds:
        spec = exploiter_variant(cfg.exploiter, seed=seed)
        _, rec = train_run(cfg, train_ds, test_ds, spec, out / f"seed_{seed}", cfg.name, bank, cfg.bank)
        records.append(rec)
        rows.append({"label": cfg.name, "seed": seed, "final_test_acc": rec.final_test_acc,
                     "best_epoch": rec.best_epoch, "epochs_run": rec.epochs_run, "wall_time": rec.wall_time})
        print(f"seed {seed}: clean test accuracy {_pct(rec.final_test_acc)}%")
    evaluation.write_rows_csv(out / "summary.csv", rows)
    evaluation.learning_curves(records, [f"{cfg.name}/seed{s}" for s in cfg.seeds], out)
    return EXIT_OK


def cmd_eval(cfg: ExperimentConfig, args) -> int:
    out = persist_config(cfg, cfg.output_dir)
    _, test_ds = load_splits(cfg)
    if not cfg.eval.checkpoint:
        raise ConfigError("eval needs eval.checkpoint (or --checkpoint)")
    ckpt = Path(cfg.eval.checkpoint)
    if not (ckpt / "manifest.json").exists():
        raise MissingArtifactError(f"checkpoint not found: expected {ckpt / 'manifest.json'}")
    model, _ = storage.load_checkpoint(ckpt)
    row = {"checkpoint": str(ckpt), "clean": evaluation.clean_accuracy(model, test_ds)}
    for attack in cfg.eval.attacks:
        row[attack.name] = evaluation.robust_accuracy(model, test_ds, attack)
    evaluation.write_rows_csv(out / "eval.csv", [row])
    lines = [f"{k:>8s}: {_pct(v)}%" for k, v in row.items() if k != "checkpoint"]
    if cfg.bank and cfg.eval.profile:
        prof = evaluation.perturbation_profile(_load_bank(cfg.bank)).as_row()
        evaluation.write_rows_csv(out / "profile.csv", [prof])
        lines += [f"{k}: {v:.6f}" for k, v in prof.items()]
    storage.atomic_write_text(out / "report.txt", "\n".join(lines) + "\n")
    print("\n".join(lines))
    return EXIT_OK


def cmd_matrix(cfg: ExperimentConfig, args) -> int:
    out = persist_config(cfg, cfg.output_dir)
    train_ds, test_ds = load_splits(cfg)
    banks = {}
    for arch in cfg.matrix.defenders:
        if arch in cfg.matrix.banks:
            banks[arch] = _load_bank(cfg.matrix.banks[arch])
        else:
            spec = dataclasses.replace(cfg.craft, source_model=dataclasses.replace(cfg.craft.source_model,
                                                                                   arch=arch))
            banks[arch] = craft_bank(cfg, train_ds, out / "banks" / arch, spec)

    def on_cell(key, rec):
        d, e, g = key
        storage.save_record(out / "runs" / f"{d}__{e}__{'gray' if g else 'std'}", rec)
        print(f"{d:>12s} -> {e:<12s} {'gray' if g else 'std ':4s} {_pct(rec.final_test_acc)}%")

    seed = cfg.seeds[0]
    arr, cells = evaluation.transfer_matrix(
        banks, train_ds, test_ds,
        lambda arch, g: dataclasses.replace(exploiter_variant(cfg.exploiter, arch, g, seed),
                                            deterministic=cfg.deterministic),
        cfg.matrix.exploiters, cfg.matrix.gray_modes, on_cell)
    rows = [{"defender": d, "exploiter": e, "gray": g, "accuracy": v} for (d, e, g), v in cells.items()]
    evaluation.write_rows_csv(out / "matrix.csv", rows)
    np.save(out / "matrix.npy", arr)
    header = "defender \\ exploiter".ljust(22) + "".join(f"{e:>16s}" for e in cfg.matrix.exploiters)
    lines = [header]
    for d in cfg.matrix.defenders:
        cells_txt = ["/".join(_pct(cells[(d, e, g)]) for g in cfg.matrix.gray_modes) for e in cfg.matrix.exploiters]
        lines.append(d.ljust(22) + "".join(f"{c:>16s}" for c in cells_txt))
    storage.atomic_write_text(out / "matrix.txt", "\n".join(lines) + "\n")
    print("\n".join(lines))
    return EXIT_OK


def cmd_mix_study(cfg: ExperimentConfig, args) -> int:
    out = persist_config(cfg, cfg.output_dir)
    train_ds, test_ds = load_splits(cfg)
    if not cfg.mix.banks:
        raise ConfigError("mix-study needs mix.banks (name -> bank directory)")
    banks = {name: _load_bank(p) for name, p in cfg.mix.banks.items()}
    seed = cfg.seeds[0]

    def on_run(label, rec):
        storage.save_record(out / "runs" / label.replace("/", "__"), rec)
        print(f"{label}: {_pct(rec.final_test_acc)}%")

    rows = evaluation.mix_study(
        train_ds, test_ds, banks,
        lambda g: dataclasses.replace(exploiter_variant(cfg.exploiter, gray_mode=g, seed=seed),
                                      deterministic=cfg.deterministic),
        cfg.mix.original_fraction, tuple(cfg.mix.added_fractions), tuple(cfg.mix.gray_modes), seed, on_run)
    evaluation.write_rows_csv(out / "mix_study.csv", rows)
    lines = ["exploiter  ori    add    clean   " + "  ".join(f"d_{n:>12s}" for n in banks)]
    for r in rows:
        add = "-" if r["add"] is None else f"{r['add']:.2f}"
        deltas = "  ".join(f"{100 * r[n]:+14.2f}" if n in r else " " * 14 for n in banks)
        lines.append(f"{'gray' if r['gray'] else 'std':9s}  {r['ori']:.2f}   {add:5s}  {_pct(r['clean']):6s}  {deltas}")
    storage.atomic_write_text(out / "mix_study.txt", "\n".join(lines) + "\n")
    print("\n".join(lines))
    return EXIT_OK


# ------------------------------------------------------------------ report

def render_delta(delta: np.ndarray, epsilon: float = 8 / 255) -> np.ndarray:
    """Visualization of perturbations: 0.5 + delta * (255 / 8) / 2, clipped to [0, 1].

    A zero perturbation renders mid-gray; +-8/255 renders white / black.
    """
    return np.clip(0.5 + np.asarray(delta, dtype=np.float64) * (255.0 / 8.0) / 2.0, 0.0, 1.0)


def _find(dirs, kind):
    """``(run_dir, artifact_dir)`` pairs for every artifact of ``kind`` below ``dirs``."""
    found = []
    for d in dirs:
        d = Path(d)
        if not d.exists():
            raise MissingArtifactError(f"run directory not found: {d}")
        for m in sorted(d.rglob("manifest.json")):
            try:
                if json.loads(m.read_text()).get("kind") == kind:
                    found.append((d, m.parent))
            except json.JSONDecodeError:
                raise IntegrityError(f"unreadable manifest: {m}") from None
    return found


def aggregate(records) -> list[dict]:
    """Group records by label; mean and (population) std of final accuracy over seeds."""
    eps = {r.provenance.get("epsilon") for r in records if r.provenance.get("epsilon") is not None}
    if len({round(e, 9) for e in eps}) > 1:
        raise ConfigError(f"refusing to aggregate runs crafted with different epsilons: {sorted(eps)}")
    groups: dict[str, list] = {}
    for r in records:
        groups.setdefault(r.label, []).append(r)
    rows = []
    for label, rs in groups.items():
        accs = np.array([r.final_test_acc for r in rs], dtype=np.float64)
        row = {"label": label, "runs": len(rs), "mean": float(accs.mean()), "std": float(accs.std()),
               "summary": f"{100 * accs.mean():.2f}±{100 * accs.std():.2f}"}
        for key in sorted({k for r in rs for k in r.robust_acc}):
            vals = np.array([r.robust_acc[key] for r in rs if key in r.robust_acc])
            row[f"{key}_mean"], row[f"{key}_std"] = float(vals.mean()), float(vals.std())
        rows.append(row)
    return rows


def mean_curves(records) -> dict:
    groups: dict[str, list] = {}
    for r in records:
        groups.setdefault(r.label, []).append(r.test_acc)
    out = {}
    for label, curves in groups.items():
        n = min(len(c) for c in curves)
        out[label] = list(np.mean([c[:n] for c in curves], axis=0))
    return out


def cmd_report(args) -> int:
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    record_dirs = _find(args.runs, "run_record")
    if not record_dirs:
        raise MissingArtifactError(f"no run records under {', '.join(map(str, args.runs))}")
    records = [storage.load_record(d) for _, d in record_dirs]
    keys = {tuple(sorted(r.spec)) for r in records}
    if len(keys) > 1:
        raise ConfigError("incompatible run schemas: records disagree on exploiter spec fields")
    rows = aggregate(records)
    evaluation.write_rows_csv(out / "report.csv", rows)
    series = mean_curves(records)
    storage.atomic_write_text(out / "learning_curves.csv", evaluation.curves_csv(series))
    _plot_series(series, out / "learning_curves.png")
    for run_dir, bdir in _find(args.runs, "bank"):
        bank = storage.load_bank(bdir)
        tag = "__".join((run_dir.name, *bdir.relative_to(run_dir).parts))
        _plot_bank(bank, out / f"delta_{tag}.png")
        evaluation.write_rows_csv(out / f"profile_{tag}.csv", [evaluation.perturbation_profile(bank).as_row()])
    lines = [f"{r['label']:<40s} {r['summary']:>14s}  (n={r['runs']})" for r in rows]
    storage.atomic_write_text(out / "report.txt", "\n".join(lines) + "\n")
    print("\n".join(lines))
    return EXIT_OK


def _plot_series(series, path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for lab, ys in series.items():
        ax.plot(range(1, len(ys) + 1), [100 * v for v in ys], label=lab)
    ax.set_xlabel("epoch")
    ax.set_ylabel("clean test accuracy (%)")
    ax.set_ylim(0, 100)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _plot_bank(bank: PerturbationBank, path, count: int = 8):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    order = np.argsort(bank.sample_ids)[:count]
    fig, axes = plt.subplots(1, len(order), figsize=(1.4 * len(order), 1.6), squeeze=False)
    for ax, i in zip(axes[0], order):
        ax.imshow(render_delta(bank.delta[i], bank.epsilon), vmin=0, vmax=1, interpolation="nearest")
        ax.set_title(str(int(bank.sample_ids[i])), fontsize=7)
        ax.axis("off")
    fig.suptitle(f"{bank.variant} (x255/8)", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


# ------------------------------------------------------------------ reproduction suite

DESK_SYNTHETIC_EPOCHS = 30


def desk_config(output_dir="runs/desk", seed: int = 0, epochs: int = DESK_SYNTHETIC_EPOCHS) -> ExperimentConfig:
    """synthetic-3class + small_cnn configuration used by ``paper-suite --desk``."""
    return resolve_config({
        "name": "desk",
        "dataset": {"train": "synthetic-3class", "test": "synthetic-3class-test"},
        "craft": {"variant": "uleo", "source_model": {"arch": "small_cnn"}, "seed": seed},
        "exploiter": {"model": {"arch": "small_cnn"}, "epochs": epochs, "lr": 0.05,
                      "train_transforms": to_dict(TransformStack.standard())},
        "output_dir": str(output_dir),
        "seeds": [seed],
    })


def run_desk_suite(cfg: ExperimentConfig, echo=print) -> dict:
    """Clean / ULEO / ULEO-GrayAug banks, each against standard and grayscale exploiters.

    Returns accuracies, crafting summaries, profiles and the derived checks.
    """
    out = persist_config(cfg, cfg.output_dir)
    train_ds, test_ds = load_splits(cfg)
    seed = cfg.seeds[0]
    result = {"accuracy": {}, "crafting": {}, "profile": {}, "curves": {}}
    records = []
    banks = {None: None}
    for variant in ("uleo", "uleo_grayaug"):
        t0 = time.time()
        spec = dataclasses.replace(cfg.craft, variant=variant)
        banks[variant] = craft_bank(cfg, train_ds, out / "banks" / variant, spec, echo)
        meta = banks[variant].crafting_meta
        result["crafting"][variant] = {"converged": meta["converged"], "rounds": meta["rounds"],
                                       "final_error": meta["final_error"], "seconds": time.time() - t0}
        result["profile"][variant] = evaluation.perturbation_profile(banks[variant]).as_row()
    for variant, bank in banks.items():
        for g in (False, True):
            name = f"{variant or 'clean'}/{'gray' if g else 'std'}"
            spec = exploiter_variant(cfg.exploiter, gray_mode=g, seed=seed)
            _, rec = train_run(cfg, train_ds, test_ds, spec, out / "runs" / name.replace("/", "__"), name,
                               bank, out / "banks" / variant if variant else None, save_model=False)
            records.append(rec)
            result["accuracy"][name] = rec.final_test_acc
            result["curves"][name] = rec.test_acc
            echo(f"{name:<20s} {_pct(rec.final_test_acc)}%")
    acc = result["accuracy"]
    gap = acc["clean/std"] - acc["uleo/std"]
    result["checks"] = {
        "uleo_converged": result["crafting"]["uleo"]["converged"],
        "uleo_gap": gap,
        "gray_recovery": (acc["uleo/gray"] - acc["uleo/std"]) / gap if gap > 0 else float("nan"),
        "grayaug_gray_gap": acc["clean/gray"] - acc["uleo_grayaug/gray"],
    }
    evaluation.learning_curves(records, [r.label for r in records], out)
    storage.atomic_write_text(out / "summary.json", json.dumps(result, indent=1, default=float))
    return result


def cifar_suite(cfg: ExperimentConfig, echo=print) -> dict:
    """CIFAR-10 grid: variants x {standard, gray}, mitigations, AT robustness, MLP transfer, mixing.

    Banks and runs already present under ``output_dir`` are reused, so an
    interrupted suite resumes where it stopped.
    """
    out = persist_config(cfg, cfg.output_dir)
    train_ds, test_ds = load_splits(cfg)
    seed = cfg.seeds[0]
    result = {"accuracy": {}, "robust": {}, "profile": {}}

    def bank_for(name, spec):
        bdir = out / "banks" / name
        if (bdir / "manifest.json").exists():
            return storage.load_bank(bdir)
        return craft_bank(cfg, train_ds, bdir, spec, echo)

    def run(name, spec, bank=None, bank_name=None):
        rdir = out / "runs" / name.replace("/", "__")
        if (rdir / "record" / "manifest.json").exists():
            rec = storage.load_record(rdir / "record")
        else:
            model, rec = train_run(cfg, train_ds, test_ds, spec, rdir, name, bank,
                                   out / "banks" / bank_name if bank_name else None)
            if spec.adversarial_training is not None:
                for attack in (AttackSpec("fgsm"), AttackSpec("pgd", steps=20)):
                    rec.robust_acc[attack.name] = evaluation.robust_accuracy(model, test_ds, attack)
                storage.save_record(rdir / "record", rec)
        result["accuracy"][name] = rec.final_test_acc
        if rec.robust_acc:
            result["robust"][name] = dict(rec.robust_acc)
        echo(f"{name:<28s} {_pct(rec.final_test_acc)}%  {rec.robust_acc or ''}")
        return rec

    base = cfg.exploiter
    banks = {}
    for variant in ("uleo", "uleo_gray", "uleo_aug", "uleo_grayaug"):
        banks[variant] = bank_for(variant, dataclasses.replace(cfg.craft, variant=variant))
        result["profile"][variant] = evaluation.perturbation_profile(banks[variant]).as_row()
    for g in (False, True):
        tag = "gray" if g else "std"
        run(f"clean/{tag}", exploiter_variant(base, gray_mode=g, seed=seed))
        for variant, bank in banks.items():
            run(f"{variant}/{tag}", exploiter_variant(base, gray_mode=g, seed=seed), bank, variant)
    std = exploiter_variant(base, gray_mode=False, seed=seed)
    run("uleo/mixup", dataclasses.replace(std, train_transforms=TransformStack(
        [*std.train_transforms.transforms, mix(1.0)])), banks["uleo"], "uleo")
    for bits in (2, 3, 4, 5, 6, 7):
        run(f"uleo/bdr{bits}", dataclasses.replace(std, train_transforms=TransformStack(
            [bdr(bits), *std.train_transforms.transforms])), banks["uleo"], "uleo")
    at = dataclasses.replace(std, adversarial_training=AdversarialTraining(epsilon=cfg.craft.epsilon))
    run("clean/at", at)
    run("uleo/at", at, banks["uleo"], "uleo")
    # MLP-crafted bank vs ResNet-18 and vs an MLP exploiter; CNN-crafted bank vs MLP
    mlp_model = dataclasses.replace(cfg.craft.source_model, arch="mlp")
    banks["uleo_mlp"] = bank_for("uleo_mlp", dataclasses.replace(cfg.craft, variant="uleo", source_model=mlp_model))
    mlp_std = exploiter_variant(std, arch="mlp")
    run("uleo_mlp/std", std, banks["uleo_mlp"], "uleo_mlp")
    run("clean/mlp", mlp_std)
    run("uleo_mlp/mlp", mlp_std, banks["uleo_mlp"], "uleo_mlp")
    run("uleo/mlp", mlp_std, banks["uleo"], "uleo")
    mix_rows = evaluation.mix_study(
        train_ds, test_ds, {"uleo": banks["uleo"], "uleo_grayaug": banks["uleo_grayaug"]},
        lambda g: dataclasses.replace(exploiter_variant(base, gray_mode=g, seed=seed),
                                      deterministic=cfg.deterministic),
        original_fraction=cfg.mix.original_fraction, added_fractions=tuple(cfg.mix.added_fractions), seed=seed)
    evaluation.write_rows_csv(out / "mix_study.csv", mix_rows)
    result["mix"] = mix_rows
    storage.atomic_write_text(out / "summary.json", json.dumps(result, indent=1, default=float))
    return result


def cmd_paper_suite(cfg: Optional[ExperimentConfig], args) -> int:
    if args.desk:
        if cfg is None:
            cfg = desk_config(args.output_dir or "runs/desk", seed=args.seed or 0)
        res = run_desk_suite(cfg)
        print(json.dumps(res["checks"], indent=1))
        return EXIT_OK
    if cfg is None:
        raise ConfigError("paper-suite without --desk needs --config (CIFAR-10 grid)")
    cifar_suite(cfg)
    return EXIT_OK


# ------------------------------------------------------------------ argparse

def parse_set(items):
    out = []
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        out.append((key.strip(), yaml.safe_load(value)))
    return out


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ulegray", description=__doc__.split("\n\n")[0])
    p.add_argument("-q", "--quiet", action="store_true", help="only warnings on stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required, help="YAML experiment config")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        sp.add_argument("--output-dir", help="config key output_dir")
        sp.add_argument("--seed", type=int, help="config key seeds (single seed) and craft.seed")
        sp.add_argument("--device", help="craft.device and exploiter.device")

    sp = sub.add_parser("craft", help="craft a perturbation bank")
    common(sp)
    sp.add_argument("--variant", choices=["uleo", "uleo_aug", "uleo_gray", "uleo_grayaug"])
    sp = sub.add_parser("train", help="train exploiter(s) on clean or poisoned data")
    common(sp)
    sp.add_argument("--bank", help="bank directory (config key bank)")
    sp.add_argument("--arch", help="exploiter.model.arch")
    sp.add_argument("--epochs", type=int, help="exploiter.epochs")
    sp.add_argument("--gray", action="store_true", help="add grayscale pre-filtering to the exploiter")
    sp = sub.add_parser("eval", help="clean and robust accuracy of a checkpoint")
    common(sp)
    sp.add_argument("--checkpoint", help="checkpoint directory (config key eval.checkpoint)")
    sp.add_argument("--bank", help="also report the perturbation profile of this bank")
    sp = sub.add_parser("matrix", help="defender x exploiter transferability table")
    common(sp)
    sp = sub.add_parser("mix-study", help="mixed clean/poisoned training deltas")
    common(sp)
    sp = sub.add_parser("report", help="merge run directories into tables and plots")
    sp.add_argument("runs", nargs="+", help="run directories")
    sp.add_argument("--output", default="report", help="report directory")
    sp = sub.add_parser("paper-suite", help="run the reproduction grid")
    common(sp, config_required=False)
    sp.add_argument("--desk", action="store_true", help="synthetic-3class + small_cnn variant (CPU)")
    return p


def _overrides(args) -> list:
    ov = parse_set(getattr(args, "set", None))
    if getattr(args, "output_dir", None):
        ov.append(("output_dir", args.output_dir))
    if getattr(args, "seed", None) is not None:
        ov += [("seeds", [args.seed]), ("craft.seed", args.seed)]
    if getattr(args, "device", None):
        ov += [("craft.device", args.device), ("exploiter.device", args.device)]
    if getattr(args, "variant", None):
        ov.append(("craft.variant", args.variant))
    if getattr(args, "bank", None):
        ov.append(("bank", args.bank))
    if getattr(args, "arch", None):
        ov.append(("exploiter.model.arch", args.arch))
    if getattr(args, "epochs", None):
        ov.append(("exploiter.epochs", args.epochs))
    if getattr(args, "checkpoint", None):
        ov.append(("eval.checkpoint", args.checkpoint))
    return ov


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        if args.command == "report":
            return cmd_report(args)
        cfg = load_config(args.config, _overrides(args)) if args.config else None
        if cfg is not None and getattr(args, "gray", False):
            cfg.exploiter = exploiter_variant(cfg.exploiter, gray_mode=True)
        handler = {"craft": cmd_craft, "train": cmd_train, "eval": cmd_eval, "matrix": cmd_matrix,
                   "mix-study": cmd_mix_study, "paper-suite": cmd_paper_suite}[args.command]
        return handler(cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MissingArtifactError, DatasetError) as exc:
        print(f"missing input: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except NotConverged as exc:
        print(f"not converged: {exc}", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (IntegrityError, SchemaVersionError, InvariantError) as exc:
        print(f"corrupt artifact: {exc}", file=sys.stderr)
        return EXIT_CORRUPT


if __name__ == "__main__":
    sys.exit(main())
