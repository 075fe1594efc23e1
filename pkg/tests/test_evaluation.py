import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from ulegray import evaluation
from ulegray.crafting import PerturbationBank
from ulegray.data import ImageDataset
from ulegray.errors import ConfigError
from ulegray.evaluation import AttackSpec
from ulegray.exploiter import ExploiterSpec, train
from ulegray.mitigations import TransformStack, gray
from ulegray.models import ModelSpec, build

from conftest import make_ds

EPS = 8 / 255
TINY_MODEL = ModelSpec("small_cnn", class_count=3, input_shape=(16, 16, 3), cnn_width=(8, 16))


class ConstantModel(torch.nn.Module):
    def __init__(self, c):
        super().__init__()
        self.w = torch.nn.Parameter(torch.zeros(1))
        self.c = c

    def forward(self, x):
        out = torch.zeros(x.shape[0], self.c) + self.w
        out[:, 0] += 1.0
        return out


@pytest.fixture(scope="module")
def trained():
    train_ds, test_ds = make_ds(60, 16, 0), make_ds(30, 16, 1, "test")
    model, _ = train(train_ds, ExploiterSpec(model=TINY_MODEL, epochs=3, batch_size=16, lr=0.05), test_ds)
    return model, test_ds


def test_attack_spec_defaults_and_validation():
    a = AttackSpec()
    assert a.steps == 20 and a.step_size == pytest.approx(EPS / 8) and a.random_start and a.name == "pgd20"
    assert AttackSpec("fgsm").name == "fgsm"
    with pytest.raises(ConfigError):
        AttackSpec("cw")
    with pytest.raises(ConfigError):
        AttackSpec("pgd", steps=0)
    with pytest.raises(ConfigError):
        AttackSpec("pgd", step_size=2 * EPS)


def test_constant_model_accuracy_is_class_share():
    n = 50
    ds = ImageDataset(np.zeros((n, 2, 2, 3), np.float32), np.arange(n) % 10, np.arange(n), "test", 10)
    assert evaluation.clean_accuracy(ConstantModel(10), ds) == pytest.approx(0.10)


def test_clean_accuracy_repeatable(trained):
    model, test = trained
    assert evaluation.clean_accuracy(model, test) == evaluation.clean_accuracy(model, test)


def test_zero_budget_attack_equals_clean(trained):
    model, test = trained
    clean = evaluation.clean_accuracy(model, test)
    assert evaluation.robust_accuracy(model, test, AttackSpec("pgd", epsilon=0.0, steps=3)) == clean
    assert evaluation.robust_accuracy(model, test, AttackSpec("fgsm", epsilon=0.0)) == clean


def test_fgsm_equals_one_step_pgd_bit_exact(trained):
    model, test = trained
    x = torch.from_numpy(test.images[:16])
    y = torch.from_numpy(test.labels[:16])
    a = evaluation.fgsm(model, x, y, EPS)
    b = evaluation.pgd(model, x, y, EPS, steps=1, step_size=EPS, random_start=False)
    assert torch.equal(a, b)


def test_pgd_stays_in_ball_and_is_monotone_in_steps(trained):
    model, test = trained
    x = torch.from_numpy(test.images)
    y = torch.from_numpy(test.labels)
    adv = evaluation.pgd(model, x, y, EPS, 20, EPS / 8, True, torch.Generator().manual_seed(0))
    assert (adv - x).abs().max() <= EPS + 1e-6 and adv.min() >= 0 and adv.max() <= 1
    accs = [evaluation.robust_accuracy(model, test, AttackSpec("pgd", steps=k, random_start=False))
            for k in (1, 5, 20)]
    assert accs[0] >= accs[1] >= accs[2]
    assert accs[-1] <= evaluation.clean_accuracy(model, test)


def test_profile_examples():
    n = 3
    gray_delta = np.repeat(np.random.default_rng(0).uniform(-EPS, EPS, (n, 4, 4, 1)), 3, -1)
    p = evaluation.perturbation_profile(PerturbationBank(np.arange(n), gray_delta, EPS, True))
    assert p.channel_dispersion == 0.0 and p.spatial_energy > 0
    const = np.broadcast_to(np.array([EPS, 0.0, -EPS], np.float32), (n, 4, 4, 3)).copy()
    p = evaluation.perturbation_profile(PerturbationBank(np.arange(n), const, EPS))
    assert p.spatial_energy == 0.0 and p.channel_dispersion > 0
    assert p.linf == pytest.approx(EPS)
    assert p.l2 == pytest.approx(np.sqrt(2 * 16) * EPS, rel=1e-6)
    with pytest.raises(ValueError):
        evaluation.perturbation_profile(PerturbationBank(np.arange(0), np.zeros((0, 4, 4, 3)), EPS))


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=20)
def test_profile_order_invariant(seed):
    rng = np.random.default_rng(seed)
    d = rng.uniform(-EPS, EPS, (6, 5, 5, 3)).astype(np.float32)
    perm = rng.permutation(6)
    a = evaluation.perturbation_profile(PerturbationBank(np.arange(6), d, EPS))
    b = evaluation.perturbation_profile(PerturbationBank(np.arange(6)[perm], d[perm], EPS))
    for k in ("channel_dispersion", "spatial_energy", "linf", "l2"):
        assert getattr(a, k) == pytest.approx(getattr(b, k), rel=1e-12)


def _spec_for(arch="small_cnn", g=False):
    extra = [gray()] if g else []
    return ExploiterSpec(model=TINY_MODEL, train_transforms=TransformStack.standard(*extra), epochs=1,
                         batch_size=16, lr=0.05)


def test_transfer_matrix_shape_and_errors():
    train_ds, test_ds = make_ds(36, 16, 0), make_ds(12, 16, 1, "test")
    zero = PerturbationBank.zeros(train_ds)
    banks = {"a": zero, "b": zero}
    arr, cells = evaluation.transfer_matrix(banks, train_ds, test_ds, _spec_for, ["x", "y"])
    assert arr.shape == (2, 2, 2) and len(cells) == 8
    assert not np.isnan(arr).any()
    mixed = {"a": zero, "b": PerturbationBank.zeros(train_ds, epsilon=16 / 255)}
    with pytest.raises(ValueError, match="epsilon"):
        evaluation.transfer_matrix(mixed, train_ds, test_ds, _spec_for, ["x"])
    partial = PerturbationBank(train_ds.sample_ids[:10], np.zeros((10, 16, 16, 3), np.float32), EPS)
    with pytest.raises(ValueError, match="missing"):
        evaluation.transfer_matrix({"a": partial}, train_ds, test_ds, _spec_for, ["x"])


def test_mix_study_layout():
    train_ds, test_ds = make_ds(120, 16, 0), make_ds(12, 16, 1, "test")
    zero = PerturbationBank.zeros(train_ds)
    rows = evaluation.mix_study(train_ds, test_ds, {"uleo": zero, "grayaug": zero}, lambda g: _spec_for(g=g),
                                original_fraction=0.1, added_fractions=(0.1, 0.3))
    assert len(rows) == 6
    deltas = [r for r in rows if r["add"] is not None]
    assert len(deltas) == 4 and all("uleo" in r and "grayaug" in r for r in deltas)
    # zero banks are identical to clean data, so deltas vanish
    assert all(r["uleo"] == 0.0 for r in deltas)


def test_learning_curves_outputs(tmp_path, trained):
    from ulegray.exploiter import RunRecord
    recs = [RunRecord(spec={}, test_acc=[0.1, 0.5, 0.7], label="clean"),
            RunRecord(spec={}, test_acc=[0.3, 0.3], label="uleo")]
    series = evaluation.learning_curves(recs, out_dir=tmp_path)
    assert [len(v) for v in series.values()] == [3, 2]
    assert (tmp_path / "learning_curves.png").stat().st_size > 0
    lines = (tmp_path / "learning_curves.csv").read_text().splitlines()
    assert lines[0] == "epoch,clean,uleo" and lines[3].endswith(",")
