import json

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from ulegray import storage
from ulegray.crafting import PerturbationBank
from ulegray.errors import IntegrityError, InvariantError, MissingArtifactError, SchemaVersionError
from ulegray.exploiter import RunRecord
from ulegray.models import ModelSpec, build

EPS = 8 / 255


def make_bank(n=5, gray=False, seed=0, size=6):
    rng = np.random.default_rng(seed)
    shape = (n, size, size, 1 if gray else 3)
    delta = rng.uniform(-EPS, EPS, shape).astype(np.float32)
    if gray:
        delta = np.repeat(delta, 3, axis=-1)
    ids = rng.permutation(np.arange(100, 100 + n))
    return PerturbationBank(ids, delta, EPS, gray, "uleo_gray" if gray else "uleo", {"rounds": 3, "converged": True})


@given(arrays(np.float32, st.lists(st.integers(0, 4), min_size=0, max_size=4).map(tuple),
              elements=st.floats(-1e6, 1e6, width=32)))
def test_tensor_encoding_round_trip(arr):
    back = storage.decode_tensor(storage.encode_tensor(arr))
    assert back.dtype == np.float32 and back.shape == arr.shape
    assert np.array_equal(back.view(np.uint32), arr.copy().view(np.uint32))


def test_tensor_header_layout():
    raw = storage.encode_tensor(np.zeros((2, 3), np.float32))
    assert raw[:4] == b"ULET"
    assert raw[4:6] == (1).to_bytes(2, "little") and raw[6] == 0 and raw[7] == 2
    assert int.from_bytes(raw[8:16], "little") == 2 and int.from_bytes(raw[16:24], "little") == 3
    assert len(raw) == 24 + 6 * 4


def test_tensor_bad_magic_and_version():
    raw = bytearray(storage.encode_tensor(np.zeros(3, np.float32)))
    with pytest.raises(IntegrityError):
        storage.decode_tensor(b"XXXX" + bytes(raw[4:]))
    raw[4] = 9
    with pytest.raises(SchemaVersionError):
        storage.decode_tensor(bytes(raw))


@pytest.mark.parametrize("compress", [False, True])
@pytest.mark.parametrize("gray", [False, True])
def test_bank_round_trip_bit_exact(tmp_path, compress, gray):
    bank = make_bank(gray=gray)
    h = storage.save_bank(tmp_path / "b", bank, compress=compress)
    back = storage.load_bank(tmp_path / "b")
    assert h == bank.content_hash() == back.content_hash()
    for sid in bank.sample_ids:
        assert np.array_equal(back.for_sample(sid), bank.for_sample(sid))
    assert back.gray_constrained == gray and back.epsilon == bank.epsilon
    assert back.crafting_meta["rounds"] == 3


def test_bank_hash_independent_of_order():
    bank = make_bank()
    order = np.argsort(bank.sample_ids)
    sorted_bank = PerturbationBank(bank.sample_ids[order], bank.delta[order], EPS)
    assert sorted_bank.content_hash() == bank.content_hash()


def test_tampered_bank_is_rejected(tmp_path):
    storage.save_bank(tmp_path / "b", make_bank())
    path = tmp_path / "b" / "delta.bin"
    raw = bytearray(path.read_bytes())
    raw[-7] ^= 0x01
    path.write_bytes(bytes(raw))
    with pytest.raises(IntegrityError):
        storage.load_bank(tmp_path / "b")


def test_gray_violation_detected_on_load(tmp_path):
    bank = make_bank(gray=True)
    storage.save_bank(tmp_path / "b", bank)
    # rewrite the tensor with one off-gray pixel and a matching hash
    delta = bank.delta[np.argsort(bank.sample_ids)].copy()
    delta[0, 0, 0, 1] = delta[0, 0, 0, 0] / 2
    h = storage.write_tensor(tmp_path / "b" / "delta.bin", delta)
    manifest = json.loads((tmp_path / "b" / "manifest.json").read_text())
    manifest["content_hash"] = h
    (tmp_path / "b" / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(InvariantError, match="gray"):
        storage.load_bank(tmp_path / "b")


def test_unknown_schema_version(tmp_path):
    storage.save_bank(tmp_path / "b", make_bank())
    mpath = tmp_path / "b" / "manifest.json"
    manifest = json.loads(mpath.read_text())
    manifest["schema_version"] = 99
    mpath.write_text(json.dumps(manifest))
    with pytest.raises(SchemaVersionError):
        storage.load_bank(tmp_path / "b")


def test_missing_bank(tmp_path):
    with pytest.raises(MissingArtifactError, match="manifest.json"):
        storage.load_bank(tmp_path / "nowhere")


def test_checkpoint_round_trip(tmp_path):
    spec = ModelSpec("small_cnn", class_count=3, init_seed=3)
    model = build(spec, input_filters=[("bdr", 4), ("grayscale",)])
    storage.save_checkpoint(tmp_path / "c", model, epoch=7, metrics={"acc": 0.5})
    back, meta = storage.load_checkpoint(tmp_path / "c")
    assert meta["epoch"] == 7 and meta["arch"] == "small_cnn"
    assert back.input_filters == model.input_filters
    for (k1, a), (k2, b) in zip(model.state_dict().items(), back.state_dict().items()):
        assert k1 == k2 and torch.equal(a, b)
    x = torch.rand(2, 32, 32, 3)
    assert torch.equal(model.eval()(x), back.eval()(x))


def test_checkpoint_tamper(tmp_path):
    storage.save_checkpoint(tmp_path / "c", build(ModelSpec("mlp", class_count=3, mlp_hidden=(8,))))
    p = tmp_path / "c" / "params.bin"
    raw = bytearray(p.read_bytes())
    raw[-1] ^= 0xFF
    p.write_bytes(bytes(raw))
    with pytest.raises(IntegrityError):
        storage.load_checkpoint(tmp_path / "c")


def test_record_round_trip_and_csv(tmp_path):
    rec = RunRecord(spec={"epochs": 2}, train_loss=[1.0, 0.5], train_acc=[0.4, 0.6], test_acc=[0.3, 0.7],
                    final_test_acc=0.7, epochs_run=2, best_epoch=2, seed=1, label="x",
                    robust_acc={"pgd20": 0.2})
    storage.save_record(tmp_path / "r", rec)
    back = storage.load_record(tmp_path / "r")
    assert back == rec
    lines = (tmp_path / "r" / "epochs.csv").read_text().splitlines()
    assert lines[0] == "epoch,train_loss,train_acc,test_acc,val_acc" and len(lines) == 3
    rpath = tmp_path / "r" / "record.json"
    rpath.write_text(rpath.read_text().replace("0.7", "0.9", 1))
    with pytest.raises(IntegrityError):
        storage.load_record(tmp_path / "r")


def test_atomic_write_leaves_no_temp_files(tmp_path):
    storage.atomic_write_text(tmp_path / "a" / "f.txt", "hello")
    assert [p.name for p in (tmp_path / "a").iterdir()] == ["f.txt"]
