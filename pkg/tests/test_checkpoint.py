import numpy as np
import pytest

from conftest import random_batch, tiny_model
from dualnorm.checkpoint import (load_checkpoint, load_snapshot,
                                 save_checkpoint, save_snapshot)
from dualnorm.normcore import BranchTag, NormStats
from dualnorm.probe import stats_snapshot


@pytest.fixture
def trained_ish(rng):
    # float32 model with non-trivial stats so the round trip is meaningful
    m = tiny_model(mode="dual", dtype=np.float32, heads=2, seed=21)
    for _, st in m.named_norm_layers():
        for j, s in enumerate(st.stats):
            st.stats[j] = NormStats(
                rng.normal(0, 1, st.channels).astype(np.float32),
                rng.uniform(0.5, 2, st.channels).astype(np.float32),
                s.momentum)
    return m


def test_round_trip_logits_bitwise(trained_ish, rng, tmp_path):
    x, _ = random_batch(rng, n=4, dtype=np.float32)
    path = tmp_path / "m.ckpt"
    save_checkpoint(trained_ish, path, config={"k": 1}, epoch=3, seed=21)
    loaded, manifest = load_checkpoint(path)
    for branch in (BranchTag.CLEAN, BranchTag.ADV):
        a = trained_ish.forward(x, branch, train_mode=False)
        b = loaded.forward(x, branch, train_mode=False)
        assert a.tobytes() == b.tobytes()
    assert manifest["epoch"] == 3
    assert manifest["config"] == {"k": 1}


def test_manifest_layer_count(trained_ish, tmp_path):
    path = tmp_path / "m.ckpt"
    manifest = save_checkpoint(trained_ish, path)
    assert len(manifest["layer_names"]) == len(trained_ish.named_norm_layers())


def test_save_is_stable(trained_ish, tmp_path):
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(trained_ish, p1, config={"x": 2})
    m2, _ = load_checkpoint(p1)
    save_checkpoint(m2, p2, config={"x": 2})
    assert p1.read_bytes() == p2.read_bytes()


def test_corrupt_blob_byte_detected(trained_ish, tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(trained_ish, path)
    blob = bytearray(path.read_bytes())
    blob[-10] ^= 0xFF  # flip one payload byte
    path.write_bytes(bytes(blob))
    with pytest.raises(ValueError, match="checksum"):
        load_checkpoint(path)


def test_truncated_blob_detected(trained_ish, tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(trained_ish, path)
    data = path.read_bytes()
    path.write_bytes(data[:-20])
    with pytest.raises(ValueError, match="truncated|checksum"):
        load_checkpoint(path)


def test_bad_magic_and_version(trained_ish, tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(trained_ish, path)
    data = bytearray(path.read_bytes())
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"XXXXXXXX" + bytes(data[8:]))
    with pytest.raises(ValueError, match="magic"):
        load_checkpoint(bad)
    text = path.read_bytes()
    vpos = text.index(b'"version": 1')
    mutated = text.replace(b'"version": 1', b'"version": 9')
    bad2 = tmp_path / "bad2.ckpt"
    bad2.write_bytes(mutated)
    with pytest.raises(ValueError, match="version"):
        load_checkpoint(bad2)


def test_blobs_are_float32_little_endian(trained_ish, tmp_path):
    path = tmp_path / "m.ckpt"
    manifest = save_checkpoint(trained_ish, path)
    t0 = manifest["tensors"][0]
    assert t0["dtype"] == "<f4"
    assert t0["nbytes"] == 4 * int(np.prod(t0["shape"]))


def test_snapshot_round_trip(trained_ish, tmp_path):
    snap = stats_snapshot(trained_ish, BranchTag.ADV)
    path = tmp_path / "s.snap"
    save_snapshot(snap, path, config={"src": "test"})
    back = load_snapshot(path)
    assert back.ap_source == snap.ap_source
    assert back.layer_names == snap.layer_names
    for a, b in zip(snap.per_layer, back.per_layer):
        np.testing.assert_array_equal(a.mean, b.mean)
        np.testing.assert_array_equal(a.var, b.var)


def test_kind_mismatch(trained_ish, tmp_path):
    snap = stats_snapshot(trained_ish, BranchTag.ADV)
    path = tmp_path / "s.snap"
    save_snapshot(snap, path)
    with pytest.raises(ValueError, match="snapshot"):
        load_checkpoint(path)
