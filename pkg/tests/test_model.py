import math

import numpy as np
import pytest

from dpg.data import EmbeddingSet, Label, write_embeddings
from dpg.errors import DataError, FormatError, NumericError, VersionError
from dpg.model import (adapter_forward, anchor_similarities, head_forward, init_model,
                       load_anchor_file, load_checkpoint, predict, predict_batch,
                       renormalize_anchors, save_checkpoint)
from dpg.numerics import RngStream
from tests.conftest import randomized_state, unit_rows
from tests.test_data import _record


def _fresh(dim=8, seed=0):
    return init_model(dim, RngStream.from_seed(seed, "model-init"))


def test_identity_adapter_passes_input_through():
    state = _fresh()
    x = unit_rows(np.random.RandomState(0), 1, 8)[0]
    assert np.allclose(adapter_forward(state, x), x, atol=1e-12)


def test_adapter_scale_invariance():
    state = _fresh()
    x = unit_rows(np.random.RandomState(1), 1, 8)[0]
    base = adapter_forward(state, x)
    state.adapter_w = 2.0 * np.eye(8)
    assert np.allclose(adapter_forward(state, x), base, atol=1e-12)


def test_adapter_deterministic():
    state = randomized_state(8, seed=3)
    x = unit_rows(np.random.RandomState(2), 1, 8)[0]
    assert np.array_equal(adapter_forward(state, x), adapter_forward(state, x))


def test_adapter_zero_output_names_sample():
    state = _fresh()
    state.adapter_w = np.zeros((8, 8))
    with pytest.raises(NumericError, match="sample-7"):
        from dpg.model import adapter_forward_batch
        adapter_forward_batch(state, np.ones((1, 8)), ids=["sample-7"])


def test_head_zero_weights_is_uniform():
    state = _fresh()
    z = unit_rows(np.random.RandomState(3), 1, 8)[0]
    assert head_forward(state, z) == (0.5, 0.5)


def test_head_direct_value():
    state = _fresh()
    state.head_b = np.array([math.log(2.0), 0.0])
    p_real, p_fake = head_forward(state, unit_rows(np.random.RandomState(4), 1, 8)[0])
    assert abs(p_real - 2.0 / 3.0) < 1e-9
    assert abs(p_fake - 1.0 / 3.0) < 1e-9


def test_confidence_at_least_half():
    state = randomized_state(8, seed=5)
    x = unit_rows(np.random.RandomState(5), 50, 8)
    _, conf, _ = predict_batch(state, x)
    assert np.all(conf >= 0.5)


def test_anchor_similarity_examples():
    state = _fresh()
    s_r, s_f = anchor_similarities(state, state.anchor_real)
    assert abs(s_r - 1.0) < 1e-12
    assert abs(s_f) < 1e-12  # init anchors are orthogonal
    s_r, s_f = anchor_similarities(state, -state.anchor_fake)
    assert abs(s_f + 1.0) < 1e-12


def test_anchor_similarity_orthogonal_input():
    state = _fresh(dim=4)
    rs = np.random.RandomState(0)
    z = rs.randn(4)
    for a in (state.anchor_real, state.anchor_fake):
        z -= (z @ a) * a
    z /= np.linalg.norm(z)
    s_r, s_f = anchor_similarities(state, z)
    assert abs(s_r) < 1e-9 and abs(s_f) < 1e-9


def test_predict_examples():
    state = _fresh()
    z = unit_rows(np.random.RandomState(6), 1, 8)[0]
    state.head_b = np.array([math.log(9.0), 0.0])  # p_real = 0.9
    p = predict(state, z)
    assert p.label == Label.REAL and abs(p.confidence - 0.9) < 1e-9
    state.head_b = np.zeros(2)
    assert predict(state, z).label == Label.FAKE  # exact tie goes to fake


def test_predict_monotone_invariance():
    state = randomized_state(8, seed=7)
    x = unit_rows(np.random.RandomState(7), 20, 8)
    labels1, _, _ = predict_batch(state, x)
    state.head_w = 3.0 * state.head_w
    state.head_b = 3.0 * state.head_b
    labels2, _, _ = predict_batch(state, x)
    assert np.array_equal(labels1, labels2)


def test_anchors_stay_unit_after_renormalize():
    state = randomized_state(8, seed=8)
    state.anchor_real = state.anchor_real * 3.0
    renormalize_anchors(state)
    assert abs(np.linalg.norm(state.anchor_real) - 1.0) <= 1e-12


def test_checkpoint_roundtrip(tmp_path):
    state = randomized_state(8, seed=9)
    state.epoch = 17
    state.phase = "joint"
    stream = RngStream.from_seed(9, "train")
    for _ in range(100):
        stream.next_u64()
    path = tmp_path / "ck.dpgc"
    save_checkpoint(state, path, "confighash", stream)
    loaded, config_hash, rng = load_checkpoint(path)
    assert config_hash == "confighash"
    assert loaded.epoch == 17 and loaded.phase == "joint"
    assert rng.state() == stream.state() and rng.draws == stream.draws
    x = unit_rows(np.random.RandomState(10), 100, 8)
    a = predict_batch(state, x)
    b = predict_batch(loaded, x)
    for u, v in zip(a, b):
        assert np.array_equal(u, v)
    for name, adam in state.adam.items():
        assert np.array_equal(adam.m, loaded.adam[name].m)
        assert np.array_equal(adam.v, loaded.adam[name].v)
        assert adam.t == loaded.adam[name].t


def test_checkpoint_corruption_detected(tmp_path):
    state = randomized_state(8, seed=11)
    path = tmp_path / "ck.dpgc"
    save_checkpoint(state, path, "h", RngStream.from_seed(0))
    raw = bytearray(path.read_bytes())
    raw[2] ^= 0x55
    path.write_bytes(bytes(raw))
    with pytest.raises((FormatError, VersionError)):
        load_checkpoint(path)
    raw2 = path.read_bytes()
    (tmp_path / "short.dpgc").write_bytes(raw2[: len(raw2) // 2])
    with pytest.raises((FormatError, VersionError)):
        load_checkpoint(tmp_path / "short.dpgc")


def test_checkpoint_version_mismatch(tmp_path):
    state = randomized_state(8, seed=12)
    path = tmp_path / "ck.dpgc"
    save_checkpoint(state, path, "h", RngStream.from_seed(0))
    raw = bytearray(path.read_bytes())
    raw[4] = 99
    path.write_bytes(bytes(raw))
    with pytest.raises(VersionError):
        load_checkpoint(path)


def test_checkpoint_no_tmp_left_behind(tmp_path):
    state = randomized_state(8, seed=13)
    save_checkpoint(state, tmp_path / "ck.dpgc", "h", RngStream.from_seed(0))
    assert sorted(p.name for p in tmp_path.iterdir()) == ["ck.dpgc"]


def test_anchor_file_loading(tmp_path):
    rs = np.random.RandomState(14)
    recs = [_record("a", dim=8, tag="anchor_real", vec=rs.randn(8)),
            _record("b", dim=8, tag="anchor_fake", vec=rs.randn(8))]
    path = tmp_path / "anchors.dpge"
    write_embeddings(EmbeddingSet(8, recs), path)
    a_r, a_f = load_anchor_file(path, 8)
    state = init_model(8, RngStream.from_seed(0, "model-init"), anchors=(a_r, a_f))
    assert np.allclose(state.anchor_real, recs[0].feature, atol=1e-6)
    with pytest.raises(DataError):
        load_anchor_file(path, 16)
    bad = tmp_path / "bad.dpge"
    write_embeddings(EmbeddingSet(8, [recs[0]]), bad)
    with pytest.raises(DataError):
        load_anchor_file(bad, 8)
