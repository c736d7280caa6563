import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lastadv.net import (
    Checkpoint,
    CheckpointMismatchError,
    CheckpointVersionError,
    NetworkSpec,
    ParamVector,
    TruncatedBlobError,
    init_params,
    load_checkpoint,
    param_layout,
    predict_logits,
    save_checkpoint,
)


def test_init_is_deterministic():
    spec = NetworkSpec(6, (5, 4), 3)
    a, b = init_params(spec, 7), init_params(spec, 7)
    assert a.values.tobytes() == b.values.tobytes()
    assert init_params(spec, 8).values.tobytes() != a.values.tobytes()


def test_biases_start_at_zero():
    params = init_params(NetworkSpec(6, (5, 4), 3), 0).unflatten()
    for name, t in params.items():
        if name.startswith("b"):
            assert not t.any()


def test_weight_std_matches_fan_in():
    w = init_params(NetworkSpec(1000, (1000,), 2), 1).unflatten()["W0"]
    assert abs(w.std() / np.sqrt(2 / 1000) - 1) < 0.05


def test_layout_is_contiguous():
    spec = NetworkSpec(4, (3,), 2)
    layout = param_layout(spec)
    assert [s.name for s in layout] == ["W0", "b0", "W1", "b1"]
    assert [s.offset for s in layout] == [0, 12, 15, 21]
    with pytest.raises(ValueError):
        ParamVector(np.zeros(22), layout)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 6), st.lists(st.integers(1, 5), max_size=3), st.integers(2, 5), st.integers(0, 2**31))
def test_flatten_unflatten_bijection(d, hidden, c, seed):
    params = init_params(NetworkSpec(d, tuple(hidden), c), seed)
    params = params.with_values(np.random.default_rng(seed).normal(size=len(params)))
    tensors = params.unflatten()
    again = ParamVector.flatten(tensors, params.layout)
    assert again.values.tobytes() == params.values.tobytes()
    for name, t in again.unflatten().items():
        np.testing.assert_array_equal(t, tensors[name])


def test_zero_network_gives_zero_logits():
    spec = NetworkSpec(5, (4,), 3)
    params = init_params(spec, 0)
    params = params.with_values(np.zeros(len(params)))
    out = predict_logits(spec, params, np.random.default_rng(0).normal(size=(3, 5)))
    np.testing.assert_array_equal(out, np.zeros((3, 3)))


def test_batch_independence_and_permutation_equivariance():
    spec = NetworkSpec(5, (8,), 3)
    params = init_params(spec, 2)
    x = np.random.default_rng(1).uniform(size=(4, 5))
    full = predict_logits(spec, params, x)
    for r in range(4):
        np.testing.assert_allclose(predict_logits(spec, params, x[r:r + 1])[0], full[r], rtol=1e-12, atol=1e-12)
    perm = np.array([2, 0, 3, 1])
    np.testing.assert_allclose(predict_logits(spec, params, x[perm]), full[perm], rtol=1e-12, atol=1e-12)


def test_hand_set_2_2_2_network():
    spec = NetworkSpec(2, (2,), 2)
    params = ParamVector.flatten({
        "W0": np.array([[1.0, -1.0], [2.0, 0.5]]), "b0": np.array([0.0, 1.0]),
        "W1": np.array([[1.0, 2.0], [-1.0, 3.0]]), "b1": np.array([0.5, -0.5]),
    }, param_layout(spec))
    out = predict_logits(spec, params, np.array([[1.0, 1.0], [-2.0, 0.5]]))
    # row 0: pre = (3, 0.5) -> h = (3, 0.5); logits = (3 - 0.5 + 0.5, 6 + 1.5 - 0.5)
    # row 1: pre = (-1, 3.25) -> h = (0, 3.25); logits = (-3.25 + 0.5, 9.75 - 0.5)
    np.testing.assert_allclose(out, [[3.0, 7.0], [-2.75, 9.25]], rtol=1e-15)


def test_dimension_mismatch_rejected():
    spec = NetworkSpec(3, (), 2)
    with pytest.raises(ValueError):
        predict_logits(spec, init_params(spec, 0), np.zeros((2, 4)))


def test_checkpoint_round_trip(tmp_path):
    spec = NetworkSpec(7, (5,), 3)
    ckpt = Checkpoint(spec, init_params(spec, 3), {"gamma": "0.8", "mode": "LAST", "seed": "3"})
    path = tmp_path / "a.ckpt"
    save_checkpoint(path, ckpt)
    back = load_checkpoint(path)
    assert back.spec == spec
    assert back.params.values.tobytes() == ckpt.params.values.tobytes()
    assert back.metadata == {"gamma": "0.8", "mode": "LAST", "seed": "3"}
    save_checkpoint(tmp_path / "b.ckpt", back)
    assert (tmp_path / "b.ckpt").read_bytes() == path.read_bytes()


def test_checkpoint_header_layout(tmp_path):
    spec = NetworkSpec(2, (), 2)
    save_checkpoint(tmp_path / "c", Checkpoint(spec, init_params(spec, 0)))
    raw = (tmp_path / "c").read_bytes()
    assert raw[:8] == b"LASTCKPT" and raw[8] == 1
    hlen = int.from_bytes(raw[9:13], "little")
    assert len(raw) == 13 + hlen + 6 * 8


def test_checkpoint_f32_round_trip(tmp_path):
    spec = NetworkSpec(3, (2,), 2)
    save_checkpoint(tmp_path / "f", Checkpoint(spec, init_params(spec, 0), dtype="f32"))
    first = (tmp_path / "f").read_bytes()
    save_checkpoint(tmp_path / "g", load_checkpoint(tmp_path / "f"))
    assert (tmp_path / "g").read_bytes() == first


def test_truncated_blob(tmp_path):
    spec = NetworkSpec(3, (2,), 2)
    path = tmp_path / "t"
    save_checkpoint(path, Checkpoint(spec, init_params(spec, 0)))
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(TruncatedBlobError):
        load_checkpoint(path)


def test_version_mismatch(tmp_path):
    spec = NetworkSpec(3, (2,), 2)
    path = tmp_path / "v"
    save_checkpoint(path, Checkpoint(spec, init_params(spec, 0)))
    raw = bytearray(path.read_bytes())
    raw[8] = 9
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(path)


def test_count_mismatch(tmp_path):
    spec = NetworkSpec(3, (2,), 2)
    path = tmp_path / "m"
    save_checkpoint(path, Checkpoint(spec, init_params(spec, 0)))
    raw = path.read_bytes()
    hlen = int.from_bytes(raw[9:13], "little")
    header = raw[13:13 + hlen].replace(b'"count": 14', b'"count": 15')
    path.write_bytes(raw[:9] + len(header).to_bytes(4, "little") + header + raw[13 + hlen:])
    with pytest.raises(CheckpointMismatchError):
        load_checkpoint(path)


def test_spec_validation():
    with pytest.raises(ValueError):
        NetworkSpec(3, (0,), 2)
    with pytest.raises(ValueError):
        NetworkSpec(3, (), 1)
