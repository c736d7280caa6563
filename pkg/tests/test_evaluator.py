import json

import numpy as np
import pytest

from lastadv.attack import pgd
from lastadv.autograd import per_example_ce
from lastadv.data import Dataset, synth_blobs
from lastadv.evaluator import (
    clean_sample_loss,
    grid_coefficients,
    input_gradient_map,
    landscape_grid,
    mixup_dataset,
    robust_accuracy,
    robust_evaluation,
    sample_at,
    standard_accuracy,
    transfer_matrix,
)
from lastadv.net import NetworkSpec, ParamVector, init_params, param_layout, predict_logits

SPEC = NetworkSpec(8, (12,), 3)
DATA = synth_blobs(3, 15, 8, 0.6, 0, split="test")


def test_standard_accuracy_oracle():
    params = init_params(SPEC, 1)
    pred = predict_logits(SPEC, params, DATA.inputs).argmax(1)
    assert standard_accuracy(SPEC, params, DATA, batch_size=7) == 100.0 * (pred == DATA.labels).mean()


def test_ties_go_to_lowest_index():
    spec = NetworkSpec(2, (), 3)
    params = init_params(spec, 0)
    params = params.with_values(np.zeros(len(params)))
    ds = Dataset(np.zeros((2, 2)), np.array([0, 1]), 3)
    assert standard_accuracy(spec, params, ds) == 50.0


def test_zero_epsilon_robust_equals_standard():
    params = init_params(SPEC, 2)
    assert robust_accuracy(SPEC, params, DATA, pgd(0.0, 3, 2)) == standard_accuracy(SPEC, params, DATA)


def test_robust_not_above_standard():
    params = init_params(SPEC, 3)
    assert robust_accuracy(SPEC, params, DATA, pgd(0.1, 5)) <= standard_accuracy(SPEC, params, DATA)


def test_more_restarts_never_raise_ra():
    params = init_params(SPEC, 4)
    values = [robust_accuracy(SPEC, params, DATA, pgd(0.15, 3, r), seed=5) for r in (1, 2, 4, 8)]
    assert all(a >= b for a, b in zip(values, values[1:]))


def test_workers_do_not_change_results():
    params = init_params(SPEC, 4)
    a = robust_evaluation(SPEC, params, DATA, pgd(0.1, 3, 2), seed=1, batch_size=8, workers=1)
    b = robust_evaluation(SPEC, params, DATA, pgd(0.1, 3, 2), seed=1, batch_size=8, workers=4)
    assert a.accuracy == b.accuracy and a.loss == b.loss


def test_empty_dataset_rejected():
    with pytest.raises(ValueError):
        standard_accuracy(SPEC, init_params(SPEC, 0), Dataset(np.zeros((0, 8)), np.zeros(0), 3))


def test_transfer_diagonal_equals_white_box():
    models = [("a", SPEC, init_params(SPEC, 5)), ("b", SPEC, init_params(SPEC, 6))]
    attack = pgd(0.1, 4, 2)
    tm = transfer_matrix(models, DATA, attack, seed=3, batch_size=16)
    for k, (_, spec, params) in enumerate(models):
        assert tm.ra[k, k] == robust_accuracy(spec, params, DATA, attack, seed=3, batch_size=16)
    assert tm.ra.shape == (2, 2)


def test_transfer_standard_row_and_csv(tmp_path):
    models = [("a", SPEC, init_params(SPEC, 5))]
    tm = transfer_matrix(models, DATA, pgd(0.1, 2), 0, standard=("std", SPEC, init_params(SPEC, 9)))
    assert tm.ra.shape == (2, 1) and tm.sources == ["a", "std"]
    tm.to_csv(tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "source,a" and len(lines) == 3


def test_transfer_shape_mismatch():
    with pytest.raises(ValueError):
        transfer_matrix([("a", NetworkSpec(5, (), 3), init_params(NetworkSpec(5, (), 3), 0))], DATA, pgd(0.1, 1))


def test_grid_coefficients():
    assert grid_coefficients(0.25, 1).tolist() == [0.0]
    xs = grid_coefficients(0.5, 21)
    assert xs[10] == 0.0 and xs[0] == -0.5 and xs[-1] == 0.5


def test_landscape_matches_straight_line_and_exports(tmp_path):
    params = init_params(SPEC, 7)
    u, label = sample_at(DATA, 4)
    grid = landscape_grid(SPEC, params, (u, label), extent=0.3, resolution=5, seed=2, sample_id=4)
    for i, x in enumerate(grid.xs):
        for j, y in enumerate(grid.ys):
            probe = (u + x * grid.iota + y * grid.o)[None, :]
            ref = per_example_ce(predict_logits(SPEC, params, probe), np.array([label]))[0]
            assert grid.losses[i, j] == pytest.approx(ref, rel=1e-12)
    assert grid.losses[2, 2] == clean_sample_loss(SPEC, params, (u, label))
    assert grid.gap == grid.losses.max() - grid.losses.min()
    assert set(np.unique(grid.o)) <= {-1.0, 1.0}
    grid.write(tmp_path / "l.csv", tmp_path / "l.json")
    rows = (tmp_path / "l.csv").read_text().splitlines()
    assert rows[0] == "x,y,loss" and len(rows) == 26
    meta = json.loads((tmp_path / "l.json").read_text())
    assert meta["seed"] == 2 and meta["sample"] == 4


def test_landscape_direction_seed_changes_o():
    params = init_params(SPEC, 7)
    sample = sample_at(DATA, 0)
    a = landscape_grid(SPEC, params, sample, resolution=1, seed=1)
    b = landscape_grid(SPEC, params, sample, resolution=1, seed=2)
    assert not np.array_equal(a.o, b.o)
    assert a.losses.shape == (1, 1)


def test_gradient_map_normalized():
    params = init_params(SPEC, 8)
    u, label = sample_at(DATA, 1)
    m = input_gradient_map(SPEC, params, u, label, channels=2)
    assert m.shape == (2, 4)
    for channel in m:
        assert channel.min() == 0.0 and channel.max() == 1.0


def test_gradient_map_flat_channel_is_zero():
    # zero first-layer weights on inputs 0-3 make the first channel's gradient vanish
    spec = NetworkSpec(8, (), 3)
    w = np.random.default_rng(0).normal(size=(8, 3))
    w[:4] = 0.0
    params = ParamVector.flatten({"W0": w, "b0": np.zeros(3)}, param_layout(spec))
    m = input_gradient_map(spec, params, DATA.inputs[0], int(DATA.labels[0]), channels=2)
    assert not m[0].any() and m[1].max() == 1.0


def test_sample_index_out_of_range():
    with pytest.raises(IndexError):
        sample_at(DATA, len(DATA))


def test_mixup_dataset_is_seeded():
    a, b = mixup_dataset(DATA, 3), mixup_dataset(DATA, 3)
    np.testing.assert_array_equal(a.inputs, b.inputs)
    np.testing.assert_array_equal(a.labels, DATA.labels)
