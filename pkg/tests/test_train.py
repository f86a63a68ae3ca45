import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lidog.bev import BevProjectionConfig
from lidog.core import IGNORE
from lidog.errors import ValidationError
from lidog.net.checkpoint import dumps
from lidog.net.model import ModelConfig, backward, forward_batch, init_params
from lidog.train import (
    Adam,
    TrainConfig,
    _epoch_batches,
    dice_loss,
    pack,
    prepare_sample,
    softmax_dice,
    total_loss,
    train,
    write_loss_log,
)

from oracles import dice as dice_oracle

MODEL = ModelConfig(widths=(4, 6), bev_channels=(4, 4))
BEV = BevProjectionConfig(b_x=15, b_z=15, width=24, height=24)


def test_dice_perfect_disjoint_and_hand_value():
    t = np.zeros(10, dtype=int)
    assert dice_loss(np.eye(3)[t], t, 3).loss < 1e-8
    assert dice_loss(np.eye(3)[t], t, 3).loss == pytest.approx(1e-7 / (20 + 1e-7), rel=1e-6)
    assert dice_loss(np.tile([1.0, 0.0], (10, 1)), np.ones(10, int), 2).loss > 1 - 1e-6
    half = np.full((2, 2), 0.5)
    expected = 1 - 2 * 0.5 / (1 + 1 + 1e-7)
    assert dice_loss(half, [0, 1], 2).loss == pytest.approx(expected, abs=1e-15)
    assert dice_loss(half, [0, 1], 2).loss == pytest.approx(0.5, abs=1e-7)


def test_dice_skips_all_ignore():
    res = dice_loss(np.full((3, 2), 0.5), [IGNORE] * 3, 2)
    assert res.loss == 0.0 and res.skipped


simplex_rows = st.integers(1, 12).flatmap(
    lambda n: st.tuples(
        st.lists(st.lists(st.floats(0.01, 1), min_size=3, max_size=3), min_size=n, max_size=n),
        st.lists(st.integers(-1, 2), min_size=n, max_size=n),
    )
)


@settings(max_examples=100, deadline=None)
@given(simplex_rows)
def test_dice_range_oracle_and_permutation(data):
    raw, targets = data
    p = np.array(raw)
    p /= p.sum(axis=1, keepdims=True)
    res = dice_loss(p, targets, 3)
    assert 0.0 <= res.loss <= 1.0
    assert res.loss == pytest.approx(dice_oracle(p, targets, 3), abs=1e-12)
    perm = np.random.default_rng(len(targets)).permutation(len(targets))
    assert dice_loss(p[perm], np.array(targets)[perm], 3).loss == pytest.approx(res.loss, abs=1e-12)


def test_total_loss_is_exact_mean():
    rng = np.random.default_rng(0)
    res = total_loss(rng.normal(size=(8, 3)), rng.integers(0, 3, 8), rng.normal(size=(4, 4, 3)), rng.integers(0, 3, (4, 4)))
    assert res.total == 0.5 * res.l3d + 0.5 * res.lbev
    assert 0.5 * (0.4 + 0.6) == 0.5


def test_all_ignore_bev_halves_the_3d_loss():
    rng = np.random.default_rng(1)
    res = total_loss(rng.normal(size=(8, 3)), rng.integers(0, 3, 8), rng.normal(size=(4, 4, 3)), np.full((4, 4), IGNORE))
    assert res.total == 0.5 * res.l3d
    assert not res.grad_bev.any()


def test_total_gradient_is_half_sum_of_branch_gradients(scans):
    s = prepare_sample(scans[0], 1.0, MODEL.n_levels)
    batch, bev_labels = pack([s], MODEL, BEV)
    params = init_params(MODEL, 0)
    res = forward_batch(params, batch, MODEL)
    _, _, g3 = softmax_dice(res.logits3d, s.labels, 7)
    _, _, gb = softmax_dice(res.logits_bev[0], bev_labels[0], 7)
    both = backward(res.tape, 0.5 * g3, 0.5 * gb[None])
    res3 = forward_batch(params, batch, MODEL)
    only3 = backward(res3.tape, g3, np.zeros_like(res3.logits_bev))
    resb = forward_batch(params, batch, MODEL)
    onlyb = backward(resb.tape, np.zeros_like(g3), gb[None])
    for k in params.weights:
        a = both.get(k, 0.0)
        b = 0.5 * (only3.get(k, 0.0) + onlyb.get(k, 0.0))
        assert np.allclose(a, b, rtol=1e-10, atol=1e-14)


def test_adam_first_step_moves_by_lr():
    w = {"a": np.array([1.0, -1.0])}
    Adam(lr=0.01).step(w, {"a": np.array([3.0, -0.2])})
    assert np.allclose(w["a"], [0.99, -0.99])


def test_config_validation():
    with pytest.raises(ValidationError):
        TrainConfig(learning_rate=-1)
    with pytest.raises(ValidationError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValidationError):
        TrainConfig(augmentation="cutout")


def test_round_robin_batches():
    batches = _epoch_batches([5, 2], 2, np.random.default_rng(0))
    assert [d for d, _ in batches] == [0, 1, 0, 0]
    assert sorted(i for d, idx in batches if d == 0 for i in idx) == list(range(5))


def test_zero_lr_keeps_weights(scans):
    cfg = TrainConfig(learning_rate=0.0, epochs=1, batch_size=1, voxel_size=1.0)
    out = train(MODEL, [scans[:1]], cfg, BEV)
    init = init_params(MODEL, 0)
    assert all(np.array_equal(out.params.weights[k], init.weights[k]) for k in init.weights)


def test_same_seed_bit_identical(scans):
    cfg = TrainConfig(epochs=2, batch_size=2, voxel_size=1.0, seed=3)
    a = train(MODEL, [scans[:3]], cfg, BEV)
    b = train(MODEL, [scans[:3]], cfg, BEV)
    assert dumps(a.params, MODEL) == dumps(b.params, MODEL)
    c = train(MODEL, [scans[:3]], TrainConfig(epochs=2, batch_size=2, voxel_size=1.0, seed=4), BEV)
    assert dumps(c.params, MODEL) != dumps(a.params, MODEL)


def test_no_labeled_scans():
    with pytest.raises(ValidationError):
        train(MODEL, [[]], TrainConfig())


@pytest.mark.parametrize("aug", ["standard", "mix3d", "pointcutmix"])
def test_augmented_training_runs(scans, aug):
    cfg = TrainConfig(epochs=1, batch_size=2, voxel_size=1.0, augmentation=aug)
    out = train(MODEL, [scans[:2], scans[2:4]], cfg, BEV)
    assert len(out.log) == 2 and np.isfinite([r["ltot"] for r in out.log]).all()


def test_single_scan_loss_settles(scans):
    cfg = TrainConfig(epochs=40, batch_size=1, voxel_size=1.0)
    tail = np.array(train(MODEL, [scans[:1]], cfg, BEV).epoch_losses()[5:])
    assert np.all(np.diff(tail) <= 0.0)


def test_loss_log_csv(tmp_path, scans):
    cfg = TrainConfig(epochs=1, batch_size=2, voxel_size=1.0)
    out = train(MODEL, [scans[:4]], cfg, BEV, log_path=tmp_path / "loss.csv")
    rows = list(csv.reader(open(tmp_path / "loss.csv")))
    assert rows[0] == ["epoch", "step", "l3d", "lbev", "ltot"]
    assert len(rows) == 1 + len(out.log)
    write_loss_log(out.log, tmp_path / "again.csv")
    assert (tmp_path / "again.csv").read_bytes() == (tmp_path / "loss.csv").read_bytes()
