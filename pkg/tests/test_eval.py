import csv
import io
import shutil

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lidog.bev import BevProjectionConfig
from lidog.core import DEFAULT_VOCAB, IGNORE, PointCloud, save_scan
from lidog.errors import ValidationError
from lidog.eval import (
    ConfusionMatrix,
    ExperimentSpec,
    accumulate,
    evaluate,
    iou,
    miou,
    per_class_iou,
    run_experiment,
    split_train_val,
    write_report,
)
from lidog.net.checkpoint import loads
from lidog.net.model import ModelConfig, zero_params
from lidog.synth import ROAD, TERRAIN, VEHICLE
from lidog.train import TrainConfig, prepare_sample

from conftest import small_scans
from oracles import confusion, iou_from_points


def cm_of(rows):
    return ConfusionMatrix(np.array(rows, dtype=np.int64))


def test_hand_matrix():
    cm = cm_of([[3, 1], [1, 3]])
    assert iou(cm, 0) == 60.0 and iou(cm, 1) == 60.0
    assert miou(cm) == 60.0


def test_perfect_absent_and_single_class():
    assert per_class_iou(cm_of([[2, 0, 0], [0, 0, 0], [0, 0, 5]])) == [100.0, None, 100.0]
    assert miou(cm_of([[2, 0, 0], [0, 0, 0], [0, 0, 5]])) == 100.0
    single = cm_of([[4, 0], [0, 0]])
    assert miou(single) == iou(single, 0) == 100.0
    assert miou(ConfusionMatrix.empty(3)) is None


def test_accumulate_examples():
    cm = accumulate(ConfusionMatrix.empty(3), [0, 1, 2], [0, 1, 2])
    assert np.trace(cm.counts) == 3
    assert accumulate(cm, [1, 2], [IGNORE, IGNORE]).counts.tolist() == cm.counts.tolist()
    with pytest.raises(ValidationError):
        accumulate(cm, [3], [0])
    with pytest.raises(ValidationError):
        accumulate(cm, [0, 1], [0])


labels = st.lists(st.tuples(st.integers(0, 3), st.integers(-1, 3)), max_size=60)


@settings(max_examples=50, deadline=None)
@given(labels, st.randoms(use_true_random=False))
def test_accumulate_matches_recount_and_is_order_free(pairs, rnd):
    pred = [p for p, _ in pairs]
    gt = [g for _, g in pairs]
    cm = accumulate(ConfusionMatrix.empty(4), pred, gt)
    assert np.array_equal(cm.counts, confusion(pred, gt, 4))
    for c in range(4):
        got, ref = iou(cm, c), iou_from_points(pred, gt, c)
        assert (got is None) == (ref is None)
        if ref is not None:
            assert got == pytest.approx(ref)
    shuffled = list(pairs)
    rnd.shuffle(shuffled)
    cm2 = accumulate(ConfusionMatrix.empty(4), [p for p, _ in shuffled], [g for _, g in shuffled])
    assert np.array_equal(cm.counts, cm2.counts)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 20), min_size=9, max_size=9), st.integers(2, 50))
def test_miou_scale_invariant(vals, s):
    cm = cm_of(np.array(vals).reshape(3, 3))
    m = miou(cm)
    scaled = miou(cm_of(cm.counts * s))
    assert (m is None and scaled is None) or scaled == pytest.approx(m, abs=1e-12)


def test_split_is_last_fifth():
    tr, va = split_train_val(list(range(10)))
    assert tr == list(range(8)) and va == [8, 9]
    assert split_train_val([], 0.2) == ([], [])


def test_constant_road_model_on_ten_points():
    # 10 points spread over separate voxels: 4 road, 3 terrain, 2 vehicle, 1 ignored
    gt = np.array([ROAD] * 4 + [TERRAIN] * 3 + [VEHICLE] * 2 + [IGNORE])
    xyz = np.stack([np.arange(10) * 2.0, np.zeros(10), np.zeros(10)], axis=1)
    cloud = PointCloud(xyz, np.full(10, 0.5), gt)
    cfg = ModelConfig(widths=(4, 6), use_bev=False)
    params = zero_params(cfg)
    params.weights["head3d.bias"][ROAD] = 1.0
    cm = evaluate(params, cfg, [prepare_sample(cloud, 1.0, cfg.n_levels)])
    # prediction column is all road: IoU_road = 4 / (4 + 5), the others score 0
    assert iou(cm, ROAD) == pytest.approx(100 * 4 / 9)
    assert iou(cm, TERRAIN) == 0.0 and iou(cm, VEHICLE) == 0.0
    assert miou(cm) == pytest.approx((100 * 4 / 9) / 3)


def write_domain(path, clouds):
    (path / "scans").mkdir(parents=True)
    for i, c in enumerate(clouds):
        save_scan(c, path / "scans" / f"{i:06d}.ldg")
    return str(path)


@pytest.fixture(scope="module")
def domains(tmp_path_factory):
    root = tmp_path_factory.mktemp("dom")
    a = write_domain(root / "A", small_scans(5, base=0))
    b = write_domain(root / "B", small_scans(5, base=100))
    return root, a, b


MODEL = ModelConfig(widths=(4, 6), bev_channels=(4, 4))
BEV = BevProjectionConfig(b_x=15, b_z=15, width=24, height=24)


def tiny_spec(sources, targets, epochs=1, variants=("lidog", "no_bev")):
    return ExperimentSpec(
        sources, targets, MODEL, TrainConfig(epochs=epochs, batch_size=2, voxel_size=1.0), BEV, variants=variants
    )


def test_overlap_rejected(domains):
    root, a, b = domains
    with pytest.raises(ValidationError, match="overlap"):
        ExperimentSpec([a], [a])
    with pytest.raises(ValidationError):
        ExperimentSpec([a], [str(root / "A" / ".")])


def test_report_shape_and_csv(domains, tmp_path):
    _, a, b = domains
    rep = run_experiment(tiny_spec([a], [b]))
    assert len(rep.summary) == 2 * (1 + 1)
    assert len(rep.rows) == len(rep.summary) * len(DEFAULT_VOCAB)
    path = write_report(rep, tmp_path)
    text = open(path).read()
    head, summary = text.split("\n\n")
    assert head.splitlines()[0] == "variant,split,class,iou"
    assert summary.splitlines()[0] == "variant,split,miou"
    parsed = list(csv.DictReader(io.StringIO(summary)))
    assert {(r["variant"], r["split"]) for r in parsed} == {
        (v, s) for v in ("lidog", "no_bev") for s in ("source_val", "target:B")
    }
    assert "lidog-no_bev" in (tmp_path / "report.txt").read_text()


def test_variants_share_step_zero_three_d_weights(domains):
    _, a, b = domains
    rep = run_experiment(tiny_spec([a], [b], epochs=0))
    full, _ = loads(rep.checkpoints["lidog"])
    plain, _ = loads(rep.checkpoints["no_bev"])
    names = list(plain.weights)
    assert list(full.weights)[: len(names)] == names
    prefix = lambda p: b"".join(p.weights[n].tobytes() for n in names)
    assert prefix(full) == prefix(plain)


def test_swapping_identical_domains_swaps_roles(domains, tmp_path):
    _, a, _ = domains
    twin = shutil.copytree(a, tmp_path / "T")
    ab = run_experiment(tiny_spec([a], [str(twin)]))
    ba = run_experiment(tiny_spec([str(twin)], [a]))
    assert ab.summary == [
        {**r, "split": {"target:A": "target:T"}.get(r["split"], r["split"])} for r in ba.summary
    ]


def test_multi_source_and_double_head(domains, tmp_path):
    root, a, b = domains
    c = write_domain(tmp_path / "C", small_scans(3, base=200))
    rep = run_experiment(tiny_spec([a, c], [b], variants=("lidog", "no_bev", "double_head")))
    assert len(rep.summary) == 3 * 2
    assert rep.miou("double_head", "target:B") is not None
