from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from konvlina.config import RunConfig
from konvlina.core import check_gradients, make_rng, ops
from konvlina.core.io import load_checkpoint
from konvlina.core.tensor import NumericalError
from konvlina.toy.ablation import REFERENCE_AP, run_ablation
from konvlina.toy.metrics import Detection, evaluate_ap, interpolated_ap
from konvlina.toy.model import STRIDES, Detector, build_targets, decode, detection_loss
from konvlina.toy.scene import (
    MAX_BOXES,
    SIZE_BANDS,
    Box,
    flip_scene,
    generate_scene,
    make_dataset,
    size_band,
)
from konvlina.toy.train import METRIC_COLUMNS, train

from oracles import brute_force_ap, fixtures

# ---------------------------------------------------------------- scenes


def test_scene_is_deterministic():
    a = generate_scene(make_rng(42))
    b = generate_scene(make_rng(42))
    assert a.image.tobytes() == b.image.tobytes() and a.boxes == b.boxes
    assert generate_scene(make_rng(43)).image.tobytes() != a.image.tobytes()


@pytest.fixture(scope="module")
def thousand_scenes():
    return make_dataset(0, "bands", 1000)


def test_scene_invariants(thousand_scenes):
    for s in thousand_scenes:
        assert s.image.shape == (3, 64, 64) and 0.0 <= s.image.min() and s.image.max() <= 1.0
        assert 1 <= len(s.boxes) <= MAX_BOXES
        for b in s.boxes:
            x0, y0, x1, y1 = b.xyxy
            assert 0 <= x0 and 0 <= y0 and x1 <= 64 and y1 <= 64
            lo, hi = SIZE_BANDS[size_band(b.w, b.h)]
            assert lo <= b.w <= hi and lo <= b.h <= hi


def test_size_band_frequencies(thousand_scenes):
    bands = np.bincount([size_band(b.w, b.h) for s in thousand_scenes for b in s.boxes], minlength=3)
    freq = bands / bands.sum()
    assert np.all(np.abs(freq - 1 / 3) <= 0.05), freq


@pytest.mark.parametrize("h,v", [(True, False), (False, True), (True, True)])
def test_flip_keeps_boxes_valid_and_on_their_pixels(h, v):
    for seed in range(20):
        scene = generate_scene(make_rng(seed, "flip"))
        flipped = flip_scene(scene, h, v)
        for orig, b in zip(scene.boxes, flipped.boxes):
            x0, y0, x1, y1 = b.xyxy
            assert 0 <= x0 and 0 <= y0 and x1 <= 64 and y1 <= 64
            assert (b.w, b.h, b.cls) == (orig.w, orig.h, orig.cls)
            ox0, oy0, ox1, oy1 = (int(round(c)) for c in orig.xyxy)
            patch = scene.image[:, oy0:oy1, ox0:ox1]
            if h:
                patch = patch[:, :, ::-1]
            if v:
                patch = patch[:, ::-1, :]
            fx0, fy0, fx1, fy1 = (int(round(c)) for c in b.xyxy)
            np.testing.assert_array_equal(flipped.image[:, fy0:fy1, fx0:fx1], patch)
        assert flip_scene(flipped, h, v).image.tobytes() == scene.image.tobytes()


# ---------------------------------------------------------------- metrics oracle

def test_metric_perfect_detector():
    truths = [[Box(10, 10, 8, 8, 0), Box(40, 30, 20, 16, 1)], [Box(5, 50, 4, 5, 2)]]
    preds = [[Detection(b.cx, b.cy, b.w, b.h, b.cls, 1.0) for b in ts] for ts in truths]
    r = evaluate_ap(preds, truths)
    assert (r.AP, r.AR, r.AP_S, r.AP_M, r.AP_L) == (1.0, 1.0, 1.0, 1.0, 1.0)


def test_metric_no_predictions():
    r = evaluate_ap([[]], [[Box(10, 10, 8, 8, 0)]])
    assert (r.AP, r.AR) == (0.0, 0.0)


def test_metric_two_truths_one_hit_then_false_positive():
    truths = [[Box(10, 10, 8, 8, 0), Box(40, 40, 8, 8, 0)]]
    preds = [[Detection(10.5, 10, 8, 8, 0, 0.9), Detection(20, 50, 8, 8, 0, 0.8)]]
    r = evaluate_ap(preds, truths)
    ap, ar = brute_force_ap(preds, truths, 0.5)
    assert ap == Fraction(1, 2) and r.AP == 0.5 and r.AR == 0.5 == ar


def test_metric_size_buckets():
    truths = [[Box(10, 10, 4, 4, 0), Box(40, 40, 20, 20, 0)]]
    preds = [[Detection(10, 10, 4, 4, 0, 0.9)]]
    r = evaluate_ap(preds, truths)
    assert (r.AP_S, r.AP_M, r.AP_L) == (1.0, 0.0, 0.0)
    # A detection matching an out-of-bucket truth neither helps nor hurts.
    r = evaluate_ap([[Detection(40, 40, 20, 20, 0, 0.9), Detection(10, 10, 4, 4, 0, 0.5)]], truths)
    assert r.AP_S == 1.0 and r.AP_L == 1.0


def test_interpolated_ap_hand_case():
    # TP, FP, TP with 3 truths: envelope 1 on [0, 1/3], 2/3 on (1/3, 2/3].
    assert interpolated_ap([True, False, True], 3) == pytest.approx(1 / 3 + 2 / 9, abs=1e-15)


def test_detection_validation():
    with pytest.raises(ValueError):
        Detection(0, 0, 1, 1, 0, 1.5)
    with pytest.raises(ValueError):
        Detection(float("nan"), 0, 1, 1, 0, 0.5)


@settings(max_examples=300, deadline=None)
@given(fixtures(), st.sampled_from([0.3, 0.5, 0.7]))
def test_metric_matches_brute_force(fx, thr):
    preds, truths = fx
    ap, ar = brute_force_ap(preds, truths, thr)
    r = evaluate_ap(preds, truths, thr)
    assert r.AP == pytest.approx(float(ap), abs=1e-12)
    assert r.AR == pytest.approx(float(ar), abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(fixtures())
def test_metric_ranges_and_threshold_monotone(fx):
    preds, truths = fx
    aps = []
    for thr in (0.1, 0.3, 0.5, 0.7, 0.9):
        r = evaluate_ap(preds, truths, thr)
        for v in (r.AP, r.AR, r.AP_S, r.AP_M, r.AP_L):
            assert 0.0 <= v <= 1.0
        aps.append(r.AP)
    assert all(a >= b - 1e-12 for a, b in zip(aps, aps[1:])), aps


def test_metric_sweep_bounded_by_headline():
    truths = [[Box(20, 20, 10, 10, 0)]]
    preds = [[Detection(21, 20, 10, 10, 0, 0.9)]]
    assert evaluate_ap(preds, truths, sweep=True).AP < evaluate_ap(preds, truths).AP == 1.0


# ---------------------------------------------------------------- model plumbing

def test_targets_round_trip_through_decode():
    scenes = make_dataset(3, "targets", 6)
    targets = build_targets(scenes, 4)
    outputs = []
    for t in targets:
        obj = np.where(t["obj"] > 0, 20.0, -20.0)
        cls = np.where(t["cls"] > 0, 20.0, 0.0)
        outputs.append(np.concatenate([obj, t["box"], cls], axis=1))
    preds = decode(outputs)
    # Two boxes on one level's centre cell keep only the later one.
    kept = []
    for s in scenes:
        cells = {}
        for b in s.boxes:
            lvl = size_band(b.w, b.h)
            cells[(lvl, int(b.cy // STRIDES[lvl]), int(b.cx // STRIDES[lvl]))] = b
        kept.append(list(cells.values()))
    assert sum(map(len, kept)) < sum(len(s.boxes) for s in scenes)
    r = evaluate_ap(preds, kept, iou_threshold=0.99)
    assert r.AP == pytest.approx(1.0) and r.AR == pytest.approx(1.0)


def test_head_channel_contract():
    cfg = RunConfig()
    for mode in ("nearest", "enau", "enau+ckspp"):
        det = Detector(cfg.neck_config(mode), num_classes=3)
        outs = det(np.zeros((2, 3, 64, 64)))
        assert [o.shape for o in outs] == [(2, 8, 64 // s, 64 // s) for s in STRIDES]


def test_detector_head_and_loss_gradients():
    cfg = RunConfig(neck={"c_out": 4, "c_red": 4, "scales": (1, 2)},
                    attention={"heads": 2, "head_dim": 2, "landmarks": 2, "registers": 2, "max_len": 64,
                               "pinv_iterations": 6, "pinv_warn_tol": 1.0},
                    model={"image_size": 32, "widths": (2, 2, 2, 2), "num_classes": 2})
    det = Detector(cfg.neck_config("enau+ckspp"), cfg.model.widths, 2, seed=1)
    scenes = make_dataset(1, "grad", 2, size=32, num_classes=2)
    images = np.stack([s.image for s in scenes])
    targets = build_targets(scenes, 2)
    params = det.head.parameters()
    errs = check_gradients(lambda: detection_loss(det(images), targets), params)
    assert max(errs) < 1e-4


# ---------------------------------------------------------------- training

def tiny(seed=7, **over):
    base = {"seed": seed, "train.epochs": 1, "train.train_scenes": 8, "train.val_scenes": 4}
    base.update(over)
    return RunConfig().with_overrides(**base)


def test_train_smoke_and_metrics_rows(tmp_path):
    res = train(tiny(), tmp_path)
    assert [r["split"] for r in res.rows] == ["train", "val"]
    lines = (tmp_path / "metrics.csv").read_text().splitlines()
    assert lines[0].split(",") == list(METRIC_COLUMNS) and len(lines) == 3
    assert (tmp_path / "config.yaml").exists() and (tmp_path / "checkpoint.kvlc").exists()


def test_train_is_bit_deterministic(tmp_path):
    cfg = tiny(**{"train.epochs": 2})
    train(cfg, tmp_path / "a")
    train(cfg, tmp_path / "b")
    for name in ("metrics.csv", "checkpoint.kvlc", "config.yaml"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
    other = tiny(seed=8, **{"train.epochs": 2})
    train(other, tmp_path / "c")
    assert (tmp_path / "c" / "checkpoint.kvlc").read_bytes() != (tmp_path / "a" / "checkpoint.kvlc").read_bytes()


def test_checkpoint_reloads_into_fresh_model(tmp_path):
    cfg = tiny()
    res = train(cfg, tmp_path)
    fresh = Detector(cfg.neck_config(), cfg.model.widths, cfg.model.num_classes, seed=99)
    fresh.load_state_dict(load_checkpoint(tmp_path / "checkpoint.kvlc"))
    x = make_dataset(0, "reload", 2)[0].image[None]
    for a, b in zip(fresh(x), res.model(x)):
        np.testing.assert_array_equal(a.data, b.data)


def test_loss_decreases_by_epoch_20():
    res = train(tiny(0, **{"train.epochs": 20, "train.train_scenes": 32, "train.mode": "enau+ckspp"}))
    losses = [r["loss"] for r in res.rows if r["split"] == "train"]
    assert losses[19] < losses[0]


def test_registers_receive_gradient_during_training():
    res = train(tiny(**{"train.epochs": 3}))
    assert len(res.register_grad) == 3 and all(g > 0 for g in res.register_grad)


def test_nonfinite_loss_aborts_with_diagnostics(tmp_path, monkeypatch):
    import konvlina.toy.train as tr

    real = tr.detection_loss
    monkeypatch.setattr(tr, "detection_loss", lambda o, t: ops.mul(real(o, t), float("nan")))
    with pytest.raises(NumericalError, match="diagnostics written"):
        train(tiny(**{"train.mode": "nearest"}), tmp_path)
    assert (tmp_path / "diagnostics" / "param_norms.json").exists()
    assert "images" in load_checkpoint(tmp_path / "diagnostics" / "last_batch.kvlc")


def test_ablation_table_contract(tmp_path):
    res = run_ablation(tiny(**{"train.epochs": 1, "train.train_scenes": 4, "train.val_scenes": 2}),
                       seeds=(0, 1, 2), out_dir=tmp_path)
    assert [r.mode for r in res.rows] == ["nearest", "enau", "enau+ckspp"]
    header = (tmp_path / "ablation.csv").read_text().splitlines()[0]
    assert header == "mode,AP_mean,AP_std,AR_mean,AR_std,params,seeds"
    assert "reference ordering held" in res.table()
    with pytest.raises(ValueError):
        run_ablation(tiny(), seeds=(0, 1))


def test_reference_ordering_values():
    assert REFERENCE_AP["nearest"] < REFERENCE_AP["enau"] < REFERENCE_AP["enau+ckspp"]
    assert (REFERENCE_AP["nearest"], REFERENCE_AP["enau"], REFERENCE_AP["enau+ckspp"]) == (0.359, 0.365, 0.415)
