import json

import numpy as np
import pytest

from autodiff.tensor import Parameter, Tensor, backward
from core.config import DEFAULT_ANCHORS, RunConfig, TrainSection
from core.errors import ConfigurationError, NumericError, TrainingDivergedError
from data.synth import synth_dataset
from detection.anchors import generate_anchors
from model.heads import RawLevelPrediction, SemanticMap
from model.network import build_dasnet
from training import trainer
from training.checkpoint import (
    TrainingState,
    load_checkpoint,
    load_training_state,
    save_checkpoint,
)
from training.gradcheck_suite import model_check
from training.losses import (
    focal_loss,
    regression_and_mask_losses,
    sigmoid_focal_loss,
    smooth_l1,
    softmax_cross_entropy,
    total_loss,
)
from training.optim import Adam, learning_rate
from training.targets import assign_targets, collate_targets, mask_target

INPUT = (416, 416)


@pytest.fixture
def anchors():
    return generate_anchors(DEFAULT_ANCHORS)


def test_exact_anchor_match_encodes_zero_offsets(make_image, anchors):
    # (96, 96) is the second P4 anchor; cell (4, 4) of P4 is centred at (72, 72)
    image = make_image(INPUT, [(24, 24, 96, 96)])
    targets = assign_targets(image, anchors, INPUT)
    p4 = targets.levels[1]
    assert p4.objectness[0, 1, 4, 4] == 1.0
    np.testing.assert_allclose(p4.box[0, 1, :, 4, 4], 0.0, atol=1e-6)
    assert targets.num_positive == 1
    assert targets.assigned == [(0, "P4", (4, 4), 3)]


def test_empty_annotation_has_no_positives(make_image, anchors):
    image = make_image(INPUT, [], branch_rows=(10, 20))
    targets = assign_targets(image, anchors, INPUT)
    assert targets.num_positive == 0
    for level in targets.levels:
        assert not level.objectness.any()
        assert len(level.mask_cells) == 0
    assert targets.semantic.shape == (1, 416, 416)
    assert targets.semantic[0, 15].all()


def test_thirty_pixel_box_goes_to_smallest_anchor(make_image, anchors):
    image = make_image(INPUT, [(100, 100, 30, 30)])
    targets = assign_targets(image, anchors, INPUT)
    _, level, cell, anchor_index = targets.assigned[0]
    assert (level, anchor_index) == ("P3", 0)
    assert cell == (14, 14)
    # (40, 40) overlaps the GT shape by 0.5625 > 0.5, so it is ignored, not negative
    assert targets.levels[0].ignore[0, 1, 14, 14]
    assert not targets.levels[0].ignore[0, 0, 14, 14]


def test_tiny_boxes_are_skipped(make_image, anchors, caplog):
    image = make_image(INPUT, [(5, 5, 1, 4)])
    targets = assign_targets(image, anchors, INPUT)
    assert targets.num_positive == 0
    assert "skipping instance 0" in caplog.text


def test_shared_cell_falls_back_to_next_anchor(make_image, anchors):
    image = make_image(INPUT, [(100, 100, 30, 30), (100, 100, 30, 30)])
    targets = assign_targets(image, anchors, INPUT)
    p3 = targets.levels[0]
    assert p3.objectness[0, 0, 14, 14] == 1.0
    assert p3.objectness[0, 1, 14, 14] == 1.0
    assert not p3.ignore[0, 1, 14, 14]
    assert len(p3.mask_cells) == 1


def test_mask_target_resamples_box_crop(make_image):
    image = make_image((64, 64), [(8, 4, 20, 10)])
    target = mask_target(image.instances[0])
    assert target.shape == (32, 32)
    assert target.all()


def test_collate_offsets_batch_index(make_image, anchors):
    a = assign_targets(make_image(INPUT, [(24, 24, 96, 96)]), anchors, INPUT)
    b = assign_targets(make_image(INPUT, [(24, 24, 96, 96)]), anchors, INPUT)
    batch = collate_targets([a, b])
    p4 = batch.levels[1]
    assert p4.objectness.shape == (2, 2, 26, 26)
    assert p4.mask_cells.tolist() == [[0, 4, 4], [1, 4, 4]]
    assert batch.semantic.shape == (2, 416, 416)
    assert batch.num_positive == 2


def test_focal_loss_values():
    assert float(focal_loss(0.5, alpha=1.0, gamma=0.0)) == pytest.approx(0.693147, abs=1e-6)
    assert float(focal_loss(0.9, alpha=0.25, gamma=2.0)) == pytest.approx(2.634e-4, rel=1e-3)
    assert float(focal_loss(1.0 - 1e-9)) < 1e-10
    easy, hard = focal_loss(np.array([0.95, 0.6]))
    assert easy < hard


def test_focal_reduces_to_cross_entropy(rng):
    p = rng.uniform(1e-3, 1.0 - 1e-3, 1000)
    np.testing.assert_allclose(focal_loss(p, alpha=1.0, gamma=0.0), -np.log(p), rtol=1e-12)
    assert (focal_loss(p, alpha=1.0, gamma=2.0) <= -np.log(p)).all()
    ordered = focal_loss(np.sort(p), alpha=0.25, gamma=2.0)
    assert (np.diff(ordered) < 0).all()


def test_sigmoid_focal_without_focusing_is_weighted_bce(rng):
    logits = rng.standard_normal((1, 4, 3, 3))
    targets = (rng.random((1, 4, 3, 3)) < 0.5).astype(np.float64)
    out = sigmoid_focal_loss(Tensor(logits), targets, np.ones_like(logits), 0.5, 0.0, 1.0)
    p = 1.0 / (1.0 + np.exp(-logits))
    bce = -(targets * np.log(p) + (1 - targets) * np.log(1 - p))
    assert out.item() == pytest.approx(0.5 * bce.sum(), rel=1e-9)


def test_cross_entropy_uniform_is_ln2(rng):
    labels = rng.integers(0, 2, (2, 4, 4))
    out = softmax_cross_entropy(Tensor(np.zeros((2, 2, 4, 4))), labels)
    assert out.item() == pytest.approx(np.log(2.0))
    confident = np.where(labels[:, None] == np.arange(2)[None, :, None, None], 30.0, -30.0)
    assert softmax_cross_entropy(Tensor(confident), labels).item() < 1e-12


def test_cross_entropy_rejects_bad_labels():
    with pytest.raises(ConfigurationError):
        softmax_cross_entropy(Tensor(np.zeros((1, 2, 2, 2))), np.full((1, 2, 2), 2))
    with pytest.raises(ConfigurationError):
        softmax_cross_entropy(Tensor(np.zeros((1, 2, 2, 2))), np.zeros((1, 3, 3)))


def test_smooth_l1_regions():
    pred = Parameter(np.array([0.5, 3.0]))
    out = smooth_l1(pred, np.zeros(2), np.ones(2), normalizer=2.0)
    assert out.item() == pytest.approx((0.125 + 2.5) / 2.0)
    backward(out)
    np.testing.assert_allclose(pred.grad, [0.25, 0.5])


def _raw_levels(model_cfg, n=1):
    levels = []
    for size in (8, 4, 2):
        levels.append(
            RawLevelPrediction(
                cls=Parameter(np.zeros((n, 4, size, size))),
                box=Parameter(np.zeros((n, 8, size, size))),
                mask_feat=Parameter(np.zeros((n, model_cfg.fpn.fpn_channels, size, size))),
            )
        )
    return levels


def test_no_positives_give_exact_zero_box_and_mask(make_image, small_model_cfg):
    model = build_dasnet(small_model_cfg)
    anchors = generate_anchors(small_model_cfg.anchors)
    targets = assign_targets(make_image((64, 64), []), anchors, (64, 64))
    semantic = SemanticMap(logits=Parameter(np.zeros((1, 2, 64, 64))))
    box, mask, sem = regression_and_mask_losses(
        _raw_levels(small_model_cfg), model.mask_decoders, semantic, targets
    )
    assert box.item() == 0.0
    assert mask.item() == 0.0
    assert sem.item() == pytest.approx(np.log(2.0))


def test_total_loss_is_weighted_sum(make_image, small_model_cfg):
    model = build_dasnet(small_model_cfg)
    anchors = generate_anchors(small_model_cfg.anchors)
    image = make_image((64, 64), [(10, 10, 14, 14), (30, 20, 20, 24)], branch_rows=(50, 56))
    targets = assign_targets(image, anchors, (64, 64))
    semantic = SemanticMap(logits=Parameter(np.zeros((1, 2, 64, 64))))
    cfg = TrainSection(loss_weights={"focal": 1.0, "box": 2.0, "mask": 0.5, "semantic": 0.0})
    losses = total_loss(_raw_levels(small_model_cfg), model.mask_decoders, semantic, targets, cfg)
    parts = losses.as_floats()
    assert parts["box"] > 0.0
    assert parts["mask"] > 0.0
    expected = parts["focal"] + 2.0 * parts["box"] + 0.5 * parts["mask"]
    assert parts["total"] == pytest.approx(expected, rel=1e-9)


def test_adam_zero_gradient_leaves_parameters():
    p = Parameter(np.array([1.0, -2.0], np.float32))
    opt = Adam([p], lr=0.1)
    assert opt.step([np.zeros(2, np.float32)])
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_adam_first_step_moves_by_lr():
    p = Parameter(np.array([1.0, 1.0], np.float32))
    opt = Adam([p], lr=0.01)
    opt.step([np.array([3.0, -0.2], np.float32)])
    np.testing.assert_allclose(p.data, [0.99, 1.01], atol=1e-6)
    assert opt.state.step == 1


def test_adam_aborts_on_non_finite_gradient():
    p = Parameter(np.ones(3, np.float32))
    opt = Adam([p], lr=0.01)
    assert not opt.step([np.array([0.1, np.nan, 0.2], np.float32)])
    np.testing.assert_array_equal(p.data, 1.0)
    assert opt.state.step == 0
    assert opt.state.aborted_steps == [1]
    with pytest.raises(ConfigurationError):
        opt.step([np.ones(2, np.float32)])


def test_loss_falls_over_first_adam_steps(small_model_cfg, small_synth_cfg):
    cfg = RunConfig(model=small_model_cfg)
    model = build_dasnet(small_model_cfg)
    anchors = generate_anchors(small_model_cfg.anchors)
    images = synth_dataset(4, 2, small_synth_cfg)
    opt = Adam(model.parameters(), lr=0.002)
    totals = []
    for _ in range(6):
        totals.append(trainer.training_step(model, anchors, images, cfg).total.item())
        assert opt.step()
    assert all(later < earlier for earlier, later in zip(totals, totals[1:]))


def test_learning_rate_schedule():
    assert learning_rate(0.01, 0.9, 0) == pytest.approx(0.01)
    assert learning_rate(0.01, 0.9, 2) == pytest.approx(0.0081)
    opt = Adam([Parameter(np.ones(1))], lr=0.01, decay=0.9)
    assert opt.set_epoch(2) == pytest.approx(0.0081)


def test_checkpoint_round_trip(tmp_path, small_model_cfg):
    model = build_dasnet(small_model_cfg, seed=4)
    state = TrainingState(epoch=3, lr=0.00729, seed=4, step=12, val_f1=0.5)
    path = save_checkpoint(model, state, tmp_path / "ckpt" / "best.dsv2")
    restored, restored_state = load_checkpoint(small_model_cfg, path)
    assert restored_state == state
    for (_, a), (_, b) in zip(model.named_parameters(), restored.named_parameters()):
        np.testing.assert_array_equal(a.data, b.data)
    with pytest.raises(ConfigurationError):
        load_training_state(tmp_path / "nothing.dsv2")


def _tiny_run(small_model_cfg, small_synth_cfg, **train):
    settings = {"epochs": 1, "batch_size": 2, "seed": 5, **train}
    return RunConfig(model=small_model_cfg, train=settings, synth=small_synth_cfg)


def test_fit_with_zero_lr_keeps_weights(tmp_path, small_model_cfg, small_synth_cfg):
    cfg = _tiny_run(small_model_cfg, small_synth_cfg, lr=0.0)
    images = synth_dataset(1, 1, small_synth_cfg)
    model = build_dasnet(cfg.model)
    before = {k: p.data.copy() for k, p in model.named_parameters()}
    report = trainer.fit(images, [], model, cfg, tmp_path)
    for k, p in model.named_parameters():
        np.testing.assert_array_equal(p.data, before[k])
    assert report.epochs[0].lr == 0.0
    assert (tmp_path / "last.dsv2").is_file()
    assert (tmp_path / "best.dsv2").is_file()
    saved = json.loads((tmp_path / "training_report.json").read_text())
    assert saved["parameter_count"] == model.parameter_count()
    assert saved["weight_bytes"] == (tmp_path / "last.dsv2").stat().st_size


def test_fit_is_deterministic(tmp_path, small_model_cfg, small_synth_cfg):
    cfg = _tiny_run(small_model_cfg, small_synth_cfg, lr=0.001)
    images = synth_dataset(2, 2, small_synth_cfg)
    trainer.fit(images, [], build_dasnet(cfg.model), cfg, tmp_path / "a")
    trainer.fit(images, [], build_dasnet(cfg.model), cfg, tmp_path / "b")
    blob_a = (tmp_path / "a" / "last.dsv2").read_bytes()
    assert blob_a == (tmp_path / "b" / "last.dsv2").read_bytes()


def test_fit_keeps_earliest_best_on_ties(tmp_path, small_model_cfg, small_synth_cfg):
    cfg = _tiny_run(small_model_cfg, small_synth_cfg, lr=0.001, epochs=2)
    images = synth_dataset(3, 1, small_synth_cfg)
    report = trainer.fit(images, [], build_dasnet(cfg.model), cfg, tmp_path)
    assert report.best_epoch == 0
    assert load_training_state(tmp_path / "best.dsv2").epoch == 0
    assert load_training_state(tmp_path / "last.dsv2").epoch == 1
    assert [e.lr for e in report.epochs] == pytest.approx([0.001, 0.0009])


def test_fit_reports_divergence_batch(tmp_path, monkeypatch, small_model_cfg, small_synth_cfg):
    cfg = _tiny_run(small_model_cfg, small_synth_cfg)
    images = synth_dataset(4, 1, small_synth_cfg)

    def _diverge(*args, **kwargs):
        raise NumericError("conv2d")

    monkeypatch.setattr(trainer, "training_step", _diverge)
    with pytest.raises(TrainingDivergedError) as exc:
        trainer.fit(images, [], build_dasnet(cfg.model), cfg, tmp_path)
    assert exc.value.batch_index == 0


def test_fit_rejects_empty_training_set(tmp_path, small_model_cfg, small_synth_cfg):
    cfg = _tiny_run(small_model_cfg, small_synth_cfg)
    with pytest.raises(ConfigurationError):
        trainer.fit([], [], build_dasnet(cfg.model), cfg, tmp_path)


def test_images_to_batch_rejects_size_mismatch(make_image):
    with pytest.raises(ConfigurationError):
        trainer.images_to_batch([make_image((32, 64), [])], (64, 64))
    batch = trainer.images_to_batch([make_image((64, 64), [])] * 2, (64, 64))
    assert batch.shape == (2, 3, 64, 64)


def test_full_model_gradient_check(small_model_cfg):
    cfg = RunConfig(model=small_model_cfg)
    report = model_check(cfg, size=64, entries=30, seed=0)
    assert report.checked_entries == 30
    assert report.passed(1e-3)
