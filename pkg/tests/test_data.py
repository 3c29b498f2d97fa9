import json

import numpy as np
import pytest
from pydantic import ValidationError

from core.config import AugmentPolicy, SynthSection
from core.errors import DatasetLoadError
from data.annotations import load_dataset, save_dataset, tight_box
from data.augment import augment, hflip, inmask_color, rot90, scale_amplifier
from data.rle import RLE, rle_decode, rle_encode
from data.synth import synth_dataset, synth_orchard


def test_rle_encode_starts_with_zero_run():
    mask = np.array([[0, 1, 1], [1, 0, 0]], np.uint8)
    rle = rle_encode(mask)
    assert rle.counts == [1, 3, 2]
    assert rle.area() == 3
    np.testing.assert_array_equal(rle_decode(rle), mask)
    leading = rle_encode(np.array([[1, 0]], np.uint8))
    assert leading.counts == [0, 1, 1]


def test_rle_empty_and_random_masks(rng):
    empty = rle_encode(np.zeros((4, 5), np.uint8))
    assert empty.counts == [20]
    assert rle_decode(empty).sum() == 0
    mask = (rng.random((7, 9)) < 0.4).astype(np.uint8)
    np.testing.assert_array_equal(rle_decode(rle_encode(mask)), mask)


def test_rle_rejects_wrong_total():
    with pytest.raises(ValidationError):
        RLE(size=(3, 4), counts=[5, 6])
    with pytest.raises(ValidationError):
        RLE(size=(2, 2), counts=[5, -1])


def test_load_empty_manifest(tmp_path):
    manifest = tmp_path / "manifest.jsonl"
    manifest.write_text("")
    assert load_dataset(manifest) == []


def test_dataset_round_trip(tmp_path, small_synth_cfg):
    images = synth_dataset(21, 3, small_synth_cfg)
    manifest = save_dataset(images, tmp_path / "ds")
    loaded = load_dataset(manifest)
    assert [im.name for im in loaded] == [im.name for im in images]
    for a, b in zip(images, loaded):
        np.testing.assert_array_equal(a.rgb, b.rgb)
        np.testing.assert_array_equal(a.depth, b.depth)
        np.testing.assert_array_equal(a.branch_mask, b.branch_mask)
        assert [i.box for i in a.instances] == [i.box for i in b.instances]
        for ia, ib in zip(a.instances, b.instances):
            np.testing.assert_array_equal(ia.mask, ib.mask)


def _one_image_dataset(tmp_path, make_image):
    manifest = save_dataset([make_image((32, 32), [(4, 4, 8, 8)])], tmp_path)
    return manifest, tmp_path / "annotations" / "sample.json"


def test_load_rejects_missing_file(tmp_path, make_image):
    manifest, _ = _one_image_dataset(tmp_path, make_image)
    (tmp_path / "images" / "sample.png").unlink()
    with pytest.raises(DatasetLoadError) as exc:
        load_dataset(manifest)
    assert exc.value.record == "manifest.jsonl:1"


def test_load_rejects_short_rle(tmp_path, make_image):
    manifest, ann = _one_image_dataset(tmp_path, make_image)
    doc = json.loads(ann.read_text())
    doc["branch_mask"]["counts"] = [32 * 32 - 1]
    ann.write_text(json.dumps(doc))
    with pytest.raises(DatasetLoadError):
        load_dataset(manifest)


def test_load_rejects_box_outside_image(tmp_path, make_image):
    manifest, ann = _one_image_dataset(tmp_path, make_image)
    doc = json.loads(ann.read_text())
    doc["instances"][0]["box"] = [28, 4, 8, 8]
    ann.write_text(json.dumps(doc))
    with pytest.raises(DatasetLoadError) as exc:
        load_dataset(manifest)
    assert "outside image" in exc.value.message


def test_synth_is_deterministic(small_synth_cfg):
    a = synth_orchard(7, small_synth_cfg)
    b = synth_orchard(7, small_synth_cfg)
    assert a.name == "synth_000007"
    np.testing.assert_array_equal(a.rgb, b.rgb)
    np.testing.assert_array_equal(a.depth, b.depth)
    assert [i.box for i in a.instances] == [i.box for i in b.instances]
    c = synth_orchard(8, small_synth_cfg)
    assert not np.array_equal(a.rgb, c.rgb)


def test_fruit_count_histogram_is_seed_stable(small_synth_cfg):
    def histogram():
        counts = [len(synth_orchard(seed, small_synth_cfg).instances) for seed in range(100)]
        return np.bincount(counts, minlength=small_synth_cfg.fruit_count[1] + 1)

    first = histogram()
    np.testing.assert_array_equal(first, histogram())
    assert first.sum() == 100
    assert len(first) == small_synth_cfg.fruit_count[1] + 1
    assert first[1:].sum() > 0


def test_synth_annotations_are_consistent():
    cfg = SynthSection(image_size=(96, 96), fruit_count=(4, 4), fruit_radius=(6, 16))
    for seed in range(5):
        image = synth_orchard(seed, cfg)
        assert len(image.instances) <= 4
        assert image.depth.dtype == np.uint16
        assert image.depth.min() >= 1
        for inst in image.instances:
            assert inst.area >= cfg.min_visible_area
            assert tight_box(inst.mask) == inst.box
            assert not (inst.mask & image.branch_mask).any()


def test_hflip_box_remap(make_image):
    image = make_image((40, 416), [(10, 5, 20, 30)])
    flipped = hflip(image)
    assert flipped.instances[0].box == (386, 5, 20, 30)
    assert tight_box(flipped.instances[0].mask) == (386, 5, 20, 30)


def test_hflip_twice_is_identity(small_synth_cfg):
    image = synth_orchard(3, small_synth_cfg)
    back = hflip(hflip(image))
    np.testing.assert_array_equal(back.rgb, image.rgb)
    np.testing.assert_array_equal(back.depth, image.depth)
    assert [i.box for i in back.instances] == [i.box for i in image.instances]


def test_rot90_box_follows_mask(make_image):
    image = make_image((64, 64), [(10, 4, 20, 8)])
    turned = rot90(image, 1)
    assert turned.instances[0].box == (4, 34, 8, 20)
    assert tight_box(turned.instances[0].mask) == turned.instances[0].box
    full = rot90(image, 4)
    np.testing.assert_array_equal(full.instances[0].mask, image.instances[0].mask)


def test_augment_keeps_non_square_size(make_image):
    image = make_image((64, 128), [(10, 4, 20, 8)])
    for seed in range(8):
        out = augment(image, seed, AugmentPolicy())
        assert out.size == (64, 128)
        inst = out.instances[0]
        assert tight_box(inst.mask) == inst.box


def test_augment_is_seeded(small_synth_cfg):
    image = synth_orchard(5, small_synth_cfg)
    a = augment(image, 99, AugmentPolicy())
    b = augment(image, 99, AugmentPolicy())
    np.testing.assert_array_equal(a.rgb, b.rgb)


def test_inmask_color_leaves_background(make_image, rng):
    image = make_image((48, 48), [(4, 4, 12, 12), (30, 30, 10, 10)], branch_rows=(20, 24))
    image.rgb = rng.integers(0, 256, (48, 48, 3), dtype=np.uint8)
    out = inmask_color(image, np.random.default_rng(0))
    objects = image.branch_mask.astype(bool)
    for inst in image.instances:
        objects |= inst.mask.astype(bool)
    np.testing.assert_array_equal(out.rgb[~objects], image.rgb[~objects])
    assert not np.array_equal(out.rgb[objects], image.rgb[objects])


def test_amplifier_scales_small_object(make_image):
    image = make_image((128, 128), [(54, 54, 20, 20)])
    for seed in range(6):
        out = scale_amplifier(image, seed)
        x, y, w, h = out.instances[0].box
        assert w in (40, 80)
        assert h == w
        assert 0 <= x and x + w <= 128 and 0 <= y and y + h <= 128


def test_amplifier_window_is_clamped_to_image(make_image):
    image = make_image((128, 128), [(0, 0, 20, 20)])
    out = scale_amplifier(image, 1)
    x, y, w, _ = out.instances[0].box
    assert (x, y) == (0, 0)
    assert w in (40, 80)
    assert out.size == (128, 128)


def test_amplifier_without_instances_is_identity(make_image):
    image = make_image((64, 64), [])
    assert scale_amplifier(image, 0) is image


def test_amplifier_drops_objects_left_outside(make_image):
    image = make_image((128, 128), [(2, 2, 10, 10), (100, 100, 24, 24)])
    out = scale_amplifier(image, 0, median_area=200.0)
    assert len(out.instances) == 1
    assert out.instances[0].box in [(4, 4, 20, 20), (8, 8, 40, 40)]
