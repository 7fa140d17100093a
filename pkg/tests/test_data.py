import json

import numpy as np
import pytest

from clearsight.data import (
    Sample,
    SplitManifest,
    load_annotations,
    load_mask,
    load_pair_samples,
    resize_for_dtu,
    resize_for_ppu,
    resize_with_boxes,
    save_scene_dataset,
    split,
)
from clearsight.dtu import GroundTruthSet
from clearsight.errors import ValidationError
from clearsight.images import save_image
from clearsight.scenes import make_scene_set
from clearsight.weathersim import WeatherRecipe, degrade_image


def write_annotation_file(tmp_path, images, annotations, categories=None):
    categories = categories if categories is not None else [
        {"id": 0, "name": "car"},
        {"id": 1, "name": "pedestrian"},
    ]
    payload = {"images": images, "annotations": annotations, "categories": categories}
    path = tmp_path / "annotations.json"
    path.write_text(json.dumps(payload))
    return path


def write_png(tmp_path, rel, shape=(64, 64, 3)):
    path = tmp_path / rel
    path.parent.mkdir(parents=True, exist_ok=True)
    save_image(path, np.zeros(shape))
    return path


class TestLoadAnnotations:
    def test_counts_and_grouping(self, tmp_path):
        write_png(tmp_path, "images/foggy/a.png")
        write_png(tmp_path, "images/foggy/b.png")
        images = [
            {"id": "a", "file_name": "images/foggy/a.png", "width": 64, "height": 64,
             "weather": "foggy"},
            {"id": "b", "file_name": "images/foggy/b.png", "width": 64, "height": 64,
             "weather": "foggy"},
        ]
        anns = [
            {"id": 0, "image_id": "a", "bbox": [10, 20, 30, 40], "category_id": 0},
            {"id": 1, "image_id": "a", "bbox": [5, 5, 10, 10], "category_id": 1},
            {"id": 2, "image_id": "b", "bbox": [1, 1, 8, 8], "category_id": 0},
        ]
        path = write_annotation_file(tmp_path, images, anns)
        samples = load_annotations(path)
        assert len(samples) == 2
        assert [len(s.boxes.boxes) for s in samples] == [2, 1]

    def test_topleft_bbox_converted_to_center_form(self, tmp_path):
        write_png(tmp_path, "images/sunny/a.png")
        images = [{"id": "a", "file_name": "images/sunny/a.png", "width": 64, "height": 64,
                   "weather": "sunny"}]
        anns = [{"id": 0, "image_id": "a", "bbox": [10, 20, 30, 40], "category_id": 0}]
        sample = load_annotations(write_annotation_file(tmp_path, images, anns))[0]
        assert sample.boxes.boxes[0] == (25.0, 40.0, 30.0, 40.0)

    def test_empty_annotation_list_is_valid(self, tmp_path):
        write_png(tmp_path, "images/rainy/a.png")
        images = [{"id": "a", "file_name": "images/rainy/a.png", "width": 64, "height": 64,
                   "weather": "rainy"}]
        samples = load_annotations(write_annotation_file(tmp_path, images, []))
        assert samples[0].boxes.boxes == []

    def test_unknown_category_listed(self, tmp_path):
        write_png(tmp_path, "images/sunny/a.png")
        images = [{"id": "a", "file_name": "images/sunny/a.png", "width": 64, "height": 64,
                   "weather": "sunny"}]
        cats = [{"id": 0, "name": "unicorn"}, {"id": 1, "name": "dragon"}]
        with pytest.raises(ValidationError, match="dragon"):
            load_annotations(write_annotation_file(tmp_path, images, [], cats))

    def test_malformed_json_reports_location(self, tmp_path):
        path = tmp_path / "annotations.json"
        path.write_text('{"images": [,]}')
        with pytest.raises(ValidationError, match="line 1"):
            load_annotations(path)

    def test_weather_inferred_from_path(self, tmp_path):
        write_png(tmp_path, "images/snowy/a.png")
        images = [{"id": "a", "file_name": "images/snowy/a.png", "width": 64, "height": 64}]
        sample = load_annotations(write_annotation_file(tmp_path, images, []))[0]
        assert sample.weather == "snowy"

    def test_missing_weather_rejected(self, tmp_path):
        write_png(tmp_path, "images/misc/a.png")
        images = [{"id": "a", "file_name": "images/misc/a.png", "width": 64, "height": 64}]
        with pytest.raises(ValidationError, match="weather"):
            load_annotations(write_annotation_file(tmp_path, images, []))

    def test_box_outside_canvas_rejected(self, tmp_path):
        write_png(tmp_path, "images/sunny/a.png")
        images = [{"id": "a", "file_name": "images/sunny/a.png", "width": 64, "height": 64,
                   "weather": "sunny"}]
        anns = [{"id": 0, "image_id": "a", "bbox": [50, 50, 30, 30], "category_id": 0}]
        with pytest.raises(ValidationError, match="canvas"):
            load_annotations(write_annotation_file(tmp_path, images, anns))

    def test_missing_image_file_rejected(self, tmp_path):
        images = [{"id": "a", "file_name": "images/sunny/gone.png", "width": 64, "height": 64,
                   "weather": "sunny"}]
        with pytest.raises(ValidationError, match="missing"):
            load_annotations(write_annotation_file(tmp_path, images, []))


class TestResize:
    def test_per_axis_scaling_example(self, rng):
        image = rng.random((1024, 2048, 3))
        out, boxes = resize_for_ppu(image, [(512.0, 1024.0, 100.0, 200.0)], size=(512, 512))
        assert out.shape == (512, 512, 3)
        # scales: x 512/2048 = 0.25, y 512/1024 = 0.5
        assert boxes[0] == pytest.approx((128.0, 512.0, 25.0, 100.0))

    def test_identity_resize_keeps_boxes(self, rng):
        image = rng.random((64, 64, 3))
        out, boxes = resize_with_boxes(image, [(10.0, 12.0, 4.0, 6.0)], 64, 64)
        assert np.array_equal(out, image)
        assert boxes[0] == (10.0, 12.0, 4.0, 6.0)

    def test_round_trip_recovers_boxes(self, rng):
        image = rng.random((96, 128, 3))
        original = [(30.0, 40.0, 10.0, 20.0), (64.5, 33.25, 7.5, 9.0)]
        _, fwd = resize_with_boxes(image, original, 512, 512)
        small = np.zeros((512, 512, 3))
        _, back = resize_with_boxes(small, fwd, 96, 128)
        for o, b in zip(original, back):
            assert np.allclose(o, b, rtol=1e-6)

    def test_dtu_size_default(self, rng):
        out, _ = resize_for_dtu(rng.random((96, 96, 3)), [])
        assert out.shape == (512, 1024, 3)

    def test_zero_dim_rejected(self):
        with pytest.raises(ValidationError):
            resize_with_boxes(np.zeros((0, 4, 3)), [], 8, 8)

    def test_boxes_stay_in_canvas_after_resize(self, tmp_path):
        scenes = make_scene_set(4, 96, 96, seed=7)
        for scene in scenes:
            _, boxes = resize_with_boxes(scene.image, scene.boxes, 64, 128)
            gt = GroundTruthSet(boxes, list(scene.class_ids))
            gt.validate()
            for cx, cy, w, h in boxes:
                assert 0 <= cx - w / 2 and cx + w / 2 <= 128 + 1e-9
                assert 0 <= cy - h / 2 and cy + h / 2 <= 64 + 1e-9


def _samples_for_split(n_per_weather=25):
    samples = []
    for weather in ("foggy", "rainy", "snowy", "sunny"):
        for i in range(n_per_weather):
            samples.append(
                Sample(
                    image_id=f"{weather}_{i}",
                    image_path="unused.png",
                    weather=weather,
                    boxes=GroundTruthSet([], []),
                    width=64,
                    height=64,
                )
            )
    return samples


class TestSplit:
    def test_ratio_and_stratification(self):
        manifest = split(_samples_for_split(25), seed=0)
        assert len(manifest.train_ids) == 80
        assert len(manifest.val_ids) == 20
        for weather in ("foggy", "rainy", "snowy", "sunny"):
            assert sum(1 for s in manifest.val_ids if s.startswith(weather)) == 5

    def test_seed_determinism(self):
        samples = _samples_for_split(10)
        for seed in range(5):
            a = split(samples, seed=seed)
            b = split(samples, seed=seed)
            assert a.train_ids == b.train_ids and a.val_ids == b.val_ids

    def test_disjoint_ids(self):
        manifest = split(_samples_for_split(10), seed=3)
        ids = manifest.train_ids + manifest.val_ids
        assert len(ids) == len(set(ids))

    def test_small_stratum_kept_in_train(self, caplog):
        samples = _samples_for_split(25)[:25]  # foggy only
        samples += _samples_for_split(25)[25:28]  # 3 rainy samples
        manifest = split(samples, seed=1)
        rainy_val = [s for s in manifest.val_ids if s.startswith("rainy")]
        assert rainy_val == []
        assert sum(1 for s in manifest.train_ids if s.startswith("rainy")) == 3

    def test_empty_rejected(self):
        with pytest.raises(ValidationError):
            split([], seed=0)


class TestSplitManifest:
    def test_overlap_rejected(self):
        with pytest.raises(ValidationError):
            SplitManifest(["a", "b"], ["b"], seed=0).validate()

    def test_ratio_deviation_rejected(self):
        with pytest.raises(ValidationError):
            SplitManifest(["a", "b", "c", "d", "e", "f"], [], seed=0).validate()

    def test_json_round_trip(self):
        manifest = SplitManifest(["a", "b", "c", "d"], ["e"], seed=9)
        clone = SplitManifest.from_json(manifest.to_json())
        assert clone == manifest


class TestSceneDatasetExport:
    def test_export_and_reload(self, tmp_path):
        scenes = make_scene_set(3, 64, 64, seed=30)
        for scene in scenes:
            scene.weather = "foggy"
            scene.recipe_kind = "fog"
            scene.degraded = degrade_image(
                scene.image, WeatherRecipe(kind="fog", intensity=1.5, seed=8)
            )
        ann_path = save_scene_dataset(scenes, tmp_path)
        samples = load_annotations(ann_path)
        assert len(samples) == 3
        assert all(s.weather == "foggy" for s in samples)
        assert all(s.clean_path and s.mask_path for s in samples)
        mask = load_mask(samples[0].mask_path)
        assert mask.shape == (64, 64)
        assert set(np.unique(mask)) <= set(range(8))


class TestPairLoading:
    def test_pairs_from_manifest(self, tmp_path):
        from clearsight.weathersim import generate_pair_dataset

        clean_dir = tmp_path / "clean"
        clean_dir.mkdir()
        rng = np.random.default_rng(0)
        for i in range(2):
            save_image(clean_dir / f"{i}.png", rng.random((32, 32, 3)))
        generate_pair_dataset(clean_dir, [WeatherRecipe(kind="rain", seed=1)], tmp_path / "out")
        pairs = load_pair_samples(tmp_path / "out")
        assert len(pairs) == 2
        assert pairs[0].degraded.shape == (32, 32, 3)
        assert pairs[0].kind == "rain"
