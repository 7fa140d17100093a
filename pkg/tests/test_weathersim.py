import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from clearsight.errors import DimensionError, ValidationError
from clearsight.images import save_image
from clearsight.weathersim import (
    DegradationParams,
    WeatherRecipe,
    apply_degradation,
    degrade_image,
    generate_pair_dataset,
    make_recipe_params,
    read_manifest,
)


def constant_params(shape, a=1.0, m=0.8, layers=(0.1,)):
    h, w = shape[:2]
    return DegradationParams(
        atmospheric_light=a,
        transmission_map=np.full((h, w), m),
        scattering_layers=[np.full(shape, s) for s in layers],
    )


class TestApplyDegradation:
    def test_pure_atmospheric_light(self):
        clean = np.zeros((6, 6, 3))
        params = DegradationParams(1.0, np.zeros((6, 6)), [])
        assert np.array_equal(apply_degradation(clean, params), np.ones((6, 6, 3)))

    def test_identity_full_transmission(self, rng):
        clean = rng.random((6, 6, 3))
        params = DegradationParams(0.7, np.ones((6, 6)), [])
        assert np.array_equal(apply_degradation(clean, params), clean)

    def test_constant_closed_form(self):
        clean = np.full((5, 4, 3), 0.5)
        out = apply_degradation(clean, constant_params((5, 4, 3)))
        # 0.5 + 0.1*0.8 + 1.0*0.2
        assert np.allclose(out, 0.78, atol=1e-6)

    def test_shape_mismatch_raises(self, rng):
        clean = rng.random((6, 6, 3))
        bad_m = DegradationParams(1.0, np.ones((5, 6)), [])
        with pytest.raises(DimensionError):
            apply_degradation(clean, bad_m)
        bad_layer = DegradationParams(1.0, np.ones((6, 6)), [np.zeros((6, 5, 3))])
        with pytest.raises(DimensionError):
            apply_degradation(clean, bad_layer)

    def test_out_of_range_raises(self, rng):
        clean = rng.random((4, 4, 3))
        with pytest.raises(ValidationError):
            apply_degradation(clean, DegradationParams(1.0, np.full((4, 4), 1.5), []))
        with pytest.raises(ValidationError):
            apply_degradation(clean, DegradationParams(1.2, np.ones((4, 4)), []))
        with pytest.raises(ValidationError):
            apply_degradation(clean * 3.0, DegradationParams(1.0, np.ones((4, 4)), []))


class TestDegradationParamsInvariants:
    def test_transmission_range_enforced(self):
        params = DegradationParams(0.9, np.full((4, 4), -0.1), [])
        with pytest.raises(ValidationError):
            params.validate((4, 4, 3))

    def test_empty_scattering_list_allowed(self):
        DegradationParams(0.9, np.ones((4, 4)), []).validate((4, 4, 3))

    def test_layer_dims_must_match(self):
        params = DegradationParams(0.9, np.ones((4, 4)), [np.zeros((4, 4, 3))])
        params.validate((4, 4, 3))
        with pytest.raises(DimensionError):
            params.validate((4, 5, 3))

    def test_per_channel_atmospheric_light(self, rng):
        clean = rng.random((4, 4, 3)) * 0.5
        a = np.array([0.9, 0.8, 0.7])
        out = apply_degradation(clean, DegradationParams(a, np.full((4, 4), 0.5), []))
        expected = clean + a * 0.5
        assert np.allclose(out, expected)


class TestProperties:
    def test_transmission_sensitivity_matches_finite_differences(self, rng):
        """dI/dm equals sum(S) - A pointwise away from the clamp."""
        clean = rng.random((8, 8, 3)) * 0.3
        m = rng.random((8, 8)) * 0.5 + 0.25
        layers = [rng.random((8, 8, 3)) * 0.2 for _ in range(2)]
        a = 0.6
        h = 1e-7
        up = DegradationParams(a, m + h, layers)
        down = DegradationParams(a, m - h, layers)
        fd = (apply_degradation(clean, up) - apply_degradation(clean, down)) / (2 * h)
        analytic = sum(layers) - a
        rel = np.abs(fd - analytic) / np.maximum(np.abs(analytic), 1e-8)
        assert rel.max() < 1e-6

    def test_affine_in_atmospheric_light(self, rng):
        clean = rng.random((6, 6, 3)) * 0.2
        m = rng.random((6, 6)) * 0.6 + 0.2
        a1, a2, t = 0.2, 0.6, 0.3
        i1 = apply_degradation(clean, DegradationParams(a1, m, []))
        i2 = apply_degradation(clean, DegradationParams(a2, m, []))
        mixed = apply_degradation(clean, DegradationParams((1 - t) * a1 + t * a2, m, []))
        assert np.allclose((1 - t) * i1 + t * i2, mixed, rtol=1e-12, atol=1e-12)

    def test_clamp_is_only_nonlinearity(self, rng):
        clean = rng.random((6, 6, 3)) * 0.3
        m = rng.random((6, 6)) * 0.5 + 0.3
        layers = [rng.random((6, 6, 3)) * 0.1]
        a = 0.5
        raw = clean + layers[0] * m[:, :, None] + a * (1 - m[:, :, None])
        assert raw.min() >= 0 and raw.max() <= 1
        out = apply_degradation(clean, DegradationParams(a, m, layers))
        assert np.array_equal(out, raw)

    def test_clamped_region_saturates(self):
        clean = np.full((4, 4, 3), 0.9)
        params = DegradationParams(1.0, np.full((4, 4), 0.2), [np.full((4, 4, 3), 0.9)])
        out = apply_degradation(clean, params)
        assert out.max() <= 1.0


class TestRecipes:
    def test_clear_is_identity(self, rng):
        clean = rng.random((8, 8, 3))
        recipe = WeatherRecipe(kind="clear", intensity=3.0, seed=1)
        assert recipe.intensity == 0.0
        params = make_recipe_params(recipe, clean.shape)
        assert np.array_equal(params.transmission_map, np.ones((8, 8)))
        assert params.scattering_layers == []
        assert np.array_equal(degrade_image(clean, recipe), clean)

    def test_fog_closed_form_constant_depth(self):
        recipe = WeatherRecipe(kind="fog", fog_beta=0.01, intensity=1.0,
                               depth_map=np.full((8, 8), 100.0))
        params = make_recipe_params(recipe, (8, 8, 3))
        assert np.allclose(params.transmission_map, np.exp(-1.0), atol=1e-12)

    def test_fog_fallback_ramp_is_smooth(self):
        params = make_recipe_params(WeatherRecipe(kind="fog", seed=2), (32, 16, 3))
        m = params.transmission_map
        assert m.shape == (32, 16)
        col = m[:, 0]
        assert (np.diff(col) >= 0).all()  # top (far) is foggier than bottom

    def test_rain_has_oriented_streaks(self):
        params = make_recipe_params(WeatherRecipe(kind="rain", intensity=2.0, seed=3), (64, 64, 3))
        assert len(params.scattering_layers) == 2
        assert all(layer.max() > 0 for layer in params.scattering_layers)

    def test_snow_has_particle_layers(self):
        params = make_recipe_params(WeatherRecipe(kind="snow", intensity=2.0, seed=4), (64, 64, 3))
        assert len(params.scattering_layers) == 3
        assert all(layer.max() > 0 for layer in params.scattering_layers)

    def test_determinism_bit_identical(self):
        recipe = WeatherRecipe(kind="snow", intensity=1.5, seed=7)
        p1 = make_recipe_params(recipe, (32, 32, 3))
        p2 = make_recipe_params(recipe, (32, 32, 3))
        assert np.array_equal(p1.transmission_map, p2.transmission_map)
        for a, b in zip(p1.scattering_layers, p2.scattering_layers):
            assert np.array_equal(a, b)

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValidationError):
            WeatherRecipe(kind="hail")

    def test_negative_intensity_rejected(self):
        with pytest.raises(ValidationError):
            WeatherRecipe(kind="fog", intensity=-1.0)

    def test_bad_shape_rejected(self):
        with pytest.raises(ValidationError):
            make_recipe_params(WeatherRecipe(kind="fog"), (0, 8, 3))


class TestPairDataset:
    @staticmethod
    def _write_clean_images(path: Path, n: int):
        path.mkdir(parents=True, exist_ok=True)
        rng = np.random.default_rng(11)
        for i in range(n):
            save_image(path / f"img_{i}.png", rng.random((32, 32, 3)))

    def test_pair_counts(self, tmp_path):
        self._write_clean_images(tmp_path / "clean", 4)
        recipes = [WeatherRecipe(kind=k, seed=0) for k in ("fog", "rain", "snow")]
        manifest = generate_pair_dataset(tmp_path / "clean", recipes, tmp_path / "out")
        assert len(manifest) == 12
        for rec in manifest:
            assert (tmp_path / "out" / rec["degraded_path"]).exists()
            assert (tmp_path / "out" / rec["clean_path"]).exists()

    def test_clear_pairs_identical(self, tmp_path):
        self._write_clean_images(tmp_path / "clean", 2)
        manifest = generate_pair_dataset(
            tmp_path / "clean", [WeatherRecipe(kind="clear")], tmp_path / "out"
        )
        for rec in manifest:
            degraded = (tmp_path / "out" / rec["degraded_path"]).read_bytes()
            clean = (tmp_path / "out" / rec["clean_path"]).read_bytes()
            assert degraded == clean

    def test_rerun_reproduces_identical_outputs(self, tmp_path):
        self._write_clean_images(tmp_path / "clean", 3)
        recipes = [WeatherRecipe(kind="fog", seed=5), WeatherRecipe(kind="rain", seed=9)]

        def checksums(out):
            generate_pair_dataset(tmp_path / "clean", recipes, out)
            sums = {}
            for p in sorted(Path(out).rglob("*")):
                if p.is_file():
                    sums[str(p.relative_to(out))] = hashlib.sha256(p.read_bytes()).hexdigest()
            return sums

        assert checksums(tmp_path / "a") == checksums(tmp_path / "b")

    def test_unreadable_image_skipped(self, tmp_path, caplog):
        self._write_clean_images(tmp_path / "clean", 2)
        (tmp_path / "clean" / "broken.png").write_bytes(b"not a png")
        manifest = generate_pair_dataset(
            tmp_path / "clean", [WeatherRecipe(kind="fog")], tmp_path / "out"
        )
        assert len(manifest) == 2

    def test_empty_input_rejected(self, tmp_path):
        (tmp_path / "clean").mkdir()
        with pytest.raises(ValidationError):
            generate_pair_dataset(tmp_path / "clean", [WeatherRecipe(kind="fog")], tmp_path / "out")

    def test_manifest_round_trip(self, tmp_path):
        self._write_clean_images(tmp_path / "clean", 2)
        manifest = generate_pair_dataset(
            tmp_path / "clean", [WeatherRecipe(kind="snow", seed=3)], tmp_path / "out"
        )
        loaded = read_manifest(tmp_path / "out" / "pairs_manifest.jsonl")
        assert loaded == json.loads(json.dumps(manifest))
