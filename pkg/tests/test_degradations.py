import numpy as np
import pandas as pd
import pytest

from models.degradations import (KINDS, DegradationSpec, apply, generate_corpus, parse_params, procedural_source,
                                 read_manifest, streak_kernel, texture)
from models.errors import CorpusError, DegradationError
from models.image_io import write_image
from models.spectral import amplitude_map, band_energy_profile, oriented_band_fraction, to_luminance

NEUTRAL = [
    DegradationSpec("gaussian_noise", {"sigma": 0.0}),
    DegradationSpec("gaussian_blur", {"radius": 0}),
    DegradationSpec("rain_streaks", {"density": 0.0}),
    DegradationSpec("rain_streaks", {"intensity": 0.0}),
    DegradationSpec("haze", {"t": 1.0}),
    DegradationSpec("low_light", {"gamma": 1.0, "scale": 1.0}),
]


@pytest.fixture
def clean():
    return np.random.default_rng(0).random((3, 32, 32))


def textured(seed, size=64):
    return texture(size, np.random.default_rng(seed), sigma=0.7)


class TestSpec:
    """ Parameter validation """

    def test_defaults_filled(self):
        spec = DegradationSpec("haze")
        assert spec.params == {"t": 0.6, "A": 0.9}

    @pytest.mark.parametrize("kind,params", [
        ("gaussian_noise", {"sigma": -1.0}),
        ("gaussian_blur", {"sigma_b": 0.0}),
        ("gaussian_blur", {"radius": 2.5}),
        ("rain_streaks", {"angle": 120.0}),
        ("haze", {"t": 0.0}),
        ("haze", {"A": 0.5}),
        ("low_light", {"gamma": 0.5}),
        ("low_light", {"scale": 1.5}),
        ("haze", {"depth": 3.0}),
    ])
    def test_out_of_range(self, kind, params):
        with pytest.raises(DegradationError):
            DegradationSpec(kind, params)

    def test_unknown_kind(self):
        with pytest.raises(DegradationError):
            DegradationSpec("snow")

    def test_params_text_round_trip(self):
        spec = DegradationSpec("gaussian_blur", {"radius": 2, "sigma_b": 0.8})
        assert spec.params_text() == "radius=2;sigma_b=0.8"
        assert parse_params(spec.params_text()) == spec.params


class TestApply:
    """ Generators """

    @pytest.mark.parametrize("spec", NEUTRAL)
    def test_neutral_parameters_are_identity(self, spec, clean):
        np.testing.assert_array_equal(apply(spec, clean), clean)

    @pytest.mark.parametrize("kind", KINDS)
    def test_outputs_in_unit_range_and_deterministic(self, kind, clean):
        spec = DegradationSpec(kind, seed=5)
        out = apply(spec, clean)
        assert out.shape == clean.shape
        assert out.min() >= 0.0 and out.max() <= 1.0
        np.testing.assert_array_equal(out, apply(spec, clean))

    def test_noise_variance(self):
        gray = np.full((3, 256, 256), 0.5)
        out = apply(DegradationSpec("gaussian_noise", {"sigma": 25.0}, seed=1), gray)
        assert np.var(out - gray) == pytest.approx((25 / 255) ** 2, rel=0.05)

    def test_haze_formula(self, clean):
        out = apply(DegradationSpec("haze", {"t": 0.4, "A": 0.8}), clean)
        np.testing.assert_allclose(out, clean * 0.4 + 0.8 * 0.6, atol=1e-15)

    def test_blur_preserves_constant(self):
        flat = np.full((3, 16, 16), 0.3)
        np.testing.assert_allclose(apply(DegradationSpec("gaussian_blur"), flat), flat, atol=1e-12)

    def test_rejects_out_of_range_input(self):
        with pytest.raises(DegradationError):
            apply(DegradationSpec("haze"), np.full((3, 4, 4), 1.5))

    def test_streak_kernel_normalized(self):
        k = streak_kernel(9, 30.0)
        assert k.sum() == pytest.approx(1.0)
        assert k.shape == (9, 9)


class TestSpectralSignatures:
    """ Frequency-domain footprint of each degradation on textured images """

    @pytest.mark.parametrize("seed", range(10))
    def test_noise_raises_and_blur_lowers_top_band(self, seed):
        img = textured(seed)
        top = band_energy_profile(amplitude_map(img).data, 4)[-1]
        noisy = apply(DegradationSpec("gaussian_noise", {"sigma": 25.0}, seed), img)
        blurred = apply(DegradationSpec("gaussian_blur", {"radius": 3, "sigma_b": 1.5}), img)
        assert band_energy_profile(amplitude_map(noisy).data, 4)[-1] > top
        assert band_energy_profile(amplitude_map(blurred).data, 4)[-1] < top

    @pytest.mark.parametrize("seed", range(10))
    def test_haze_lowers_contrast(self, seed):
        img = textured(seed)
        hazy = apply(DegradationSpec("haze", {"t": 0.6, "A": 0.9}), img)
        assert to_luminance(hazy).data.std() < to_luminance(img).data.std()

    @pytest.mark.parametrize("seed", range(10))
    def test_rain_adds_oriented_energy(self, seed):
        img = textured(seed)
        spec = DegradationSpec("rain_streaks", {"density": 0.02, "length": 15, "angle": 60.0, "intensity": 0.8},
                               seed)
        rainy = apply(spec, img)
        before = oriented_band_fraction(amplitude_map(img).data, 60.0)
        after = oriented_band_fraction(amplitude_map(rainy).data, 60.0)
        assert after > before


class TestCorpus:
    """ Paired corpus generation """

    def test_single_pair(self, tmp_path):
        manifest = generate_corpus([DegradationSpec("haze")], None, tmp_path, 1, seed=3, size=16)
        assert len(manifest) == 1
        assert list(manifest.columns) == ["clean", "degraded", "kind", "params", "seed"]
        assert (tmp_path / "clean_00000.ppm").exists() and (tmp_path / "degraded_00000.ppm").exists()

    def test_reproducible(self, tmp_path):
        specs = [DegradationSpec(k) for k in KINDS]
        generate_corpus(specs, None, tmp_path / "a", 6, seed=9, workers=2, size=16)
        generate_corpus(specs, None, tmp_path / "b", 6, seed=9, size=16)
        for name in sorted(p.name for p in (tmp_path / "a").iterdir()):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_row_count_and_seeds(self, tmp_path):
        manifest = generate_corpus([DegradationSpec("gaussian_noise")], None, tmp_path, 5, seed=12, size=16)
        frame = pd.read_csv(tmp_path / "manifest.csv")
        assert len(frame) == 5
        assert list(frame["seed"]) == [12 ^ i for i in range(5)]
        assert list(manifest["kind"]) == ["gaussian_noise"] * 5

    def test_source_dir_skips_unreadable(self, tmp_path):
        src = tmp_path / "src"
        src.mkdir()
        write_image(src / "good.ppm", np.full((3, 8, 8), 0.5))
        (src / "bad.ppm").write_bytes(b"P9 junk")
        generate_corpus([DegradationSpec("low_light")], src, tmp_path / "out", 2, seed=0)
        rows = read_manifest(tmp_path / "out" / "manifest.csv")
        assert len(rows) == 2
        assert rows["clean"][0].startswith(str(tmp_path / "out"))

    def test_no_readable_sources(self, tmp_path):
        src = tmp_path / "src"
        src.mkdir()
        (src / "bad.ppm").write_bytes(b"nope")
        with pytest.raises(CorpusError):
            generate_corpus([DegradationSpec("haze")], src, tmp_path / "out", 1, seed=0)

    def test_procedural_sources_in_range(self):
        for i in range(6):
            img = procedural_source(i, 16, 4)
            assert img.shape == (3, 16, 16)
            assert img.min() >= 0.0 and img.max() <= 1.0
