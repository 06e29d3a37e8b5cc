import math

import numpy as np
import pytest

from conftest import median_oracle, percentile_oracle
from slidenorm.errors import DegenerateStainError, ProfileError, StainAbsentError
from slidenorm.normalize import (
    FitParams,
    StainStats,
    config_hash,
    load_profile,
    normalize_block,
    save_profile,
    scale_factors,
    stain_stats,
)
from slidenorm.stain_sep import reference_basis
from slidenorm.synthetic import render_slide


class TestStainStats:
    def test_pooled_percentile_example(self):
        dens = np.arange(0.0, 101.0)
        st = stain_stats(np.stack([dens, dens]))
        assert st.p99[0] == 99.0
        assert st.p99[1] == 99.0
        assert st.sample_count == 101

    def test_constant_densities(self):
        st = stain_stats([np.full(50, 3.5), np.full(50, 3.5)])
        assert np.array_equal(st.p99, [3.5, 3.5])

    def test_patch_median_example(self):
        st = stain_stats(patch_p99s=[(1.0, 1.0), (2.0, 2.0), (3.0, 3.0)])
        assert np.array_equal(st.p99, [2.0, 2.0])

    def test_patch_median_even_count(self):
        st = stain_stats(patch_p99s=[(1.0, 0.5), (2.0, 1.5), (3.0, 2.5), (10.0, 9.5)])
        assert np.array_equal(st.p99, [2.5, 2.0])

    def test_matches_oracles(self):
        rng = np.random.default_rng(9)
        for _ in range(20):
            h = rng.gamma(2.0, 1.0, size=(2, int(rng.integers(5, 500))))
            st = stain_stats(h)
            assert st.p99[0] == percentile_oracle(h[0], 99.0)
            assert st.p99[1] == percentile_oracle(h[1], 99.0)
        for _ in range(20):
            pairs = rng.gamma(2.0, 1.0, size=(int(rng.integers(1, 60)), 2))
            st = stain_stats(patch_p99s=pairs)
            assert st.p99[0] == median_oracle(pairs[:, 0])
            assert st.p99[1] == median_oracle(pairs[:, 1])

    def test_absent_stain_rejected(self):
        with pytest.raises(StainAbsentError, match="eosin"):
            stain_stats([np.ones(10), np.zeros(10)])
        with pytest.raises(StainAbsentError):
            stain_stats([np.ones(10), np.empty(0)])

    def test_requires_exactly_one_mode(self):
        with pytest.raises(ValueError):
            stain_stats()
        with pytest.raises(ValueError):
            stain_stats(np.ones((2, 4)), patch_p99s=[(1.0, 1.0)])

    def test_median_of_patch_p99_close_to_pooled(self):
        # 50 i.i.d. patches from one continuous distribution: the median of
        # per-patch p99s stays within 10% of the pooled p99
        rng = np.random.default_rng(10)
        patches = rng.gamma(2.0, 0.8, size=(50, 2000))
        pairs = [(percentile_oracle(p, 99.0), percentile_oracle(p, 99.0)) for p in patches]
        aggregated = stain_stats(patch_p99s=pairs).p99[0]
        pooled = percentile_oracle(patches.ravel(), 99.0)
        assert abs(aggregated - pooled) / pooled < 0.10


class TestScaleFactors:
    def test_example(self):
        f = scale_factors(StainStats(np.array([2.0, 4.0])), StainStats(np.array([1.0, 1.0])))
        assert np.array_equal(f, [0.5, 0.25])

    def test_identity(self):
        st = StainStats(np.array([1.7, 0.9]))
        assert np.array_equal(scale_factors(st, st), [1.0, 1.0])

    def test_zero_source_rejected(self):
        with pytest.raises(DegenerateStainError, match="hematoxylin"):
            scale_factors(StainStats(np.array([0.0, 1.0])), StainStats(np.array([1.0, 1.0])))


class TestNormalizeBlock:
    def test_zero_density_renders_background(self):
        out = normalize_block(
            np.zeros((2, 6)), [1.0, 1.0], reference_basis(),
            [250.0, 245.0, 230.0], (2, 3),
        )
        assert np.all(out == np.array([250, 245, 230], dtype=np.uint8))

    def test_single_pixel_scalar_pipeline(self):
        w = reference_basis()
        out = normalize_block(np.array([[1.0], [0.0]]), [2.0, 1.0], w, [255.0] * 3, (1, 1))
        for c in range(3):
            assert out[0, 0, c] == round(255.0 * math.exp(-2.0 * w[c, 0]))

    def test_generator_round_trip_within_one_level(self):
        slide = render_slide(96, 80, seed=1, tissue_fraction=0.7)
        out = normalize_block(
            slide.densities, [1.0, 1.0], slide.basis, slide.i0,
            slide.pixels.shape[:2],
        )
        assert np.abs(out.astype(int) - slide.pixels.astype(int)).max() <= 1

    def test_concatenation_purity_bit_exact(self):
        rng = np.random.default_rng(12)
        h = rng.gamma(1.5, 0.7, size=(2, 400))
        w = reference_basis()
        whole = normalize_block(h, [1.3, 0.8], w, [255.0] * 3, (1, 400))
        parts = np.concatenate(
            [
                normalize_block(h[:, :143], [1.3, 0.8], w, [255.0] * 3, (1, 143)),
                normalize_block(h[:, 143:], [1.3, 0.8], w, [255.0] * 3, (1, 257)),
            ],
            axis=1,
        )
        assert np.array_equal(whole, parts)

    def test_increasing_factor_never_brightens(self):
        rng = np.random.default_rng(13)
        h = rng.gamma(1.5, 0.7, size=(2, 300))
        w = reference_basis()
        base = normalize_block(h, [1.0, 1.0], w, [255.0] * 3, (1, 300)).astype(int)
        denser = normalize_block(h, [1.5, 1.0], w, [255.0] * 3, (1, 300)).astype(int)
        assert np.all(denser <= base)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            normalize_block(np.zeros((2, 5)), [1, 1], reference_basis(), [255] * 3, (2, 3))

    def test_non_positive_factors_rejected(self):
        with pytest.raises(ValueError):
            normalize_block(np.zeros((2, 4)), [0.0, 1.0], reference_basis(), [255] * 3, (1, 4))


class TestProfileRoundTrip:
    def _params(self):
        return FitParams(
            i0=np.array([251.0, 244.5, 230.0 + 1 / 3]),
            basis=reference_basis(),
            stats=StainStats(np.array([1.9705, 1.0308]), sample_count=100_000),
            provenance={"source": "slide_0001.tiff", "config_hash": config_hash({"a": 1})},
        )

    def test_round_trip_bit_exact(self, tmp_path):
        path = tmp_path / "target.profile"
        params = self._params()
        save_profile(path, params)
        back = load_profile(path)
        assert np.array_equal(back.i0, params.i0)
        assert np.array_equal(back.basis, params.basis)
        assert np.array_equal(back.stats.p99, params.stats.p99)
        assert back.stats.sample_count == params.stats.sample_count
        assert back.provenance["source"] == "slide_0001.tiff"
        assert back.provenance["config_hash"] == params.provenance["config_hash"]

    def test_file_is_flat_key_value_text(self, tmp_path):
        path = tmp_path / "t.profile"
        save_profile(path, self._params())
        text = path.read_text()
        assert "format = slidenorm-profile" in text
        assert "version = 1" in text
        for line in text.strip().splitlines():
            assert " = " in line

    def test_rejects_foreign_file(self, tmp_path):
        path = tmp_path / "junk.profile"
        path.write_text("format = something-else\n")
        with pytest.raises(ProfileError):
            load_profile(path)

    def test_rejects_bad_version(self, tmp_path):
        path = tmp_path / "v9.profile"
        save_profile(path, self._params())
        path.write_text(path.read_text().replace("version = 1", "version = 9"))
        with pytest.raises(ProfileError, match="version"):
            load_profile(path)

    def test_rejects_invalid_basis(self, tmp_path):
        path = tmp_path / "bad.profile"
        save_profile(path, self._params())
        text = path.read_text().replace(
            "basis_red_hematoxylin = 0.65", "basis_red_hematoxylin = 2.65"
        )
        path.write_text(text)
        with pytest.raises(ProfileError, match="unit"):
            load_profile(path)

    def test_rejects_missing_field(self, tmp_path):
        path = tmp_path / "short.profile"
        save_profile(path, self._params())
        lines = [l for l in path.read_text().splitlines() if not l.startswith("p99_eosin")]
        path.write_text("\n".join(lines))
        with pytest.raises(ProfileError, match="p99_eosin"):
            load_profile(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ProfileError):
            load_profile(tmp_path / "absent.profile")

    def test_config_hash_stable_and_order_free(self):
        assert config_hash({"a": 1, "b": 2}) == config_hash({"b": 2, "a": 1})
        assert config_hash({"a": 1}) != config_hash({"a": 2})
