import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from sas_saliency.scene import (AugmentPolicy, Facet, SceneSpec, SubApertureStack, TargetSpec, add_haze,
                                add_speckle, augment, generate_scene, random_scene_spec, target_support)
from sas_saliency.aspect_color import CsasImage


def disc_scene(**kw):
    target = TargetSpec("disc", center=(15.5, 15.5), scale=(5, 5), facets=(Facet(3.0, 0.0, 36.0),))
    base = dict(seed=3, height=32, width=32, targets=(target,), full_aspect_radius=12.0,
                num_apertures=100, aperture_spacing=3.6)
    base.update(kw)
    return SceneSpec(**base)


def stack_of(values, angles=None):
    values = np.asarray(values, dtype=np.float64)
    K = values.shape[0]
    return SubApertureStack(values, np.arange(K) * 360.0 / K if angles is None else angles)


class TestSceneSpec:
    def test_aperture_product_must_be_360(self):
        with pytest.raises(ValueError):
            SceneSpec(seed=0, num_apertures=100, aperture_spacing=3.5)

    def test_full_aspect_radius_bound(self):
        with pytest.raises(ValueError):
            SceneSpec(seed=0, height=32, width=32, full_aspect_radius=16.0)

    def test_json_round_trip(self):
        spec = disc_scene(coverage_loss=(30.0, 90.0), offset=(1, -2))
        assert SceneSpec.from_dict(spec.to_dict()) == spec

    def test_bad_facet_width(self):
        with pytest.raises(ValueError):
            Facet(1.0, 0.0, 0.0)


class TestGenerateScene:
    def test_no_targets_gives_empty_mask(self):
        stack, mask = generate_scene(SceneSpec(seed=1, height=24, width=24, full_aspect_radius=8,
                                               num_apertures=8, aperture_spacing=45.0))
        assert mask.shape == (24, 24)
        assert not mask.any()

    def test_deterministic(self):
        a = generate_scene(disc_scene())
        b = generate_scene(disc_scene())
        np.testing.assert_array_equal(a[0].reflectivity, b[0].reflectivity)
        np.testing.assert_array_equal(a[1], b[1])

    def test_facet_band_limits_target_energy(self):
        spec = disc_scene()
        stack, mask = generate_scene(spec)
        bare, _ = generate_scene(disc_scene(targets=()))
        excess = (stack.reflectivity - bare.reflectivity)[:, mask.astype(bool)]
        in_band = np.abs((spec.center_angles + 180) % 360 - 180) <= 18.0 + 1e-9
        assert np.all(excess[in_band].sum(1) > 0)
        # outside the band the target pixels hold exactly the seafloor baseline
        np.testing.assert_array_equal(excess[~in_band], 0.0)

    def test_mask_is_target_support(self):
        spec = disc_scene()
        _, mask = generate_scene(spec)
        np.testing.assert_array_equal(mask, target_support(spec.targets[0], 32, 32).astype(np.uint8))

    def test_full_aspect_gain(self):
        spec = SceneSpec(seed=5, height=32, width=32, full_aspect_radius=10, num_apertures=4,
                         aperture_spacing=90.0, full_aspect_gain=1.5)
        flat = SceneSpec(seed=5, height=32, width=32, full_aspect_radius=10, num_apertures=4,
                         aperture_spacing=90.0, full_aspect_gain=1.0)
        ratio = generate_scene(spec)[0].reflectivity / generate_scene(flat)[0].reflectivity
        assert ratio[0, 15, 15] == pytest.approx(1.5)
        assert ratio[0, 0, 0] == pytest.approx(1.0)

    def test_target_outside_image_rejected(self):
        far = TargetSpec("disc", center=(200, 200), scale=(3, 3))
        with pytest.raises(ValueError):
            generate_scene(disc_scene(targets=(far,)))

    @given(st.integers(0, 2 ** 31 - 1))
    def test_random_scenes_valid(self, seed):
        spec = random_scene_spec(np.random.default_rng(seed), height=32, width=32, num_apertures=12)
        stack, mask = generate_scene(spec)
        stack.check()
        assert set(np.unique(mask)) <= {0, 1}
        assert mask.any()

    def test_offset_translates_mask(self):
        a = generate_scene(disc_scene())[1]
        b = generate_scene(disc_scene(offset=(2, -3)))[1]
        np.testing.assert_array_equal(np.roll(a, (2, -3), axis=(0, 1)), b)


class TestSpeckle:
    def test_zero_sigma_identity(self):
        s = stack_of(np.random.default_rng(0).uniform(0, 2, (4, 5, 5)))
        np.testing.assert_array_equal(add_speckle(s, 0.0, 1).reflectivity, s.reflectivity)

    def test_reproducible(self):
        s = stack_of(np.ones((4, 5, 5)))
        np.testing.assert_array_equal(add_speckle(s, 0.1, 7).reflectivity, add_speckle(s, 0.1, 7).reflectivity)

    def test_mean_factor(self):
        s = stack_of(np.ones((1, 1000, 1000)))
        sigma = 0.1
        out = add_speckle(s, sigma, 11).reflectivity
        # mean of max(0, X) for X ~ N(1, sigma^2)
        expected = stats.norm.cdf(1 / sigma) + sigma * stats.norm.pdf(1 / sigma)
        assert abs(out.mean() - expected) < 0.01 * expected
        assert out.min() >= 0

    def test_heavy_speckle_stays_nonnegative(self):
        out = add_speckle(stack_of(np.ones((2, 50, 50))), 2.0, 3).reflectivity
        assert out.min() >= 0

    def test_negative_sigma(self):
        with pytest.raises(ValueError):
            add_speckle(stack_of(np.ones((1, 2, 2))), -0.1, 0)


class TestHaze:
    def test_identity_without_blur(self):
        s = stack_of(np.random.default_rng(0).uniform(0, 1, (3, 8, 8)))
        np.testing.assert_array_equal(add_haze(s, (1, 1, 5, 5), 1.0, blur=False).reflectivity, s.reflectivity)

    def test_whole_image_halved(self):
        s = stack_of(np.random.default_rng(1).uniform(0, 1, (2, 8, 8)))
        out = add_haze(s, (0, 0, 8, 8), 0.5, blur=False).reflectivity
        np.testing.assert_allclose(out, 0.5 * s.reflectivity)

    def test_box_blur_oracle(self):
        s = stack_of(np.full((1, 8, 8), 2.0))
        rect = (2, 3, 6, 7)
        scaled = s.reflectivity[0].copy()
        scaled[2:6, 3:7] *= 0.5
        padded = np.pad(scaled, 2, mode="edge")
        expected = s.reflectivity[0].copy()
        for r in range(2, 6):
            for c in range(3, 7):
                expected[r, c] = padded[r:r + 5, c:c + 5].sum() / 25.0
        np.testing.assert_allclose(add_haze(s, rect, 0.5).reflectivity[0], expected, atol=1e-12)

    def test_patch_outside_rejected(self):
        with pytest.raises(ValueError):
            add_haze(stack_of(np.ones((1, 4, 4))), (0, 0, 5, 4), 0.5)


def square_mask(size=32, lo=10, hi=18):
    m = np.zeros((size, size), dtype=np.uint8)
    m[lo:hi, lo + 2:hi + 2] = 1
    return m


def random_image(rng, size=32):
    return CsasImage(rng.uniform(0, 1, (size, size, 3)))


class TestAugment:
    def test_empty_policy_identity(self, rng):
        img, m = random_image(rng), square_mask()
        out, om = augment(img, m, AugmentPolicy())
        np.testing.assert_array_equal(out.hsv, img.hsv)
        np.testing.assert_array_equal(om, m)

    def test_translation_moves_centroid(self, rng):
        m = square_mask()
        _, om = augment(random_image(rng), m, AugmentPolicy(translate=(5, 0)))
        c0 = np.argwhere(m).mean(0)
        c1 = np.argwhere(om).mean(0)
        np.testing.assert_allclose(c1 - c0, [5.0, 0.0])

    def test_rotation_90(self, rng):
        m = square_mask()
        _, om = augment(random_image(rng), m, AugmentPolicy(rotate=90))
        np.testing.assert_array_equal(om, np.rot90(m))

    def test_rotation_shifts_hue(self):
        hsv = np.zeros((16, 16, 3))
        hsv[..., 0], hsv[..., 1], hsv[..., 2] = 0.0, 1.0, 0.5
        out, _ = augment(CsasImage(hsv), np.zeros((16, 16), np.uint8), AugmentPolicy(rotate=90))
        # 90 degrees sits between the 0 (hue 0) and 120 (hue 2/3) anchors, going backwards round the wheel
        assert out.hue[8, 8] == pytest.approx(1 - 0.25, abs=1e-9)

    def test_no_hue_shift_for_ordinary_colour(self, rng):
        img = random_image(rng, 16)
        out, _ = augment(img, np.zeros((16, 16), np.uint8), AugmentPolicy(rotate=180), rotate_hue=False)
        np.testing.assert_allclose(out.hue, np.rot90(img.hue, 2), atol=1e-9)

    @given(st.integers(-6, 6), st.integers(-6, 6))
    def test_integer_translation_inverts(self, dr, dc):
        m = square_mask()
        img = CsasImage(np.full((32, 32, 3), 0.5))
        pol = AugmentPolicy(translate=(dr, dc))
        _, om = augment(img, m, pol)
        _, back = augment(img, om, pol.inverse())
        np.testing.assert_array_equal(back, m)

    def test_mask_stays_binary(self, rng):
        _, om = augment(random_image(rng), square_mask(), AugmentPolicy(rotate=33, scale=1.07))
        assert set(np.unique(om)) <= {0, 1}

    def test_nonpositive_scale_rejected(self):
        with pytest.raises(ValueError):
            AugmentPolicy(scale=0.0)
