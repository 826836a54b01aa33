import numpy as np
import pytest
from skimage.color import rgb2hsv

from sas_saliency.aspect_color import CsasImage
from sas_saliency.detectors import (BUILTIN_DETECTORS, boundary_prior, color_contrast, load_map, minmax,
                                    run_detectors, spectral_residual)
from sas_saliency.io import save_png


def square_image(size=32, fg=(0.9, 0.1, 0.1), bg=(0.2, 0.3, 0.7)):
    rgb = np.empty((size, size, 3))
    rgb[:] = bg
    rgb[12:20, 12:20] = fg
    return CsasImage(rgb2hsv(rgb))


def inside_minus_outside(m):
    fg = np.zeros(m.shape, dtype=bool)
    fg[12:20, 12:20] = True
    return m[fg].mean() - m[~fg].mean()


class TestDetectors:
    def test_minmax(self):
        np.testing.assert_allclose(minmax(np.array([2.0, 4.0, 3.0])), [0, 1, 0.5])
        np.testing.assert_array_equal(minmax(np.full(4, 7.0)), np.zeros(4))

    @pytest.mark.parametrize("name", ["color_contrast", "boundary_prior"])
    def test_square_is_salient(self, name):
        m = BUILTIN_DETECTORS[name](square_image())
        assert m.shape == (32, 32) and m.min() >= 0 and m.max() <= 1
        assert inside_minus_outside(m) > 0.2

    def test_spectral_residual_peaks_on_square_outline(self):
        # the residual marks the edges of an object wider than its blur, not the flat interior
        m = spectral_residual(square_image())
        r, c = np.unravel_index(np.argmax(m), m.shape)
        assert 10 <= r <= 21 and 10 <= c <= 21 and m.min() >= 0

    def test_uniform_image_gives_zero(self):
        flat = CsasImage(rgb2hsv(np.full((16, 16, 3), 0.4)))
        for det in (color_contrast, boundary_prior):
            np.testing.assert_allclose(det(flat), 0.0, atol=1e-12)

    def test_accepts_plain_rgb(self):
        img = square_image()
        np.testing.assert_allclose(color_contrast(img.to_rgb()), color_contrast(img), atol=1e-12)

    def test_stack_and_unknown_name(self):
        out = run_detectors(square_image(), ["color_contrast", "boundary_prior"])
        assert out.shape == (2, 32, 32)
        with pytest.raises(KeyError):
            run_detectors(square_image(), ["nope"])


class TestExternalMaps:
    def test_npy_clipped(self, tmp_path):
        np.save(tmp_path / "m.npy", np.array([[-0.5, 0.3], [0.7, 2.0]]))
        np.testing.assert_allclose(load_map(tmp_path / "m.npy"), [[0, 0.3], [0.7, 1]])

    def test_png_scaled(self, tmp_path):
        save_png(tmp_path / "m.png", np.array([[0.0, 1.0]]))
        np.testing.assert_allclose(load_map(tmp_path / "m.png"), [[0.0, 1.0]])

    def test_rejects_3d(self, tmp_path):
        np.save(tmp_path / "m.npy", np.zeros((2, 2, 2)))
        with pytest.raises(ValueError):
            load_map(tmp_path / "m.npy")
