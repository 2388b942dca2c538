import numpy as np
import pytest

from tsdet.errors import ValidationError
from tsdet.features import FEATURE_DIM, ImageFeatures, extract_features


class TestFeatureLayout:
    def test_uniform_image_statistics(self):
        pixels = np.full((64, 64, 3), 100, dtype=np.uint8)  # bin 1 of 4
        f = extract_features(pixels, (10, 10, 30, 30))
        assert f.shape == (FEATURE_DIM,)
        np.testing.assert_allclose(f[0:3], 100 / 255.0)
        hist = f[3:15].reshape(3, 4)
        np.testing.assert_allclose(hist[:, 1], 1.0)
        np.testing.assert_allclose(hist[:, [0, 2, 3]], 0.0)
        np.testing.assert_allclose(f[18:21], 0.0, atol=1e-12)  # no ring contrast
        assert f[21] == 1.0

    def test_geometry_terms(self):
        pixels = np.zeros((64, 64, 3), dtype=np.uint8)
        f = extract_features(pixels, (8, 8, 8 + 10, 8 + 20))
        assert f[15] == pytest.approx(np.log(10))
        assert f[16] == pytest.approx(np.log(20))
        assert f[17] == pytest.approx(np.log(0.5))

    def test_contrast_sign(self):
        pixels = np.zeros((64, 64, 3), dtype=np.uint8)
        pixels[20:30, 20:30] = 200  # bright box on dark field
        f = extract_features(pixels, (20, 20, 30, 30))
        assert np.all(f[18:21] > 0.5)

    def test_finite_on_random_boxes(self, rng):
        pixels = rng.integers(0, 256, size=(96, 80, 3), dtype=np.uint8)
        feats = ImageFeatures(pixels)
        boxes = []
        for _ in range(10_000):
            w, h = rng.uniform(6, 60, 2)
            x = rng.uniform(-5, 80 - 2)
            y = rng.uniform(-5, 96 - 2)
            boxes.append((x, y, x + w, y + h))
        out = feats.for_boxes(np.array(boxes))
        assert np.all(np.isfinite(out))

    def test_degenerate_box_rejected(self):
        pixels = np.zeros((32, 32, 3), dtype=np.uint8)
        with pytest.raises(ValidationError):
            extract_features(pixels, (40, 40, 50, 50))  # fully outside

    def test_translation_invariance(self, rng):
        base = rng.integers(0, 256, size=(48, 48, 3), dtype=np.uint8)
        for _ in range(30):
            dx, dy = int(rng.integers(1, 16)), int(rng.integers(1, 16))
            big = np.zeros((96, 96, 3), dtype=np.uint8)
            big[10:58, 10:58] = base
            shifted = np.zeros((96, 96, 3), dtype=np.uint8)
            shifted[10 + dy:58 + dy, 10 + dx:58 + dx] = base
            # box strictly inside the pasted block, ring included
            x, y = float(rng.uniform(14, 30)), float(rng.uniform(14, 30))
            w, h = float(rng.uniform(4, 20)), float(rng.uniform(4, 20))
            f1 = extract_features(big, (x, y, x + w, y + h))
            f2 = extract_features(shifted, (x + dx, y + dy, x + dx + w, y + dy + h))
            np.testing.assert_allclose(f1, f2, atol=1e-10)

    def test_batch_matches_single(self, rng):
        pixels = rng.integers(0, 256, size=(64, 64, 3), dtype=np.uint8)
        feats = ImageFeatures(pixels)
        boxes = np.array([[5, 5, 20, 25], [0, 0, 64, 64], [30.5, 12.2, 40.9, 33.3]])
        batch = feats.for_boxes(boxes)
        for i, b in enumerate(boxes):
            np.testing.assert_array_equal(batch[i], extract_features(pixels, b))
