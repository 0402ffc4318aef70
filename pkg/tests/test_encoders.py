import numpy as np
import pytest

from claps.encoders import COORD_CHANNELS, ClipEncoder, DetectorEncoder, block_mean, coord_channels


def blob(sign, size=64):
    img = np.full((size, size), 128.0)
    yy, xx = np.mgrid[0:size, 0:size]
    img[(yy - 30) ** 2 + (xx - 22) ** 2 < 36] += sign * 80
    return img


def test_shapes_and_declared_channels():
    img = np.random.default_rng(0).uniform(0, 255, (224, 224))
    for enc, g in ((DetectorEncoder(16), 16), (ClipEncoder(8), 8)):
        out = enc(img)
        assert out.shape == (enc.channels, g, g)
        assert np.all(np.isfinite(out))


def test_block_mean():
    x = np.arange(16.0).reshape(4, 4)
    np.testing.assert_array_equal(block_mean(x, 2), [[2.5, 4.5], [10.5, 12.5]])
    with pytest.raises(ValueError, match="divisible"):
        block_mean(np.zeros((5, 5)), 2)


def test_detector_is_polarity_blind_clip_is_not():
    det, clip = DetectorEncoder(8), ClipEncoder(8)
    np.testing.assert_allclose(det(blob(+1)), det(blob(-1)), atol=1e-6)
    assert np.abs(clip(blob(+1)) - clip(blob(-1))).max() > 0.1


def test_coordinate_dot_product_peaks_at_colocation():
    c = coord_channels(8).reshape(COORD_CHANNELS, -1)
    gram = c.T @ c
    np.testing.assert_array_equal(np.argmax(gram, axis=1), np.arange(64))

