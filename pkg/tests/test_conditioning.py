from __future__ import annotations

import numpy as np
import pytest
from PIL import Image

from src.conditioning import canny, to_grayscale
from src.errors import BadThresholds, DecodeError
from src.images import from_png_bytes


def vertical_step(size: int = 64) -> np.ndarray:
    image = np.zeros((size, size), dtype=np.float64)
    image[:, size // 2 :] = 1.0
    return image


def test_constant_image_has_no_edges():
    image = np.full((64, 64, 3), 137, dtype=np.uint8)
    assert canny(image).edge_count == 0


def test_vertical_step_edges_stay_on_the_transition():
    edges = canny(vertical_step(), low_threshold=0.1, high_threshold=0.3, blur_sigma=1.0).pixels
    columns = np.unique(np.nonzero(edges)[1])
    assert set(columns.tolist()) <= {30, 31, 32, 33}
    assert all(edges[row].any() for row in range(1, 63))


def test_higher_thresholds_on_the_step_give_a_subset():
    step = vertical_step()
    loose = canny(step, 0.1, 0.3, 1.0).pixels
    strict = canny(step, 0.9, 0.95, 1.0).pixels
    assert not (strict & ~loose).any()


def test_threshold_monotonicity_on_random_images():
    rng = np.random.default_rng(2024)
    for _ in range(50):
        image = rng.integers(0, 256, size=(32, 40, 3), dtype=np.uint8)
        loose = canny(image, 0.05, 0.15, 1.0).pixels
        strict = canny(image, 0.1, 0.3, 1.0).pixels
        assert not (strict & ~loose).any()


@pytest.mark.parametrize("shape", [(5, 5), (17, 33, 3), (40, 12, 4), (8, 8, 1)])
def test_dimensions_are_preserved(shape):
    image = np.random.default_rng(0).integers(0, 256, size=shape, dtype=np.uint8)
    edges = canny(image)
    assert edges.pixels.shape == shape[:2]
    assert (edges.height, edges.width) == shape[:2]


def test_border_frame_is_never_an_edge():
    image = np.random.default_rng(3).integers(0, 256, size=(24, 24), dtype=np.uint8)
    pixels = canny(image, 0.01, 0.02, 0.0).pixels
    assert not pixels[0].any() and not pixels[-1].any()
    assert not pixels[:, 0].any() and not pixels[:, -1].any()


def test_translation_moves_interior_edges():
    image = np.zeros((48, 48), dtype=np.uint8)
    image[15:25, 12:22] = 255
    moved = np.roll(image, (4, 3), axis=(0, 1))

    edges = canny(image).pixels
    shifted = canny(moved).pixels
    assert edges.any()
    assert np.array_equal(np.roll(edges, (4, 3), axis=(0, 1)), shifted)


def test_canny_is_deterministic():
    image = np.random.default_rng(9).integers(0, 256, size=(20, 20, 3), dtype=np.uint8)
    assert canny(image) == canny(image)


@pytest.mark.parametrize("low, high", [(0.3, 0.2), (0.0, 0.2), (0.2, 0.2), (0.1, 1.5)])
def test_bad_thresholds(low, high):
    with pytest.raises(BadThresholds):
        canny(np.zeros((8, 8)), low, high)


def test_negative_sigma_is_rejected():
    with pytest.raises(BadThresholds):
        canny(np.zeros((8, 8)), blur_sigma=-1.0)


def test_grayscale_uses_rec601_weights():
    pixel = np.array([[[255, 0, 0]]], dtype=np.uint8)
    assert to_grayscale(pixel)[0, 0] == pytest.approx(0.299)
    assert to_grayscale(Image.new("L", (3, 2), 255)).shape == (2, 3)


def test_empty_image_cannot_be_read():
    with pytest.raises(DecodeError):
        to_grayscale(np.zeros((0, 0, 3), dtype=np.uint8))


def test_edge_map_png_is_black_and_white(tmp_path):
    image = np.zeros((16, 16), dtype=np.uint8)
    image[4:12, 4:12] = 255
    edges = canny(image)
    decoded = from_png_bytes(edges.to_png_bytes(), mode="L")
    assert set(np.unique(decoded).tolist()) <= {0, 255}
    assert np.array_equal(decoded == 255, edges.pixels)
    assert edges.save(tmp_path / "e.png").is_file()
