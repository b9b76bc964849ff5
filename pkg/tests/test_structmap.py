import numpy as np
import oracles
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sspfusion.structmap import (
    Polarity,
    binarize_by_global_mean,
    edge_map_for_display,
    sobel_magnitude,
    structure_pyramid_gt,
)


def test_constant_image_has_no_gradient():
    assert not sobel_magnitude(np.full((6, 7), 0.3)).any()


def test_vertical_step_edge():
    img = np.zeros((8, 10))
    img[:, 5:] = 1.0
    mag = sobel_magnitude(img)
    expected = oracles.sobel_magnitude(img)
    np.testing.assert_allclose(mag, expected, atol=1e-6)
    # unnormalised kernel: a unit step gives 4 on the two columns straddling it
    np.testing.assert_allclose(mag[:, 4:6], 4.0)
    assert not mag[:, :4].any() and not mag[:, 6:].any()


def test_random_plane_matches_convolution_oracle(rng):
    img = rng.uniform(size=(5, 5))
    np.testing.assert_allclose(sobel_magnitude(img), oracles.sobel_magnitude(img), atol=1e-6)


def test_empty_image_rejected():
    with pytest.raises(ValueError):
        sobel_magnitude(np.zeros((0, 4)))


def test_binarize_substitution():
    plane = np.array([[0.0, 2.0]])
    np.testing.assert_array_equal(binarize_by_global_mean(plane, "literal"), [[1, 0]])
    np.testing.assert_array_equal(binarize_by_global_mean(plane, "edge"), [[0, 1]])
    np.testing.assert_array_equal(binarize_by_global_mean(np.zeros((3, 3)), Polarity.LITERAL), np.ones((3, 3)))


@pytest.mark.parametrize("polarity", ["edge", "literal"])
def test_binarize_matches_scalar_oracle(rng, polarity):
    plane = rng.uniform(size=(16, 16))
    np.testing.assert_array_equal(binarize_by_global_mean(plane, polarity), oracles.binarize(plane, polarity))


def test_pyramid_constant_image():
    pyr = structure_pyramid_gt(np.full((64, 64), 0.4), 3, "literal")
    assert [lvl.shape for lvl in pyr.levels] == [(64, 64), (32, 32), (16, 16)]
    assert all(lvl.all() for lvl in pyr.levels)


def test_single_level_pyramid(rng):
    img = rng.uniform(size=(12, 9))
    pyr = structure_pyramid_gt(img, 1)
    np.testing.assert_array_equal(pyr.levels[0], binarize_by_global_mean(sobel_magnitude(img)))


@pytest.mark.parametrize("polarity", ["edge", "literal"])
def test_checkerboard_pyramid_against_composed_oracle(polarity):
    yy, xx = np.mgrid[0:32, 0:32]
    img = (((yy // 3) + (xx // 5)) % 2).astype(float)
    pyr = structure_pyramid_gt(img, 3, polarity)
    cur = img
    for k in range(3):
        if k:
            cur = oracles.pool2(cur)
        np.testing.assert_array_equal(pyr.levels[k], oracles.binarize(oracles.sobel_magnitude(cur), polarity))


def test_pyramid_too_small():
    with pytest.raises(ValueError):
        structure_pyramid_gt(np.zeros((3, 8)), 3)
    with pytest.raises(ValueError):
        structure_pyramid_gt(np.zeros((8, 8)), 0)


def test_odd_sizes_floor_halve():
    pyr = structure_pyramid_gt(np.random.default_rng(0).uniform(size=(13, 11)), 3)
    assert [lvl.shape for lvl in pyr.levels] == [(13, 11), (6, 5), (3, 2)]


def test_edge_map_constant_and_single_pixel():
    # every pixel ties with the mean; the inclusive tie-break marks them all
    assert edge_map_for_display(np.full((7, 7), 0.5)).all()
    img = np.zeros((7, 7))
    img[3, 3] = 1.0
    np.testing.assert_array_equal(edge_map_for_display(img), oracles.binarize(oracles.sobel_magnitude(img), "edge"))
    ring = np.zeros((7, 7), dtype=np.uint8)
    ring[2:5, 2:5] = 1
    ring[3, 3] = 0
    np.testing.assert_array_equal(edge_map_for_display(img), ring)


def test_edge_map_step_is_one_vertical_band():
    img = np.zeros((9, 12))
    img[:, 6:] = 1.0
    emap = edge_map_for_display(img)
    cols = np.flatnonzero(emap.any(axis=0))
    assert cols.tolist() == [5, 6]
    assert emap[:, cols].all()


planes = st.integers(0, 2**31 - 1).map(lambda s: np.random.default_rng(s).uniform(size=(16, 16)))


@settings(max_examples=40, deadline=None)
@given(planes)
def test_polarities_are_complements_off_the_mean(img):
    grad = sobel_magnitude(img)
    edge = binarize_by_global_mean(grad, "edge")
    literal = binarize_by_global_mean(grad, "literal")
    off = grad != grad.mean()
    np.testing.assert_array_equal(edge[off] + literal[off], 1)


@settings(max_examples=40, deadline=None)
@given(planes, st.sampled_from([0.25, 0.5, 2.0, 8.0]))
def test_positive_scaling_leaves_maps_unchanged(img, scale):
    for pol in ("edge", "literal"):
        a = structure_pyramid_gt(img, 3, pol)
        b = structure_pyramid_gt(img * scale, 3, pol)
        for la, lb in zip(a.levels, b.levels):
            np.testing.assert_array_equal(la, lb)


@settings(max_examples=20, deadline=None)
@given(planes)
def test_pyramid_deterministic_and_binary(img):
    a = structure_pyramid_gt(img, 3)
    b = structure_pyramid_gt(img.copy(), 3)
    for la, lb in zip(a.levels, b.levels):
        assert la.tobytes() == lb.tobytes()
        assert set(np.unique(la)) <= {0, 1}
