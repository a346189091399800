import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ropedit.errors import ConfigError, DimensionError, EmptyMaskError
from ropedit.masks import (
    IdentityRefiner, binarize, extract_token_heatmap, full_mask, largest_component,
    refine_checked, sample_foreground_points,
)
from ropedit.numerics import SeededRng

from oracles import flood_fill_components, largest_by_flood_fill


def _attn(heads, text_len, grid, cols):
    """Attention weights whose image-query rows put ``cols[token]`` mass on each text key."""
    h, w = grid
    n = text_len + h * w
    a = np.zeros((heads, n, n))
    for token, col in cols.items():
        a[:, text_len:, token] = np.broadcast_to(np.asarray(col, float).reshape(-1, h * w), (heads, h * w))
    return a


# ---------------------------------------------------------------- heatmap


def test_uniform_attention_gives_zero_heatmap():
    a = np.full((2, 3 + 4, 3 + 4), 1 / 7)
    hm = extract_token_heatmap({0: a}, 1, [0], (2, 2), 3)
    assert np.array_equal(hm, np.zeros((2, 2)))


def test_single_layer_single_head_passthrough():
    col = np.array([0.0, 0.2, 0.6, 0.3, 0.1, 0.4])
    a = _attn(1, 2, (2, 3), {1: col})
    hm = extract_token_heatmap({0: a}, 1, [0], (2, 3), 2)
    expected = (col - col.min()) / (col.max() - col.min())
    np.testing.assert_allclose(hm, expected.reshape(2, 3))


def test_concentrated_mass_argmax():
    a = _attn(2, 4, (2, 2), {2: [0.05, 0.1, 0.8, 0.05]})
    hm = extract_token_heatmap({3: a}, 2, [3], (2, 2), 4)
    assert np.unravel_index(np.argmax(hm), hm.shape) == (1, 0)
    assert hm.min() == 0.0 and hm.max() == 1.0


def test_heads_and_layers_are_averaged():
    a = np.zeros((2, 1 + 2, 1 + 2))
    a[0, 1:, 0] = [1.0, 0.0]
    a[1, 1:, 0] = [0.0, 0.5]
    b = np.zeros_like(a)
    b[:, 1:, 0] = [0.0, 0.3]
    # head mean of a: [0.5, 0.25]; layer mean with b: [0.25, 0.275]
    hm = extract_token_heatmap({0: a, 1: b}, 0, [0, 1], (1, 2), 1)
    np.testing.assert_allclose(hm, [[0.0, 1.0]])
    hm0 = extract_token_heatmap({0: a}, 0, [0], (1, 2), 1, head_average=False)
    np.testing.assert_allclose(hm0, [[1.0, 0.0]])


def test_heatmap_errors():
    a = np.zeros((1, 6, 6))
    with pytest.raises(ConfigError):
        extract_token_heatmap({0: a}, 0, [], (2, 2), 2)
    with pytest.raises(ConfigError):
        extract_token_heatmap({0: a}, 2, [0], (2, 2), 2)
    with pytest.raises(DimensionError):
        extract_token_heatmap({0: a}, 0, [0], (3, 3), 2)


# --------------------------------------------------------------- binarize


def test_threshold_boundary():
    hm = np.array([[0.29, 0.30, 0.31]])
    assert binarize(hm, 0.3).tolist() == [[False, True, True]]
    assert binarize(hm).tolist() == [[False, True, True]]


def test_binarize_extremes():
    assert not binarize(np.zeros((3, 3))).any()
    assert binarize(np.ones((3, 3))).all()
    for bad in (0.0, 1.0, -0.2, 1.5):
        with pytest.raises(ConfigError):
            binarize(np.zeros((2, 2)), bad)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 0.98), st.floats(0.001, 0.3))
def test_raising_threshold_never_adds_cells(seed, lo, step):
    hm = np.random.default_rng(seed).random((6, 6))
    hi = min(lo + step, 0.99)
    assert not np.any(binarize(hm, hi) & ~binarize(hm, lo))


# ------------------------------------------------------ largest component


def test_diagonal_cells_are_separate_under_4_connectivity():
    m = np.array([[1, 0], [0, 1]], bool)
    out = largest_component(m, 4)
    assert out.tolist() == [[True, False], [False, False]]
    assert largest_component(m, 8).tolist() == m.tolist()


def test_single_cell():
    m = np.zeros((5, 5), bool)
    m[3, 2] = True
    assert np.array_equal(largest_component(m), m)


def test_empty_mask_raises():
    with pytest.raises(EmptyMaskError):
        largest_component(np.zeros((4, 4), bool))


def test_tie_goes_to_first_row_major_cell():
    m = np.zeros((4, 5), bool)
    m[0, 3:5] = True  # starts at (0, 3)
    m[2:4, 0] = True  # starts at (2, 0)
    out = largest_component(m)
    assert out[0, 3] and out[0, 4] and out.sum() == 2


def test_bad_connectivity():
    with pytest.raises(ConfigError):
        largest_component(np.ones((2, 2), bool), 6)


@pytest.mark.parametrize("connectivity", [4, 8])
def test_random_8x8_matches_flood_fill(connectivity):
    for seed in range(1000):
        rng = np.random.default_rng(seed)
        m = rng.random((8, 8)) < rng.uniform(0.2, 0.7)
        if not m.any():
            continue
        got = largest_component(m, connectivity)
        assert np.array_equal(got, largest_by_flood_fill(m, connectivity)), seed


@pytest.mark.slow
@pytest.mark.parametrize("connectivity", [4, 8])
def test_exhaustive_4x4_matches_flood_fill(connectivity):
    bits = 1 << np.arange(16)
    for code in range(1, 1 << 16):
        m = ((code & bits) > 0).reshape(4, 4)
        got = largest_component(m, connectivity)
        assert np.array_equal(got, largest_by_flood_fill(m, connectivity)), code


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([4, 8]))
def test_component_is_connected_subset(seed, connectivity):
    m = np.random.default_rng(seed).random((7, 9)) < 0.5
    if not m.any():
        return
    out = largest_component(m, connectivity)
    assert not np.any(out & ~m)
    assert len(flood_fill_components(out, connectivity)) == 1


# ---------------------------------------------------------------- sampling


def test_single_cell_sampling():
    m = np.zeros((4, 4), bool)
    m[1, 2] = True
    assert sample_foreground_points(m, 1, SeededRng(0, 1)) == [(1, 2)]
    assert sample_foreground_points(m, 3, SeededRng(0, 1)) == [(1, 2)] * 3


def test_sampled_points_lie_in_mask():
    for trial in range(1000):
        rng = np.random.default_rng(trial)
        m = rng.random((6, 6)) < 0.3
        if not m.any():
            continue
        k = int(rng.integers(1, 8))
        pts = sample_foreground_points(m, k, SeededRng(trial, 7))
        assert len(pts) == k
        assert all(m[p] for p in pts)
        if k <= m.sum():
            assert len(set(pts)) == k


def test_sampling_deterministic_and_errors():
    m = np.ones((5, 5), bool)
    assert sample_foreground_points(m, 4, SeededRng(3, 7)) == sample_foreground_points(m, 4, SeededRng(3, 7))
    with pytest.raises(EmptyMaskError):
        sample_foreground_points(np.zeros((2, 2), bool), 1, SeededRng(0, 0))
    with pytest.raises(ConfigError):
        sample_foreground_points(m, 0, SeededRng(0, 0))


# ---------------------------------------------------------------- refiner


def test_identity_refiner_is_exact():
    m = np.random.default_rng(4).random((6, 6)) < 0.4
    out = refine_checked(IdentityRefiner(), m, [(0, 0)])
    assert np.array_equal(out, m) and out is not m


def test_refiner_shape_checked():
    class Cropper:
        def refine(self, coarse, points):
            return coarse[:-1]

    with pytest.raises(DimensionError):
        refine_checked(Cropper(), full_mask(3, 3), [])
