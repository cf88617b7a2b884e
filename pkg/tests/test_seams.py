import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from neural_retarget import fixtures
from neural_retarget.deform import ImageDomain, render_output
from neural_retarget.raster import RasterImage
from neural_retarget.seams import (
    Seam, SeamGrid, carve, energy_map, expand_seams, min_seam, remove_seam, seam_cost, seam_step_field,
    select_seams,
)


def brute_force_min(grid):
    """Cheapest vertical connected path by enumerating every start and every step sequence."""
    h, w = grid.shape
    best = np.inf
    for start in range(w):
        for steps in itertools.product((-1, 0, 1), repeat=h - 1):
            j, cost, ok = start, grid[0, start], True
            for i, s in enumerate(steps, 1):
                j += s
                if not 0 <= j < w:
                    ok = False
                    break
                cost += grid[i, j]
            if ok:
                best = min(best, cost)
    return best


def test_two_by_two_oracle():
    seam, cost = min_seam([[1, 2], [3, 1]])
    assert cost == 2 and list(seam.indices) == [0, 1]
    assert cost == brute_force_min(np.array([[1, 2], [3, 1]], float))


def test_uniform_grid_cost():
    seam, cost = min_seam(np.full((7, 5), 0.5))
    assert cost == pytest.approx(3.5)


def test_single_column():
    g = np.array([[1.0], [2.0], [4.0]])
    seam, cost = min_seam(g)
    assert cost == 7 and list(seam.indices) == [0, 0, 0]


@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**32 - 1))
@settings(max_examples=60, deadline=None)
def test_min_seam_matches_enumeration(h, w, seed):
    g = np.random.default_rng(seed).integers(0, 5, (h, w)).astype(float)
    seam, cost = min_seam(g)
    assert cost == brute_force_min(g)
    assert seam_cost(g, seam) == cost


def test_horizontal_is_transpose():
    g = np.random.default_rng(2).random((4, 6))
    s_h, c_h = min_seam(g, "horizontal")
    s_v, c_v = min_seam(g.T, "vertical")
    assert c_h == c_v and np.array_equal(s_h.indices, s_v.indices)


def test_disconnected_seam_rejected():
    with pytest.raises(ValueError):
        Seam([0, 2, 2])


@pytest.mark.parametrize("bad", [np.array([[1.0, -1.0]]), np.array([[np.nan]]), np.zeros((0, 3))])
def test_grid_validation(bad):
    with pytest.raises(ValueError):
        SeamGrid(bad)


# -- energy -----------------------------------------------------------------------

def test_energy_constant_zero():
    assert np.all(energy_map(fixtures.constant(5, 4)).energy == 0)


def test_energy_step_edge_two_columns():
    px = np.zeros((4, 6, 3), np.uint8)
    px[:, 3:] = 255
    e = energy_map(RasterImage(px)).energy
    assert set(np.flatnonzero(e.sum(axis=0))) == {2, 3}


def test_energy_hand_computed():
    f = np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
    e = energy_map(f).energy
    # central differences, edges clamped: e = |dx| + |dy|
    dx = np.array([[0.5, 0.0, -0.5], [0.0, 0.0, 0.0], [-0.5, -0.5, 0.0]])
    dy = np.array([[0.0, -0.5, 0.0], [0.5, -0.5, 0.0], [0.5, 0.0, 0.0]])
    np.testing.assert_allclose(e, np.abs(dx) + np.abs(dy))


# -- carve and expand -------------------------------------------------------------

def test_carve_zero_is_identity():
    img = fixtures.natural(12)
    assert carve(img, 0) == img
    assert expand_seams(img, 0) == img


def test_carve_constant():
    out = carve(fixtures.constant(8, 6), 1)
    assert out.width == 7 and np.all(out.pixels == 128)
    out = expand_seams(fixtures.constant(8, 6), 1)
    assert out.width == 9 and np.all(out.pixels == 128)


@pytest.mark.parametrize("n", [-1, 8])
def test_carve_rejects_bad_counts(n):
    with pytest.raises(ValueError):
        carve(fixtures.constant(8, 6), n)


def test_carve_keeps_stripe():
    img = fixtures.stripe(32, 32, 8)
    before = fixtures.stripe_mask(img).any(axis=0).sum()
    out = carve(img, 12)
    assert fixtures.stripe_mask(out).any(axis=0).sum() == before


def test_carve_horizontal():
    img = fixtures.natural(10)
    assert carve(img, 3, "horizontal").pixels.shape == (7, 10, 3)


@given(st.integers(0, 10_000))
@settings(max_examples=15, deadline=None)
def test_carving_never_increases_energy(seed):
    img = fixtures.random_texture(10, 8, seed)
    e0 = energy_map(img).energy.sum()
    e1 = energy_map(carve(img, 1)).energy.sum()
    assert e1 <= e0 + 1e-9


def corridor_runs(image):
    """Lengths of the runs of background-coloured pixels in every row."""
    runs = []
    for row in np.all(image.pixels == fixtures.BACKGROUND, axis=2):
        edges = np.flatnonzero(np.diff(np.r_[0, row.astype(int), 0]))
        runs.append(list(edges[1::2] - edges[::2]))
    return runs


def test_expand_widens_corridors():
    img = fixtures.corridors()
    out = expand_seams(img, 2)
    assert out.width == img.width + 2
    assert all(r == [4, 4] for r in corridor_runs(out))
    # the texture outside the corridors is carried over unchanged
    textured = ~np.all(img.pixels == fixtures.BACKGROUND, axis=2)[0]
    out_textured = ~np.all(out.pixels == fixtures.BACKGROUND, axis=2)[0]
    np.testing.assert_array_equal(out.pixels[:, out_textured], img.pixels[:, textured])


def test_selected_seams_are_disjoint():
    seams = select_seams(fixtures.natural(12), 4)
    for i in range(seams.shape[1]):
        assert len(set(seams[:, i])) == 4


def test_remove_seam_shapes():
    a = np.arange(12).reshape(3, 4)
    out = remove_seam(a, Seam([1, 2, 3]))
    np.testing.assert_array_equal(out, [[0, 2, 3], [4, 5, 7], [8, 9, 10]])


# -- step construction ------------------------------------------------------------

class NearestField:
    """Exact pixel lookup standing in for a perfectly fitted image field."""

    def __init__(self, image):
        self.f = image.normalized()

    def __call__(self, p):
        h, w = self.f.shape[:2]
        p = np.asarray(p)
        c = np.clip(np.floor(p[:, 0] * w).astype(int), 0, w - 1)
        r = np.clip(np.floor(p[:, 1] * h).astype(int), 0, h - 1)
        return self.f[r, c]


@pytest.mark.parametrize("orientation", ["vertical", "horizontal"])
def test_step_field_reproduces_carving(orientation):
    img = fixtures.random_texture(16, 16, 3)
    removed = select_seams(img, 1, orientation)
    D = seam_step_field(removed[:1], 16, 16, orientation)
    axis = "x" if orientation == "vertical" else "y"
    out = render_output(D, NearestField(img), ImageDomain(16, 16, axis, 15 / 16))
    expect = carve_with(img, removed[0], orientation)
    assert out == expect


def carve_with(img, seam, orientation):
    return RasterImage(remove_seam(img.pixels, Seam(seam, orientation)))


@given(st.integers(0, 10_000), st.integers(1, 4))
@settings(max_examples=20, deadline=None)
def test_step_field_reproduces_several_seams(seed, n):
    img = fixtures.random_texture(12, 10, seed)
    removed = select_seams(img, n)
    out = render_output(seam_step_field(removed, 12, 10), NearestField(img), ImageDomain(12, 10, "x", (12 - n) / 12))
    assert out == carve(img, n)
