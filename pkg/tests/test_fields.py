import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import spearmanr

from neural_retarget import fixtures
from neural_retarget.fields import (
    ClosedFormEnergy, ImageField, bilinear_at, Schedule, TrainingError, cumulative_at, cumulative_from_energy,
    cumulative_targets, energy_at, pixel_energy, sample_image, train_cumulative_energy,
    train_energy_field, train_image_field,
)
from neural_retarget.nn import MLP
from neural_retarget.raster import ImageError, RasterImage, pixel_centers, psnr


def ramp_image(w=16, h=16):
    v = np.floor((np.arange(w) + 0.5) / w * 255 + 0.5).astype(np.uint8)
    return RasterImage(np.repeat(np.tile(v, (h, 1))[..., None], 3, axis=2))


@pytest.fixture(scope="module")
def constant_field():
    # the full default schedule: residual wiggles between centres decay slowly
    return train_image_field(fixtures.constant(8, 8), seed=0)


@pytest.fixture(scope="module")
def ramp_field():
    return train_image_field(ramp_image(), Schedule(40, 100), seed=0)


# -- raster -----------------------------------------------------------------------

def test_raster_rejects_tiny():
    with pytest.raises(ImageError):
        RasterImage(np.zeros((1, 5, 3), np.uint8))


def test_pixel_centres():
    c = pixel_centers(4, 2)
    assert c.shape == (2, 4, 2)
    np.testing.assert_allclose(c[1, 3], [3.5 / 4, 1.5 / 2])


def test_png_round_trip(tmp_path):
    img = fixtures.natural(16, seed=3)
    img.write(tmp_path / "a.png")
    assert RasterImage.read(tmp_path / "a.png") == img
    img.write(tmp_path / "a.ppm")
    assert RasterImage.read(tmp_path / "a.ppm") == img


# -- image field ------------------------------------------------------------------

def test_constant_image_fit(constant_field):
    out = sample_image(constant_field, np.random.default_rng(0).random((50, 2)) * 0.9 + 0.05)
    assert np.abs(out - 128 / 255).max() < 1 / 255


def test_zero_schedule_returns_initial_network():
    img = fixtures.natural(8)
    field = train_image_field(img, Schedule(0, 100), seed=7)
    fresh = MLP.init(field.net.config, 7)
    for k in fresh.params:
        np.testing.assert_array_equal(field.net.params[k], fresh.params[k])


def test_zero_weights_sample_is_half():
    from neural_retarget.fields import IMAGE_FIELD_CONFIG

    field = ImageField(MLP.zeros(IMAGE_FIELD_CONFIG))
    np.testing.assert_array_equal(sample_image(field, np.array([[0.3, 0.8]])), 0.5)


def test_sample_is_pure(ramp_field):
    p = np.array([[0.21, 0.73]])
    assert sample_image(ramp_field, p).tobytes() == sample_image(ramp_field, p).tobytes()


def test_training_is_deterministic():
    img = fixtures.natural(8, seed=1)
    a = train_image_field(img, Schedule(1, 20), seed=4)
    b = train_image_field(img, Schedule(1, 20), seed=4)
    assert all(a.net.params[k].tobytes() == b.net.params[k].tobytes() for k in a.net.params)


# -- energy -----------------------------------------------------------------------

def test_energy_matches_finite_differences(ramp_field):
    # oracle: central differences of a float64 copy of the field, small step
    f64 = ImageField(MLP(ramp_field.net.config, {k: v.astype(np.float64) for k, v in ramp_field.net.params.items()}))
    p = np.random.default_rng(1).uniform(0.25, 0.75, (40, 2))

    def fd(h):
        out = np.zeros(len(p))
        for j in range(2):
            d = np.zeros(2)
            d[j] = h
            out += np.sum(((f64(p + d) - f64(p - d)) / (2 * h)) ** 2, axis=1)
        return np.sqrt(out)

    # a stencil that straddles a LeakyReLU kink is not a derivative; such points
    # show up as disagreement between two step sizes and are skipped
    a, b = fd(1e-6), fd(1e-7)
    smooth = np.abs(a - b) < 1e-4 * np.abs(a)
    assert smooth.sum() >= 30
    np.testing.assert_allclose(energy_at(f64, p)[smooth], a[smooth], rtol=1e-3)
    np.testing.assert_allclose(energy_at(ramp_field, p), energy_at(f64, p), rtol=1e-3)


def test_energy_of_ramp_field(ramp_field):
    # slope 1 per unit coordinate in each of three equal channels
    p = np.random.default_rng(2).uniform(0.1, 0.9, (200, 2))
    assert np.median(energy_at(ramp_field, p)) == pytest.approx(np.sqrt(3), rel=0.1)


def test_energy_nonnegative_and_small_for_constant(constant_field):
    e = ClosedFormEnergy(constant_field)(np.random.default_rng(0).random((200, 2)))
    assert np.all(e >= 0) and e.mean() < 0.05


def test_pixel_energy_hand_computed():
    px = np.zeros((3, 3, 3))
    px[:, 2] = 1.0  # vertical step between columns 1 and 2
    px[2, :, 0] += 0.5  # bottom row brighter in red
    e = pixel_energy(px)
    # forward differences, clamped at the last row/column
    expect = np.array([
        [0.0, np.sqrt(3), 0.0],
        [0.5, np.sqrt(3 + 0.25), 0.5],
        [0.0, np.sqrt(3), 0.0],
    ])
    np.testing.assert_allclose(e, expect)


# -- cumulative targets -----------------------------------------------------------

def test_cumulative_constant_is_zero():
    assert np.all(cumulative_targets(fixtures.constant(6, 4), "x") == 0)


def test_cumulative_of_delta_is_step():
    e = np.zeros((2, 8))
    e[:, 3] = 1.0
    c = cumulative_from_energy(e, "x")
    np.testing.assert_allclose(c[:, :3], 0)
    np.testing.assert_allclose(c[:, 4:], 1 / 8)


def test_cumulative_of_uniform_is_ramp():
    c = cumulative_from_energy(np.full((3, 10), 2.0), "x")
    np.testing.assert_allclose(c[0], 2.0 * (np.arange(10) + 0.5) / 10)
    c = cumulative_from_energy(np.full((10, 3), 2.0), "y")
    np.testing.assert_allclose(c[:, 0], 2.0 * (np.arange(10) + 0.5) / 10)


@given(st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_cumulative_monotone(seed):
    img = fixtures.random_texture(9, 7, seed=seed)
    for axis, ax in (("x", 1), ("y", 0)):
        assert np.all(np.diff(cumulative_targets(img, axis), axis=ax) >= 0)


def test_cumulative_at_interpolates():
    e = np.random.default_rng(0).random((4, 6))
    t = cumulative_from_energy(e, "x")
    centres = pixel_centers(6, 4).reshape(-1, 2)
    np.testing.assert_allclose(cumulative_at(t, "x", centres), t.reshape(-1))
    # leading edge is 0, far edge is the full integral of the piecewise-constant density
    edge = np.array([[0.0, 0.1], [1.0, 0.1]])
    got = cumulative_at(t, "x", edge)
    assert got[0] == 0.0
    assert got[1] == pytest.approx(e[0].sum() / 6)


def test_cumulative_at_is_exact_integral():
    e = np.random.default_rng(1).random((3, 8))
    t = cumulative_from_energy(e, "x")
    xs = np.random.default_rng(2).random(200)
    row = 1
    got = cumulative_at(t, "x", np.stack([xs, np.full(200, (row + 0.5) / 3)], 1))
    # oracle: integrate the piecewise-constant row density on a fine midpoint grid
    fine = (np.arange(80000) + 0.5) / 80000
    dens = e[row][np.minimum((fine * 8).astype(int), 7)]
    want = np.array([dens[fine < x].sum() / 80000 for x in xs])
    np.testing.assert_allclose(got, want, atol=1e-4)


def test_train_rejects_nan():
    with pytest.raises(TrainingError):
        train_cumulative_energy(np.full((4, 4), np.nan), "x", Schedule(1, 1))
    with pytest.raises(TrainingError):
        train_energy_field(np.full((4, 4), np.inf), Schedule(1, 1))


def quadrature(density, a, b, n=4000):
    """Midpoint-rule integral of a 1D density over [a, b]."""
    x = a + (np.arange(n) + 0.5) * (b - a) / n
    return float(np.sum(density(x)) * (b - a) / n)


@pytest.mark.parametrize("profile", ["zero", "ramp", "stripe"])
def test_trained_cumulative_matches_quadrature(profile):
    w, h = 32, 4
    xs = (np.arange(w) + 0.5) / w
    dens = {"zero": lambda x: 0 * x, "ramp": lambda x: 0 * x + 1.0,
            "stripe": lambda x: ((x >= 0.375) & (x < 0.625)).astype(float)}[profile]
    energy = np.tile(dens(xs), (h, 1))
    field = train_cumulative_energy(cumulative_from_energy(energy, "x"), "x", Schedule(30, 100), seed=0)
    y = 0.5
    for a, b in [(0.1, 0.3), (0.2, 0.8), (0.05, 0.95), (0.3, 0.7)]:
        got = field.segment_energy(np.array([[a, y]]), np.array([[b, y]]))[0]
        want = quadrature(dens, a, b)
        assert got == pytest.approx(want, rel=0.1, abs=0.01)


def test_trained_cumulative_rank_order():
    t = cumulative_targets(fixtures.natural(16, seed=2), "x")
    field = train_cumulative_energy(t, "x", Schedule(30, 100), seed=0)
    pred = field(pixel_centers(16, 16).reshape(-1, 2))
    assert spearmanr(pred, t.reshape(-1)).statistic >= 0.99


def test_bilinear_matches_scipy():
    from scipy.ndimage import map_coordinates

    v = np.random.default_rng(0).random((5, 7, 3))
    p = np.random.default_rng(1).random((50, 2))
    got = bilinear_at(v, p)
    r, c = p[:, 1] * 5 - 0.5, p[:, 0] * 7 - 0.5
    want = np.stack([map_coordinates(v[..., k], [r, c], order=1, mode="nearest") for k in range(3)], 1)
    np.testing.assert_allclose(got, want, atol=1e-12)
    np.testing.assert_allclose(bilinear_at(v, pixel_centers(7, 5).reshape(-1, 2)), v.reshape(-1, 3))
