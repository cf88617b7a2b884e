import numpy as np
import pytest

from neural_retarget import fixtures
from neural_retarget.editing import (
    MOVE_REGULARIZER, EditJob, build_mask_field, loss_move, loss_removal, move_object, object_centroid,
    remove_object,
)
from neural_retarget.fields import Schedule
from neural_retarget.pipeline import FieldSchedules, identity_resample, train_fields
from neural_retarget.raster import RasterImage

N = 16
GRID = (np.stack(np.meshgrid((np.arange(N) + 0.5) / N, (np.arange(N) + 0.5) / N), -1)).reshape(-1, 2)


def zero_D(p):
    return np.zeros(len(np.asarray(p).reshape(-1, 2)))


def const_D(c):
    return lambda p: np.full(len(np.asarray(p).reshape(-1, 2)), c)


# -- mask field -------------------------------------------------------------------

def test_mask_field_extremes():
    assert np.all(build_mask_field(np.zeros((N, N), bool))(GRID) == 0)
    assert np.allclose(build_mask_field(np.ones((N, N), bool))(GRID), 1)


def test_mask_field_half_plane_boundary():
    m = np.zeros((N, N), bool)
    m[:, : N // 2] = True
    f = build_mask_field(m, sigma=2.0)
    edge = np.array([[0.5, y] for y in (0.25, 0.5, 0.75)])
    np.testing.assert_allclose(f(edge), 0.5, atol=1e-6)


def test_mask_field_translation():
    m = np.zeros((N, N), bool)
    m[4:8, 4:8] = True
    f = build_mask_field(m, 1.0)
    d = np.array([0.25, 0.125])
    np.testing.assert_allclose(f.translated(d)(GRID + d), f(GRID))


def test_mask_shape_mismatch():
    with pytest.raises(ValueError):
        build_mask_field(np.zeros((4, 5)), shape=(5, 4))
    with pytest.raises(ValueError):
        EditJob(fixtures.constant(8, 8), np.zeros((8, 9), bool))


# -- loss examples ----------------------------------------------------------------

def test_removal_loss_examples():
    assert loss_removal(zero_D, build_mask_field(np.zeros((N, N), bool)), GRID) == 0
    m = np.zeros((N, N), bool)
    m[:, :4] = True
    # identity lookup reads the mask itself, so the loss equals the unblurred area
    assert loss_removal(zero_D, build_mask_field(m, sigma=0), GRID) == pytest.approx(0.25)


def test_move_loss_examples():
    m = np.zeros((N, N), bool)
    m[4:8, 4:8] = True
    f = build_mask_field(m, sigma=0)
    assert loss_move(zero_D, f, 0.0, GRID) == 0
    delta = 0.25
    # D = 0 misses the target offset inside the shifted mask (|delta| there) and leaves
    # the 4x4 object visible at its old place, outside the target (16 / 256 of the grid)
    assert loss_move(zero_D, f, delta, GRID) == pytest.approx(delta + 16 / 256)
    # D = -delta reads the object from its old place: only the regulariser remains
    assert loss_move(const_D(-delta), f, delta, GRID) == pytest.approx(MOVE_REGULARIZER * delta)


def test_move_outside_rejected():
    img, mask = fixtures.square_scene()
    with pytest.raises(ValueError):
        EditJob(img, mask, "move", offset=(0.9, 0.0))
    with pytest.raises(ValueError):
        EditJob(img, mask, "paint")


# -- full edits on a tiny image ---------------------------------------------------

QUICK = dict(init_schedule=Schedule(20, 100), schedule=Schedule(3, 50))
FS = FieldSchedules(Schedule(20, 100), Schedule(5, 100), Schedule(5, 100))


@pytest.fixture(scope="module")
def tiny():
    img = fixtures.random_texture(12, 12, seed=3)
    return img, train_fields(img, ("x", "y"), FS, seed=0)


@pytest.mark.parametrize("mode", ["remove", "move"])
def test_empty_mask_is_identity(tiny, mode):
    img, fields = tiny
    job = EditJob(img, np.zeros((12, 12), bool), mode, **QUICK)
    res = (remove_object if mode == "remove" else move_object)(job, fields)
    ref = identity_resample(fields).pixels.astype(int)
    assert np.abs(res.image.pixels.astype(int) - ref).mean() < 2
    assert res.residual < 1e-3


def test_full_mask_is_infeasible(tiny):
    img, fields = tiny
    res = remove_object(EditJob(img, np.ones((12, 12), bool), "remove", **QUICK), fields)
    assert res.residual >= 0.5


def test_object_centroid():
    img, mask = fixtures.square_scene(48, 48, side=10, corner=(8, 8))
    assert object_centroid(img) == (13.0, 13.0)
    assert np.isnan(object_centroid(RasterImage(np.full((4, 4, 3), 128, np.uint8)))[0])
