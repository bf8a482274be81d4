import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from voxlift.geometry import (CameraView, Extrinsics, Intrinsics, VoxelGridSpec, in_view, in_view_mask,
                              nearest_views, project_point, project_points, unproject, upsample_spec,
                              voxel_center)

from conftest import make_view, ring_views


def identity_view(f=10.0, image=(8, 12), feature=(8, 12)):
    H, W = image
    return CameraView(Intrinsics(f, f, (W - 1) / 2, (H - 1) / 2), Extrinsics.identity(), image, feature)


def test_projection_by_hand():
    view = identity_view()
    p = project_point([1.0, -0.5, 2.0], view)
    # u = 10 * 1 / 2 + 5.5, v = 10 * -0.5 / 2 + 3.5
    assert (p.u, p.v, p.d, p.valid) == (10.5, 1.0, 2.0, True)


def test_points_behind_camera_are_invalid():
    uvd, valid = project_points(np.array([[0.0, 0.0, -1.0], [0.0, 0.0, 0.0], [0.0, 0.0, 1.0]]), identity_view())
    assert valid.tolist() == [False, False, True]
    assert np.all(uvd[:2] == 0)
    assert not project_point([0, 0, -3], identity_view()).valid


def test_feature_stride_scales_intrinsics():
    view = identity_view(image=(8, 12), feature=(4, 6))
    assert view.stride == 2
    assert view.feature_intrinsics == Intrinsics(5.0, 5.0, 2.75, 1.75)
    with pytest.raises(ValueError):
        identity_view(image=(8, 12), feature=(3, 6))


def test_look_at_conventions():
    E = Extrinsics.look_at([0, -3, 1], [0, 0, 1])
    assert np.allclose(E.center, [0, -3, 1])
    assert np.allclose(E.R @ E.R.T, np.eye(3), atol=1e-12)
    # target on the optical axis; world +x to the right, world +z up (image y down)
    view = make_view([0, -3, 1], target=[0, 0, 1])
    K = view.feature_intrinsics
    c = project_point([0, 0, 1], view)
    assert np.allclose([c.u, c.v, c.d], [K.cx, K.cy, 3.0])
    assert project_point([0.5, 0, 1], view).u > K.cx
    assert project_point([0, 0, 1.5], view).v < K.cy


def test_rejects_improper_rotation():
    with pytest.raises(ValueError):
        Extrinsics(np.diag([1.0, 1.0, -1.0]), np.zeros(3))
    with pytest.raises(ValueError):
        Extrinsics(np.eye(3) * 1.001, np.zeros(3))


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 15), st.floats(0, 11), st.floats(0.2, 8.0), st.integers(0, 3))
def test_unproject_then_project_round_trip(u, v, d, k):
    view = ring_views()[k]
    back = project_points(unproject(np.array([u, v, d]), view), view)[0]
    np.testing.assert_allclose(back, [u, v, d], atol=1e-9)


def test_translation_leaves_pixel_coordinates_unchanged(rng):
    view = ring_views()[1]
    pts = rng.uniform(-1.5, 1.5, (50, 3))
    off = np.array([10.0, -4.0, 2.5])
    a, va = project_points(pts, view)
    b, vb = project_points(pts + off, view.translated(off))
    assert np.array_equal(va, vb)
    np.testing.assert_allclose(a, b, atol=1e-9)


def test_in_view_bounds_are_inclusive():
    view = identity_view(image=(8, 12), feature=(8, 12))
    uvd = np.array([[0.0, 0.0, 1.0], [11.0, 7.0, 1.0], [11.01, 7.0, 1.0], [5.0, 5.0, 5.0], [5.0, 5.0, 5.01]])
    mask = in_view_mask(uvd, np.ones(5, dtype=bool), view, (0.5, 5.0))
    assert mask.tolist() == [True, True, False, True, False]
    assert not in_view(project_point([0, 0, -1], view), view, (0.1, 5.0))


def test_voxel_grid_centers():
    g = VoxelGridSpec((-1.0, 0.0, 0.0), (2, 3, 4), (0.5, 1.0, 0.25))
    c = g.centers()
    assert c.shape == (2, 3, 4, 3)
    np.testing.assert_allclose(c[1, 2, 3], [-0.25, 2.5, 0.875])
    np.testing.assert_allclose(voxel_center(g, (1, 2, 3)), c[1, 2, 3])
    with pytest.raises(IndexError):
        voxel_center(g, (2, 0, 0))
    up = upsample_spec(g)
    assert up.dims == (4, 6, 8) and np.allclose(up.extent, g.extent)
    # each child center is within half a parent voxel of the parent center
    assert np.all(np.abs(up.centers()[::2, ::2, ::2] - c) <= np.asarray(g.voxel_size) / 2)


def test_grid_rejects_bad_dims():
    with pytest.raises(ValueError):
        VoxelGridSpec((0, 0, 0), (0, 1, 1), (1, 1, 1))
    with pytest.raises(ValueError):
        VoxelGridSpec((0, 0, 0), (1, 1, 1), (1, 0, 1))


def test_nearest_views_order_and_ties():
    views = [make_view((x, -3.0, 1.0), target=(x, 0.0, 1.0)) for x in (0.0, 1.0, -1.0, 3.0)]
    # views 1 and 2 tie at distance 1 from view 0; the lower index comes first
    assert nearest_views(views, 0, 2) == [1, 2]
    assert nearest_views(views, 3, 1) == [1]
    with pytest.raises(ValueError):
        nearest_views(views, 0, 4)
