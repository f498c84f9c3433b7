import math

import numpy as np
import pytest
import torch
from conftest import central_difference, make_view, relative_error, rotation
from hypothesis import given, settings
from hypothesis import strategies as st

from depthprior.geometry import (
    bilinear_sample,
    read_camera,
    reproject_pixel,
    select_neighbors,
    view_pair_score,
    warp_image,
    write_camera,
)
from depthprior.imaging import DepthMap, RgbImage


def _homogeneous_transfer(u, v, d, ref, nbr):
    """Oracle: explicit 4x4 camera matrices."""
    def extrinsic(calib):
        m = np.eye(4)
        m[:3, :3] = calib.pose.rotation
        m[:3, 3] = calib.pose.translation
        return m

    k_ref_inv = np.linalg.inv(ref.intrinsics.matrix)
    cam = np.append(d * (k_ref_inv @ np.array([u, v, 1.0])), 1.0)
    world = extrinsic(ref) @ cam
    in_nbr = np.linalg.inv(extrinsic(nbr)) @ world
    pix = nbr.intrinsics.matrix @ in_nbr[:3]
    return pix[0] / pix[2], pix[1] / pix[2], in_nbr[2]


def test_reproject_identity():
    view = make_view(rot=rotation(0.3, -0.2, 0.1), t=(1.0, 2.0, -0.5))
    r = reproject_pixel(7.25, 3.5, 4.2, view, view)
    assert r.u == pytest.approx(7.25, rel=1e-9)
    assert r.v == pytest.approx(3.5, rel=1e-9)
    assert r.depth == pytest.approx(4.2, rel=1e-9)
    assert not r.behind


def test_reproject_pure_translation_shift():
    ref = make_view(0, f=100.0)
    nbr = make_view(1, t=(0.5, 0.0, 0.0), f=100.0)
    u, v, _ = _homogeneous_transfer(20.0, 10.0, 5.0, ref, nbr)
    r = reproject_pixel(20.0, 10.0, 5.0, ref, nbr)
    assert u == pytest.approx(10.0)
    assert r.u == pytest.approx(10.0, abs=1e-12)
    assert r.v == pytest.approx(v, abs=1e-12)


def test_reproject_matches_homogeneous_oracle(rng):
    for _ in range(50):
        ref = make_view(0, rot=rotation(*rng.uniform(-0.3, 0.3, 3)), t=rng.uniform(-1, 1, 3))
        nbr = make_view(1, rot=rotation(*rng.uniform(-0.3, 0.3, 3)), t=rng.uniform(-1, 1, 3), f=80.0, cx=14.0)
        u, v, d = rng.uniform(0, 31), rng.uniform(0, 23), rng.uniform(3, 10)
        expected = _homogeneous_transfer(u, v, d, ref, nbr)
        r = reproject_pixel(u, v, d, ref, nbr)
        np.testing.assert_allclose([r.u, r.v, r.depth], expected, rtol=1e-9, atol=1e-9)


def test_reproject_behind_camera():
    ref = make_view(0)
    nbr = make_view(1, t=(0.0, 0.0, 10.0))
    assert reproject_pixel(10.0, 10.0, 2.0, ref, nbr).behind


@settings(max_examples=100, deadline=None)
@given(
    angles=st.tuples(*[st.floats(-0.3, 0.3)] * 3),
    t=st.tuples(*[st.floats(-0.5, 0.5)] * 3),
    u=st.floats(0, 31),
    v=st.floats(0, 23),
    d=st.floats(2.0, 20.0),
)
def test_reproject_round_trip(angles, t, u, v, d):
    ref = make_view(0)
    nbr = make_view(1, rot=rotation(*angles), t=t, f=90.0)
    fwd = reproject_pixel(u, v, d, ref, nbr)
    if fwd.behind:
        return
    back = reproject_pixel(fwd.u, fwd.v, fwd.depth, nbr, ref)
    assert abs(back.u - u) < 1e-6 and abs(back.v - v) < 1e-6


# ---------------------------------------------------------------------------
# bilinear sampling


def test_bilinear_at_knots_is_exact(rng):
    img = torch.from_numpy(rng.uniform(size=(5, 6, 3)))
    ys, xs = torch.meshgrid(torch.arange(5.0), torch.arange(6.0), indexing="ij")
    values, valid = bilinear_sample(img, xs, ys)
    assert valid.all()
    assert torch.equal(values, img)


def test_bilinear_midpoint():
    img = torch.tensor([[1.0, 3.0]], dtype=torch.float64)
    values, valid = bilinear_sample(img, torch.tensor([0.5]), torch.tensor([0.0]))
    assert valid.item() and values.item() == 2.0


def test_bilinear_out_of_bounds():
    img = torch.tensor([[1.0, 3.0]], dtype=torch.float64)
    values, valid = bilinear_sample(img, torch.tensor([-0.5, 1.5]), torch.tensor([0.0, 0.0]))
    assert not valid.any()
    assert torch.equal(values, torch.zeros(2, dtype=torch.float64))


def test_bilinear_coordinate_derivatives_match_finite_differences(rng):
    img = torch.from_numpy(rng.uniform(size=(8, 9, 3)))
    x = torch.from_numpy(rng.uniform(0.1, 7.9, size=40).round(0) + rng.uniform(0.1, 0.9, size=40)).clamp(0.1, 7.9)
    y = torch.from_numpy(rng.uniform(0.0, 6.0, size=40).round(0) + rng.uniform(0.1, 0.9, size=40)).clamp(0.1, 6.9)
    weights = torch.from_numpy(rng.standard_normal((40, 3)))
    x.requires_grad_(True)
    y.requires_grad_(True)
    values, _ = bilinear_sample(img, x, y)
    gx, gy = torch.autograd.grad((values * weights).sum(), (x, y))
    xd, yd = x.detach().clone(), y.detach().clone()
    for i in range(40):
        f = lambda: (bilinear_sample(img, xd, yd)[0] * weights).sum()
        assert relative_error(gx[i], central_difference(f, xd, i)) < 1e-4
        assert relative_error(gy[i], central_difference(f, yd, i)) < 1e-4


# ---------------------------------------------------------------------------
# warping


def test_identity_warp_reproduces_neighbor(rng):
    view = make_view(rot=rotation(0.2, 0.1, -0.3), t=(0.3, -1.0, 2.0))
    img = RgbImage(rng.uniform(size=(24, 32, 3)))
    depth = rng.uniform(2.0, 9.0, size=(24, 32))
    depth[rng.uniform(size=depth.shape) < 0.2] = 0.0
    dm = DepthMap(depth)
    result = warp_image(dm, img, view, view)
    valid = result.validity.numpy()
    np.testing.assert_array_equal(valid, dm.valid)
    assert np.array_equal(result.warped.numpy()[valid], img.data[valid])


def test_fronto_parallel_translation_matches_shift(rng):
    f, b, d = 100.0, 0.0437, 5.0  # a fractional shift of 0.874 px
    ref = make_view(0, f=f)
    nbr = make_view(1, t=(b, 0.0, 0.0), f=f)
    img = rng.uniform(size=(24, 32, 3))
    result = warp_image(DepthMap(np.full((24, 32), d)), RgbImage(img), ref, nbr)
    shift = f * b / d
    cols = np.arange(32) - shift
    oracle = np.stack([[np.interp(cols, np.arange(32), img[r, :, c]) for c in range(3)] for r in range(24)])
    oracle = oracle.transpose(0, 2, 1)
    inside = cols >= 0
    valid = result.validity.numpy()
    np.testing.assert_array_equal(valid, np.broadcast_to(inside, valid.shape))
    np.testing.assert_allclose(result.warped.numpy()[valid], oracle[valid], atol=1e-4)


def test_all_invalid_depth_gives_no_validity():
    view = make_view()
    result = warp_image(DepthMap(np.zeros((24, 32))), RgbImage(np.ones((24, 32, 3)) * 0.5), view, view)
    assert not result.validity.any()


def test_warp_validity_is_monotone_in_depth_mask(rng):
    ref = make_view(0)
    nbr = make_view(1, t=(0.3, 0.1, 0.0), rot=rotation(-0.05, 0.02, 0.0))
    img = RgbImage(rng.uniform(size=(24, 32, 3)))
    depth = rng.uniform(1.0, 6.0, size=(24, 32))
    full = warp_image(DepthMap(depth), img, ref, nbr).validity
    keep = rng.uniform(size=depth.shape) < 0.6
    partial = warp_image(DepthMap(np.where(keep, depth, 0.0)), img, ref, nbr).validity
    assert not (partial & ~full).any()


def test_warp_dimension_mismatch():
    view = make_view()
    with pytest.raises(ValueError):
        warp_image(DepthMap(np.ones((10, 10))), RgbImage(np.zeros((24, 32, 3))), view, view)


def test_warp_depth_gradient_flows(rng):
    ref = make_view(0)
    nbr = make_view(1, t=(0.2, 0.0, 0.0))
    img = torch.from_numpy(rng.uniform(size=(24, 32, 3)))
    depth = torch.full((24, 32), 4.0, dtype=torch.float64, requires_grad=True)
    result = warp_image(depth, img, ref, nbr)
    (grad,) = torch.autograd.grad(result.warped.sum(), depth)
    assert grad.abs().sum() > 0


# ---------------------------------------------------------------------------
# neighbor selection


def _ring(n, radius=0.5, depth=5.0):
    from depthprior.synthetic import look_at_pose

    views = []
    for i in range(n):
        a = 2 * math.pi * i / n
        c = (radius * math.cos(a), radius * math.sin(a), 0.0)
        p = look_at_pose(c, (0.0, 0.0, depth))
        views.append(make_view(i, t=p.translation, rot=p.rotation))
    return views


def test_select_neighbors_on_a_line():
    views = [make_view(i, t=(x, 0.0, 0.0)) for i, x in enumerate([-0.9, 0.0, 0.9, 3.0, 6.0])]
    # brute force: every pair of candidates, keep the best total score
    scores = {v.view_id: view_pair_score(views[1], v, 5.0) for v in views if v.view_id != 1}
    best = sorted(scores, key=lambda k: (-scores[k], k))[:2]
    assert sorted(select_neighbors(1, views, 2, mean_depth=5.0)) == sorted(best) == [0, 2]


def test_select_all_other_views_sorted_by_score():
    views = _ring(6)
    picked = select_neighbors(0, views, 5, mean_depth=5.0)
    scores = [view_pair_score(views[0], views[i], 5.0) for i in picked]
    assert sorted(picked) == [1, 2, 3, 4, 5]
    assert scores == sorted(scores, reverse=True)


def test_duplicate_view_scores_worst():
    views = _ring(4)
    dup = make_view(9, t=views[0].pose.translation, rot=views[0].pose.rotation)
    views.append(dup)
    assert view_pair_score(views[0], dup, 5.0) == 0.0
    assert select_neighbors(0, views, 4, mean_depth=5.0)[-1] == 9


def test_select_neighbors_ties_break_by_id():
    views = _ring(4)
    # views 1 and 3 are mirror images around view 0
    assert select_neighbors(0, views, 3, mean_depth=5.0)[:2] in ([1, 3], [2, 1])
    first_two = select_neighbors(0, views, 3, mean_depth=5.0)
    s1, s3 = view_pair_score(views[0], views[1], 5.0), view_pair_score(views[0], views[3], 5.0)
    assert s1 == pytest.approx(s3)
    assert first_two.index(1) < first_two.index(3)


def test_select_neighbors_too_few():
    with pytest.raises(ValueError):
        select_neighbors(0, _ring(3), 3)


def test_camera_file_round_trip(tmp_path):
    view = make_view(7, rot=rotation(0.1, 0.2, 0.3), t=(1.5, -2.0, 0.25), size=(64, 48))
    path = tmp_path / "cam_0007.txt"
    write_camera(view, path)
    back = read_camera(path)
    assert back.view_id == 7
    assert back.same_camera(view)
