import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from epic.errors import EmptyCloudError, InputFormatError, ShapeError
from epic.geometry import CameraPose, DepthMap, PointCloud, Trajectory, dilate, unproject
from epic.render import (
    ObjectMotion,
    RenderConfig,
    default_dilation_radius,
    render_anchor,
    render_dynamic_anchor,
    render_masked_anchor,
    render_object_motion_anchor,
    splat,
)

from conftest import psnr, small_intrinsics


def _source(bundle, k=0):
    traj = bundle.trajectory
    return unproject(bundle.frames[k], bundle.depths[k], traj.intrinsics, traj[k])


def test_source_pose_reproduces_frame(pan_bundle):
    traj = pan_bundle.trajectory
    cloud = _source(pan_bundle)
    out = render_anchor(cloud, Trajectory(traj.intrinsics, (traj[0],)))
    valid = pan_bundle.depths[0].validity
    np.testing.assert_array_equal(out.mask_array[0], valid)
    np.testing.assert_array_equal(out.frames[0][valid], pan_bundle.frames[0][valid])


def test_pan_render_matches_oracle(pan_bundle):
    out = render_anchor(_source(pan_bundle), pan_bundle.trajectory)
    for k in range(1, len(out)):
        m = out.mask_array[k]
        assert m.mean() > 0.7
        assert psnr(out.frames[k], pan_bundle.frames[k], m) >= 40.0


def test_uncovered_pixels_are_background(pan_bundle):
    cfg = RenderConfig(background=(7, 8, 9))
    out = render_anchor(_source(pan_bundle), pan_bundle.trajectory, cfg)
    last = out.frames[-1][~out.mask_array[-1]]
    assert len(last) and (last == [7, 8, 9]).all()


def test_far_camera_sees_nothing(pan_bundle):
    traj = pan_bundle.trajectory
    away = CameraPose(np.eye(3), [1e4, 0, 0])
    out = render_anchor(_source(pan_bundle), Trajectory(traj.intrinsics, (away,)))
    assert not out.mask_array.any()
    assert not out.frames.any()


def test_empty_cloud_rejected(pan_bundle):
    with pytest.raises(EmptyCloudError):
        render_anchor(PointCloud(np.zeros((0, 3)), np.zeros((0, 3))), pan_bundle.trajectory)


def test_z_buffer_prefers_nearer_then_earlier():
    K = small_intrinsics()
    pose = CameraPose.identity()
    ray = np.array([0.5 / K.fx, 0.5 / K.fy, 1.0])  # centre of pixel (16, 12)
    pts = np.stack([ray * 4.0, ray * 2.0, ray * 2.0005])
    cols = np.array([[1, 0, 0], [0, 1, 0], [0, 0, 1]], float)
    s = splat(PointCloud(pts, cols), K, pose)
    assert s.index[12, 16] == 1
    assert tuple(s.image[12, 16]) == (0, 255, 0)
    # a point further than the tolerance loses even if processed first
    s = splat(PointCloud(pts[[0, 2]], cols[[0, 2]]), K, pose)
    assert s.index[12, 16] == 1
    # within tolerance, processing order wins
    s = splat(PointCloud(pts[[2, 1]], cols[[2, 1]]), K, pose)
    assert s.index[12, 16] == 0 and s.depth[12, 16] == pytest.approx(2.0005)


def test_splat_radius_covers_disc():
    K = small_intrinsics()
    ray = np.array([0.5 / K.fx, 0.5 / K.fy, 1.0])
    s = splat(PointCloud(ray[None] * 3, np.ones((1, 3))), K, CameraPose.identity(), RenderConfig(splat_radius=2))
    expected = np.zeros(K.shape, bool)
    expected[12, 16] = True
    np.testing.assert_array_equal(s.mask, dilate(expected, 2))


def test_masked_render_all_zero_seg_equals_plain(pan_bundle):
    traj = pan_bundle.trajectory
    seg = np.zeros(pan_bundle.depths[0].shape, bool)
    a = render_masked_anchor(pan_bundle.frames[0], pan_bundle.depths[0], seg, 3, traj)
    b = render_anchor(_source(pan_bundle), traj)
    np.testing.assert_array_equal(a.frames, b.frames)
    np.testing.assert_array_equal(a.mask_array, b.mask_array)


def test_masked_render_drops_left_half(pan_bundle):
    traj = pan_bundle.trajectory
    seg = np.zeros(pan_bundle.depths[0].shape, bool)
    seg[:, : seg.shape[1] // 2] = True
    out = render_masked_anchor(pan_bundle.frames[0], pan_bundle.depths[0], seg, 0, traj)
    m0 = out.mask_array[0]
    assert not m0[:, : seg.shape[1] // 2].any()
    assert m0[:, seg.shape[1] // 2:].all()


def test_masked_render_excluding_everything(pan_bundle):
    seg = np.zeros(pan_bundle.depths[0].shape, bool)
    seg[60, 90] = True
    with pytest.raises(EmptyCloudError):
        render_masked_anchor(pan_bundle.frames[0], pan_bundle.depths[0], seg, 1000, pan_bundle.trajectory)


def test_masked_render_shape_mismatch(pan_bundle):
    with pytest.raises(ShapeError):
        render_masked_anchor(pan_bundle.frames[0], pan_bundle.depths[0], np.zeros((3, 3), bool), 1,
                             pan_bundle.trajectory)


def test_exclusion_equals_deletion(pan_bundle, rng):
    traj = pan_bundle.trajectory
    short = Trajectory(traj.intrinsics, traj.poses[::6])
    img, depth = pan_bundle.frames[0], pan_bundle.depths[0]
    for _ in range(5):
        seg = rng.random(depth.shape) < 0.002
        r = int(rng.integers(0, 5))
        a = render_masked_anchor(img, depth, seg, r, short)
        cloud = _source(pan_bundle)
        keep = ~dilate(seg, r)[depth.validity]
        b = render_anchor(cloud.subset(keep), short)
        np.testing.assert_array_equal(a.frames, b.frames)
        np.testing.assert_array_equal(a.mask_array, b.mask_array)


def test_default_dilation_radius():
    assert default_dilation_radius(480, 720) == 5
    assert default_dilation_radius(120, 180) == 1
    assert default_dilation_radius(960, 1440) == 10


def test_worker_count_does_not_change_output(pan_bundle):
    a = render_anchor(_source(pan_bundle), pan_bundle.trajectory, workers=1)
    b = render_anchor(_source(pan_bundle), pan_bundle.trajectory, workers=4)
    np.testing.assert_array_equal(a.frames, b.frames)


def test_dynamic_identity_retarget(pan_bundle):
    traj = pan_bundle.trajectory
    out = render_dynamic_anchor(list(pan_bundle.frames), pan_bundle.depths, traj, traj)
    for k in range(len(out)):
        valid = pan_bundle.depths[k].validity
        np.testing.assert_array_equal(out.frames[k][valid], pan_bundle.frames[k][valid])


def test_dynamic_single_frame(pan_bundle):
    traj = Trajectory(pan_bundle.trajectory.intrinsics, pan_bundle.trajectory.poses[:1])
    out = render_dynamic_anchor(pan_bundle.frames[:1], pan_bundle.depths[:1], traj, traj)
    assert len(out) == 1


def test_dynamic_length_mismatch(pan_bundle):
    traj = pan_bundle.trajectory
    with pytest.raises(InputFormatError, match="25 frames, 24 depths"):
        render_dynamic_anchor(list(pan_bundle.frames), pan_bundle.depths[:-1], traj, traj)


def test_dynamic_moving_box_matches_target(moving_box_bundle):
    b = moving_box_bundle
    out = render_dynamic_anchor(list(b.frames), b.depths, b.trajectory, b.spec.target_trajectory)
    for k in range(len(out)):
        m = out.mask_array[k]
        assert m.mean() > 0.5
        assert psnr(out.frames[k], b.target_frames[k], m) >= 40.0


def test_object_motion_identity_matches_static(pan_bundle):
    traj = pan_bundle.trajectory
    region = np.zeros(pan_bundle.depths[0].shape, bool)
    region[40:80, 60:120] = True
    motion = ObjectMotion(region, [CameraPose.identity()] * len(traj))
    a = render_object_motion_anchor(pan_bundle.frames[0], pan_bundle.depths[0], motion, traj)
    b = render_anchor(_source(pan_bundle), traj)
    np.testing.assert_array_equal(a.frames, b.frames)


def test_object_receding_shrinks_footprint():
    K = small_intrinsics(64, 48, 60.0)
    traj = Trajectory(K, tuple([CameraPose.identity()] * 5))
    depth = DepthMap(np.full(K.shape, 10.0))
    depth.values[16:32, 24:40] = 4.0
    image = np.zeros((*K.shape, 3), np.uint8)
    region = depth.values < 5
    motion = ObjectMotion.translation(region, [[0, 0, 2.0 * i] for i in range(5)])
    cfg = RenderConfig(splat_radius=1)
    out = render_object_motion_anchor(image, depth, motion, traj, cfg, dilation_radius=0)
    cloud = unproject(image, depth, K, traj[0])
    obj_ids = np.nonzero(region[depth.validity])[0]
    # count pixels whose winning point belongs to the object
    sizes = []
    for k in range(5):
        moved = cloud.positions.copy()
        moved[obj_ids] = motion.per_frame_transform[k].apply(moved[obj_ids])
        s = splat(PointCloud(moved, cloud.colors), K, traj[k], cfg)
        sizes.append(int(np.isin(s.index, obj_ids).sum()))
    assert all(a > b for a, b in zip(sizes, sizes[1:]))
    # background behind the object was never observed, so holes open up
    assert out.mask_array[0].all()
    assert not out.mask_array[-1].all()


def test_object_motion_rejects_bad_input(pan_bundle):
    traj = pan_bundle.trajectory
    empty = np.zeros(pan_bundle.depths[0].shape, bool)
    with pytest.raises(InputFormatError):
        render_object_motion_anchor(pan_bundle.frames[0], pan_bundle.depths[0],
                                    ObjectMotion(empty, [CameraPose.identity()] * len(traj)), traj)
    with pytest.raises(InputFormatError):
        render_object_motion_anchor(pan_bundle.frames[0], pan_bundle.depths[0],
                                    ObjectMotion(~empty, [CameraPose.identity()] * 3), traj)
    with pytest.raises(InputFormatError):
        ObjectMotion(~empty, [CameraPose(np.eye(3), [1, 0, 0])])


def test_whole_frame_object_moves_everything(pan_bundle):
    traj = Trajectory(pan_bundle.trajectory.intrinsics, (pan_bundle.trajectory[0],) * 3)
    region = np.ones(pan_bundle.depths[0].shape, bool)
    motion = ObjectMotion.translation(region, [[0, 0, 0], [0.5, 0, 0], [1.0, 0, 0]])
    out = render_object_motion_anchor(pan_bundle.frames[0], pan_bundle.depths[0], motion, traj)
    # whole scene moving right equals the camera moving left
    cam = Trajectory(traj.intrinsics, tuple(CameraPose(p.rotation, p.translation + [d, 0, 0])
                                            for p, d in zip(traj.poses, (0, 0.5, 1.0))))
    ref = render_anchor(_source(pan_bundle), cam)
    np.testing.assert_array_equal(out.mask_array, ref.mask_array)
    assert psnr(out.frames, ref.frames, out.mask_array) > 60


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_render_mask_matches_nonbackground_support(seed):
    rng = np.random.default_rng(seed)
    K = small_intrinsics()
    pts = np.column_stack([rng.uniform(-1, 1, 200), rng.uniform(-1, 1, 200), rng.uniform(1, 5, 200)])
    cols = rng.uniform(0.1, 1, (200, 3))
    s = splat(PointCloud(pts, cols), K, CameraPose.identity())
    np.testing.assert_array_equal(s.mask, (s.image > 0).any(axis=-1))
