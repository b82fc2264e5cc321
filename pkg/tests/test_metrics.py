import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from epic.errors import InputFormatError
from epic.geometry import CameraPose, Trajectory
from epic.metrics import (
    C2W,
    SCALE_EPS,
    MetricReport,
    TrajectoryPair,
    cammc,
    evaluate,
    rot_err,
    scene_scale,
    seed_statistics,
    trans_err,
)

from conftest import random_pose, random_rotation, small_intrinsics, z_rotation

K = small_intrinsics()


def _traj(poses):
    return Trajectory(K, tuple(poses))


def _random_traj(rng, n=13, scale=1.0):
    return _traj(random_pose(rng, scale) for _ in range(n))


def oracle(pred, gt):
    """Scalar-loop reference for the three metrics."""

    def centre(p):
        R, t = p.rotation, p.translation
        return [-sum(R[j][i] * t[j] for j in range(3)) for i in range(3)]

    def scale(traj):
        cs = [centre(p) for p in traj.poses]
        best = 0.0
        for c in cs:
            best = max(best, math.sqrt(sum((c[i] - cs[0][i]) ** 2 for i in range(3))))
        return max(best, 1e-8)

    sp, sg = scale(pred), scale(gt)
    r = t = m = 0.0
    for a, b in zip(pred.poses, gt.poses):
        tr = sum(a.rotation[i][j] * b.rotation[i][j] for i in range(3) for j in range(3))
        same = all(a.rotation[i][j] == b.rotation[i][j] for i in range(3) for j in range(3))
        r += 0.0 if same else math.acos(min(1.0, max(-1.0, (tr - 1) / 2)))
        d = [a.translation[i] / sp - b.translation[i] / sg for i in range(3)]
        t += math.sqrt(sum(x * x for x in d))
        sq = sum((a.rotation[i][j] - b.rotation[i][j]) ** 2 for i in range(3) for j in range(3))
        m += math.sqrt(sq + sum(x * x for x in d))
    return r, t, m


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_matches_scalar_oracle(seed):
    rng = np.random.default_rng(seed)
    pair = TrajectoryPair(_random_traj(rng), _random_traj(rng, scale=3.0))
    rep = evaluate(pair)
    for got, want in zip((rep.rot_err, rep.trans_err, rep.cammc), oracle(pair.predicted, pair.ground_truth)):
        assert abs(got - want) <= 1e-9


def test_identical_is_zero(rng):
    t = _random_traj(rng)
    rep = evaluate(TrajectoryPair(t, t))
    assert rep.values() == {"rot_err": 0.0, "trans_err": 0.0, "cammc": 0.0}


def test_constant_rotation_offset():
    gt = _traj(CameraPose(np.eye(3), [0.1 * i, 0, 0]) for i in range(13))
    pred = _traj(CameraPose(z_rotation(np.rad2deg(0.1)), [0.1 * i, 0, 0]) for i in range(13))
    assert rot_err(TrajectoryPair(pred, gt)) == pytest.approx(1.3, abs=1e-6)
    assert trans_err(TrajectoryPair(pred, gt)) == pytest.approx(0.0, abs=1e-12)


def test_clamp_keeps_result_finite():
    R = np.eye(3)
    a = _traj([CameraPose(R, [0, 0, 0]), CameraPose(R, [1, 0, 0])])
    # a rotation a hair off orthonormal gives a trace just above 3
    b = _traj([CameraPose(R * (1 + 1e-12), [0, 0, 0]), CameraPose(R, [1, 0, 0])])
    assert np.isfinite(rot_err(TrajectoryPair(a, b)))


def test_translation_scale_invariance(rng):
    gt = _random_traj(rng)
    pred = _random_traj(rng)
    big = _traj(CameraPose(p.rotation, 5 * p.translation) for p in pred.poses)
    assert trans_err(TrajectoryPair(big, gt)) == pytest.approx(trans_err(TrajectoryPair(pred, gt)), abs=1e-9)
    assert cammc(TrajectoryPair(big, gt)) == pytest.approx(cammc(TrajectoryPair(pred, gt)), abs=1e-9)


def test_rot_err_invariant_to_shared_rigid_change(rng):
    gt, pred = _random_traj(rng), _random_traj(rng)
    G = random_rotation(rng)

    def rig(t):
        return _traj(CameraPose(p.rotation @ G, p.translation) for p in t.poses)

    assert rot_err(TrajectoryPair(rig(pred), rig(gt))) == pytest.approx(rot_err(TrajectoryPair(pred, gt)), abs=1e-9)


def test_scene_scale():
    static = _traj([CameraPose.identity()] * 3)
    assert scene_scale(static) == SCALE_EPS
    centres = [0, 1, 3, 2]
    t = _traj(CameraPose(np.eye(3), [-c, 0, 0]) for c in centres)
    assert scene_scale(t) == 3.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_scene_scale_is_max_distance_from_first(seed):
    rng = np.random.default_rng(seed)
    t = _random_traj(rng, n=int(rng.integers(2, 9)))
    c = [p.center for p in t.poses]
    assert scene_scale(t) == pytest.approx(max(max(np.linalg.norm(x - c[0]) for x in c), SCALE_EPS))


def test_c2w_convention_inverts(rng):
    gt, pred = _random_traj(rng), _random_traj(rng)
    inv = lambda t: _traj(p.inverse() for p in t.poses)  # noqa: E731
    a = evaluate(TrajectoryPair(inv(pred), inv(gt)), C2W)
    b = evaluate(TrajectoryPair(pred, gt))
    assert a.rot_err == pytest.approx(b.rot_err, abs=1e-9)


def test_pair_validation(rng):
    with pytest.raises(InputFormatError):
        TrajectoryPair(_random_traj(rng, 3), _random_traj(rng, 4))
    with pytest.raises(InputFormatError):
        TrajectoryPair(_random_traj(rng, 1), _random_traj(rng, 1))
    with pytest.raises(ValueError):
        rot_err(TrajectoryPair(_random_traj(rng, 2), _random_traj(rng, 2)), "cam")


def test_seed_statistics():
    reps = [MetricReport(v, 2 * v, 3 * v) for v in (1.0, 2.0, 3.0)]
    s = seed_statistics(reps)
    assert s.mean == {"rot_err": 2.0, "trans_err": 4.0, "cammc": 6.0}
    assert s.std["rot_err"] == pytest.approx(math.sqrt(2 / 3))
    assert seed_statistics(reps, ddof=1).std["rot_err"] == pytest.approx(1.0)
    assert seed_statistics(reps[:1]).std["cammc"] == 0.0
    assert set(s.to_dict()) == {"rot_err", "trans_err", "cammc", "per_seed", "mean", "std"}
    with pytest.raises(ValueError):
        seed_statistics([])
