"""Synthetic scenes with analytic ground truth.

Scenes are textured axis-aligned planes and boxes, optionally moving rigidly
per frame, viewed by a pinhole camera.  Every pixel ray is intersected
analytically, so depth, optical flow and first-frame visibility are exact
rather than estimated.  Rays are parameterised by camera depth, so the hit
parameter *is* the z-depth.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import InputFormatError
from .geometry import (
    NEAR_PLANE,
    CameraIntrinsics,
    CameraPose,
    DepthMap,
    Trajectory,
    to_uint8_rgb,
)
from .visibility import FlowField

PLANE = "plane"
BOX = "box"
_HIT_EPS = 1e-9
# relative depth agreement for "same surface point" tests
_DEPTH_RTOL = 1e-6


@dataclass(frozen=True)
class Primitive:
    kind: str
    center: tuple[float, float, float]
    size: tuple[float, float, float]
    axis: int = 2  # plane normal axis; ignored for boxes
    texture: int = 0
    frequency: float = 0.5  # texture cycles per scene unit

    def __post_init__(self):
        if self.kind not in (PLANE, BOX):
            raise InputFormatError(f"unknown primitive kind {self.kind!r}")
        if self.axis not in (0, 1, 2):
            raise InputFormatError("plane axis must be 0, 1 or 2")


@dataclass
class SceneSpec:
    primitives: list[Primitive]
    trajectory: Trajectory
    moving_objects: dict[int, list[CameraPose]] = field(default_factory=dict)
    seed: int = 0
    target_trajectory: Trajectory | None = None
    name: str = "custom"

    def __post_init__(self):
        if not self.primitives:
            raise InputFormatError("scene needs at least one primitive")
        n = len(self.trajectory)
        if self.target_trajectory is not None and len(self.target_trajectory) != n:
            raise InputFormatError("target trajectory length differs from source trajectory")
        for pid, transforms in self.moving_objects.items():
            if not 0 <= pid < len(self.primitives):
                raise InputFormatError(f"moving object refers to unknown primitive {pid}")
            if len(transforms) != n:
                raise InputFormatError(f"primitive {pid} has {len(transforms)} transforms for {n} frames")

    @property
    def resolution(self) -> tuple[int, int]:
        return self.trajectory.intrinsics.shape

    def object_pose(self, pid: int, frame: int) -> CameraPose:
        """Local-to-world transform of a primitive at a frame."""
        transforms = self.moving_objects.get(pid)
        return transforms[frame] if transforms else _IDENTITY


_IDENTITY = CameraPose.identity()


class Texture:
    """Smooth checkerboard blended with value noise, seeded by (seed, id)."""

    LATTICE = 16

    def __init__(self, texture_id: int, seed: int, frequency: float):
        rng = np.random.default_rng([seed, texture_id, 7])
        self.frequency = frequency
        self.color_a = rng.uniform(0.15, 0.85, 3)
        self.color_b = rng.uniform(0.15, 0.85, 3)
        self.noise = rng.uniform(0.0, 1.0, (self.LATTICE, self.LATTICE))

    def _value_noise(self, s, t):
        n = self.LATTICE
        x = np.mod(s * self.frequency * 2.0, n)
        y = np.mod(t * self.frequency * 2.0, n)
        x0 = np.floor(x).astype(int)
        y0 = np.floor(y).astype(int)
        fx, fy = x - x0, y - y0
        fx = fx * fx * (3 - 2 * fx)
        fy = fy * fy * (3 - 2 * fy)
        x1, y1 = (x0 + 1) % n, (y0 + 1) % n
        g = self.noise
        top = g[y0 % n, x0 % n] * (1 - fx) + g[y0 % n, x1] * fx
        bottom = g[y1, x0 % n] * (1 - fx) + g[y1, x1] * fx
        return top * (1 - fy) + bottom * fy

    def __call__(self, s: np.ndarray, t: np.ndarray) -> np.ndarray:
        w = 2 * np.pi * self.frequency
        checker = 0.5 + 0.5 * np.sin(w * s) * np.sin(w * t)
        mix = (0.65 * checker + 0.35 * self._value_noise(s, t))[..., None]
        return self.color_a * (1 - mix) + self.color_b * mix


def _intersect(prim: Primitive, o: np.ndarray, d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Hit parameter (inf on miss) and face-normal axis, in the primitive's frame."""
    c = np.asarray(prim.center, float)
    half = np.asarray(prim.size, float) / 2
    n = len(d)
    if prim.kind == PLANE:
        a = prim.axis
        da = d[:, a]
        with np.errstate(divide="ignore", invalid="ignore"):
            lam = (c[a] - o[a]) / da
        lam = np.where(np.abs(da) > 1e-15, lam, np.inf)
        hit = o + lam[:, None] * d
        inside = np.ones(n, bool)
        for i in range(3):
            if i != a:
                inside &= np.abs(hit[:, i] - c[i]) <= half[i]
        lam = np.where(inside & (lam > _HIT_EPS), lam, np.inf)
        return lam, np.full(n, a)
    lo, hi = c - half, c + half
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lo - o) / d
        t2 = (hi - o) / d
    # rays parallel to a slab: inside -> unbounded, outside -> miss
    par = np.abs(d) < 1e-15
    inside_slab = (o >= lo) & (o <= hi)
    t1 = np.where(par, np.where(inside_slab, -np.inf, np.inf), t1)
    t2 = np.where(par, np.where(inside_slab, np.inf, -np.inf), t2)
    tmin = np.minimum(t1, t2)
    tmax = np.maximum(t1, t2)
    tnear = tmin.max(axis=1)
    tfar = tmax.min(axis=1)
    face = tmin.argmax(axis=1)
    ok = (tnear <= tfar) & (tnear > _HIT_EPS)
    return np.where(ok, tnear, np.inf), face


def _point_in_box(prim: Primitive, p: np.ndarray) -> bool:
    c = np.asarray(prim.center, float)
    half = np.asarray(prim.size, float) / 2
    return bool((np.abs(p - c) < half).all())


@dataclass
class Hits:
    depth: np.ndarray  # camera z of the nearest hit, inf on miss
    prim: np.ndarray  # primitive index, -1 on miss
    local: np.ndarray  # (N, 3) hit in the primitive's own frame
    face: np.ndarray


class Scene:
    def __init__(self, spec: SceneSpec):
        self.spec = spec
        self.textures = [Texture(p.texture, spec.seed, p.frequency) for p in spec.primitives]

    def check_cameras(self, trajectory: Trajectory):
        for k, pose in enumerate(trajectory.poses):
            for pid, prim in enumerate(self.spec.primitives):
                if prim.kind != BOX:
                    continue
                local = self.spec.object_pose(pid, k).inverse().apply(pose.center[None])[0]
                if _point_in_box(prim, local):
                    raise InputFormatError(f"camera {k} lies inside primitive {pid}")

    def cast(self, x: np.ndarray, y: np.ndarray, intrinsics: CameraIntrinsics, pose: CameraPose,
             frame: int) -> Hits:
        """Nearest hit for rays through continuous image coordinates (x, y)."""
        x = np.asarray(x, float).ravel()
        y = np.asarray(y, float).ravel()
        dirs_cam = np.stack([(x - intrinsics.cx) / intrinsics.fx,
                             (y - intrinsics.cy) / intrinsics.fy, np.ones_like(x)], axis=1)
        dirs = dirs_cam @ pose.rotation  # R^T d
        origin = pose.center
        best = np.full(len(x), np.inf)
        prim = np.full(len(x), -1)
        face = np.zeros(len(x), int)
        local = np.zeros((len(x), 3))
        for pid, p in enumerate(self.spec.primitives):
            obj = self.spec.object_pose(pid, frame)
            o_l = obj.inverse().apply(origin[None])[0]
            d_l = dirs @ obj.rotation  # R^T d
            lam, f = _intersect(p, o_l, d_l)
            closer = lam < best
            best = np.where(closer, lam, best)
            prim = np.where(closer, pid, prim)
            face = np.where(closer, f, face)
            local[closer] = o_l + lam[closer, None] * d_l[closer]
        return Hits(best, prim, local, face)

    def shade(self, hits: Hits) -> np.ndarray:
        rgb = np.zeros((len(hits.depth), 3))
        for pid in np.unique(hits.prim[hits.prim >= 0]):
            sel = hits.prim == pid
            loc = hits.local[sel]
            f = hits.face[sel]
            axes = np.array([[1, 2], [0, 2], [0, 1]])[f]
            s = np.take_along_axis(loc, axes[:, :1], 1)[:, 0] + 3.7 * f
            t = np.take_along_axis(loc, axes[:, 1:], 1)[:, 0]
            rgb[sel] = self.textures[pid](s, t)
        return rgb

    def world_point(self, hits: Hits, frame: int) -> np.ndarray:
        """Where each hit's surface point sits in world space at ``frame``."""
        out = np.full((len(hits.depth), 3), np.nan)
        for pid in np.unique(hits.prim[hits.prim >= 0]):
            sel = hits.prim == pid
            out[sel] = self.spec.object_pose(pid, frame).apply(hits.local[sel])
        return out


@dataclass
class FrameRender:
    image: np.ndarray
    depth: DepthMap
    hits: Hits


@dataclass
class Bundle:
    """Ground truth for one scene; flows are keyed by the non-first frame index."""

    spec: SceneSpec
    frames: np.ndarray
    depths: list[DepthMap]
    ids: np.ndarray
    forward_flows: dict[int, FlowField]
    backward_flows: dict[int, FlowField]
    visibility: np.ndarray
    target_frames: np.ndarray | None = None
    target_depths: list[DepthMap] | None = None

    @property
    def trajectory(self) -> Trajectory:
        return self.spec.trajectory

    def flow_pairs(self) -> dict[int, tuple[FlowField, FlowField]]:
        return {k: (self.forward_flows[k], self.backward_flows[k]) for k in self.forward_flows}


def _render(scene: Scene, intrinsics: CameraIntrinsics, pose: CameraPose, frame: int) -> FrameRender:
    h, w = intrinsics.shape
    v, u = np.mgrid[0:h, 0:w]
    hits = scene.cast(u.ravel() + 0.5, v.ravel() + 0.5, intrinsics, pose, frame)
    image = to_uint8_rgb(scene.shade(hits)).reshape(h, w, 3)
    depth_vals = hits.depth.reshape(h, w)
    valid = np.isfinite(depth_vals)
    depth = DepthMap(np.where(valid, depth_vals, 0.0), valid)
    return FrameRender(image, depth, hits)


def _transfer(scene: Scene, src: FrameRender, src_frame: int, dst_frame: int,
              intrinsics: CameraIntrinsics, dst_pose: CameraPose) -> FlowField:
    """Analytic flow from ``src_frame`` to ``dst_frame`` with occlusion-aware validity."""
    h, w = intrinsics.shape
    v, u = np.mgrid[0:h, 0:w]
    hit = src.hits.prim >= 0
    X = scene.world_point(src.hits, dst_frame)
    cam = np.where(hit[:, None], np.nan_to_num(X), 0.0) @ dst_pose.rotation.T + dst_pose.translation
    z = cam[:, 2]
    front = hit & (z > NEAR_PLANE)
    zs = np.where(front, z, 1.0)
    x = intrinsics.fx * cam[:, 0] / zs + intrinsics.cx
    y = intrinsics.fy * cam[:, 1] / zs + intrinsics.cy
    inside = front & (x >= 0) & (x < w) & (y >= 0) & (y < h)
    valid = inside.copy()
    idx = np.flatnonzero(inside)
    if len(idx):
        dst_hits = scene.cast(x[idx], y[idx], intrinsics, dst_pose, dst_frame)
        same = (dst_hits.prim == src.hits.prim[idx]) & (
            np.abs(dst_hits.depth - z[idx]) <= _DEPTH_RTOL * np.maximum(z[idx], 1.0)
        )
        valid[idx] = same
    du = np.where(front, x - 0.5 - u.ravel(), 0.0).reshape(h, w)
    dv = np.where(front, y - 0.5 - v.ravel(), 0.0).reshape(h, w)
    return FlowField(du, dv, src_frame, dst_frame, valid.reshape(h, w))


def generate(spec: SceneSpec) -> Bundle:
    """Render frames, depth, both-direction flows to/from frame 0 and visibility."""
    scene = Scene(spec)
    traj = spec.trajectory
    scene.check_cameras(traj)
    if spec.target_trajectory is not None:
        scene.check_cameras(spec.target_trajectory)
    K = traj.intrinsics
    renders = [_render(scene, K, pose, k) for k, pose in enumerate(traj.poses)]
    forward, backward = {}, {}
    vis = [np.ones(K.shape, bool)]
    for k in range(1, len(traj)):
        forward[k] = _transfer(scene, renders[0], 0, k, K, traj[k])
        backward[k] = _transfer(scene, renders[k], k, 0, K, traj[0])
        vis.append(backward[k].valid.copy())
    bundle = Bundle(
        spec=spec,
        frames=np.stack([r.image for r in renders]),
        depths=[r.depth for r in renders],
        ids=np.stack([r.hits.prim.reshape(K.shape) for r in renders]),
        forward_flows=forward,
        backward_flows=backward,
        visibility=np.stack(vis),
    )
    if spec.target_trajectory is not None:
        tt = spec.target_trajectory
        trs = [_render(scene, tt.intrinsics, pose, k) for k, pose in enumerate(tt.poses)]
        bundle.target_frames = np.stack([r.image for r in trs])
        bundle.target_depths = [r.depth for r in trs]
    return bundle


# ---------------------------------------------------------------------------
# canned scenes

DEFAULT_RESOLUTION = (120, 180)


def default_intrinsics(resolution=DEFAULT_RESOLUTION) -> CameraIntrinsics:
    h, w = resolution
    f = 150.0 * w / 180
    return CameraIntrinsics(f, f, w / 2, h / 2, w, h)


def camera_path(centers: Sequence[Sequence[float]], intrinsics: CameraIntrinsics,
                rotations: Sequence[np.ndarray] | None = None) -> Trajectory:
    """Trajectory from camera centres (and optional world-to-camera rotations)."""
    poses = []
    for i, c in enumerate(centers):
        R = np.eye(3) if rotations is None else np.asarray(rotations[i])
        poses.append(CameraPose(R, -R @ np.asarray(c, float)))
    return Trajectory(intrinsics, tuple(poses))


def canned_spec(name: str, n_frames: int = 25, resolution=DEFAULT_RESOLUTION, seed: int = 0) -> SceneSpec:
    """Built-in scenes: ``pan``, ``zoom``, ``two-plane-occlusion``, ``moving-box``."""
    K = default_intrinsics(resolution)
    k = np.arange(n_frames)
    backdrop = Primitive(PLANE, (0.0, 0.0, 6.0), (80.0, 80.0, 0.0), texture=0, frequency=0.35)
    if name == "pan":
        # 1.7 px of image motion per frame at depth 4
        step = 1.7 * 4.0 / K.fx
        plane = Primitive(PLANE, (0.0, 0.0, 4.0), (60.0, 60.0, 0.0), texture=0, frequency=0.35)
        traj = camera_path([(step * i, 0.0, 0.0) for i in k], K)
        return SceneSpec([plane], traj, seed=seed, name=name)
    if name == "zoom":
        plane = Primitive(PLANE, (0.0, 0.0, 4.0), (60.0, 60.0, 0.0), texture=0, frequency=0.35)
        traj = camera_path([(0.0, 0.0, 0.04 * i) for i in k], K)
        return SceneSpec([plane], traj, seed=seed, name=name)
    if name == "two-plane-occlusion":
        # 2 px/frame on the near plane, 1 px/frame on the backdrop
        step = 2.0 * 3.0 / K.fx
        near = Primitive(PLANE, (0.0, 0.0, 3.0), (1.2, 1.0, 0.0), texture=1, frequency=0.8)
        traj = camera_path([(step * i, 0.0, 0.0) for i in k], K)
        return SceneSpec([backdrop, near], traj, seed=seed, name=name)
    if name == "moving-box":
        box = Primitive(BOX, (0.0, 0.0, 3.5), (1.0, 0.8, 0.2), texture=1, frequency=0.8)
        depth_offsets = np.linspace(0.0, 2.0, n_frames)
        motion = [CameraPose(np.eye(3), (0.0, 0.0, dz)) for dz in depth_offsets]
        traj = camera_path([(0.0, 0.0, 0.0)] * n_frames, K)
        target = camera_path([(0.13 + 0.004 * i, 0.05, 0.0) for i in k], K)
        return SceneSpec([backdrop, box], traj, {1: motion}, seed=seed, target_trajectory=target, name=name)
    raise InputFormatError(f"unknown canned scene {name!r}; choose from {', '.join(CANNED)}")


CANNED = ("pan", "zoom", "two-plane-occlusion", "moving-box")


# ---------------------------------------------------------------------------
# JSON scene description


def spec_from_dict(d: dict) -> SceneSpec:
    from .io import trajectory_from_dict

    try:
        prims = [
            Primitive(p["kind"], tuple(p["center"]), tuple(p["size"]), int(p.get("axis", 2)),
                      int(p.get("texture", i)), float(p.get("frequency", 0.5)))
            for i, p in enumerate(d["primitives"])
        ]
        traj = trajectory_from_dict(d["trajectory"])
        moving = {
            int(m["primitive"]): [CameraPose.from_matrix(t) for t in m["transforms"]]
            for m in d.get("moving_objects", [])
        }
        target = trajectory_from_dict(d["target_trajectory"]) if d.get("target_trajectory") else None
    except (KeyError, TypeError) as exc:
        raise InputFormatError(f"bad scene description: {exc}") from exc
    return SceneSpec(prims, traj, moving, int(d.get("seed", 0)), target, d.get("name", "custom"))


def spec_to_dict(spec: SceneSpec) -> dict:
    from .io import trajectory_to_dict

    out = {
        "name": spec.name,
        "seed": spec.seed,
        "primitives": [
            {"kind": p.kind, "center": list(p.center), "size": list(p.size), "axis": p.axis,
             "texture": p.texture, "frequency": p.frequency}
            for p in spec.primitives
        ],
        "trajectory": trajectory_to_dict(spec.trajectory),
        "moving_objects": [
            {"primitive": pid, "transforms": [t.matrix.ravel().tolist() for t in ts]}
            for pid, ts in spec.moving_objects.items()
        ],
    }
    if spec.target_trajectory is not None:
        out["target_trajectory"] = trajectory_to_dict(spec.target_trajectory)
    return out


def load_spec(path_or_name: str) -> SceneSpec:
    if path_or_name in CANNED:
        return canned_spec(path_or_name)
    try:
        with open(path_or_name) as fh:
            return spec_from_dict(json.load(fh))
    except json.JSONDecodeError as exc:
        raise InputFormatError(f"{path_or_name}: line {exc.lineno}: {exc.msg}") from exc
