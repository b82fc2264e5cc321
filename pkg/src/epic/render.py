"""Point-cloud anchor rendering with a z-buffered splat.

Depth test: a pixel shows the earliest-processed point among those whose
camera depth lies within ``z_tolerance`` of the pixel's nearest depth.
Processing order is the cloud's point order (row-major source pixels for
unprojected clouds), so output never depends on worker count.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import EmptyCloudError, InputFormatError, ShapeError
from .geometry import (
    CameraIntrinsics,
    CameraPose,
    DepthMap,
    PointCloud,
    Trajectory,
    dilate,
    disc_offsets,
    project,
    to_uint8_rgb,
    unproject,
)
from .visibility import AnchorVideo, VisibilityMask


@dataclass(frozen=True)
class RenderConfig:
    splat_radius: float = 0.0
    z_tolerance: float = 1e-3
    background: tuple[int, int, int] = (0, 0, 0)

    def __post_init__(self):
        if self.splat_radius < 0:
            raise ValueError("splat_radius must be >= 0")
        if not self.z_tolerance > 0:
            raise ValueError("z_tolerance must be > 0")


@dataclass
class ObjectMotion:
    """First-frame object region plus one world-space rigid transform per output frame."""

    region: np.ndarray
    per_frame_transform: list[CameraPose] = field(default_factory=list)

    def __post_init__(self):
        self.region = np.asarray(self.region, dtype=bool)
        if self.per_frame_transform and self.per_frame_transform[0] != CameraPose.identity():
            raise InputFormatError("frame-0 object transform must be the identity")

    @classmethod
    def translation(cls, region, offsets: Sequence[Sequence[float]]) -> "ObjectMotion":
        return cls(region, [CameraPose(np.eye(3), o) for o in offsets])


@dataclass
class Splat:
    image: np.ndarray  # H x W x 3 uint8
    mask: np.ndarray  # H x W bool
    index: np.ndarray  # H x W, winning point index or -1
    depth: np.ndarray  # H x W, winning depth or inf


def default_dilation_radius(height: int, width: int) -> int:
    """5 px at 480x720, scaled with resolution."""
    return max(1, int(round(5 * min(height / 480, width / 720))))


def splat(cloud: PointCloud, intrinsics: CameraIntrinsics, pose: CameraPose,
          config: RenderConfig = RenderConfig()) -> Splat:
    """Z-buffered splat of the cloud's non-excluded points into one view."""
    h, w = intrinsics.shape
    proj = project(cloud, intrinsics, pose)
    live = ~proj.excluded
    px = np.floor(proj.pixels[live]).astype(np.intp)
    z = proj.depth[live]
    order = proj.index[live]
    if config.splat_radius > 0 and len(z):
        offs = disc_offsets(config.splat_radius)
        xs = (px[:, 0][:, None] + offs[:, 1][None]).ravel()
        ys = (px[:, 1][:, None] + offs[:, 0][None]).ravel()
        z = np.repeat(z, len(offs))
        order = np.repeat(order, len(offs))
        ok = (xs >= 0) & (xs < w) & (ys >= 0) & (ys < h)
        xs, ys, z, order = xs[ok], ys[ok], z[ok], order[ok]
    else:
        xs, ys = px[:, 0], px[:, 1]
    flat = ys * w + xs
    zmin = np.full(h * w, np.inf)
    np.minimum.at(zmin, flat, z)
    cand = z <= zmin[flat] + config.z_tolerance
    flat_c, order_c, z_c = flat[cand], order[cand], z[cand]
    # first candidate per pixel in processing order
    srt = np.lexsort((order_c, flat_c))
    flat_c, order_c, z_c = flat_c[srt], order_c[srt], z_c[srt]
    first = np.ones(len(flat_c), bool)
    first[1:] = flat_c[1:] != flat_c[:-1]
    index = np.full(h * w, -1, dtype=np.intp)
    depth = np.full(h * w, np.inf)
    index[flat_c[first]] = order_c[first]
    depth[flat_c[first]] = z_c[first]
    mask = index >= 0
    image = np.empty((h * w, 3), np.uint8)
    image[:] = np.asarray(config.background, np.uint8)
    image[mask] = to_uint8_rgb(cloud.colors[index[mask]])
    return Splat(image.reshape(h, w, 3), mask.reshape(h, w), index.reshape(h, w), depth.reshape(h, w))


def _map(fn, items, workers):
    if workers > 1 and len(items) > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def _to_anchor(splats: list[Splat], meta: dict) -> AnchorVideo:
    frames = np.stack([s.image for s in splats])
    masks = [VisibilityMask(s.mask, i) for i, s in enumerate(splats)]
    return AnchorVideo(frames, masks, meta)


def _config_meta(config: RenderConfig) -> dict:
    return {
        "splat_radius": config.splat_radius,
        "z_tolerance": config.z_tolerance,
        "background": list(config.background),
    }


def render_anchor(cloud: PointCloud, trajectory: Trajectory,
                  config: RenderConfig = RenderConfig(), workers: int = 1) -> AnchorVideo:
    """Render a static cloud along a camera trajectory."""
    if len(cloud) == 0:
        raise EmptyCloudError("cannot render an empty point cloud")
    splats = _map(lambda pose: splat(cloud, trajectory.intrinsics, pose, config),
                  list(trajectory.poses), workers)
    return _to_anchor(splats, {"kind": "point_cloud", **_config_meta(config)})


def _source_cloud(image, depth: DepthMap, intrinsics: CameraIntrinsics, pose: CameraPose,
                  excluded_pixels: np.ndarray | None = None) -> PointCloud:
    cloud = unproject(image, depth, intrinsics, pose)
    if excluded_pixels is not None:
        cloud.excluded = excluded_pixels[depth.validity]
    return cloud


def render_masked_anchor(image, depth: DepthMap, seg: np.ndarray, dilation_radius: float | None,
                         trajectory: Trajectory, config: RenderConfig = RenderConfig(),
                         workers: int = 1) -> AnchorVideo:
    """Render with segmented (dilated) regions dropped from the cloud.

    The cloud is unprojected through the trajectory's first pose.
    """
    seg = np.asarray(seg, dtype=bool)
    if seg.shape != depth.shape or np.asarray(image).shape[:2] != seg.shape:
        raise ShapeError(f"segmentation {seg.shape} does not match image {np.asarray(image).shape[:2]}")
    if dilation_radius is None:
        dilation_radius = default_dilation_radius(*seg.shape)
    region = dilate(seg, dilation_radius)
    cloud = _source_cloud(image, depth, trajectory.intrinsics, trajectory[0], region)
    if cloud.excluded.all():
        raise EmptyCloudError("segmentation excludes every point of the cloud")
    out = render_anchor(cloud, trajectory, config, workers)
    out.metadata.update(kind="masked_point_cloud", dilation_radius=dilation_radius)
    return out


def render_dynamic_anchor(frames: Sequence[np.ndarray], depths: Sequence[DepthMap],
                          source_traj: Trajectory, target_traj: Trajectory,
                          config: RenderConfig = RenderConfig(), workers: int = 1) -> AnchorVideo:
    """Per-frame clouds from the source video re-rendered through target poses."""
    counts = (len(frames), len(depths), len(source_traj), len(target_traj))
    if len(set(counts)) != 1:
        raise InputFormatError(
            "length mismatch: {} frames, {} depths, {} source poses, {} target poses".format(*counts)
        )

    def one(i):
        cloud = unproject(frames[i], depths[i], source_traj.intrinsics, source_traj[i])
        return splat(cloud, target_traj.intrinsics, target_traj[i], config)

    splats = _map(one, list(range(counts[0])), workers)
    return _to_anchor(splats, {"kind": "dynamic_point_cloud", **_config_meta(config)})


def render_object_motion_anchor(image, depth: DepthMap, motion: ObjectMotion, trajectory: Trajectory,
                                config: RenderConfig = RenderConfig(), dilation_radius: float | None = None,
                                workers: int = 1) -> AnchorVideo:
    """Move the object's points per frame while the background stays put."""
    if len(motion.per_frame_transform) != len(trajectory):
        raise InputFormatError(
            f"{len(motion.per_frame_transform)} object transforms for {len(trajectory)} frames"
        )
    if motion.region.shape != depth.shape:
        raise ShapeError("object region does not match image size")
    if not motion.region.any():
        raise InputFormatError("object region is empty")
    if dilation_radius is None:
        dilation_radius = default_dilation_radius(*depth.shape)
    region = dilate(motion.region, dilation_radius)
    cloud = unproject(image, depth, trajectory.intrinsics, trajectory[0])
    is_object = region[depth.validity]

    def one(i):
        moved = cloud.positions.copy()
        moved[is_object] = motion.per_frame_transform[i].apply(cloud.positions[is_object])
        return splat(PointCloud(moved, cloud.colors), trajectory.intrinsics, trajectory[i], config)

    splats = _map(one, list(range(len(trajectory))), workers)
    meta = {"kind": "object_motion", "dilation_radius": dilation_radius, **_config_meta(config)}
    return _to_anchor(splats, meta)
