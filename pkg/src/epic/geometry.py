"""Pinhole cameras, rigid poses, depth (un)projection and mask dilation.

Conventions used everywhere in the package:

* poses are stored world-to-camera: ``x_cam = R @ x_world + t``;
* pixel ``(u, v)`` (column, row) is sampled at its centre, i.e. the
  continuous image coordinate ``(u + 0.5, v + 0.5)``.  ``project`` returns
  continuous coordinates, so ``floor`` of a projection is the pixel index.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import InputFormatError, ShapeError

ORTHONORMAL_TOL = 1e-6
# Upstream estimators emit slightly non-orthonormal rotations; beyond this they are rejected.
LOOSE_ORTHONORMAL_TOL = 1e-3
NEAR_PLANE = 1e-4


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InputFormatError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width < 1 or self.height < 1:
            raise InputFormatError(f"invalid frame size {self.width}x{self.height}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise InputFormatError(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} frame"
            )

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def scaled(self, factor: float) -> "CameraIntrinsics":
        return CameraIntrinsics(
            self.fx * factor, self.fy * factor, self.cx * factor, self.cy * factor,
            int(round(self.width * factor)), int(round(self.height * factor)),
        )


def _orthonormal_error(R: np.ndarray) -> float:
    return max(
        float(np.abs(R.T @ R - np.eye(3)).max()),
        abs(float(np.linalg.det(R)) - 1.0),
    )


def nearest_rotation(M: np.ndarray) -> np.ndarray:
    """Closest proper rotation to ``M`` in the Frobenius sense."""
    U, _, Vt = np.linalg.svd(M)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


@dataclass(frozen=True)
class CameraPose:
    """World-to-camera rigid transform."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64)
        t = np.array(self.translation, dtype=np.float64).reshape(-1)
        if R.shape != (3, 3) or t.shape != (3,):
            raise ShapeError(f"pose needs 3x3 rotation and 3-vector translation, got {R.shape}, {t.shape}")
        if not (np.isfinite(R).all() and np.isfinite(t).all()):
            raise InputFormatError("pose contains non-finite values")
        err = _orthonormal_error(R)
        if err > ORTHONORMAL_TOL:
            raise InputFormatError(f"rotation is not orthonormal (error {err:.3g})")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "CameraPose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, M, tol: float = LOOSE_ORTHONORMAL_TOL) -> "CameraPose":
        """Build from a 3x4 or 4x4 ``[R | t]`` matrix.

        Rotations within ``tol`` of orthonormal are snapped to the nearest
        rotation; anything further off raises.
        """
        M = np.asarray(M, dtype=np.float64)
        if M.shape == (12,):
            M = M.reshape(3, 4)
        if M.shape not in ((3, 4), (4, 4)):
            raise ShapeError(f"expected 3x4 or 4x4 pose matrix, got {M.shape}")
        R = M[:3, :3]
        if not np.isfinite(M).all():
            raise InputFormatError("pose contains non-finite values")
        err = _orthonormal_error(R)
        if err > tol:
            raise InputFormatError(f"rotation is not orthonormal (error {err:.3g} > {tol:g})")
        if err > ORTHONORMAL_TOL:  # already-valid rotations pass through untouched
            R = nearest_rotation(R)
        return cls(R, M[:3, 3])

    @property
    def matrix(self) -> np.ndarray:
        """3x4 world-to-camera matrix."""
        return np.hstack([self.rotation, self.translation[:, None]])

    @property
    def center(self) -> np.ndarray:
        """Camera centre in world coordinates."""
        return -self.rotation.T @ self.translation

    def inverse(self) -> "CameraPose":
        return CameraPose(self.rotation.T, -self.rotation.T @ self.translation)

    def camera_to_world(self) -> np.ndarray:
        return self.inverse().matrix

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map (N, 3) points through the transform."""
        return points @ self.rotation.T + self.translation

    def __eq__(self, other):
        if not isinstance(other, CameraPose):
            return NotImplemented
        return np.array_equal(self.rotation, other.rotation) and np.array_equal(
            self.translation, other.translation
        )

    __hash__ = None


def compose_poses(a: CameraPose, b: CameraPose) -> CameraPose:
    """Rigid composition ``a ∘ b``: apply ``b`` first, then ``a``."""
    R = a.rotation @ b.rotation
    t = a.rotation @ b.translation + a.translation
    return CameraPose(R, t)


def rotation_about_axis(axis: Sequence[float], angle: float) -> np.ndarray:
    """Rodrigues rotation matrix."""
    k = np.asarray(axis, dtype=np.float64)
    k = k / np.linalg.norm(k)
    Kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(angle) * Kx + (1 - np.cos(angle)) * (Kx @ Kx)


@dataclass(frozen=True)
class Trajectory:
    intrinsics: CameraIntrinsics
    poses: tuple[CameraPose, ...]

    def __post_init__(self):
        poses = tuple(self.poses)
        if not poses:
            raise InputFormatError("trajectory has no poses")
        object.__setattr__(self, "poses", poses)

    def __len__(self):
        return len(self.poses)

    def __getitem__(self, i) -> CameraPose:
        return self.poses[i]

    @property
    def centers(self) -> np.ndarray:
        return np.stack([p.center for p in self.poses])


@dataclass(frozen=True)
class DepthMap:
    values: np.ndarray
    validity: np.ndarray | None = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ShapeError(f"depth must be 2-D, got shape {values.shape}")
        ok = np.isfinite(values) & (values > 0)
        if self.validity is None:
            validity = ok
        else:
            validity = np.asarray(self.validity, dtype=bool)
            if validity.shape != values.shape:
                raise ShapeError("depth validity grid does not match depth shape")
            if (validity & ~ok).any():
                raise InputFormatError("valid depth entries must be finite and positive")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "validity", validity)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass
class PointCloud:
    """Coloured world-space points; colours are RGB in [0, 1]."""

    positions: np.ndarray
    colors: np.ndarray
    excluded: np.ndarray = field(default=None)

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        n = len(self.positions)
        if self.excluded is None:
            self.excluded = np.zeros(n, dtype=bool)
        self.excluded = np.asarray(self.excluded, dtype=bool).reshape(-1)
        if len(self.colors) != n or len(self.excluded) != n:
            raise ShapeError("positions, colors and excluded flags differ in length")
        if not np.isfinite(self.positions).all():
            raise InputFormatError("point positions must be finite")

    def __len__(self):
        return len(self.positions)

    def subset(self, keep: np.ndarray) -> "PointCloud":
        return PointCloud(self.positions[keep], self.colors[keep], self.excluded[keep])

    @staticmethod
    def concatenate(clouds: Sequence["PointCloud"]) -> "PointCloud":
        return PointCloud(
            np.concatenate([c.positions for c in clouds]),
            np.concatenate([c.colors for c in clouds]),
            np.concatenate([c.excluded for c in clouds]),
        )


def to_float_rgb(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.dtype == np.uint8:
        return image.astype(np.float64) / 255.0
    return image.astype(np.float64)


def to_uint8_rgb(colors: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(colors) * 255.0), 0, 255).astype(np.uint8)


def pixel_grid(height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    """Row-major (u, v) index grids."""
    v, u = np.mgrid[0:height, 0:width]
    return u, v


def unproject(image: np.ndarray, depth: DepthMap, intrinsics: CameraIntrinsics,
              pose: CameraPose) -> PointCloud:
    """Lift every valid-depth pixel to a world-space point, row-major order."""
    image = np.asarray(image)
    if image.shape[:2] != depth.shape or depth.shape != intrinsics.shape:
        raise ShapeError(
            f"image {image.shape[:2]}, depth {depth.shape} and intrinsics "
            f"{intrinsics.shape} must share dimensions"
        )
    u, v = pixel_grid(*intrinsics.shape)
    valid = depth.validity
    d = depth.values[valid]
    x = (u[valid] + 0.5 - intrinsics.cx) / intrinsics.fx * d
    y = (v[valid] + 0.5 - intrinsics.cy) / intrinsics.fy * d
    cam = np.stack([x, y, d], axis=1)
    world = (cam - pose.translation) @ pose.rotation
    rgb = to_float_rgb(image)
    if rgb.ndim == 2:
        rgb = np.repeat(rgb[..., None], 3, axis=2)
    return PointCloud(world, rgb[valid])


@dataclass
class Projection:
    """Per-point projection result; ``index`` refers back into the cloud."""

    pixels: np.ndarray  # (M, 2) continuous (x, y)
    depth: np.ndarray
    colors: np.ndarray
    excluded: np.ndarray
    index: np.ndarray

    def __len__(self):
        return len(self.depth)


def project(cloud: PointCloud, intrinsics: CameraIntrinsics, pose: CameraPose,
            near: float = NEAR_PLANE) -> Projection:
    """Project points into a camera, dropping those behind it or off-frame."""
    cam = pose.apply(cloud.positions)
    z = cam[:, 2]
    front = z > near
    zf = np.where(front, z, 1.0)
    x = intrinsics.fx * cam[:, 0] / zf + intrinsics.cx
    y = intrinsics.fy * cam[:, 1] / zf + intrinsics.cy
    keep = front & (x >= 0) & (x < intrinsics.width) & (y >= 0) & (y < intrinsics.height)
    idx = np.flatnonzero(keep)
    return Projection(
        pixels=np.stack([x[idx], y[idx]], axis=1),
        depth=z[idx],
        colors=cloud.colors[idx],
        excluded=cloud.excluded[idx],
        index=idx,
    )


def disc_offsets(radius: float) -> np.ndarray:
    """Integer (dy, dx) offsets within Euclidean distance ``radius``."""
    r = int(np.floor(radius))
    dy, dx = np.mgrid[-r:r + 1, -r:r + 1]
    inside = dy ** 2 + dx ** 2 <= radius ** 2
    return np.stack([dy[inside], dx[inside]], axis=1)


def disc_footprint(radius: float) -> np.ndarray:
    r = int(np.floor(radius))
    dy, dx = np.mgrid[-r:r + 1, -r:r + 1]
    return dy ** 2 + dx ** 2 <= radius ** 2


def dilate(mask: np.ndarray, radius: float) -> np.ndarray:
    """Binary dilation by a disc of the given radius (pixels outside the frame count as 0)."""
    if radius < 0:
        raise ValueError("radius must be non-negative")
    mask = np.asarray(mask, dtype=bool)
    if radius < 1:
        return mask.copy()
    if radius <= 8:
        return ndimage.binary_dilation(mask, structure=disc_footprint(radius))
    if not mask.any():
        return mask.copy()
    # large discs: exact integer distance to the nearest set pixel
    iy, ix = ndimage.distance_transform_edt(~mask, return_distances=False, return_indices=True)
    yy, xx = np.indices(mask.shape)
    return (iy - yy) ** 2 + (ix - xx) ** 2 <= radius ** 2
