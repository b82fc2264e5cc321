"""Synthetic flying-pixel artifacts for training anchors.

Rays are parallel lines perpendicular to one randomly drawn direction.  Each
ray takes the colour of the first-frame pixel it is anchored on and keeps it
in every frame.  Dashing alternates ``dash_on`` drawn and ``dash_off`` skipped
samples; fading thins the ray out along its length by drawing each sample with
probability equal to the local opacity, so every written pixel is an exact
first-frame colour.  Only mask==1 pixels are touched.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace

import numpy as np

from .visibility import AnchorVideo, VisibilityMask


@dataclass(frozen=True)
class RaySpec:
    direction_angle: float | None = None  # radians; None draws uniformly in [0, pi)
    ray_count: int | None = None  # None draws uniformly in [3, 8]
    dash_on: int = 6
    dash_off: int = 4
    width: int = 1
    fade_start: float = 1.0
    fade_end: float = 0.3
    seed: int = 0
    length: float | None = None  # None: the ray spans the frame
    anchors: tuple[tuple[int, int], ...] | None = None  # explicit (x, y) anchor pixels

    def __post_init__(self):
        if self.ray_count is not None and self.ray_count < 0:
            raise ValueError("ray_count must be >= 0")
        if self.dash_on < 1 or self.dash_off < 1:
            raise ValueError("dash lengths must be >= 1")
        if self.width < 1:
            raise ValueError("width must be >= 1")
        if not 0 <= self.fade_end <= self.fade_start <= 1:
            raise ValueError("need 0 <= fade_end <= fade_start <= 1")
        if self.anchors is not None and self.ray_count is not None and len(self.anchors) != self.ray_count:
            raise ValueError("ray_count disagrees with the number of anchors")


@dataclass
class Ray:
    xs: np.ndarray
    ys: np.ndarray
    color: np.ndarray
    anchor: tuple[int, int]


def _line_extent(ax: float, ay: float, ex: float, ey: float, w: int, h: int) -> tuple[float, float]:
    lo, hi = -np.inf, np.inf
    for a, e, n in ((ax, ex, w), (ay, ey, h)):
        if abs(e) < 1e-12:
            continue
        t0, t1 = (0 - a) / e, (n - 1 - a) / e
        lo, hi = max(lo, min(t0, t1)), min(hi, max(t0, t1))
    return lo, hi


def sample_rays(anchor: AnchorVideo, spec: RaySpec) -> tuple[float, list[Ray]]:
    """Draw the per-video direction, anchors, colours, dash/fade pattern."""
    rng = np.random.default_rng(spec.seed)
    theta = float(rng.uniform(0.0, np.pi)) if spec.direction_angle is None else float(spec.direction_angle)
    if spec.anchors is not None:
        count = len(spec.anchors)
    elif spec.ray_count is not None:
        count = spec.ray_count
    else:
        count = int(rng.integers(3, 9))
    first = anchor.frames[0]
    h, w = first.shape[:2]
    # rays run along ex, ey; width offsets go along the sampled direction
    ex, ey = -np.sin(theta), np.cos(theta)
    nx, ny = np.cos(theta), np.sin(theta)
    candidates = np.flatnonzero(anchor.masks[0].values.ravel())
    if len(candidates) == 0:
        candidates = np.arange(h * w)
    period = spec.dash_on + spec.dash_off
    rays = []
    for i in range(count):
        if spec.anchors is not None:
            axp, ayp = (int(c) for c in spec.anchors[i])
        else:
            flat = int(candidates[rng.integers(len(candidates))])
            ayp, axp = divmod(flat, w)
        color = first[ayp, axp].copy()
        if spec.length is None:
            t0, t1 = _line_extent(axp, ayp, ex, ey, w, h)
        else:
            t0, t1 = 0.0, float(spec.length)
        n_samples = int(np.floor(t1 - t0 + 1e-9)) + 1
        k = np.arange(n_samples)
        alpha = np.linspace(spec.fade_start, spec.fade_end, n_samples) if n_samples > 1 else np.full(1, spec.fade_start)
        keep = (k % period < spec.dash_on) & (rng.random(n_samples) < alpha)
        t = t0 + k[keep]
        xs, ys = [], []
        for j in range(spec.width):
            off = j - (spec.width - 1) / 2
            xs.append(np.rint(axp + t * ex + off * nx))
            ys.append(np.rint(ayp + t * ey + off * ny))
        xs = np.concatenate(xs).astype(np.intp)
        ys = np.concatenate(ys).astype(np.intp)
        inside = (xs >= 0) & (xs < w) & (ys >= 0) & (ys < h)
        rays.append(Ray(xs[inside], ys[inside], color, (axp, ayp)))
    return theta, rays


def inject_artifacts(anchor: AnchorVideo, spec: RaySpec) -> AnchorVideo:
    """Draw dashed, faded rays into the visible part of every anchor frame."""
    theta, rays = sample_rays(anchor, spec)
    frames = anchor.frames.copy()
    meta = dict(anchor.metadata)
    info = asdict(replace(spec, direction_angle=theta, ray_count=len(rays)))
    info["anchors"] = [list(r.anchor) for r in rays]
    meta["artifact_injection"] = info
    masks = [VisibilityMask(m.values.copy(), m.frame_index, m.frozen) for m in anchor.masks]
    if not rays:
        return AnchorVideo(frames, masks, meta)
    h, w = frames.shape[1:3]
    xs = np.concatenate([r.xs for r in rays])
    ys = np.concatenate([r.ys for r in rays])
    colors = np.concatenate([np.repeat(r.color[None], len(r.xs), axis=0) for r in rays])
    # later rays win where rays cross
    flat = ys * w + xs
    _, last = np.unique(flat[::-1], return_index=True)
    last = len(flat) - 1 - last
    xs, ys, colors = xs[last], ys[last], colors[last]
    for f, m in enumerate(masks):
        sel = m.values[ys, xs]
        frames[f, ys[sel], xs[sel]] = colors[sel]
    return AnchorVideo(frames, masks, meta)
