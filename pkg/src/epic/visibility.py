"""Masked anchor videos from a source video and dense optical flow.

A frame-k pixel survives only if it can be traced back to the first frame
and the forward/backward flows agree on the round trip.  Pixels failing the
test are blacked out.  Flows use pixel-index coordinates: a displacement
``(du, dv)`` moves pixel ``(u, v)`` to ``(u + du, v + dv)``.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import InputFormatError, ShapeError

DEFAULT_CONSISTENCY_TOL = 1.0
DEFAULT_MIN_VISIBLE_FRACTION = 0.2
# Traces landing this close outside the border still count as in-frame.
BORDER_SLACK = 0.5


@dataclass
class FlowField:
    u: np.ndarray
    v: np.ndarray
    source_frame: int = 0
    target_frame: int = 1
    valid: np.ndarray | None = None

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=np.float64)
        self.v = np.asarray(self.v, dtype=np.float64)
        if self.u.ndim != 2 or self.u.shape != self.v.shape:
            raise ShapeError(f"flow components must be matching 2-D grids, got {self.u.shape}, {self.v.shape}")
        if not (np.isfinite(self.u).all() and np.isfinite(self.v).all()):
            raise InputFormatError("flow contains non-finite values")
        if self.valid is not None:
            self.valid = np.asarray(self.valid, dtype=bool)
            if self.valid.shape != self.u.shape:
                raise ShapeError("flow validity grid does not match flow shape")

    @property
    def shape(self) -> tuple[int, int]:
        return self.u.shape

    @property
    def magnitude(self) -> np.ndarray:
        return np.hypot(self.u, self.v)

    @classmethod
    def uniform(cls, shape, du: float, dv: float, source_frame=0, target_frame=1) -> "FlowField":
        return cls(np.full(shape, float(du)), np.full(shape, float(dv)), source_frame, target_frame)

    @classmethod
    def zeros(cls, shape, source_frame=0, target_frame=1) -> "FlowField":
        return cls.uniform(shape, 0.0, 0.0, source_frame, target_frame)


@dataclass
class VisibilityMask:
    values: np.ndarray
    frame_index: int = 0
    frozen: bool = False

    def __post_init__(self):
        self.values = np.asarray(self.values).astype(bool)

    @property
    def visible_fraction(self) -> float:
        return float(self.values.mean())


@dataclass
class AnchorVideo:
    """Anchor frames (uint8, n x H x W x 3) with one visibility mask per frame."""

    frames: np.ndarray
    masks: list[VisibilityMask]
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if len(self.frames) != len(self.masks):
            raise ShapeError(f"{len(self.frames)} frames but {len(self.masks)} masks")

    def __len__(self):
        return len(self.frames)

    @property
    def mask_array(self) -> np.ndarray:
        return np.stack([m.values for m in self.masks])


def _bilinear_taps(shape: tuple[int, int], x: np.ndarray, y: np.ndarray):
    h, w = shape
    x = np.clip(x, 0.0, w - 1)
    y = np.clip(y, 0.0, h - 1)
    x0 = np.minimum(x.astype(np.intp), max(w - 2, 0))  # x >= 0, so truncation is floor
    y0 = np.minimum(y.astype(np.intp), max(h - 2, 0))
    i00 = y0 * w + x0
    dx = 1 if w > 1 else 0
    dy = w if h > 1 else 0
    return i00, i00 + dx, i00 + dy, i00 + dy + dx, x - x0, y - y0


def _lerp2(flat: np.ndarray, taps) -> np.ndarray:
    i00, i01, i10, i11, ax, ay = taps
    g00, g01, g10, g11 = flat.take(i00), flat.take(i01), flat.take(i10), flat.take(i11)
    top = g00 + ax * (g01 - g00)
    bottom = g10 + ax * (g11 - g10)
    return top + ay * (bottom - top)


def bilinear_sample(grid: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Sample a 2-D grid at continuous index coordinates, edge-clamped.

    Uses the lerp form so constant regions are reproduced exactly.
    """
    grid = np.asarray(grid)
    return _lerp2(grid.ravel(), _bilinear_taps(grid.shape, x, y))


def bilinear_sample_many(grids: Sequence[np.ndarray], x: np.ndarray, y: np.ndarray) -> list[np.ndarray]:
    """``bilinear_sample`` for several same-shape grids sharing coordinates."""
    taps = _bilinear_taps(np.asarray(grids[0]).shape, x, y)
    return [_lerp2(np.asarray(g).ravel(), taps) for g in grids]


def nearest_sample(grid: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    h, w = grid.shape
    xi = np.clip(np.rint(x), 0, w - 1).astype(np.intp)
    yi = np.clip(np.rint(y), 0, h - 1).astype(np.intp)
    return grid[yi, xi]


def in_frame(x: np.ndarray, y: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    h, w = shape
    s = BORDER_SLACK
    return (x >= -s) & (x <= w - 1 + s) & (y >= -s) & (y <= h - 1 + s)


def compose_flow(chain: Sequence[FlowField]) -> FlowField:
    """Compose consecutive flows into one first-source to last-target flow.

    The returned field's ``valid`` grid is False wherever the trace left the
    frame at any link (or hit an invalid sample of an input flow).
    """
    if not chain:
        raise InputFormatError("empty flow chain")
    first = chain[0]
    shape = first.shape
    for a, b in zip(chain, chain[1:]):
        if a.target_frame != b.source_frame:
            raise InputFormatError(
                f"broken flow chain: {a.source_frame}->{a.target_frame} then {b.source_frame}->{b.target_frame}"
            )
        if b.shape != shape:
            raise ShapeError("flow chain mixes frame sizes")

    v0, u0 = np.mgrid[0:shape[0], 0:shape[1]].astype(np.float64)
    du = first.u.copy()
    dv = first.v.copy()
    valid = np.ones(shape, bool) if first.valid is None else first.valid.copy()
    valid &= in_frame(u0 + du, v0 + dv, shape)
    for link in chain[1:]:
        x = u0 + du
        y = v0 + dv
        if link.valid is not None:
            valid &= nearest_sample(link.valid, x, y)
        su, sv = bilinear_sample_many((link.u, link.v), x, y)
        du = du + su
        dv = dv + sv
        valid &= in_frame(u0 + du, v0 + dv, shape)
    return FlowField(du, dv, first.source_frame, chain[-1].target_frame, valid)


def visibility_mask(flow_1_to_k: FlowField, backward_flow_k_to_1: FlowField,
                    consistency_tol: float = DEFAULT_CONSISTENCY_TOL) -> VisibilityMask:
    """Forward-backward consistency test for every frame-k pixel."""
    F, B = flow_1_to_k, backward_flow_k_to_1
    if F.shape != B.shape:
        raise ShapeError(f"forward flow {F.shape} and backward flow {B.shape} differ")
    if not consistency_tol > 0:
        raise ValueError("consistency_tol must be positive")
    h, w = B.shape
    qv, qu = np.mgrid[0:h, 0:w].astype(np.float64)
    px = qu + B.u
    py = qv + B.v
    visible = in_frame(px, py, B.shape)
    fu, fv = bilinear_sample_many((F.u, F.v), px, py)
    visible &= np.hypot(fu + B.u, fv + B.v) <= consistency_tol
    if B.valid is not None:
        visible &= B.valid
    if F.valid is not None:
        visible &= nearest_sample(F.valid, px, py)
    return VisibilityMask(visible, frame_index=B.source_frame)


def freeze_masks(masks: Sequence[VisibilityMask],
                 min_visible_fraction: float = DEFAULT_MIN_VISIBLE_FRACTION) -> list[VisibilityMask]:
    """Stop masks from shrinking once visibility collapses.

    From the first frame whose visible fraction drops below the threshold,
    every later frame reuses the last mask that met it.
    """
    if not 0 < min_visible_fraction < 1:
        raise ValueError("min_visible_fraction must lie in (0, 1)")
    out = [VisibilityMask(m.values.copy(), m.frame_index, m.frozen) for m in masks]
    for k in range(1, len(out)):
        if out[k].visible_fraction < min_visible_fraction:
            keep = out[k - 1].values if k > 1 else np.ones_like(out[0].values)
            for j in range(k, len(out)):
                out[j] = VisibilityMask(keep.copy(), out[j].frame_index, frozen=True)
            break
    return out


def apply_masks(frames: np.ndarray, masks: Sequence[VisibilityMask]) -> np.ndarray:
    frames = np.asarray(frames)
    keep = np.stack([m.values for m in masks])[..., None]
    return np.where(keep, frames, np.zeros((), frames.dtype))


def direct_flows_from_chain(forward_chain: Sequence[FlowField],
                            backward_chain: Sequence[FlowField]) -> list[tuple[FlowField, FlowField]]:
    """Turn consecutive flows into first-to-k / k-to-first pairs.

    ``forward_chain[i]`` maps frame i to i+1 and ``backward_chain[i]`` maps
    frame i+1 to i.
    """
    if len(forward_chain) != len(backward_chain):
        raise InputFormatError("forward and backward chains differ in length")
    pairs = []
    fwd = bwd = None
    for f, b in zip(forward_chain, backward_chain):
        fwd = compose_flow([f]) if fwd is None else compose_flow([fwd, f])
        bwd = compose_flow([b]) if bwd is None else compose_flow([b, bwd])
        pairs.append((fwd, bwd))
    return pairs


def _check_pairs(flows, n_frames: int, shape) -> list[tuple[FlowField, FlowField]]:
    if isinstance(flows, dict):
        missing = [k for k in range(1, n_frames) if k not in flows]
        if missing:
            raise InputFormatError(f"missing flow for frame(s) {missing}")
        flows = [flows[k] for k in range(1, n_frames)]
    flows = list(flows)
    if len(flows) != n_frames - 1:
        raise InputFormatError(f"need flows for {n_frames - 1} frames, got {len(flows)}")
    for k, pair in enumerate(flows, start=1):
        if pair is None or len(pair) != 2 or pair[0] is None or pair[1] is None:
            raise InputFormatError(f"missing flow for frame {k}")
        for f in pair:
            if f.shape != shape:
                raise ShapeError(f"flow for frame {k} has shape {f.shape}, frames are {shape}")
    return flows


def build_masked_anchor(video, flows, consistency_tol: float = DEFAULT_CONSISTENCY_TOL,
                        min_visible_fraction: float = DEFAULT_MIN_VISIBLE_FRACTION,
                        workers: int = 1) -> AnchorVideo:
    """Mask a source video by first-frame visibility.

    ``flows`` holds one ``(first_to_k, k_to_first)`` pair per frame 1..n-1,
    as a sequence or a dict keyed by frame index.
    """
    video = np.asarray(video)
    if video.ndim != 4 or video.shape[-1] != 3:
        raise ShapeError(f"video must be n x H x W x 3, got {video.shape}")
    n = len(video)
    pairs = _check_pairs(flows, n, video.shape[1:3])

    def one(k):
        fwd, bwd = pairs[k - 1]
        m = visibility_mask(fwd, bwd, consistency_tol)
        m.frame_index = k
        return m

    if workers > 1 and n > 2:
        with ThreadPoolExecutor(workers) as pool:
            raw = list(pool.map(one, range(1, n)))
    else:
        raw = [one(k) for k in range(1, n)]
    masks = freeze_masks([VisibilityMask(np.ones(video.shape[1:3], bool), 0)] + raw,
                         min_visible_fraction)
    frozen_from = next((m.frame_index for m in masks if m.frozen), None)
    meta = {
        "kind": "masked",
        "consistency_tol": consistency_tol,
        "min_visible_fraction": min_visible_fraction,
        "frozen_from": frozen_from,
        "visible_fractions": [round(m.visible_fraction, 6) for m in masks],
    }
    return AnchorVideo(apply_masks(video, masks), masks, meta)


def static_regional_anchor(image: np.ndarray, region: np.ndarray, n_frames: int) -> AnchorVideo:
    """Repeat one image with ``region`` blacked out so only it gets animated."""
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    image = np.asarray(image)
    region = np.asarray(region, dtype=bool)
    if region.shape != image.shape[:2]:
        raise ShapeError(f"region {region.shape} does not match image {image.shape[:2]}")
    keep = ~region
    if not keep.any():
        raise InputFormatError("region covers the whole frame; nothing left visible")
    masks = [VisibilityMask(keep.copy(), k) for k in range(n_frames)]
    frame = np.where(keep[..., None], image, np.zeros((), image.dtype))
    frames = np.repeat(frame[None], n_frames, axis=0)
    return AnchorVideo(frames, masks, {"kind": "regional", "n_frames": n_frames})


def flow_motion_score(flows: Sequence[FlowField]) -> float:
    """Mean over flows of the mean per-pixel flow magnitude, in pixels."""
    if not flows:
        raise ValueError("need at least one flow")
    return float(np.mean([f.magnitude.mean() for f in flows]))
