"""Toy-scale anchor control block and visibility-aware latent fusion.

Shapes follow the latent layout ``(frames, channels, height, width)``.  The
control block concatenates the noisy latent with the anchor latent on the
channel axis, patchifies it into tokens, runs a few pre-norm single-head
transformer layers at a reduced width, unpatchifies and projects each cell to
the backbone width through a zero-initialised matrix.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .errors import ShapeError

TRAIN = "train"
INFERENCE = "inference"
TEMPORAL_COMPRESSION = 4


@dataclass
class LatentGrid:
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 4 or min(self.data.shape) < 1:
            raise ShapeError(f"latent must be a non-empty 4-D array, got {self.data.shape}")
        if not np.isfinite(self.data).all():
            raise ValueError("latent contains non-finite values")

    @property
    def frames(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[2]

    @property
    def width(self) -> int:
        return self.data.shape[3]

    @property
    def shape(self):
        return self.data.shape


@dataclass
class LatentMask:
    values: np.ndarray  # (frames, h, w) in [0, 1]
    mode: str = INFERENCE

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3:
            raise ShapeError(f"latent mask must be 3-D, got {self.values.shape}")
        if self.mode not in (TRAIN, INFERENCE):
            raise ValueError(f"unknown mask mode {self.mode!r}")
        if ((self.values < 0) | (self.values > 1)).any():
            raise ValueError("latent mask values must lie in [0, 1]")

    @property
    def shape(self):
        return self.values.shape


def latent_frame_count(n_frames: int, factor: int = TEMPORAL_COMPRESSION) -> int:
    """Latent length for ``n_frames`` raw frames; the first frame gets its own slot."""
    return (n_frames - 1) // factor + 1


def _cell_bounds(n: int, cells: int) -> tuple[np.ndarray, np.ndarray]:
    i = np.arange(cells)
    return (i * n) // cells, -((-(i + 1) * n) // cells)


def _temporal_bounds(n: int, cells: int) -> tuple[np.ndarray, np.ndarray]:
    if cells == 1:
        return np.array([0]), np.array([n])
    s, e = _cell_bounds(n - 1, cells - 1)
    return np.concatenate([[0], s + 1]), np.concatenate([[1], e + 1])


def downsample_mask(raw, target: tuple[int, int, int], mode: str = INFERENCE) -> LatentMask:
    """Pool raw visibility masks to latent resolution.

    Train mode averages each cell (soft mask), inference mode takes the max
    (hard mask).  The first frame forms its own temporal window and the rest
    are split evenly; spatial cells use adaptive bounds so ragged sizes are
    still fully covered.
    """
    if mode not in (TRAIN, INFERENCE):
        raise ValueError(f"unknown mode {mode!r}")
    arr = np.stack([np.asarray(getattr(m, "values", m)) for m in raw]).astype(np.int64)
    L, H, W = arr.shape
    tl, th, tw = target
    if tl > L or th > H or tw > W or min(target) < 1:
        raise ShapeError(f"cannot pool {arr.shape} masks to {tuple(target)}")
    ts, te = _temporal_bounds(L, tl)
    ys, ye = _cell_bounds(H, th)
    xs, xe = _cell_bounds(W, tw)
    # summed-volume table keeps sums exact in integers
    S = np.zeros((L + 1, H + 1, W + 1), np.int64)
    S[1:, 1:, 1:] = arr.cumsum(0).cumsum(1).cumsum(2)
    T0, Y0, X0 = np.ix_(ts, ys, xs)
    T1, Y1, X1 = np.ix_(te, ye, xe)
    total = (S[T1, Y1, X1] - S[T0, Y1, X1] - S[T1, Y0, X1] - S[T1, Y1, X0]
             + S[T0, Y0, X1] + S[T0, Y1, X0] + S[T1, Y0, X0] - S[T0, Y0, X0])
    if mode == TRAIN:
        count = (T1 - T0) * (Y1 - Y0) * (X1 - X0)
        values = total / count
    else:
        values = (total > 0).astype(np.float64)
    return LatentMask(values, mode)


def fuse(base_out: LatentGrid, control_out: LatentGrid, mask: LatentMask) -> LatentGrid:
    """Add the mask-weighted control signal to the base output.

    Positions where the weighted control is zero keep the base value bit for bit.
    """
    b, c = base_out.data, control_out.data
    if b.shape != c.shape:
        raise ShapeError(f"base {b.shape} and control {c.shape} differ")
    m = mask.values
    if m.shape != (b.shape[0], b.shape[2], b.shape[3]):
        raise ShapeError(f"mask {m.shape} does not match latent {b.shape}")
    delta = m[:, None] * c
    return LatentGrid(np.where(delta != 0, b + delta, b))


def injection_gate(step_index: int, total_steps: int, fraction: float) -> bool:
    """True while ``step_index`` is inside the first ``fraction`` of the schedule."""
    if not 0 <= step_index < total_steps:
        raise ValueError("step_index out of range")
    if not 0 <= fraction <= 1:
        raise ValueError("fraction must lie in [0, 1]")
    # rounding guards products like 0.4 * 50 landing a hair above an integer
    return step_index < math.ceil(round(fraction * total_steps, 9))


# ---------------------------------------------------------------------------
# control block


@dataclass
class LayerParams:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray


@dataclass
class ControlBlockParams:
    in_channels: int
    backbone_dim: int
    hidden_dim: int
    patch_size: int
    embed_w: np.ndarray  # (p*p*in_channels, hidden)
    embed_b: np.ndarray
    layers: list[LayerParams]
    unpatch_w: np.ndarray  # (hidden, p*p*hidden)
    projection: np.ndarray  # (hidden, backbone_dim)
    seed: int = 0
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.hidden_dim > self.backbone_dim:
            raise ValueError("hidden_dim must not exceed backbone_dim")
        if self.projection.shape != (self.hidden_dim, self.backbone_dim):
            raise ShapeError("projection must map hidden_dim to backbone_dim")

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    def parameter_count(self) -> int:
        arrays = [self.embed_w, self.embed_b, self.unpatch_w, self.projection]
        for layer in self.layers:
            arrays += [layer.wq, layer.wk, layer.wv, layer.wo, layer.w1, layer.b1, layer.w2, layer.b2]
        return int(sum(a.size for a in arrays))


def init_control_params(in_channels: int, backbone_dim: int = 3072, hidden_dim: int = 256,
                        n_layers: int = 8, patch_size: int = 2, seed: int = 0,
                        mlp_ratio: int = 4, projection_scale: float = 0.0) -> ControlBlockParams:
    """Seeded initialisation; the output projection is zero unless ``projection_scale`` is set."""
    rng = np.random.default_rng(seed)
    p2 = patch_size * patch_size

    def dense(fan_in, fan_out):
        return rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)

    d, m = hidden_dim, mlp_ratio * hidden_dim
    layers = [
        LayerParams(dense(d, d), dense(d, d), dense(d, d), dense(d, d),
                    dense(d, m), np.zeros(m), dense(m, d), np.zeros(d))
        for _ in range(n_layers)
    ]
    embed_w = dense(p2 * in_channels, d)
    unpatch_w = dense(d, p2 * d)
    if projection_scale:
        projection = projection_scale * dense(d, backbone_dim)
    else:
        projection = np.zeros((d, backbone_dim))
    return ControlBlockParams(in_channels, backbone_dim, hidden_dim, patch_size, embed_w,
                              np.zeros(d), layers, unpatch_w, projection, seed, mlp_ratio)


def control_parameter_count(in_channels: int, backbone_dim: int, hidden_dim: int,
                            n_layers: int, patch_size: int = 2, mlp_ratio: int = 4) -> int:
    """Closed-form parameter count of the control block topology."""
    p2 = patch_size * patch_size
    d, m = hidden_dim, mlp_ratio * hidden_dim
    per_layer = 4 * d * d + d * m + m + m * d + d
    return p2 * in_channels * d + d + n_layers * per_layer + d * p2 * d + d * backbone_dim


def layer_norm(x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) * (x + 0.044715 * x ** 3)))


def patchify(x: np.ndarray, p: int) -> np.ndarray:
    """(L, C, h, w) -> (L*(h/p)*(w/p), p*p*C), tokens in (frame, row, col) order."""
    L, C, h, w = x.shape
    t = x.reshape(L, C, h // p, p, w // p, p).transpose(0, 2, 4, 3, 5, 1)
    return t.reshape(L * (h // p) * (w // p), p * p * C)


def unpatchify(tokens: np.ndarray, shape: tuple[int, int, int], p: int) -> np.ndarray:
    """Inverse of ``patchify`` for tokens carrying ``p*p*C`` values."""
    L, h, w = shape
    C = tokens.shape[1] // (p * p)
    t = tokens.reshape(L, h // p, w // p, p, p, C).transpose(0, 5, 1, 3, 2, 4)
    return t.reshape(L, C, h, w)


def _attention(x: np.ndarray, layer: LayerParams) -> np.ndarray:
    q, k, v = x @ layer.wq, x @ layer.wk, x @ layer.wv
    scores = q @ k.T / np.sqrt(q.shape[1])
    scores -= scores.max(axis=1, keepdims=True)
    weights = np.exp(scores)
    weights /= weights.sum(axis=1, keepdims=True)
    return (weights @ v) @ layer.wo


def control_forward(z_t: LatentGrid, z_anchor: LatentGrid, params: ControlBlockParams) -> LatentGrid:
    """Control signal with ``backbone_dim`` channels at ``z_t``'s resolution."""
    a, b = z_t.data, z_anchor.data
    if (a.shape[0], a.shape[2], a.shape[3]) != (b.shape[0], b.shape[2], b.shape[3]):
        raise ShapeError(f"z_t {a.shape} and z_anchor {b.shape} disagree on (frames, h, w)")
    x = np.concatenate([a, b], axis=1)
    if x.shape[1] != params.in_channels:
        raise ShapeError(f"params expect {params.in_channels} input channels, got {x.shape[1]}")
    p = params.patch_size
    L, _, h, w = x.shape
    if h % p or w % p:
        raise ShapeError(f"latent {h}x{w} not divisible by patch size {p}")
    tokens = patchify(x, p) @ params.embed_w + params.embed_b
    for layer in params.layers:
        tokens = tokens + _attention(layer_norm(tokens), layer)
        hid = gelu(layer_norm(tokens) @ layer.w1 + layer.b1)
        tokens = tokens + hid @ layer.w2 + layer.b2
    cells = unpatchify(tokens @ params.unpatch_w, (L, h, w), p)  # (L, hidden, h, w)
    out = np.einsum("lchw,cd->ldhw", cells, params.projection)
    return LatentGrid(out)


# ---------------------------------------------------------------------------
# stub denoising loop


@dataclass
class DenoiseStep:
    index: int
    gated: bool
    base: LatentGrid
    fused: LatentGrid


@dataclass(frozen=True)
class StubBase:
    """Fixed random channel-mixing map standing in for the frozen backbone."""

    weight: np.ndarray = field(repr=False)

    @classmethod
    def create(cls, channels: int, seed: int) -> "StubBase":
        rng = np.random.default_rng([seed, 1])
        W = 0.9 * np.eye(channels) + 0.1 * rng.standard_normal((channels, channels)) / np.sqrt(channels)
        return cls(W)

    def __call__(self, z: LatentGrid) -> LatentGrid:
        return LatentGrid(np.einsum("dc,lchw->ldhw", self.weight, z.data))


def _denoise_steps(z_anchor: LatentGrid, mask: LatentMask, params: ControlBlockParams,
                   total_steps: int, fraction: float, seed: int,
                   use_control: bool = True) -> Iterator[DenoiseStep]:
    channels = params.backbone_dim
    rng = np.random.default_rng([seed, 0])
    z = LatentGrid(rng.standard_normal((z_anchor.frames, channels, z_anchor.height, z_anchor.width)))
    base = StubBase.create(channels, seed)
    for step in range(total_steps):
        base_out = base(z)
        gated = use_control and injection_gate(step, total_steps, fraction)
        fused = fuse(base_out, control_forward(z, z_anchor, params), mask) if gated else base_out
        yield DenoiseStep(step, gated, base_out, fused)
        z = fused


def simulate_denoise_trace(z_anchor: LatentGrid, mask: LatentMask, params: ControlBlockParams,
                           total_steps: int = 50, fraction: float = 0.4, seed: int = 0,
                           use_control: bool = True) -> list[LatentGrid]:
    """Iterate stub base -> gated control -> fusion and return the fused latents.

    ``use_control=False`` gives the reference run with the control branch
    switched off (same noise, same stub base).
    """
    steps = _denoise_steps(z_anchor, mask, params, total_steps, fraction, seed, use_control)
    return [s.fused for s in steps]


def _audit_row(s: DenoiseStep, hard: np.ndarray) -> dict:
    changed = (s.fused.data != s.base.data).any(axis=1)
    return {
        "step": s.index,
        "gated": s.gated,
        "invisible_max_abs_diff": float(np.abs(s.fused.data - s.base.data).max(axis=1)[~hard].max(initial=0.0)),
        "changed_positions": int(changed.sum()),
        "changed_outside_mask": int((changed & ~hard).sum()),
        "support_equals_mask": bool(np.array_equal(changed, hard)),
    }


def run_audited_trace(z_anchor: LatentGrid, mask: LatentMask, params: ControlBlockParams,
                      total_steps: int = 50, fraction: float = 0.4,
                      seed: int = 0) -> tuple[list[LatentGrid], list[dict]]:
    """One pass returning both the fused trace and the per-step audit rows."""
    hard = mask.values > 0
    trace, rows = [], []
    for s in _denoise_steps(z_anchor, mask, params, total_steps, fraction, seed):
        trace.append(s.fused)
        rows.append(_audit_row(s, hard))
    return trace, rows


def audit_denoise(z_anchor: LatentGrid, mask: LatentMask, params: ControlBlockParams,
                  total_steps: int = 50, fraction: float = 0.4, seed: int = 0) -> list[dict]:
    """Per-step check that fusion only touched visible positions."""
    return run_audited_trace(z_anchor, mask, params, total_steps, fraction, seed)[1]


def parameter_budget_ratio(in_channels: int = 32, backbone_dim: int = 64, hidden_dim: int = 256,
                           n_layers: int = 8, reference_hidden: int = 3072, reference_layers: int = 42,
                           patch_size: int = 2) -> float:
    """Control-block size relative to a same-topology block at backbone scale."""
    small = control_parameter_count(in_channels, backbone_dim, hidden_dim, n_layers, patch_size)
    big = control_parameter_count(in_channels, reference_hidden, reference_hidden, reference_layers, patch_size)
    return small / big

