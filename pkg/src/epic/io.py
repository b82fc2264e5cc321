"""File formats: trajectories, depth, masks, frames, flow, latents, anchor dirs."""

from __future__ import annotations

import json
import re
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import InputFormatError
from .fusion import INFERENCE, TRAIN, LatentGrid, LatentMask
from .geometry import CameraIntrinsics, CameraPose, DepthMap, Trajectory
from .visibility import AnchorVideo, FlowField, VisibilityMask

FLO_MAGIC = 202021.25
LATENT_MAGIC = b"EPLG"
FRAME_PATTERN = "frame_{:05d}.png"
ANCHOR_PATTERN = "anchor_{:05d}.png"
MASK_PATTERN = "mask_{:05d}.png"
DEPTH_PATTERN = "depth_{:05d}.pfm"
FLOW_PATTERN = "flow_{:05d}_{:05d}.flo"
_FLOW_RE = re.compile(r"flow_(\d+)_(\d+)\.flo$")


# ---------------------------------------------------------------------------
# trajectories


def trajectory_from_dict(d: dict, source: str = "<trajectory>") -> Trajectory:
    try:
        K = CameraIntrinsics(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                             int(d["width"]), int(d["height"]))
        frames = d["frames"]
    except (KeyError, TypeError, ValueError) as exc:
        raise InputFormatError(f"{source}: missing or invalid camera field {exc}") from exc
    if not frames:
        raise InputFormatError(f"{source}: trajectory has no frames")
    poses = []
    for i, f in enumerate(frames):
        try:
            m = np.asarray(f["w2c"], dtype=np.float64)
        except (KeyError, TypeError, ValueError) as exc:
            raise InputFormatError(f"{source}: frame {i} lacks a valid 'w2c' entry") from exc
        if m.size != 12:
            raise InputFormatError(f"{source}: frame {i} 'w2c' needs 12 numbers, got {m.size}")
        try:
            poses.append(CameraPose.from_matrix(m.reshape(3, 4)))
        except InputFormatError as exc:
            raise InputFormatError(f"{source}: frame {i}: {exc}") from exc
    return Trajectory(K, tuple(poses))


def trajectory_to_dict(traj: Trajectory) -> dict:
    K = traj.intrinsics
    return {
        "fx": K.fx, "fy": K.fy, "cx": K.cx, "cy": K.cy, "width": K.width, "height": K.height,
        "frames": [{"w2c": p.matrix.ravel().tolist()} for p in traj.poses],
    }


def read_trajectory(path) -> Trajectory:
    path = Path(path)
    text = path.read_text()
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InputFormatError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    if not isinstance(d, dict):
        raise InputFormatError(f"{path}: line 1: expected a JSON object")
    if not d.get("frames"):
        line = next((i for i, ln in enumerate(text.splitlines(), 1) if '"frames"' in ln), 1)
        raise InputFormatError(f"{path}: line {line}: trajectory has no frames")
    return trajectory_from_dict(d, str(path))


def write_trajectory(path, traj: Trajectory):
    Path(path).write_text(json.dumps(trajectory_to_dict(traj), indent=1))


# ---------------------------------------------------------------------------
# depth


def write_pfm(path, data: np.ndarray):
    """Little-endian single-channel PFM (scale -1), rows stored bottom-up."""
    data = np.asarray(data, dtype="<f4")
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(b"Pf\n%d %d\n-1.0\n" % (w, h))
        fh.write(np.flipud(data).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.readline().strip()
        if header not in (b"Pf", b"PF"):
            raise InputFormatError(f"{path}: not a PFM file")
        channels = 3 if header == b"PF" else 1
        dims = fh.readline().split()
        try:
            w, h = int(dims[0]), int(dims[1])
            scale = float(fh.readline().strip())
        except (IndexError, ValueError) as exc:
            raise InputFormatError(f"{path}: malformed PFM header") from exc
        dtype = "<f4" if scale < 0 else ">f4"
        raw = np.frombuffer(fh.read(), dtype=dtype)
    if raw.size != w * h * channels:
        raise InputFormatError(f"{path}: expected {w * h * channels} values, found {raw.size}")
    data = np.flipud(raw.reshape(h, w, channels) if channels == 3 else raw.reshape(h, w))
    if channels == 3:
        data = data[..., 0]
    return data.astype(np.float64) * abs(scale)


def write_raw_depth(path, data: np.ndarray):
    data = np.asarray(data, dtype="<f4")
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", w, h))
        fh.write(data.tobytes())


def read_raw_depth(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if len(buf) < 8:
        raise InputFormatError(f"{path}: truncated depth header")
    w, h = struct.unpack("<II", buf[:8])
    data = np.frombuffer(buf, dtype="<f4", offset=8)
    if data.size != w * h:
        raise InputFormatError(f"{path}: expected {w * h} depth values, found {data.size}")
    return data.reshape(h, w).astype(np.float64)


def read_depth(path) -> DepthMap:
    path = Path(path)
    values = read_pfm(path) if path.suffix.lower() == ".pfm" else read_raw_depth(path)
    valid = np.isfinite(values) & (values > 0)
    return DepthMap(np.where(valid, values, 0.0), valid)


def write_depth(path, depth: DepthMap):
    values = np.where(depth.validity, depth.values, 0.0)
    if Path(path).suffix.lower() == ".pfm":
        write_pfm(path, values)
    else:
        write_raw_depth(path, values)


# ---------------------------------------------------------------------------
# images and masks


def read_image(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"))
    except (OSError, ValueError) as exc:
        raise InputFormatError(f"{path}: cannot read image ({exc})") from exc


def write_image(path, image: np.ndarray):
    Image.fromarray(np.asarray(image, dtype=np.uint8)).save(path, compress_level=1)


def read_mask(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("L")) >= 128
    except (OSError, ValueError) as exc:
        raise InputFormatError(f"{path}: cannot read mask ({exc})") from exc


def write_mask(path, mask: np.ndarray):
    Image.fromarray(np.where(np.asarray(mask, bool), 255, 0).astype(np.uint8), mode="L").save(
        path, compress_level=1
    )


def read_frames(directory, pattern: str = "frame_*.png") -> np.ndarray:
    files = sorted(Path(directory).glob(pattern))
    if not files:
        raise InputFormatError(f"{directory}: no files matching {pattern}")
    frames = [read_image(f) for f in files]
    if len({f.shape for f in frames}) != 1:
        raise InputFormatError(f"{directory}: frames differ in size")
    return np.stack(frames)


def write_frames(directory, frames, pattern: str = FRAME_PATTERN):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, f in enumerate(frames):
        write_image(directory / pattern.format(i), f)


def read_masks(directory, pattern: str = "mask_*.png") -> list[np.ndarray]:
    files = sorted(Path(directory).glob(pattern))
    if not files:
        raise InputFormatError(f"{directory}: no files matching {pattern}")
    return [read_mask(f) for f in files]


def read_depths(directory) -> list[DepthMap]:
    directory = Path(directory)
    files = sorted(directory.glob("depth_*.pfm")) or sorted(directory.glob("depth_*.raw"))
    if not files:
        raise InputFormatError(f"{directory}: no depth_*.pfm or depth_*.raw files")
    return [read_depth(f) for f in files]


# ---------------------------------------------------------------------------
# optical flow


def write_flo(path, u: np.ndarray, v: np.ndarray):
    u = np.asarray(u, dtype="<f4")
    h, w = u.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<fii", FLO_MAGIC, w, h))
        fh.write(np.stack([u, np.asarray(v, dtype="<f4")], axis=-1).tobytes())


def read_flo(path) -> tuple[np.ndarray, np.ndarray]:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise InputFormatError(f"{path}: cannot read flow file ({exc})") from exc
    if len(buf) < 12:
        raise InputFormatError(f"{path}: truncated .flo header")
    magic, w, h = struct.unpack("<fii", buf[:12])
    if magic != FLO_MAGIC:
        raise InputFormatError(f"{path}: bad .flo magic {magic!r}")
    if w <= 0 or h <= 0:
        raise InputFormatError(f"{path}: invalid flow size {w}x{h}")
    data = np.frombuffer(buf, dtype="<f4", offset=12)
    if data.size != 2 * w * h:
        raise InputFormatError(f"{path}: expected {2 * w * h} flow values, found {data.size}")
    data = data.reshape(h, w, 2).astype(np.float64)
    if not np.isfinite(data).all():
        raise InputFormatError(f"{path}: flow contains non-finite values")
    return data[..., 0], data[..., 1]


def read_flow(path, source_frame: int | None = None, target_frame: int | None = None) -> FlowField:
    m = _FLOW_RE.search(Path(path).name)
    if m and source_frame is None:
        source_frame, target_frame = int(m.group(1)), int(m.group(2))
    u, v = read_flo(path)
    return FlowField(u, v, source_frame or 0, 1 if target_frame is None else target_frame)


def write_flow(directory, flow: FlowField) -> Path:
    path = Path(directory) / FLOW_PATTERN.format(flow.source_frame, flow.target_frame)
    write_flo(path, flow.u, flow.v)
    return path


def scan_flows(directory) -> dict[tuple[int, int], Path]:
    """Map (source, target) to file for every ``flow_<src>_<dst>.flo``."""
    out = {}
    for f in Path(directory).glob("*.flo"):
        m = _FLOW_RE.search(f.name)
        if m:
            out[(int(m.group(1)), int(m.group(2)))] = f
    return out


def load_flow_pairs(directory, n_frames: int) -> list[tuple[FlowField, FlowField]]:
    """First-to-k / k-to-first flow pairs for frames 1..n-1.

    Direct ``flow_00000_k`` / ``flow_k_00000`` files are used when present;
    otherwise consecutive ``flow_i_(i+1)`` / ``flow_(i+1)_i`` chains are composed.
    """
    from .visibility import compose_flow

    files = scan_flows(directory)
    cache: dict = {}

    def get(s, t):
        if (s, t) not in cache:
            cache[(s, t)] = read_flow(files[(s, t)], s, t)
        return cache[(s, t)]

    pairs = []
    fwd = bwd = None
    for k in range(1, n_frames):
        if (0, k) in files and (k, 0) in files:
            fwd, bwd = get(0, k), get(k, 0)
        else:
            needed = [(k - 1, k), (k, k - 1)]
            missing = [FLOW_PATTERN.format(*st) for st in needed if st not in files]
            if missing or (k > 1 and fwd is None):
                raise InputFormatError(
                    f"{directory}: missing flow for frame {k} (need {FLOW_PATTERN.format(0, k)} and "
                    f"{FLOW_PATTERN.format(k, 0)}, or {', '.join(missing) or 'the preceding chain'})"
                )
            f, b = get(k - 1, k), get(k, k - 1)
            fwd = compose_flow([f]) if k == 1 else compose_flow([fwd, f])
            bwd = compose_flow([b]) if k == 1 else compose_flow([b, bwd])
        pairs.append((fwd, bwd))
    return pairs


# ---------------------------------------------------------------------------
# latents


def write_latent(path, grid: LatentGrid):
    L, C, h, w = grid.shape
    with open(path, "wb") as fh:
        fh.write(LATENT_MAGIC + struct.pack("<IIII", L, C, h, w))
        fh.write(grid.data.astype("<f4").tobytes())


def _read_latent_header(buf: bytes, path) -> tuple[int, int, int, int]:
    if len(buf) < 20 or buf[:4] != LATENT_MAGIC:
        raise InputFormatError(f"{path}: not an EPLG latent file")
    return struct.unpack("<IIII", buf[4:20])


def read_latent(path) -> LatentGrid:
    buf = Path(path).read_bytes()
    L, C, h, w = _read_latent_header(buf, path)
    data = np.frombuffer(buf, dtype="<f4", offset=20)
    if data.size != L * C * h * w:
        raise InputFormatError(f"{path}: payload size mismatch")
    return LatentGrid(data.reshape(L, C, h, w).astype(np.float64))


_MODE_BYTE = {TRAIN: 0, INFERENCE: 1}


def write_latent_mask(path, mask: LatentMask):
    L, h, w = mask.shape
    with open(path, "wb") as fh:
        fh.write(LATENT_MAGIC + struct.pack("<IIII", L, 1, h, w))
        fh.write(bytes([_MODE_BYTE[mask.mode]]))
        fh.write(mask.values.astype("<f4").tobytes())


def read_latent_mask(path) -> LatentMask:
    buf = Path(path).read_bytes()
    L, C, h, w = _read_latent_header(buf, path)
    if C != 1 or len(buf) < 21:
        raise InputFormatError(f"{path}: latent mask needs one channel and a mode byte")
    mode = {v: k for k, v in _MODE_BYTE.items()}.get(buf[20])
    if mode is None:
        raise InputFormatError(f"{path}: unknown mask mode byte {buf[20]}")
    data = np.frombuffer(buf, dtype="<f4", offset=21)
    if data.size != L * h * w:
        raise InputFormatError(f"{path}: payload size mismatch")
    return LatentMask(data.reshape(L, h, w).astype(np.float64), mode)


# ---------------------------------------------------------------------------
# anchor directories


def write_anchor(directory, anchor: AnchorVideo, meta: dict | None = None):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, (frame, mask) in enumerate(zip(anchor.frames, anchor.masks)):
        write_image(directory / ANCHOR_PATTERN.format(i), frame)
        write_mask(directory / MASK_PATTERN.format(i), mask.values)
    payload = {"anchor": anchor.metadata, "frozen": [m.frozen for m in anchor.masks]}
    if meta:
        payload.update(meta)
    write_json(directory / "meta.json", payload)


def read_anchor(directory) -> AnchorVideo:
    directory = Path(directory)
    frames = read_frames(directory, "anchor_*.png")
    masks = read_masks(directory, "mask_*.png")
    meta = {}
    if (directory / "meta.json").exists():
        meta = json.loads((directory / "meta.json").read_text())
    frozen = meta.get("frozen", [False] * len(masks))
    vm = [VisibilityMask(m, i, bool(f)) for i, (m, f) in enumerate(zip(masks, frozen))]
    return AnchorVideo(frames, vm, meta.get("anchor", {}))


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")
