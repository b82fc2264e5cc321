"""Camera trajectory error metrics: RotErr, TransErr and CamMC.

All three sum a per-frame error over every frame.  Translations are divided
by each trajectory's own scene scale (distance from the first camera centre
to the farthest one) so the translation terms are scale-free.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InputFormatError
from .geometry import Trajectory

SCALE_EPS = 1e-8
METRICS = ("rot_err", "trans_err", "cammc")
W2C = "w2c"
C2W = "c2w"


@dataclass
class TrajectoryPair:
    predicted: Trajectory
    ground_truth: Trajectory

    def __post_init__(self):
        n, m = len(self.predicted), len(self.ground_truth)
        if n != m:
            raise InputFormatError(f"predicted has {n} poses, ground truth has {m}")
        if n < 2:
            raise InputFormatError("trajectories need at least two frames")


def scene_scale(traj: Trajectory) -> float:
    c = traj.centers
    return max(float(np.linalg.norm(c - c[0], axis=1).max()), SCALE_EPS)


def _stack(traj: Trajectory, convention: str) -> tuple[np.ndarray, np.ndarray]:
    R = np.stack([p.rotation for p in traj.poses])
    T = np.stack([p.translation for p in traj.poses])
    if convention == C2W:
        T = -np.einsum("nji,nj->ni", R, T)
        R = R.transpose(0, 2, 1)
    elif convention != W2C:
        raise ValueError(f"unknown convention {convention!r}")
    return R, T


def rot_err(pair: TrajectoryPair, convention: str = W2C) -> float:
    Rp, _ = _stack(pair.predicted, convention)
    Rg, _ = _stack(pair.ground_truth, convention)
    tr = np.einsum("nij,nij->n", Rp, Rg)  # tr(Rp @ Rg.T)
    angle = np.arccos(np.clip((tr - 1.0) / 2.0, -1.0, 1.0))
    # rounding in the trace would otherwise leave ~1e-8 for equal rotations
    angle[(Rp == Rg).all(axis=(1, 2))] = 0.0
    return float(angle.sum())


def trans_err(pair: TrajectoryPair, convention: str = W2C) -> float:
    _, Tp = _stack(pair.predicted, convention)
    _, Tg = _stack(pair.ground_truth, convention)
    d = Tp / scene_scale(pair.predicted) - Tg / scene_scale(pair.ground_truth)
    return float(np.linalg.norm(d, axis=1).sum())


def cammc(pair: TrajectoryPair, convention: str = W2C) -> float:
    Rp, Tp = _stack(pair.predicted, convention)
    Rg, Tg = _stack(pair.ground_truth, convention)
    Mp = np.concatenate([Rp, (Tp / scene_scale(pair.predicted))[:, :, None]], axis=2)
    Mg = np.concatenate([Rg, (Tg / scene_scale(pair.ground_truth))[:, :, None]], axis=2)
    return float(np.sqrt(((Mp - Mg) ** 2).sum(axis=(1, 2))).sum())


@dataclass
class MetricReport:
    rot_err: float
    trans_err: float
    cammc: float
    per_seed: list[dict] | None = None
    mean: dict | None = None
    std: dict | None = None

    def values(self) -> dict:
        return {k: getattr(self, k) for k in METRICS}

    def to_dict(self) -> dict:
        out = self.values()
        if self.per_seed is not None:
            out.update(per_seed=self.per_seed, mean=self.mean, std=self.std)
        return out


def evaluate(pair: TrajectoryPair, convention: str = W2C) -> MetricReport:
    return MetricReport(rot_err(pair, convention), trans_err(pair, convention), cammc(pair, convention))


def seed_statistics(reports: list[MetricReport], ddof: int = 0) -> MetricReport:
    """Mean and (population by default) standard deviation across seeds.

    The returned report's headline values are the means.
    """
    if not reports:
        raise ValueError("need at least one report")
    table = np.array([[getattr(r, k) for k in METRICS] for r in reports])
    mean = table.mean(axis=0)
    std = table.std(axis=0, ddof=ddof) if len(reports) > ddof else np.zeros(len(METRICS))
    return MetricReport(
        *mean.tolist(),
        per_seed=[r.values() for r in reports],
        mean=dict(zip(METRICS, mean.tolist())),
        std=dict(zip(METRICS, std.tolist())),
    )
