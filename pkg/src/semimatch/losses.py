"""Training objectives and the adaptive balance between them.

Every loss returns ``(value, flagged)`` where ``flagged`` marks a zero
contribution (nothing to supervise). Coordinates are in source-grid cells.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import WarpField, grid_coordinates
from .model import readout
from .numerics import Tensor, as_tensor, gather, log, log_softmax, mul, tsum, vector_norm
from .pseudolabel import DEFAULT_TAU, keypoints_to_cells

LAMBDA_EPS = 1e-8


@dataclass(frozen=True)
class LossConfig:
    gamma: float = 0.1
    tau: float = DEFAULT_TAU
    unsup: str = "contrastive"  # contrastive | aepe
    lambda_mode: str = "adaptive"  # adaptive | fixed
    lambda_value: float = 0.0
    warmup_epochs: int = 0
    normalize_unsup: bool = True
    sup_readout: str = "soft"
    min_mean_m: float = 0.0  # below this mean confidence the unsupervised term is flagged

    def __post_init__(self):
        if self.gamma <= 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")
        if not 0.0 < self.tau < 1.0:
            raise ValueError(f"tau must lie in (0, 1), got {self.tau}")
        if self.unsup not in ("contrastive", "aepe"):
            raise ValueError(f"unknown unsupervised loss {self.unsup!r}")
        if self.lambda_mode not in ("adaptive", "fixed"):
            raise ValueError(f"unknown lambda mode {self.lambda_mode!r}")
        if self.sup_readout not in ("soft", "hard"):
            raise ValueError(f"unknown readout {self.sup_readout!r}")
        if self.warmup_epochs < 0 or self.lambda_value < 0 or self.min_mean_m < 0:
            raise ValueError("warmup_epochs, lambda_value and min_mean_m must be non-negative")


@dataclass
class KeypointAnnotation:
    source: np.ndarray  # [K, 2] pixel (x, y)
    target: np.ndarray  # [K, 2]
    image_hw: tuple[int, int]
    category: str = ""

    def __post_init__(self):
        self.source = np.asarray(self.source, dtype=np.float64).reshape(-1, 2)
        self.target = np.asarray(self.target, dtype=np.float64).reshape(-1, 2)
        if len(self.source) != len(self.target):
            raise ValueError(f"{len(self.source)} source keypoints but {len(self.target)} target keypoints")
        h, w = self.image_hw
        for kps in (self.source, self.target):
            if len(kps) and ((kps < 0).any() or (kps[:, 0] > w).any() or (kps[:, 1] > h).any()):
                raise ValueError("keypoints must lie inside the image")

    def __len__(self) -> int:
        return len(self.source)

    def target_rows(self, grid_hw: tuple[int, int]) -> np.ndarray:
        cells = keypoints_to_cells(self.target, self.image_hw, grid_hw)
        return cells[:, 1] * grid_hw[1] + cells[:, 0]

    def source_cells(self, grid_hw: tuple[int, int]) -> np.ndarray:
        return keypoints_to_cells(self.source, self.image_hw, grid_hw).astype(np.float64)

    def indicator(self, grid_hw: tuple[int, int]) -> np.ndarray:
        """``c(i)``: 1 on target cells holding a keypoint."""
        c = np.zeros(grid_hw[0] * grid_hw[1])
        c[self.target_rows(grid_hw)] = 1.0
        return c.reshape(grid_hw)


def _zero(like: Tensor) -> Tensor:
    return mul(tsum(like), 0.0)


def supervised_loss(prob: Tensor, batch_idx, rows, gt_cells, source_hw, mode: str = "soft"):
    """Mean over keypoints of the distance between the readout at ``prob[b, row]`` and the GT source cell.

    ``prob`` is ``[B, N_t, N_s]``; ``batch_idx``/``rows`` pick one row per keypoint.
    """
    rows = np.asarray(rows, dtype=np.int64)
    if len(rows) == 0:
        return _zero(prob), True
    picked = gather(prob, (np.asarray(batch_idx, dtype=np.int64), rows))
    gt = as_tensor(np.asarray(gt_cells).reshape(-1, 2), dtype=prob.dtype)
    if mode == "hard":
        pred = as_tensor(readout(picked.data, source_hw, "hard"), dtype=prob.dtype)
        # hard readout has no gradient; keep the graph attached for a uniform interface
        pred = pred + mul(tsum(picked), 0.0)
    else:
        pred = readout(picked, source_hw, "soft")
    dist = vector_norm(pred - gt, axis=-1)
    return tsum(dist) / float(len(rows)), False


def _weights(m, dtype, min_mean: float) -> tuple[np.ndarray, float, bool]:
    m = np.asarray(m, dtype=dtype)
    total = float(m.sum())
    starved = total <= 0 or (m.size > 0 and total / m.size < min_mean)
    return m, total, starved


def contrastive_unsup_loss(scores: Tensor, targets, m, gamma: float = 0.1, normalize: bool = True, min_mean: float = 0.0):
    """Confidence-weighted cross-entropy of ``softmax(scores / gamma)`` against the pseudo targets.

    ``scores``/``targets``/``m`` are ``[..., N_t, N_s]`` / ``[..., N_t]`` / ``[..., N_t]``.
    The loss is flagged when ``m`` sums to zero or its mean is below ``min_mean``.
    """
    m, total, starved = _weights(m, scores.dtype, min_mean)
    if starved:
        return _zero(scores), True
    logp = log_softmax(scores * (1.0 / gamma), axis=-1)
    targets = np.asarray(targets, dtype=np.int64)
    lead = np.indices(targets.shape)
    picked = gather(logp, tuple(lead) + (targets,))
    loss = -tsum(mul(picked, m))
    return (loss / total if normalize else loss), False


def aepe_unsup_loss(prob: Tensor, targets, m, source_hw, normalize: bool = True, min_mean: float = 0.0):
    m, total, starved = _weights(m, prob.dtype, min_mean)
    if starved:
        return _zero(prob), True
    coords = grid_coordinates(*source_hw).astype(prob.dtype)
    goal = as_tensor(coords[np.asarray(targets, dtype=np.int64)], dtype=prob.dtype)
    dist = vector_norm(readout(prob, source_hw, "soft") - goal, axis=-1)
    loss = tsum(mul(dist, m))
    return (loss / total if normalize else loss), False


def selfsup_targets(warp_grid: WarpField) -> tuple[np.ndarray, np.ndarray]:
    """Nearest source cell of each warped-grid position, plus validity."""
    h, w = warp_grid.shape
    cells = np.rint(warp_grid.coords).astype(np.int64)
    cells[..., 0] = np.clip(cells[..., 0], 0, w - 1)
    cells[..., 1] = np.clip(cells[..., 1], 0, h - 1)
    return (cells[..., 1] * w + cells[..., 0]).reshape(-1), warp_grid.valid.reshape(-1)


def selfsup_loss(prob: Tensor, warp_grid: WarpField, eps: float = 1e-12):
    """Cross-entropy of ``prob[N_t, N_s]`` rows against the one-hot cells dictated by the warp."""
    targets, valid = selfsup_targets(warp_grid)
    if not valid.any():
        return _zero(prob), True
    rows = np.flatnonzero(valid)
    picked = gather(prob, (rows, targets[rows]))
    return -tsum(log(picked + eps)) / float(len(rows)), False


def adaptive_lambda(l_sup: float, l_unsup: float, unsup_flag: bool, epoch: int, config: LossConfig) -> float:
    if epoch < config.warmup_epochs or unsup_flag:
        return 0.0
    if config.lambda_mode == "fixed":
        return float(config.lambda_value)
    if abs(l_unsup) < LAMBDA_EPS:
        return 0.0
    return float(l_sup) / float(l_unsup)


def total_loss(l_sup: Tensor, l_unsup: Tensor, unsup_flag: bool, epoch: int, config: LossConfig):
    """``L_sup + lambda * L_unsup`` with ``lambda`` built from detached values."""
    lam = adaptive_lambda(float(l_sup.data), float(l_unsup.data), unsup_flag, epoch, config)
    if lam == 0.0:
        return l_sup, 0.0
    return l_sup + mul(l_unsup, lam), lam
