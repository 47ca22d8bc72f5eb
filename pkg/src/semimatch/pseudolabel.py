"""Warped pseudo-labels and the confidence weights that gate them.

All maps live on the feature grid. Matching probabilities are ``[N_t, N_s]``
with rows indexed by target cells; arrays with a leading batch axis are
handled sample by sample.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels
from .geometry import WarpField, grid_coordinates, warp_planes, warp_probability
from .numerics import save_archive

DEFAULT_TAU = 0.5
DEFAULT_EPS_FB = 1.5
DEFAULT_MARGIN = 1


@dataclass
class PseudoLabel:
    q: np.ndarray  # [N_t, N_s]
    targets: np.ndarray  # [N_t] flat source index
    valid: np.ndarray  # [N_t] bool


@dataclass
class ConfidenceMask:
    m: np.ndarray  # [h, w] warped product, in [0, 1]
    mask: np.ndarray  # [h, w] foreground prior
    fb: np.ndarray  # [h, w] forward-backward agreement
    thres: np.ndarray  # [h, w] uncertainty weight
    tau: float = DEFAULT_TAU
    eps_fb: float = DEFAULT_EPS_FB

    def planes(self) -> np.ndarray:
        return np.stack([self.mask, self.fb, self.thres, self.m]).astype(np.float64)


def make_pseudo_label(p_weak: np.ndarray, warp_grid: WarpField, target_hw: tuple[int, int]) -> PseudoLabel:
    """Pseudo-label for the strong target from the weak-pair probabilities.

    ``p_weak`` must already be detached (a plain array); ``warp_grid`` is the
    strong-branch warp expressed on the feature grid.
    """
    p = np.asarray(p_weak, dtype=np.float64)
    q, valid = warp_probability(p, warp_grid, target_hw)
    targets = kernels.hard_argmax(q)
    targets = np.where(valid, targets, 0)
    return PseudoLabel(q, targets, valid)


def keypoints_to_cells(keypoints, image_hw: tuple[int, int], grid_hw: tuple[int, int]) -> np.ndarray:
    """Integer ``(x, y)`` cell holding each keypoint (half-open cells, floor)."""
    kps = np.asarray(keypoints, dtype=np.float64).reshape(-1, 2)
    scale = np.array([grid_hw[1] / image_hw[1], grid_hw[0] / image_hw[0]])
    cells = np.floor(kps * scale).astype(np.int64)
    return np.clip(cells, 0, np.array([grid_hw[1] - 1, grid_hw[0] - 1]))


def foreground_mask(cells, grid_hw: tuple[int, int], margin: int = DEFAULT_MARGIN) -> np.ndarray:
    """Box around keypoint cells ``[K, 2]`` (x, y), grown by ``margin``; all ones without keypoints."""
    h, w = grid_hw
    cells = np.asarray(cells).reshape(-1, 2)
    if len(cells) == 0:
        return np.ones(grid_hw)
    x0, y0 = cells.min(axis=0) - margin
    x1, y1 = cells.max(axis=0) + margin
    out = np.zeros(grid_hw)
    out[max(y0, 0) : min(y1, h - 1) + 1, max(x0, 0) : min(x1, w - 1) + 1] = 1.0
    return out


def fb_consistency_mask(
    p_fwd: np.ndarray,
    p_bwd: np.ndarray,
    target_hw: tuple[int, int],
    source_hw: tuple[int, int],
    eps_fb: float = DEFAULT_EPS_FB,
) -> np.ndarray:
    """1 where target cell -> source match -> back-match lands within ``eps_fb`` cells."""
    n_t, n_s = target_hw[0] * target_hw[1], source_hw[0] * source_hw[1]
    if p_fwd.shape != (n_t, n_s) or p_bwd.shape != (n_s, n_t):
        raise ValueError(
            f"forward {p_fwd.shape} / backward {p_bwd.shape} do not fit grids {target_hw} and {source_hw}"
        )
    fwd = kernels.hard_argmax(np.ascontiguousarray(p_fwd))
    bwd = kernels.hard_argmax(np.ascontiguousarray(p_bwd))
    coords = grid_coordinates(*target_hw)
    dist = np.linalg.norm(coords[bwd[fwd]] - coords, axis=1)
    return (dist <= eps_fb).astype(np.float64).reshape(target_hw)


def uncertainty(p: np.ndarray) -> np.ndarray:
    """``exp(entropy)`` per row, clipped into ``[1, N]``."""
    p = np.asarray(p, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    u = np.exp(-plogp.sum(axis=-1))
    return np.clip(u, 1.0, p.shape[-1])


def threshold_weight(p: np.ndarray, u: np.ndarray | None = None, tau: float = DEFAULT_TAU) -> np.ndarray:
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    p = np.asarray(p, dtype=np.float64)
    if u is None:
        u = uncertainty(p)
    return np.where(p.max(axis=-1) >= tau, 1.0 / u, 0.0)


def compose_confidence(
    mask: np.ndarray,
    fb: np.ndarray,
    thres: np.ndarray,
    warp_grid: WarpField,
    tau: float = DEFAULT_TAU,
    eps_fb: float = DEFAULT_EPS_FB,
) -> ConfidenceMask:
    shape = warp_grid.shape
    for name, comp in (("mask", mask), ("fb", fb), ("thres", thres)):
        if np.shape(comp) != shape:
            raise ValueError(f"{name} map {np.shape(comp)} does not match warp grid {shape}")
    prod = np.asarray(mask, dtype=np.float64) * fb * thres
    m = np.clip(warp_planes(prod[None], warp_grid)[0], 0.0, 1.0)
    m[~warp_grid.valid] = 0.0
    return ConfidenceMask(m, np.asarray(mask, float), np.asarray(fb, float), np.asarray(thres, float), tau, eps_fb)


def confidence(
    p_weak: np.ndarray,
    p_back: np.ndarray,
    warp_grid: WarpField,
    target_hw: tuple[int, int],
    source_hw: tuple[int, int],
    kp_cells=None,
    tau: float = DEFAULT_TAU,
    eps_fb: float = DEFAULT_EPS_FB,
    margin: int = DEFAULT_MARGIN,
    use: tuple[bool, bool, bool] = (True, True, True),
) -> ConfidenceMask:
    """All three components from the weak pair, then warped. ``use`` switches components off (set to 1)."""
    ones = np.ones(target_hw)
    use_mask, use_fb, use_thres = use
    mask = foreground_mask(kp_cells if kp_cells is not None else [], target_hw, margin) if use_mask else ones
    fb = fb_consistency_mask(p_weak, p_back, target_hw, source_hw, eps_fb) if use_fb else ones
    thres = threshold_weight(p_weak, tau=tau).reshape(target_hw) if use_thres else ones
    return compose_confidence(mask, fb, thres, warp_grid, tau, eps_fb)


def dump_masks(path, masks: list[ConfidenceMask]) -> Path:
    """Write each sample's ``[mask, fb, thres, m]`` planes to a dump archive."""
    path = Path(path)
    save_archive(path, {f"sample{i}.planes": cm.planes() for i, cm in enumerate(masks)})
    return path
