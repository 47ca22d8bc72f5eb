"""Photometric and occlusion augmentations and training-triplet assembly."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from . import geometry
from .geometry import WarpField

log = logging.getLogger(__name__)

OCCLUSIONS = ("none", "cutout", "keyout")


@dataclass(frozen=True)
class AugmentationSpec:
    """Ranges are half-widths of uniform draws; ``contrast`` is relative to 1."""

    kind: str = "weak"
    brightness: float = 0.05
    contrast: float = 0.05
    channel_shift: float = 0.05
    blur_prob: float = 0.0
    blur_sigma: tuple[float, float] = (0.1, 2.0)
    occlusion: str = "none"
    box: int = 8
    occlusion_prob: float = 0.0

    def __post_init__(self):
        if self.kind not in ("weak", "strong"):
            raise ValueError(f"kind must be weak or strong, got {self.kind!r}")
        if self.occlusion not in OCCLUSIONS:
            raise ValueError(f"occlusion must be one of {OCCLUSIONS}, got {self.occlusion!r}")
        for name in ("brightness", "contrast", "channel_shift", "blur_prob", "occlusion_prob"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.box < 0:
            raise ValueError("box must be non-negative")
        if self.kind == "weak" and (self.occlusion != "none" or self.blur_prob > 0):
            raise ValueError("a weak augmentation may not occlude or blur")


def weak_spec() -> AugmentationSpec:
    return AugmentationSpec(kind="weak")


def strong_spec(occlusion: str = "keyout", image_size: int = 64, variant: str = "weak") -> AugmentationSpec:
    """Strong photometric list plus occlusion.

    ``variant="weak"`` is the low-probability small-box setting (p=0.3,
    box=image/8); ``"strong"`` is p=0.6 with box=image/4.
    """
    prob, box = (0.3, image_size // 8) if variant == "weak" else (0.6, image_size // 4)
    if occlusion == "none":
        prob = 0.0
    return AugmentationSpec(
        kind="strong",
        brightness=0.2,
        contrast=0.4,
        channel_shift=0.1,
        blur_prob=0.5,
        occlusion=occlusion,
        box=box,
        occlusion_prob=prob,
    )


def identity_spec(kind: str = "weak") -> AugmentationSpec:
    return AugmentationSpec(kind=kind, brightness=0.0, contrast=0.0, channel_shift=0.0)


# -- photometric ------------------------------------------------------------------------
def adjust(image: np.ndarray, brightness: float = 0.0, contrast: float = 1.0, shift=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Pointwise ``(x - 0.5) * contrast + 0.5 + brightness + shift[c]``, clamped to [0, 1]."""
    shift = np.asarray(shift, dtype=np.float64).reshape(-1, 1, 1)
    # written as an offset from ``image`` so the identity setting is exact
    out = image + (image - 0.5) * (contrast - 1.0) + (brightness + shift)
    return np.clip(out, 0.0, 1.0).astype(image.dtype)


def apply_photometric(image: np.ndarray, spec: AugmentationSpec, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    # draw everything up front so the stream does not depend on the spec's values
    u = rng.uniform(-1.0, 1.0, size=5)
    blur_draw, sigma_draw = rng.random(2)
    out = adjust(
        image,
        brightness=u[0] * spec.brightness,
        contrast=1.0 + u[1] * spec.contrast,
        shift=u[2:5] * spec.channel_shift,
    )
    if spec.blur_prob > 0 and blur_draw < spec.blur_prob:
        lo, hi = spec.blur_sigma
        sigma = lo + (hi - lo) * sigma_draw
        out = np.stack([gaussian_filter(ch, sigma, mode="nearest") for ch in out]).astype(image.dtype)
    return out


# -- occlusion ------------------------------------------------------------------------------
def _box_bounds(cx: float, cy: float, box: int, height: int, width: int) -> tuple[int, int, int, int]:
    x0 = int(np.floor(cx - box / 2 + 0.5))
    y0 = int(np.floor(cy - box / 2 + 0.5))
    return max(y0, 0), min(y0 + box, height), max(x0, 0), min(x0 + box, width)


def keyout(image: np.ndarray, keypoints, box: int, prob: float, seed: int) -> np.ndarray:
    """Zero a ``box x box`` square around each keypoint picked with probability ``prob``.

    Keypoints are ``(x, y)`` in continuous pixel coordinates (pixel ``i`` spans
    ``[i, i+1)``); the square is clipped at the border.
    """
    out = np.array(image, copy=True)
    if keypoints is None or len(keypoints) == 0 or prob <= 0 or box <= 0:
        return out
    kps = np.asarray(keypoints, dtype=np.float64).reshape(-1, 2)
    h, w = image.shape[-2:]
    picks = np.random.default_rng(seed).random(len(kps)) < prob
    for (x, y), pick in zip(kps, picks):
        if pick:
            y0, y1, x0, x1 = _box_bounds(x, y, box, h, w)
            out[..., y0:y1, x0:x1] = 0
    return out


def cutout(image: np.ndarray, box: int, prob: float, seed: int) -> np.ndarray:
    """Zero one ``box x box`` square with probability ``prob``; its centre keeps it inside the image."""
    out = np.array(image, copy=True)
    rng = np.random.default_rng(seed)
    draw, ux, uy = rng.random(3)
    if prob <= 0 or box <= 0 or draw >= prob:
        return out
    h, w = image.shape[-2:]
    half = box / 2
    cx = half + ux * max(w - box, 0) if box < w else w / 2
    cy = half + uy * max(h - box, 0) if box < h else h / 2
    y0, y1, x0, x1 = _box_bounds(cx, cy, box, h, w)
    out[..., y0:y1, x0:x1] = 0
    return out


def occlude(image: np.ndarray, spec: AugmentationSpec, keypoints, seed: int) -> np.ndarray:
    if spec.occlusion == "none" or spec.occlusion_prob <= 0:
        return np.array(image, copy=True)
    if spec.occlusion == "keyout" and keypoints is not None and len(keypoints):
        return keyout(image, keypoints, spec.box, spec.occlusion_prob, seed)
    # no keypoints to guide the boxes: plain cutout
    return cutout(image, spec.box, spec.occlusion_prob, seed)


# -- triplets ---------------------------------------------------------------------------------
@dataclass(frozen=True)
class GeometrySpec:
    affine_scale: float = 0.15
    tps_scale: float = 0.4
    tps_grid: int = 3
    order: str = "affine-tps"  # compose(affine, tps) or compose(tps, affine)

    def __post_init__(self):
        if self.order not in ("affine-tps", "tps-affine"):
            raise ValueError(f"unknown warp order {self.order!r}")


def random_warp(spec: GeometrySpec, affine_seed: int, tps_seed: int, height: int, width: int) -> WarpField:
    aff = geometry.random_affine(affine_seed, spec.affine_scale, height, width)
    tps = geometry.random_tps(tps_seed, spec.tps_scale, spec.tps_grid, height, width)
    if spec.order == "affine-tps":
        return geometry.compose(aff, tps)
    return geometry.compose(tps, aff)


@dataclass
class TrainingTriplet:
    source: np.ndarray
    weak: np.ndarray
    strong: np.ndarray
    strong_unwarped: np.ndarray
    warp: WarpField
    source_keypoints: np.ndarray | None
    target_keypoints: np.ndarray | None
    labeled: bool
    category: str = ""
    pair_id: str = ""


def sample_seeds(*key: int, n: int = 5) -> list[int]:
    """Independent sub-seeds derived from an integer key such as (seed, epoch, index)."""
    return [int(s) for s in np.random.SeedSequence([int(k) for k in key]).generate_state(n)]


def build_triplet(
    source: np.ndarray,
    target: np.ndarray,
    source_keypoints,
    target_keypoints,
    labeled: bool,
    weak: AugmentationSpec,
    strong: AugmentationSpec,
    geom: GeometrySpec,
    seeds,
    category: str = "",
    pair_id: str = "",
) -> TrainingTriplet:
    """``{I_s, alpha(I_t), G(A(I_t); phi)}`` with ``phi`` recorded exactly as applied."""
    if source.shape != target.shape:
        raise ValueError(f"source {source.shape} and target {target.shape} must have the same shape")
    s_weak, s_strong, s_occ, s_aff, s_tps = list(seeds)[:5]
    h, w = target.shape[-2:]
    weak_img = apply_photometric(target, weak, s_weak)
    strong_img = apply_photometric(target, strong, s_strong)
    strong_img = occlude(strong_img, strong, target_keypoints if labeled else None, s_occ)
    phi = random_warp(geom, s_aff, s_tps, h, w)
    warped = geometry.grid_sample(strong_img, phi)
    return TrainingTriplet(
        source=source,
        weak=weak_img,
        strong=warped,
        strong_unwarped=strong_img,
        warp=phi,
        source_keypoints=source_keypoints if labeled else None,
        target_keypoints=target_keypoints if labeled else None,
        labeled=labeled,
        category=category,
        pair_id=pair_id,
    )
