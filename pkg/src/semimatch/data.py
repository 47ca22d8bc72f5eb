"""Pair manifests, label-fraction splits and the synthetic pair generator.

Keypoints are ``(x, y)`` in continuous pixel coordinates: pixel ``(i, j)``
covers ``[i, i+1) x [j, j+1)``.
"""
from __future__ import annotations

import json
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import zoom

from .geometry import ThinPlateSpline

log = logging.getLogger(__name__)

MANIFEST_FORMAT = "semimatch-manifest"
MANIFEST_VERSION = 1
SPLITS = ("train", "val", "test")


class ManifestError(ValueError):
    """Malformed manifest file."""


@dataclass(frozen=True)
class PairManifest:
    pair_id: str
    source: str
    target: str
    source_keypoints: np.ndarray | None
    target_keypoints: np.ndarray | None
    category: str = ""
    split: str = "train"
    labeled: bool = True
    image_hw: tuple[int, int] = (64, 64)

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")
        src, tgt = self.source_keypoints, self.target_keypoints
        if (src is None) != (tgt is None):
            raise ValueError("source and target keypoints must both be present or both absent")
        if self.labeled and src is None:
            raise ValueError(f"labeled pair {self.pair_id} has no keypoints")
        if src is None:
            return
        src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
        tgt = np.asarray(tgt, dtype=np.float64).reshape(-1, 2)
        if len(src) != len(tgt):
            raise ValueError(f"pair {self.pair_id}: {len(src)} source vs {len(tgt)} target keypoints")
        h, w = self.image_hw
        for kps in (src, tgt):
            if len(kps) and ((kps < 0).any() or (kps[:, 0] > w).any() or (kps[:, 1] > h).any()):
                raise ValueError(f"pair {self.pair_id}: keypoint outside the {w}x{h} image")
        object.__setattr__(self, "source_keypoints", src)
        object.__setattr__(self, "target_keypoints", tgt)

    @property
    def num_keypoints(self) -> int:
        return 0 if self.source_keypoints is None else len(self.source_keypoints)

    def hidden(self) -> "PairManifest":
        """Copy with the keypoints removed."""
        return replace(self, source_keypoints=None, target_keypoints=None, labeled=False)

    def to_json(self) -> dict:
        rec = {
            "id": self.pair_id,
            "source": self.source,
            "target": self.target,
            "category": self.category,
            "split": self.split,
            "labeled": self.labeled,
            "image_hw": list(self.image_hw),
        }
        if self.source_keypoints is not None:
            rec["source_keypoints"] = self.source_keypoints.tolist()
            rec["target_keypoints"] = self.target_keypoints.tolist()
        return rec

    @classmethod
    def from_json(cls, rec: dict) -> "PairManifest":
        src, tgt = rec.get("source_keypoints"), rec.get("target_keypoints")
        return cls(
            pair_id=str(rec["id"]),
            source=str(rec["source"]),
            target=str(rec["target"]),
            source_keypoints=None if src is None else np.asarray(src, dtype=np.float64),
            target_keypoints=None if tgt is None else np.asarray(tgt, dtype=np.float64),
            category=str(rec.get("category", "")),
            split=str(rec.get("split", "train")),
            labeled=bool(rec.get("labeled", src is not None)),
            image_hw=tuple(int(v) for v in rec.get("image_hw", (64, 64))),
        )


# -- manifest files -------------------------------------------------------------------------
def write_manifest(path, pairs) -> Path:
    path = Path(path)
    ids = [p.pair_id for p in pairs]
    if len(set(ids)) != len(ids):
        raise ValueError("pair ids must be unique")
    with open(path, "w") as fh:
        fh.write(json.dumps({"format": MANIFEST_FORMAT, "version": MANIFEST_VERSION, "count": len(pairs)}) + "\n")
        for pair in pairs:
            fh.write(json.dumps(pair.to_json()) + "\n")
    return path


def load_manifest(path, check_images: bool = True) -> list[PairManifest]:
    """Read a JSON-lines manifest. The first line is a header naming the format and version.

    Invalid records are skipped with a warning that names the line; a broken
    header or unparsable line aborts. Image paths are resolved against the
    manifest's directory.
    """
    path = Path(path)
    root = path.parent
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ManifestError(f"{path}:1: missing header line")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}:1: header is not valid JSON ({exc.msg})") from None
    if not isinstance(header, dict) or header.get("format") != MANIFEST_FORMAT:
        raise ManifestError(f"{path}:1: not a {MANIFEST_FORMAT} file")
    if header.get("version") != MANIFEST_VERSION:
        raise ManifestError(f"{path}:1: unsupported version {header.get('version')!r}")
    pairs, seen = [], set()
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
        try:
            pair = PairManifest.from_json(rec)
        except (KeyError, TypeError, ValueError) as exc:
            log.warning("%s:%d: record rejected: %s", path, lineno, exc)
            continue
        if pair.pair_id in seen:
            log.warning("%s:%d: duplicate pair id %s rejected", path, lineno, pair.pair_id)
            continue
        if check_images:
            missing = [p for p in (pair.source, pair.target) if not (root / p).is_file()]
            if missing:
                log.warning("%s:%d: pair %s dropped, missing image %s", path, lineno, pair.pair_id, missing[0])
                continue
        seen.add(pair.pair_id)
        pairs.append(pair)
    return pairs


def load_image(path) -> np.ndarray:
    """PNG to float32 ``[3, H, W]`` in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def save_image(path, image: np.ndarray) -> None:
    arr = np.clip(np.rint(np.asarray(image).transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def quantize(image: np.ndarray) -> np.ndarray:
    """Round-trip through 8-bit so in-memory images equal their PNG files."""
    return (np.clip(np.rint(image * 255.0), 0, 255) / 255.0).astype(np.float32)


@dataclass
class PairSample:
    record: PairManifest
    source: np.ndarray
    target: np.ndarray


def load_samples(manifest_path, split: str | None = None) -> list[PairSample]:
    """Manifest records plus decoded images; undecodable pairs are skipped with a warning."""
    root = Path(manifest_path).parent
    out = []
    for rec in load_manifest(manifest_path):
        if split is not None and rec.split != split:
            continue
        try:
            src, tgt = load_image(root / rec.source), load_image(root / rec.target)
        except (OSError, ValueError) as exc:
            log.warning("pair %s skipped: cannot decode image (%s)", rec.pair_id, exc)
            continue
        if src.shape != tgt.shape:
            log.warning("pair %s skipped: source %s and target %s differ in size", rec.pair_id, src.shape, tgt.shape)
            continue
        out.append(PairSample(rec, src, tgt))
    return out


# -- label fractions ------------------------------------------------------------------------
def split_label_fraction(pairs, fraction: float, seed: int):
    """Class-stratified choice of ``round(fraction * N)`` labeled pairs.

    Returns ``(labeled, unlabeled, hidden)`` where unlabeled records carry no
    keypoints and ``hidden`` maps their ids to the withheld keypoint arrays.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"label fraction must lie in (0, 1], got {fraction}")
    pairs = list(pairs)
    n_total = len(pairs)
    target = int(math.floor(fraction * n_total + 0.5))
    by_class: dict[str, list[int]] = defaultdict(list)
    for i, p in enumerate(pairs):
        by_class[p.category].append(i)
    classes = sorted(by_class)
    # largest-remainder apportionment keeps the total exact
    quotas = {c: fraction * len(by_class[c]) for c in classes}
    counts = {c: int(math.floor(q)) for c, q in quotas.items()}
    left = target - sum(counts.values())
    order = sorted(classes, key=lambda c: (-(quotas[c] - counts[c]), c))
    for c in order[:left]:
        counts[c] += 1
    rng = np.random.default_rng(seed)
    chosen = set()
    for c in classes:
        idx = by_class[c]
        if counts[c] == 0:
            log.warning("label fraction %.3f leaves class %r without labeled pairs", fraction, c)
            continue
        chosen.update(idx[k] for k in rng.permutation(len(idx))[: counts[c]])
    labeled, unlabeled, hidden = [], [], {}
    for i, p in enumerate(pairs):
        if i in chosen:
            labeled.append(replace(p, labeled=True))
        else:
            if p.source_keypoints is not None:
                hidden[p.pair_id] = (p.source_keypoints, p.target_keypoints)
            unlabeled.append(p.hidden())
    return labeled, unlabeled, hidden


# -- synthetic generator ----------------------------------------------------------------------
CATEGORY_NAMES = ("kite", "beetle", "lamp", "fish", "robot", "cactus", "boat", "owl")
_SHAPES = ("ellipse", "rect", "triangle")


@dataclass(frozen=True)
class Part:
    shape: str
    center: tuple[float, float]
    size: tuple[float, float]
    angle: float
    color: tuple[float, float, float]
    gradient: tuple[float, float, float]
    stripes: tuple[float, float, float]  # frequency, orientation, amplitude


@dataclass(frozen=True)
class SyntheticScene:
    """An object made of textured primitives in a canonical frame centred on the origin."""

    seed: int
    category: str
    parts: tuple[Part, ...]
    keypoints: np.ndarray  # canonical [K, 2]
    background: int
    size: int = 64


@dataclass(frozen=True)
class Pose:
    rotation: float = 0.0
    scale: float = 1.0
    aspect: float = 1.0
    tx: float = 0.0
    ty: float = 0.0
    tps: tuple = ()  # flattened control displacements, empty for none


def _local(points: np.ndarray, part: Part) -> np.ndarray:
    c, s = math.cos(part.angle), math.sin(part.angle)
    d = points - np.asarray(part.center)
    return np.stack([c * d[:, 0] + s * d[:, 1], -s * d[:, 0] + c * d[:, 1]], axis=1)


def _inside(local: np.ndarray, part: Part) -> np.ndarray:
    a, b = part.size
    x, y = local[:, 0] / a, local[:, 1] / b
    if part.shape == "ellipse":
        return x * x + y * y <= 1.0
    if part.shape == "rect":
        return (np.abs(x) <= 1.0) & (np.abs(y) <= 1.0)
    # isosceles triangle pointing along +x
    return (x >= -1.0) & (x <= 1.0) & (np.abs(y) <= (1.0 - x) / 2.0)


def _paint(local: np.ndarray, part: Part) -> np.ndarray:
    a, b = part.size
    u, v = local[:, 0] / a, local[:, 1] / b
    freq, orient, amp = part.stripes
    wave = amp * np.sin(freq * (math.cos(orient) * local[:, 0] + math.sin(orient) * local[:, 1]))
    rgb = np.asarray(part.color)[None] + np.asarray(part.gradient)[None] * (0.6 * u + 0.4 * v)[:, None]
    return rgb + wave[:, None]


def _category_template(index: int) -> dict:
    rng = np.random.default_rng(10_007 + 31 * index)
    body = dict(
        shape=str(rng.choice(["ellipse", "rect"])),
        size=(rng.uniform(10, 15), rng.uniform(7, 11)),
        angle=rng.uniform(-0.4, 0.4),
    )
    n_parts = int(rng.integers(2, 5))
    angles = np.sort(rng.uniform(0, 2 * np.pi, n_parts))
    angles += np.arange(n_parts) * 0.3  # spread
    parts = []
    for k in range(n_parts):
        parts.append(
            dict(
                shape=str(rng.choice(_SHAPES)),
                angle_pos=float(angles[k]),
                dist=rng.uniform(0.8, 1.05),
                size=(rng.uniform(3.5, 6.5), rng.uniform(2.5, 4.5)),
                angle=float(angles[k] + rng.uniform(-0.3, 0.3)),
            )
        )
    colors = rng.uniform(0.1, 0.9, size=(n_parts + 1, 3))
    n_body_kps = int(np.clip(8 - 2 * n_parts, 2, 4)) + int(rng.integers(0, 2))
    body_kp_angles = np.sort(rng.uniform(0, 2 * np.pi, n_body_kps))
    return dict(body=body, parts=parts, colors=colors, body_kp_angles=body_kp_angles)


def make_scene(seed: int, category: int | None = None, n_categories: int = 5, size: int = 64) -> SyntheticScene:
    """Deterministic scene: a per-category template with per-instance jitter."""
    rng = np.random.default_rng([seed, 7])
    if category is None:
        category = int(rng.integers(n_categories))
    tpl = _category_template(category)
    jit = lambda scale: rng.uniform(1 - scale, 1 + scale)  # noqa: E731
    body = tpl["body"]
    ba, bb = body["size"][0] * jit(0.12), body["size"][1] * jit(0.12)
    b_angle = body["angle"] + rng.uniform(-0.15, 0.15)

    def color(k):
        return tuple(np.clip(tpl["colors"][k] + rng.uniform(-0.08, 0.08, 3), 0.05, 0.95))

    def texture():
        return (
            tuple(rng.uniform(-0.25, 0.25, 3)),
            (rng.uniform(0.6, 1.4), rng.uniform(0, np.pi), rng.uniform(0.03, 0.1)),
        )

    grad, stripes = texture()
    parts = [Part(body["shape"], (0.0, 0.0), (ba, bb), b_angle, color(0), grad, stripes)]
    keypoints = []
    rot = np.array([[math.cos(b_angle), -math.sin(b_angle)], [math.sin(b_angle), math.cos(b_angle)]])
    for k, spec in enumerate(tpl["parts"]):
        t = spec["angle_pos"] + rng.uniform(-0.1, 0.1)
        d = spec["dist"] * jit(0.05)
        center = rot @ np.array([ba * d * math.cos(t), bb * d * math.sin(t)])
        extent = (spec["size"][0] * jit(0.15), spec["size"][1] * jit(0.15))
        angle = spec["angle"] + b_angle + rng.uniform(-0.15, 0.15)
        grad, stripes = texture()
        parts.append(Part(spec["shape"], tuple(center), extent, angle, color(k + 1), grad, stripes))
        keypoints.append(center)
        # the part's far end
        tip = center + 0.6 * extent[0] * np.array([math.cos(angle), math.sin(angle)])
        keypoints.append(tip)
    for t in tpl["body_kp_angles"]:
        keypoints.append(rot @ np.array([0.6 * ba * math.cos(t), 0.6 * bb * math.sin(t)]))
    kps = np.asarray(keypoints[:10], dtype=np.float64)
    return SyntheticScene(
        seed=int(seed),
        category=CATEGORY_NAMES[category % len(CATEGORY_NAMES)],
        parts=tuple(parts),
        keypoints=kps,
        background=int(rng.integers(1 << 30)),
        size=size,
    )


_TPS_GRID = np.stack(np.meshgrid(np.linspace(-30, 30, 3), np.linspace(-30, 30, 3), indexing="xy"), -1).reshape(-1, 2)


def sample_pose(seed: int, strength: float = 1.0) -> Pose:
    rng = np.random.default_rng([seed, 11])
    return Pose(
        rotation=rng.uniform(-0.35, 0.35) * strength,
        scale=1.0 + rng.uniform(-0.12, 0.12) * strength,
        aspect=1.0 + rng.uniform(-0.06, 0.06) * strength,
        tx=rng.uniform(-5, 5) * strength,
        ty=rng.uniform(-5, 5) * strength,
        tps=tuple(rng.uniform(-2.5, 2.5, _TPS_GRID.size) * strength),
    )


class _PoseMap:
    """Canonical frame -> image plane: ``A(tps(q)) + centre``."""

    def __init__(self, pose: Pose, size: int):
        c, s = math.cos(pose.rotation), math.sin(pose.rotation)
        scale = np.diag([pose.scale * pose.aspect, pose.scale / pose.aspect])
        self.linear = np.array([[c, -s], [s, c]]) @ scale
        self.offset = np.array([size / 2 + pose.tx, size / 2 + pose.ty])
        self.spline = None
        if pose.tps and np.any(np.asarray(pose.tps)):
            disp = np.asarray(pose.tps, dtype=np.float64).reshape(-1, 2)
            self.spline = ThinPlateSpline(_TPS_GRID, _TPS_GRID + disp)

    def _bend(self, q: np.ndarray) -> np.ndarray:
        return q if self.spline is None else self.spline(q)

    def forward(self, q: np.ndarray) -> np.ndarray:
        return self._bend(q) @ self.linear.T + self.offset

    def inverse(self, p: np.ndarray, iters: int = 30) -> np.ndarray:
        y = (p - self.offset) @ np.linalg.inv(self.linear).T
        if self.spline is None:
            return y
        q = y.copy()
        for _ in range(iters):  # fixed point: q = y - d(q); the bend is a small perturbation
            nxt = y - (self.spline(q) - q)
            done = np.max(np.abs(nxt - q)) < 1e-9
            q = nxt
            if done:
                break
        return q


def _background(seed: int, size: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 13])
    base = rng.uniform(0.2, 0.8, 3)
    coarse = rng.uniform(-0.18, 0.18, size=(3, 5, 5))
    smooth = np.stack([zoom(ch, size / 5, order=3) for ch in coarse])[:, :size, :size]
    img = np.clip(base[:, None, None] + smooth, 0, 1)
    ys, xs = np.mgrid[0:size, 0:size] + 0.5
    pts = np.stack([xs.ravel(), ys.ravel()], 1)
    for _ in range(int(rng.integers(2, 5))):
        part = Part(
            shape=str(rng.choice(_SHAPES)),
            center=tuple(rng.uniform(0, size, 2)),
            size=(rng.uniform(3, 8), rng.uniform(3, 8)),
            angle=rng.uniform(0, np.pi),
            color=tuple(rng.uniform(0.05, 0.95, 3)),
            gradient=tuple(rng.uniform(-0.15, 0.15, 3)),
            stripes=(rng.uniform(0.5, 1.5), rng.uniform(0, np.pi), rng.uniform(0.0, 0.08)),
        )
        local = _local(pts, part)
        inside = _inside(local, part)
        img.reshape(3, -1)[:, inside] = _paint(local[inside], part).T
    return img


def render_view(scene: SyntheticScene, pose: Pose, appearance_seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Image ``[3, S, S]`` (8-bit quantised float32) and keypoints ``[K, 2]`` for one view."""
    size = scene.size
    rng = np.random.default_rng([appearance_seed, 17])
    shift = rng.uniform(-0.06, 0.06, 3)
    gain = rng.uniform(0.9, 1.1)
    img = _background(int(rng.integers(1 << 30)) ^ scene.background, size)
    mapping = _PoseMap(pose, size)
    ys, xs = np.mgrid[0:size, 0:size] + 0.5
    pix = np.stack([xs.ravel(), ys.ravel()], 1)
    canon = mapping.inverse(pix)
    flat = img.reshape(3, -1)
    for part in scene.parts:
        local = _local(canon, part)
        inside = _inside(local, part)
        flat[:, inside] = (_paint(local[inside], part) * gain + shift).T
    img = img + rng.normal(0.0, 0.015, img.shape)
    return quantize(np.clip(img, 0, 1)), mapping.forward(scene.keypoints)


def _pose_fits(scene: SyntheticScene, pose: Pose, margin: float = 1.0) -> bool:
    kps = _PoseMap(pose, scene.size).forward(scene.keypoints)
    return bool(np.all((kps >= margin) & (kps <= scene.size - margin)))


def view_pose(scene: SyntheticScene, view_seed: int) -> Pose:
    """A random pose that keeps every keypoint inside the image."""
    for attempt in range(20):
        pose = sample_pose(view_seed * 31 + attempt)
        if _pose_fits(scene, pose):
            return pose
    return Pose(scale=0.85)


def generate_synthetic_pair(
    scene: SyntheticScene,
    source_seed: int,
    target_seed: int,
    pair_id: str = "",
    split: str = "train",
    source_pose: Pose | None = None,
    target_pose: Pose | None = None,
) -> PairSample:
    """Two views of ``scene``; the keypoint pairs are exact projections of the canonical keypoints."""
    src_pose = source_pose if source_pose is not None else view_pose(scene, source_seed)
    tgt_pose = target_pose if target_pose is not None else view_pose(scene, target_seed)
    src_img, src_kps = render_view(scene, src_pose, source_seed)
    tgt_img, tgt_kps = render_view(scene, tgt_pose, target_seed)
    pair_id = pair_id or f"s{scene.seed}_{source_seed}_{target_seed}"
    rec = PairManifest(
        pair_id=pair_id,
        source=f"images/{pair_id}_src.png",
        target=f"images/{pair_id}_tgt.png",
        source_keypoints=src_kps,
        target_keypoints=tgt_kps,
        category=scene.category,
        split=split,
        labeled=True,
        image_hw=(scene.size, scene.size),
    )
    return PairSample(rec, src_img, tgt_img)


@dataclass(frozen=True)
class SynthConfig:
    n_train: int = 300
    n_val: int = 50
    n_test: int = 100
    n_categories: int = 5
    seed: int = 0
    size: int = 64


def generate_benchmark(config: SynthConfig = SynthConfig()) -> dict[str, list[PairSample]]:
    """Balanced-class synthetic benchmark keyed by split."""
    out: dict[str, list[PairSample]] = {s: [] for s in SPLITS}
    counts = dict(zip(SPLITS, (config.n_train, config.n_val, config.n_test)))
    offset = 0
    for split in SPLITS:
        for i in range(counts[split]):
            k = offset + i
            scene_seed, src_seed, tgt_seed = (int(s) for s in np.random.SeedSequence([config.seed, k]).generate_state(3))
            scene = make_scene(scene_seed, category=k % config.n_categories, size=config.size)
            out[split].append(generate_synthetic_pair(scene, src_seed, tgt_seed, f"{split}{i:04d}", split))
        offset += counts[split]
    return out


def write_benchmark(directory, samples: dict[str, list[PairSample]]) -> Path:
    """PNG images plus ``manifest.jsonl`` under ``directory``."""
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    records = []
    for split in SPLITS:
        for s in samples.get(split, []):
            save_image(directory / s.record.source, s.source)
            save_image(directory / s.record.target, s.target)
            records.append(s.record)
    return write_manifest(directory / "manifest.jsonl", records)
