"""PCK evaluation and report tables/plots."""
from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import MatchingModel, readout
from .numerics import no_grad
from .pseudolabel import keypoints_to_cells

DEFAULT_ALPHAS = (0.05, 0.1, 0.15)


@dataclass(frozen=True)
class PckConfig:
    alphas: tuple[float, ...] = DEFAULT_ALPHAS
    normalization: str = "image"  # image | bbox
    readout: str = "soft"

    def __post_init__(self):
        if not self.alphas or any(not 0.0 < a < 1.0 for a in self.alphas):
            raise ValueError(f"alphas must lie in (0, 1), got {self.alphas}")
        if self.normalization not in ("image", "bbox"):
            raise ValueError(f"unknown normalization {self.normalization!r}")
        if self.readout not in ("soft", "hard"):
            raise ValueError(f"unknown readout {self.readout!r}")


def threshold_scale(mode: str, image_hw, gt_keypoints=None) -> float:
    """Length multiplied by alpha: image max side, or max side of the keypoint bounding box."""
    if mode == "image":
        return float(max(image_hw))
    kps = np.asarray(gt_keypoints, dtype=np.float64).reshape(-1, 2)
    if len(kps) == 0:
        raise ValueError("bbox normalisation needs keypoints")
    return float(np.max(kps.max(axis=0) - kps.min(axis=0)))


def correct_keypoints(pred, gt, scale, alpha: float) -> np.ndarray:
    d = np.linalg.norm(np.asarray(pred, float) - np.asarray(gt, float), axis=-1)
    return d <= alpha * np.asarray(scale, dtype=np.float64)


def pck(pred, gt, scale, alphas=DEFAULT_ALPHAS) -> dict[float, float | None]:
    """Percentage of keypoints within ``alpha * scale``; ``None`` when there are no keypoints.

    ``scale`` is a scalar or one value per keypoint.
    """
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 2)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 2)
    if pred.shape != gt.shape:
        raise ValueError(f"{len(pred)} predictions for {len(gt)} ground-truth keypoints")
    if len(gt) == 0:
        return {a: None for a in alphas}
    return {a: 100.0 * float(np.mean(correct_keypoints(pred, gt, scale, a))) for a in alphas}


def cells_to_pixels(coords, grid_hw, image_hw) -> np.ndarray:
    """Grid coordinates to continuous pixel coordinates via cell centres."""
    coords = np.asarray(coords, dtype=np.float64)
    scale = np.array([image_hw[1] / grid_hw[1], image_hw[0] / grid_hw[0]])
    return (coords + 0.5) * scale


def keypoints_from_prob(prob: np.ndarray, target_kps, image_hw, grid_hw, mode: str = "soft") -> np.ndarray:
    """Source-pixel prediction for each target keypoint, read from ``prob[N_t, N_s]``."""
    cells = keypoints_to_cells(target_kps, image_hw, grid_hw)
    rows = cells[:, 1] * grid_hw[1] + cells[:, 0]
    return cells_to_pixels(readout(prob[rows], grid_hw, mode), grid_hw, image_hw)


def predict_keypoints(model: MatchingModel, samples, mode: str = "soft", batch_size: int = 32):
    """``(pred, gt)`` source keypoints for each sample, matching from its target keypoints."""
    out = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        src = np.stack([s.source for s in chunk])
        tgt = np.stack([s.target for s in chunk])
        with no_grad():
            res = model.forward(src, tgt)
        prob = res["prob"].data
        grid_hw = res["source_hw"]
        for s, p in zip(chunk, prob):
            rec = s.record
            pred = keypoints_from_prob(p, rec.target_keypoints, rec.image_hw, grid_hw, mode)
            out.append((pred, rec.source_keypoints))
    return out


@dataclass
class EvalReport:
    alphas: tuple[float, ...]
    pck: dict[float, float | None]
    per_class: dict[str, dict[float, float | None]]
    class_keypoints: dict[str, int]
    pairs: int
    keypoints: int
    metadata: dict = field(default_factory=dict)

    def row(self) -> dict:
        out = dict(self.metadata)
        out.update(pairs=self.pairs, keypoints=self.keypoints)
        for a in self.alphas:
            out[f"pck@{a:g}"] = self.pck[a]
        return out


def evaluate_predictions(records, predictions, config: PckConfig = PckConfig(), metadata=None) -> EvalReport:
    """Aggregate per-keypoint hits over pairs and per class."""
    hits: dict[str, dict[float, int]] = defaultdict(lambda: defaultdict(int))
    counts: dict[str, int] = defaultdict(int)
    for rec, (pred, gt) in zip(records, predictions):
        gt = np.asarray(gt, dtype=np.float64).reshape(-1, 2)
        if len(gt) == 0:
            continue
        scale = threshold_scale(config.normalization, rec.image_hw, rec.source_keypoints)
        counts[rec.category] += len(gt)
        for a in config.alphas:
            hits[rec.category][a] += int(correct_keypoints(pred, gt, scale, a).sum())
    total = sum(counts.values())
    overall = {a: (100.0 * sum(h[a] for h in hits.values()) / total if total else None) for a in config.alphas}
    per_class = {c: {a: 100.0 * hits[c][a] / counts[c] for a in config.alphas} for c in sorted(counts)}
    return EvalReport(
        alphas=tuple(config.alphas),
        pck=overall,
        per_class=per_class,
        class_keypoints=dict(sorted(counts.items())),
        pairs=len(records),
        keypoints=total,
        metadata=dict(metadata or {}),
    )


def evaluate(model: MatchingModel, samples, config: PckConfig = PckConfig(), metadata=None) -> EvalReport:
    preds = predict_keypoints(model, samples, config.readout)
    return evaluate_predictions([s.record for s in samples], preds, config, metadata)


# -- reports -------------------------------------------------------------------------------
def _check_alphas(runs) -> tuple[float, ...]:
    alphas = tuple(runs[0].alphas)
    for r in runs[1:]:
        if tuple(r.alphas) != alphas:
            raise ValueError(f"runs disagree on alpha sets: {alphas} vs {tuple(r.alphas)}")
    return alphas


def build_report(runs, group_by: str = "label_fraction", out_dir=None, name: str = "report"):
    """Average runs per group (a metadata key, or ``class``) into a table; optionally write CSV + PNG.

    Returns ``(rows, combined)`` where ``combined`` is an EvalReport pooled over all runs.
    """
    runs = list(runs)
    if not runs:
        raise ValueError("need at least one run")
    alphas = _check_alphas(runs)
    rows = []
    if group_by == "class":
        hits: dict[str, dict[float, float]] = defaultdict(lambda: defaultdict(float))
        counts: dict[str, int] = defaultdict(int)
        for r in runs:
            for c, scores in r.per_class.items():
                n = r.class_keypoints[c]
                counts[c] += n
                for a in alphas:
                    hits[c][a] += scores[a] * n / 100.0
        for c in sorted(counts):
            row = {"group": c, "runs": len(runs), "keypoints": counts[c]}
            row.update({f"pck@{a:g}": 100.0 * hits[c][a] / counts[c] for a in alphas})
            rows.append(row)
    else:
        groups: dict = defaultdict(list)
        for r in runs:
            groups[r.metadata.get(group_by, "")].append(r)
        for key in sorted(groups, key=_sort_key):
            members = groups[key]
            row = {"group": key, "runs": len(members), "keypoints": sum(m.keypoints for m in members)}
            for a in alphas:
                vals = [m.pck[a] for m in members if m.pck[a] is not None]
                row[f"pck@{a:g}"] = float(np.mean(vals)) if vals else None
            rows.append(row)
    combined = _pool(runs, alphas)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_csv(out_dir / f"{name}.csv", rows)
        plot_rows(out_dir / f"{name}.png", rows, alphas, group_by)
    return rows, combined


def _sort_key(v):
    return (0, float(v), "") if isinstance(v, (int, float)) else (1, 0.0, str(v))


def _pool(runs, alphas) -> EvalReport:
    hits: dict[str, dict[float, float]] = defaultdict(lambda: defaultdict(float))
    counts: dict[str, int] = defaultdict(int)
    for r in runs:
        for c, scores in r.per_class.items():
            counts[c] += r.class_keypoints[c]
            for a in alphas:
                hits[c][a] += scores[a] * r.class_keypoints[c] / 100.0
    total = sum(counts.values())
    overall = {a: (100.0 * sum(h[a] for h in hits.values()) / total if total else None) for a in alphas}
    per_class = {c: {a: 100.0 * hits[c][a] / counts[c] for a in alphas} for c in sorted(counts)}
    return EvalReport(alphas, overall, per_class, dict(counts), sum(r.pairs for r in runs), total)


def write_csv(path, rows) -> Path:
    path = Path(path)
    fields = list(rows[0]) if rows else ["group"]
    for r in rows:
        fields += [k for k in r if k not in fields]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in fields})
    return path


def plot_rows(path, rows, alphas, group_by: str) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    groups = [r["group"] for r in rows]
    numeric = all(isinstance(g, (int, float)) for g in groups)
    for a in alphas:
        ys = [np.nan if r[f"pck@{a:g}"] is None else r[f"pck@{a:g}"] for r in rows]
        if numeric:
            ax.plot(groups, ys, marker="o", label=f"PCK@{a:g}")
        else:
            ax.plot(range(len(groups)), ys, marker="o", label=f"PCK@{a:g}")
    if not numeric:
        ax.set_xticks(range(len(groups)))
        ax.set_xticklabels([str(g) for g in groups], rotation=30, ha="right")
    ax.set_xlabel(group_by)
    ax.set_ylabel("PCK (%)")
    ax.set_ylim(0, 100)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)
