"""Semi-supervised training loop, optimizers, run configuration and checkpoints."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import logging
import math
import os
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import augment, data, geometry, losses
from .augment import GeometrySpec, TrainingTriplet
from .eval import EvalReport, PckConfig, evaluate
from .losses import LossConfig
from .model import MatchingModel, ModelConfig
from .numerics import Tensor, concat, load_archive, no_grad, save_archive, split
from .pseudolabel import ConfidenceMask, confidence, keypoints_to_cells, make_pseudo_label

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "semimatch-checkpoint"


class TrainingHalted(RuntimeError):
    """Too many consecutive rejected steps."""


# -- configuration -------------------------------------------------------------------------
@dataclass
class RunConfig:
    """Every knob of a run. Defaults marked in the README are stand-ins, not published settings."""

    seed: int = 0
    epochs: int = 30
    warmup: float = 0.2  # fraction of epochs trained supervised-only
    batch_size: int = 10
    lr: float = 3e-3
    optimizer: str = "adam"  # adam | sgd
    momentum: float = 0.0
    mode: str = "semi"  # semi | supervised
    label_fraction: float = 0.1
    dtype: str = "float32"
    # data
    manifest: str = ""
    n_train: int = 300
    n_val: int = 50
    n_test: int = 100
    n_categories: int = 5
    data_seed: int = 0
    output_dir: str = ""
    # losses
    gamma: float = 0.1
    tau: float = 0.5
    unsup: str = "contrastive"
    lambda_mode: str = "adaptive"
    lambda_value: float = 0.0
    normalize_unsup: bool = True
    sup_readout: str = "soft"
    min_mean_m: float = 1e-3
    # confidence
    eps_fb: float = 1.5
    margin: int = 1
    use_mask: bool = True
    use_fb: bool = True
    use_thres: bool = True
    # augmentation
    occlusion: str = "keyout"
    occlusion_variant: str = "weak"
    affine_scale: float = 0.15
    tps_scale: float = 0.4
    warp_order: str = "affine-tps"
    # model
    channels: str = "16,32,32"
    strides: str = "2,2,1"
    aggregator: str = "conv"
    agg_hidden: int = 4
    gain_rate: float = 100.0
    # evaluation
    eval_readout: str = "soft"
    eval_normalization: str = "image"
    val_every: int = 1
    max_rejections: int = 3
    tag: str = ""

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        checks = [
            (self.epochs >= 0, "epochs must be >= 0"),
            (0.0 <= self.warmup <= 1.0, "warmup must be a fraction in [0, 1]"),
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (self.lr > 0, "lr must be positive"),
            (self.optimizer in ("adam", "sgd"), "optimizer must be adam or sgd"),
            (self.mode in ("semi", "supervised"), "mode must be semi or supervised"),
            (0.0 < self.label_fraction <= 1.0, "label_fraction must lie in (0, 1]"),
            (self.dtype in ("float32", "float64"), "dtype must be float32 or float64"),
            (self.occlusion in augment.OCCLUSIONS, f"occlusion must be one of {augment.OCCLUSIONS}"),
            (self.occlusion_variant in ("weak", "strong"), "occlusion_variant must be weak or strong"),
            (self.eps_fb >= 0 and self.margin >= 0, "eps_fb and margin must be >= 0"),
            (self.val_every >= 1 and self.max_rejections >= 1, "val_every and max_rejections must be >= 1"),
            (min(self.n_train, self.n_val, self.n_test) >= 0, "dataset sizes must be >= 0"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ValueError(msg)
        self.loss_config()
        self.model_config()
        self.geometry()

    # derived views
    @property
    def warmup_epochs(self) -> int:
        return int(math.floor(self.warmup * self.epochs + 0.5))

    def loss_config(self) -> LossConfig:
        supervised = self.mode == "supervised"
        return LossConfig(
            gamma=self.gamma,
            tau=self.tau,
            unsup=self.unsup,
            lambda_mode="fixed" if supervised else self.lambda_mode,
            lambda_value=0.0 if supervised else self.lambda_value,
            warmup_epochs=self.warmup_epochs,
            normalize_unsup=self.normalize_unsup,
            sup_readout=self.sup_readout,
            min_mean_m=self.min_mean_m,
        )

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            channels=_ints(self.channels),
            strides=_ints(self.strides),
            aggregator=self.aggregator,
            agg_hidden=self.agg_hidden,
            gain_rate=self.gain_rate,
            dtype=self.dtype,
        )

    def geometry(self) -> GeometrySpec:
        return GeometrySpec(affine_scale=self.affine_scale, tps_scale=self.tps_scale, order=self.warp_order)

    def augmentations(self, image_size: int = 64):
        strong = augment.strong_spec(self.occlusion, image_size, self.occlusion_variant)
        return augment.weak_spec(), strong

    def pck_config(self) -> PckConfig:
        return PckConfig(normalization=self.eval_normalization, readout=self.eval_readout)

    @property
    def supervised_only(self) -> bool:
        return self.mode == "supervised" or (self.lambda_mode == "fixed" and self.lambda_value == 0.0)

    # serialisation
    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        """Hash of everything that affects the numbers (not where they are written)."""
        items = {k: v for k, v in self.to_dict().items() if k not in ("output_dir", "tag")}
        text = "\n".join(f"{k}={items[k]}" for k in sorted(items))
        return hashlib.sha256(text.encode()).hexdigest()[:12]

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    @classmethod
    def field_types(cls) -> dict[str, type]:
        defaults = cls()
        return {f.name: type(getattr(defaults, f.name)) for f in dataclasses.fields(cls)}

    @classmethod
    def coerce(cls, key: str, value: str):
        types = cls.field_types()
        if key not in types:
            raise KeyError(f"unknown config key {key!r}")
        kind = types[key]
        if kind is bool:
            low = str(value).strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"{key}: expected a boolean, got {value!r}")
        try:
            return kind(value)
        except ValueError:
            raise ValueError(f"{key}: expected {kind.__name__}, got {value!r}") from None


def _ints(text) -> tuple[int, ...]:
    if isinstance(text, (tuple, list)):
        return tuple(int(v) for v in text)
    return tuple(int(v) for v in str(text).split(",") if v.strip())


def read_config_file(path) -> dict[str, object]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value, got {raw.strip()!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            key = key.replace("-", "_")
            try:
                out[key] = RunConfig.coerce(key, value)
            except (KeyError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    return out


def write_config_file(path, config: RunConfig) -> Path:
    path = Path(path)
    with open(path, "w") as fh:
        fh.write(f"# config_hash = {config.config_hash()}\n")
        for k, v in config.to_dict().items():
            fh.write(f"{k} = {v}\n")
    return path


# -- optimizers ------------------------------------------------------------------------------
class Adam:
    def __init__(self, lr: float = 3e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr, self.betas, self.eps = lr, betas, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1.0 - b1**self.t, 1.0 - b2**self.t
        out = {}
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(p)
            m = self.m.get(name, np.zeros_like(p))
            v = self.v.get(name, np.zeros_like(p))
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            self.m[name], self.v[name] = m, v
            out[name] = (p - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)
        return out

    def state(self) -> dict[str, np.ndarray]:
        st = {"t": np.array(self.t, dtype=np.int64)}
        st.update({f"m.{k}": v for k, v in self.m.items()})
        st.update({f"v.{k}": v for k, v in self.v.items()})
        return st

    def load(self, state: dict[str, np.ndarray]) -> None:
        self.t = int(state["t"])
        self.m = {k[2:]: np.array(v) for k, v in state.items() if k.startswith("m.")}
        self.v = {k[2:]: np.array(v) for k, v in state.items() if k.startswith("v.")}


class SGD:
    def __init__(self, lr: float = 1e-2, momentum: float = 0.0):
        self.lr, self.momentum = lr, momentum
        self.t = 0
        self.buf: dict[str, np.ndarray] = {}

    def step(self, params, grads):
        self.t += 1
        out = {}
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(p)
            if self.momentum:
                g = self.momentum * self.buf.get(name, np.zeros_like(p)) + g
                self.buf[name] = g
            out[name] = (p - self.lr * g).astype(p.dtype)
        return out

    def state(self):
        st = {"t": np.array(self.t, dtype=np.int64)}
        st.update({f"b.{k}": v for k, v in self.buf.items()})
        return st

    def load(self, state):
        self.t = int(state["t"])
        self.buf = {k[2:]: np.array(v) for k, v in state.items() if k.startswith("b.")}


def make_optimizer(config: RunConfig):
    if config.optimizer == "sgd":
        return SGD(config.lr, config.momentum)
    return Adam(config.lr)


# -- batches --------------------------------------------------------------------------------
def make_batches(n_labeled: int, n_unlabeled: int, batch_size: int, seed: int, epoch: int):
    """Shuffled ``(labeled_idx, unlabeled_idx)`` per batch, both sets spread evenly over batches."""
    n = n_labeled + n_unlabeled
    if n == 0:
        return []
    rng = np.random.default_rng([seed, epoch, 101])
    n_batches = math.ceil(n / batch_size)
    lab = np.array_split(rng.permutation(n_labeled), n_batches)
    unl = np.array_split(rng.permutation(n_unlabeled), n_batches)
    return list(zip(lab, unl))


@dataclass
class Batch:
    triplets: list[TrainingTriplet]
    n_labeled: int  # labeled samples come first

    @property
    def size(self) -> int:
        return len(self.triplets)


def build_batch(labeled, unlabeled, lab_idx, unl_idx, config: RunConfig, epoch: int, with_unlabeled: bool = True) -> Batch:
    """Triplets for one batch. Seeds depend on (seed, epoch, sample) only."""
    weak, strong = config.augmentations(labeled[0].source.shape[-1] if labeled else unlabeled[0].source.shape[-1])
    geom = config.geometry()
    out = []
    entries = [(labeled[i], int(i)) for i in lab_idx]
    if with_unlabeled:
        entries += [(unlabeled[i], len(labeled) + int(i)) for i in unl_idx]
    for sample, key in entries:
        rec = sample.record
        seeds = augment.sample_seeds(config.seed, epoch, key)
        out.append(
            augment.build_triplet(
                sample.source,
                sample.target,
                rec.source_keypoints,
                rec.target_keypoints,
                rec.labeled,
                weak,
                strong,
                geom,
                seeds,
                category=rec.category,
                pair_id=rec.pair_id,
            )
        )
    return Batch(out, len(lab_idx))


# -- one step -------------------------------------------------------------------------------------
@dataclass
class StepResult:
    loss: float
    l_sup: float
    l_unsup: float
    lam: float
    mean_m: float
    sum_m: float
    n_labeled: int
    n_unlabeled: int
    applied: bool
    grads: dict[str, np.ndarray] = field(default_factory=dict, repr=False)
    masks: list[ConfidenceMask] = field(default_factory=list, repr=False)


def _stack(images, dtype) -> np.ndarray:
    return np.ascontiguousarray(np.stack(images), dtype=dtype)


def supervision(batch: Batch, image_hw, grid_hw):
    """Flattened ``(batch_idx, target_row, source_cell)`` over labeled keypoints."""
    b_idx, rows, cells = [], [], []
    for b, t in enumerate(batch.triplets[: batch.n_labeled]):
        ann = losses.KeypointAnnotation(t.source_keypoints, t.target_keypoints, image_hw)
        r = ann.target_rows(grid_hw)
        b_idx.append(np.full(len(r), b))
        rows.append(r)
        cells.append(ann.source_cells(grid_hw))
    if not rows:
        return np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros((0, 2))
    return np.concatenate(b_idx), np.concatenate(rows), np.concatenate(cells)


def compute_losses(model: MatchingModel, batch: Batch, config: RunConfig, epoch: int, need_unsup: bool):
    """Forward passes and loss terms for a batch; returns the graph roots and diagnostics."""
    dtype = model.dtype
    lc = config.loss_config()
    trip = batch.triplets
    nl, b = batch.n_labeled, batch.size
    image_hw = trip[0].source.shape[-2:]
    grid_hw = model.grid_hw(image_hw)
    n_t = grid_hw[0] * grid_hw[1]
    src = _stack([t.source for t in trip], dtype)
    weak = _stack([t.weak for t in trip], dtype)

    out = {"masks": [], "l_unsup": None, "unsup_flag": True}
    if not need_unsup:
        feats = model.extract_features(np.concatenate([src[:nl], weak[:nl]]))
        f_s, f_w = split(feats, 2, axis=0)
        res = model.match(f_s, f_w)
        b_idx, rows, cells = supervision(batch, image_hw, grid_hw)
        out["l_sup"], out["sup_flag"] = losses.supervised_loss(res["prob"], b_idx, rows, cells, grid_hw, lc.sup_readout)
        return out

    strong = _stack([t.strong for t in trip], dtype)
    feats = model.extract_features(np.concatenate([src, weak[:nl], strong]))
    f_s, f_wl, f_st = feats[:b], feats[b : b + nl], feats[b + nl :]
    with no_grad():
        f_wu = model.extract_features(weak[nl:]) if b > nl else None
    if nl:
        res_l = model.match(f_s[:nl], f_wl)
        b_idx, rows, cells = supervision(batch, image_hw, grid_hw)
        out["l_sup"], out["sup_flag"] = losses.supervised_loss(res_l["prob"], b_idx, rows, cells, grid_hw, lc.sup_readout)
        p_weak_l = res_l["prob"].data
    else:
        out["l_sup"], out["sup_flag"] = losses.supervised_loss(f_s, [], [], [], grid_hw)
        p_weak_l = np.zeros((0, n_t, n_t), dtype)
    # everything feeding the pseudo-labels is computed without a graph
    with no_grad():
        fs_d = f_s.detach()
        f_w_all = concat([f_wl.detach()] + ([f_wu] if f_wu is not None else []), axis=0)
        p_weak_u = model.match(Tensor(fs_d.data[nl:]), f_wu)["prob"].data if f_wu is not None else None
        p_weak = p_weak_l if p_weak_u is None else np.concatenate([p_weak_l, p_weak_u])
        p_back = model.match(f_w_all, fs_d)["prob"].data
    targets = np.zeros((b, n_t), dtype=np.int64)
    m = np.zeros((b, n_t))
    for k, t in enumerate(trip):
        wg = geometry.warp_to_grid(t.warp, *grid_hw)
        pl = make_pseudo_label(p_weak[k], wg, grid_hw)
        kp_cells = keypoints_to_cells(t.target_keypoints, image_hw, grid_hw) if t.labeled else None
        cm = confidence(
            p_weak[k],
            p_back[k],
            wg,
            grid_hw,
            grid_hw,
            kp_cells,
            tau=lc.tau,
            eps_fb=config.eps_fb,
            margin=config.margin,
            use=(config.use_mask, config.use_fb, config.use_thres),
        )
        targets[k] = pl.targets
        m[k] = cm.m.reshape(-1) * pl.valid
        out["masks"].append(cm)
    res_s = model.match(f_s, f_st)
    if lc.unsup == "contrastive":
        # gamma is meant for similarity-scale logits, so the learned gain is divided out
        scores = model.unit_scores(res_s)
        l_un, flag = losses.contrastive_unsup_loss(scores, targets, m, lc.gamma, lc.normalize_unsup, lc.min_mean_m)
    else:
        l_un, flag = losses.aepe_unsup_loss(res_s["prob"], targets, m, grid_hw, lc.normalize_unsup, lc.min_mean_m)
    out.update(l_unsup=l_un, unsup_flag=flag, m=m, targets=targets, p_weak=p_weak, p_back=p_back)
    return out


def _finite(*values) -> bool:
    return all(v is None or np.isfinite(v) for v in values)


def train_step(model: MatchingModel, optimizer, batch: Batch, config: RunConfig, epoch: int) -> StepResult:
    """One optimizer update (skipped when the batch supervises nothing)."""
    lc = config.loss_config()
    in_warmup = epoch < lc.warmup_epochs
    need_unsup = not (config.supervised_only or in_warmup)
    nl = batch.n_labeled
    if batch.size == 0 or (nl == 0 and not need_unsup):
        return StepResult(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, nl, batch.size - nl, False)
    out = compute_losses(model, batch, config, epoch, need_unsup)
    l_sup = out["l_sup"]
    l_unsup = out["l_unsup"]
    if l_unsup is None:
        total, lam = l_sup, 0.0
    else:
        total, lam = losses.total_loss(l_sup, l_unsup, out["unsup_flag"], epoch, lc)
    m = out.get("m")
    res = StepResult(
        loss=float(total.data),
        l_sup=float(l_sup.data),
        l_unsup=0.0 if l_unsup is None else float(l_unsup.data),
        lam=lam,
        mean_m=0.0 if m is None else float(m.mean()),
        sum_m=0.0 if m is None else float(m.sum()),
        n_labeled=nl,
        n_unlabeled=batch.size - nl,
        applied=False,
        masks=out["masks"],
    )
    if not _finite(res.loss, res.l_sup, res.l_unsup):
        raise FloatingPointError(f"non-finite loss (L_sup={res.l_sup}, L_unsup={res.l_unsup})")
    if out["sup_flag"] and lam == 0.0:
        return res  # nothing supervises this batch
    total.backward()
    grads = {}
    for name, p in model.params.items():
        grads[name] = p.grad if p.grad is not None else np.zeros_like(p.data)
        p.zero_grad()
    if not all(np.all(np.isfinite(g)) for g in grads.values()):
        raise FloatingPointError("non-finite gradient")
    new = optimizer.step(model.state_dict(), grads)
    model.load_state_dict(new)
    res.grads = grads
    res.applied = True
    return res


# -- checkpoints ---------------------------------------------------------------------------------
@dataclass
class TrainState:
    step: int = 0
    epoch: int = 0
    batch_in_epoch: int = 0
    best_pck: float = -1.0
    best_epoch: int = -1
    rejections: int = 0
    loss_sum: float = 0.0
    loss_count: int = 0


def save_checkpoint(directory, model: MatchingModel, optimizer, state: TrainState, config: RunConfig) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_archive(directory / "params.smt", model.state_dict())
    save_archive(directory / "optimizer.smt", optimizer.state())
    lines = [
        f"format = {CHECKPOINT_FORMAT}",
        f"config_hash = {config.config_hash()}",
        f"optimizer = {config.optimizer}",
    ]
    lines += [f"state.{k} = {v!r}" for k, v in dataclasses.asdict(state).items()]
    lines += [f"param.{k} = {'x'.join(map(str, v.shape)) or 'scalar'}" for k, v in model.params.items()]
    (directory / "meta.txt").write_text("\n".join(lines) + "\n")
    write_config_file(directory / "config.txt", config)
    return directory


def read_meta(directory) -> dict[str, str]:
    meta = {}
    for line in (Path(directory) / "meta.txt").read_text().splitlines():
        if "=" in line:
            k, v = (s.strip() for s in line.split("=", 1))
            meta[k] = v
    return meta


def load_checkpoint(directory, config: RunConfig | None = None):
    """Returns ``(model, optimizer, state, config)``."""
    directory = Path(directory)
    meta = read_meta(directory)
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{directory} is not a checkpoint")
    if config is None:
        config = RunConfig(**read_config_file(directory / "config.txt"))
    params = load_archive(directory / "params.smt")
    model = MatchingModel(config.model_config(), params=params)
    optimizer = make_optimizer(config)
    optimizer.load(load_archive(directory / "optimizer.smt"))
    fields = {f.name: f.type for f in dataclasses.fields(TrainState)}
    kwargs = {}
    for name in fields:
        raw = meta.get(f"state.{name}")
        if raw is not None:
            kwargs[name] = float(raw) if name in ("best_pck", "loss_sum") else int(raw)
    return model, optimizer, TrainState(**kwargs), config


# -- datasets -------------------------------------------------------------------------------------
@lru_cache(maxsize=4)
def _synthetic(n_train: int, n_val: int, n_test: int, n_categories: int, seed: int):
    return data.generate_benchmark(data.SynthConfig(n_train, n_val, n_test, n_categories, seed))


def load_dataset(config: RunConfig) -> dict[str, list[data.PairSample]]:
    if config.manifest:
        samples = data.load_samples(config.manifest)
        out = {s: [p for p in samples if p.record.split == s] for s in data.SPLITS}
    else:
        out = _synthetic(config.n_train, config.n_val, config.n_test, config.n_categories, config.data_seed)
    return out


def split_train(samples, config: RunConfig):
    """Labeled and unlabeled sample lists; unlabeled records carry no keypoints."""
    records = [s.record for s in samples]
    labeled, unlabeled, _ = data.split_label_fraction(records, config.label_fraction, config.seed)
    by_id = {s.record.pair_id: s for s in samples}
    lab = [data.PairSample(r, by_id[r.pair_id].source, by_id[r.pair_id].target) for r in labeled]
    unl = [data.PairSample(r, by_id[r.pair_id].source, by_id[r.pair_id].target) for r in unlabeled]
    return lab, unl


# -- the loop -------------------------------------------------------------------------------------
LOG_FIELDS = ("step", "epoch", "loss", "l_sup", "l_unsup", "lambda", "mean_m", "n_labeled", "n_unlabeled", "applied", "val_pck")


@dataclass
class RunResult:
    config: RunConfig
    state: TrainState
    val_history: list[float]
    test_report: EvalReport | None
    output_dir: Path | None
    model: MatchingModel
    best_model: MatchingModel
    log_rows: list[dict]


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else str(v)


def _dump_rejected(directory, batch: Batch, step: int) -> None:
    if directory is None:
        return
    payload = {}
    for k, t in enumerate(batch.triplets):
        payload[f"{k}.source"] = t.source
        payload[f"{k}.weak"] = t.weak
        payload[f"{k}.strong"] = t.strong
        payload[f"{k}.warp"] = t.warp.planes()
    save_archive(Path(directory) / f"rejected_step{step}.smt", payload)


def run_training(config: RunConfig, dataset=None, resume: str | None = None) -> RunResult:
    """Train, validate every ``val_every`` epochs, keep the best checkpoint, then test it."""
    dataset = dataset if dataset is not None else load_dataset(config)
    train = dataset.get("train", [])
    if not train:
        raise ValueError("training set is empty")
    out_dir = Path(config.output_dir) if config.output_dir else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        write_config_file(out_dir / "config.txt", config)
    labeled, unlabeled = split_train(train, config)
    val = dataset.get("val", [])
    test = dataset.get("test", [])
    if resume:
        model, optimizer, state, _ = load_checkpoint(resume, config)
    else:
        model = MatchingModel(config.model_config(), seed=config.seed)
        optimizer = make_optimizer(config)
        state = TrainState()
    best_params = model.state_dict()
    pck_cfg = config.pck_config()
    meta = {
        "seed": config.seed,
        "label_fraction": config.label_fraction,
        "config_hash": config.config_hash(),
        "tag": config.tag,
    }
    rows: list[dict] = []
    val_history: list[float] = []
    log_fh = None
    if out_dir is not None:
        log_fh = open(out_dir / "train_log.csv", "a" if resume else "w", newline="")
        writer = csv.writer(log_fh)
        if not resume:
            writer.writerow(LOG_FIELDS)
    try:
        while state.epoch < config.epochs:
            epoch = state.epoch
            batches = make_batches(len(labeled), len(unlabeled), config.batch_size, config.seed, epoch)
            need_unl = not config.supervised_only and epoch >= config.warmup_epochs
            for k in range(state.batch_in_epoch, len(batches)):
                lab_idx, unl_idx = batches[k]
                batch = build_batch(labeled, unlabeled, lab_idx, unl_idx, config, epoch, with_unlabeled=need_unl)
                try:
                    res = train_step(model, optimizer, batch, config, epoch)
                except FloatingPointError as exc:
                    state.rejections += 1
                    log.warning("step %d rejected: %s", state.step, exc)
                    _dump_rejected(out_dir, batch, state.step)
                    if state.rejections >= config.max_rejections:
                        raise TrainingHalted(f"{state.rejections} consecutive rejected steps") from exc
                    res = None
                else:
                    state.rejections = 0
                state.step += 1
                state.batch_in_epoch = k + 1
                row = {
                    "step": state.step,
                    "epoch": epoch,
                    "loss": None if res is None else res.loss,
                    "l_sup": None if res is None else res.l_sup,
                    "l_unsup": None if res is None else res.l_unsup,
                    "lambda": None if res is None else res.lam,
                    "mean_m": None if res is None else res.mean_m,
                    "n_labeled": len(lab_idx),
                    "n_unlabeled": len(unl_idx) if need_unl else 0,
                    "applied": 0 if res is None else int(res.applied),
                    "val_pck": None,
                }
                if res is not None and res.applied:
                    state.loss_sum += res.loss
                    state.loss_count += 1
                if k == len(batches) - 1 and val and (epoch + 1) % config.val_every == 0:
                    report = evaluate(model, val, pck_cfg, meta)
                    score = report.pck[0.1] if 0.1 in report.pck else next(iter(report.pck.values()))
                    val_history.append(score)
                    row["val_pck"] = score
                    if score > state.best_pck:
                        state.best_pck, state.best_epoch = score, epoch
                        best_params = model.state_dict()
                        if out_dir is not None:
                            save_checkpoint(out_dir / "best", model, optimizer, state, config)
                rows.append(row)
                if log_fh is not None:
                    writer.writerow([_fmt(row[f]) for f in LOG_FIELDS])
            state.epoch += 1
            state.batch_in_epoch = 0
            if out_dir is not None:
                save_checkpoint(out_dir / "last", model, optimizer, state, config)
    finally:
        if log_fh is not None:
            log_fh.close()
    if not val:
        best_params = model.state_dict()
    if out_dir is not None:
        save_checkpoint(out_dir / "final", model, optimizer, state, config)
        if not (out_dir / "best").exists():
            save_checkpoint(out_dir / "best", model, optimizer, state, config)
    best_model = MatchingModel(config.model_config(), params=best_params)
    test_report = None
    if test:
        test_report = evaluate(best_model, test, pck_cfg, dict(meta, best_epoch=state.best_epoch))
        if out_dir is not None:
            from .eval import write_csv

            write_csv(out_dir / "test_report.csv", [test_report.row()])
    return RunResult(config, state, val_history, test_report, out_dir, model, best_model, rows)


def set_threads(n: int | None = None):
    """Cap BLAS/OpenMP threads (``SEMIMATCH_THREADS`` when ``n`` is None)."""
    n = n if n is not None else os.environ.get("SEMIMATCH_THREADS")
    if not n:
        return None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(int(n))
