"""Stand-in matching network: conv features, correlation, residual aggregation, softmax."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels
from .geometry import grid_coordinates
from .numerics import (
    Tensor,
    add,
    concat,
    conv2d,
    l2_normalize,
    matmul,
    no_grad,
    relu,
    reshape,
    scale_exp,
    softmax,
    split,
    transpose,
)


@dataclass
class ModelConfig:
    channels: tuple[int, ...] = (16, 32, 32)
    strides: tuple[int, ...] = (2, 2, 1)
    aggregator: str = "conv"  # "conv" | "attention"
    agg_hidden: int = 4
    attn_dim: int = 16
    image_size: int = 64
    temperature: float = 1.0
    gain_rate: float = 100.0  # the cost gain is exp(gain_rate * log_gain)
    dtype: str = "float64"

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.strides = tuple(int(s) for s in self.strides)
        if len(self.channels) != len(self.strides):
            raise ValueError("channels and strides must have the same length")
        if self.aggregator not in ("conv", "attention"):
            raise ValueError(f"unknown aggregator {self.aggregator!r}")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")

    @property
    def grid_size(self) -> int:
        return self.image_size // int(np.prod(self.strides))

    @property
    def feature_dim(self) -> int:
        return self.channels[-1]

    def to_dict(self) -> dict:
        return asdict(self)


def _he(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)


def init_params(config: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    dtype = np.dtype(config.dtype)
    params: dict[str, np.ndarray] = {}
    c_in = 3
    for k, c_out in enumerate(config.channels):
        params[f"feat{k}.weight"] = _he(rng, (c_out, c_in, 3, 3), c_in * 9)
        params[f"feat{k}.bias"] = np.zeros(c_out)
        c_in = c_out
    params["agg.log_gain"] = np.zeros(())
    if config.aggregator == "conv":
        hid = config.agg_hidden
        params["agg.conv1.weight"] = _he(rng, (hid, 1, 3, 3), 9)
        params["agg.conv1.bias"] = np.zeros(hid)
        # zero-initialised output layer: the aggregator starts as the identity
        params["agg.conv2.weight"] = np.zeros((1, hid, 1, 1))
        params["agg.conv2.bias"] = np.zeros(1)
    else:
        n_s = config.grid_size**2
        a = config.attn_dim
        params["agg.wq"] = rng.normal(0.0, 1.0 / math.sqrt(n_s), size=(n_s, a))
        params["agg.wk"] = rng.normal(0.0, 1.0 / math.sqrt(n_s), size=(n_s, a))
        params["agg.wv"] = rng.normal(0.0, 1.0 / math.sqrt(n_s), size=(n_s, a))
        params["agg.wo"] = np.zeros((a, n_s))
    return {k: v.astype(dtype) for k, v in params.items()}


class MatchingModel:
    """``p(I_s, I_t; theta)`` with parameters held as named leaf tensors."""

    def __init__(self, config: ModelConfig | None = None, seed: int = 0, params: dict[str, np.ndarray] | None = None):
        self.config = config or ModelConfig()
        raw = params if params is not None else init_params(self.config, seed)
        dtype = np.dtype(self.config.dtype)
        self.params: dict[str, Tensor] = {
            name: Tensor(np.asarray(v, dtype=dtype), requires_grad=True, name=name) for name, v in raw.items()
        }

    @property
    def dtype(self):
        return np.dtype(self.config.dtype)

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: np.array(v.data) for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) ^ set(state)
        if missing:
            raise KeyError(f"state dict mismatch: {sorted(missing)}")
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise ValueError(f"{k}: expected shape {self.params[k].shape}, got {v.shape}")
            self.params[k] = Tensor(np.asarray(v, dtype=self.dtype), requires_grad=True, name=k)

    def grid_hw(self, image_hw: tuple[int, int]) -> tuple[int, int]:
        s = int(np.prod(self.config.strides))
        return image_hw[0] // s, image_hw[1] // s

    # -- stages ------------------------------------------------------------------------
    def extract_features(self, images) -> Tensor:
        """``[N, 3, H, W]`` images in [0, 1] -> position-wise unit-norm ``[N, d, h, w]`` features."""
        x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=self.dtype))
        if x.ndim == 3:
            x = reshape(x, (1,) + x.shape)
        n_layers = len(self.config.channels)
        for k, stride in enumerate(self.config.strides):
            x = conv2d(x, self.params[f"feat{k}.weight"], self.params[f"feat{k}.bias"], stride=stride, padding=1)
            if k < n_layers - 1:
                x = relu(x)
        return l2_normalize(x, axis=1)

    def gain(self) -> float:
        """Current cost gain as a plain number (no graph)."""
        return float(np.exp(self.config.gain_rate * self.params["agg.log_gain"].data))

    def aggregate(self, cost: Tensor, source_hw: tuple[int, int]) -> Tensor:
        """Residual refinement ``C' = gain * C + g(C)`` of a ``[B, N_t, N_s]`` cost volume."""
        return add(self._scaled(cost), self.refine(cost, source_hw))

    def _scaled(self, cost: Tensor) -> Tensor:
        p = self.params
        log_gain = p["agg.log_gain"] if self.config.gain_rate == 1.0 else p["agg.log_gain"] * self.config.gain_rate
        return scale_exp(cost, log_gain)

    def refine(self, cost: Tensor, source_hw: tuple[int, int]) -> Tensor:
        """The learned residual ``g(C)``."""
        p = self.params
        b, n_t, n_s = cost.shape
        if self.config.aggregator == "conv":
            planes = reshape(cost, (b * n_t, 1) + tuple(source_hw))
            hid = relu(conv2d(planes, p["agg.conv1.weight"], p["agg.conv1.bias"], padding=1))
            out = conv2d(hid, p["agg.conv2.weight"], p["agg.conv2.bias"])
            return reshape(out, (b, n_t, n_s))
        q = matmul(cost, p["agg.wq"])
        k = matmul(cost, p["agg.wk"])
        v = matmul(cost, p["agg.wv"])
        attn = softmax(matmul(q, transpose(k, (0, 2, 1))) * (1.0 / math.sqrt(self.config.attn_dim)), axis=-1)
        return matmul(matmul(attn, v), p["agg.wo"])

    def forward(self, source, target) -> dict[str, Tensor]:
        """Full pass for a batch of pairs; returns raw cost, aggregated cost and probability."""
        src = source if isinstance(source, Tensor) else Tensor(np.asarray(source, dtype=self.dtype))
        tgt = target if isinstance(target, Tensor) else Tensor(np.asarray(target, dtype=self.dtype))
        feats = self.extract_features(concat([src, tgt], axis=0))
        f_s, f_t = split(feats, 2, axis=0)
        return self.match(f_s, f_t)

    def match(self, f_s: Tensor, f_t: Tensor) -> dict[str, Tensor]:
        source_hw = f_s.shape[2:]
        cost = correlate(f_s, f_t)
        refine = self.refine(cost, source_hw)
        agg = add(self._scaled(cost), refine)
        prob = to_probability(agg, self.config.temperature)
        return {
            "cost": cost,
            "refine": refine,
            "aggregated": agg,
            "prob": prob,
            "source_hw": source_hw,
            "target_hw": f_t.shape[2:],
        }

    def unit_scores(self, result: dict[str, Tensor]) -> Tensor:
        """``C'`` divided by the current gain, with the gain held constant: ``C + g(C) / gain``."""
        return add(result["cost"], result["refine"] * (1.0 / self.gain()))

    def predict(self, source, target) -> np.ndarray:
        with no_grad():
            return self.forward(source, target)["prob"].data


def correlate(f_s: Tensor, f_t: Tensor) -> Tensor:
    """``C[b, i, j] = <F_t(i), F_s(j)>`` for feature maps ``[B, d, h, w]``."""
    if f_s.ndim != 4 or f_t.ndim != 4:
        raise ValueError(f"expected [B, d, h, w] features, got {f_s.shape} and {f_t.shape}")
    if f_s.shape[1] != f_t.shape[1]:
        raise ValueError(f"channel mismatch: source has {f_s.shape[1]}, target has {f_t.shape[1]}")
    if f_s.shape[0] != f_t.shape[0]:
        raise ValueError(f"batch mismatch: {f_s.shape[0]} vs {f_t.shape[0]}")
    b, d = f_s.shape[:2]
    fs = reshape(f_s, (b, d, -1))
    ft = transpose(reshape(f_t, (b, d, -1)), (0, 2, 1))
    return matmul(ft, fs)


def to_probability(cost: Tensor, temperature: float = 1.0) -> Tensor:
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    scaled = cost if temperature == 1.0 else cost * (1.0 / temperature)
    return softmax(scaled, axis=-1)


def readout(prob, source_hw: tuple[int, int], mode: str = "soft"):
    """Source coordinate ``(x, y)`` in cell units for each row of ``prob[..., N_s]``.

    ``soft`` is the probability-weighted mean (differentiable for tensors);
    ``hard`` is the arg-max cell with ties going to the lowest flat index.
    """
    coords = grid_coordinates(*source_hw)
    if mode == "soft":
        if isinstance(prob, Tensor):
            return matmul(prob, Tensor(coords.astype(prob.dtype)))
        return np.asarray(prob) @ coords
    if mode == "hard":
        data = prob.data if isinstance(prob, Tensor) else np.asarray(prob)
        return coords[kernels.hard_argmax(np.ascontiguousarray(data))]
    raise ValueError(f"unknown readout mode {mode!r}")
