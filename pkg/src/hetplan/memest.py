"""Per-GPU peak memory estimation.

``heuristic_estimate`` is the classic weights-plus-activations rule and is known
to under-estimate. The learned estimator is a 5-weight-layer ReLU MLP
(10 -> 200 -> 200 -> 200 -> 200 -> 1) over the configuration features below,
fitted with Adam on standardized features and a standardized log target.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence, Union

import numpy as np

from hetplan.core.enumeration import divisors, factorizations
from hetplan.core.types import ModelSpec, ParallelConfig
from hetplan.errors import InputError, ModelError, ParseError

MIB = 1024 * 1024
FEATURES = ("n_gpus", "n_layers", "n_hiddens", "n_heads", "tp", "pp", "dp", "bs_micro", "bs_mini", "bs_global")
CSV_HEADER = FEATURES + ("measured_max",)

HIDDEN_WIDTH = 200
N_WEIGHT_LAYERS = 5
DEFAULT_MARGIN = 0.10
DEFAULT_LR = 1e-3
DEFAULT_BATCH = 32
LOG_EVERY = 1000
PREDICTION_FLOOR = 1e-3  # MiB


@dataclass(frozen=True)
class MemorySample:
    n_gpus: int
    n_layers: int
    n_hiddens: int
    n_heads: int
    tp: int
    pp: int
    dp: int
    bs_micro: int
    bs_mini: int
    bs_global: int
    measured_max: float  # MiB

    def __post_init__(self) -> None:
        for name in FEATURES:
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, int) or v < 1:
                raise InputError(f"{name} must be a positive integer, got {v!r}")
        if not (math.isfinite(self.measured_max) and self.measured_max > 0):
            raise InputError(f"measured_max must be positive, got {self.measured_max!r}")
        if self.pp * self.tp * self.dp != self.n_gpus:
            raise InputError(f"pp*tp*dp != n_gpus in sample {self}")
        if self.bs_mini * self.dp != self.bs_global or self.bs_mini % self.bs_micro:
            raise InputError(f"inconsistent batch sizes in sample {self}")

    def features(self) -> tuple[int, ...]:
        return tuple(getattr(self, f) for f in FEATURES)


def config_features(model: ModelSpec, conf: ParallelConfig) -> tuple[int, ...]:
    return (conf.n_gpus, model.n_layers, model.n_hidden, model.n_heads, conf.tp, conf.pp, conf.dp,
            conf.bs_micro, conf.bs_mini, conf.bs_global)


def read_samples(text: str) -> list[MemorySample]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(h.strip() for h in rows[0]) != CSV_HEADER:
        raise ParseError(f"memory sample CSV must start with header {','.join(CSV_HEADER)}")
    out = []
    for r, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(CSV_HEADER):
            raise ParseError(f"row {r}: expected {len(CSV_HEADER)} columns, got {len(row)}")
        try:
            ints = [int(v) for v in row[:-1]]
            target = float(row[-1])
        except ValueError as exc:
            raise ParseError(f"row {r}: {exc}") from None
        try:
            out.append(MemorySample(*ints, target))
        except InputError as exc:
            raise ParseError(f"row {r}: {exc}") from None
    return out


def write_samples(samples: Iterable[MemorySample]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for s in samples:
        w.writerow([*s.features(), repr(float(s.measured_max))])
    return buf.getvalue()


def heuristic_estimate(model: ModelSpec, conf: ParallelConfig, bytes_per_param_state: float = 16) -> float:
    """Weight/optimizer state split over pp*tp plus stage activations, in MiB."""
    state = model.n_params / (conf.pp * conf.tp) * bytes_per_param_state
    act = (conf.bs_micro * model.seq_len * model.n_hidden * (model.n_layers / conf.pp)
           * model.bytes_per_element * min(conf.pp, conf.n_mb))
    return (state + act) / MIB


def synthetic_peak_memory(model: ModelSpec, conf: ParallelConfig) -> float:
    """Ground-truth stand-in for profiled peak memory (MiB) used to build fixtures.

    Adds what the heuristic leaves out: full per-layer activation footprint
    including attention scores, fp32 logits on the last stage, allocator
    fragmentation and a fixed framework/communicator reserve.
    """
    s, b, h, a = model.seq_len, conf.bs_micro, model.n_hidden, model.n_heads
    tp, pp = conf.tp, conf.pp
    layers = -(-model.n_layers // pp)
    state = model.n_params / (pp * tp) * 16
    act_layer = s * b * h * (10 + 24 / tp + 5 * a * s / (h * tp))
    first = state + act_layer * layers * min(pp, conf.n_mb)
    last = state + act_layer * layers + b * s * model.vocab_size * 4 / tp
    return (max(first, last) + 0.05 * state) / MIB + 1024.0


def is_runnable(predicted: float, limit: float, margin: float = DEFAULT_MARGIN) -> bool:
    if not limit > 0:
        raise InputError(f"memory limit must be > 0, got {limit}")
    if not 0.0 <= margin <= 0.5:
        raise InputError(f"margin must lie in [0, 0.5], got {margin}")
    return predicted <= (1.0 - margin) * limit


def synthetic_samples(
    models: Sequence[ModelSpec],
    gpu_counts: Sequence[int],
    gpus_per_node: int,
    bs_globals: Sequence[int],
    noise: float = 0.0,
    seed: int = 0,
) -> list[MemorySample]:
    """Every (model, G, pp, tp, dp, bs_global, bs_micro) labeled by :func:`synthetic_peak_memory`."""
    rng = np.random.default_rng(seed)
    out = []
    for model in models:
        for g in gpu_counts:
            for pp, tp, dp in factorizations(g, min(g, gpus_per_node)):
                if pp > model.n_layers:
                    continue
                for bs_global in bs_globals:
                    if bs_global % dp:
                        continue
                    for bs_micro in divisors(bs_global // dp):
                        conf = ParallelConfig.make(pp, tp, dp, bs_global, bs_micro)
                        target = synthetic_peak_memory(model, conf)
                        if noise:
                            target *= 1.0 + noise * rng.standard_normal()
                        out.append(MemorySample(*config_features(model, conf), float(target)))
    return out


@dataclass
class MemoryModel:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    feat_mean: np.ndarray
    feat_std: np.ndarray
    target_mean: float
    target_std: float
    target_transform: str = "log"
    feature_transform: str = "log"
    metadata: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if len(self.weights) != N_WEIGHT_LAYERS or len(self.biases) != N_WEIGHT_LAYERS:
            raise ModelError(f"memory model must have {N_WEIGHT_LAYERS} weight layers")
        if self.target_transform not in ("log", "identity"):
            raise ModelError(f"unknown target transform {self.target_transform!r}")
        if self.feature_transform not in ("log", "identity"):
            raise ModelError(f"unknown feature transform {self.feature_transform!r}")
        if not (np.all(np.isfinite(self.feat_mean)) and np.all(np.isfinite(self.feat_std))
                and np.all(self.feat_std > 0)):
            raise ModelError("normalization statistics must be finite with std > 0")

    def to_dict(self) -> dict:
        return {
            "architecture": {"weight_layers": N_WEIGHT_LAYERS, "hidden": HIDDEN_WIDTH,
                             "activation": "relu", "inputs": list(FEATURES)},
            "weights": [{"shape": list(w.shape), "data": w.ravel().tolist()} for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
            "feat_mean": self.feat_mean.tolist(),
            "feat_std": self.feat_std.tolist(),
            "target_mean": self.target_mean,
            "target_std": self.target_std,
            "target_transform": self.target_transform,
            "feature_transform": self.feature_transform,
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MemoryModel":
        try:
            weights = [np.asarray(w["data"], dtype=np.float64).reshape(w["shape"]) for w in d["weights"]]
            return cls(
                weights=weights,
                biases=[np.asarray(b, dtype=np.float64) for b in d["biases"]],
                feat_mean=np.asarray(d["feat_mean"], dtype=np.float64),
                feat_std=np.asarray(d["feat_std"], dtype=np.float64),
                target_mean=float(d["target_mean"]),
                target_std=float(d["target_std"]),
                target_transform=d.get("target_transform", "log"),
                feature_transform=d.get("feature_transform", "log"),
                metadata=d.get("metadata", {}),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise InputError(f"malformed memory model: {exc}") from None


def _transform_features(x: np.ndarray, kind: str) -> np.ndarray:
    return np.log(x) if kind == "log" else x


def _forward(weights, biases, x: np.ndarray, keep: bool = False):
    acts = [x]
    h = x
    last = len(weights) - 1
    for i, (w, b) in enumerate(zip(weights, biases)):
        h = h @ w + b
        if i < last:
            h = np.maximum(h, 0.0)
        if keep:
            acts.append(h)
    return (h, acts) if keep else h


def _init_params(rng: np.random.Generator, n_in: int):
    sizes = [n_in] + [HIDDEN_WIDTH] * (N_WEIGHT_LAYERS - 1) + [1]
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes, sizes[1:]):
        limit = math.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return weights, biases


def train(
    samples: Sequence[MemorySample],
    iterations: int = 50_000,
    seed: int = 0,
    lr: float = DEFAULT_LR,
    batch_size: int = DEFAULT_BATCH,
    target_transform: str = "log",
    feature_transform: str = "log",
) -> MemoryModel:
    """Fit the MLP with Adam; the full-dataset loss is logged every 1000 iterations."""
    if iterations < 1:
        raise InputError(f"iterations must be >= 1, got {iterations}")
    distinct = {s.features() + (s.measured_max,) for s in samples}
    if len(distinct) < 2:
        raise InputError(f"need at least 2 distinct samples, got {len(distinct)}")
    if target_transform not in ("log", "identity") or feature_transform not in ("log", "identity"):
        raise InputError(f"unknown transform {target_transform!r}/{feature_transform!r}")

    x = _transform_features(np.array([s.features() for s in samples], dtype=np.float64), feature_transform)
    y = np.array([s.measured_max for s in samples], dtype=np.float64)
    if target_transform == "log":
        y = np.log(y)
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    # rounding leaves a tiny non-zero std on constant columns
    constant = std <= 1e-12 * np.maximum(1.0, np.abs(mean))
    flagged = [FEATURES[i] for i in range(len(FEATURES)) if constant[i]]
    std[constant] = 1.0
    t_mean = float(y.mean())
    t_std = float(y.std())
    if t_std <= 1e-12 * max(1.0, abs(t_mean)):
        t_std = 1.0
    xn = (x - mean) / std
    yn = ((y - t_mean) / t_std)[:, None]

    rng = np.random.default_rng(seed)
    weights, biases = _init_params(rng, x.shape[1])
    params = weights + biases
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    n = len(xn)
    bs = min(batch_size, n)
    order = rng.permutation(n)
    cursor = 0
    loss_log = []
    n_layers = len(weights)

    def full_loss() -> float:
        return float(np.mean((_forward(weights, biases, xn) - yn) ** 2))

    for it in range(1, iterations + 1):
        if cursor + bs > n:
            order = rng.permutation(n)
            cursor = 0
        idx = order[cursor:cursor + bs]
        cursor += bs
        out, acts = _forward(weights, biases, xn[idx], keep=True)
        grad = 2.0 * (out - yn[idx]) / bs
        gw = [None] * n_layers
        gb = [None] * n_layers
        for i in range(n_layers - 1, -1, -1):
            gw[i] = acts[i].T @ grad
            gb[i] = grad.sum(axis=0)
            if i:
                grad = (grad @ weights[i].T) * (acts[i] > 0)
        grads = gw + gb
        c1 = 1.0 - beta1 ** it
        c2 = 1.0 - beta2 ** it
        for p, g, mi, vi in zip(params, grads, m, v):
            mi *= beta1
            mi += (1.0 - beta1) * g
            vi *= beta2
            vi += (1.0 - beta2) * g * g
            p -= lr * (mi / c1) / (np.sqrt(vi / c2) + eps)
        if it % LOG_EVERY == 0:
            loss_log.append(full_loss())

    final = full_loss()
    return MemoryModel(
        weights=weights,
        biases=biases,
        feat_mean=mean,
        feat_std=std,
        target_mean=t_mean,
        target_std=t_std,
        target_transform=target_transform,
        feature_transform=feature_transform,
        metadata={
            "optimizer": "adam",
            "lr": lr,
            "batch_size": bs,
            "betas": [beta1, beta2],
            "iterations": iterations,
            "seed": seed,
            "init": "he-uniform",
            "weight_layers": N_WEIGHT_LAYERS,
            "hidden": HIDDEN_WIDTH,
            "n_samples": n,
            "final_loss": final,
            "loss_log": loss_log,
            "flagged_constant_features": flagged,
        },
    )


FeatureInput = Union[MemorySample, Sequence[float], np.ndarray]


def predict_raw(model: MemoryModel, x: np.ndarray) -> np.ndarray:
    """Un-clamped predictions (MiB) for a (n, 10) feature array."""
    x = _transform_features(np.asarray(x, dtype=np.float64), model.feature_transform)
    xn = (x - model.feat_mean) / model.feat_std
    out = _forward(model.weights, model.biases, xn)[:, 0] * model.target_std + model.target_mean
    if model.target_transform == "log":
        out = np.exp(out)
    return out


def predict(model: MemoryModel, features: FeatureInput) -> float:
    """Predicted peak memory in MiB for one sample, floored at a small positive value."""
    if isinstance(features, MemorySample):
        features = features.features()
    x = np.asarray(features, dtype=np.float64).reshape(1, -1)
    if x.shape[1] != len(FEATURES):
        raise InputError(f"expected {len(FEATURES)} features, got {x.shape[1]}")
    val = float(predict_raw(model, x)[0])
    if not math.isfinite(val):
        raise ModelError(f"memory model produced a non-finite prediction for {features!r}")
    return max(val, PREDICTION_FLOOR)


def predict_config(model: MemoryModel, spec: ModelSpec, conf: ParallelConfig) -> float:
    return predict(model, config_features(spec, conf))


def mape(predicted: Sequence[float], actual: Sequence[float]) -> float:
    p = np.asarray(predicted, dtype=np.float64)
    a = np.asarray(actual, dtype=np.float64)
    return float(np.mean(np.abs(p - a) / np.abs(a)) * 100.0)


def evaluate(model: MemoryModel, samples: Sequence[MemorySample]) -> float:
    """MAPE (%) of the model over ``samples``."""
    return mape([predict(model, s) for s in samples], [s.measured_max for s in samples])
