"""Multitask sequence model: conv downsampling encoder, task-specific
self-attentive pooling, per-task heads, the weighted multitask loss, and a
deterministic Adam trainer.

All parameters live in one flat float64 vector with a named-slice registry
so the whole graph — including STRF rate/scale values when the modulation
frontend is trained end-to-end — can be checked against central finite
differences. Reductions that must be exactly permutation-invariant
(softmax normalizer, attention-weighted sum) sort their terms before
summing.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .data_model import LabelSet, PredictionSet
from .features import StrfBank, default_strf_bank, stmf, strf_param_grad
from .metrics import EvalReport, evaluate
from .util import atomic_write_bytes

TASKS = ("age", "emotion", "country")

_STREAMS = {"strf": 11, "encoder": 12, "pool.age": 21, "pool.emotion": 22,
            "pool.country": 23, "head.age": 31, "head.emotion": 32, "head.country": 33}


class TrainingDiverged(RuntimeError):
    """Raised when the loss goes non-finite; names the first bad tensor."""


class ShapeError(ValueError):
    """Input does not match the configured model geometry."""


@dataclass(frozen=True)
class LossWeights:
    """Per-task loss weights (defaults 1, 80, 8 for age, emotion, country)."""

    age: float = 1.0
    emotion: float = 80.0
    country: float = 8.0

    def __post_init__(self):
        for task in TASKS:
            if getattr(self, task) < 0:
                raise ValueError(f"loss weight for {task} must be >= 0")


@dataclass(frozen=True)
class ModelConfig:
    frontend: str = "logmel"          # logmel | strf | embedding
    feat_dim: int = 80
    conv_channels: tuple[int, int] = (8, 16)
    conv_kernel: int = 3
    hidden_dim: int = 64
    att_dim: int = 32
    head_hidden: int = 32
    head_layers: int = 2
    tasks: tuple[str, ...] = TASKS
    n_emotions: int = 10
    n_countries: int = 4
    n_strf: int = 8
    strf_time_taps: int = 32
    strf_freq_taps: int = 16
    strf_hop_seconds: float = 0.010
    age_prior: float = 1.0            # softplus(bias) of a fresh age head
    seed: int = 0

    def __post_init__(self):
        if self.frontend not in ("logmel", "strf", "embedding"):
            raise ValueError(f"unknown frontend {self.frontend!r}")
        tasks = tuple(t for t in TASKS if t in self.tasks)
        if not tasks:
            raise ValueError("at least one task must be enabled")
        object.__setattr__(self, "tasks", tasks)
        object.__setattr__(self, "conv_channels", tuple(self.conv_channels))
        if self.head_layers < 1:
            raise ValueError("head_layers must be >= 1")
        if min(self.feat_dim, self.hidden_dim, self.att_dim, self.head_hidden) < 1:
            raise ValueError("dimensions must be positive")
        if self.age_prior <= 0:
            raise ValueError("age_prior must be positive")

    @property
    def in_channels(self) -> int:
        return 2 * self.n_strf if self.frontend == "strf" else 1

    def head_out_dim(self, task: str) -> int:
        return {"age": 1, "emotion": self.n_emotions, "country": self.n_countries}[task]


class Parameters:
    """Flat float64 parameter vector with a named-slice registry."""

    def __init__(self, vector: np.ndarray, registry: dict[str, tuple[int, tuple[int, ...]]]):
        self.vector = np.asarray(vector, dtype=np.float64)
        self.registry = dict(registry)
        covered = sum(int(np.prod(shape)) for _, shape in registry.values())
        if covered != self.vector.size:
            raise ValueError(f"registry covers {covered} values, vector has {self.vector.size}")

    def view(self, name: str) -> np.ndarray:
        offset, shape = self.registry[name]
        size = int(np.prod(shape))
        return self.vector[offset : offset + size].reshape(shape)

    def names(self) -> list[str]:
        return list(self.registry)

    def copy(self) -> "Parameters":
        return Parameters(self.vector.copy(), self.registry)

    def zeros_like(self) -> np.ndarray:
        return np.zeros_like(self.vector)


def softplus(x):
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def softplus_inverse(y: float) -> float:
    if y <= 0:
        raise ValueError("softplus inverse needs y > 0")
    if y > 30:
        return float(y)
    return float(np.log(np.expm1(y)))


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def _downsampled(size: int) -> int:
    return -(-size // 2)  # ceil(size / 2)


def _head_layer_names(config: ModelConfig, task: str) -> list[str]:
    names = [f"head.{task}.fc{i}" for i in range(config.head_layers - 1)]
    return names + [f"head.{task}.out"]


def build_parameters(config: ModelConfig) -> Parameters:
    """Allocate and initialize the full parameter vector.

    Each component draws from its own seed stream, so the encoder
    initialization is identical across task subsets with the same seed.
    """
    c1, c2 = config.conv_channels
    k = config.conv_kernel
    f2 = _downsampled(_downsampled(config.feat_dim))
    d = config.hidden_dim

    entries: list[tuple[str, np.ndarray]] = []
    if config.frontend == "strf":
        bank = default_strf_bank(config.n_strf, config.strf_time_taps,
                                 config.strf_freq_taps, config.strf_hop_seconds)
        entries.append(("strf.rates", bank.rates))
        entries.append(("strf.scales", bank.scales))

    enc = np.random.default_rng([config.seed, _STREAMS["encoder"]])
    entries += [
        ("encoder.conv1.weight",
         enc.standard_normal((c1, config.in_channels, k, k)) * math.sqrt(2.0 / (config.in_channels * k * k))),
        ("encoder.conv1.bias", np.zeros(c1)),
        ("encoder.conv2.weight", enc.standard_normal((c2, c1, k, k)) * math.sqrt(2.0 / (c1 * k * k))),
        ("encoder.conv2.bias", np.zeros(c2)),
        ("encoder.proj.weight", enc.standard_normal((d, c2 * f2)) * math.sqrt(1.0 / (c2 * f2))),
        ("encoder.proj.bias", np.zeros(d)),
    ]

    for task in config.tasks:
        pool_rng = np.random.default_rng([config.seed, _STREAMS[f"pool.{task}"]])
        entries += [
            (f"pool.{task}.W", pool_rng.standard_normal((config.att_dim, d)) * math.sqrt(1.0 / d)),
            (f"pool.{task}.v", pool_rng.standard_normal(config.att_dim) * math.sqrt(1.0 / config.att_dim)),
        ]
        head_rng = np.random.default_rng([config.seed, _STREAMS[f"head.{task}"]])
        in_dim = d
        for name in _head_layer_names(config, task):
            out_dim = config.head_out_dim(task) if name.endswith(".out") else config.head_hidden
            gain = 1.0 if name.endswith(".out") else 2.0
            weight = head_rng.standard_normal((out_dim, in_dim)) * math.sqrt(gain / in_dim)
            bias = np.zeros(out_dim)
            if task == "age" and name.endswith(".out"):
                bias[0] = softplus_inverse(config.age_prior)
            entries += [(f"{name}.weight", weight), (f"{name}.bias", bias)]
            in_dim = out_dim

    registry = {}
    offset = 0
    chunks = []
    for name, array in entries:
        registry[name] = (offset, array.shape)
        chunks.append(array.ravel())
        offset += array.size
    return Parameters(np.concatenate(chunks), registry)


def bank_from_params(params: Parameters, config: ModelConfig) -> StrfBank:
    return StrfBank(rates=params.view("strf.rates"), scales=params.view("strf.scales"),
                    time_taps=config.strf_time_taps, freq_taps=config.strf_freq_taps,
                    hop_seconds=config.strf_hop_seconds)


# --- conv plumbing (stride 2, SAME padding: out = ceil(in / 2)) ---


def _pad_amounts(size: int, kernel: int) -> tuple[int, int, int]:
    out = _downsampled(size)
    total = max((out - 1) * 2 + kernel - size, 0)
    return out, total // 2, total - total // 2


def _conv2d_forward(x, weight, bias):
    _, kh, kw = weight.shape[1:]
    out_h, top, bottom = _pad_amounts(x.shape[1], kh)
    out_w, left, right = _pad_amounts(x.shape[2], kw)
    xp = np.pad(x, ((0, 0), (top, bottom), (left, right)))
    y = np.broadcast_to(bias[:, None, None], (bias.size, out_h, out_w)).copy()
    for u in range(kh):
        for v in range(kw):
            patch = xp[:, u : u + 2 * out_h - 1 : 2, v : v + 2 * out_w - 1 : 2]
            y += np.einsum("oc,chw->ohw", weight[:, :, u, v], patch)
    return y, (xp, top, left)


def _conv2d_backward(dy, weight, conv_cache, in_shape, need_input_grad):
    xp, top, left = conv_cache
    kh, kw = weight.shape[2:]
    out_h, out_w = dy.shape[1:]
    d_weight = np.zeros_like(weight)
    d_bias = dy.sum(axis=(1, 2))
    dxp = np.zeros_like(xp) if need_input_grad else None
    for u in range(kh):
        for v in range(kw):
            patch = xp[:, u : u + 2 * out_h - 1 : 2, v : v + 2 * out_w - 1 : 2]
            d_weight[:, :, u, v] = np.einsum("ohw,chw->oc", dy, patch)
            if need_input_grad:
                dxp[:, u : u + 2 * out_h - 1 : 2, v : v + 2 * out_w - 1 : 2] += np.einsum(
                    "oc,ohw->chw", weight[:, :, u, v], dy
                )
    dx = None
    if need_input_grad:
        dx = dxp[:, top : top + in_shape[1], left : left + in_shape[2]]
    return dx, d_weight, d_bias


def encoder_forward(x: np.ndarray, params: Parameters, config: ModelConfig,
                    cache: Optional[dict] = None) -> np.ndarray:
    """Two stride-2 conv+ReLU stages, then a linear projection to d.

    x is (in_channels, T, F); the result is (ceil(T/4), d).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.shape[0] != config.in_channels or x.shape[2] != config.feat_dim:
        raise ShapeError(
            f"input {x.shape} does not match (channels={config.in_channels}, "
            f"*, feat_dim={config.feat_dim})"
        )
    pre1, cache1 = _conv2d_forward(x, params.view("encoder.conv1.weight"),
                                   params.view("encoder.conv1.bias"))
    h1 = np.maximum(pre1, 0.0)
    pre2, cache2 = _conv2d_forward(h1, params.view("encoder.conv2.weight"),
                                   params.view("encoder.conv2.bias"))
    h2 = np.maximum(pre2, 0.0)
    t2 = h2.shape[1]
    flat = h2.transpose(1, 0, 2).reshape(t2, -1)
    hidden = flat @ params.view("encoder.proj.weight").T + params.view("encoder.proj.bias")
    if cache is not None:
        cache.update({"enc.x": x, "enc.pre1": pre1, "enc.cache1": cache1,
                      "enc.pre2": pre2, "enc.cache2": cache2, "enc.flat": flat,
                      "enc.hidden": hidden})
    return hidden


def _encoder_backward(d_hidden, params, config, cache, grad, need_input_grad):
    flat = cache["enc.flat"]
    grad_view = lambda name: Parameters(grad, params.registry).view(name)
    grad_view("encoder.proj.weight")[...] += d_hidden.T @ flat
    grad_view("encoder.proj.bias")[...] += d_hidden.sum(axis=0)
    d_flat = d_hidden @ params.view("encoder.proj.weight")
    c2 = config.conv_channels[1]
    t2 = flat.shape[0]
    d_h2 = d_flat.reshape(t2, c2, -1).transpose(1, 0, 2)
    d_pre2 = d_h2 * (cache["enc.pre2"] > 0)
    d_h1, dw2, db2 = _conv2d_backward(d_pre2, params.view("encoder.conv2.weight"),
                                      cache["enc.cache2"],
                                      cache["enc.pre1"].shape, True)
    grad_view("encoder.conv2.weight")[...] += dw2
    grad_view("encoder.conv2.bias")[...] += db2
    d_pre1 = d_h1 * (cache["enc.pre1"] > 0)
    d_x, dw1, db1 = _conv2d_backward(d_pre1, params.view("encoder.conv1.weight"),
                                     cache["enc.cache1"],
                                     cache["enc.x"].shape, need_input_grad)
    grad_view("encoder.conv1.weight")[...] += dw1
    grad_view("encoder.conv1.bias")[...] += db1
    return d_x


# --- task-specific self-attentive pooling ---


def _sorted_sum(values: np.ndarray, axis: int = 0) -> np.ndarray:
    # summing in sorted order makes the reduction exactly permutation-invariant
    return np.sum(np.sort(values, axis=axis), axis=axis)


def self_attentive_pool(hidden: np.ndarray, att_weight: np.ndarray, att_vector: np.ndarray,
                        cache: Optional[dict] = None, tag: str = "pool") -> np.ndarray:
    """Content-weighted average: softmax(v . tanh(W h_t)) over frames."""
    hidden = np.asarray(hidden, dtype=np.float64)
    if hidden.ndim != 2 or hidden.shape[0] < 1:
        raise ShapeError(f"hidden must be (T>=1, d), got {hidden.shape}")
    # per-frame reductions avoid BLAS row blocking, whose rounding can
    # depend on a frame's position; scores must be pure row functions
    z = np.tanh(np.sum(hidden[:, None, :] * att_weight[None, :, :], axis=2))
    scores = np.sum(z * att_vector[None, :], axis=1)
    exps = np.exp(scores - scores.max())
    alpha = exps / _sorted_sum(exps)
    pooled = _sorted_sum(alpha[:, None] * hidden, axis=0)
    if cache is not None:
        cache.update({f"{tag}.z": z, f"{tag}.alpha": alpha, f"{tag}.pooled": pooled})
    return pooled


def _pool_backward(d_pooled, hidden, att_weight, att_vector, z, alpha):
    d_alpha = hidden @ d_pooled
    d_hidden = alpha[:, None] * d_pooled[None, :]
    d_scores = alpha * (d_alpha - alpha @ d_alpha)
    d_vector = z.T @ d_scores
    d_pre = d_scores[:, None] * att_vector[None, :] * (1.0 - z ** 2)
    d_weight = d_pre.T @ hidden
    d_hidden += d_pre @ att_weight
    return d_hidden, d_weight, d_vector


# --- per-task heads ---


def _head_forward(pooled, params, config, task, cache=None):
    h = pooled
    activations = [h]
    for name in _head_layer_names(config, task):
        pre = params.view(f"{name}.weight") @ h + params.view(f"{name}.bias")
        h = pre if name.endswith(".out") else np.maximum(pre, 0.0)
        activations.append(h)
    if cache is not None:
        cache[f"head.{task}.acts"] = activations
    return h


def _head_backward(d_out, params, config, task, cache, grad):
    activations = cache[f"head.{task}.acts"]
    names = _head_layer_names(config, task)
    grad_params = Parameters(grad, params.registry)
    d = d_out
    for i in range(len(names) - 1, -1, -1):
        name = names[i]
        inp = activations[i]
        if not name.endswith(".out"):
            d = d * (activations[i + 1] > 0)
        grad_params.view(f"{name}.weight")[...] += np.outer(d, inp)
        grad_params.view(f"{name}.bias")[...] += d
        d = params.view(f"{name}.weight").T @ d
    return d


def _log_softmax(logits):
    shifted = logits - logits.max()
    return shifted - np.log(np.sum(np.sort(np.exp(shifted))))


def multitask_forward(features: np.ndarray, params: Parameters, config: ModelConfig,
                      utterance_id: str = "", cache: Optional[dict] = None) -> PredictionSet:
    """Full forward pass to a PredictionSet.

    With the "strf" frontend the modulation features are computed inside
    the graph from the (T, F) log-mel input using the current rate/scale
    parameters; otherwise features are (T, F) or (channels, T, F).
    """
    outputs = _forward_outputs(features, params, config, cache)
    return _outputs_to_prediction(outputs, config, utterance_id)


def _outputs_to_prediction(outputs: dict, config: ModelConfig, utterance_id: str) -> PredictionSet:
    e = config.n_emotions
    k = config.n_countries
    return PredictionSet(
        id=utterance_id or "utt",
        age=float(outputs["age"]) if "age" in outputs else config.age_prior,
        emotion=outputs.get("emotion", np.full(e, 0.5)),
        country_probs=outputs.get("country_probs", np.full(k, 1.0 / k)),
    )


def _forward_outputs(features, params, config, cache=None):
    cache = cache if cache is not None else {}
    feats = np.asarray(features, dtype=np.float64)
    if config.frontend == "strf":
        if feats.ndim != 2:
            raise ShapeError("strf frontend consumes a (T, F) log-mel matrix")
        cache["logmel"] = feats
        x = stmf(feats, bank_from_params(params, config))
    else:
        x = feats
    cache["input"] = x
    hidden = encoder_forward(x, params, config, cache)
    outputs = {}
    for task in config.tasks:
        pooled = self_attentive_pool(hidden, params.view(f"pool.{task}.W"),
                                     params.view(f"pool.{task}.v"), cache, tag=f"pool.{task}")
        raw = _head_forward(pooled, params, config, task, cache)
        cache[f"raw.{task}"] = raw
        if task == "age":
            outputs["age"] = float(softplus(raw[0]))
        elif task == "emotion":
            outputs["emotion"] = sigmoid(raw)
        else:
            log_probs = _log_softmax(raw)
            outputs["country_log_probs"] = log_probs
            outputs["country_probs"] = np.exp(log_probs)
    cache["outputs"] = outputs
    return outputs


def multitask_loss(pred: PredictionSet, label: LabelSet, weights: LossWeights = LossWeights(),
                   tasks: Sequence[str] = TASKS) -> tuple[float, dict[str, float]]:
    """Weighted total and per-task components.

    L_age and L_emo are absolute errors (emotion averaged over dimensions),
    L_country is the negative log-likelihood. Disabled tasks contribute 0.
    """
    if label is None:
        raise ValueError("loss requires a label")
    components = {t: 0.0 for t in TASKS}
    if "age" in tasks:
        components["age"] = abs(float(pred.age) - float(label.age))
    if "emotion" in tasks:
        if len(pred.emotion) != len(label.emotion):
            raise ValueError("emotion dimensionality mismatch")
        components["emotion"] = float(np.mean(np.abs(pred.emotion - label.emotion)))
    if "country" in tasks:
        if not 0 <= label.country < len(pred.country_probs):
            raise ValueError(f"country label {label.country} out of range")
        components["country"] = float(-np.log(max(pred.country_probs[label.country], 1e-300)))
    total = (weights.age * components["age"] + weights.emotion * components["emotion"]
             + weights.country * components["country"])
    return total, components


def _loss_from_outputs(outputs, label, weights, config):
    components = {t: 0.0 for t in TASKS}
    if "age" in config.tasks:
        components["age"] = abs(outputs["age"] - float(label.age))
    if "emotion" in config.tasks:
        components["emotion"] = float(np.mean(np.abs(outputs["emotion"] - label.emotion)))
    if "country" in config.tasks:
        components["country"] = float(-outputs["country_log_probs"][label.country])
    total = (weights.age * components["age"] + weights.emotion * components["emotion"]
             + weights.country * components["country"])
    return total, components


def _backward_utterance(cache, label, weights, params, config, grad, scale):
    """Accumulate scale * dLoss/dparams for one utterance into grad."""
    hidden = cache["enc.hidden"]
    d_hidden = np.zeros_like(hidden)
    grad_params = Parameters(grad, params.registry)
    outputs = cache["outputs"]
    for task in config.tasks:
        raw = cache[f"raw.{task}"]
        if task == "age":
            sign = np.sign(outputs["age"] - float(label.age))
            d_raw = np.array([scale * weights.age * sign * float(sigmoid(raw[0]))])
        elif task == "emotion":
            e = outputs["emotion"]
            sign = np.sign(e - label.emotion)
            d_raw = scale * weights.emotion * sign * e * (1.0 - e) / e.size
        else:
            probs = outputs["country_probs"]
            d_raw = scale * weights.country * probs.copy()
            d_raw[label.country] -= scale * weights.country
        d_pooled = _head_backward(d_raw, params, config, task, cache, grad)
        dh, dw, dv = _pool_backward(d_pooled, hidden, params.view(f"pool.{task}.W"),
                                    params.view(f"pool.{task}.v"),
                                    cache[f"pool.{task}.z"], cache[f"pool.{task}.alpha"])
        grad_params.view(f"pool.{task}.W")[...] += dw
        grad_params.view(f"pool.{task}.v")[...] += dv
        d_hidden += dh
    need_input = config.frontend == "strf"
    d_input = _encoder_backward(d_hidden, params, config, cache, grad, need_input)
    if need_input:
        d_rate, d_scale = strf_param_grad(cache["logmel"], bank_from_params(params, config),
                                          d_input)
        grad_params.view("strf.rates")[...] += d_rate
        grad_params.view("strf.scales")[...] += d_scale


def _first_nonfinite(cache) -> str:
    for name, value in cache.items():
        if name == "outputs" or not isinstance(value, np.ndarray):
            continue
        if not np.all(np.isfinite(value)):
            return name
    return "loss"


def backward(batch: Sequence[tuple[np.ndarray, LabelSet]], params: Parameters,
             config: ModelConfig, weights: LossWeights = LossWeights()):
    """Gradient of the mean total loss over a batch.

    Returns (mean_loss, mean per-task components, gradient vector). The
    accumulation order is the batch order — fully deterministic.
    """
    if not batch:
        raise ValueError("empty batch")
    grad = params.zeros_like()
    total = 0.0
    components = {t: 0.0 for t in TASKS}
    scale = 1.0 / len(batch)
    for features, label in batch:
        if label is None:
            raise ValueError("training batch contains an unlabeled utterance")
        cache = {}
        outputs = _forward_outputs(features, params, config, cache)
        loss, comps = _loss_from_outputs(outputs, label, weights, config)
        if not math.isfinite(loss):
            raise TrainingDiverged(
                f"non-finite loss; first bad tensor: {_first_nonfinite(cache)}"
            )
        total += scale * loss
        for t in TASKS:
            components[t] += scale * comps[t]
        _backward_utterance(cache, label, weights, params, config, grad, scale)
    return total, components, grad


# --- optimizer and training loop ---


class Adam:
    def __init__(self, size: int, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, vector: np.ndarray, grad: np.ndarray) -> None:
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad ** 2
        m_hat = self.m / (1 - self.beta1 ** self.t)
        v_hat = self.v / (1 - self.beta2 ** self.t)
        vector -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 200
    batch_size: int = 16
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0


@dataclass(frozen=True)
class TrainExample:
    id: str
    features: np.ndarray
    label: Optional[LabelSet]


@dataclass
class TrainResult:
    params: Parameters
    config: ModelConfig
    history: list[tuple[int, float, float, float, float]]  # step, age, emo, country, total
    val_report: Optional[EvalReport]


def predict_utterance(params: Parameters, config: ModelConfig, features: np.ndarray,
                      utterance_id: str) -> PredictionSet:
    """Inference for one utterance; disabled tasks get neutral defaults."""
    return multitask_forward(features, params, config, utterance_id)


def predict_many(params, config, examples: Sequence[TrainExample]) -> list[PredictionSet]:
    return [predict_utterance(params, config, ex.features, ex.id) for ex in examples]


def history_text(history) -> str:
    lines = ["step,loss_age,loss_emotion,loss_country,total"]
    lines += [f"{s},{a:.8f},{e:.8f},{c:.8f},{t:.8f}" for s, a, e, c, t in history]
    return "\n".join(lines) + "\n"


def train(train_set: Sequence[TrainExample], val_set: Sequence[TrainExample],
          config: ModelConfig, train_config: TrainConfig = TrainConfig(),
          weights: LossWeights = LossWeights()) -> TrainResult:
    """Seed-pinned Adam training; logs one row per step.

    Validation is scored once at the end when labels are available. A
    non-finite loss aborts with the name of the first bad tensor.
    """
    if not train_set:
        raise ValueError("empty train split")
    params = build_parameters(config)
    adam = Adam(params.vector.size, train_config.lr, train_config.beta1,
                train_config.beta2, train_config.eps)
    rng = np.random.default_rng([train_config.seed, 97])
    order: list[int] = []
    history = []
    for step in range(1, train_config.steps + 1):
        while len(order) < train_config.batch_size:
            order.extend(rng.permutation(len(train_set)).tolist())
        take, order = order[: train_config.batch_size], order[train_config.batch_size :]
        batch = [(train_set[i].features, train_set[i].label) for i in take]
        loss, comps, grad = backward(batch, params, config, weights)
        adam.step(params.vector, grad)
        history.append((step, comps["age"], comps["emotion"], comps["country"], loss))

    val_report = None
    if val_set and all(ex.label is not None for ex in val_set):
        preds = predict_many(params, config, val_set)
        val_report = evaluate(preds, {ex.id: ex.label for ex in val_set})
    return TrainResult(params=params, config=config, history=history, val_report=val_report)


# --- checkpoint container ("VBCK") ---

_CKPT_MAGIC = b"VBCK"
_CKPT_VERSION = 1


def save_checkpoint(path, params: Parameters, config: ModelConfig, gmvn_ref: str = "") -> None:
    meta = {"config": asdict(config), "gmvn_stats": gmvn_ref}
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    out = io.BytesIO()
    out.write(_CKPT_MAGIC)
    out.write(struct.pack("<I", _CKPT_VERSION))
    out.write(struct.pack("<I", len(meta_bytes)))
    out.write(meta_bytes)
    out.write(struct.pack("<I", len(params.registry)))
    for name, (_, shape) in params.registry.items():
        encoded = name.encode("utf-8")
        out.write(struct.pack("<I", len(encoded)))
        out.write(encoded)
        out.write(struct.pack("<B", len(shape)))
        out.write(struct.pack(f"<{len(shape)}I", *shape))
    out.write(params.vector.astype("<f4").tobytes())
    atomic_write_bytes(path, out.getvalue())


def load_checkpoint(path) -> tuple[Parameters, ModelConfig, str]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != _CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (meta_len,) = struct.unpack_from("<I", blob, 8)
    meta = json.loads(blob[12 : 12 + meta_len].decode("utf-8"))
    pos = 12 + meta_len
    (n_entries,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    registry = {}
    offset = 0
    for _ in range(n_entries):
        (name_len,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos : pos + name_len].decode("utf-8")
        pos += name_len
        (ndim,) = struct.unpack_from("<B", blob, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, pos)
        pos += 4 * ndim
        registry[name] = (offset, tuple(shape))
        offset += int(np.prod(shape))
    payload = blob[pos:]
    if len(payload) != 4 * offset:
        raise ValueError(f"{path}: payload {len(payload)} bytes, registry promises {4 * offset}")
    vector = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    cfg = meta["config"]
    cfg["conv_channels"] = tuple(cfg["conv_channels"])
    cfg["tasks"] = tuple(cfg["tasks"])
    return Parameters(vector, registry), ModelConfig(**cfg), meta.get("gmvn_stats", "")
