"""Gated-attention MIL model over bags of fused patch embeddings.

One bag is one slide: a (K, M) matrix of fused per-patch embeddings and a
binary slide-level label. Instances are scored by the AB-MIL style gated
attention

    score_i = w . (tanh(V h_i) * sigmoid(U h_i))

softmaxed over the bag into weights alpha, the bag embedding is the
attention-weighted sum of instances, and a small relu MLP head maps it to
a single logit. The forward pass caches every intermediate the analytic
backward pass (training module) needs.

All math is float64 so finite-difference gradient checks at 1e-6 step
sizes are meaningful.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rng import make_rng

DEFAULT_ATTENTION_DIM = 128
DEFAULT_HEAD_WIDTHS = (256,)

CHECKPOINT_MAGIC = b"MILC"
CHECKPOINT_VERSION = 1


@dataclass
class Bag:
    """One slide's fused instance features plus identifiers and label."""

    slide_id: str
    patient_id: str
    features: np.ndarray  # (K, M) float64
    label: int | None = None
    signal_rows: tuple[int, ...] = ()  # synthetic ground truth, empty for real data

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ValueError(
                f"bag {self.slide_id}: features must be (K>=1, M), got {self.features.shape}"
            )
        if not np.all(np.isfinite(self.features)):
            raise ValueError(f"bag {self.slide_id}: non-finite features")
        if self.label is not None and self.label not in (0, 1):
            raise ValueError(f"bag {self.slide_id}: label must be 0 or 1, got {self.label}")

    @property
    def n_instances(self) -> int:
        return self.features.shape[0]


@dataclass
class GatedAttentionParams:
    """Learnable tensors of the gated attention scorer."""

    tanh_proj: np.ndarray  # (L, M), feeds the tanh branch
    gate_proj: np.ndarray  # (L, M), feeds the sigmoid gate
    score: np.ndarray  # (L,), combines the gated features into a logit

    def __post_init__(self):
        if self.tanh_proj.shape != self.gate_proj.shape:
            raise ValueError("tanh_proj and gate_proj must share a shape")
        if self.score.shape != (self.tanh_proj.shape[0],):
            raise ValueError("score length must equal the attention dim")

    @property
    def attention_dim(self) -> int:
        return self.tanh_proj.shape[0]

    @property
    def input_dim(self) -> int:
        return self.tanh_proj.shape[1]

    def arrays(self) -> list[np.ndarray]:
        return [self.tanh_proj, self.gate_proj, self.score]


@dataclass
class MLPHeadParams:
    """Relu MLP ending in a single logit: weights[i] is (out_i, in_i)."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("head needs matching, nonempty weight and bias lists")
        for w, b in zip(self.weights, self.biases):
            if w.shape[0] != b.shape[0]:
                raise ValueError("bias length must match layer output width")
        if self.weights[-1].shape[0] != 1:
            raise ValueError("head must end in a single output logit")

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out


@dataclass
class MILModel:
    """Attention scorer plus classification head, with config metadata."""

    attention: GatedAttentionParams
    head: MLPHeadParams
    extractor_order: list[str] = field(default_factory=list)
    config_hash: str = ""

    @property
    def input_dim(self) -> int:
        return self.attention.input_dim

    def arrays(self) -> list[np.ndarray]:
        """All parameter tensors in a fixed order (shared with gradients)."""
        return self.attention.arrays() + self.head.arrays()


@dataclass
class ForwardTrace:
    """Everything one forward pass computed, cached for backprop."""

    attention_logits: np.ndarray  # (K,)
    alpha: np.ndarray  # (K,)
    pooled: np.ndarray  # (M,)
    logit: float
    probability: float
    tanh_out: np.ndarray  # (K, L)
    gate_out: np.ndarray  # (K, L)
    head_pre: list[np.ndarray]  # pre-activation per layer
    head_act: list[np.ndarray]  # input to each layer (head_act[0] is pooled)


def init_model(
    input_dim: int,
    attention_dim: int = DEFAULT_ATTENTION_DIM,
    head_widths: tuple[int, ...] = DEFAULT_HEAD_WIDTHS,
    seed: int = 0,
    extractor_order: list[str] | None = None,
    config_hash: str = "",
) -> MILModel:
    """Seeded init: weights uniform in +-1/sqrt(fan_in), biases zero."""
    rng = make_rng(seed, "model-init")

    def uniform(shape: tuple[int, ...], fan_in: int) -> np.ndarray:
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    attention = GatedAttentionParams(
        tanh_proj=uniform((attention_dim, input_dim), input_dim),
        gate_proj=uniform((attention_dim, input_dim), input_dim),
        score=uniform((attention_dim,), attention_dim),
    )

    weights = []
    biases = []
    fan_in = input_dim
    for width in tuple(head_widths) + (1,):
        weights.append(uniform((width, fan_in), fan_in))
        biases.append(np.zeros(width))
        fan_in = width
    head = MLPHeadParams(weights=weights, biases=biases)

    return MILModel(
        attention=attention,
        head=head,
        extractor_order=list(extractor_order or []),
        config_hash=config_hash,
    )


def sigmoid(x):
    """Numerically stable logistic function (scalar or array)."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    positive = x >= 0
    out[positive] = 1.0 / (1.0 + np.exp(-x[positive]))
    exp_x = np.exp(x[~positive])
    out[~positive] = exp_x / (1.0 + exp_x)
    if out.ndim == 0:
        return float(out)
    return out


def _check_features(params: GatedAttentionParams, features: np.ndarray) -> np.ndarray:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2:
        raise ValueError(f"features must be (K, M), got shape {features.shape}")
    if features.shape[1] != params.input_dim:
        raise ValueError(
            f"feature dim {features.shape[1]} does not match params dim {params.input_dim}"
        )
    if not np.all(np.isfinite(features)):
        raise ValueError("non-finite instance features")
    return features


def attention_scores(
    params: GatedAttentionParams, features: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Raw gated logits plus both branch activations: (logits, tanh, gate)."""
    features = _check_features(params, features)
    tanh_out = np.tanh(features @ params.tanh_proj.T)
    gate_out = sigmoid(features @ params.gate_proj.T)
    logits = (tanh_out * gate_out) @ params.score
    return logits, tanh_out, gate_out


def softmax(logits: np.ndarray) -> np.ndarray:
    """Max-shifted softmax over a 1-D logit vector."""
    shifted = logits - logits.max()
    weights = np.exp(shifted)
    return weights / weights.sum()


def attention_weights(params: GatedAttentionParams, features: np.ndarray) -> np.ndarray:
    """Normalized instance attention weights alpha for one bag."""
    logits, _, _ = attention_scores(params, features)
    return softmax(logits)


def pool(alpha: np.ndarray, features: np.ndarray) -> np.ndarray:
    """Attention-weighted sum of instances: a convex combination of rows."""
    alpha = np.asarray(alpha, dtype=np.float64)
    features = np.asarray(features, dtype=np.float64)
    if alpha.ndim != 1 or features.ndim != 2 or alpha.shape[0] != features.shape[0]:
        raise ValueError(
            f"alpha length {alpha.shape} does not match features {features.shape}"
        )
    return alpha @ features


def mlp_forward(
    head: MLPHeadParams, pooled: np.ndarray
) -> tuple[float, float, list[np.ndarray], list[np.ndarray]]:
    """Head forward pass -> (logit, probability, pre-activations, layer inputs)."""
    pooled = np.asarray(pooled, dtype=np.float64)
    if pooled.shape != (head.input_dim,):
        raise ValueError(
            f"pooled embedding shape {pooled.shape} does not match head input "
            f"dim {head.input_dim}"
        )
    activation = pooled
    pre_list = []
    act_list = []
    last = len(head.weights) - 1
    for i, (w, b) in enumerate(zip(head.weights, head.biases)):
        act_list.append(activation)
        pre = w @ activation + b
        pre_list.append(pre)
        activation = pre if i == last else np.maximum(pre, 0.0)
    logit = float(pre_list[-1][0])
    return logit, sigmoid(logit), pre_list, act_list


def forward(model: MILModel, bag: Bag) -> ForwardTrace:
    """Full bag forward: attention -> pooling -> head."""
    logits, tanh_out, gate_out = attention_scores(model.attention, bag.features)
    alpha = softmax(logits)
    pooled = pool(alpha, bag.features)
    logit, probability, head_pre, head_act = mlp_forward(model.head, pooled)
    return ForwardTrace(
        attention_logits=logits,
        alpha=alpha,
        pooled=pooled,
        logit=logit,
        probability=probability,
        tanh_out=tanh_out,
        gate_out=gate_out,
        head_pre=head_pre,
        head_act=head_act,
    )


def predict_probability(model: MILModel, features: np.ndarray) -> float:
    """Probability of a positive label for one bag's feature matrix."""
    logits, _, _ = attention_scores(model.attention, features)
    pooled = pool(softmax(logits), features)
    _, probability, _, _ = mlp_forward(model.head, pooled)
    return probability


# --------------------------------------------------------------------------
# Checkpoint I/O (deterministic bytes: same model -> same file)
# --------------------------------------------------------------------------


def _pack_array(array: np.ndarray) -> bytes:
    shape = array.shape
    header = struct.pack("<B", len(shape)) + struct.pack(f"<{len(shape)}I", *shape)
    return header + np.ascontiguousarray(array, dtype="<f8").tobytes()


def _unpack_array(data: bytes, offset: int) -> tuple[np.ndarray, int]:
    try:
        (ndim,) = struct.unpack_from("<B", data, offset)
        offset += 1
        shape = struct.unpack_from(f"<{ndim}I", data, offset)
    except struct.error as exc:
        raise ValueError(f"truncated checkpoint: {exc}") from exc
    offset += 4 * ndim
    count = int(np.prod(shape)) if shape else 1
    if offset + 8 * count > len(data):
        raise ValueError("truncated checkpoint: array payload cut short")
    array = np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(shape)
    offset += 8 * count
    return array.copy(), offset


def save_checkpoint(model: MILModel, path: str | Path) -> None:
    """Write a model as a versioned little-endian binary checkpoint."""
    order_blob = json.dumps(model.extractor_order).encode()
    hash_blob = model.config_hash.encode()
    parts = [
        CHECKPOINT_MAGIC,
        struct.pack("<H", CHECKPOINT_VERSION),
        struct.pack("<H", len(hash_blob)),
        hash_blob,
        struct.pack("<H", len(order_blob)),
        order_blob,
        struct.pack("<H", len(model.head.weights)),
    ]
    for array in model.arrays():
        parts.append(_pack_array(array))
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path: str | Path) -> MILModel:
    """Read a checkpoint back; arrays round-trip bit-exactly."""
    data = Path(path).read_bytes()
    if len(data) < 6 or data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a model checkpoint")
    (version,) = struct.unpack_from("<H", data, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    offset = 6
    (hash_len,) = struct.unpack_from("<H", data, offset)
    offset += 2
    config_hash = data[offset : offset + hash_len].decode()
    offset += hash_len
    (order_len,) = struct.unpack_from("<H", data, offset)
    offset += 2
    extractor_order = json.loads(data[offset : offset + order_len].decode())
    offset += order_len
    (n_layers,) = struct.unpack_from("<H", data, offset)
    offset += 2

    tanh_proj, offset = _unpack_array(data, offset)
    gate_proj, offset = _unpack_array(data, offset)
    score, offset = _unpack_array(data, offset)
    weights = []
    biases = []
    for _ in range(n_layers):
        w, offset = _unpack_array(data, offset)
        b, offset = _unpack_array(data, offset)
        weights.append(w)
        biases.append(b)
    if offset != len(data):
        raise ValueError(f"{path}: trailing bytes in checkpoint")

    return MILModel(
        attention=GatedAttentionParams(tanh_proj=tanh_proj, gate_proj=gate_proj, score=score),
        head=MLPHeadParams(weights=weights, biases=biases),
        extractor_order=list(extractor_order),
        config_hash=config_hash,
    )
