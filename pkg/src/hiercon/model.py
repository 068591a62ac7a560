"""Hierarchical attention head over stacked per-layer hidden states.

Pipeline for one utterance ``H`` of shape [L x T x D]:

1. temporal attention pools each layer's T frames into a layer token,
2. consecutive layers are grouped (g per group) and each group is pooled,
   then refined by a residual MLP,
3. the group vectors are pooled the same way into the utterance embedding,
   which feeds a classifier (2 logits) and a projection head.

Every function here accepts arbitrary leading batch axes, so the same code
serves one utterance and a mini-batch.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import tensor as tc
from .data import FeatureStack, read_tensor_container, write_tensor_container
from .tensor import Tensor


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 24
    frames: int = 200
    feature_dim: int = 1024
    group_size: int = 3
    attn_dim: int = 128
    ffn_dim: int = 512
    proj_dim: int = 256
    dropout_rate: float = 0.1
    num_classes: int = 2
    shared_temporal: bool = True

    def __post_init__(self):
        for name in ("num_layers", "frames", "feature_dim", "group_size", "attn_dim", "ffn_dim", "proj_dim", "num_classes"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or isinstance(value, bool) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.num_layers % self.group_size:
            raise ConfigError(
                f"num_layers={self.num_layers} is not divisible by group_size={self.group_size}"
            )
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")

    @property
    def num_groups(self) -> int:
        return self.num_layers // self.group_size

    @property
    def feature_shape(self) -> tuple[int, int, int]:
        return (self.num_layers, self.frames, self.feature_dim)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def tiny_config(**overrides) -> ModelConfig:
    """Gradient-check sized model (L=6, T=5, D=8)."""
    base = dict(num_layers=6, frames=5, feature_dim=8, group_size=3, attn_dim=4, ffn_dim=6, proj_dim=4, dropout_rate=0.1)
    base.update(overrides)
    return ModelConfig(**base)


def fixture_config(**overrides) -> ModelConfig:
    """Model sized for the synthetic planted-artefact corpus."""
    base = dict(num_layers=6, frames=20, feature_dim=16, group_size=3, attn_dim=16, ffn_dim=32, proj_dim=16, dropout_rate=0.1)
    base.update(overrides)
    return ModelConfig(**base)


@dataclass
class AttnPoolParams:
    W1: Tensor
    b1: Tensor
    w2: Tensor


@dataclass
class Affine:
    weight: Tensor  # [out x in]
    bias: Tensor


@dataclass
class ResidualMLP:
    up: Affine
    down: Affine


@dataclass
class ClassifierParams:
    norm_gain: Tensor
    norm_bias: Tensor
    hidden: Affine
    out: Affine


@dataclass
class HierConParams:
    temporal: AttnPoolParams
    intra_pool: AttnPoolParams
    intra_mlp: ResidualMLP
    inter_pool: AttnPoolParams
    inter_mlp: ResidualMLP
    classifier: ClassifierParams
    projection: Affine

    def named(self) -> dict[str, Tensor]:
        return dict(_walk(self, ""))

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.named().items()}

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self.named().values())

    def requires_grad_(self, flag: bool = True) -> "HierConParams":
        for t in self.named().values():
            t.requires_grad = flag
            t.grad = None
        return self

    @classmethod
    def from_arrays(cls, config: ModelConfig, arrays: dict[str, np.ndarray]) -> "HierConParams":
        template = init_params(config, seed=0)
        expected = template.named()
        if set(arrays) != set(expected):
            missing = sorted(set(expected) - set(arrays))
            extra = sorted(set(arrays) - set(expected))
            raise ConfigError(f"parameter names disagree with config: missing={missing} unexpected={extra}")
        for name, t in expected.items():
            if tuple(np.shape(arrays[name])) != t.shape:
                raise ConfigError(f"parameter {name}: shape {np.shape(arrays[name])} != expected {t.shape}")
        return _rebuild(template, "", arrays)


def _walk(node, prefix: str) -> Iterator[tuple[str, Tensor]]:
    for f in dataclasses.fields(node):
        value = getattr(node, f.name)
        name = f"{prefix}{f.name}"
        if isinstance(value, Tensor):
            yield name, value
        else:
            yield from _walk(value, name + ".")


def _rebuild(node, prefix: str, arrays):
    kwargs = {}
    for f in dataclasses.fields(node):
        value = getattr(node, f.name)
        name = f"{prefix}{f.name}"
        kwargs[f.name] = Tensor(arrays[name]) if isinstance(value, Tensor) else _rebuild(value, name + ".", arrays)
    return type(node)(**kwargs)


# initialisation --------------------------------------------------------------

def _glorot(rng: np.random.Generator, fan_out: int, fan_in: int, shape=None) -> Tensor:
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-a, a, size=shape or (fan_out, fan_in)))


def _affine(rng, fan_in: int, fan_out: int, zero: bool = False) -> Affine:
    weight = Tensor(np.zeros((fan_out, fan_in))) if zero else _glorot(rng, fan_out, fan_in)
    return Affine(weight, Tensor(np.zeros(fan_out)))


def _attn_pool(rng, cfg: ModelConfig, layers: int | None = None) -> AttnPoolParams:
    a, d = cfg.attn_dim, cfg.feature_dim
    if layers is None:
        return AttnPoolParams(_glorot(rng, a, d), Tensor(np.zeros(a)), _glorot(rng, 1, a, shape=(a,)))
    return AttnPoolParams(
        _glorot(rng, a, d, shape=(layers, a, d)),
        Tensor(np.zeros((layers, a))),
        _glorot(rng, 1, a, shape=(layers, a)),
    )


def init_params(cfg: ModelConfig, seed: int = 0, zero_residual: bool = False) -> HierConParams:
    """Glorot-uniform weights, zero biases, unit layer-norm gain.

    ``zero_residual`` zeroes the second affine of both residual MLPs so each
    residual stage starts as the identity on its pooled input.
    """
    rng = np.random.default_rng(seed)
    d, f = cfg.feature_dim, cfg.ffn_dim
    temporal = _attn_pool(rng, cfg, None if cfg.shared_temporal else cfg.num_layers)
    intra_pool = _attn_pool(rng, cfg)
    intra_mlp = ResidualMLP(_affine(rng, d, f), _affine(rng, f, d, zero=zero_residual))
    inter_pool = _attn_pool(rng, cfg)
    inter_mlp = ResidualMLP(_affine(rng, d, f), _affine(rng, f, d, zero=zero_residual))
    classifier = ClassifierParams(
        Tensor(np.ones(d)), Tensor(np.zeros(d)), _affine(rng, d, f), _affine(rng, f, cfg.num_classes)
    )
    projection = _affine(rng, d, cfg.proj_dim)
    return HierConParams(temporal, intra_pool, intra_mlp, inter_pool, inter_mlp, classifier, projection)


# forward stages --------------------------------------------------------------

def _scores(x: Tensor, p: AttnPoolParams) -> Tensor:
    """``w2 . tanh(W1 x + b1)`` for every token along the second-last axis."""
    e = tc.tanh_map(tc.linear(x, p.W1, p.b1))
    s = tc.matmul(e, tc.reshape(p.w2, (p.w2.shape[0], 1)))
    return tc.reshape(s, s.shape[:-1])


def attn_pool(tokens: Tensor, p: AttnPoolParams) -> tuple[Tensor, Tensor]:
    """Pool [..., n, D] tokens to [..., D]; returns (pooled, weights[..., n])."""
    if tokens.shape[-1] != p.W1.shape[-1]:
        raise tc.ShapeError(f"attn_pool: tokens {tokens.shape} vs W1 {p.W1.shape}")
    weights = tc.softmax(_scores(tokens, p), axis=-1)
    return tc.weighted_sum(weights, tokens), weights


def temporal_attention(frames: Tensor, p: AttnPoolParams) -> tuple[Tensor, Tensor]:
    """Stage 1. ``frames`` is [..., L, T, D] (or a single layer [T, D]).

    With per-layer parameters (W1 of rank 3) the L axis selects the scorer.
    """
    if p.W1.data.ndim == 2:
        return attn_pool(frames, p)
    n_layers, a, d = p.W1.shape
    if frames.shape[-3] != n_layers or frames.shape[-1] != d:
        raise tc.ShapeError(f"temporal_attention: frames {frames.shape} vs per-layer W1 {p.W1.shape}")
    e = tc.tanh_map(tc.add(tc.matmul(frames, tc.transpose(p.W1)), tc.reshape(p.b1, (n_layers, 1, a))))
    s = tc.matmul(e, tc.reshape(p.w2, (n_layers, a, 1)))
    alpha = tc.softmax(tc.reshape(s, s.shape[:-1]), axis=-1)
    return tc.weighted_sum(alpha, frames), alpha


def _residual(x: Tensor, mlp: ResidualMLP) -> Tensor:
    h = tc.relu(tc.linear(x, mlp.up.weight, mlp.up.bias))
    return tc.add(x, tc.linear(h, mlp.down.weight, mlp.down.bias))


def intra_group(z: Tensor, params: HierConParams, group_size: int) -> tuple[Tensor, Tensor]:
    """Stage 2: z [..., L, D] -> (group vectors [..., G, D], beta [..., G, g])."""
    n_layers, d = z.shape[-2:]
    if n_layers % group_size:
        raise ConfigError(f"{n_layers} layers cannot form groups of {group_size}")
    groups = tc.reshape(z, z.shape[:-2] + (n_layers // group_size, group_size, d))
    pooled, beta = attn_pool(groups, params.intra_pool)
    return _residual(pooled, params.intra_mlp), beta


def inter_group(group_vecs: Tensor, params: HierConParams) -> tuple[Tensor, Tensor]:
    """Stage 3: group vectors [..., G, D] -> (u [..., D], gamma [..., G])."""
    pooled, gamma = attn_pool(group_vecs, params.inter_pool)
    return _residual(pooled, params.inter_mlp), gamma


def classify(u: Tensor, params: HierConParams, dropout_rate: float = 0.0, training: bool = False, rng=None) -> Tensor:
    c = params.classifier
    h = tc.layer_norm(u, c.norm_gain, c.norm_bias)
    h = tc.relu(tc.linear(h, c.hidden.weight, c.hidden.bias))
    if training and dropout_rate > 0:
        h = tc.mul(h, tc.dropout_mask(h.shape, dropout_rate, rng))
    return tc.linear(h, c.out.weight, c.out.bias)


def project(u: Tensor, params: HierConParams) -> Tensor:
    return tc.linear(u, params.projection.weight, params.projection.bias)


@dataclass
class AttentionRecord:
    """Attention weights of one forward pass (leading batch axis optional)."""

    alpha: np.ndarray  # [..., L, T]
    beta: np.ndarray  # [..., G, g]
    gamma: np.ndarray  # [..., G]

    def __getitem__(self, i) -> "AttentionRecord":
        return AttentionRecord(self.alpha[i], self.beta[i], self.gamma[i])

    def mean(self) -> "AttentionRecord":
        return AttentionRecord(self.alpha.mean(axis=0), self.beta.mean(axis=0), self.gamma.mean(axis=0))


@dataclass
class ForwardOutput:
    logits: Tensor
    f: Tensor
    record: AttentionRecord
    u: Tensor = field(repr=False, default=None)


def forward_batch(values, params: HierConParams, cfg: ModelConfig, training: bool = False, rng=None) -> ForwardOutput:
    """Run the head on ``values`` of shape [..., L, T, D]."""
    h = values if isinstance(values, Tensor) else Tensor(values)
    if tuple(h.shape[-3:]) != cfg.feature_shape:
        raise tc.ShapeError(f"features {tuple(h.shape[-3:])} do not match config {cfg.feature_shape}")
    z, alpha = temporal_attention(h, params.temporal)
    groups, beta = intra_group(z, params, cfg.group_size)
    u, gamma = inter_group(groups, params)
    logits = classify(u, params, cfg.dropout_rate, training, rng)
    f = project(u, params)
    return ForwardOutput(logits, f, AttentionRecord(alpha.data, beta.data, gamma.data), u)


def forward(stack: FeatureStack, params: HierConParams, cfg: ModelConfig, training: bool = False, rng=None):
    """Single utterance: returns (logits [2], f [proj_dim], AttentionRecord)."""
    out = forward_batch(stack.values, params, cfg, training, rng)
    return out.logits, out.f, out.record


# checkpoints -----------------------------------------------------------------

def save_checkpoint(path, cfg: ModelConfig, params: HierConParams, extra: dict | None = None) -> None:
    meta = {"model_config": cfg.to_dict()}
    if extra:
        meta["extra"] = extra
    write_tensor_container(path, meta, params.arrays())


def load_checkpoint(path) -> tuple[ModelConfig, HierConParams, dict]:
    meta, arrays = read_tensor_container(path)
    try:
        cfg = ModelConfig(**meta["model_config"])
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"{path}: checkpoint carries no valid model config ({exc})") from None
    return cfg, HierConParams.from_arrays(cfg, arrays), meta.get("extra", {})
