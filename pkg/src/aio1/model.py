"""The joint analysis network.

A stack of transformer modules runs over per-stem frame embeddings. Each
module first applies two parallel dilated neighborhood attentions over
time (the second at doubled dilation, so the pair sees spans related by
an integer factor), adds each to the residual, concatenates the two
branches, and funnels them through a position-wise MLP that widens to
``mlp_hidden_factor * C`` and back. A square-kernel grid attention over
(stem, time) then mixes information across instruments. Dilations grow
as ``dilation_base ** l`` with the block index, multiplying the temporal
receptive field per block; stems are averaged before four per-frame
heads emit beat, downbeat, boundary, and label scores.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as tz
from .attention import AttentionConfig, AttentionWeights, init_attention_weights, na1d, na2d
from .errors import ConfigError, InputError
from .frontend import (FrontendWeights, StemSpectrogram, check_frontend_plan,
                       frontend_forward, init_frontend_weights)
from .tensor import Parameter, Tensor

DEFAULT_VOCAB = ("intro", "verse", "chorus", "bridge", "inst", "outro",
                 "silence", "misc")

# dilated windows beyond this many frames (10 minutes at 100 fps) exceed
# any realistic track and only waste state
_PRACTICAL_FRAMES = 60_000


@dataclass
class ModelConfig:
    num_blocks: int = 11
    embed_dim: int = 24
    kernel_size: int = 5
    dilation_base: int = 2
    num_heads: int = 4
    num_stems: int = 4
    label_vocab: tuple[str, ...] = DEFAULT_VOCAB
    fps: float = 100.0
    bands: int = 81
    conv_channels: tuple[int, int, int] = (32, 48, 64)
    pool_widths: tuple[int, ...] = (3, 3, 3)
    mlp_hidden_factor: int = 8
    use_second_dina: bool = True
    use_instrument_attention: bool = True
    use_dilation: bool = True
    use_demix: bool = True
    dropout_conv: float = 0.2
    dropout_mlp: float = 0.2
    dropout_attn: float = 0.2
    dropout_skip: float = 0.1

    def validate(self) -> None:
        if self.num_blocks < 1:
            raise ConfigError("num_blocks must be >= 1")
        if self.kernel_size % 2 == 0 or self.kernel_size < 1:
            raise ConfigError("kernel_size must be odd and positive")
        if self.embed_dim % self.num_heads != 0:
            raise ConfigError("num_heads must divide embed_dim")
        if not self.label_vocab:
            raise ConfigError("label_vocab must not be empty")
        check_frontend_plan(self.bands, self.pool_widths)
        span = (self.kernel_size - 1) * self.max_dilation + 1
        if span > _PRACTICAL_FRAMES:
            warnings.warn(
                f"largest attention window spans {span} frames; "
                "longer than any practical track", stacklevel=2)

    @property
    def max_dilation(self) -> int:
        if not self.use_dilation:
            return 1
        return 2 * self.dilation_base ** (self.num_blocks - 1)

    def block_dilations(self, l: int) -> tuple[int, int]:
        if not self.use_dilation:
            return 1, 1
        d = self.dilation_base ** l
        return d, 2 * d


def default_config() -> ModelConfig:
    return ModelConfig()


def small_config() -> ModelConfig:
    """Compact preset: nine blocks, kernel 3, 16-dim embeddings, base-3
    dilations, with a narrower MLP and front end to match its size class."""
    return ModelConfig(num_blocks=9, kernel_size=3, embed_dim=16,
                       dilation_base=3, conv_channels=(8, 12, 16),
                       mlp_hidden_factor=2)


def toy_config() -> ModelConfig:
    """Two-block model for synthetic-data training runs on a CPU; narrow
    spectrograms keep the conv stack cheap."""
    return ModelConfig(num_blocks=2, embed_dim=16, conv_channels=(8, 12, 16),
                       bands=27)


def tiny_config() -> ModelConfig:
    """Smallest debuggable model; sized so finite-difference gradient
    verification over every parameter stays fast."""
    return ModelConfig(num_blocks=2, embed_dim=8, num_heads=2, num_stems=2,
                       bands=9, conv_channels=(2, 3, 4), pool_widths=(3, 3, 1))


CONFIG_PRESETS = {
    "default": default_config,
    "small": small_config,
    "toy": toy_config,
    "tiny": tiny_config,
}


# ---------------------------------------------------------------------------
# weights
# ---------------------------------------------------------------------------

@dataclass
class BlockWeights:
    norm1_g: Tensor
    norm1_b: Tensor
    dina1: AttentionWeights
    dina2: AttentionWeights | None
    norm2_g: Tensor
    norm2_b: Tensor
    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor
    norm3_g: Tensor | None
    norm3_b: Tensor | None
    inst: AttentionWeights | None

    def named(self, prefix: str):
        yield f"{prefix}.norm1.gain", self.norm1_g
        yield f"{prefix}.norm1.bias", self.norm1_b
        yield from self.dina1.named(f"{prefix}.dina1")
        if self.dina2 is not None:
            yield from self.dina2.named(f"{prefix}.dina2")
        yield f"{prefix}.norm2.gain", self.norm2_g
        yield f"{prefix}.norm2.bias", self.norm2_b
        yield f"{prefix}.mlp.fc1.weight", self.mlp_w1
        yield f"{prefix}.mlp.fc1.bias", self.mlp_b1
        yield f"{prefix}.mlp.fc2.weight", self.mlp_w2
        yield f"{prefix}.mlp.fc2.bias", self.mlp_b2
        if self.inst is not None:
            yield f"{prefix}.norm3.gain", self.norm3_g
            yield f"{prefix}.norm3.bias", self.norm3_b
            yield from self.inst.named(f"{prefix}.inst")


@dataclass
class HeadWeights:
    beat_w: Tensor
    beat_b: Tensor
    downbeat_w: Tensor
    downbeat_b: Tensor
    boundary_w: Tensor
    boundary_b: Tensor
    label_w: Tensor
    label_b: Tensor

    def named(self, prefix: str = "heads"):
        yield f"{prefix}.beat.weight", self.beat_w
        yield f"{prefix}.beat.bias", self.beat_b
        yield f"{prefix}.downbeat.weight", self.downbeat_w
        yield f"{prefix}.downbeat.bias", self.downbeat_b
        yield f"{prefix}.boundary.weight", self.boundary_w
        yield f"{prefix}.boundary.bias", self.boundary_b
        yield f"{prefix}.labels.weight", self.label_w
        yield f"{prefix}.labels.bias", self.label_b


@dataclass
class ModelWeights:
    config: ModelConfig
    frontend: FrontendWeights
    blocks: list[BlockWeights]
    final_norm_g: Tensor
    final_norm_b: Tensor
    heads: HeadWeights

    def named_tensors(self):
        yield from self.frontend.named("frontend")
        for l, bw in enumerate(self.blocks):
            yield from bw.named(f"block{l}")
        yield "final_norm.gain", self.final_norm_g
        yield "final_norm.bias", self.final_norm_b
        yield from self.heads.named("heads")

    def parameters(self) -> list[Parameter]:
        params = [Parameter(name, t) for name, t in self.named_tensors()]
        tz.check_unique_names(params)
        return params

    def num_parameters(self) -> int:
        return sum(t.data.size for _, t in self.named_tensors())

    def to_dtype(self, dtype) -> "ModelWeights":
        clone = init_weights(self.config, seed=0, dtype=dtype)
        for (_, src), (_, dst) in zip(self.named_tensors(), clone.named_tensors()):
            dst.data[:] = src.data.astype(dtype)
        return clone

    def copy(self) -> "ModelWeights":
        return self.to_dtype(self.blocks[0].norm1_g.data.dtype)


def init_weights(cfg: ModelConfig, seed: int, dtype=np.float32) -> ModelWeights:
    """Deterministic initial weights: fan-in scaled uniform for linear and
    conv kernels, zero biases and bias tables, unit normalisation gains."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    c = cfg.embed_dim
    att_cfg = AttentionConfig(cfg.kernel_size, 1, cfg.num_heads)

    def ones(n):
        return Tensor(np.ones(n, dtype=dtype))

    def zeros(n):
        return Tensor(np.zeros(n, dtype=dtype))

    def linear(nin, nout):
        bound = 1.0 / np.sqrt(nin)
        return Tensor(rng.uniform(-bound, bound, (nin, nout)).astype(dtype))

    front = init_frontend_weights(cfg.bands, cfg.conv_channels,
                                  cfg.pool_widths, c, rng, dtype)
    hidden = cfg.mlp_hidden_factor * c
    blocks = []
    for _ in range(cfg.num_blocks):
        blocks.append(BlockWeights(
            norm1_g=ones(c), norm1_b=zeros(c),
            dina1=init_attention_weights(c, att_cfg, rng, dtype=dtype),
            dina2=(init_attention_weights(c, att_cfg, rng, dtype=dtype)
                   if cfg.use_second_dina else None),
            norm2_g=ones(2 * c), norm2_b=zeros(2 * c),
            mlp_w1=linear(2 * c, hidden), mlp_b1=zeros(hidden),
            mlp_w2=linear(hidden, c), mlp_b2=zeros(c),
            norm3_g=ones(c) if cfg.use_instrument_attention else None,
            norm3_b=zeros(c) if cfg.use_instrument_attention else None,
            inst=(init_attention_weights(c, att_cfg, rng, two_d=True, dtype=dtype)
                  if cfg.use_instrument_attention else None)))
    heads = HeadWeights(
        beat_w=linear(c, 1), beat_b=zeros(1),
        downbeat_w=linear(c, 1), downbeat_b=zeros(1),
        boundary_w=linear(c, 1), boundary_b=zeros(1),
        label_w=linear(c, len(cfg.label_vocab)), label_b=zeros(len(cfg.label_vocab)))
    return ModelWeights(config=replace(cfg), frontend=front, blocks=blocks,
                        final_norm_g=ones(c), final_norm_b=zeros(c), heads=heads)


def param_count(cfg: ModelConfig) -> int:
    """Exact number of scalar parameters implied by a configuration."""
    return init_weights(cfg, seed=0).num_parameters()


def param_count_by_group(cfg: ModelConfig) -> dict[str, int]:
    """Parameter totals keyed by coarse subsystem (frontend/attention/mlp/...)."""
    groups: dict[str, int] = {}
    for name, t in init_weights(cfg, seed=0).named_tensors():
        if name.startswith("frontend"):
            key = "frontend"
        elif ".dina" in name or ".inst" in name:
            key = "attention"
        elif ".mlp." in name:
            key = "mlp"
        elif name.startswith("heads"):
            key = "heads"
        else:
            key = "norm"
        groups[key] = groups.get(key, 0) + t.data.size
    return groups


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------

@dataclass
class FrameActivations:
    """Per-frame probabilities for the four tasks."""

    beat: np.ndarray                        # [T]
    downbeat: np.ndarray                    # [T]
    boundary: np.ndarray                    # [T]
    labels: np.ndarray                      # [T, vocab]
    fps: float

    def validate(self) -> None:
        for name in ("beat", "downbeat", "boundary"):
            arr = getattr(self, name)
            if ((arr < 0) | (arr > 1)).any():
                raise InputError(f"{name} activation outside [0, 1]")
        if ((self.labels < 0) | (self.labels > 1)).any():
            raise InputError("label distribution outside [0, 1]")
        if np.abs(self.labels.sum(axis=-1) - 1.0).max() > 1e-5:
            raise InputError("label rows must sum to 1")

    @property
    def num_frames(self) -> int:
        return self.beat.shape[0]


def transformer_module_forward(x: Tensor, bw: BlockWeights, l: int,
                               cfg: ModelConfig, training: bool = False,
                               rng: np.random.Generator | None = None) -> Tensor:
    """One transformer module over ``[S, T, C]``."""
    d1, d2 = cfg.block_dilations(l)
    normed = tz.layer_norm(x, bw.norm1_g, bw.norm1_b)
    cfg1 = AttentionConfig(cfg.kernel_size, d1, cfg.num_heads)
    a = na1d(normed, bw.dina1, cfg1, cfg.dropout_attn, training, rng)
    branch_a = x + tz.dropout(a, cfg.dropout_skip, training, rng)
    if cfg.use_second_dina and bw.dina2 is not None:
        cfg2 = AttentionConfig(cfg.kernel_size, d2, cfg.num_heads)
        b = na1d(normed, bw.dina2, cfg2, cfg.dropout_attn, training, rng)
        branch_b = x + tz.dropout(b, cfg.dropout_skip, training, rng)
    else:
        branch_b = x
    u = tz.concat([branch_a, branch_b], axis=-1)            # [S, T, 2C]

    h = tz.layer_norm(u, bw.norm2_g, bw.norm2_b)
    h = tz.matmul(h, bw.mlp_w1) + bw.mlp_b1
    h = tz.gelu(h)
    h = tz.dropout(h, cfg.dropout_mlp, training, rng)
    h = tz.matmul(h, bw.mlp_w2) + bw.mlp_b2
    y = x + tz.dropout(h, cfg.dropout_skip, training, rng)

    if cfg.use_instrument_attention and bw.inst is not None:
        grid_cfg = AttentionConfig(cfg.kernel_size, 1, cfg.num_heads)
        g = tz.layer_norm(y, bw.norm3_g, bw.norm3_b)
        g = na2d(g, bw.inst, grid_cfg, cfg.dropout_attn, training, rng)
        y = y + tz.dropout(g, cfg.dropout_skip, training, rng)
    return y


def forward_logits(values: np.ndarray, weights: ModelWeights, cfg: ModelConfig,
                   training: bool = False,
                   rng: np.random.Generator | None = None) -> dict[str, Tensor]:
    """Raw head outputs from spectrogram values ``[S, T, bands]``."""
    x = np.asarray(values, dtype=weights.final_norm_g.data.dtype)
    if x.ndim != 3 or x.shape[1] == 0:
        raise InputError(f"expected non-empty [S, T, bands], got {x.shape}")
    if not cfg.use_demix:
        x = x.sum(axis=0, keepdims=True)
    h = frontend_forward(Tensor(x), weights.frontend, cfg.pool_widths,
                         cfg.dropout_conv, training, rng)
    for l, bw in enumerate(weights.blocks):
        h = transformer_module_forward(h, bw, l, cfg, training, rng)
    h = h.mean(axis=0)                                       # [T, C]
    h = tz.layer_norm(h, weights.final_norm_g, weights.final_norm_b)
    hd = weights.heads
    t = h.shape[0]
    return {
        "beat": (tz.matmul(h, hd.beat_w) + hd.beat_b).reshape(t),
        "downbeat": (tz.matmul(h, hd.downbeat_w) + hd.downbeat_b).reshape(t),
        "boundary": (tz.matmul(h, hd.boundary_w) + hd.boundary_b).reshape(t),
        "labels": tz.matmul(h, hd.label_w) + hd.label_b,
    }


def model_forward(spec: StemSpectrogram, weights: ModelWeights,
                  cfg: ModelConfig) -> FrameActivations:
    """Inference: spectrogram in, per-frame probabilities out."""
    spec.validate()
    if abs(spec.fps - cfg.fps) > 1e-6:
        raise InputError(f"spectrogram fps {spec.fps} != model fps {cfg.fps}")
    if cfg.use_demix and spec.num_stems != cfg.num_stems:
        raise InputError(
            f"model expects {cfg.num_stems} stems, got {spec.num_stems}")
    with tz.no_grad():
        logits = forward_logits(spec.values, weights, cfg, training=False)
        acts = FrameActivations(
            beat=tz.sigmoid(logits["beat"]).data.astype(np.float32),
            downbeat=tz.sigmoid(logits["downbeat"]).data.astype(np.float32),
            boundary=tz.sigmoid(logits["boundary"]).data.astype(np.float32),
            labels=tz.softmax(logits["labels"], axis=-1).data.astype(np.float32),
            fps=cfg.fps)
    acts.validate()
    return acts
