"""
Transformer vector field v(z, t | y).

Local controls are concatenated to the noisy latent on the channel axis; the style
tag reaches every block through cross-attention over a few learned tokens. Blocks
are paired U-Net style: the second half concatenates the output of its mirror block
and projects back to the model width.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from musicflow.autodiff import ops
from musicflow.autodiff.array import Array
from musicflow.autodiff.checkpoint import load_arrays
from musicflow.model.conditioning import ConditionEncoder, ConditionSet, assemble_input
from musicflow.model.layers import Attention, FeedForward, LayerNorm, Linear, Parameters
from musicflow.utils.errors import NonFiniteError, ShapeError
from musicflow.utils.settings import D_CRD, D_MLD, LOCAL_TOKENS, N_ENC, N_STYLES, Conditioning
from musicflow.utils.typing import TYPE_CHECKING

if TYPE_CHECKING:
    from musicflow.utils.config import RunConfig
    from musicflow.utils.typing import FloatArray

logger = logging.getLogger(__name__)

CONFIG_KEY = "model_config"


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 4
    heads: int = 4
    model_dim: int = 128
    ffn_dim: int = 512
    conv_pos_kernel: int = 15
    style_tokens: int = 2
    cross_attention_every: int = 1
    conditioning: Conditioning = Conditioning.CONCAT
    n_enc: int = N_ENC
    d_crd: int = D_CRD
    d_mld: int = D_MLD
    n_styles: int = N_STYLES

    def __post_init__(self) -> None:
        if self.layers < 2 or self.layers % 2:
            raise ValueError(f"layers must be even and at least 2, got {self.layers}")
        if self.model_dim % self.heads:
            raise ValueError(f"model_dim {self.model_dim} is not divisible by heads {self.heads}")
        if self.conv_pos_kernel % 2 == 0:
            raise ValueError(f"conv_pos_kernel must be odd, got {self.conv_pos_kernel}")
        if self.cross_attention_every < 1:
            raise ValueError(f"cross_attention_every must be at least 1, got {self.cross_attention_every}")
        object.__setattr__(self, "conditioning", Conditioning(self.conditioning))

    @classmethod
    def from_run_config(cls, cfg: RunConfig) -> ModelConfig:
        shared = {f.name for f in fields(cls)} & {f.name for f in fields(cfg)}
        return cls(**{name: getattr(cfg, name) for name in shared})

    @property
    def alibi_slopes(self) -> np.ndarray:
        """Geometric per-head slopes 2^(-8h/H), h = 1..H."""
        return 2.0 ** (-8.0 * np.arange(1, self.heads + 1) / self.heads)

    def cross_attends(self, index: int) -> bool:
        return index % self.cross_attention_every == 0

    # Persistence
    def to_array(self) -> np.ndarray:
        values = asdict(self)
        values["conditioning"] = list(Conditioning).index(self.conditioning)
        return np.array([values[f.name] for f in fields(self)], dtype=np.float32)

    @classmethod
    def from_array(cls, header: np.ndarray) -> ModelConfig:
        values = {f.name: int(v) for f, v in zip(fields(cls), header)}
        values["conditioning"] = list(Conditioning)[values["conditioning"]]
        return cls(**values)


def alibi_bias(n_frames: int, heads: int | None = None, slopes: np.ndarray | None = None) -> np.ndarray:
    """
    Symmetric linear attention bias, bias[h, i, j] = -slope_h * |i - j|.

    Pass either the head count (standard slopes) or explicit slopes.
    """
    if n_frames < 1:
        raise ValueError(f"Sequence length must be positive, got {n_frames}")
    if slopes is None:
        if heads is None:
            raise ValueError("alibi_bias needs heads or slopes")
        slopes = 2.0 ** (-8.0 * np.arange(1, heads + 1) / heads)
    positions = np.arange(n_frames)
    distance = np.abs(positions[:, None] - positions[None, :])
    return -np.asarray(slopes, dtype=np.float64)[:, None, None] * distance[None, :, :]


def conv_positional(x: Array, weight: Array) -> Array:
    """Learned depthwise convolution over frames, added to its input."""
    return ops.add(x, ops.conv1d_depthwise(x, weight))


def timestep_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    """(B, dim) sinusoidal embedding of flow times in [0, 1]."""
    half = dim // 2
    freqs = np.exp(-math.log(10_000.0) * np.arange(half) / max(half - 1, 1))
    angles = 1000.0 * np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(angles), np.cos(angles)], axis=1)
    if dim % 2:
        emb = np.pad(emb, ((0, 0), (0, 1)))
    return emb


class Block:
    """Pre-norm transformer block: self-attention, optional cross-attention, feed-forward."""

    def __init__(self, params: Parameters, name: str, cfg: ModelConfig, cross: bool) -> None:
        self.norm_self = LayerNorm(params, f"{name}.norm_self", cfg.model_dim)
        self.self_attn = Attention(params, f"{name}.self_attn", cfg.model_dim, cfg.heads)
        self.norm_cross = LayerNorm(params, f"{name}.norm_cross", cfg.model_dim) if cross else None
        self.cross_attn = Attention(params, f"{name}.cross_attn", cfg.model_dim, cfg.heads) if cross else None
        self.norm_ffn = LayerNorm(params, f"{name}.norm_ffn", cfg.model_dim)
        self.ffn = FeedForward(params, f"{name}.ffn", cfg.model_dim, cfg.ffn_dim)

    def __call__(self, x: Array, memory: Array, bias: np.ndarray) -> Array:
        x = ops.add(x, self.self_attn(self.norm_self(x), bias=bias))
        if self.cross_attn is not None and self.norm_cross is not None:
            x = ops.add(x, self.cross_attn(self.norm_cross(x), memory=memory))
        return ops.add(x, self.ffn(self.norm_ffn(x)))


class VectorField:
    def __init__(self, cfg: ModelConfig, seed: int = 0) -> None:
        self.cfg = cfg
        self.params = Parameters(seed)
        params, d = self.params, cfg.model_dim

        # Conditions
        self.encoder = ConditionEncoder(params, cfg.n_enc, cfg.d_crd, cfg.d_mld)
        concat = cfg.conditioning is Conditioning.CONCAT
        self.input_proj = Linear(params, "input_proj", cfg.n_enc + (self.encoder.width if concat else 0), d)
        self.local_proj = None if concat else Linear(params, "local_proj", self.encoder.width, d, bias=False)
        self.style_table = params.create("style_table", (cfg.n_styles, cfg.style_tokens * d), std=0.02)

        # Positions and time
        self.conv_pos = params.create("conv_pos", (cfg.conv_pos_kernel, d), std=0.02)
        self.time_in = Linear(params, "time.in", d, d)
        self.time_out = Linear(params, "time.out", d, d)

        # Blocks
        half = cfg.layers // 2
        self.down = [Block(params, f"down{i}", cfg, cfg.cross_attends(i)) for i in range(half)]
        self.up = [Block(params, f"up{i}", cfg, cfg.cross_attends(half + i)) for i in range(half)]
        self.skip_proj = [Linear(params, f"skip{i}", 2 * d, d) for i in range(half)]

        self.final_norm = LayerNorm(params, "final_norm", d)
        self.output_proj = Linear(params, "output_proj", d, cfg.n_enc)
        logger.debug(f"VectorField: {len(params)} arrays, {params.count()} parameters")

    @property
    def blocks(self) -> list[Block]:
        return self.down + self.up

    def time_embedding(self, t: np.ndarray, n_frames: int) -> Array:
        emb = Array(timestep_embedding(t, self.cfg.model_dim).astype(self.params.dtype))
        hidden = self.time_out(ops.gelu(self.time_in(emb)))
        batch = hidden.shape[0]
        return ops.expand(ops.reshape(hidden, (batch, 1, self.cfg.model_dim)), (batch, n_frames, self.cfg.model_dim))

    def memory(self, cs: ConditionSet) -> Array:
        """Cross-attention tokens: style tokens (zero when dropped), then pooled local tokens."""
        d = self.cfg.model_dim
        tokens = ops.reshape(ops.embedding(self.style_table, cs.style), (cs.batch, self.cfg.style_tokens, d))
        mask = np.broadcast_to(cs.style_present[:, None, None], tokens.shape).astype(self.params.dtype)
        tokens = ops.mul(tokens, Array(mask))
        if self.local_proj is None:
            return tokens
        local = self.local_proj(ops.concat(cs.local_arrays(), axis=-1))
        pooled = ops.mean_pool(local, min(LOCAL_TOKENS, cs.n_frames), axis=-2)
        return ops.concat([tokens, pooled], axis=1)

    def __call__(self, z_t: Array | FloatArray, t: float | FloatArray, cs: ConditionSet) -> Array:
        """
        Args:
            z_t: (B, T, N_enc) noisy latents.
            t: Flow time per batch element (or one shared scalar), within [0, 1].
            cs: Conditions for the same batch.
        """
        z = z_t if isinstance(z_t, Array) else Array(np.asarray(z_t, dtype=self.params.dtype))
        if z.ndim != 3 or z.shape[-1] != self.cfg.n_enc:
            raise ShapeError("VectorField", z.shape, (cs.batch, cs.n_frames, self.cfg.n_enc))
        batch, n_frames, _ = z.shape
        times = np.broadcast_to(np.asarray(t, dtype=np.float64), (batch,))
        if np.any(times < 0.0) or np.any(times > 1.0):
            raise ValueError(f"Flow time must lie in [0, 1], got {times}")

        x = assemble_input(z, cs) if self.local_proj is None else z
        h = self.input_proj(x)
        h = conv_positional(h, self.conv_pos)
        h = ops.add(h, self.time_embedding(times, n_frames))

        memory = self.memory(cs)
        bias = alibi_bias(n_frames, slopes=self.cfg.alibi_slopes)
        skips = []
        for block in self.down:
            h = block(h, memory, bias)
            skips.append(h)
        for block, proj in zip(self.up, self.skip_proj):
            h = proj(ops.concat([h, skips.pop()], axis=-1))
            h = block(h, memory, bias)

        out = self.output_proj(self.final_norm(h))
        if not np.all(np.isfinite(out.data)):
            raise NonFiniteError("Vector field produced non-finite values")
        return out

    def predict(self, z_t: FloatArray, t: float | FloatArray, cs: ConditionSet) -> FloatArray:
        return self(z_t, t, cs).data.astype(np.float64)

    # Persistence
    def save(self, path: Path) -> Path:
        self.params.check_finite()
        return self.params.save(path, extra={CONFIG_KEY: self.cfg.to_array()})

    @classmethod
    def load(cls, path: Path) -> VectorField:
        arrays = load_arrays(path)
        if CONFIG_KEY not in arrays:
            raise ValueError(f"{path} is not a model checkpoint")
        model = cls(ModelConfig.from_array(arrays[CONFIG_KEY]))
        model.params.load_state(arrays)
        return model
