"""Video backbone: patch embedding, spatial Bi-Mamba stage, temporal causal stage, head.

Data flow for a clip of shape (B, 3, T, H, W)::

    patches  (B, T, P, 3 k k)    non-overlapping k x k patches per frame
    tokens   (B, T, P, C)        linear projection + p_s[p] + p_t[t]
    spatial  (B*T, P, C)         M Bi-Mamba blocks, each frame on its own
    temporal (B, T*P, C)         n causal blocks over frame-major tokens
    features (B, T, C)           final norm, mean over the frame's P tokens
    logits   (B, T, out)         MLP head
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields

import numpy as np

from streamssm import autograd as ag
from streamssm.autograd import Tensor
from streamssm.blocks import BiMambaBlock, MambaBlock, MlpHead, block_param_count
from streamssm.nn import Linear, Module, RMSNorm, parameter

TEMPORAL_MODES = ("causal", "bidirectional")
DTYPES = {"float32": np.float32, "float64": np.float64}


class ConfigError(ValueError):
    """Invalid or inconsistent model configuration."""


@dataclass
class BackboneConfig:
    """Model hyperparameters.

    ``max_frames`` is only a hint for callers: the temporal embedding is
    generated on the fly, so any clip length is accepted and the hint never
    influences weights, outputs, or stream state.
    """

    frame_h: int = 32
    frame_w: int = 32
    patch_k: int = 8
    in_chans: int = 3
    channels: int = 64
    m_spatial: int = 2
    n_temporal: int = 2
    state_dim: int = 16
    expand: int = 2
    conv_k: int = 4
    head_hidden: int = 64
    head_out_dim: int = 1
    max_frames: int = 8
    temporal: str = "causal"
    dtype: str = "float32"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.patch_k < 1 or self.frame_h % self.patch_k or self.frame_w % self.patch_k:
            raise ConfigError(
                f"frame {self.frame_h}x{self.frame_w} is not divisible by patch_k={self.patch_k}"
            )
        for name in ("m_spatial", "n_temporal", "channels", "state_dim", "expand", "conv_k", "in_chans"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.temporal not in TEMPORAL_MODES:
            raise ConfigError(f"temporal must be one of {TEMPORAL_MODES}, got {self.temporal!r}")
        if self.dtype not in DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(DTYPES)}, got {self.dtype!r}")

    @property
    def grid_h(self) -> int:
        return self.frame_h // self.patch_k

    @property
    def grid_w(self) -> int:
        return self.frame_w // self.patch_k

    @property
    def patches(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def patch_dim(self) -> int:
        return self.in_chans * self.patch_k * self.patch_k

    @property
    def np_dtype(self):
        return DTYPES[self.dtype]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> BackboneConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def replace(self, **changes) -> BackboneConfig:
        return BackboneConfig.from_dict({**self.to_dict(), **changes})

    def fingerprint(self) -> bytes:
        """SHA-256 of the canonical JSON of every field that shapes weights or state."""
        data = self.to_dict()
        data.pop("max_frames")
        canon = json.dumps(data, sort_keys=True, separators=(",", ":")).encode("utf-8")
        return hashlib.sha256(canon).digest()


@dataclass
class TokenGrid:
    """Embedded video tokens with (batch, time, patches, channels) bookkeeping."""

    data: Tensor

    def __post_init__(self):
        if self.data.ndim != 4:
            raise ValueError(f"TokenGrid expects (B, T, P, C), got shape {self.data.shape}")

    @property
    def batch(self) -> int:
        return self.data.shape[0]

    @property
    def time(self) -> int:
        return self.data.shape[1]

    @property
    def patches(self) -> int:
        return self.data.shape[2]

    @property
    def channels(self) -> int:
        return self.data.shape[3]

    def check(self, config: BackboneConfig) -> None:
        if self.patches != config.patches:
            raise ValueError(f"token grid has {self.patches} patches, config implies {config.patches}")
        if not np.isfinite(self.data.data).all():
            raise ValueError("token grid contains non-finite values")


def check_video(video: np.ndarray, config: BackboneConfig) -> None:
    if video.ndim != 5:
        raise ValueError(f"video must be (B, {config.in_chans}, T, H, W), got shape {video.shape}")
    _, c, t, h, w = video.shape
    if c != config.in_chans or t < 1:
        raise ValueError(f"video has {c} channels and {t} frames; expected {config.in_chans} and >= 1")
    if h % config.patch_k or w % config.patch_k:
        raise ValueError(f"frame {h}x{w} is not divisible by patch_k={config.patch_k}")
    if (h, w) != (config.frame_h, config.frame_w):
        raise ValueError(f"frame {h}x{w} does not match config {config.frame_h}x{config.frame_w}")
    if not np.isfinite(video).all():
        raise ValueError("video contains non-finite pixels")


def extract_patches(video: np.ndarray, patch_k: int) -> np.ndarray:
    """(B, c, T, H, W) -> (B, T, P, c*k*k); patches row-major, vectors (c, ky, kx)."""
    b, c, t, h, w = video.shape
    if h % patch_k or w % patch_k:
        raise ValueError(f"frame {h}x{w} is not divisible by patch_k={patch_k}")
    gh, gw = h // patch_k, w // patch_k
    x = video.reshape(b, c, t, gh, patch_k, gw, patch_k)
    x = x.transpose(0, 2, 3, 5, 1, 4, 6)
    return x.reshape(b, t, gh * gw, c * patch_k * patch_k)


def assemble_patches(patches: np.ndarray, frame_h: int, frame_w: int, patch_k: int) -> np.ndarray:
    """Inverse of :func:`extract_patches`."""
    b, t, p, d = patches.shape
    c = d // (patch_k * patch_k)
    gh, gw = frame_h // patch_k, frame_w // patch_k
    if p != gh * gw or c * patch_k * patch_k != d:
        raise ValueError(f"patches {patches.shape} do not tile a {frame_h}x{frame_w} frame with k={patch_k}")
    x = patches.reshape(b, t, gh, gw, c, patch_k, patch_k)
    x = x.transpose(0, 4, 1, 2, 5, 3, 6)
    return x.reshape(b, c, t, frame_h, frame_w)


def patchify(video: np.ndarray, proj: Linear, config: BackboneConfig) -> TokenGrid:
    """Split frames into patches and project each patch to ``channels``."""
    check_video(video, config)
    patches = extract_patches(video.astype(config.np_dtype, copy=False), config.patch_k)
    return TokenGrid(proj(Tensor(patches)))


def depatchify(tokens: TokenGrid, proj: Linear, config: BackboneConfig) -> np.ndarray:
    """Undo :func:`patchify` for an invertible (square, bias-aware) projection."""
    weight = proj.weight.data
    if weight.shape[0] != weight.shape[1]:
        raise ValueError("depatchify needs a square projection (channels == patch_dim)")
    data = tokens.data.data
    if proj.bias is not None:
        data = data - proj.bias.data
    patches = np.linalg.solve(weight.T, data.reshape(-1, data.shape[-1]).T).T
    return assemble_patches(patches.reshape(data.shape), config.frame_h, config.frame_w, config.patch_k)


def sinusoid_embedding(frame_index, channels: int, dtype=np.float64) -> np.ndarray:
    """Fixed sinusoid table: even channels sin(t w_i), odd channels cos(t w_i).

    ``w_i = 10000^(-2i / channels)``; the row for frame ``t`` depends only on
    ``t``, so embeddings for any prefix of frames agree across clip lengths.
    """
    t = np.asarray(frame_index, dtype=np.float64).reshape(-1, 1)
    i = np.arange((channels + 1) // 2, dtype=np.float64)
    angle = t * np.power(10000.0, -2.0 * i / channels)
    table = np.empty((t.shape[0], channels))
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle[:, : channels // 2])
    return table.astype(dtype)


def embed(tokens: TokenGrid, p_s: Tensor, frame_offset: int = 0) -> TokenGrid:
    """Add the spatial table ``p_s`` (P, C) and the temporal sinusoid of absolute frame index."""
    if tuple(p_s.shape) != (tokens.patches, tokens.channels):
        raise ValueError(f"p_s shape {p_s.shape} != {(tokens.patches, tokens.channels)}")
    p_t = sinusoid_embedding(np.arange(frame_offset, frame_offset + tokens.time), tokens.channels, tokens.data.dtype)
    return TokenGrid(tokens.data + p_s + p_t[:, None, :])


@dataclass
class BackboneOutput:
    tokens: Tensor  # (B, T, P, C) after the final norm
    features: Tensor  # (B, T, C) per-frame pooled features
    logits: Tensor  # (B, T, head_out_dim)


class Backbone(Module):
    """The full video model; ``forward_parallel`` is the training-time evaluation."""

    def __init__(self, config: BackboneConfig, rng: np.random.Generator | int | None = None):
        config.validate()
        rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        dt = config.np_dtype
        self._config = config
        blk = dict(state_dim=config.state_dim, expand=config.expand, conv_k=config.conv_k, rng=rng, dtype=dt)
        self.patch_embed = Linear(config.patch_dim, config.channels, rng, dtype=dt)
        self.pos_spatial = parameter((0.02 * rng.standard_normal((config.patches, config.channels))).astype(dt))
        self.spatial = [BiMambaBlock(config.channels, **blk) for _ in range(config.m_spatial)]
        temporal_cls = MambaBlock if config.temporal == "causal" else BiMambaBlock
        self.temporal = [temporal_cls(config.channels, **blk) for _ in range(config.n_temporal)]
        self.norm = RMSNorm(config.channels, dtype=dt)
        self.head = MlpHead(config.channels, config.head_hidden, config.head_out_dim, rng, dtype=dt)

    @property
    def config(self) -> BackboneConfig:
        return self._config

    def tokens_in(self, video: np.ndarray, frame_offset: int = 0, mask=None, mask_token=None) -> TokenGrid:
        """Patchify and embed; masked positions take ``mask_token`` before embedding.

        Args:
            video: (B, 3, T, H, W) pixels.
            frame_offset: absolute index of the first frame (drives p_t).
            mask: optional boolean (T, P) or (B, T, P) array, true where masked.
            mask_token: (C,) tensor used at masked positions.
        """
        grid = patchify(video, self.patch_embed, self._config)
        if mask is not None:
            if mask_token is None:
                raise ValueError("a mask needs a mask_token")
            mask = np.broadcast_to(np.asarray(mask, dtype=bool), grid.data.shape[:3])
            grid = TokenGrid(ag.where(mask[..., None], mask_token, grid.data))
        return embed(grid, self.pos_spatial, frame_offset)

    def spatial_stage(self, grid: TokenGrid) -> TokenGrid:
        b, t, p, c = grid.data.shape
        x = grid.data.reshape(b * t, p, c)
        for block in self.spatial:
            x = block(x)
        return TokenGrid(x.reshape(b, t, p, c))

    def temporal_stage(self, grid: TokenGrid, token_order: str = "frame-major") -> TokenGrid:
        """Run the temporal blocks over the flattened token sequence.

        ``token_order="patch-major"`` feeds patch 0 of every frame first; it
        exists only to demonstrate that this order breaks causality.
        """
        b, t, p, c = grid.data.shape
        x = grid.data
        if token_order == "patch-major":
            x = x.transpose(0, 2, 1, 3)
        elif token_order != "frame-major":
            raise ValueError(f"unknown token order {token_order!r}")
        seq = x.reshape(b, t * p, c)
        for block in self.temporal:
            seq = block(seq)
        if token_order == "patch-major":
            return TokenGrid(seq.reshape(b, p, t, c).transpose(0, 2, 1, 3))
        return TokenGrid(seq.reshape(b, t, p, c))

    def readout(self, grid: TokenGrid) -> BackboneOutput:
        tokens = self.norm(grid.data)
        features = ag.mean(tokens, axis=2)
        return BackboneOutput(tokens, features, self.head(features))

    def forward_parallel(
        self,
        video: np.ndarray,
        mask=None,
        mask_token: Tensor | None = None,
        token_order: str = "frame-major",
    ) -> BackboneOutput:
        grid = self.tokens_in(video, 0, mask, mask_token)
        return self.readout(self.temporal_stage(self.spatial_stage(grid), token_order))

    def __call__(self, video: np.ndarray) -> BackboneOutput:
        return self.forward_parallel(video)


def build_model(config: BackboneConfig | None = None, seed: int = 0) -> Backbone:
    return Backbone(config or BackboneConfig(), np.random.default_rng(seed))


def count_parameters(config: BackboneConfig) -> int:
    """Closed-form parameter count of :class:`Backbone`."""
    c = config.channels
    per = dict(expand=config.expand, state_dim=config.state_dim, conv_k=config.conv_k)
    spatial = config.m_spatial * block_param_count(c, bidirectional=True, **per)
    temporal = config.n_temporal * block_param_count(c, bidirectional=config.temporal == "bidirectional", **per)
    embed_params = config.patch_dim * c + c + config.patches * c
    head = c * config.head_hidden + config.head_hidden + config.head_hidden * config.head_out_dim + config.head_out_dim
    return embed_params + spatial + temporal + c + head


__all__ = [
    "Backbone",
    "BackboneConfig",
    "BackboneOutput",
    "ConfigError",
    "TokenGrid",
    "assemble_patches",
    "build_model",
    "count_parameters",
    "depatchify",
    "embed",
    "extract_patches",
    "patchify",
    "sinusoid_embedding",
]
