"""Vision Transformer encoder used for both the teacher and the student.

Blocks use post-add layer normalization::

    z' = LN(MHSA(z) + z)
    z  = LN(FFN(z') + z')

Note that this differs from the common pre-norm ViT layout; the post-add
placement is deliberate.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

CHECKPOINT_FORMAT = "vithash-checkpoint/1"


class ConfigError(ValueError):
    """Raised for inconsistent model or experiment configuration."""


class CheckpointMismatch(ConfigError):
    """Raised when a checkpoint does not match the expected configuration."""


@dataclass
class EncoderConfig:
    hidden_dim: int = 512
    num_layers: int = 12
    patch_size: int = 16
    num_heads: int | None = None
    image_size: int = 224
    ffn_dim: int | None = None
    frozen_prefix: int | None = None
    in_channels: int = 3

    def __post_init__(self):
        # Unspecified widths follow ViT conventions: one head per 64 dims, 4x FFN.
        if self.num_heads is None:
            self.num_heads = max(1, self.hidden_dim // 64)
        if self.ffn_dim is None:
            self.ffn_dim = 4 * self.hidden_dim
        if self.frozen_prefix is None:
            self.frozen_prefix = self.num_layers // 2
        self.validate()

    def validate(self) -> None:
        for name in ("hidden_dim", "num_layers", "patch_size", "num_heads", "image_size", "ffn_dim"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.image_size % self.patch_size:
            raise ConfigError(
                f"image_size {self.image_size} is not divisible by patch_size {self.patch_size}"
            )
        if self.hidden_dim % self.num_heads:
            raise ConfigError(
                f"hidden_dim {self.hidden_dim} is not divisible by num_heads {self.num_heads}"
            )
        if not 0 <= self.frozen_prefix <= self.num_layers:
            raise ConfigError(
                f"frozen_prefix must lie in [0, {self.num_layers}], got {self.frozen_prefix}"
            )

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def seq_len(self) -> int:
        return self.num_patches + 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def teacher(cls, **overrides) -> "EncoderConfig":
        return cls(**{"hidden_dim": 512, "num_layers": 12, "patch_size": 16, **overrides})

    @classmethod
    def student(cls, **overrides) -> "EncoderConfig":
        return cls(**{"hidden_dim": 256, "num_layers": 6, "patch_size": 16, **overrides})


class EncoderOutput(NamedTuple):
    per_layer: list[torch.Tensor]
    final_class_token: torch.Tensor


class PatchEmbed(nn.Module):
    """Splits images into P x P patches, projects them, prepends the class token
    and adds learned positional embeddings."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        patch_dim = config.patch_size * config.patch_size * config.in_channels
        self.proj = nn.Linear(patch_dim, config.hidden_dim)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, config.hidden_dim))
        self.pos_embed = nn.Parameter(torch.zeros(1, config.seq_len, config.hidden_dim))

    def patchify(self, images: torch.Tensor) -> torch.Tensor:
        cfg = self.config
        if images.ndim != 4:
            raise ConfigError(f"expected images [batch, C, H, W], got shape {tuple(images.shape)}")
        b, c, h, w = images.shape
        if c != cfg.in_channels or h != cfg.image_size or w != cfg.image_size:
            raise ConfigError(
                f"image shape {(c, h, w)} does not match config "
                f"({cfg.in_channels}, {cfg.image_size}, {cfg.image_size})"
            )
        p = cfg.patch_size
        g = h // p
        # [b, c, g, p, g, p] -> [b, g, g, p, p, c] -> [b, N, p*p*c], patches in row-major order
        x = images.reshape(b, c, g, p, g, p).permute(0, 2, 4, 3, 5, 1)
        return x.reshape(b, g * g, p * p * c)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        x = self.proj(self.patchify(images))
        cls = self.cls_token.expand(x.shape[0], -1, -1)
        return torch.cat([cls, x], dim=1) + self.pos_embed


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.num_heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        attn = attn.softmax(dim=-1)
        y = (attn @ v).transpose(1, 2).reshape(b, n, d)
        return self.out(y)


class FeedForward(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class TransformerBlock(nn.Module):
    def __init__(self, dim: int, num_heads: int, ffn_dim: int):
        super().__init__()
        self.attn = MultiHeadSelfAttention(dim, num_heads)
        self.norm1 = nn.LayerNorm(dim)
        self.ffn = FeedForward(dim, ffn_dim)
        self.norm2 = nn.LayerNorm(dim)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if z.ndim != 3:
            raise ConfigError(f"expected tokens [batch, N+1, D], got shape {tuple(z.shape)}")
        z = self.norm1(self.attn(z) + z)
        return self.norm2(self.ffn(z) + z)


class ViTEncoder(nn.Module):
    """Patch embedding followed by ``num_layers`` post-norm Transformer blocks.

    ``forward`` returns every block output so intermediate layers can be
    aligned during distillation.
    """

    def __init__(self, config: EncoderConfig, seed: int | None = None):
        super().__init__()
        self.config = config
        self.embed = PatchEmbed(config)
        self.blocks = nn.ModuleList(
            TransformerBlock(config.hidden_dim, config.num_heads, config.ffn_dim)
            for _ in range(config.num_layers)
        )
        self.reset_parameters(seed)
        set_frozen_prefix(self, config.frozen_prefix)

    def reset_parameters(self, seed: int | None = None) -> None:
        gen = None
        if seed is not None:
            gen = torch.Generator().manual_seed(seed)
        # Linear weights use Xavier-uniform: with post-add LN, std-0.02 weights leave
        # the class token nearly image-independent and training stalls.
        for name, p in self.named_parameters():
            with torch.no_grad():
                if name.endswith("bias"):
                    p.zero_()
                elif ".norm" in name:
                    p.fill_(1.0)
                elif p.ndim == 2:
                    bound = math.sqrt(6.0 / (p.shape[0] + p.shape[1]))
                    p.copy_(torch.rand(p.shape, generator=gen, dtype=p.dtype) * 2 * bound - bound)
                else:
                    _trunc_normal_(p, std=0.02, generator=gen)

    def forward(self, images: torch.Tensor) -> EncoderOutput:
        z = self.embed(images)
        per_layer = []
        for block in self.blocks:
            z = block(z)
            per_layer.append(z)
        return EncoderOutput(per_layer, per_layer[-1][:, 0])


def _trunc_normal_(t: torch.Tensor, std: float, generator: torch.Generator | None) -> None:
    # truncated at +-2 std, resampling by rejection to stay generator-deterministic
    out = torch.empty_like(t)
    flat = out.view(-1)
    filled = 0
    while filled < flat.numel():
        draw = torch.randn(flat.numel(), generator=generator, dtype=t.dtype)
        keep = draw[draw.abs() <= 2.0]
        take = min(keep.numel(), flat.numel() - filled)
        flat[filled:filled + take] = keep[:take]
        filled += take
    t.copy_(out * std)


def patch_embed(encoder: ViTEncoder, images: torch.Tensor) -> torch.Tensor:
    return encoder.embed(images)


def encode(encoder: ViTEncoder, images: torch.Tensor) -> EncoderOutput:
    return encoder(images)


def set_frozen_prefix(encoder: ViTEncoder, k: int) -> ViTEncoder:
    """Freeze the first ``k`` blocks, plus the embeddings when ``k > 0``."""
    num_layers = len(encoder.blocks)
    if not 0 <= k <= num_layers:
        raise ConfigError(f"frozen prefix must lie in [0, {num_layers}], got {k}")
    for p in encoder.embed.parameters():
        p.requires_grad_(k == 0)
    for i, block in enumerate(encoder.blocks):
        for p in block.parameters():
            p.requires_grad_(i >= k)
    encoder.config.frozen_prefix = k
    return encoder


def save_checkpoint(modules: dict[str, nn.Module], configs: dict[str, dict], path: str | Path,
                    extra: dict | None = None) -> None:
    """Write a checkpoint archive.

    The file is a ``torch.save`` zip archive holding a dict with keys
    ``format`` (str), ``config`` (JSON text: one record per named config)
    and ``tensors`` (flat ``"<module>.<param>" -> Tensor`` mapping). ``extra``
    is stored verbatim under ``extra``.
    """
    tensors = {}
    for prefix, module in modules.items():
        for name, value in module.state_dict().items():
            tensors[f"{prefix}.{name}"] = value.detach().cpu().clone()
    payload = {
        "format": CHECKPOINT_FORMAT,
        "config": json.dumps(configs, sort_keys=True),
        "tensors": tensors,
        "extra": extra or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, torch.Tensor], dict]:
    payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointMismatch(f"{path}: unknown checkpoint format {payload.get('format')!r}")
    return json.loads(payload["config"]), payload["tensors"], payload.get("extra", {})


def load_into(modules: dict[str, nn.Module], tensors: dict[str, torch.Tensor]) -> None:
    for prefix, module in modules.items():
        state = {k[len(prefix) + 1:]: v for k, v in tensors.items() if k.startswith(prefix + ".")}
        missing = set(module.state_dict()) - set(state)
        if missing:
            raise CheckpointMismatch(f"checkpoint lacks tensors for {prefix}: {sorted(missing)[:5]}")
        try:
            module.load_state_dict(state)
        except RuntimeError as exc:
            raise CheckpointMismatch(str(exc)) from exc


def check_encoder_config(found: dict, expected: EncoderConfig) -> None:
    want = expected.to_dict()
    # freezing is a training choice, not an architecture property
    diffs = {
        k: (found.get(k), v) for k, v in want.items()
        if k != "frozen_prefix" and found.get(k) != v
    }
    if diffs:
        detail = ", ".join(f"{k}: checkpoint={a} expected={b}" for k, (a, b) in diffs.items())
        raise CheckpointMismatch(f"incompatible encoder config ({detail})")


def save_encoder(encoder: ViTEncoder, path: str | Path) -> None:
    save_checkpoint({"encoder": encoder}, {"encoder": encoder.config.to_dict()}, path)


def load_encoder(path: str | Path, expected: EncoderConfig | None = None) -> ViTEncoder:
    configs, tensors, _ = read_checkpoint(path)
    if "encoder" not in configs:
        raise CheckpointMismatch(f"{path}: no encoder record")
    if expected is not None:
        check_encoder_config(configs["encoder"], expected)
    encoder = ViTEncoder(EncoderConfig(**configs["encoder"]))
    load_into({"encoder": encoder}, tensors)
    return encoder
