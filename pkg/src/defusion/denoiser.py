"""Conditional noise-prediction U-Net.

The network sees only the noisy difference y_t (3 channels). Conditioning
enters through two zero-initialized adapters, so a freshly initialized
model is exactly independent of both:

  * restoration bridge: a lightweight conv pyramid embeds the LQ image
    into one feature map per encoder level; each encoder residual block
    (and optionally the middle block) modulates its second normalization
    as norm(h)*(1+gamma)+beta, with (gamma, beta) produced per pixel and
    channel by zero-initialized projections. Decoder blocks are never
    modulated.
  * instruction adapter: cross-attention at every attention-bearing
    level; queries are the flattened feature map, keys/values are the
    instruction code tokens, and the output projection starts at zero.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .errors import CheckpointError, ContractViolation, DivergenceError
from .tokenizer import load_state_dict, save_state_dict

DENOISER_SCHEMA = "defusion-denoiser-v1"

MAX_CODE_TOKENS = 4096

# Highest angular frequency of the time features; bounds the embedding's
# Lipschitz constant by |d feat/dt| <= max_freq * sqrt(dim).
TIME_MAX_FREQ = 500.0


@dataclass(frozen=True)
class DenoiserConfig:
    levels: int = 3
    base_channels: int = 32
    channel_multipliers: tuple = (1, 2, 2)
    attention_levels: tuple = (2,)
    time_embed_dim: int = 64
    via_dim: int = 64
    irb_channels: int = 16
    res_blocks: int = 1
    num_heads: int = 4
    code_dim: int = 32            # C_v of the tokenizer feeding this model
    middle_irb: bool = True
    group_norm_groups: int = 8

    def __post_init__(self):
        if self.levels < 2:
            raise ContractViolation("denoiser needs at least 2 levels")
        if len(self.channel_multipliers) != self.levels:
            raise ContractViolation("one channel multiplier per level required")
        if self.via_dim % self.num_heads:
            raise ContractViolation("via_dim must be divisible by the head count")
        for level in self.attention_levels:
            if not (0 <= level < self.levels):
                raise ContractViolation(f"attention level {level} outside [0, {self.levels})")

    @property
    def level_channels(self) -> tuple:
        return tuple(self.base_channels * m for m in self.channel_multipliers)

    @staticmethod
    def tiny() -> "DenoiserConfig":
        """Small enough for float64 finite-difference probing (< 5k params)."""
        return DenoiserConfig(
            levels=2,
            base_channels=2,
            channel_multipliers=(1, 2),
            attention_levels=(1,),
            time_embed_dim=4,
            via_dim=4,
            irb_channels=2,
            num_heads=2,
            code_dim=6,
            group_norm_groups=1,
        )

    @staticmethod
    def toy() -> "DenoiserConfig":
        """Desk-scale config for the end-to-end runs (well under 2M params)."""
        return DenoiserConfig(
            levels=3,
            base_channels=32,
            channel_multipliers=(1, 2, 2),
            attention_levels=(2,),
            time_embed_dim=64,
            via_dim=64,
            irb_channels=16,
            code_dim=32,
        )

    @staticmethod
    def full() -> "DenoiserConfig":
        """ADM-family scale; documented but not trained at desk scale."""
        return DenoiserConfig(
            levels=4,
            base_channels=192,
            channel_multipliers=(1, 2, 3, 4),
            attention_levels=(1, 2, 3),
            time_embed_dim=768,
            via_dim=768,
            irb_channels=64,
            res_blocks=2,
            num_heads=8,
            code_dim=256,
            group_norm_groups=32,
        )


@dataclass
class ConditioningBundle:
    """Conditioning inputs for one prediction batch.

    `lq_model` is a (B,3,H,W) tensor in the model range; `code_tokens` is
    (B, N, C_v) residual instruction tokens. Either may be None. The drop
    flags disable an adapter even when its input is present (ablations).
    """

    lq_model: torch.Tensor | None = None
    code_tokens: torch.Tensor | None = None
    drop_lq: bool = False
    drop_instruction: bool = False

    def validate(self, y_t: torch.Tensor) -> None:
        if self.lq_model is not None:
            if self.lq_model.shape[-2:] != y_t.shape[-2:]:
                raise ContractViolation(
                    f"LQ size {tuple(self.lq_model.shape[-2:])} does not match "
                    f"y_t {tuple(y_t.shape[-2:])}"
                )
        if self.code_tokens is not None:
            if self.code_tokens.shape[1] == 0:
                raise ContractViolation("instruction token count is zero")
            if self.code_tokens.shape[1] > MAX_CODE_TOKENS:
                raise ContractViolation(
                    f"{self.code_tokens.shape[1]} instruction tokens exceed {MAX_CODE_TOKENS}"
                )

    def wants_lq(self) -> bool:
        return self.lq_model is not None and not self.drop_lq

    def wants_instruction(self) -> bool:
        return self.code_tokens is not None and not self.drop_instruction


def _norm(channels: int, preferred_groups: int) -> nn.GroupNorm:
    groups = min(preferred_groups, channels)
    while channels % groups:
        groups -= 1
    return nn.GroupNorm(groups, channels)


def _zero_module(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        nn.init.zeros_(p)
    return module


def sinusoidal_features(t: torch.Tensor, dim: int, max_freq: float = TIME_MAX_FREQ) -> torch.Tensor:
    """Deterministic sin/cos features of t in [0,1]; geometric frequencies."""
    if dim % 2:
        raise ContractViolation("time feature dimension must be even")
    half = dim // 2
    exponents = torch.arange(half, dtype=t.dtype, device=t.device) / max(half - 1, 1)
    freqs = max_freq**exponents  # 1 .. max_freq rad per unit t
    args = t[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class TimeEmbedding(nn.Module):
    """Sinusoidal features followed by a two-layer MLP."""

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.mlp = nn.Sequential(nn.Linear(dim, dim), nn.SiLU(), nn.Linear(dim, dim))

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        if torch.any(t < 0) or torch.any(t > 1):
            raise ContractViolation("t outside [0, 1]")
        return self.mlp(sinusoidal_features(t, self.dim))


class RestorationBridge(nn.Module):
    """Conv pyramid over the LQ image, one feature map per encoder level.

    Biases start at zero so a zero input yields exactly zero features.
    """

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        c = cfg.irb_channels
        self.stem = nn.Conv2d(3, c, 3, padding=1)
        self.stages = nn.ModuleList(
            [
                nn.Sequential(
                    nn.Conv2d(c, c, 3, padding=1),
                    nn.SiLU(),
                    nn.Conv2d(c, c, 3, padding=1),
                )
                for _ in range(cfg.levels)
            ]
        )
        self.downs = nn.ModuleList(
            [nn.Conv2d(c, c, 3, stride=2, padding=1) for _ in range(cfg.levels - 1)]
        )
        for m in self.modules():
            if isinstance(m, nn.Conv2d) and m.bias is not None:
                nn.init.zeros_(m.bias)

    def forward(self, lq_model: torch.Tensor) -> list[torch.Tensor]:
        h = self.stem(lq_model)
        feats = []
        for level, stage in enumerate(self.stages):
            h = stage(h)
            feats.append(h)
            if level < len(self.downs):
                h = self.downs[level](h)
        return feats


class AdaptiveNormZero(nn.Module):
    """norm(h) * (1 + gamma) + beta with zero-initialized producers."""

    def __init__(self, channels: int, irb_channels: int, groups: int):
        super().__init__()
        self.norm = _norm(channels, groups)
        self.producer = _zero_module(nn.Conv2d(irb_channels, 2 * channels, 1))

    def forward(self, h: torch.Tensor, irb_feat: torch.Tensor | None) -> torch.Tensor:
        normed = self.norm(h)
        if irb_feat is None:
            return normed
        if irb_feat.shape[-2:] != h.shape[-2:]:
            raise ContractViolation(
                f"bridge features {tuple(irb_feat.shape[-2:])} misaligned with "
                f"block {tuple(h.shape[-2:])}"
            )
        gamma, beta = self.producer(irb_feat).chunk(2, dim=1)
        return normed * (1.0 + gamma) + beta


class ResBlock(nn.Module):
    def __init__(self, cin, cout, temb_dim, cfg: DenoiserConfig, modulated: bool):
        super().__init__()
        g = cfg.group_norm_groups
        self.norm1 = _norm(cin, g)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb_proj = nn.Linear(temb_dim, cout)
        self.adaln = AdaptiveNormZero(cout, cfg.irb_channels, g) if modulated else None
        self.norm2 = _norm(cout, g) if not modulated else None
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb, irb_feat=None):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb_proj(F.silu(temb))[:, :, None, None]
        if self.adaln is not None:
            h = self.adaln(h, irb_feat)
        else:
            h = self.norm2(h)
        h = self.conv2(F.silu(h))
        return self.skip(x) + h


class SelfAttention(nn.Module):
    def __init__(self, channels, heads, groups):
        super().__init__()
        self.norm = _norm(channels, groups)
        self.qkv = nn.Conv2d(channels, channels * 3, 1)
        self.proj = nn.Conv2d(channels, channels, 1)
        self.heads = heads if channels % heads == 0 else 1

    def forward(self, x):
        b, c, h, w = x.shape
        q, k, v = self.qkv(self.norm(x)).chunk(3, dim=1)

        def heads_view(z):
            return z.reshape(b, self.heads, c // self.heads, h * w).transpose(-2, -1)

        q, k, v = heads_view(q), heads_view(k), heads_view(v)
        attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(c // self.heads), dim=-1)
        out = (attn @ v).transpose(-2, -1).reshape(b, c, h, w)
        return x + self.proj(out)


class InstructionAdapter(nn.Module):
    """Cross-attention from spatial features onto instruction code tokens.

    The output projection is zero-initialized: with no (or dropped)
    instruction the block is exactly the identity.
    """

    def __init__(self, channels: int, cfg: DenoiserConfig):
        super().__init__()
        d = cfg.via_dim
        self.heads = cfg.num_heads
        self.norm = _norm(channels, cfg.group_norm_groups)
        self.to_q = nn.Conv2d(channels, d, 1)
        self.to_k = nn.Linear(cfg.via_dim, d)
        # value and output paths are bias-free so an all-zero (null
        # residual) token set leaves the features exactly unchanged,
        # trained or not
        self.to_v = nn.Linear(cfg.via_dim, d, bias=False)
        self.proj_out = _zero_module(nn.Conv2d(d, channels, 1, bias=False))

    def attention_rows(self, h: torch.Tensor, tokens: torch.Tensor) -> torch.Tensor:
        """Softmax attention matrix (B, heads, H*W, N); rows sum to 1."""
        b, c, hh, ww = h.shape
        d = self.to_q.out_channels
        dh = d // self.heads
        q = self.to_q(self.norm(h)).reshape(b, self.heads, dh, hh * ww).transpose(-2, -1)
        k = self.to_k(tokens).reshape(b, -1, self.heads, dh).permute(0, 2, 1, 3)
        return torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(dh), dim=-1)

    def forward(self, h: torch.Tensor, tokens: torch.Tensor | None) -> torch.Tensor:
        if tokens is None:
            return h
        b, c, hh, ww = h.shape
        attn = self.attention_rows(h, tokens)
        dh = self.to_q.out_channels // self.heads
        v = self.to_v(tokens).reshape(b, -1, self.heads, dh).permute(0, 2, 1, 3)
        out = (attn @ v).transpose(-2, -1).reshape(b, self.to_q.out_channels, hh, ww)
        return h + self.proj_out(out)


class Denoiser(nn.Module):
    """U-Net predicting the injected noise from (y_t, t, conditioning)."""

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        chans = cfg.level_channels
        temb = cfg.time_embed_dim
        self.time_embed = TimeEmbedding(temb)
        self.bridge = RestorationBridge(cfg)
        self.code_proj = nn.Linear(cfg.code_dim, cfg.via_dim, bias=False)
        self.conv_in = nn.Conv2d(3, chans[0], 3, padding=1)

        self.enc_blocks = nn.ModuleList()
        self.enc_attn = nn.ModuleList()
        self.enc_via = nn.ModuleList()
        self.downs = nn.ModuleList()
        for level, cout in enumerate(chans):
            cin = chans[max(level - 1, 0)]
            blocks = nn.ModuleList(
                [
                    ResBlock(cin if i == 0 else cout, cout, temb, cfg, modulated=True)
                    for i in range(cfg.res_blocks)
                ]
            )
            self.enc_blocks.append(blocks)
            has_attn = level in cfg.attention_levels
            self.enc_attn.append(
                SelfAttention(cout, cfg.num_heads, cfg.group_norm_groups) if has_attn else None
            )
            self.enc_via.append(InstructionAdapter(cout, cfg) if has_attn else None)
            self.downs.append(
                nn.Conv2d(cout, cout, 3, stride=2, padding=1) if level < cfg.levels - 1 else None
            )

        cmid = chans[-1]
        self.mid_block1 = ResBlock(cmid, cmid, temb, cfg, modulated=cfg.middle_irb)
        self.mid_attn = SelfAttention(cmid, cfg.num_heads, cfg.group_norm_groups)
        self.mid_via = InstructionAdapter(cmid, cfg)
        self.mid_block2 = ResBlock(cmid, cmid, temb, cfg, modulated=cfg.middle_irb)

        self.dec_blocks = nn.ModuleList()
        self.dec_attn = nn.ModuleList()
        self.dec_via = nn.ModuleList()
        self.ups = nn.ModuleList()
        for level in reversed(range(cfg.levels)):
            cout = chans[level]
            cin_skip = chans[level]
            cin = chans[min(level + 1, cfg.levels - 1)] + cin_skip
            blocks = nn.ModuleList(
                [
                    # decoder blocks are never IRB-modulated
                    ResBlock(cin if i == 0 else cout, cout, temb, cfg, modulated=False)
                    for i in range(cfg.res_blocks)
                ]
            )
            self.dec_blocks.append(blocks)
            has_attn = level in cfg.attention_levels
            self.dec_attn.append(
                SelfAttention(cout, cfg.num_heads, cfg.group_norm_groups) if has_attn else None
            )
            self.dec_via.append(InstructionAdapter(cout, cfg) if has_attn else None)
            self.ups.append(Upsample(cout) if level > 0 else None)

        self.norm_out = _norm(chans[0], cfg.group_norm_groups)
        self.conv_out = nn.Conv2d(chans[0], 3, 3, padding=1)

    @property
    def num_params(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def forward(self, y_t: torch.Tensor, t: torch.Tensor, bundle: ConditioningBundle | None = None):
        bundle = bundle or ConditioningBundle()
        bundle.validate(y_t)
        if y_t.shape[1] != 3:
            raise ContractViolation("y_t must have 3 channels")
        factor = 2 ** (self.cfg.levels - 1)
        if y_t.shape[-1] % factor or y_t.shape[-2] % factor:
            raise ContractViolation(f"spatial size must be divisible by {factor}")
        if t.dim() == 0:
            t = t.expand(y_t.shape[0])

        temb = self.time_embed(t)
        irb_feats = self.bridge(bundle.lq_model) if bundle.wants_lq() else None
        tokens = (
            self.code_proj(bundle.code_tokens) if bundle.wants_instruction() else None
        )

        h = self.conv_in(y_t)
        skips = []
        for level in range(self.cfg.levels):
            feat = irb_feats[level] if irb_feats is not None else None
            for block in self.enc_blocks[level]:
                h = block(h, temb, feat)
            if self.enc_attn[level] is not None:
                h = self.enc_attn[level](h)
                h = self.enc_via[level](h, tokens)
            skips.append(h)
            if self.downs[level] is not None:
                h = self.downs[level](h)

        mid_feat = irb_feats[-1] if (irb_feats is not None and self.cfg.middle_irb) else None
        h = self.mid_block1(h, temb, mid_feat)
        h = self.mid_attn(h)
        h = self.mid_via(h, tokens)
        h = self.mid_block2(h, temb, mid_feat)

        for i, level in enumerate(reversed(range(self.cfg.levels))):
            h = torch.cat([h, skips[level]], dim=1)
            for block in self.dec_blocks[i]:
                h = block(h, temb)
            if self.dec_attn[i] is not None:
                h = self.dec_attn[i](h)
                h = self.dec_via[i](h, tokens)
            if self.ups[i] is not None:
                h = self.ups[i](h)

        out = self.conv_out(F.silu(self.norm_out(h)))
        if not torch.isfinite(out).all():
            raise DivergenceError("denoiser produced non-finite activations")
        return out


class Upsample(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2.0, mode="nearest"))


def predict_eps(
    model: Denoiser, y_t: torch.Tensor, t: torch.Tensor | float, bundle: ConditioningBundle | None = None
) -> torch.Tensor:
    """Validated noise prediction; deterministic in eval mode."""
    if not torch.is_tensor(t):
        t = torch.full((y_t.shape[0],), float(t), dtype=y_t.dtype)
    with torch.no_grad():
        model.eval()
        return model(y_t, t, bundle)


def irb_features(model: Denoiser, lq_model: torch.Tensor) -> list[torch.Tensor]:
    with torch.no_grad():
        return model.bridge(lq_model)


# ----------------------------------------------------------------------
# Checkpoints
# ----------------------------------------------------------------------

def save_denoiser(directory: str | Path, model: Denoiser, step: int = 0, extra: dict | None = None) -> None:
    header = {
        "schema": DENOISER_SCHEMA,
        "config": asdict(model.cfg),
        "step": int(step),
    }
    if extra:
        header["extra"] = extra
    save_state_dict(Path(directory), model.state_dict(), header)


def load_denoiser(directory: str | Path) -> tuple[Denoiser, dict]:
    state, header = load_state_dict(Path(directory), DENOISER_SCHEMA)
    cfg = denoiser_config_from_dict(header["config"])
    model = Denoiser(cfg)
    model.load_state_dict(state)
    model.eval()
    return model, header


def denoiser_config_from_dict(d: dict) -> DenoiserConfig:
    d = dict(d)
    for key in ("channel_multipliers", "attention_levels"):
        d[key] = tuple(d[key])
    return DenoiserConfig(**d)
