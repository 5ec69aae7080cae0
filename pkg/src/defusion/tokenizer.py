"""Degradation tokenizer: a quantization-regularized autoencoder.

Visual instructions are encoded to a latent grid, vector-quantized against
a learned codebook, and decoded back. At inference only the encoder side
is used: instruction codes are taken relative to the clean ("null")
ground by subtracting the two quantized grids, so an undegraded
instruction maps to the exact zero grid.

The VQ loss follows the two-term stop-gradient form: the codebook is
pulled toward encoder outputs while the encoder commits to its nearest
codes, each term an (unsquared) L2 norm of the full difference tensor.
Gradients cross the quantizer through the straight-through estimator.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from . import tensorio
from .errors import CheckpointError, ContractViolation, DivergenceError
from .grounds import VisualInstruction
from .imaging import Image, UNIT

TOKENIZER_SCHEMA = "defusion-tokenizer-v1"


@dataclass(frozen=True)
class TokenizerConfig:
    """Architecture of the quantized autoencoder.

    `channels` has one entry per level; every level except the last halves
    the spatial size, so the latent grid is input_size / 2^(levels-1).
    """

    input_size: int = 224
    channels: tuple = (128, 128, 256, 256, 512)
    res_blocks: int = 2
    attn_levels: tuple = (3, 4)
    embed_dim: int = 256          # C_v
    codebook_size: int = 1024     # K
    group_norm_groups: int = 8

    def __post_init__(self):
        if self.codebook_size < 2:
            raise ContractViolation("codebook needs at least 2 entries")
        factor = 2 ** (len(self.channels) - 1)
        if self.input_size % factor:
            raise ContractViolation(
                f"input size {self.input_size} not divisible by downsampling factor {factor}"
            )

    @property
    def latent_size(self) -> int:
        return self.input_size // (2 ** (len(self.channels) - 1))

    @staticmethod
    def full() -> "TokenizerConfig":
        return TokenizerConfig()

    @staticmethod
    def toy() -> "TokenizerConfig":
        return TokenizerConfig(
            input_size=64,
            channels=(32, 32, 64, 64),
            res_blocks=1,
            attn_levels=(),
            embed_dim=32,
            codebook_size=64,
            group_norm_groups=4,
        )


@dataclass
class DegradationCode:
    """Quantized latent grid with the code indices that produced it."""

    z: np.ndarray                       # (h, w, C_v)
    indices: np.ndarray                 # (h, w) int64
    is_residual: bool = False
    null_indices: np.ndarray | None = None

    @property
    def tokens(self) -> np.ndarray:
        """Flattened (h*w, C_v) token view for cross-attention."""
        h, w, c = self.z.shape
        return self.z.reshape(h * w, c)


# ----------------------------------------------------------------------
# Network blocks
# ----------------------------------------------------------------------

def _norm(channels: int, groups: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(groups, channels), channels)


class ResBlock(nn.Module):
    def __init__(self, cin, cout, groups):
        super().__init__()
        self.norm1 = _norm(cin, groups)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.norm2 = _norm(cout, groups)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x):
        h = self.conv1(F.silu(self.norm1(x)))
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class AttnBlock(nn.Module):
    """Single-head self-attention over the spatial grid."""

    def __init__(self, channels, groups):
        super().__init__()
        self.norm = _norm(channels, groups)
        self.q = nn.Conv2d(channels, channels, 1)
        self.k = nn.Conv2d(channels, channels, 1)
        self.v = nn.Conv2d(channels, channels, 1)
        self.proj = nn.Conv2d(channels, channels, 1)

    def forward(self, x):
        b, c, h, w = x.shape
        hn = self.norm(x)
        q = self.q(hn).reshape(b, c, h * w).transpose(1, 2)
        k = self.k(hn).reshape(b, c, h * w)
        v = self.v(hn).reshape(b, c, h * w).transpose(1, 2)
        attn = torch.softmax(q @ k / math.sqrt(c), dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, c, h, w)
        return x + self.proj(out)


class Encoder(nn.Module):
    def __init__(self, cfg: TokenizerConfig):
        super().__init__()
        ch = cfg.channels
        g = cfg.group_norm_groups
        self.conv_in = nn.Conv2d(3, ch[0], 3, padding=1)
        stages = []
        for level, cout in enumerate(ch):
            cin = ch[max(level - 1, 0)]
            blocks = [ResBlock(cin if i == 0 else cout, cout, g) for i in range(cfg.res_blocks)]
            if level in cfg.attn_levels:
                blocks.append(AttnBlock(cout, g))
            if level < len(ch) - 1:
                blocks.append(nn.Conv2d(cout, cout, 3, stride=2, padding=1))
            stages.append(nn.Sequential(*blocks))
        self.stages = nn.ModuleList(stages)
        self.mid = ResBlock(ch[-1], ch[-1], g)
        self.norm_out = _norm(ch[-1], g)
        self.conv_out = nn.Conv2d(ch[-1], cfg.embed_dim, 1)

    def forward(self, x):
        h = self.conv_in(x)
        for stage in self.stages:
            h = stage(h)
        h = self.mid(h)
        return self.conv_out(F.silu(self.norm_out(h)))


class Decoder(nn.Module):
    def __init__(self, cfg: TokenizerConfig):
        super().__init__()
        ch = cfg.channels
        g = cfg.group_norm_groups
        self.conv_in = nn.Conv2d(cfg.embed_dim, ch[-1], 1)
        self.mid = ResBlock(ch[-1], ch[-1], g)
        stages = []
        for level in reversed(range(len(ch))):
            cout = ch[level]
            cin = ch[min(level + 1, len(ch) - 1)]
            blocks = [ResBlock(cin if i == 0 else cout, cout, g) for i in range(cfg.res_blocks)]
            if level in cfg.attn_levels:
                blocks.append(AttnBlock(cout, g))
            if level > 0:
                blocks.append(Upsample(cout))
            stages.append(nn.Sequential(*blocks))
        self.stages = nn.ModuleList(stages)
        self.norm_out = _norm(ch[0], g)
        self.conv_out = nn.Conv2d(ch[0], 3, 3, padding=1)

    def forward(self, z):
        h = self.mid(self.conv_in(z))
        for stage in self.stages:
            h = stage(h)
        return self.conv_out(F.silu(self.norm_out(h)))


class Upsample(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2.0, mode="nearest"))


class VectorQuantizer(nn.Module):
    """Nearest-neighbor codebook lookup; ties break toward the lowest index."""

    def __init__(self, codebook_size, embed_dim):
        super().__init__()
        self.embedding = nn.Embedding(codebook_size, embed_dim)
        self.embedding.weight.data.uniform_(-1.0 / codebook_size, 1.0 / codebook_size)
        self.register_buffer("usage_counts", torch.zeros(codebook_size, dtype=torch.int64))

    def lookup(self, e):
        """e: (B, C, h, w) -> (z of same shape, indices (B, h, w))."""
        b, c, h, w = e.shape
        flat = e.permute(0, 2, 3, 1).reshape(-1, c)
        codes = self.embedding.weight
        dist = (
            flat.pow(2).sum(1, keepdim=True)
            - 2.0 * flat @ codes.t()
            + codes.pow(2).sum(1)
        )
        indices = dist.argmin(dim=1)
        z = codes[indices].reshape(b, h, w, c).permute(0, 3, 1, 2)
        return z, indices.reshape(b, h, w)


class DegradationTokenizer(nn.Module):
    """Encoder + codebook + decoder over visual instructions.

    Inputs are unit-range image tensors; the network internally works on
    the model range.
    """

    def __init__(self, cfg: TokenizerConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.decoder = Decoder(cfg)
        self.quantizer = VectorQuantizer(cfg.codebook_size, cfg.embed_dim)

    def encode_latent(self, x_unit: torch.Tensor) -> torch.Tensor:
        return self.encoder(2.0 * x_unit - 1.0)

    def decode_latent(self, z: torch.Tensor) -> torch.Tensor:
        return (self.decoder(z) + 1.0) / 2.0

    def forward(self, x_unit):
        e = self.encode_latent(x_unit)
        z, indices = self.quantizer.lookup(e)
        z_st = straight_through(e, z)
        recon = self.decode_latent(z_st)
        return recon, e, z, indices

    @property
    def num_params(self) -> int:
        return sum(p.numel() for p in self.parameters())


# ----------------------------------------------------------------------
# Losses and quantization primitives
# ----------------------------------------------------------------------

def straight_through(e: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
    """Forward the quantized value; pass gradients straight to the encoder.

    Written as z + (e - e.detach()) so the forward equals z bit-exactly
    (e - e.detach() is exactly zero) while the backward is the identity
    on e.
    """
    return z.detach() + (e - e.detach())


def vq_loss(e: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
    """Codebook-update plus commitment terms with stop-gradient semantics."""
    codebook_term = torch.linalg.vector_norm(e.detach() - z)
    commit_term = torch.linalg.vector_norm(e - z.detach())
    return codebook_term + commit_term


def rec_loss(
    v_hat: torch.Tensor,
    v: torch.Tensor,
    weight: float = 0.0,
    perceptual: Callable | None = None,
) -> torch.Tensor:
    """MSE plus an optional weighted perceptual term."""
    loss = torch.mean((v_hat - v) ** 2)
    if weight > 0.0 and perceptual is not None:
        loss = loss + weight * perceptual(v_hat, v)
    return loss


def edge_perceptual_loss(a: torch.Tensor, b: torch.Tensor, scales: int = 3) -> torch.Tensor:
    """Multi-scale mean absolute gradient difference; >= 0, zero iff equal edges."""
    total = a.new_zeros(())
    for s in range(scales):
        if s:
            a = F.avg_pool2d(a, 2)
            b = F.avg_pool2d(b, 2)
        gax = a[:, :, :, 1:] - a[:, :, :, :-1]
        gbx = b[:, :, :, 1:] - b[:, :, :, :-1]
        gay = a[:, :, 1:, :] - a[:, :, :-1, :]
        gby = b[:, :, 1:, :] - b[:, :, :-1, :]
        total = total + torch.mean(torch.abs(gax - gbx)) + torch.mean(torch.abs(gay - gby))
    return total


class PatchDiscriminator(nn.Module):
    """Small patch discriminator for the optional hinge adversarial term."""

    def __init__(self, base=32):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3, base, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(base, base * 2, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(base * 2, 1, 4, padding=1),
        )

    def forward(self, x):
        return self.net(2.0 * x - 1.0)


def hinge_d_loss(real_logits, fake_logits):
    return torch.mean(F.relu(1.0 - real_logits)) + torch.mean(F.relu(1.0 + fake_logits))


def quantize(e_v: np.ndarray, codebook: np.ndarray) -> DegradationCode:
    """Brute-force nearest-neighbor quantization of a latent grid.

    Euclidean distance, ties broken toward the lowest code index.
    """
    codebook = np.asarray(codebook, dtype=np.float64)
    if codebook.ndim != 2 or codebook.shape[0] < 1:
        raise ContractViolation("codebook must be a non-empty (K, C) matrix")
    e = np.asarray(e_v, dtype=np.float64)
    if e.shape[-1] != codebook.shape[1]:
        raise ContractViolation(
            f"latent dim {e.shape[-1]} does not match codebook dim {codebook.shape[1]}"
        )
    flat = e.reshape(-1, e.shape[-1])
    d2 = ((flat[:, None, :] - codebook[None, :, :]) ** 2).sum(axis=2)
    indices = d2.argmin(axis=1)  # argmin returns the first (lowest) index on ties
    z = codebook[indices].reshape(e.shape)
    return DegradationCode(z=z, indices=indices.reshape(e.shape[:-1]).astype(np.int64))


# ----------------------------------------------------------------------
# Inference API
# ----------------------------------------------------------------------

def _image_to_tensor(img: Image) -> torch.Tensor:
    return torch.from_numpy(img.data).float().permute(2, 0, 1).unsqueeze(0)


def encode(model: DegradationTokenizer, img: Image) -> np.ndarray:
    """Encode a unit-range image to its (h, w, C_v) latent grid."""
    if img.range_tag != UNIT:
        raise ContractViolation("encode expects a unit-range image")
    if img.height != model.cfg.input_size or img.width != model.cfg.input_size:
        raise ContractViolation(
            f"input {img.height}×{img.width} does not match configured "
            f"size {model.cfg.input_size}"
        )
    model.eval()
    with torch.no_grad():
        e = model.encode_latent(_image_to_tensor(img))
    return e[0].permute(1, 2, 0).numpy().astype(np.float64)


def encode_quantized(model: DegradationTokenizer, img: Image) -> DegradationCode:
    e = encode(model, img)
    codebook = model.quantizer.embedding.weight.detach().numpy().astype(np.float64)
    return quantize(e, codebook)


def encode_residual(
    model: DegradationTokenizer,
    instruction: VisualInstruction,
    subtract_before_quantize: bool = False,
) -> DegradationCode:
    """Instruction code relative to the clean ground.

    Post-quantization subtraction by default: z = q(E(v)).z - q(E(clean)).z,
    which makes the null instruction an exact zero grid. The flag switches
    to subtracting raw embeddings before quantization.
    """
    if instruction.degraded.data.shape != instruction.clean.data.shape:
        raise ContractViolation("instruction and clean ground sizes differ")
    if subtract_before_quantize:
        e_v = encode(model, instruction.degraded)
        e_null = encode(model, instruction.clean)
        code_v = quantize(e_v, model.quantizer.embedding.weight.detach().numpy())
        code_null = quantize(e_null, model.quantizer.embedding.weight.detach().numpy())
        z = e_v - e_null
    else:
        code_v = encode_quantized(model, instruction.degraded)
        code_null = encode_quantized(model, instruction.clean)
        z = code_v.z - code_null.z
    return DegradationCode(
        z=z,
        indices=code_v.indices,
        is_residual=True,
        null_indices=code_null.indices,
    )


# ----------------------------------------------------------------------
# Training
# ----------------------------------------------------------------------

@dataclass
class TokenizerTrainConfig:
    steps: int = 2000
    batch_size: int = 8
    lr: float = 4.5e-6
    betas: tuple = (0.5, 0.9)
    clean_substitution_prob: float = 0.1
    perceptual_weight: float = 0.0   # lambda; 1.0 at full scale
    adversarial: bool = False
    adversarial_weight: float = 0.8
    horizontal_flip: bool = True
    dead_code_batches: int = 100
    seed: int = 0
    log_every: int = 50

    @staticmethod
    def toy(steps: int = 600, seed: int = 0) -> "TokenizerTrainConfig":
        return TokenizerTrainConfig(steps=steps, lr=1e-3, seed=seed)


@dataclass
class TokenizerTrainResult:
    model: DegradationTokenizer
    losses: list = field(default_factory=list)  # (step, total, rec, vq)
    substitutions: int = 0
    draws: int = 0


def should_substitute_clean(rng: np.random.Generator, prob: float = 0.1) -> bool:
    """The per-sample decision to train on the clean ground instead of v."""
    return bool(rng.random() < prob)


def train_tokenizer(
    instructions: list[VisualInstruction],
    model: DegradationTokenizer,
    cfg: TokenizerTrainConfig,
) -> TokenizerTrainResult:
    """Optimize reconstruction + VQ losses over a set of instructions.

    With probability `clean_substitution_prob` a sample's degraded view is
    replaced by its clean ground (and reconstructed as given). Codes unused
    for `dead_code_batches` consecutive batches are re-seeded from a random
    encoder output of the current batch.
    """
    if not instructions:
        raise ContractViolation("tokenizer training needs a nonempty dataset")
    size = model.cfg.input_size
    for inst in instructions:
        if inst.degraded.height != size or inst.degraded.width != size:
            raise ContractViolation(
                f"instruction size {inst.degraded.height} does not match model size {size}"
            )
    rng = np.random.default_rng([int(cfg.seed), 101])
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=cfg.betas)
    disc = PatchDiscriminator() if cfg.adversarial else None
    d_opt = torch.optim.Adam(disc.parameters(), lr=cfg.lr, betas=cfg.betas) if disc else None
    perceptual = edge_perceptual_loss if cfg.perceptual_weight > 0 else None

    unused_batches = np.zeros(model.cfg.codebook_size, dtype=np.int64)
    result = TokenizerTrainResult(model=model)
    model.train()
    for step in range(cfg.steps):
        batch = []
        for _ in range(cfg.batch_size):
            inst = instructions[int(rng.integers(0, len(instructions)))]
            result.draws += 1
            if should_substitute_clean(rng, cfg.clean_substitution_prob):
                data = inst.clean.data
                result.substitutions += 1
            else:
                data = inst.degraded.data
            if cfg.horizontal_flip and rng.random() < 0.5:
                data = data[:, ::-1].copy()
            batch.append(data)
        x = torch.from_numpy(np.stack(batch)).float().permute(0, 3, 1, 2)

        recon, e, z, indices = model(x)
        l_rec = rec_loss(recon, x, cfg.perceptual_weight, perceptual)
        l_vq = vq_loss(e, z)
        loss = l_rec + l_vq
        if disc is not None:
            fake_logits = disc(recon)
            loss = loss + cfg.adversarial_weight * (-fake_logits.mean())
        if not torch.isfinite(loss):
            raise DivergenceError(f"tokenizer loss diverged at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()

        if disc is not None:
            d_loss = hinge_d_loss(disc(x), disc(recon.detach()))
            d_opt.zero_grad()
            d_loss.backward()
            d_opt.step()

        idx, counts = np.unique(indices.numpy(), return_counts=True)
        with torch.no_grad():
            model.quantizer.usage_counts[idx] += torch.from_numpy(counts)
        used = np.zeros(model.cfg.codebook_size, dtype=bool)
        used[idx] = True
        unused_batches = np.where(used, 0, unused_batches + 1)
        dead = np.nonzero(unused_batches >= cfg.dead_code_batches)[0]
        if dead.size:
            with torch.no_grad():
                flat = e.detach().permute(0, 2, 3, 1).reshape(-1, model.cfg.embed_dim)
                picks = rng.integers(0, flat.shape[0], size=dead.size)
                model.quantizer.embedding.weight[dead] = flat[picks]
            unused_batches[dead] = 0

        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            result.losses.append((step, loss.item(), l_rec.item(), l_vq.item()))
    model.eval()
    return result


def reconstruction_mse(model: DegradationTokenizer, instructions: list[VisualInstruction]) -> float:
    model.eval()
    total = 0.0
    with torch.no_grad():
        for inst in instructions:
            x = _image_to_tensor(inst.degraded)
            recon, _, _, _ = model(x)
            total += float(torch.mean((recon - x) ** 2))
    return total / len(instructions)


# ----------------------------------------------------------------------
# Checkpoints
# ----------------------------------------------------------------------

def save_state_dict(directory: Path, state: dict, header: dict) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    tensor_dir = directory / "tensors"
    tensor_dir.mkdir(exist_ok=True)
    names = {}
    for i, (key, value) in enumerate(sorted(state.items())):
        fname = f"{i:04d}.dft1"
        tensorio.write_tensor(tensor_dir / fname, value.detach().cpu().numpy())
        names[key] = fname
    header = dict(header)
    header["tensors"] = names
    with open(directory / "header.json", "w") as f:
        json.dump(header, f, indent=2, sort_keys=True)


def load_state_dict(directory: Path, expected_schema: str) -> tuple[dict, dict]:
    directory = Path(directory)
    header_path = directory / "header.json"
    if not header_path.exists():
        raise CheckpointError(f"no checkpoint header at {header_path}")
    header = json.loads(header_path.read_text())
    if header.get("schema") != expected_schema:
        raise CheckpointError(
            f"checkpoint schema {header.get('schema')!r} does not match {expected_schema!r}"
        )
    state = {}
    for key, fname in header["tensors"].items():
        state[key] = torch.from_numpy(tensorio.read_tensor(directory / "tensors" / fname))
    return state, header


def save_tokenizer(directory: str | Path, model: DegradationTokenizer, step: int = 0) -> None:
    usage = codebook_usage_histogram(model)
    header = {
        "schema": TOKENIZER_SCHEMA,
        "config": asdict(model.cfg),
        "step": int(step),
        "codebook_usage": usage,
    }
    save_state_dict(Path(directory), model.state_dict(), header)


def load_tokenizer(directory: str | Path) -> DegradationTokenizer:
    state, header = load_state_dict(Path(directory), TOKENIZER_SCHEMA)
    cfg_dict = dict(header["config"])
    for key in ("channels", "attn_levels"):
        cfg_dict[key] = tuple(cfg_dict[key])
    model = DegradationTokenizer(TokenizerConfig(**cfg_dict))
    model.load_state_dict(state)
    model.eval()
    return model


def codebook_usage_histogram(model: DegradationTokenizer) -> list[int]:
    return [int(v) for v in model.quantizer.usage_counts]
