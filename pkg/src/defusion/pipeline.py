"""End-to-end restoration: tokenizer + denoiser + DDIM behind one call.

A pipeline owns the frozen models and sampler settings; each call builds
the visual instruction for the requested degradation chain, encodes the
residual code, and runs guided sampling. Images whose sides are not
divisible by the U-Net's downsampling factor are reflect-padded and
cropped back.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch

from .degrade import DegradationChain
from .denoiser import ConditioningBundle, Denoiser
from .diffusion import NoiseSchedule, SamplerConfig, ddim_sample, restore_from_y0
from .errors import ContractViolation
from .grounds import VisualInstruction, ablation_ground, generate_ground, ground_instruction
from .imaging import Image, UNIT
from .tokenizer import DegradationTokenizer, encode_residual


@dataclass
class RestorationPipeline:
    tokenizer: DegradationTokenizer | None
    denoiser: Denoiser
    schedule: NoiseSchedule
    sampler: SamplerConfig
    mode: str = "degradation"          # degradation | naive
    instruction_mode: str = "visual"   # visual | blank | simple | none
    residual_pre_quantize: bool = True  # must match how the denoiser was trained

    def __post_init__(self):
        # bounded target space; see SamplerConfig.clip_y0
        if self.sampler.clip_y0 is None:
            self.sampler = replace(self.sampler, clip_y0=2.0)

    def instruction_for(self, chain: DegradationChain | None, seed: int) -> VisualInstruction | None:
        if self.instruction_mode == "none":
            return None
        if self.tokenizer is None:
            raise ContractViolation("pipeline has no tokenizer for instruction encoding")
        size = self.tokenizer.cfg.input_size
        if self.instruction_mode in ("blank", "simple"):
            ground = ablation_ground(self.instruction_mode, seed, size)
        else:
            ground = generate_ground(seed, size)
        return ground_instruction(ground, chain or DegradationChain())

    def code_tokens_for(self, instruction: VisualInstruction | None) -> torch.Tensor | None:
        if instruction is None:
            return None
        code = encode_residual(self.tokenizer, instruction)
        return torch.from_numpy(code.tokens[None].astype(np.float32))

    def restore_image(
        self,
        lq: Image,
        chain: DegradationChain | None,
        seed: int,
        instruction: VisualInstruction | None = None,
    ) -> Image:
        """Restore one unit-range image guided by the chain's instruction."""
        if lq.range_tag != UNIT:
            raise ContractViolation("pipeline restores unit-range images")
        if instruction is None:
            instruction = self.instruction_for(chain, seed=seed + 1)
        tokens = self.code_tokens_for(instruction)

        factor = 2 ** (self.denoiser.cfg.levels - 1)
        padded, crop = _pad_to_multiple(lq.data, factor)
        lq_model = torch.from_numpy(2.0 * padded - 1.0).float().permute(2, 0, 1)[None]
        bundle = ConditioningBundle(lq_model=lq_model, code_tokens=tokens)

        self.denoiser.eval()

        def eps_model(y_t, t):
            with torch.no_grad():
                return self.denoiser(y_t, torch.full((y_t.shape[0],), float(t)), bundle)

        gen = torch.Generator().manual_seed(int(seed))
        y0_hat = ddim_sample(
            eps_model, self.schedule, self.sampler, tuple(lq_model.shape), gen
        )
        y0_np = y0_hat[0].permute(1, 2, 0).numpy().astype(np.float64)
        y0_np = y0_np[crop[0] : crop[1], crop[2] : crop[3]]
        return restore_from_y0(lq, y0_np, self.mode)


def _pad_to_multiple(data: np.ndarray, factor: int):
    h, w = data.shape[:2]
    ph = (-h) % factor
    pw = (-w) % factor
    if ph or pw:
        data = np.pad(data, ((0, ph), (0, pw), (0, 0)), mode="reflect")
    return data, (0, h, 0, w)
