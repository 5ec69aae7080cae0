"""Fast property suite behind the `selftest` CLI command.

No training happens here; every check is a deterministic property of the
shipped operators and runs in seconds. The pytest suite covers the same
ground more thoroughly; this module exists so a built artifact can verify
itself in the field.
"""

from __future__ import annotations

import math
import time
from typing import Callable

import numpy as np
import torch

from . import degrade, imaging
from .degrade import DegradationChain, DegradationOp, apply, apply_chain, blockwise_dct
from .denoiser import ConditioningBundle, Denoiser, DenoiserConfig, predict_eps, sinusoidal_features
from .diffusion import (
    NoiseSchedule,
    SamplerConfig,
    ddim_sample,
    dsm_loss,
    forward_sample,
    restore_from_y0,
    sampler_timesteps,
)
from .grounds import GROUPS, generate_ground, ground_instruction
from .imaging import Image, psnr, ssim, to_model_range, to_unit_range
from .tokenizer import quantize, straight_through


def _rng(tag: int) -> np.random.Generator:
    return np.random.default_rng([20240501, tag])


def check_range_conversions() -> str:
    rng = _rng(1)
    worst = 0.0
    for _ in range(200):
        img = Image(rng.uniform(0, 1, (16, 16, 3)))
        back = to_unit_range(to_model_range(img))
        worst = max(worst, float(np.abs(back.data - img.data).max()))
    assert worst < 1e-7, f"round-trip error {worst}"
    return f"max round-trip error {worst:.2e}"


def check_psnr_identical_flag() -> str:
    rng = _rng(2)
    for _ in range(20):
        img = Image(rng.uniform(0, 1, (16, 16, 3)))
        result = psnr(img, img)
        assert result.identical and result.value == 100.0
    return "identical flag set on 20 random self-pairs"


def check_ssim_properties() -> str:
    rng = _rng(3)
    a = Image(rng.uniform(0, 1, (24, 24, 3)))
    b = Image(rng.uniform(0, 1, (24, 24, 3)))
    assert ssim(a, a) == 1.0
    assert abs(ssim(a, b) - ssim(b, a)) < 1e-9
    return "self-similarity exact, symmetric to 1e-9"


def check_degradation_identities() -> str:
    rng = _rng(4)
    img = Image(rng.uniform(0.1, 0.9, (32, 32, 3)))
    cases = [
        ("gaussian_noise", {"sigma": 0.0}),
        ("gaussian_blur", {"sigma": 0.0}),
        ("motion_blur", {"length": 1.0}),
        ("rain", {"density": 0.0}),
        ("snow", {"density": 0.0}),
        ("haze", {"transmission": 1.0}),
        ("raindrop", {"count": 0.0}),
    ]
    for kind, params in cases:
        out = apply(DegradationOp(kind, params, 1), img)
        assert np.array_equal(out.data, img.data), f"{kind} not identity"
    out = apply(DegradationOp("jpeg_block", {"quality": 100}, 1), img)
    assert np.abs(out.data - img.data).max() <= 2 / 255
    return "7 exact identities; jpeg q100 within 2/255"


def check_blur_mean_preservation() -> str:
    const = Image(np.full((32, 32, 3), 0.37))
    for kind, params in (("gaussian_blur", {"sigma": 2.0}), ("motion_blur", {"length": 9.0})):
        out = apply(DegradationOp(kind, params, 0), const)
        err = np.abs(out.data - 0.37).max()
        assert err <= 1e-6, f"{kind} mean drift {err}"
    return "blur(const) = const within 1e-6"


def check_jpeg_dct_oracle() -> str:
    rng = _rng(5)
    x = rng.normal(size=(8, 8))
    fast = blockwise_dct(x)
    n = 8
    worst = 0.0
    for k in range(n):
        for l in range(n):
            sk = math.sqrt(1 / n) if k == 0 else math.sqrt(2 / n)
            sl = math.sqrt(1 / n) if l == 0 else math.sqrt(2 / n)
            acc = sum(
                x[m, p]
                * math.cos(math.pi * (2 * m + 1) * k / (2 * n))
                * math.cos(math.pi * (2 * p + 1) * l / (2 * n))
                for m in range(n)
                for p in range(n)
            )
            worst = max(worst, abs(fast[k, l] - sk * sl * acc))
    assert worst <= 1e-6, f"DCT deviates from naive oracle by {worst}"
    return f"max |fast - naive| = {worst:.2e}"


def check_chain_order_sensitivity() -> str:
    rng = _rng(6)
    img = Image(rng.uniform(0.2, 0.8, (48, 48, 3)))
    rain = DegradationOp("rain", {"density": 0.4}, 7)
    noise = DegradationOp("gaussian_noise", {"sigma": 0.1}, 8)
    ab = apply_chain(DegradationChain((rain, noise)), img).lq
    ba = apply_chain(DegradationChain((noise, rain)), img).lq
    frac = float(np.mean(np.abs(ab.data - ba.data) > 1 / 255))
    assert frac > 0.01
    return f"{frac:.1%} of pixels differ across orderings"


def check_ground_pool() -> str:
    for seed in range(5):
        ground = generate_ground(seed, 64)
        assert sorted(e.group for e in ground.elements) == sorted(GROUPS)
        again = generate_ground(seed, 64)
        assert np.array_equal(ground.image.data, again.image.data)
    return "grounds deterministic with all four element groups"


def check_instruction_invariant() -> str:
    ground = generate_ground(11, 64)
    chain = DegradationChain((DegradationOp("gaussian_noise", {"sigma": 0.2}, 5),))
    inst = ground_instruction(ground, chain)
    redo = apply_chain(chain, ground.image).lq
    assert np.array_equal(inst.degraded.data, redo.data)
    return "instruction = chain(clean) bit-exactly"


def check_vp_identity() -> str:
    worst = 0.0
    for kind in ("vp_linear", "vp_cosine"):
        schedule = NoiseSchedule(kind)
        alpha, sigma = schedule.alpha_sigma(schedule.grid_times())
        worst = max(worst, float(np.abs(alpha**2 + sigma**2 - 1).max()))
        a1, s1 = schedule.alpha_sigma(1.0)
        assert a1 <= 1e-4 and abs(s1 - 1) <= 1e-7
    assert worst <= 1e-6
    return f"max |alpha^2+sigma^2-1| = {worst:.2e} on 1001 grid points"


def check_g_closed_form() -> str:
    worst = 0.0
    for kind in ("vp_linear", "vp_cosine"):
        schedule = NoiseSchedule(kind)
        h = 1e-6
        for t in np.linspace(0.1, 0.9, 9):
            _, sigma, _, g = schedule.coeffs(t)

            def lr_(tt):
                a, s = schedule.alpha_sigma(tt)
                return math.log(a / s)

            oracle = -(sigma**2) * (lr_(t + h) - lr_(t - h)) / (2 * h)
            worst = max(worst, abs(g**2 - oracle) / abs(oracle))
    assert worst <= 1e-4
    return f"g^2 matches derivative oracle, worst rel err {worst:.2e}"


def check_forward_marginals() -> str:
    schedule = NoiseSchedule("vp_linear")
    rng = _rng(7)
    y0 = rng.uniform(-1, 1, (4, 4, 3))
    n = 10_000
    eps = rng.normal(size=(n,) + y0.shape)
    draws = forward_sample(schedule, y0[None], 0.5, eps)
    alpha, sigma = schedule.alpha_sigma(0.5)
    pooled = float(np.mean((draws - alpha * y0) ** 2))
    assert abs(pooled / sigma**2 - 1) <= 0.05
    terminal = forward_sample(schedule, y0, 1.0, eps[0])
    assert np.abs(terminal - eps[0]).max() <= 1e-4
    return f"pooled variance ratio {pooled / sigma**2:.4f}; terminal within 1e-4"


def check_ddim_oracles() -> str:
    schedule = NoiseSchedule("vp_cosine")

    def const_oracle(y, t):
        alpha, sigma = schedule.alpha_sigma(t)
        return (y - float(alpha) * 0.37) / float(sigma)

    gen = torch.Generator().manual_seed(3)
    out = ddim_sample(const_oracle, schedule, SamplerConfig(steps=1), (16,), gen, torch.float64)
    assert torch.allclose(out, torch.full((16,), 0.37, dtype=torch.float64), atol=1e-9)

    def gaussian_oracle(y, t):
        _, sigma = schedule.alpha_sigma(t)
        return float(sigma) * y

    gen = torch.Generator().manual_seed(11)
    samples = ddim_sample(
        gaussian_oracle, schedule, SamplerConfig(steps=50), (10_000,), gen, torch.float64
    ).numpy()
    ts = sampler_timesteps(schedule, 50)
    phi = np.arccos(np.clip(schedule.alpha_sigma(ts)[0], 0, 1))
    predicted = float(np.prod(np.cos(-np.diff(phi)) ** 2))
    assert abs(samples.mean()) <= 0.05
    assert abs(samples.std() - 1.0) <= 0.05
    assert abs(samples.var() / predicted - 1.0) <= 0.05
    return f"1-step inversion exact; 50-step std {samples.std():.4f} (oracle {math.sqrt(predicted):.4f})"


def check_dsm_loss_oracles() -> str:
    schedule = NoiseSchedule("vp_linear")
    gen = torch.Generator().manual_seed(0)
    y0 = torch.zeros(1000, 3, dtype=torch.float64)
    eps = torch.randn(1000, 3, generator=gen, dtype=torch.float64)
    t = torch.rand(1000, generator=gen, dtype=torch.float64)
    perfect = dsm_loss(lambda y, tt: eps, y0, t, eps, schedule).item()
    zero = dsm_loss(lambda y, tt: torch.zeros_like(y), y0, t, eps, schedule).item()
    assert perfect == 0.0
    assert abs(zero - 1.0) <= 0.05
    return f"perfect model loss 0; zero model loss {zero:.4f}"


def check_quantize_bruteforce() -> str:
    rng = _rng(8)
    for _ in range(100):
        codebook = rng.normal(size=(8, 4))
        cell = rng.normal(size=(1, 1, 4))
        code = quantize(cell, codebook)
        best = min(range(8), key=lambda k: float(((cell[0, 0] - codebook[k]) ** 2).sum()))
        assert int(code.indices[0, 0]) == best
    return "100/100 cells match exhaustive nearest neighbor"


def check_straight_through() -> str:
    e = torch.randn(6, requires_grad=True, dtype=torch.float64)
    z = torch.randn(6, dtype=torch.float64)
    out = straight_through(e, z)
    assert torch.equal(out.detach(), z)
    (out * 2).sum().backward()
    assert torch.all(e.grad == 2.0)
    return "forward is z; gradient passes through unchanged"


def check_zero_init_neutrality() -> str:
    torch.manual_seed(0)
    model = Denoiser(DenoiserConfig.tiny())
    gen = torch.Generator().manual_seed(1)
    y = torch.randn(2, 3, 8, 8, generator=gen)
    t = torch.rand(2, generator=gen)
    lq = torch.rand(2, 3, 8, 8, generator=gen) * 2 - 1
    code = torch.randn(2, 16, 6, generator=gen)
    full = predict_eps(model, y, t, ConditioningBundle(lq, code))
    bare = predict_eps(model, y, t, None)
    assert torch.equal(full, bare)
    return "conditioned and unconditioned outputs bit-identical at init"


def check_time_embedding_lipschitz() -> str:
    t = torch.linspace(0, 1 - 1e-6, 64, dtype=torch.float64)
    a = sinusoidal_features(t, 64)
    b = sinusoidal_features(t + 1e-6, 64)
    worst = float((a - b).norm(dim=1).max())
    assert worst < 1e-3
    return f"|feat(t+1e-6) - feat(t)| <= {worst:.2e}"


def check_restore_rule() -> str:
    rng = _rng(9)
    hq = Image(rng.uniform(0.3, 0.7, (16, 16, 3)))
    noise = rng.normal(0, 0.05, hq.data.shape)
    lq = Image(np.clip(hq.data + noise, 0, 1))
    out = restore_from_y0(lq, np.zeros_like(lq.data))
    assert np.array_equal(out.data, lq.data)
    oracle = 2.0 * (lq.data - hq.data)
    out = restore_from_y0(lq, oracle)
    assert np.abs(out.data - hq.data).max() <= 4e-16
    return "null prediction is identity; difference oracle recovers HQ"


ALL_CHECKS: list[tuple[str, Callable[[], str]]] = [
    ("imaging/range-conversions", check_range_conversions),
    ("imaging/psnr-identical-flag", check_psnr_identical_flag),
    ("imaging/ssim-properties", check_ssim_properties),
    ("degrade/identity-at-degenerate-params", check_degradation_identities),
    ("degrade/blur-mean-preservation", check_blur_mean_preservation),
    ("degrade/jpeg-dct-oracle", check_jpeg_dct_oracle),
    ("degrade/chain-order-sensitivity", check_chain_order_sensitivity),
    ("grounds/pool-determinism", check_ground_pool),
    ("grounds/instruction-invariant", check_instruction_invariant),
    ("diffusion/vp-identity", check_vp_identity),
    ("diffusion/g-closed-form", check_g_closed_form),
    ("diffusion/forward-marginals", check_forward_marginals),
    ("diffusion/ddim-oracles", check_ddim_oracles),
    ("diffusion/dsm-loss-oracles", check_dsm_loss_oracles),
    ("tokenizer/quantize-bruteforce", check_quantize_bruteforce),
    ("tokenizer/straight-through", check_straight_through),
    ("denoiser/zero-init-neutrality", check_zero_init_neutrality),
    ("denoiser/time-embedding-lipschitz", check_time_embedding_lipschitz),
    ("diffusion/restore-rule", check_restore_rule),
]


def run_all(verbose: bool = True) -> bool:
    ok = True
    t_start = time.monotonic()
    for name, fn in ALL_CHECKS:
        t0 = time.monotonic()
        try:
            detail = fn()
            status = "PASS"
        except AssertionError as exc:
            detail = str(exc)
            status = "FAIL"
            ok = False
        if verbose:
            print(f"[{status}] {name} ({time.monotonic() - t0:.2f}s): {detail}")
    if verbose:
        print(f"selftest {'passed' if ok else 'FAILED'} in {time.monotonic() - t_start:.1f}s")
    return ok
