"""Joint multi-degradation training loop for the denoiser.

The tokenizer is frozen; instruction codes for every (task, scope) pair
are pre-encoded into small pools so batch assembly stays cheap and
deterministic. Batches are a pure function of (config.seed, step), so
training is reproducible and checkpoint resumption is bit-compatible on
one platform.
"""

from __future__ import annotations

import base64
import csv
import hashlib
import json
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch

from .degrade import DegradationChain, DegradationOp, PairedSample, apply_chain
from .denoiser import (
    ConditioningBundle,
    Denoiser,
    DenoiserConfig,
    denoiser_config_from_dict,
    DENOISER_SCHEMA,
)
from .chainspec import parse_chain_spec
from .diffusion import NoiseSchedule, build_target, dsm_loss
from .errors import CheckpointError, ContractViolation, DivergenceError
from .grounds import VisualGround, ablation_ground, generate_ground, ground_instruction
from .imaging import Image, load_png
from .synth import synthetic_photo
from .tokenizer import DegradationTokenizer, encode_residual, load_state_dict, save_state_dict

TRAINER_SCHEMA = "defusion-trainer-v1"


@dataclass
class TrainConfig:
    # data
    hq_dir: str = "synth:24x64"       # directory of PNGs, or synth:<count>x<size>
    chains: tuple = ("noise:sigma=0.2",)
    task_weights: tuple = ()          # empty -> uniform
    crop_size: int = 32
    instruction_size: int = 64
    code_pool: int = 6
    # conditioning / ablation switches
    instruction_mode: str = "visual"  # visual | blank | simple | none
    diffusion_mode: str = "degradation"  # degradation | naive
    p_partial: float = 0.25
    p_null: float = 0.05
    # residual codes from raw embeddings (True) or quantized codes (False);
    # post-VQ residuals collapse to zero at toy codebook sizes
    residual_pre_quantize: bool = True
    # optimization
    lr_init: float = 1e-4
    lr_final: float = 1e-6
    optimizer: str = "adam"           # adam (0.9, 0.999) | adamw (0.9, 0.99)
    batch_size: int = 16
    total_steps: int = 1000
    ema_decay: float = 0.999
    t_min: float = 1e-3
    schedule: str = "vp_cosine"
    seed: int = 0
    # bookkeeping
    ckpt_every: int = 500
    log_every: int = 25

    def __post_init__(self):
        if self.lr_final > self.lr_init:
            raise ContractViolation("lr_final must not exceed lr_init")
        if self.batch_size < 1:
            raise ContractViolation("batch size must be at least 1")
        if self.instruction_mode not in ("visual", "blank", "simple", "none"):
            raise ContractViolation(f"unknown instruction mode {self.instruction_mode!r}")
        if self.diffusion_mode not in ("degradation", "naive"):
            raise ContractViolation(f"unknown diffusion mode {self.diffusion_mode!r}")
        if self.optimizer not in ("adam", "adamw"):
            raise ContractViolation(f"unknown optimizer {self.optimizer!r}")
        self.chains = tuple(self.chains)
        self.task_weights = tuple(float(w) for w in self.task_weights)

    def weights(self) -> np.ndarray:
        if self.task_weights:
            if len(self.task_weights) != len(self.chains):
                raise ContractViolation("one task weight per chain required")
            w = np.asarray(self.task_weights, dtype=np.float64)
        else:
            w = np.ones(len(self.chains))
        return w / w.sum()

    def config_hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def cosine_lr(config: TrainConfig, step: int) -> float:
    """Cosine annealing from lr_init at step 0 to lr_final at the last step."""
    total = max(config.total_steps - 1, 1)
    frac = min(step, total) / total
    return config.lr_final + 0.5 * (config.lr_init - config.lr_final) * (
        1.0 + np.cos(np.pi * frac)
    )


# ----------------------------------------------------------------------
# Flat key=value config files
# ----------------------------------------------------------------------

_TUPLE_FIELDS = {"chains", "task_weights"}


def parse_config_text(text: str, overrides: dict | None = None) -> TrainConfig:
    """Parse `key=value` lines (# comments); chains are ';'-separated."""
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ContractViolation(f"config line {lineno}: expected key=value, got {raw!r}")
        key, _, value = line.partition("=")
        values[key.strip()] = value.strip()
    if overrides:
        values.update({k: str(v) for k, v in overrides.items()})
    kwargs = {}
    defaults = TrainConfig()
    for key, raw in values.items():
        if not hasattr(defaults, key):
            raise ContractViolation(f"unknown config key {key!r}")
        default = getattr(defaults, key)
        if key == "chains":
            kwargs[key] = tuple(s for s in raw.split(";") if s.strip())
        elif key == "task_weights":
            kwargs[key] = tuple(float(x) for x in raw.split(",") if x.strip())
        elif isinstance(default, bool):
            kwargs[key] = raw.lower() in ("1", "true", "yes")
        elif isinstance(default, int):
            kwargs[key] = int(raw)
        elif isinstance(default, float):
            kwargs[key] = float(raw)
        else:
            kwargs[key] = raw
    return TrainConfig(**kwargs)


def load_config(path: str | Path, overrides: dict | None = None) -> TrainConfig:
    return parse_config_text(Path(path).read_text(), overrides)


# ----------------------------------------------------------------------
# Task preparation
# ----------------------------------------------------------------------

@dataclass
class TrainTask:
    """One degradation recipe with realized samples and instruction codes."""

    name: str
    samples: list
    # scope length -> list of residual code grids (h, w, C_v)
    codes: dict = field(default_factory=dict)


def _load_hq_images(config: TrainConfig) -> list[Image]:
    spec = config.hq_dir
    if spec.startswith("synth:"):
        count_s, _, size_s = spec[len("synth:") :].partition("x")
        count, size = int(count_s), int(size_s)
        return [synthetic_photo(seed=i, size=size) for i in range(count)]
    paths = sorted(Path(spec).glob("*.png"))
    if not paths:
        raise ContractViolation(f"no PNG images in {spec}")
    return [load_png(p) for p in paths]


def _chain_for(config: TrainConfig, task_idx: int, image_idx: int, spec: str) -> DegradationChain:
    ops = []
    for pos, (name, params) in enumerate(parse_chain_spec(spec)):
        seed = int(
            np.random.default_rng([config.seed, 31, task_idx, image_idx, pos]).integers(2**63 - 1)
        )
        ops.append(DegradationOp(name, params, seed))
    return DegradationChain(tuple(ops))


def _ground_for(config: TrainConfig, rng_key: list) -> VisualGround:
    seed = int(np.random.default_rng(rng_key).integers(2**63 - 1))
    if config.instruction_mode == "blank":
        return ablation_ground("blank", seed, config.instruction_size)
    if config.instruction_mode == "simple":
        return ablation_ground("simple", seed, config.instruction_size)
    return generate_ground(seed, config.instruction_size)


def prepare_tasks(
    config: TrainConfig, tokenizer: DegradationTokenizer | None
) -> list[TrainTask]:
    """Realize LQ samples for every chain and pre-encode instruction pools.

    Instruction parameters are drawn from the task's chain spec with their
    own seeds; codes are residuals against the matching clean grounds.
    """
    if not config.chains:
        raise ContractViolation("training needs at least one chain")
    if config.instruction_mode != "none" and tokenizer is None:
        raise ContractViolation("instruction mode requires a tokenizer checkpoint")
    images = _load_hq_images(config)
    tasks = []
    for task_idx, spec in enumerate(config.chains):
        samples = []
        for image_idx, hq in enumerate(images):
            chain = _chain_for(config, task_idx, image_idx, spec)
            samples.append(apply_chain(chain, hq))
        task = TrainTask(name=spec, samples=samples)
        n_ops = len(samples[0].chain)
        if config.instruction_mode != "none":
            for scope_len in range(n_ops + 1):
                pool = []
                for variant in range(config.code_pool):
                    ground = _ground_for(config, [config.seed, 57, task_idx, scope_len, variant])
                    if scope_len == 0:
                        # null instruction: residual is exactly the zero grid
                        inst = ground_instruction(ground, DegradationChain())
                    else:
                        scope_ops = []
                        parsed = parse_chain_spec(spec)[n_ops - scope_len :]
                        for pos, (name, params) in enumerate(parsed):
                            seed = int(
                                np.random.default_rng(
                                    [config.seed, 73, task_idx, scope_len, variant, pos]
                                ).integers(2**63 - 1)
                            )
                            scope_ops.append(DegradationOp(name, params, seed))
                        inst = ground_instruction(ground, DegradationChain(tuple(scope_ops)))
                    code = encode_residual(
                        tokenizer, inst, subtract_before_quantize=config.residual_pre_quantize
                    )
                    pool.append(code.z.astype(np.float32))
                task.codes[scope_len] = pool
        tasks.append(task)
    return tasks


# ----------------------------------------------------------------------
# Batch assembly
# ----------------------------------------------------------------------

@dataclass
class Batch:
    y0_model: torch.Tensor          # (B, 3, c, c) model-range difference target
    lq_model: torch.Tensor          # (B, 3, c, c)
    code_tokens: torch.Tensor | None  # (B, N, C_v)
    scope_lens: list


def draw_task_index(rng: np.random.Generator, weights: np.ndarray) -> int:
    return int(rng.choice(len(weights), p=weights))


def draw_scope_len(rng: np.random.Generator, chain_len: int, config: TrainConfig) -> int:
    u = rng.random()
    if u < config.p_null:
        return 0
    if chain_len > 1 and u < config.p_null + config.p_partial:
        return int(rng.integers(1, chain_len))
    return chain_len


def make_batch(tasks: list[TrainTask], config: TrainConfig, step: int) -> Batch:
    """Deterministic batch for (config.seed, step)."""
    if not tasks:
        raise ContractViolation("no training tasks")
    rng = np.random.default_rng([config.seed, 11, step])
    weights = config.weights()
    y0s, lqs, codes, scopes = [], [], [], []
    for _ in range(config.batch_size):
        task = tasks[draw_task_index(rng, weights)]
        sample: PairedSample = task.samples[int(rng.integers(0, len(task.samples)))]
        chain_len = len(sample.chain)
        scope_len = chain_len if config.diffusion_mode == "naive" else draw_scope_len(
            rng, chain_len, config
        )
        target = build_target(sample, scope_len)

        c = config.crop_size
        if c > min(sample.lq.height, sample.lq.width):
            raise ContractViolation("crop size exceeds image size")
        ys = int(rng.integers(0, sample.lq.height - c + 1))
        xs = int(rng.integers(0, sample.lq.width - c + 1))
        flip_h = rng.random() < 0.5
        flip_v = rng.random() < 0.5

        def prep(arr):
            patch = arr[ys : ys + c, xs : xs + c]
            if flip_h:
                patch = patch[:, ::-1]
            if flip_v:
                patch = patch[::-1, :]
            return np.ascontiguousarray(patch)

        lq_crop = prep(sample.lq.data)
        if config.diffusion_mode == "naive":
            y0_model = 2.0 * prep(sample.hq.data) - 1.0
        else:
            y0_model = 2.0 * prep(target.y0)
        y0s.append(y0_model)
        lqs.append(2.0 * lq_crop - 1.0)
        scopes.append(scope_len)
        if config.instruction_mode != "none":
            pool = task.codes[scope_len]
            grid = pool[int(rng.integers(0, len(pool)))]
            codes.append(grid.reshape(-1, grid.shape[-1]))

    to_t = lambda arrs: torch.from_numpy(np.stack(arrs)).float().permute(0, 3, 1, 2)
    code_tokens = (
        torch.from_numpy(np.stack(codes)).float() if codes else None
    )
    return Batch(
        y0_model=to_t(y0s), lq_model=to_t(lqs), code_tokens=code_tokens, scope_lens=scopes
    )


# ----------------------------------------------------------------------
# Training loop
# ----------------------------------------------------------------------

@dataclass
class TrainResult:
    checkpoint_dir: Path
    losses: list
    csv_path: Path


def _make_optimizer(config: TrainConfig, model: Denoiser) -> torch.optim.Optimizer:
    if config.optimizer == "adamw":
        return torch.optim.AdamW(model.parameters(), lr=config.lr_init, betas=(0.9, 0.99))
    return torch.optim.Adam(model.parameters(), lr=config.lr_init, betas=(0.9, 0.999))


class EmaShadow:
    """Exponential moving average of named parameters."""

    def __init__(self, model: torch.nn.Module, decay: float):
        self.decay = decay
        self.shadow = {
            name: p.detach().clone() for name, p in model.named_parameters()
        }

    def update(self, model: torch.nn.Module) -> None:
        with torch.no_grad():
            for name, p in model.named_parameters():
                self.shadow[name].mul_(self.decay).add_(p, alpha=1.0 - self.decay)

    def state_dict(self) -> dict:
        return self.shadow

    def apply_to(self, model: torch.nn.Module) -> None:
        with torch.no_grad():
            for name, p in model.named_parameters():
                p.copy_(self.shadow[name])


def train_denoiser(
    config: TrainConfig,
    tasks: list[TrainTask],
    denoiser_config: DenoiserConfig,
    out_dir: str | Path,
    resume_from: str | Path | None = None,
) -> TrainResult:
    """Minimize the score-matching loss; checkpoint and log a CSV curve."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(config.seed)
    model = Denoiser(denoiser_config)
    opt = _make_optimizer(config, model)
    ema = EmaShadow(model, config.ema_decay)
    schedule = NoiseSchedule(config.schedule)
    start_step = 0
    if resume_from is not None:
        start_step = load_training_checkpoint(resume_from, model, opt, ema, config)

    csv_path = out_dir / "loss_curve.csv"
    csv_mode = "a" if (resume_from is not None and csv_path.exists()) else "w"
    losses = []
    wall_start = time.monotonic()
    last_good = None
    with open(csv_path, csv_mode, newline="") as csv_file:
        writer = csv.writer(csv_file)
        if csv_mode == "w":
            writer.writerow(["step", "loss", "lr", "wallclock"])
        for step in range(start_step, config.total_steps):
            lr = cosine_lr(config, step)
            for group in opt.param_groups:
                group["lr"] = lr
            batch = make_batch(tasks, config, step)
            aux = np.random.default_rng([config.seed, 13, step])
            t_np = aux.uniform(config.t_min, 1.0, size=config.batch_size)
            eps_np = aux.normal(size=tuple(batch.y0_model.shape))
            t = torch.from_numpy(t_np).float()
            eps = torch.from_numpy(eps_np).float()
            bundle = ConditioningBundle(
                lq_model=batch.lq_model, code_tokens=batch.code_tokens
            )

            model.train()
            try:
                loss = dsm_loss(
                    lambda y, tt: model(y, tt, bundle), batch.y0_model, t, eps, schedule
                )
            except DivergenceError:
                if last_good is not None:
                    save_training_checkpoint(out_dir / "last_good", model, opt, ema, config, last_good)
                raise
            opt.zero_grad()
            loss.backward()
            opt.step()
            ema.update(model)
            last_good = step
            losses.append((step, loss.item(), lr))
            if step % config.log_every == 0 or step == config.total_steps - 1:
                writer.writerow([step, f"{loss.item():.6f}", f"{lr:.3e}", f"{time.monotonic() - wall_start:.2f}"])
                csv_file.flush()
            if config.ckpt_every and (step + 1) % config.ckpt_every == 0:
                save_training_checkpoint(out_dir / f"step{step + 1:06d}", model, opt, ema, config, step + 1)

    ckpt_dir = out_dir / "final"
    save_training_checkpoint(ckpt_dir, model, opt, ema, config, config.total_steps)
    return TrainResult(checkpoint_dir=ckpt_dir, losses=losses, csv_path=csv_path)


# ----------------------------------------------------------------------
# Trainer checkpoints (params + EMA + optimizer + RNG state)
# ----------------------------------------------------------------------

def save_training_checkpoint(
    directory: Path,
    model: Denoiser,
    opt: torch.optim.Optimizer,
    ema: EmaShadow,
    config: TrainConfig,
    step: int,
) -> None:
    state = {}
    for key, value in model.state_dict().items():
        state[f"model.{key}"] = value
    for key, value in ema.state_dict().items():
        state[f"ema.{key}"] = value
    opt_steps = {}
    for pi, (name, _) in enumerate(model.named_parameters()):
        pstate = opt.state.get(list(model.parameters())[pi], {})
        if pstate:
            state[f"opt.exp_avg.{name}"] = pstate["exp_avg"]
            state[f"opt.exp_avg_sq.{name}"] = pstate["exp_avg_sq"]
            opt_steps[name] = int(pstate["step"])
    header = {
        "schema": TRAINER_SCHEMA,
        "denoiser_schema": DENOISER_SCHEMA,
        "config": asdict(config),
        "denoiser_config": asdict(model.cfg),
        "config_hash": config.config_hash(),
        "step": int(step),
        "opt_steps": opt_steps,
        "torch_rng": base64.b64encode(torch.get_rng_state().numpy().tobytes()).decode(),
    }
    save_state_dict(directory, state, header)


def load_training_checkpoint(
    directory: str | Path,
    model: Denoiser,
    opt: torch.optim.Optimizer,
    ema: EmaShadow,
    config: TrainConfig,
) -> int:
    state, header = load_state_dict(Path(directory), TRAINER_SCHEMA)
    if header["config_hash"] != config.config_hash():
        raise CheckpointError("checkpoint config hash does not match the current config")
    model_state = {k[len("model.") :]: v for k, v in state.items() if k.startswith("model.")}
    model.load_state_dict(model_state)
    for name in ema.shadow:
        ema.shadow[name] = state[f"ema.{name}"].clone()
    opt_steps = header["opt_steps"]
    params = dict(model.named_parameters())
    for name, param in params.items():
        if name in opt_steps:
            opt.state[param] = {
                "step": torch.tensor(float(opt_steps[name])),
                "exp_avg": state[f"opt.exp_avg.{name}"].clone(),
                "exp_avg_sq": state[f"opt.exp_avg_sq.{name}"].clone(),
            }
    rng_bytes = base64.b64decode(header["torch_rng"])
    torch.set_rng_state(torch.from_numpy(np.frombuffer(rng_bytes, dtype=np.uint8).copy()))
    return int(header["step"])


def load_denoiser_for_eval(directory: str | Path, use_ema: bool = True) -> Denoiser:
    """Rebuild the trained denoiser (EMA weights by default)."""
    state, header = load_state_dict(Path(directory), TRAINER_SCHEMA)
    model = Denoiser(denoiser_config_from_dict(header["denoiser_config"]))
    prefix = "ema." if use_ema else "model."
    picked = {k[len(prefix) :]: v for k, v in state.items() if k.startswith(prefix)}
    # buffers are only stored under model.*
    for key, value in state.items():
        if key.startswith("model.") and key[len("model.") :] not in picked:
            picked[key[len("model.") :]] = value
    model.load_state_dict(picked)
    model.eval()
    return model
