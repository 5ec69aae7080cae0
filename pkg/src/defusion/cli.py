"""Command-line entrypoint exposing every pipeline stage.

Exit codes: 0 success, 1 contract violation (single "DEFUSION-ERR:" line
on stderr), 2 usage errors (unknown flags, missing arguments). The
DEFUSION_THREADS environment variable caps torch's worker threads.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .degrade import DegradationChain, chain_from_spec, make_mixed_dataset
from .errors import ContractViolation, DivergenceError
from .imaging import load_png, save_png
from .grounds import ablation_ground, generate_ground, ground_instruction, save_instruction

_THREADS_APPLIED = False


def _apply_thread_cap() -> None:
    global _THREADS_APPLIED
    if _THREADS_APPLIED:
        return
    cap = os.environ.get("DEFUSION_THREADS")
    if cap:
        import torch

        torch.set_num_threads(max(1, int(cap)))
    _THREADS_APPLIED = True


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="defusion",
        description="Visual-instruction-guided degradation-space diffusion restoration",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("degrade", help="apply a degradation chain to an image")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--chain", required=True, help='e.g. "noise:sigma=0.2,rain:density=0.3"')
    p.add_argument("--seed", type=int, required=True)

    p = sub.add_parser("make-mixed", help="six-ordering rain/noise/snow dataset")
    p.add_argument("--hq-dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)

    p = sub.add_parser("ground", help="emit a (clean, instruction) pair with sidecar")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--size", type=int, default=224)
    p.add_argument("--chain", default="")
    p.add_argument("--out", required=True)
    p.add_argument("--kind", choices=("visual", "blank", "simple"), default="visual")

    p = sub.add_parser("train-tokenizer", help="train the degradation tokenizer")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")

    p = sub.add_parser("train-diffusion", help="train the denoiser")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--tokenizer-ckpt")
    p.add_argument("--denoiser-preset", choices=("tiny", "toy", "full"), default="toy")
    p.add_argument("--resume")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")

    p = sub.add_parser("restore", help="restore one image")
    p.add_argument("--lq", required=True)
    p.add_argument("--instruction", required=True, help="saved instruction dir or auto:<chain-spec>")
    p.add_argument("--tokenizer-ckpt", required=True)
    p.add_argument("--denoiser-ckpt", required=True)
    p.add_argument("--steps", type=int, default=4)
    p.add_argument("--eta", type=float, default=0.0)
    p.add_argument("--schedule", choices=("vp_linear", "vp_cosine"), default="vp_cosine")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--mode", choices=("degradation", "naive"), default="degradation")
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="paired-folder evaluation")
    p.add_argument("--paired-dir", required=True)
    p.add_argument("--identity", action="store_true", help="evaluate the identity restorer")
    p.add_argument("--tokenizer-ckpt")
    p.add_argument("--denoiser-ckpt")
    p.add_argument("--chain", default="", help="instruction chain spec for all pairs")
    p.add_argument("--steps", type=int, default=4)
    p.add_argument("--schedule", choices=("vp_linear", "vp_cosine"), default="vp_cosine")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--csv")

    p = sub.add_parser("eval-mixed", help="six-ordering benchmark from a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--identity", action="store_true")
    p.add_argument("--tokenizer-ckpt")
    p.add_argument("--denoiser-ckpt")
    p.add_argument("--steps", type=int, default=4)
    p.add_argument("--schedule", choices=("vp_linear", "vp_cosine"), default="vp_cosine")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--csv")

    p = sub.add_parser("ablate", help="compare trained variants on a paired folder")
    p.add_argument("--paired-dir", required=True)
    p.add_argument("--tokenizer-ckpt", required=True)
    p.add_argument(
        "--variant",
        action="append",
        required=True,
        metavar="NAME=CKPT_DIR",
        help="visual|blank|simple|none|naive=trainer checkpoint dir",
    )
    p.add_argument("--chain", default="", help="eval-time instruction chain spec")
    p.add_argument("--steps", type=int, default=4)
    p.add_argument("--schedule", choices=("vp_linear", "vp_cosine"), default="vp_cosine")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--csv")
    p.add_argument("--assert", dest="assert_directional", action="store_true")

    p = sub.add_parser("selftest", help="run the property suite (no training)")
    p.add_argument("--list", action="store_true", help="list checks without running")

    return parser


# ----------------------------------------------------------------------
# Command implementations
# ----------------------------------------------------------------------

def _cmd_degrade(args) -> int:
    from .degrade import apply_chain

    img = load_png(args.input)
    chain = chain_from_spec(args.chain, seed=args.seed)
    sample = apply_chain(chain, img)
    save_png(args.out, sample.lq)
    print(f"wrote {args.out} ({len(chain)} ops)")
    return 0


def _cmd_make_mixed(args) -> int:
    records = make_mixed_dataset(args.hq_dir, args.out, seed=args.seed)
    print(f"wrote {len(records)} samples to {args.out} (manifest.jsonl included)")
    return 0


def _cmd_ground(args) -> int:
    if args.kind == "visual":
        ground = generate_ground(args.seed, args.size)
    else:
        ground = ablation_ground(args.kind, args.seed, args.size)
    chain = chain_from_spec(args.chain, seed=args.seed + 1)
    inst = ground_instruction(ground, chain)
    save_instruction(inst, args.out, f"ground_{args.seed}")
    print(f"wrote instruction pair to {args.out}")
    return 0


def _parse_overrides(pairs: list[str]) -> dict:
    overrides = {}
    for pair in pairs:
        if "=" not in pair:
            raise ContractViolation(f"--set expects KEY=VALUE, got {pair!r}")
        key, _, value = pair.partition("=")
        overrides[key.strip()] = value.strip()
    return overrides


def _cmd_train_tokenizer(args) -> int:
    import torch

    from .tokenizer import (
        DegradationTokenizer,
        TokenizerConfig,
        TokenizerTrainConfig,
        save_tokenizer,
        train_tokenizer,
    )
    from .trainer import parse_config_text

    raw = Path(args.config).read_text()
    overrides = _parse_overrides(args.set)
    # reuse the flat key=value format; tokenizer-specific keys
    values = {}
    for line in raw.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        values[key.strip()] = value.strip()
    values.update(overrides)

    preset = values.pop("preset", "toy")
    cfg = TokenizerConfig.toy() if preset == "toy" else TokenizerConfig.full()
    chains = tuple(s for s in values.pop("chains", "noise:sigma=0.2").split(";") if s.strip())
    count = int(values.pop("instructions", "64"))
    seed = int(values.pop("seed", "0"))
    steps = int(values.pop("steps", "600"))
    batch_size = int(values.pop("batch_size", "8"))
    lr = float(values.pop("lr", "1e-3" if preset == "toy" else "4.5e-6"))
    include_ablation_grounds = values.pop("include_ablation_grounds", "0") in ("1", "true")
    if values:
        raise ContractViolation(f"unknown tokenizer config keys: {sorted(values)}")

    instructions = build_instruction_set(
        chains, count, cfg.input_size, seed, include_ablation_grounds
    )
    torch.manual_seed(seed)
    model = DegradationTokenizer(cfg)
    train_cfg = TokenizerTrainConfig(steps=steps, batch_size=batch_size, lr=lr, seed=seed)
    result = train_tokenizer(instructions, model, train_cfg)
    save_tokenizer(args.out, model, step=steps)
    csv_path = Path(args.out) / "loss_curve.csv"
    with open(csv_path, "w") as f:
        f.write("step,total,rec,vq\n")
        for row in result.losses:
            f.write(",".join(f"{v:.6f}" if i else str(v) for i, v in enumerate(row)) + "\n")
    print(f"tokenizer saved to {args.out}; final loss {result.losses[-1][1]:.4f}")
    return 0


def build_instruction_set(chains, count, size, seed, include_ablation_grounds=False):
    """Procedural instruction dataset: random grounds × provided chain specs."""
    instructions = []
    rng = np.random.default_rng([seed, 301])
    for i in range(count):
        spec = chains[i % len(chains)]
        chain = chain_from_spec(spec, seed=int(rng.integers(2**31)))
        roll = rng.random()
        if include_ablation_grounds and roll < 0.1:
            ground = ablation_ground("blank", int(rng.integers(2**31)), size)
        elif include_ablation_grounds and roll < 0.2:
            ground = ablation_ground("simple", int(rng.integers(2**31)), size)
        else:
            ground = generate_ground(int(rng.integers(2**31)), size)
        instructions.append(ground_instruction(ground, chain))
    return instructions


def _cmd_train_diffusion(args) -> int:
    from .denoiser import DenoiserConfig
    from .tokenizer import load_tokenizer
    from .trainer import load_config, prepare_tasks, train_denoiser

    config = load_config(args.config, _parse_overrides(args.set))
    tokenizer = None
    if config.instruction_mode != "none":
        if not args.tokenizer_ckpt:
            raise ContractViolation("--tokenizer-ckpt required unless instruction_mode=none")
        tokenizer = load_tokenizer(args.tokenizer_ckpt)
    preset = {
        "tiny": DenoiserConfig.tiny,
        "toy": DenoiserConfig.toy,
        "full": DenoiserConfig.full,
    }[args.denoiser_preset]()
    tasks = prepare_tasks(config, tokenizer)
    result = train_denoiser(config, tasks, preset, args.out, resume_from=args.resume)
    print(f"final checkpoint: {result.checkpoint_dir}; loss curve: {result.csv_path}")
    return 0


def _load_pipeline(tokenizer_ckpt, denoiser_ckpt, steps, schedule_kind, mode="degradation",
                   instruction_mode="visual", eta=0.0):
    from .diffusion import NoiseSchedule, SamplerConfig
    from .pipeline import RestorationPipeline
    from .tokenizer import load_tokenizer
    from .trainer import load_denoiser_for_eval

    tokenizer = load_tokenizer(tokenizer_ckpt) if tokenizer_ckpt else None
    try:
        denoiser = load_denoiser_for_eval(denoiser_ckpt, use_ema=True)
    except Exception:
        from .denoiser import load_denoiser

        denoiser, _ = load_denoiser(denoiser_ckpt)
    return RestorationPipeline(
        tokenizer=tokenizer,
        denoiser=denoiser,
        schedule=NoiseSchedule(schedule_kind),
        sampler=SamplerConfig(steps=steps, eta=eta),
        mode=mode,
        instruction_mode=instruction_mode,
    )


def _load_instruction(spec: str, seed: int, tokenizer_cfg_size: int):
    from .degrade import DegradationChain

    if spec.startswith("auto:"):
        chain = chain_from_spec(spec[len("auto:") :], seed=seed + 1)
        ground = generate_ground(seed, tokenizer_cfg_size)
        return ground_instruction(ground, chain)
    sidecars = sorted(Path(spec).glob("*.json"))
    if not sidecars:
        raise ContractViolation(f"no instruction sidecar JSON found in {spec}")
    sidecar = json.loads(sidecars[0].read_text())
    clean = load_png(Path(spec) / sidecar["clean"])
    degraded = load_png(Path(spec) / sidecar["instruction"])
    chain = DegradationChain.from_description(sidecar["chain"])
    from .grounds import VisualInstruction

    return VisualInstruction(degraded=degraded, clean=clean, chain=chain)


def _cmd_restore(args) -> int:
    pipeline = _load_pipeline(
        args.tokenizer_ckpt, args.denoiser_ckpt, args.steps, args.schedule,
        mode=args.mode, eta=args.eta,
    )
    lq = load_png(args.lq)
    instruction = _load_instruction(args.instruction, args.seed, pipeline.tokenizer.cfg.input_size)
    restored = pipeline.restore_image(lq, instruction.chain, seed=args.seed, instruction=instruction)
    save_png(args.out, restored)
    print(f"wrote {args.out}")
    return 0


def _restorer_from_args(args, instruction_mode="visual"):
    from .evalbench import identity_restorer

    if args.identity:
        return identity_restorer
    if not (args.tokenizer_ckpt and args.denoiser_ckpt):
        raise ContractViolation("provide --identity or both --tokenizer-ckpt and --denoiser-ckpt")
    pipeline = _load_pipeline(
        args.tokenizer_ckpt, args.denoiser_ckpt, args.steps, args.schedule,
        instruction_mode=instruction_mode,
    )
    chain_spec = getattr(args, "chain", "")

    def restorer(lq, pair):
        chain = pair.chain if pair.chain is not None else chain_from_spec(chain_spec, args.seed)
        return pipeline.restore_image(lq, chain, seed=args.seed)

    return restorer


def _cmd_eval(args) -> int:
    from .evalbench import evaluate, format_report_table, write_report_csv

    report = evaluate(_restorer_from_args(args), args.paired_dir)
    table = format_report_table({"restorer": report})
    print(table)
    if args.csv:
        write_report_csv(args.csv, {"restorer": report})
    return 0


def _cmd_eval_mixed(args) -> int:
    from .evalbench import format_report_table, run_mixed_benchmark, write_report_csv

    table = run_mixed_benchmark(_restorer_from_args(args), args.manifest)
    print(format_report_table(table))
    if args.csv:
        write_report_csv(args.csv, table)
    return 0


def _cmd_ablate(args) -> int:
    from .evalbench import (
        directional_checks,
        evaluate,
        format_report_table,
        write_report_csv,
    )

    reports = {}
    for pair in args.variant:
        if "=" not in pair:
            raise ContractViolation(f"--variant expects NAME=CKPT_DIR, got {pair!r}")
        name, _, ckpt = pair.partition("=")
        # the naive variant still uses visual instructions; only the target space changes
        instruction_mode = "visual" if name == "naive" else name
        mode = "naive" if name == "naive" else "degradation"
        pipeline = _load_pipeline(
            args.tokenizer_ckpt, ckpt, args.steps, args.schedule,
            mode=mode, instruction_mode=instruction_mode,
        )

        def restorer(lq, pair_info, _p=pipeline):
            chain = pair_info.chain if pair_info.chain is not None else chain_from_spec(
                args.chain, args.seed
            )
            return _p.restore_image(lq, chain, seed=args.seed)

        reports[name] = evaluate(restorer, args.paired_dir)
    print(format_report_table(reports))
    if args.csv:
        write_report_csv(args.csv, reports)
    if args.assert_directional:
        checks = directional_checks(reports)
        for name, ok in checks:
            print(f"[{'PASS' if ok else 'FAIL'}] {name}")
        if not all(ok for _, ok in checks):
            return 1
    return 0


def _cmd_selftest(args) -> int:
    from .selfcheck import ALL_CHECKS, run_all

    if args.list:
        for name, _ in ALL_CHECKS:
            print(name)
        return 0
    return 0 if run_all() else 1


_COMMANDS = {
    "degrade": _cmd_degrade,
    "make-mixed": _cmd_make_mixed,
    "ground": _cmd_ground,
    "train-tokenizer": _cmd_train_tokenizer,
    "train-diffusion": _cmd_train_diffusion,
    "restore": _cmd_restore,
    "eval": _cmd_eval,
    "eval-mixed": _cmd_eval_mixed,
    "ablate": _cmd_ablate,
    "selftest": _cmd_selftest,
}


def main(argv: list[str] | None = None) -> int:
    _apply_thread_cap()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ContractViolation, DivergenceError) as exc:
        print(f"DEFUSION-ERR: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
