"""Procedural stand-in photos for desk-scale training and evaluation.

Mixes smooth gradients, dead-leaves discs, and multi-octave value noise
into natural-ish compositions. Pure function of (seed, size).
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .grounds import _dead_leaves, _value_noise
from .imaging import Image, clip_unit, save_png


def synthetic_photo(seed: int, size: int = 64) -> Image:
    rng = np.random.default_rng([int(seed), 4242])
    ys, xs = np.mgrid[0:size, 0:size] / size
    angle = rng.uniform(0, 2 * np.pi)
    ramp = (np.cos(angle) * xs + np.sin(angle) * ys) * rng.uniform(0.2, 0.5)
    base = rng.uniform(0.25, 0.65, size=3)[None, None, :] + ramp[:, :, None]
    leaves = _dead_leaves(size, rng)
    texture = _value_noise(size, rng, octaves=4)[:, :, None]
    mix_leaves = rng.uniform(0.25, 0.6)
    mix_texture = rng.uniform(0.1, 0.3)
    canvas = (
        base * (1 - mix_leaves - mix_texture)
        + leaves * mix_leaves
        + texture * np.ones((1, 1, 3)) * mix_texture
    )
    # keep headroom so moderate noise rarely clips
    return Image(clip_unit(canvas * 0.7 + 0.15))


def write_synthetic_photos(directory: str | Path, count: int, size: int, seed: int) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(count):
        path = directory / f"synth_{i:04d}.png"
        save_png(path, synthetic_photo(seed=int(np.random.default_rng([seed, i]).integers(2**31)), size=size))
        paths.append(path)
    return paths
