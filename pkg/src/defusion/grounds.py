"""Procedural visual-ground pool and instruction grounding.

A visual ground is a 2×2 composition of square tiles, one from each of
four element groups: concentric patterns, random textures, natural
textures, and calibrated colors. Applying a degradation chain to a ground
yields a visual instruction: an image that manifests the degradation's
artifacts independently of any particular photo content.

Generation is a pure function of (seed, size); tile generators never touch
global RNG state.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .degrade import DegradationChain, apply_chain
from .errors import ContractViolation
from .imaging import Image, UNIT, clip_unit, save_png

GROUPS = ("concentric", "random_texture", "natural_texture", "color")


@dataclass(frozen=True)
class GroundElement:
    group: str
    generator_id: str
    seed: int


@dataclass
class VisualGround:
    """A composed chart image plus the elements and seed that produced it."""

    image: Image
    elements: tuple
    seed: int

    def __post_init__(self):
        groups = sorted(e.group for e in self.elements)
        if groups != sorted(GROUPS):
            raise ContractViolation("ground must contain exactly one element per group")


@dataclass
class VisualInstruction:
    """A degraded ground (`degraded`) paired with its clean ground (`clean`)."""

    degraded: Image
    clean: Image
    chain: DegradationChain


# ----------------------------------------------------------------------
# Tile generators. Each returns an size×size×3 array in [0,1].
# ----------------------------------------------------------------------

def _grid(size):
    half = (size - 1) / 2.0
    ys, xs = np.mgrid[0:size, 0:size]
    return ys - half, xs - half


def _to_rgb(gray):
    return np.repeat(gray[:, :, None], 3, axis=2)


def _siemens_star(size, rng):
    ys, xs = _grid(size)
    theta = np.arctan2(ys, xs)
    spokes = int(rng.integers(8, 25))
    # smoothstep over the sign of sin gives anti-aliased sectors
    v = np.clip(np.sin(spokes * theta) * 4.0 + 0.5, 0.0, 1.0)
    return _to_rgb(v)


def _zone_plate(size, rng):
    ys, xs = _grid(size)
    r2 = ys**2 + xs**2
    k = rng.uniform(0.5, 1.5) * np.pi / size
    return _to_rgb(0.5 + 0.5 * np.cos(k * r2))


def _rings(size, rng):
    ys, xs = _grid(size)
    r = np.hypot(ys, xs)
    freq = rng.uniform(0.3, 0.9)
    return _to_rgb(0.5 + 0.5 * np.cos(freq * r * 2 * np.pi / 8.0))


def _white_noise(size, rng):
    return rng.uniform(0.0, 1.0, size=(size, size, 3))


def _dead_leaves(size, rng):
    canvas = np.full((size, size, 3), 0.5)
    ys, xs = np.mgrid[0:size, 0:size]
    for _ in range(int(size * 1.5)):
        cy, cx = rng.uniform(0, size, 2)
        radius = rng.uniform(size / 24, size / 4)
        color = rng.uniform(0.05, 0.95, 3)
        mask = (ys - cy) ** 2 + (xs - cx) ** 2 <= radius**2
        canvas[mask] = color
    return canvas


def _value_noise(size, rng, octaves, persistence=0.55):
    total = np.zeros((size, size))
    amplitude = 1.0
    norm = 0.0
    for octave in range(octaves):
        cells = 2 ** (octave + 1)
        grid = rng.uniform(0, 1, size=(cells + 1, cells + 1))
        ys = np.linspace(0, cells, size, endpoint=False)
        xs = np.linspace(0, cells, size, endpoint=False)
        yi = ys.astype(int)
        xi = xs.astype(int)
        fy = (ys - yi)[:, None]
        fx = (xs - xi)[None, :]
        sy = fy * fy * (3 - 2 * fy)
        sx = fx * fx * (3 - 2 * fx)
        g00 = grid[yi][:, xi]
        g01 = grid[yi][:, xi + 1]
        g10 = grid[yi + 1][:, xi]
        g11 = grid[yi + 1][:, xi + 1]
        layer = g00 * (1 - sy) * (1 - sx) + g01 * (1 - sy) * sx + g10 * sy * (1 - sx) + g11 * sy * sx
        total += amplitude * layer
        norm += amplitude
        amplitude *= persistence
    return total / norm


def _natural_field(size, rng):
    v = _value_noise(size, rng, octaves=5)
    v = (v - v.min()) / max(v.max() - v.min(), 1e-9)
    tint = rng.uniform(0.75, 1.0, 3)
    return clip_unit(v[:, :, None] * tint[None, None, :])


def _natural_ridged(size, rng):
    v = _value_noise(size, rng, octaves=6, persistence=0.65)
    v = np.abs(v - v.mean()) * 2.5
    v = (v - v.min()) / max(v.max() - v.min(), 1e-9)
    return _to_rgb(v)


# 4×6 calibration palette; includes pure white and pure black by construction.
COLOR_PALETTE = np.array(
    [
        [1.00, 1.00, 1.00], [0.00, 0.00, 0.00], [0.80, 0.80, 0.80], [0.55, 0.55, 0.55],
        [0.35, 0.35, 0.35], [0.15, 0.15, 0.15], [1.00, 0.00, 0.00], [0.00, 1.00, 0.00],
        [0.00, 0.00, 1.00], [1.00, 1.00, 0.00], [1.00, 0.00, 1.00], [0.00, 1.00, 1.00],
        [0.45, 0.32, 0.26], [0.77, 0.57, 0.50], [0.38, 0.48, 0.62], [0.34, 0.42, 0.26],
        [0.52, 0.50, 0.69], [0.40, 0.74, 0.67], [0.85, 0.47, 0.16], [0.29, 0.36, 0.64],
        [0.76, 0.35, 0.41], [0.36, 0.23, 0.41], [0.62, 0.73, 0.25], [0.88, 0.63, 0.16],
    ]
)


def _color_chart(size, rng):
    order = rng.permutation(24)
    tile = np.zeros((size, size, 3))
    rows, cols = 4, 6
    for idx, color_idx in enumerate(order):
        r, c = divmod(idx, cols)
        y0 = r * size // rows
        y1 = (r + 1) * size // rows
        x0 = c * size // cols
        x1 = (c + 1) * size // cols
        tile[y0:y1, x0:x1] = COLOR_PALETTE[color_idx]
    return tile


GENERATORS = {
    "concentric": (("siemens_star", _siemens_star), ("zone_plate", _zone_plate), ("rings", _rings)),
    "random_texture": (("white_noise", _white_noise), ("dead_leaves", _dead_leaves)),
    "natural_texture": (("value_field", _natural_field), ("ridged_field", _natural_ridged)),
    "color": (("calibration_chart", _color_chart),),
}


# ----------------------------------------------------------------------
# Ground assembly
# ----------------------------------------------------------------------

def generate_ground(seed: int, size: int = 224) -> VisualGround:
    """Compose one tile per element group into a 2×2 chart."""
    if size < 32:
        raise ContractViolation(f"ground size {size} too small (min 32)")
    if size % 2:
        raise ContractViolation("ground size must be divisible by 2")
    rng = np.random.default_rng([int(seed), 9001])
    tile_size = size // 2
    placement = rng.permutation(4)
    elements = []
    canvas = np.zeros((size, size, 3))
    for slot, group_idx in enumerate(placement):
        group = GROUPS[group_idx]
        options = GENERATORS[group]
        pick = int(rng.integers(0, len(options)))
        gen_id, gen = options[pick]
        tile_seed = int(rng.integers(0, 2**63 - 1))
        tile = gen(tile_size, np.random.default_rng([tile_seed, 7]))
        r, c = divmod(slot, 2)
        canvas[r * tile_size : (r + 1) * tile_size, c * tile_size : (c + 1) * tile_size] = tile
        elements.append(GroundElement(group=group, generator_id=gen_id, seed=tile_seed))
    return VisualGround(image=Image(clip_unit(canvas), UNIT), elements=tuple(elements), seed=int(seed))


def ablation_ground(kind: str, seed: int, size: int = 224) -> VisualGround:
    """Degenerate grounds for ablations: constant mid-gray, or fixed-period stripes."""
    if kind == "blank":
        canvas = np.full((size, size, 3), 0.5)
    elif kind == "simple":
        period = 8
        ys = np.arange(size)
        stripes = ((ys // (period // 2)) % 2).astype(np.float64) * 0.5 + 0.25
        canvas = np.repeat(np.repeat(stripes[:, None], size, axis=1)[:, :, None], 3, axis=2)
    else:
        raise ContractViolation(f"unknown ablation ground kind {kind!r}")
    elements = tuple(GroundElement(group=g, generator_id=kind, seed=int(seed)) for g in GROUPS)
    return VisualGround(image=Image(canvas, UNIT), elements=elements, seed=int(seed))


def ground_instruction(ground: VisualGround, chain: DegradationChain) -> VisualInstruction:
    """Apply the chain to the ground; the degraded result is the instruction."""
    sample = apply_chain(chain, ground.image)
    return VisualInstruction(degraded=sample.lq, clean=ground.image, chain=chain)


def save_instruction(instruction: VisualInstruction, out_dir: str | Path, stem: str) -> dict:
    """Write (clean, degraded) PNGs plus a JSON sidecar with the chain record."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    clean_path = out_dir / f"{stem}_clean.png"
    degraded_path = out_dir / f"{stem}_instruction.png"
    save_png(clean_path, instruction.clean)
    save_png(degraded_path, instruction.degraded)
    sidecar = {
        "clean": clean_path.name,
        "instruction": degraded_path.name,
        "chain": instruction.chain.describe(),
    }
    with open(out_dir / f"{stem}.json", "w") as f:
        json.dump(sidecar, f, indent=2, sort_keys=True)
    return sidecar
