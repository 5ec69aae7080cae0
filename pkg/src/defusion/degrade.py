"""Parametric degradation operators and ordered composition chains.

Every operator maps a unit-range image to a unit-range image (clipped),
and is a pure function of (params, seed, input): stochastic operators draw
from an RNG stream derived from (seed, kind) only, so results do not
depend on evaluation order or parallelism. Each operator is the identity
at its degenerate parameter (sigma=0, density=0, transmission=1, kernel
length 1, count=0); JPEG at quality 100 is identity up to integer
rounding of DCT coefficients (within 2/255).
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .chainspec import parse_chain_spec
from .errors import ContractViolation
from .imaging import Image, LUMA_WEIGHTS, UNIT, clip_unit, load_png, save_png

# Stable ids for RNG stream derivation; never renumber.
KIND_IDS = {
    "gaussian_noise": 1,
    "gaussian_blur": 2,
    "motion_blur": 3,
    "rain": 4,
    "snow": 5,
    "haze": 6,
    "jpeg_block": 7,
    "raindrop": 8,
}

ALIASES = {"noise": "gaussian_noise", "blur": "gaussian_blur", "jpeg": "jpeg_block"}

# kind -> {param: (default, lo, hi)}
PARAM_SPECS: dict[str, dict[str, tuple[float, float, float]]] = {
    "gaussian_noise": {"sigma": (0.1, 0.0, 0.5)},
    "gaussian_blur": {"sigma": (1.0, 0.0, 8.0)},
    "motion_blur": {"length": (9.0, 1.0, 63.0), "angle": (0.0, -180.0, 180.0)},
    "rain": {
        "density": (0.2, 0.0, 2.0),
        "length": (14.0, 2.0, 64.0),
        "angle_min": (60.0, 0.0, 180.0),
        "angle_max": (80.0, 0.0, 180.0),
        "brightness": (0.85, 0.0, 1.0),
    },
    "snow": {
        "density": (0.2, 0.0, 2.0),
        "size_min": (1.0, 0.5, 8.0),
        "size_max": (2.5, 0.5, 8.0),
        "brightness": (0.9, 0.0, 1.0),
    },
    "haze": {
        "transmission": (0.5, 0.0, 1.0),
        "airlight": (0.85, 0.7, 1.0),
        "smooth": (0.0, 0.0, 1.0),  # 1 -> spatially varying transmission field
    },
    "jpeg_block": {"quality": (10.0, 1.0, 100.0)},
    "raindrop": {
        "count": (8.0, 0.0, 256.0),
        "radius_min": (3.0, 1.0, 32.0),
        "radius_max": (6.0, 1.0, 32.0),
    },
}


@dataclass(frozen=True)
class DegradationOp:
    """One parameterized degradation with its own RNG seed."""

    kind: str
    params: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        kind = ALIASES.get(self.kind, self.kind)
        object.__setattr__(self, "kind", kind)
        if kind not in PARAM_SPECS:
            raise ContractViolation(f"unknown degradation kind {self.kind!r}")
        spec = PARAM_SPECS[kind]
        merged = {name: default for name, (default, _, _) in spec.items()}
        for name, value in self.params.items():
            if name not in spec:
                raise ContractViolation(f"{kind}: unknown parameter {name!r}")
            _, lo, hi = spec[name]
            if not (lo <= float(value) <= hi):
                raise ContractViolation(
                    f"{kind}: {name}={value} outside [{lo}, {hi}]"
                )
            merged[name] = float(value)
        object.__setattr__(self, "params", merged)

    def rng(self) -> np.random.Generator:
        return np.random.default_rng([int(self.seed), KIND_IDS[self.kind]])


@dataclass(frozen=True)
class DegradationChain:
    """Ordered list of degradation operators; empty chain is the identity."""

    ops: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "ops", tuple(self.ops))

    def __len__(self) -> int:
        return len(self.ops)

    def describe(self) -> list[dict]:
        return [
            {"kind": op.kind, "params": dict(op.params), "seed": int(op.seed)}
            for op in self.ops
        ]

    @staticmethod
    def from_description(records: list[dict]) -> "DegradationChain":
        return DegradationChain(
            tuple(DegradationOp(r["kind"], dict(r["params"]), int(r["seed"])) for r in records)
        )


def chain_from_spec(spec: str, seed: int) -> DegradationChain:
    """Build a chain from a textual spec; op seeds derive from (seed, position)."""
    parsed = parse_chain_spec(spec)
    ops = []
    for i, (name, params) in enumerate(parsed):
        op_seed = int(np.random.default_rng([int(seed), i]).integers(0, 2**63 - 1))
        ops.append(DegradationOp(name, params, op_seed))
    return DegradationChain(tuple(ops))


@dataclass
class PairedSample:
    """A clean/degraded pair plus the image after each individual op."""

    hq: Image
    lq: Image
    intermediates: list
    chain: DegradationChain

    def __post_init__(self):
        if len(self.intermediates) != len(self.chain):
            raise ContractViolation("one intermediate per chain op required")


def apply(op: DegradationOp, img: Image) -> Image:
    """Apply a single degradation to a unit-range image."""
    if img.range_tag != UNIT:
        raise ContractViolation("degradations operate on unit-range images")
    out = _DISPATCH[op.kind](img.data, op.params, op.rng())
    return Image(clip_unit(out), UNIT)


def apply_chain(chain: DegradationChain, img: Image) -> PairedSample:
    """Apply each op in order, recording every intermediate image."""
    intermediates = []
    current = img
    for op in chain.ops:
        current = apply(op, current)
        intermediates.append(current)
    return PairedSample(hq=img, lq=current, intermediates=intermediates, chain=chain)


# ----------------------------------------------------------------------
# Operator implementations (data in [0,1], float64, H×W×3)
# ----------------------------------------------------------------------

def _gaussian_noise(data, params, rng):
    sigma = params["sigma"]
    if sigma == 0.0:
        return data.copy()
    return data + rng.normal(0.0, sigma, size=data.shape)


def _gaussian_blur(data, params, rng):
    sigma = params["sigma"]
    if sigma == 0.0:
        return data.copy()
    out = np.empty_like(data)
    for c in range(3):
        out[:, :, c] = ndimage.gaussian_filter(data[:, :, c], sigma, mode="reflect")
    return out


def _line_kernel(length: float, angle_deg: float) -> np.ndarray:
    """Anti-aliased line segment kernel, normalized to sum 1."""
    n = int(np.ceil(length))
    n += (n + 1) % 2  # odd size so the line passes through the center
    if n <= 1:
        return np.ones((1, 1))
    half = (n - 1) / 2.0
    ys, xs = np.mgrid[0:n, 0:n]
    ys = ys - half
    xs = xs - half
    theta = np.deg2rad(angle_deg)
    dx, dy = np.cos(theta), -np.sin(theta)
    # distance to the segment of given length through the origin
    t = np.clip(xs * dx + ys * dy, -length / 2.0, length / 2.0)
    dist = np.hypot(xs - t * dx, ys - t * dy)
    kern = np.clip(1.0 - dist, 0.0, 1.0)
    s = kern.sum()
    if s <= 0:
        kern = np.zeros((n, n))
        kern[n // 2, n // 2] = 1.0
        return kern
    return kern / s


def _motion_blur(data, params, rng):
    length = params["length"]
    if length <= 1.0:
        return data.copy()
    kern = _line_kernel(length, params["angle"])
    out = np.empty_like(data)
    for c in range(3):
        out[:, :, c] = ndimage.convolve(data[:, :, c], kern, mode="reflect")
    return out


def _composite_streaks(data, alpha, brightness):
    return data * (1.0 - alpha[:, :, None]) + alpha[:, :, None] * brightness


def _rain(data, params, rng):
    h, w = data.shape[:2]
    count = int(round(params["density"] * h * w / 100.0))
    if count == 0:
        return data.copy()
    alpha = np.zeros((h, w))
    lo, hi = sorted((params["angle_min"], params["angle_max"]))
    for _ in range(count):
        cy = rng.uniform(0, h)
        cx = rng.uniform(0, w)
        length = params["length"] * rng.uniform(0.6, 1.4)
        angle = np.deg2rad(rng.uniform(lo, hi))
        opacity = rng.uniform(0.25, 0.6)
        _draw_segment(alpha, cy, cx, length, angle, width=0.7, opacity=opacity)
    np.clip(alpha, 0.0, 1.0, out=alpha)
    return _composite_streaks(data, alpha, params["brightness"])


def _draw_segment(canvas, cy, cx, length, angle, width, opacity):
    """Accumulate an anti-aliased segment into an alpha canvas."""
    h, w = canvas.shape
    dy, dx = -np.cos(angle), np.sin(angle)
    y0, y1 = cy - dy * length / 2, cy + dy * length / 2
    x0, x1 = cx - dx * length / 2, cx + dx * length / 2
    ylo = max(int(np.floor(min(y0, y1) - 2)), 0)
    yhi = min(int(np.ceil(max(y0, y1) + 2)), h - 1)
    xlo = max(int(np.floor(min(x0, x1) - 2)), 0)
    xhi = min(int(np.ceil(max(x0, x1) + 2)), w - 1)
    if ylo > yhi or xlo > xhi:
        return
    ys, xs = np.mgrid[ylo : yhi + 1, xlo : xhi + 1]
    ry, rx = ys - cy, xs - cx
    t = np.clip(ry * dy + rx * dx, -length / 2, length / 2)
    dist = np.hypot(ry - t * dy, rx - t * dx)
    profile = np.clip(1.0 - dist / (width + 0.5), 0.0, 1.0)
    patch = canvas[ylo : yhi + 1, xlo : xhi + 1]
    np.maximum(patch, opacity * profile, out=patch)


def _snow(data, params, rng):
    h, w = data.shape[:2]
    count = int(round(params["density"] * h * w / 100.0))
    if count == 0:
        return data.copy()
    lo, hi = sorted((params["size_min"], params["size_max"]))
    alpha = np.zeros((h, w))
    for _ in range(count):
        cy = rng.uniform(0, h)
        cx = rng.uniform(0, w)
        radius = rng.uniform(lo, hi)
        opacity = rng.uniform(0.5, 0.95)
        _draw_disc(alpha, cy, cx, radius, opacity)
    np.clip(alpha, 0.0, 1.0, out=alpha)
    return _composite_streaks(data, alpha, params["brightness"])


def _draw_disc(canvas, cy, cx, radius, opacity):
    h, w = canvas.shape
    ylo = max(int(np.floor(cy - radius - 1)), 0)
    yhi = min(int(np.ceil(cy + radius + 1)), h - 1)
    xlo = max(int(np.floor(cx - radius - 1)), 0)
    xhi = min(int(np.ceil(cx + radius + 1)), w - 1)
    if ylo > yhi or xlo > xhi:
        return
    ys, xs = np.mgrid[ylo : yhi + 1, xlo : xhi + 1]
    dist = np.hypot(ys - cy, xs - cx)
    profile = np.exp(-0.5 * (dist / (radius / 1.6)) ** 2) * (dist <= radius + 1)
    patch = canvas[ylo : yhi + 1, xlo : xhi + 1]
    np.maximum(patch, opacity * profile, out=patch)


def _smooth_field(shape, rng, cells=4):
    """Bilinear random field in [0,1] for spatially varying transmission."""
    h, w = shape
    grid = rng.uniform(0.0, 1.0, size=(cells + 1, cells + 1))
    ys = np.linspace(0, cells, h)
    xs = np.linspace(0, cells, w)
    yi = np.minimum(ys.astype(int), cells - 1)
    xi = np.minimum(xs.astype(int), cells - 1)
    fy = (ys - yi)[:, None]
    fx = (xs - xi)[None, :]
    g00 = grid[yi][:, xi]
    g01 = grid[yi][:, xi + 1]
    g10 = grid[yi + 1][:, xi]
    g11 = grid[yi + 1][:, xi + 1]
    return g00 * (1 - fy) * (1 - fx) + g01 * (1 - fy) * fx + g10 * fy * (1 - fx) + g11 * fy * fx


def _haze(data, params, rng):
    """Atmospheric scattering: I = J*t + A*(1-t)."""
    t_base = params["transmission"]
    airlight = params["airlight"]
    if params["smooth"] >= 0.5:
        field = _smooth_field(data.shape[:2], rng)
        tmap = np.clip(t_base * (0.7 + 0.6 * field), 0.0, 1.0)[:, :, None]
    else:
        tmap = t_base
    return data * tmap + airlight * (1.0 - tmap)


# --- JPEG blocking -----------------------------------------------------

# Annex-K luminance quantization table.
JPEG_LUMA_TABLE = np.array(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=np.float64,
)


def scaled_quant_table(quality: int) -> np.ndarray:
    """Annex-K quality scaling: 5000/q below 50, 200-2q at or above."""
    quality = int(quality)
    if not (1 <= quality <= 100):
        raise ContractViolation(f"jpeg quality {quality} outside [1, 100]")
    scale = 5000.0 / quality if quality < 50 else 200.0 - 2.0 * quality
    table = np.floor((JPEG_LUMA_TABLE * scale + 50.0) / 100.0)
    return np.clip(table, 1.0, 255.0)


def dct_matrix(n: int = 8) -> np.ndarray:
    """Orthonormal DCT-II basis matrix."""
    k = np.arange(n)[:, None]
    m = np.arange(n)[None, :]
    mat = np.cos(np.pi * (2 * m + 1) * k / (2 * n)) * np.sqrt(2.0 / n)
    mat[0, :] = np.sqrt(1.0 / n)
    return mat


_DCT8 = dct_matrix(8)


def blockwise_dct(channel: np.ndarray) -> np.ndarray:
    """8×8 blockwise orthonormal DCT-II; dimensions must be multiples of 8."""
    h, w = channel.shape
    if h % 8 or w % 8:
        raise ContractViolation("blockwise_dct needs dimensions divisible by 8")
    blocks = channel.reshape(h // 8, 8, w // 8, 8).transpose(0, 2, 1, 3)
    coeffs = np.einsum("ij,bcjk,lk->bcil", _DCT8, blocks, _DCT8)
    return coeffs.transpose(0, 2, 1, 3).reshape(h, w)


def blockwise_idct(coeffs: np.ndarray) -> np.ndarray:
    h, w = coeffs.shape
    blocks = coeffs.reshape(h // 8, 8, w // 8, 8).transpose(0, 2, 1, 3)
    pixels = np.einsum("ji,bcjk,kl->bcil", _DCT8, blocks, _DCT8)
    return pixels.transpose(0, 2, 1, 3).reshape(h, w)


def _jpeg_block(data, params, rng):
    """Luma-channel 8×8 DCT quantization; chroma passes through.

    The luma delta is added back to all three channels, which is exactly
    the effect of quantizing Y in YCbCr and leaving Cb/Cr untouched.
    """
    table = scaled_quant_table(int(round(params["quality"])))
    y = clip_unit(data) @ LUMA_WEIGHTS * 255.0 - 128.0
    h, w = y.shape
    ph = (-h) % 8
    pw = (-w) % 8
    ypad = np.pad(y, ((0, ph), (0, pw)), mode="edge")
    coeffs = blockwise_dct(ypad)
    hh, ww = ypad.shape
    tiled = np.tile(table, (hh // 8, ww // 8))
    quantized = np.round(coeffs / tiled) * tiled
    yrec = blockwise_idct(quantized)[:h, :w]
    delta = (yrec - y) / 255.0
    return data + delta[:, :, None]


def _raindrop(data, params, rng):
    count = int(round(params["count"]))
    if count == 0:
        return data.copy()
    lo, hi = sorted((params["radius_min"], params["radius_max"]))
    h, w = data.shape[:2]
    out = data.copy()
    for _ in range(count):
        cy = rng.uniform(0, h)
        cx = rng.uniform(0, w)
        radius = rng.uniform(lo, hi)
        ylo = max(int(np.floor(cy - radius - 1)), 0)
        yhi = min(int(np.ceil(cy + radius + 1)), h)
        xlo = max(int(np.floor(cx - radius - 1)), 0)
        xhi = min(int(np.ceil(cx + radius + 1)), w)
        if yhi - ylo < 2 or xhi - xlo < 2:
            continue
        region = out[ylo:yhi, xlo:xhi]
        blurred = np.stack(
            [ndimage.gaussian_filter(region[:, :, c], radius / 2.0, mode="reflect") for c in range(3)],
            axis=2,
        )
        ys, xs = np.mgrid[ylo:yhi, xlo:xhi]
        dist = np.hypot(ys - cy, xs - cx)
        mask = np.clip(1.0 - (dist / radius) ** 2, 0.0, 1.0)[:, :, None]
        # refraction-ish: blurred interior with a faint top-left highlight
        highlight = 0.15 * np.clip(1.0 - np.hypot(ys - (cy - radius / 3), xs - (cx - radius / 3)) / (radius / 2), 0, 1)
        out[ylo:yhi, xlo:xhi] = region * (1 - mask) + mask * np.clip(blurred + highlight[:, :, None], 0, 1)
    return out


_DISPATCH = {
    "gaussian_noise": _gaussian_noise,
    "gaussian_blur": _gaussian_blur,
    "motion_blur": _motion_blur,
    "rain": _rain,
    "snow": _snow,
    "haze": _haze,
    "jpeg_block": _jpeg_block,
    "raindrop": _raindrop,
}


# ----------------------------------------------------------------------
# Mixed-distortion dataset (rain / noise / snow in all six orders)
# ----------------------------------------------------------------------

MIXED_KINDS = ("rain", "gaussian_noise", "snow")
MIXED_NOISE_SIGMA = 25.0 / 255.0  # noise level 25 on the 8-bit scale


def make_mixed_dataset(hq_dir: str | Path, out_dir: str | Path, seed: int) -> list[dict]:
    """Emit six LQ variants per HQ image, one per ordering of rain/noise/snow.

    Per-image parameters are drawn from a stream keyed by (seed, image
    index); op seeds are shared across orderings so that only the
    composition order differs. Returns the manifest records, also written
    to out_dir/manifest.jsonl (one JSON object per line).
    """
    hq_dir = Path(hq_dir)
    out_dir = Path(out_dir)
    paths = sorted(hq_dir.glob("*.png"))
    if not paths:
        raise ContractViolation(f"no PNG images found in {hq_dir}")
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for index, path in enumerate(paths):
        img = load_png(path)
        rng = np.random.default_rng([int(seed), index])
        op_seeds = {kind: int(rng.integers(0, 2**63 - 1)) for kind in MIXED_KINDS}
        params = {
            "rain": {
                "density": float(rng.uniform(0.15, 0.45)),
                "length": float(rng.uniform(8.0, 24.0)),
                "brightness": float(rng.uniform(0.75, 0.95)),
            },
            "gaussian_noise": {"sigma": MIXED_NOISE_SIGMA},
            "snow": {
                "density": float(rng.uniform(0.15, 0.45)),
                "size_min": float(rng.uniform(0.8, 1.5)),
                "size_max": float(rng.uniform(1.5, 3.5)),
                "brightness": float(rng.uniform(0.85, 0.98)),
            },
        }
        ops = {
            kind: DegradationOp(kind, params[kind], op_seeds[kind]) for kind in MIXED_KINDS
        }
        for order in itertools.permutations(MIXED_KINDS):
            chain = DegradationChain(tuple(ops[kind] for kind in order))
            sample = apply_chain(chain, img)
            order_name = "-".join(_short_name(kind) for kind in order)
            lq_name = f"{path.stem}__{order_name}.png"
            save_png(out_dir / lq_name, sample.lq)
            # lq_path is relative to the manifest so reruns into different
            # directories stay byte-identical
            records.append(
                {
                    "hq_path": str(path),
                    "lq_path": lq_name,
                    "order": order_name,
                    "op_params": {kind: params[kind] for kind in order},
                    "seeds": {kind: op_seeds[kind] for kind in order},
                }
            )
    manifest_path = out_dir / "manifest.jsonl"
    with open(manifest_path, "w") as f:
        for record in records:
            f.write(json.dumps(record, sort_keys=True) + "\n")
    return records


def _short_name(kind: str) -> str:
    return {"gaussian_noise": "noise"}.get(kind, kind)


def load_manifest(path: str | Path) -> list[dict]:
    """Read a JSONL manifest, resolving relative lq paths against its directory."""
    path = Path(path)
    records = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                record = json.loads(line)
                lq = Path(record["lq_path"])
                if not lq.is_absolute():
                    record["lq_path"] = str(path.parent / lq)
                records.append(record)
    if not records:
        raise ContractViolation(f"empty manifest {path}")
    return records
