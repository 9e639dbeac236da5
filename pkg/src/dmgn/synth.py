"""Procedural backgrounds and superimposed-image synthesis.

Three corruption models are supported, each producing an :class:`ImageTriple`
``(input, background, noise)`` where the input is a deterministic function of
the background, the stored noise layer and the recorded parameters:

* reflection: ``I = alpha * B + (1 - alpha) * blur(R, sigma)``
* rain:       ``I = clip(B + S, 0, 1)`` with ``S`` a sum of anti-aliased streaks
* haze:       ``I = J * t + A * (1 - t)``, ``t = exp(-beta * d)``

Images live in memory as float64 arrays of shape (3, H, W) in [0, 1] and on
disk as 8-bit PNG files next to a plain-text ``manifest``.
"""

from __future__ import annotations

import hashlib
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

KINDS = ("reflection", "rain", "haze")
MANIFEST = "manifest"
_MANIFEST_HEADER = "# dmgn corpus v1: id kind key=value..."


class CorpusError(OSError):
    """Missing or malformed corpus files."""


@dataclass
class ImageTriple:
    input: np.ndarray
    background: np.ndarray
    noise: np.ndarray
    kind: str
    params: dict = field(default_factory=dict)
    id: str = ""

    def __post_init__(self):
        if not (self.input.shape == self.background.shape == self.noise.shape):
            raise ValueError(
                f"triple images disagree in shape: I {self.input.shape}, "
                f"B {self.background.shape}, R {self.noise.shape}"
            )


@dataclass
class SynthesisConfig:
    """Sampling ranges for one corpus. Ranges are inclusive (lo, hi) pairs."""

    kind: str = "reflection"
    seed: int = 0
    size: int = 32
    alpha: tuple[float, float] = (0.6, 0.85)
    sigma: tuple[float, float] = (1.0, 3.0)
    streaks: int = 40
    streak_length: tuple[float, float] = (6.0, 14.0)
    streak_angle: tuple[float, float] = (-20.0, 20.0)
    streak_intensity: tuple[float, float] = (0.25, 0.6)
    beta: tuple[float, float] = (0.6, 1.6)
    airlight: tuple[float, float] = (0.75, 1.0)
    depth_scale: float = 1.0

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown corruption kind {self.kind!r}; expected one of {KINDS}")
        if self.size < 16:
            raise ValueError(f"image size must be >= 16, got {self.size}")
        checks = {
            "alpha": (self.alpha, 0.0, 1.0),
            "sigma": (self.sigma, 0.0, math.inf),
            "streak_length": (self.streak_length, 0.0, math.inf),
            "streak_angle": (self.streak_angle, -90.0, 90.0),
            "streak_intensity": (self.streak_intensity, 0.0, 1.0),
            "beta": (self.beta, 0.0, math.inf),
            "airlight": (self.airlight, 0.0, 1.0),
        }
        for name, ((lo, hi), vmin, vmax) in checks.items():
            if not (vmin <= lo <= hi <= vmax):
                raise ValueError(f"{name} range ({lo}, {hi}) must satisfy {vmin} <= lo <= hi <= {vmax}")
        if self.streaks < 0:
            raise ValueError(f"streak count must be >= 0, got {self.streaks}")
        if self.depth_scale <= 0:
            raise ValueError(f"depth_scale must be > 0, got {self.depth_scale}")


def _size2(size) -> tuple[int, int]:
    if isinstance(size, int):
        return size, size
    h, w = size
    return int(h), int(w)


def _bilinear(grid: np.ndarray, h: int, w: int) -> np.ndarray:
    """Resample a (..., gh, gw) grid to (..., h, w) with bilinear weights."""
    gh, gw = grid.shape[-2:]
    ys = np.linspace(0, gh - 1, h)
    xs = np.linspace(0, gw - 1, w)
    y0 = np.clip(np.floor(ys).astype(int), 0, gh - 2)
    x0 = np.clip(np.floor(xs).astype(int), 0, gw - 2)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    g00 = grid[..., y0[:, None], x0[None, :]]
    g01 = grid[..., y0[:, None], x0[None, :] + 1]
    g10 = grid[..., y0[:, None] + 1, x0[None, :]]
    g11 = grid[..., y0[:, None] + 1, x0[None, :] + 1]
    return (1 - fy) * ((1 - fx) * g00 + fx * g01) + fy * ((1 - fx) * g10 + fx * g11)


def _smooth_field(rng: np.random.Generator, channels: int, h: int, w: int) -> np.ndarray:
    """Multi-octave value noise rescaled to [0, 1] per channel."""
    out = np.zeros((channels, h, w))
    amp = 1.0
    for cells in (2, 4, 8, 16):
        grid = rng.random((channels, cells + 1, cells + 1))
        out += amp * _bilinear(grid, h, w)
        amp *= 0.5
    lo = out.min(axis=(1, 2), keepdims=True)
    hi = out.max(axis=(1, 2), keepdims=True)
    return (out - lo) / np.maximum(hi - lo, 1e-12)


def gen_background(seed: int, size=32) -> np.ndarray:
    """Random smooth texture with 2-6 flat rectangles or discs, shape (3, H, W)."""
    h, w = _size2(size)
    if h < 16 or w < 16:
        raise ValueError(f"background size must be at least 16x16, got {h}x{w}")
    rng = np.random.default_rng(seed)
    img = 0.15 + 0.7 * _smooth_field(rng, 3, h, w)
    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(rng.integers(2, 7)):
        color = rng.random(3)
        opacity = rng.uniform(0.6, 1.0)
        if rng.random() < 0.5:
            y0, x0 = rng.integers(0, h - 4), rng.integers(0, w - 4)
            y1 = y0 + rng.integers(4, max(5, h // 2))
            x1 = x0 + rng.integers(4, max(5, w // 2))
            mask = (yy >= y0) & (yy < y1) & (xx >= x0) & (xx < x1)
        else:
            cy, cx = rng.uniform(0, h), rng.uniform(0, w)
            r = rng.uniform(3, max(4.0, min(h, w) / 4))
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        img = np.where(mask, (1 - opacity) * img + opacity * color[:, None, None], img)
    return np.clip(img, 0.0, 1.0)


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Per-channel Gaussian blur, reflect boundary, kernel truncated at 4 sigma."""
    if sigma <= 0:
        return img.copy()
    return gaussian_filter(img, sigma=(0, sigma, sigma), mode="reflect", truncate=4.0)


def synth_reflection(B: np.ndarray, R: np.ndarray, alpha: float, sigma: float) -> ImageTriple:
    if B.shape != R.shape:
        raise ValueError(f"synth_reflection: background {B.shape} and reflection {R.shape} differ")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"synth_reflection: alpha must lie in [0, 1], got {alpha}")
    if sigma < 0:
        raise ValueError(f"synth_reflection: sigma must be >= 0, got {sigma}")
    noise = (1.0 - alpha) * gaussian_blur(R, sigma)
    I = alpha * B + noise
    return ImageTriple(I, B.copy(), noise, "reflection", {"alpha": float(alpha), "sigma": float(sigma)})


def streak_segments(
    shape: tuple[int, int], count: int, length: float, angle: float, seed: int
) -> np.ndarray:
    """Endpoints (x0, y0, x1, y1) of ``count`` parallel streaks.

    ``angle`` is in degrees from vertical; 90 gives horizontal streaks.
    """
    h, w = shape
    rng = np.random.default_rng(seed)
    cx = rng.uniform(0, w - 1, count)
    cy = rng.uniform(0, h - 1, count)
    a = math.radians(angle)
    dx, dy = 0.5 * length * math.sin(a), 0.5 * length * math.cos(a)
    return np.stack([cx - dx, cy - dy, cx + dx, cy + dy], axis=1)


def render_streaks(shape: tuple[int, int], segments: np.ndarray, intensity: float) -> np.ndarray:
    """Single-channel streak layer, ``min(1, sum_k intensity * max(0, 1 - dist_k))``.

    ``dist_k`` is the Euclidean distance from a pixel centre to segment ``k``.
    """
    h, w = shape
    layer = np.zeros((h, w))
    if len(segments) == 0:
        return layer
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    for x0, y0, x1, y1 in np.asarray(segments, dtype=float):
        vx, vy = x1 - x0, y1 - y0
        ll = vx * vx + vy * vy
        if ll > 0:
            u = np.clip(((xx - x0) * vx + (yy - y0) * vy) / ll, 0.0, 1.0)
        else:
            u = np.zeros_like(xx)
        d = np.hypot(xx - (x0 + u * vx), yy - (y0 + u * vy))
        layer += intensity * np.maximum(0.0, 1.0 - d)
    return np.minimum(layer, 1.0)


def synth_rain(
    B: np.ndarray,
    count: int,
    length: float = 10.0,
    angle: float = 0.0,
    intensity: float = 0.4,
    streak_seed: int = 0,
) -> ImageTriple:
    if count < 0:
        raise ValueError(f"synth_rain: streak count must be >= 0, got {count}")
    if length < 0 or not 0.0 <= intensity <= 1.0 or not -90.0 <= angle <= 90.0:
        raise ValueError(
            f"synth_rain: need length >= 0, intensity in [0, 1], angle in [-90, 90]; "
            f"got {length}, {intensity}, {angle}"
        )
    h, w = B.shape[1:]
    segs = streak_segments((h, w), count, length, angle, streak_seed)
    S = np.broadcast_to(render_streaks((h, w), segs, intensity), B.shape).copy()
    I = np.clip(B + S, 0.0, 1.0)
    params = {
        "count": int(count),
        "length": float(length),
        "angle": float(angle),
        "intensity": float(intensity),
        "streak_seed": int(streak_seed),
    }
    return ImageTriple(I, B.copy(), S, "rain", params)


def depth_field(seed: int, shape: tuple[int, int], scale: float = 1.0) -> np.ndarray:
    """Smooth, strictly positive depth map in [0.25 * scale, scale]."""
    h, w = shape
    rng = np.random.default_rng(seed)
    ramp = np.linspace(1.0, 0.0, h)[:, None] * np.ones((1, w))
    f = 0.5 * _smooth_field(rng, 1, h, w)[0] + 0.5 * ramp
    f = (f - f.min()) / max(f.max() - f.min(), 1e-12)
    return scale * (0.25 + 0.75 * f)


def synth_haze(
    J: np.ndarray, beta: float, depth_seed: int, airlight: Sequence[float], depth_scale: float = 1.0
) -> ImageTriple:
    if beta < 0:
        raise ValueError(f"synth_haze: beta must be >= 0, got {beta}")
    A = np.asarray(airlight, dtype=float).reshape(3)
    if np.any(A < 0) or np.any(A > 1):
        raise ValueError(f"synth_haze: airlight components must lie in [0, 1], got {A.tolist()}")
    d = depth_field(depth_seed, J.shape[1:], depth_scale)
    t = np.exp(-beta * d)[None]
    noise = A[:, None, None] * (1.0 - t)
    I = J * t + noise
    params = {
        "beta": float(beta),
        "depth_seed": int(depth_seed),
        "depth_scale": float(depth_scale),
        "airlight": tuple(float(a) for a in A),
    }
    return ImageTriple(I, J.copy(), noise, "haze", params)


def recompose(triple: ImageTriple) -> np.ndarray:
    """Rebuild the input image from (background, noise, params)."""
    B, N, p = triple.background, triple.noise, triple.params
    if triple.kind == "reflection":
        return p["alpha"] * B + N
    if triple.kind == "rain":
        return np.clip(B + N, 0.0, 1.0)
    if triple.kind == "haze":
        t = np.exp(-p["beta"] * depth_field(p["depth_seed"], B.shape[1:], p["depth_scale"]))[None]
        return B * t + N
    raise ValueError(f"unknown corruption kind {triple.kind!r}")


# --------------------------------------------------------------------------
# corpora


def _sample_seed(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def make_triple(config: SynthesisConfig, index: int) -> ImageTriple:
    """The ``index``-th sample of the corpus described by ``config``."""
    rng = _sample_seed(config.seed, index)
    b_seed, r_seed, aux_seed = (int(s) for s in rng.integers(0, 2**31 - 1, 3))
    B = gen_background(b_seed, config.size)
    if config.kind == "reflection":
        R = gen_background(r_seed, config.size)
        tr = synth_reflection(B, R, rng.uniform(*config.alpha), rng.uniform(*config.sigma))
        tr.params["reflection_seed"] = r_seed
    elif config.kind == "rain":
        tr = synth_rain(
            B,
            config.streaks,
            rng.uniform(*config.streak_length),
            rng.uniform(*config.streak_angle),
            rng.uniform(*config.streak_intensity),
            aux_seed,
        )
    elif config.kind == "haze":
        A = np.full(3, rng.uniform(*config.airlight))
        tr = synth_haze(B, rng.uniform(*config.beta), aux_seed, A, config.depth_scale)
    else:
        raise ValueError(f"unknown corruption kind {config.kind!r}")
    tr.params["background_seed"] = b_seed
    tr.id = f"{index:05d}"
    return tr


def generate_corpus(config: SynthesisConfig, count: int, workers: int = 1) -> list[ImageTriple]:
    config.validate()
    if workers > 1 and count > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(make_triple, [config] * count, range(count)))
    return [make_triple(config, i) for i in range(count)]


def quantize(img: np.ndarray) -> np.ndarray:
    """Round [0, 1] values onto the 1/255 grid used by stored files."""
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def _format_value(v) -> str:
    if isinstance(v, (tuple, list)):
        return ",".join(repr(float(x)) for x in v)
    if isinstance(v, (bool, np.bool_)):
        raise TypeError("boolean manifest values are not supported")
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def _parse_value(s: str):
    if "," in s:
        return tuple(float(x) for x in s.split(","))
    try:
        return int(s)
    except ValueError:
        return float(s)


def write_png(path: Path, img: np.ndarray) -> None:
    u8 = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(u8).save(path, format="PNG")


def read_png(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    except FileNotFoundError:
        raise CorpusError(f"missing image file {path}") from None
    except OSError as exc:
        raise CorpusError(f"unreadable image file {path}: {exc}") from None
    return arr.transpose(2, 0, 1) / 255.0


def corpus_write(triples: Iterable[ImageTriple], directory) -> Path:
    """Write images and manifest; returns the manifest path."""
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    lines = [_MANIFEST_HEADER]
    for k, tr in enumerate(triples):
        tid = tr.id or f"{k:05d}"
        if any(c.isspace() for c in tid) or "=" in tid:
            raise ValueError(f"triple id {tid!r} must not contain whitespace or '='")
        for suffix, img in (("I", tr.input), ("B", tr.background), ("R", tr.noise)):
            write_png(root / f"{tid}_{suffix}.png", img)
        fields = [tid, tr.kind] + [f"{key}={_format_value(val)}" for key, val in sorted(tr.params.items())]
        lines.append(" ".join(fields))
    path = root / MANIFEST
    path.write_text("\n".join(lines) + "\n")
    return path


def read_manifest(directory) -> list[tuple[str, str, dict]]:
    path = Path(directory) / MANIFEST
    if not path.is_file():
        raise CorpusError(f"no manifest at {path}")
    records = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) < 2:
            raise CorpusError(f"{path}:{lineno}: expected 'id kind key=value...', got {line!r}")
        params = {}
        for item in parts[2:]:
            key, sep, val = item.partition("=")
            if not sep:
                raise CorpusError(f"{path}:{lineno}: malformed parameter {item!r}")
            try:
                params[key] = _parse_value(val)
            except ValueError:
                raise CorpusError(f"{path}:{lineno}: bad value for {key!r}: {val!r}") from None
        if parts[1] not in KINDS:
            raise CorpusError(f"{path}:{lineno}: unknown kind {parts[1]!r}")
        records.append((parts[0], parts[1], params))
    return records


def corpus_read(directory) -> list[ImageTriple]:
    root = Path(directory)
    out = []
    for tid, kind, params in read_manifest(root):
        imgs = [read_png(root / f"{tid}_{s}.png") for s in ("I", "B", "R")]
        try:
            out.append(ImageTriple(*imgs, kind=kind, params=params, id=tid))
        except ValueError as exc:
            raise CorpusError(f"corpus entry {tid}: {exc}") from None
    return out


def corpus_checksum(directory) -> str:
    """SHA-256 over the manifest and every image file, in sorted name order."""
    root = Path(directory)
    h = hashlib.sha256()
    names = sorted(p.name for p in root.iterdir() if p.name == MANIFEST or p.suffix == ".png")
    for name in names:
        h.update(name.encode())
        h.update((root / name).read_bytes())
    return h.hexdigest()
