"""The deep-masking generative network.

Data flow for one batch ``I`` of shape (N, 3, H, W)::

    F            = feature_head(I)               # frozen pyramid hypercolumn + 2 learnable convs
    F_b, F_r, A  = separate(F)                   # spatial attention split, F_b + F_r == F
    B_coarse     = coarse_generator(F_b, "gb")   # encoder/decoder of masking cells
    R            = coarse_generator(F_r, "gr")
    B_refined    = refine(B_coarse, R, I, F_b)   # constant-resolution masking cells

Every gating mask is recorded in a :class:`MaskTrace`. Which pieces are
active is controlled by a :class:`Wiring`, so all ablation variants share one
code path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

VARIANTS = ("base", "rdmc", "r-rdmc", "coarse", "full")


@dataclass(frozen=True)
class ModelConfig:
    width: int = 16
    coarse_cells: int = 4
    refine_cells: int = 3
    pyramid_widths: tuple[int, ...] = (8, 16, 32)
    fuse_alpha: float = 0.5
    decay: float = 0.9
    se_reduction: int = 4
    disc_width: int = 16
    pyramid_seed: int = 20200810

    @property
    def pyramid_levels(self) -> int:
        return len(self.pyramid_widths)

    def validate(self) -> None:
        if min(self.width, self.refine_cells, self.coarse_cells, self.se_reduction, self.disc_width) < 1:
            raise ValueError("widths and cell counts must be >= 1")
        if self.coarse_cells % 2:
            raise ValueError(f"coarse_cells must be even (encoder/decoder pairs), got {self.coarse_cells}")
        if not self.pyramid_widths or min(self.pyramid_widths) < 1:
            raise ValueError(f"pyramid_widths must be non-empty and positive, got {self.pyramid_widths}")
        if not 0.0 <= self.fuse_alpha <= 1.0:
            raise ValueError(f"fuse_alpha must lie in [0, 1], got {self.fuse_alpha}")
        if not 0.0 <= self.decay <= 1.0:
            raise ValueError(f"decay must lie in [0, 1], got {self.decay}")

    @property
    def size_multiple(self) -> int:
        """Input height and width must be multiples of this."""
        return 2 ** max(self.pyramid_levels - 1, self.coarse_cells // 2)


@dataclass(frozen=True)
class Wiring:
    """Which mechanisms a forward pass uses.

    ``cells`` is ``"rdmc"`` (masked residual), ``"plain"`` (conv block, no mask,
    no residual) or ``"identity"`` (cells skipped; a test oracle).
    """

    cells: str = "rdmc"
    noise_branch: bool = True
    ndm: bool = True
    aca: bool = True
    refine: bool = True
    skips: bool = True


def wiring_for(variant: str) -> Wiring:
    if variant == "base":
        return Wiring(cells="plain", noise_branch=False, ndm=False, aca=False)
    if variant == "rdmc":
        return Wiring(noise_branch=False, ndm=False, aca=False)
    if variant == "r-rdmc":
        return Wiring(aca=False)
    if variant == "full":
        return Wiring()
    if variant == "coarse":
        return Wiring(ndm=False, aca=False, refine=False)
    raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")


# --------------------------------------------------------------------------
# parameters


class ModelParams:
    """Named parameter tensors; frozen ones never receive gradients."""

    def __init__(self, tensors: dict[str, Tensor] | None = None, frozen: set[str] | None = None):
        self.tensors: dict[str, Tensor] = dict(tensors or {})
        self.frozen: set[str] = set(frozen or ())

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self.tensors[name]
        except KeyError:
            raise KeyError(f"no parameter named {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def add(self, name: str, value: np.ndarray, frozen: bool = False) -> None:
        if name in self.tensors:
            raise KeyError(f"duplicate parameter name {name!r}")
        self.tensors[name] = Tensor(value, requires_grad=not frozen, dtype=value.dtype, name=name)
        if frozen:
            self.frozen.add(name)

    def trainable(self) -> dict[str, Tensor]:
        return {k: t for k, t in self.tensors.items() if k not in self.frozen}

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.tensors.items()}

    def update(self, arrays: dict[str, np.ndarray]) -> None:
        """Replace values in place, keeping tensor identity and flags."""
        for k, v in arrays.items():
            t = self[k]
            if v.shape != t.shape:
                raise ShapeError(f"parameter {k!r}: expected shape {t.shape}, got {v.shape}")
            t.data = np.asarray(v, dtype=t.dtype, order="C")

    def astype(self, dtype) -> "ModelParams":
        out = ModelParams(frozen=self.frozen)
        for k, t in self.tensors.items():
            data = t.data.copy() if dtype is None else t.data.astype(dtype)
            out.tensors[k] = Tensor(data, requires_grad=k not in self.frozen, name=k)
        return out

    def copy(self) -> "ModelParams":
        return self.astype(None)

    def merged(self, other: "ModelParams") -> "ModelParams":
        out = ModelParams(self.tensors, self.frozen)
        for k, t in other.tensors.items():
            if k in out.tensors:
                raise KeyError(f"duplicate parameter name {k!r}")
            out.tensors[k] = t
        out.frozen |= other.frozen
        return out


def _uniform(rng: np.random.Generator, shape, fan_in: int, gain: float, dtype) -> np.ndarray:
    bound = gain * math.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _conv(params: ModelParams, rng, name, cin, cout, k, relu_follows=True, frozen=False, dtype=None) -> None:
    dtype = dtype or ad.default_dtype()
    gain = math.sqrt(2.0) if relu_follows else 1.0
    params.add(f"{name}.w", _uniform(rng, (cout, cin, k, k), cin * k * k, gain, dtype), frozen)
    params.add(f"{name}.b", np.zeros(cout, dtype=dtype), frozen)


def _dense(params: ModelParams, rng, name, din, dout, relu_follows=True) -> None:
    dtype = ad.default_dtype()
    gain = math.sqrt(2.0) if relu_follows else 1.0
    params.add(f"{name}.w", _uniform(rng, (dout, din), din, gain, dtype))
    params.add(f"{name}.b", np.zeros(dout, dtype=dtype))


def _cell_params(params, rng, name, width, cells: str) -> None:
    _conv(params, rng, f"{name}.h1", width, width, 3)
    _conv(params, rng, f"{name}.h2", width, width, 3, relu_follows=False)
    if cells == "rdmc":
        _conv(params, rng, f"{name}.m1", width, width, 1, relu_follows=False)
        _conv(params, rng, f"{name}.m2", width, width, 1, relu_follows=False)


def _generator_params(params, rng, prefix, cfg: ModelConfig, cells: str) -> None:
    c = cfg.width
    for k in range(cfg.coarse_cells // 2):
        _conv(params, rng, f"{prefix}.down{k}", c << k, c << (k + 1), 3)
        _cell_params(params, rng, f"{prefix}.enc{k}", c << (k + 1), cells)
    for k in reversed(range(cfg.coarse_cells // 2)):
        _conv(params, rng, f"{prefix}.up{k}", c << (k + 1), c << k, 3)
        _cell_params(params, rng, f"{prefix}.dec{k}", c << k, cells)
    _conv(params, rng, f"{prefix}.out", c, 3, 3, relu_follows=False)


def pyramid_params(cfg: ModelConfig, dtype=None) -> ModelParams:
    """Frozen feature pyramid, seeded independently of the learnable weights."""
    params = ModelParams()
    rng = np.random.default_rng(cfg.pyramid_seed)
    cin = 3
    for level, cout in enumerate(cfg.pyramid_widths):
        _conv(params, rng, f"pyramid.l{level}", cin, cout, 3, frozen=True, dtype=dtype)
        cin = cout
    return params


def init_params(cfg: ModelConfig, wiring: Wiring, seed: int = 0) -> ModelParams:
    """Fresh parameters for ``wiring``; uniform fan-in init, zero biases."""
    cfg.validate()
    params = pyramid_params(cfg)
    rng = np.random.default_rng(seed)
    c = cfg.width
    hyper = 3 + sum(cfg.pyramid_widths)
    _conv(params, rng, "head.conv1", hyper, c, 3)
    _conv(params, rng, "head.conv2", c, c, 3, relu_follows=False)
    _conv(params, rng, "sep.att1", c, c, 3)
    _conv(params, rng, "sep.att2", c, c, 1, relu_follows=False)
    cells = "plain" if wiring.cells == "plain" else "rdmc"
    _generator_params(params, rng, "gb", cfg, cells)
    if wiring.noise_branch:
        _generator_params(params, rng, "gr", cfg, cells)
    if wiring.refine:
        _conv(params, rng, "refine.proj", 3 * c, c, 3)
        for n in range(cfg.refine_cells):
            _cell_params(params, rng, f"refine.cell{n}", c, cells)
        _conv(params, rng, "refine.out", c, 3, 3, relu_follows=False)
    if wiring.refine and wiring.aca:
        _conv(params, rng, "aca.conv", c, c, 5)
        params.add("aca.sharpness", np.ones(c, dtype=ad.default_dtype()))
        hidden = max(1, c // cfg.se_reduction)
        _dense(params, rng, "aca.se1", c, hidden)
        _dense(params, rng, "aca.se2", hidden, c, relu_follows=False)
    if wiring.refine and wiring.ndm:
        _conv(params, rng, "ndm.att1", 2 * c, c, 3)
        _conv(params, rng, "ndm.att2", c, 1, 1, relu_follows=False)
    return params


# --------------------------------------------------------------------------
# trace


@dataclass
class MaskEntry:
    generator: str
    index: int
    mask: np.ndarray


@dataclass
class MaskTrace:
    entries: list[MaskEntry] = field(default_factory=list)
    separator: np.ndarray | None = None
    noise_map: np.ndarray | None = None

    def record(self, generator: str, index: int, mask: Tensor) -> None:
        self.entries.append(MaskEntry(generator, index, mask.data.copy()))

    def __len__(self) -> int:
        return len(self.entries)

    def mean_by_cell(self) -> list[tuple[str, int, float]]:
        return [(e.generator, e.index, float(e.mask.mean())) for e in self.entries]


# --------------------------------------------------------------------------
# building blocks


def _c(x: Tensor, params: ModelParams, name: str, stride: int = 1) -> Tensor:
    w = params[f"{name}.w"]
    return ad.conv2d(x, w, params[f"{name}.b"], stride=stride, padding=w.shape[-1] // 2)


def pyramid(x: Tensor, params: ModelParams, levels: int) -> list[Tensor]:
    """Frozen multi-scale features; level ``l`` has resolution H / 2**l."""
    feats = []
    h = x
    for level in range(levels):
        h = ad.relu(_c(h, params, f"pyramid.l{level}", stride=1 if level == 0 else 2))
        feats.append(h)
    return feats


def _check_image(I: Tensor, cfg: ModelConfig, what: str) -> None:
    if I.data.ndim != 4 or I.shape[1] != 3:
        raise ShapeError(f"{what}: expected (N, 3, H, W) images, got {I.shape}")
    m = cfg.size_multiple
    if I.shape[2] % m or I.shape[3] % m:
        raise ShapeError(f"{what}: image size {I.shape[2]}x{I.shape[3]} not divisible by {m}")


def hypercolumn(I: Tensor, params: ModelParams, cfg: ModelConfig) -> Tensor:
    feats = pyramid(I, params, cfg.pyramid_levels)
    ups = [f if level == 0 else ad.upsample(f, 2**level) for level, f in enumerate(feats)]
    return ad.concat([I] + ups, axis=1)


def feature_head(I: Tensor, params: ModelParams, cfg: ModelConfig) -> Tensor:
    _check_image(I, cfg, "feature_head")
    hc = hypercolumn(I, params, cfg)
    return _c(ad.relu(_c(hc, params, "head.conv1")), params, "head.conv2")


def split_by_attention(F: Tensor, A: Tensor) -> tuple[Tensor, Tensor]:
    Fb = F * A
    return Fb, F - Fb


def separate(F: Tensor, params: ModelParams) -> tuple[Tensor, Tensor, Tensor]:
    if F.data.ndim != 4 or F.shape[1] != params["sep.att1.w"].shape[1]:
        raise ShapeError(f"separate: features {F.shape} do not match separator width")
    logits = ad.tanh(_c(ad.relu(_c(F, params, "sep.att1")), params, "sep.att2"))
    A = ad.sigmoid(logits)
    Fb, Fr = split_by_attention(F, A)
    return Fb, Fr, A


def fuse_mask(m, background_map, n: int, alpha: float, q: float):
    """Blend a learned mask with a background map, decaying with cell index ``n``.

    Works on tensors (differentiable), arrays and floats alike.
    """
    if n < 1:
        raise ValueError(f"fuse_mask: cell index n starts at 1, got {n}")
    c = alpha * q ** (n - 1)
    return (m + c * background_map) * (1.0 / (1.0 + c))


def refine_features(X: Tensor, params: ModelParams, name: str) -> Tensor:
    return _c(ad.relu(_c(X, params, f"{name}.h1")), params, f"{name}.h2")


def cell_mask(Hx: Tensor, params: ModelParams, name: str) -> Tensor:
    return ad.sigmoid(_c(ad.tanh(_c(Hx, params, f"{name}.m1")), params, f"{name}.m2"))


def rdmc(X: Tensor, params: ModelParams, name: str, fuse=None) -> tuple[Tensor, Tensor]:
    """Residual deep-masking cell: ``Y = X + mask * H(X)``.

    ``fuse`` is an optional ``(background_map, n, alpha, q)`` tuple; when given,
    the learned mask is replaced by its fusion with the background map.
    """
    width = params[f"{name}.h1.w"].shape[1]
    if X.data.ndim != 4 or X.shape[1] != width:
        raise ShapeError(f"rdmc {name}: input {X.shape} does not match cell width {width}")
    Hx = refine_features(X, params, name)
    mask = cell_mask(Hx, params, name)
    if fuse is not None:
        mask = fuse_mask(mask, *fuse)
    return X + mask * Hx, mask


def _apply_cell(X, params, name, wiring: Wiring, trace, tag, index, fuse=None) -> Tensor:
    if wiring.cells == "identity":
        return X
    if wiring.cells == "plain":
        width = params[f"{name}.h1.w"].shape[1]
        if X.shape[1] != width:
            raise ShapeError(f"plain cell {name}: input {X.shape} does not match width {width}")
        return ad.relu(refine_features(X, params, name))
    Y, mask = rdmc(X, params, name, fuse)
    if trace is not None:
        trace.record(tag, index, mask)
    return Y


def coarse_generator(
    Fx: Tensor, params: ModelParams, tag: str, cfg: ModelConfig, wiring: Wiring, trace: MaskTrace | None = None
) -> tuple[Tensor, list[Tensor]]:
    """Downsample/upsample stack of cells with additive long-range skips.

    Returns the sigmoid-projected image and the encoder skip features.
    """
    if Fx.data.ndim != 4 or Fx.shape[1] != cfg.width:
        raise ShapeError(f"coarse_generator {tag}: expected {cfg.width}-channel features, got {Fx.shape}")
    levels = cfg.coarse_cells // 2
    skips = [Fx]
    h = Fx
    n = 0
    for k in range(levels):
        h = ad.relu(_c(h, params, f"{tag}.down{k}", stride=2))
        n += 1
        h = _apply_cell(h, params, f"{tag}.enc{k}", wiring, trace, tag, n)
        skips.append(h)
    for k in reversed(range(levels)):
        h = ad.relu(_c(ad.upsample(h, 2), params, f"{tag}.up{k}"))
        if wiring.skips:
            h = h + skips[k]
        n += 1
        h = _apply_cell(h, params, f"{tag}.dec{k}", wiring, trace, tag, n)
    return ad.sigmoid(_c(h, params, f"{tag}.out")), skips[:levels]


def squeeze_excite(feat: Tensor, params: ModelParams) -> Tensor:
    """Channel attention in [0, 1]: pool -> dense/ReLU -> dense/sigmoid, shape (N, C)."""
    z = ad.relu(ad.dense(ad.global_avg_pool(feat), params["aca.se1.w"], params["aca.se1.b"]))
    return ad.sigmoid(ad.dense(z, params["aca.se2.w"], params["aca.se2.b"]))


def sharpen(feat: Tensor, params: ModelParams) -> Tensor:
    """Per-channel sigmoid normalisation with learned sharpness."""
    fc = ad.relu(_c(feat, params, "aca.conv", stride=2))
    w = ad.reshape(params["aca.sharpness"], (1, -1, 1, 1))
    return ad.sigmoid(fc * w) * fc


def aca(feat: Tensor, params: ModelParams, return_attention: bool = False):
    """Adapted channel-wise attention: reweight each channel of ``feat``."""
    if feat.data.ndim != 4 or feat.shape[1] != params["aca.sharpness"].shape[0]:
        raise ShapeError(f"aca: features {feat.shape} do not match attention width")
    a = squeeze_excite(sharpen(feat, params), params)
    out = feat * ad.reshape(a, (a.shape[0], a.shape[1], 1, 1))
    return (out, a) if return_attention else out


def ndm(F_I: Tensor, F_R: Tensor, params: ModelParams) -> tuple[Tensor, Tensor]:
    """Noise distribution map ``A_r`` (N, 1, H, W) and its complement ``A_b``."""
    if F_I.shape != F_R.shape:
        raise ShapeError(f"ndm: input features {F_I.shape} and noise features {F_R.shape} differ")
    x = ad.concat([F_I, F_R], axis=1)
    A_r = ad.sigmoid(ad.tanh(_c(ad.relu(_c(x, params, "ndm.att1")), params, "ndm.att2")))
    return A_r, 1.0 - A_r


def refine(
    B_coarse: Tensor,
    R: Tensor | None,
    I: Tensor,
    F_b: Tensor,
    params: ModelParams,
    cfg: ModelConfig,
    wiring: Wiring,
    trace: MaskTrace | None = None,
    F_I: Tensor | None = None,
) -> Tensor:
    """Constant-resolution refinement of ``B_coarse`` contrasted against ``R``."""
    if B_coarse.shape != I.shape or (R is not None and R.shape != I.shape):
        raise ShapeError(
            f"refine: image shapes differ: B_coarse {B_coarse.shape}, I {I.shape}, "
            f"R {None if R is None else R.shape}"
        )
    F_B = feature_head(B_coarse, params, cfg)
    F_R = feature_head(R, params, cfg) if (R is not None and (wiring.aca or wiring.ndm)) else None
    if wiring.aca:
        E_b = aca(F_b, params)
        E_r = -aca(F_R, params)
    else:
        E_b = F_b
        E_r = Tensor(np.zeros(F_b.shape, dtype=F_b.dtype))
    E = ad.concat([E_b, E_r, F_B], axis=1)
    h = ad.relu(_c(E, params, "refine.proj"))
    A_b = None
    if wiring.ndm:
        if F_I is None:
            F_I = feature_head(I, params, cfg)
        A_r, A_b = ndm(F_I, F_R, params)
        if trace is not None:
            trace.noise_map = A_r.data.copy()
    for n in range(1, cfg.refine_cells + 1):
        fuse = (A_b, n, cfg.fuse_alpha, cfg.decay) if A_b is not None else None
        h = _apply_cell(h, params, f"refine.cell{n - 1}", wiring, trace, "refine", n, fuse)
    return ad.sigmoid(_c(h, params, "refine.out"))


@dataclass
class DMGNOutput:
    coarse: Tensor
    noise: Tensor | None
    refined: Tensor | None
    trace: MaskTrace

    @property
    def final(self) -> Tensor:
        return self.refined if self.refined is not None else self.coarse


def dmgn_forward(I: Tensor, params: ModelParams, cfg: ModelConfig, wiring: Wiring | None = None) -> DMGNOutput:
    wiring = wiring or Wiring()
    _check_image(I, cfg, "dmgn_forward")
    trace = MaskTrace()
    F = feature_head(I, params, cfg)
    F_b, F_r, A = separate(F, params)
    trace.separator = A.data.copy()
    B_coarse, _ = coarse_generator(F_b, params, "gb", cfg, wiring, trace)
    R = None
    if wiring.noise_branch:
        R, _ = coarse_generator(F_r, params, "gr", cfg, wiring, trace)
    B_ref = None
    if wiring.refine:
        B_ref = refine(B_coarse, R, I, F_b, params, cfg, wiring, trace, F_I=F)
    return DMGNOutput(B_coarse, R, B_ref, trace)


def with_fuse_alpha(cfg: ModelConfig, alpha: float) -> ModelConfig:
    return replace(cfg, fuse_alpha=alpha)
