"""Reconstruction, perceptual and adversarial objectives plus the critic."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .net import DMGNOutput, ModelConfig, ModelParams, pyramid


@dataclass(frozen=True)
class LossWeights:
    refine_l1: float = 1.0
    coarse_l1: float = 0.5
    refine_perceptual: float = 0.1
    coarse_perceptual: float = 0.05
    refine_adv: float = 0.01

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise ValueError(f"loss weight {k} must be >= 0, got {v}")


def _same_shape(kind: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{kind}: shapes differ: {a.shape} vs {b.shape}")


def l1_loss(y: Tensor, y_gt: Tensor) -> Tensor:
    """Mean absolute difference over all elements."""
    _same_shape("l1_loss", y, y_gt)
    return ad.mean(ad.abs_(y - y_gt))


def perceptual_loss(y: Tensor, y_gt: Tensor, params: ModelParams, cfg: ModelConfig) -> Tensor:
    """Sum over pyramid levels of the per-element mean |phi_l(y) - phi_l(y_gt)|.

    Batched inputs are averaged over the batch as well.
    """
    _same_shape("perceptual_loss", y, y_gt)
    fy = pyramid(y, params, cfg.pyramid_levels)
    with ad.no_grad():
        fg = pyramid(ad.detach(y_gt), params, cfg.pyramid_levels)
    total = None
    for a, b in zip(fy, fg):
        term = ad.mean(ad.abs_(a - b))
        total = term if total is None else total + term
    return total


# --------------------------------------------------------------------------
# critic


def init_discriminator(cfg: ModelConfig, seed: int = 0) -> ModelParams:
    """Three stride-2 4x4 conv blocks and a 1x1 linear head."""
    params = ModelParams()
    rng = np.random.default_rng(seed)
    dtype = ad.default_dtype()
    cin = 6
    for k in range(3):
        cout = cfg.disc_width << k
        bound = math.sqrt(2.0) * math.sqrt(3.0 / (cin * 16))
        params.add(f"disc.l{k}.w", rng.uniform(-bound, bound, (cout, cin, 4, 4)).astype(dtype))
        params.add(f"disc.l{k}.b", np.zeros(cout, dtype=dtype))
        cin = cout
    bound = math.sqrt(3.0 / cin)
    params.add("disc.head.w", rng.uniform(-bound, bound, (1, cin, 1, 1)).astype(dtype))
    params.add("disc.head.b", np.zeros(1, dtype=dtype))
    return params


def discriminate(candidate: Tensor, I: Tensor, dparams: ModelParams) -> Tensor:
    """Realism score map of shape (N, 1, H/8, W/8); no output squashing."""
    _same_shape("discriminate", candidate, I)
    h = ad.concat([candidate, I], axis=1)
    for k in range(3):
        h = ad.relu(ad.conv2d(h, dparams[f"disc.l{k}.w"], dparams[f"disc.l{k}.b"], stride=2, padding=1))
    return ad.conv2d(h, dparams["disc.head.w"], dparams["disc.head.b"])


def clip_discriminator(dparams: ModelParams, limit: float = 0.05) -> None:
    for t in dparams.tensors.values():
        np.clip(t.data, -limit, limit, out=t.data)


def adv_losses(B: Tensor, B_gt: Tensor, I: Tensor, D) -> tuple[Tensor, Tensor]:
    """Critic-form losses ``(-mean D(B, I), -mean D(B_gt, I) + mean D(B, I))``.

    ``D`` is a callable ``(candidate, I) -> score map``. ``B`` is detached
    inside the critic loss so it never pushes gradient into the generator.
    """
    _same_shape("adv_losses", B, B_gt)
    _same_shape("adv_losses", B, I)
    gen = -ad.mean(D(B, I))
    disc = ad.mean(D(ad.detach(B), I)) - ad.mean(D(B_gt, I))
    return gen, disc


def generator_adv_loss(B: Tensor, I: Tensor, D) -> Tensor:
    return -ad.mean(D(B, I))


def discriminator_loss(B: Tensor, B_gt: Tensor, I: Tensor, D) -> Tensor:
    return ad.mean(D(ad.detach(B), I)) - ad.mean(D(B_gt, I))


def total_loss(
    out: DMGNOutput,
    B_gt: Tensor,
    R_gt: Tensor,
    I: Tensor,
    D,
    params: ModelParams,
    cfg: ModelConfig,
    weights: LossWeights = LossWeights(),
) -> tuple[Tensor, dict[str, float]]:
    """Joint objective ``L = L_refine + L_coarse``.

    The coarse phase never carries an adversarial term. When the output has no
    noise branch its terms are dropped; when it has no refined image the
    refine terms are dropped. Components are reported as plain floats.
    """
    w = weights
    comps: dict[str, float] = {}
    coarse_terms = [
        ("coarse_l1", w.coarse_l1, l1_loss(out.coarse, B_gt)),
        ("coarse_perceptual", w.coarse_perceptual, perceptual_loss(out.coarse, B_gt, params, cfg)),
    ]
    if out.noise is not None:
        coarse_terms += [
            ("noise_l1", w.coarse_l1, l1_loss(out.noise, R_gt)),
            ("noise_perceptual", w.coarse_perceptual, perceptual_loss(out.noise, R_gt, params, cfg)),
        ]
    refine_terms = []
    if out.refined is not None:
        refine_terms = [
            ("refine_l1", w.refine_l1, l1_loss(out.refined, B_gt)),
            ("refine_perceptual", w.refine_perceptual, perceptual_loss(out.refined, B_gt, params, cfg)),
        ]
        if D is not None and w.refine_adv > 0:
            refine_terms.append(("refine_adv", w.refine_adv, generator_adv_loss(out.refined, I, D)))

    def weighted(terms):
        acc = None
        for name, weight, value in terms:
            comps[name] = float(value.data)
            term = value * weight
            acc = term if acc is None else acc + term
        return acc

    L_c = weighted(coarse_terms)
    L_r = weighted(refine_terms)
    comps["coarse"] = float(L_c.data)
    comps["refine"] = float(L_r.data) if L_r is not None else 0.0
    L = L_c if L_r is None else L_r + L_c
    comps["total"] = float(L.data)
    return L, comps
