"""Finite-difference check of the full forward pass, grouped by layer."""

from __future__ import annotations

from collections import defaultdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .net import ModelConfig, Wiring, dmgn_forward, init_params


def group_of(name: str) -> str:
    # "gb.enc0.h1.w" -> "gb.enc0"; "aca.sharpness" -> "aca.sharpness"
    if name.endswith((".w", ".b")):
        name = name[:-2]
    return ".".join(name.split(".")[:2])


def full_pass_gradcheck(
    size: int = 8, channels: int = 4, seed: int = 0, samples: int = 3, eps: float = 1e-4
) -> dict[str, float]:
    """Max relative error of d mean(B_refined) / d theta per parameter group.

    Runs in float64 on a tiny model with ``channels`` feature width;
    ``samples`` coordinates are probed per parameter tensor.
    """
    cfg = ModelConfig(width=channels, pyramid_widths=(channels,) * 3, disc_width=channels)
    cfg.validate()
    rng = np.random.default_rng(seed)
    errors: dict[str, float] = defaultdict(float)
    with ad.precision(np.float64):
        params = init_params(cfg, Wiring(), seed)
        params["aca.sharpness"].data[...] = np.linspace(0.5, 2.0, channels)
        image = Tensor(rng.uniform(0, 1, (1, 3, size, size)))
        loss = lambda _t: ad.mean(dmgn_forward(image, params, cfg).refined)  # noqa: E731
        for name, t in params.trainable().items():
            coords = rng.choice(t.size, size=min(samples, t.size), replace=False)
            err, _, _ = ad.finite_diff_compare(loss, t, eps=eps, coords=coords)
            g = group_of(name)
            errors[g] = max(errors[g], err)
    return dict(errors)
