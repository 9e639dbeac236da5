"""Training loop, checkpoints, ablation variants and mask diagnostics.

Checkpoint byte layout (all integers little-endian)::

    magic        8 bytes   b"DMGNCKPT"
    version      u32       currently 1
    fingerprint  32 bytes  SHA-256 of the canonical JSON of the train config
    meta_len     u32
    meta         meta_len bytes of UTF-8 JSON (config, step, RNG state, Adam steps)
    count        u32       number of tensors
    count x:
        name_len u16, name (UTF-8), ndim u8, dims u32 * ndim,
        data     float32 * prod(dims)

Tensor names are prefixed ``g/`` (generator), ``d/`` (critic),
``adam.g.m/`` ``adam.g.v/`` ``adam.d.m/`` ``adam.d.v/`` (optimizer moments).
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import NumericFault, Tensor
from .net import VARIANTS, ModelConfig, ModelParams, Wiring, dmgn_forward, init_params, wiring_for
from .objectives import (
    LossWeights,
    clip_discriminator,
    discriminate,
    discriminator_loss,
    init_discriminator,
    total_loss,
)
from .optim import AdamState, adam_step
from .synth import ImageTriple

log = logging.getLogger(__name__)

MAGIC = b"DMGNCKPT"
VERSION = 1
LOG_FIELDS = (
    "step",
    "total",
    "coarse",
    "refine",
    "coarse_l1",
    "coarse_perceptual",
    "noise_l1",
    "noise_perceptual",
    "refine_l1",
    "refine_perceptual",
    "refine_adv",
    "disc",
    "lr",
)


class CheckpointError(OSError):
    pass


@dataclass
class TrainConfig:
    seed: int = 0
    corpus: str = ""
    variant: str = "full"
    model: ModelConfig = field(default_factory=ModelConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    batch: int = 4
    steps: int = 1000
    max_epochs: int | None = None
    checkpoint_every: int = 0
    disc_clip: float = 0.05
    flip: bool = False
    crop: float = 1.0

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if not self.lr > 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if self.batch < 1:
            raise ValueError(f"batch must be >= 1, got {self.batch}")
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")
        if self.max_epochs is not None and self.max_epochs < 1:
            raise ValueError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if not 0.25 <= self.crop <= 1.0:
            raise ValueError(f"crop fraction must lie in [0.25, 1], got {self.crop}")
        self.model.validate()

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        model = dict(d.pop("model", {}))
        if "pyramid_widths" in model:
            model["pyramid_widths"] = tuple(model["pyramid_widths"])
        weights = d.pop("weights", {})
        return cls(model=ModelConfig(**model), weights=LossWeights(**weights), **d)

    def fingerprint(self) -> bytes:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).digest()


@dataclass
class Model:
    """A wired network: variant, configuration and live parameters."""

    variant: str
    config: ModelConfig
    wiring: Wiring
    params: ModelParams

    def forward(self, I: Tensor):
        return dmgn_forward(I, self.params, self.config, self.wiring)


def build_variant(config: TrainConfig) -> Model:
    """Parameters and wiring for one ablation row.

    base: plain conv cells, no noise branch; rdmc: masking cells; r-rdmc: adds
    the noise branch and noise-map mask fusion; full: adds source fusion via
    channel attention; coarse: coarse phase only.
    """
    config.validate()
    wiring = wiring_for(config.variant)
    params = init_params(config.model, wiring, config.seed)
    return Model(config.variant, config.model, wiring, params)


@dataclass
class Checkpoint:
    config: TrainConfig
    params: ModelParams
    dparams: ModelParams
    g_state: AdamState
    d_state: AdamState
    step: int
    rng_state: dict
    order: list[int] = field(default_factory=list)  # unsampled indices of the current epoch

    def model(self) -> Model:
        return Model(self.config.variant, self.config.model, wiring_for(self.config.variant), self.params)


# --------------------------------------------------------------------------
# checkpoint IO


def _pack_tensor(name: str, arr: np.ndarray) -> bytes:
    raw = name.encode()
    head = struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    tensors: list[tuple[str, np.ndarray]] = []
    tensors += [(f"g/{k}", v) for k, v in ckpt.params.arrays().items()]
    tensors += [(f"d/{k}", v) for k, v in ckpt.dparams.arrays().items()]
    for tag, st in (("g", ckpt.g_state), ("d", ckpt.d_state)):
        tensors += [(f"adam.{tag}.m/{k}", v) for k, v in st.m.items()]
        tensors += [(f"adam.{tag}.v/{k}", v) for k, v in st.v.items()]
    meta = {
        "config": ckpt.config.to_dict(),
        "step": ckpt.step,
        "rng_state": ckpt.rng_state,
        "adam_t": {"g": ckpt.g_state.t, "d": ckpt.d_state.t},
        "frozen": sorted(ckpt.params.frozen),
        "order": [int(i) for i in ckpt.order],
    }
    meta_raw = json.dumps(meta, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<I", VERSION), ckpt.config.fingerprint()]
    parts += [struct.pack("<I", len(meta_raw)), meta_raw, struct.pack("<I", len(tensors))]
    parts += [_pack_tensor(k, v) for k, v in tensors]
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> Checkpoint:
    try:
        buf = Path(path).read_bytes()
    except FileNotFoundError:
        raise CheckpointError(f"no checkpoint at {path}") from None
    try:
        return _parse_checkpoint(buf)
    except (struct.error, ValueError, KeyError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from None


def _parse_checkpoint(buf: bytes) -> Checkpoint:
    if buf[:8] != MAGIC:
        raise ValueError("bad magic")
    (version,) = struct.unpack_from("<I", buf, 8)
    if version != VERSION:
        raise ValueError(f"unsupported version {version}")
    fingerprint = buf[12:44]
    (meta_len,) = struct.unpack_from("<I", buf, 44)
    off = 48
    meta = json.loads(buf[off : off + meta_len].decode())
    off += meta_len
    config = TrainConfig.from_dict(meta["config"])
    if config.fingerprint() != fingerprint:
        raise ValueError("config fingerprint mismatch")
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off : off + nlen].decode()
        off += nlen
        (ndim,) = struct.unpack_from("<B", buf, off)
        off += 1
        dims = struct.unpack_from(f"<{ndim}I", buf, off)
        off += 4 * ndim
        size = int(np.prod(dims, dtype=np.int64))
        arr = np.frombuffer(buf, dtype="<f4", count=size, offset=off).astype(np.float32).reshape(dims)
        off += 4 * size
        arrays[name] = arr
    if off != len(buf):
        raise ValueError(f"{len(buf) - off} trailing bytes")
    frozen = set(meta["frozen"])
    params, dparams = ModelParams(), ModelParams()
    g_state = AdamState(t=meta["adam_t"]["g"])
    d_state = AdamState(t=meta["adam_t"]["d"])
    for name, arr in arrays.items():
        prefix, _, key = name.partition("/")
        if prefix == "g":
            params.add(key, arr, frozen=key in frozen)
        elif prefix == "d":
            dparams.add(key, arr)
        elif prefix in ("adam.g.m", "adam.g.v", "adam.d.m", "adam.d.v"):
            st = g_state if prefix[5] == "g" else d_state
            (st.m if prefix.endswith("m") else st.v)[key] = arr
        else:
            raise ValueError(f"unknown tensor group {prefix!r}")
    return Checkpoint(
        config, params, dparams, g_state, d_state, meta["step"], meta["rng_state"], meta.get("order", [])
    )


# --------------------------------------------------------------------------
# training


def stack_batch(triples: Sequence[ImageTriple], dtype=np.float32) -> tuple[Tensor, Tensor, Tensor]:
    I = np.stack([t.input for t in triples]).astype(dtype)
    B = np.stack([t.background for t in triples]).astype(dtype)
    R = np.stack([t.noise for t in triples]).astype(dtype)
    return Tensor(I), Tensor(B), Tensor(R)


def _augment(rng: np.random.Generator, arrays: list[np.ndarray], flip: bool, crop: float) -> list[np.ndarray]:
    # the same geometric transform is applied to every image of a triple
    if flip and rng.random() < 0.5:
        arrays = [a[:, :, ::-1] for a in arrays]
    if crop < 1.0:
        h, w = arrays[0].shape[1:]
        frac = rng.uniform(crop, 1.0)
        ch, cw = max(1, int(round(h * frac))), max(1, int(round(w * frac)))
        y0, x0 = rng.integers(0, h - ch + 1), rng.integers(0, w - cw + 1)
        ys = y0 + (np.arange(h) * ch) // h
        xs = x0 + (np.arange(w) * cw) // w
        arrays = [a[:, ys][:, :, xs] for a in arrays]
    return [np.ascontiguousarray(a) for a in arrays]


class Trainer:
    """Owns parameters, optimizer state and the sampling RNG for one run."""

    def __init__(self, config: TrainConfig, triples: Sequence[ImageTriple], fault_dir=None):
        config.validate()
        if not triples:
            raise ValueError("training corpus is empty")
        self.config = config
        self.triples = list(triples)
        self.model = build_variant(config)
        self.dparams = init_discriminator(config.model, config.seed + 1)
        self.g_state = AdamState()
        self.d_state = AdamState()
        self.step = 0
        self.rng = np.random.default_rng(config.seed)
        self.fault_dir = Path(fault_dir) if fault_dir else None
        self._order: list[int] = []
        self.log: list[dict] = []

    @property
    def step_budget(self) -> int:
        steps = self.config.steps
        if self.config.max_epochs is not None:
            per_epoch = math.ceil(len(self.triples) / self.config.batch)
            steps = min(steps, self.config.max_epochs * per_epoch)
        return steps

    @property
    def adversarial(self) -> bool:
        return self.model.wiring.refine and self.config.weights.refine_adv > 0

    def checkpoint(self) -> Checkpoint:
        return Checkpoint(
            self.config,
            self.model.params.copy(),
            self.dparams.copy(),
            AdamState(dict(self.g_state.m), dict(self.g_state.v), self.g_state.t),
            AdamState(dict(self.d_state.m), dict(self.d_state.v), self.d_state.t),
            self.step,
            self.rng.bit_generator.state,
            [int(i) for i in self._order],
        )

    @classmethod
    def resume(cls, ckpt: Checkpoint, triples: Sequence[ImageTriple], fault_dir=None) -> "Trainer":
        tr = cls(ckpt.config, triples, fault_dir)
        tr.model.params = ckpt.params.copy()
        tr.dparams = ckpt.dparams.copy()
        tr.g_state, tr.d_state, tr.step = ckpt.g_state, ckpt.d_state, ckpt.step
        tr.rng.bit_generator.state = ckpt.rng_state
        tr._order = list(ckpt.order)
        return tr

    def _next_batch(self) -> list[ImageTriple]:
        picked = []
        while len(picked) < self.config.batch:
            if not self._order:
                self._order = list(self.rng.permutation(len(self.triples)))
            picked.append(self.triples[self._order.pop(0)])
        if not (self.config.flip or self.config.crop < 1.0):
            return picked
        out = []
        for t in picked:
            I, B, R = _augment(self.rng, [t.input, t.background, t.noise], self.config.flip, self.config.crop)
            out.append(ImageTriple(I, B, R, t.kind, t.params, t.id))
        return out

    def _dump_fault(self, batch: list[ImageTriple], what: str) -> None:
        if self.fault_dir is not None:
            self.fault_dir.mkdir(parents=True, exist_ok=True)
            path = self.fault_dir / f"fault_step{self.step}.npz"
            I, B, R = stack_batch(batch, np.float64)
            np.savez(path, input=I.data, background=B.data, noise=R.data, ids=[t.id for t in batch])
            what += f"; batch dumped to {path}"
        raise NumericFault(f"step {self.step}: {what} (batch ids {[t.id for t in batch]})")

    def train_step(self) -> dict:
        cfg = self.config
        batch = self._next_batch()
        I, B_gt, R_gt = stack_batch(batch)
        params = self.model.params
        D = lambda cand, inp: discriminate(cand, inp, self.dparams)  # noqa: E731
        try:
            with ad.Tape() as g_tape:
                out = self.model.forward(I)
                d_val = 0.0
                if self.adversarial:
                    with ad.Tape() as d_tape:
                        d_loss = discriminator_loss(out.refined, B_gt, I, D)
                    d_tape.backward(d_loss)
                    d_val = float(d_loss.data)
                    grads = {k: t.grad for k, t in self.dparams.tensors.items()}
                    new, self.d_state = adam_step(
                        self.dparams.arrays(), grads, self.d_state, cfg.lr, cfg.beta1, cfg.beta2
                    )
                    self.dparams.update(new)
                    clip_discriminator(self.dparams, cfg.disc_clip)
                L, comps = total_loss(
                    out, B_gt, R_gt, I, D if self.adversarial else None, params, cfg.model, cfg.weights
                )
        except NumericFault as exc:
            self._dump_fault(batch, str(exc))
        if not math.isfinite(comps["total"]):
            self._dump_fault(batch, "non-finite total loss")
        trainable = params.trainable()
        g_tape.backward(L, leaves=trainable.values())
        grads = {k: t.grad for k, t in trainable.items()}
        new, self.g_state = adam_step(
            {k: t.data for k, t in trainable.items()}, grads, self.g_state, cfg.lr, cfg.beta1, cfg.beta2
        )
        params.update(new)
        self.step += 1
        row = {k: 0.0 for k in LOG_FIELDS}
        row.update(comps)
        row.update(step=self.step, disc=d_val, lr=cfg.lr)
        self.log.append(row)
        return row

    def run(self, checkpoint_dir=None, log_every: int = 100) -> Checkpoint:
        budget = self.step_budget
        while self.step < budget:
            row = self.train_step()
            if log_every and (self.step % log_every == 0 or self.step == 1):
                log.info("step %d total %.5f refine_l1 %.5f", self.step, row["total"], row["refine_l1"])
            if checkpoint_dir and self.config.checkpoint_every and self.step % self.config.checkpoint_every == 0:
                Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
                save_checkpoint(self.checkpoint(), Path(checkpoint_dir) / f"step{self.step:06d}.ckpt")
        return self.checkpoint()


def write_log(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS, extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(row[k]) if isinstance(row[k], float) else row[k] for k in LOG_FIELDS})


def train(
    config: TrainConfig, triples: Sequence[ImageTriple], checkpoint_dir=None, fault_dir=None
) -> tuple[Checkpoint, list[dict]]:
    """Run a full training job; returns the final checkpoint and the loss log."""
    trainer = Trainer(config, triples, fault_dir)
    ckpt = trainer.run(checkpoint_dir)
    return ckpt, trainer.log


# --------------------------------------------------------------------------
# inference and diagnostics


def infer(model: Model, images: Sequence[np.ndarray], batch: int = 8):
    """Run the network without recording; returns (final, noise) lists of arrays."""
    finals, noises = [], []
    with ad.no_grad():
        for k in range(0, len(images), batch):
            I = Tensor(np.stack(images[k : k + batch]).astype(model.params["head.conv1.w"].dtype))
            out = model.forward(I)
            finals += list(out.final.data.astype(np.float64))
            if out.noise is not None:
                noises += list(out.noise.data.astype(np.float64))
            else:
                noises += [None] * I.shape[0]
    return finals, noises


def restorer(model: Model, batch: int = 8):
    """Adapter for :func:`metrics.evaluate_corpus`."""

    def restore(triples):
        return infer(model, [t.input for t in triples], batch)[0]

    return restore


@dataclass
class MaskDump:
    names: list[str]
    images: list[np.ndarray]
    means: list[tuple[str, int, float]]

    def table(self) -> str:
        lines = [f"{'generator':<10}{'cell':>6}{'mean_mask':>12}"]
        lines += [f"{g:<10}{n:>6}{m:>12.4f}" for g, n, m in self.means]
        return "\n".join(lines)


def dump_masks(model: Model, image: np.ndarray) -> MaskDump:
    """One 8-bit grayscale map (channel mean, times 255) per recorded mask."""
    with ad.no_grad():
        out = model.forward(Tensor(image[None].astype(np.float32)))
    names, images = [], []
    for e in out.trace.entries:
        names.append(f"{e.generator}_cell{e.index}")
        images.append(np.round(np.clip(e.mask[0].mean(axis=0), 0, 1) * 255).astype(np.uint8))
    return MaskDump(names, images, out.trace.mean_by_cell())
