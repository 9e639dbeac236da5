import csv

import numpy as np
import pytest

from dmgn.autodiff import NumericFault, Tensor
from dmgn.net import ModelConfig
from dmgn.synth import ImageTriple, SynthesisConfig, generate_corpus
from dmgn.trainer import (
    LOG_FIELDS,
    CheckpointError,
    TrainConfig,
    Trainer,
    build_variant,
    dump_masks,
    infer,
    load_checkpoint,
    save_checkpoint,
    train,
    write_log,
)

SMALL = ModelConfig(width=8, pyramid_widths=(4, 8, 8), disc_width=4)


@pytest.fixture(scope="module")
def corpus():
    return generate_corpus(SynthesisConfig(kind="reflection", seed=5, size=16), 4)


def cfg(**kw):
    base = dict(seed=3, model=SMALL, batch=2, steps=3)
    base.update(kw)
    return TrainConfig(**base)


class TestVariants:
    def test_full_vs_rrdmc_differ_by_aca_only(self):
        full = set(build_variant(cfg(variant="full")).params)
        rr = set(build_variant(cfg(variant="r-rdmc")).params)
        assert rr < full
        assert all(k.startswith("aca.") for k in full - rr)

    def test_base_records_no_masks(self, corpus):
        model = build_variant(cfg(variant="base"))
        out = model.forward(Tensor(corpus[0].input[None].astype(np.float32)))
        assert len(out.trace) == 0

    def test_coarse_final_is_coarse(self, corpus):
        model = build_variant(cfg(variant="coarse"))
        out = model.forward(Tensor(corpus[0].input[None].astype(np.float32)))
        assert out.refined is None and out.final is out.coarse

    def test_unknown_variant(self):
        with pytest.raises(ValueError, match="variant"):
            build_variant(cfg(variant="bogus"))

    @pytest.mark.parametrize("variant", ["base", "rdmc", "r-rdmc", "coarse", "full"])
    def test_every_variant_trains_and_infers(self, corpus, variant):
        ckpt, log = train(cfg(variant=variant, steps=1), corpus)
        assert len(log) == 1 and np.isfinite(log[0]["total"])
        finals, _ = infer(ckpt.model(), [t.input for t in corpus])
        assert finals[0].shape == corpus[0].input.shape
        assert (log[0]["refine_adv"] == 0.0) == (variant == "coarse")


class TestTraining:
    def test_zero_steps_is_init(self, corpus):
        ckpt, log = train(cfg(steps=0), corpus)
        init = build_variant(cfg(steps=0)).params
        assert log == [] and ckpt.step == 0
        for k in init:
            assert np.array_equal(ckpt.params[k].data, init[k].data)

    def test_deterministic(self, corpus):
        _, a = train(cfg(steps=3), corpus)
        _, b = train(cfg(steps=3), corpus)
        assert [r["total"] for r in a] == [r["total"] for r in b]
        assert [r["disc"] for r in a] == [r["disc"] for r in b]

    def test_seed_changes_trace(self, corpus):
        _, a = train(cfg(steps=2), corpus)
        _, b = train(cfg(steps=2, seed=4), corpus)
        assert a[0]["total"] != b[0]["total"]

    def test_params_move_and_frozen_stay(self, corpus):
        init = build_variant(cfg()).params
        ckpt, _ = train(cfg(steps=2), corpus)
        assert not np.array_equal(ckpt.params["head.conv1.w"].data, init["head.conv1.w"].data)
        for k in init.frozen:
            assert np.array_equal(ckpt.params[k].data, init[k].data)

    def test_critic_clipped(self, corpus):
        ckpt, _ = train(cfg(steps=2, disc_clip=0.01), corpus)
        assert max(np.abs(t.data).max() for t in ckpt.dparams.tensors.values()) <= 0.01

    def test_epoch_cap(self, corpus):
        t = Trainer(cfg(steps=100, max_epochs=2), corpus)
        assert t.step_budget == 4
        t.run(log_every=0)
        assert t.step == 4

    def test_epoch_covers_every_triple(self, corpus):
        t = Trainer(cfg(batch=1), corpus)
        seen = {t._next_batch()[0].id for _ in range(len(corpus))}
        assert seen == {tr.id for tr in corpus}

    def test_augmentation_shapes(self, corpus):
        t = Trainer(cfg(flip=True, crop=0.5), corpus)
        for tr in t._next_batch():
            assert tr.input.shape == (3, 16, 16) and tr.input.flags.c_contiguous

    def test_nan_aborts_with_dump(self, corpus, tmp_path):
        bad = corpus[0]
        I = bad.input.copy()
        I[0, 0, 0] = np.nan
        poisoned = [ImageTriple(I, bad.background, bad.noise, bad.kind, bad.params, "poison")]
        t = Trainer(cfg(batch=1), poisoned, fault_dir=tmp_path)
        with pytest.raises(NumericFault, match="step 0") as info:
            t.train_step()
        assert "poison" in str(info.value)
        dumped = np.load(tmp_path / "fault_step0.npz")
        assert np.isnan(dumped["input"]).any()

    def test_invalid_config(self, corpus):
        with pytest.raises(ValueError, match="lr"):
            Trainer(cfg(lr=0.0), corpus)
        with pytest.raises(ValueError, match="batch"):
            Trainer(cfg(batch=0), corpus)
        with pytest.raises(ValueError, match="empty"):
            Trainer(cfg(), [])


class TestCheckpoint:
    def test_round_trip_outputs(self, corpus, tmp_path):
        ckpt, _ = train(cfg(steps=2), corpus)
        save_checkpoint(ckpt, tmp_path / "a.ckpt")
        back = load_checkpoint(tmp_path / "a.ckpt")
        imgs = [t.input for t in corpus]
        a, ra = infer(ckpt.model(), imgs)
        b, rb = infer(back.model(), imgs)
        for x, y in zip(a + ra, b + rb):
            assert np.array_equal(x, y)
        assert back.step == 2 and back.config == ckpt.config
        assert back.params.frozen == ckpt.params.frozen
        assert back.g_state.t == ckpt.g_state.t
        for k in ckpt.g_state.m:
            assert np.array_equal(back.g_state.m[k], ckpt.g_state.m[k])

    def test_resume_matches_uninterrupted(self, corpus, tmp_path):
        # batch 3 over 4 triples: the save lands mid-epoch
        c = cfg(steps=4, batch=3)
        _, straight = train(c, corpus)
        first = Trainer(cfg(steps=2, batch=3), corpus)
        save_checkpoint(first.run(log_every=0), tmp_path / "mid.ckpt")
        ck = load_checkpoint(tmp_path / "mid.ckpt")
        ck.config.steps = 4
        resumed = Trainer.resume(ck, corpus)
        resumed.run(log_every=0)
        assert [r["total"] for r in first.log + resumed.log] == [r["total"] for r in straight]

    def test_layout_header(self, corpus, tmp_path):
        ckpt, _ = train(cfg(steps=0), corpus)
        save_checkpoint(ckpt, tmp_path / "c.ckpt")
        raw = (tmp_path / "c.ckpt").read_bytes()
        assert raw[:8] == b"DMGNCKPT"
        assert int.from_bytes(raw[8:12], "little") == 1
        assert raw[12:44] == ckpt.config.fingerprint()

    def test_periodic_checkpoints(self, corpus, tmp_path):
        t = Trainer(cfg(steps=4, checkpoint_every=2), corpus)
        t.run(tmp_path, log_every=0)
        assert sorted(p.name for p in tmp_path.iterdir()) == ["step000002.ckpt", "step000004.ckpt"]

    @pytest.mark.parametrize(
        "mutate, message",
        [
            (lambda b: b"XXXXXXXX" + b[8:], "magic"),
            (lambda b: b[:8] + (9).to_bytes(4, "little") + b[12:], "version"),
            (lambda b: b[:12] + bytes(32) + b[44:], "fingerprint"),
            (lambda b: b[:-10], "corrupt"),
            (lambda b: b + b"\0", "trailing"),
        ],
    )
    def test_corruption_detected(self, corpus, tmp_path, mutate, message):
        ckpt, _ = train(cfg(steps=0), corpus)
        save_checkpoint(ckpt, tmp_path / "c.ckpt")
        (tmp_path / "c.ckpt").write_bytes(mutate((tmp_path / "c.ckpt").read_bytes()))
        with pytest.raises(CheckpointError, match=message):
            load_checkpoint(tmp_path / "c.ckpt")

    def test_missing(self, tmp_path):
        with pytest.raises(CheckpointError, match="no checkpoint"):
            load_checkpoint(tmp_path / "nope.ckpt")


def test_log_csv(corpus, tmp_path):
    _, log = train(cfg(steps=2), corpus)
    write_log(log, tmp_path / "log.csv")
    with open(tmp_path / "log.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert tuple(rows[0]) == LOG_FIELDS
    assert [int(r["step"]) for r in rows] == [1, 2]
    assert float(rows[1]["total"]) == log[1]["total"]
    assert float(rows[0]["lr"]) == 2e-4


def test_dump_masks_untrained(corpus):
    model = build_variant(cfg())
    dump = dump_masks(model, corpus[0].input)
    assert len(dump.images) == len(dump.names) == SMALL.coarse_cells * 2 + SMALL.refine_cells
    for img in dump.images:
        assert img.dtype == np.uint8 and img.ndim == 2 and 16 % img.shape[0] == 0
    assert all(0.35 < m < 0.65 for _, _, m in dump.means)
    assert dump.names[0] == "gb_cell1"
    assert "mean_mask" in dump.table()
