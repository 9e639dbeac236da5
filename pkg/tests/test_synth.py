import math

import numpy as np
import pytest

from dmgn import synth
from dmgn.synth import (
    CorpusError,
    SynthesisConfig,
    corpus_checksum,
    corpus_read,
    corpus_write,
    gen_background,
    generate_corpus,
    quantize,
    recompose,
    render_streaks,
    synth_haze,
    synth_rain,
    synth_reflection,
)


def naive_gaussian_blur(img, sigma):
    """Separable Gaussian by direct summation, reflect boundary (d c b a | a b c d)."""
    radius = int(4.0 * sigma + 0.5)
    taps = [math.exp(-0.5 * (k / sigma) ** 2) for k in range(-radius, radius + 1)]
    total = sum(taps)
    taps = [t / total for t in taps]

    def reflect(i, n):
        while i < 0 or i >= n:
            i = -i - 1 if i < 0 else 2 * n - i - 1
        return i

    c, h, w = img.shape
    tmp = np.zeros_like(img)
    for ch in range(c):
        for y in range(h):
            for x in range(w):
                tmp[ch, y, x] = sum(taps[k + radius] * img[ch, reflect(y + k, h), x] for k in range(-radius, radius + 1))
    out = np.zeros_like(img)
    for ch in range(c):
        for y in range(h):
            for x in range(w):
                out[ch, y, x] = sum(taps[k + radius] * tmp[ch, y, reflect(x + k, w)] for k in range(-radius, radius + 1))
    return out


def naive_streaks(h, w, segments, intensity):
    layer = np.zeros((h, w))
    for y in range(h):
        for x in range(w):
            acc = 0.0
            for x0, y0, x1, y1 in segments:
                vx, vy = x1 - x0, y1 - y0
                ll = vx * vx + vy * vy
                u = 0.0 if ll == 0 else min(1.0, max(0.0, ((x - x0) * vx + (y - y0) * vy) / ll))
                d = math.hypot(x - (x0 + u * vx), y - (y0 + u * vy))
                acc += intensity * max(0.0, 1.0 - d)
            layer[y, x] = min(acc, 1.0)
    return layer


class TestBackground:
    def test_deterministic(self):
        assert np.array_equal(gen_background(7, 32), gen_background(7, 32))

    @pytest.mark.parametrize("seed", range(10))
    def test_range(self, seed):
        img = gen_background(seed, (16, 24))
        assert img.shape == (3, 16, 24)
        assert img.min() >= 0.0 and img.max() <= 1.0

    def test_seeds_differ(self):
        # measured 0.209 when written
        assert np.abs(gen_background(7, 32) - gen_background(8, 32)).mean() > 0.01

    def test_too_small(self):
        with pytest.raises(ValueError, match="16x16"):
            gen_background(0, 8)


class TestReflection:
    def setup_method(self):
        self.B = gen_background(1, 24)
        self.R = gen_background(2, 24)

    def test_alpha_one_is_background(self):
        tr = synth_reflection(self.B, self.R, 1.0, 2.0)
        np.testing.assert_array_equal(tr.input, self.B)

    def test_alpha_zero_sigma_zero_is_reflection(self):
        tr = synth_reflection(self.B, self.R, 0.0, 0.0)
        np.testing.assert_array_equal(tr.input, self.R)

    def test_matches_naive_blend(self):
        tr = synth_reflection(self.B, self.R, 0.7, 1.5)
        expected = 0.7 * self.B + 0.3 * naive_gaussian_blur(self.R, 1.5)
        np.testing.assert_allclose(tr.input, expected, atol=1e-6, rtol=0)
        np.testing.assert_allclose(tr.noise, 0.3 * naive_gaussian_blur(self.R, 1.5), atol=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="differ"):
            synth_reflection(self.B, self.R[:, :16], 0.5, 1.0)


class TestRain:
    def test_no_streaks_is_identity(self):
        B = gen_background(3, 20)
        tr = synth_rain(B, 0, 10.0, 5.0, 0.5)
        np.testing.assert_array_equal(tr.input, B)
        assert np.all(tr.noise == 0)

    def test_single_horizontal_streak(self):
        B = np.full((3, 16, 16), 0.2)
        row = 7
        S = render_streaks((16, 16), np.array([[2.0, row, 12.0, row]]), 0.5)
        I = np.clip(B + S, 0, 1)
        diff = I - B
        assert diff.max() <= 0.5 + 1e-12
        assert np.all(diff[:, row, 2:13] == pytest.approx(0.5))
        mask = np.ones((16, 16), bool)
        mask[row, 2:13] = False
        assert np.all(diff[:, mask] == 0)

    def test_horizontal_through_synth_rain(self):
        B = np.full((3, 16, 16), 0.1)
        tr = synth_rain(B, 1, 6.0, 90.0, 0.5, streak_seed=4)
        assert tr.noise.min() >= 0 and (tr.input - B).max() <= 0.5 + 1e-12

    def test_fifty_streaks_match_naive_render(self):
        B = gen_background(5, 24)
        tr = synth_rain(B, 50, 8.0, 12.0, 0.3, streak_seed=9)
        segs = synth.streak_segments((24, 24), 50, 8.0, 12.0, 9)
        S = naive_streaks(24, 24, segs, 0.3)
        expected = np.clip(B + S[None], 0, 1)
        assert abs((tr.input - B).mean() - (expected - B).mean()) < 1e-6
        np.testing.assert_allclose(tr.noise[0], S, atol=1e-9)

    def test_bad_params(self):
        with pytest.raises(ValueError):
            synth_rain(np.zeros((3, 16, 16)), -1)
        with pytest.raises(ValueError):
            synth_rain(np.zeros((3, 16, 16)), 3, intensity=1.5)


class TestHaze:
    def setup_method(self):
        self.J = gen_background(6, 20)

    def test_beta_zero_is_identity(self):
        tr = synth_haze(self.J, 0.0, 1, (0.9, 0.9, 0.9))
        np.testing.assert_array_equal(tr.input, self.J)

    def test_large_depth_tends_to_airlight(self):
        A = (0.8, 0.7, 0.9)
        tr = synth_haze(self.J, 1.0, 1, A, depth_scale=200.0)
        np.testing.assert_allclose(tr.input, np.broadcast_to(np.array(A)[:, None, None], self.J.shape), atol=1e-12)

    def test_matches_scalar_formula(self):
        tr = synth_haze(self.J, 0.8, 3, (0.9, 0.9, 0.9))
        d = synth.depth_field(3, (20, 20))
        for c in range(3):
            for y in range(20):
                for x in range(20):
                    t = math.exp(-0.8 * d[y, x])
                    expected = self.J[c, y, x] * t + 0.9 * (1 - t)
                    assert abs(tr.input[c, y, x] - expected) < 1e-7
        assert np.all(d > 0)

    def test_transmission_range(self):
        tr = synth_haze(self.J, 2.0, 3, (1.0, 1.0, 1.0))
        t = 1 - tr.noise
        assert t.min() > 0 and t.max() <= 1

    def test_negative_beta(self):
        with pytest.raises(ValueError, match="beta"):
            synth_haze(self.J, -0.1, 0, (0.5, 0.5, 0.5))


@pytest.mark.parametrize("kind", synth.KINDS)
def test_compositionality_and_bounds(kind):
    triples = generate_corpus(SynthesisConfig(kind=kind, seed=3, size=24), 6)
    for tr in triples:
        assert np.max(np.abs(recompose(tr) - tr.input)) <= 1e-6
        assert np.array_equal(recompose(tr), tr.input)
        for img in (tr.input, tr.background, tr.noise):
            assert img.min() >= 0.0 and img.max() <= 1.0


@pytest.mark.parametrize("kind", synth.KINDS)
def test_corpus_determinism(kind):
    cfg = SynthesisConfig(kind=kind, seed=8, size=16)
    a, b = generate_corpus(cfg, 3), generate_corpus(cfg, 3)
    for x, y in zip(a, b):
        assert np.array_equal(x.input, y.input) and x.params == y.params


def test_config_validation():
    with pytest.raises(ValueError, match="kind"):
        SynthesisConfig(kind="snow").validate()
    with pytest.raises(ValueError, match="alpha"):
        SynthesisConfig(alpha=(0.5, 1.5)).validate()
    with pytest.raises(ValueError, match="size"):
        SynthesisConfig(size=8).validate()


class TestCorpusIO:
    def test_round_trip(self, tmp_path):
        triples = generate_corpus(SynthesisConfig(kind="haze", seed=2, size=16), 4)
        corpus_write(triples, tmp_path)
        back = corpus_read(tmp_path)
        assert [t.id for t in back] == [t.id for t in triples]
        for a, b in zip(triples, back):
            assert a.params == b.params and a.kind == b.kind
            for x, y in ((a.input, b.input), (a.background, b.background), (a.noise, b.noise)):
                assert np.array_equal(quantize(x), y)

    def test_empty_corpus(self, tmp_path):
        corpus_write([], tmp_path)
        assert corpus_read(tmp_path) == []
        assert (tmp_path / "manifest").read_text().startswith("#")

    def test_checksum_stable(self, tmp_path):
        cfg = SynthesisConfig(kind="reflection", seed=1, size=16)
        corpus_write(generate_corpus(cfg, 16), tmp_path / "a")
        corpus_write(generate_corpus(cfg, 16), tmp_path / "b")
        assert corpus_checksum(tmp_path / "a") == corpus_checksum(tmp_path / "b")

    def test_manifest_format(self, tmp_path):
        tr = generate_corpus(SynthesisConfig(kind="haze", seed=2, size=16), 1)[0]
        corpus_write([tr], tmp_path)
        line = (tmp_path / "manifest").read_text().splitlines()[1]
        fields = line.split()
        assert fields[:2] == ["00000", "haze"]
        assert any(f.startswith("airlight=") and f.count(",") == 2 for f in fields)
        assert (tmp_path / "00000_I.png").is_file()

    def test_missing_image(self, tmp_path):
        corpus_write(generate_corpus(SynthesisConfig(seed=1, size=16), 2), tmp_path)
        (tmp_path / "00001_R.png").unlink()
        with pytest.raises(CorpusError, match="00001_R"):
            corpus_read(tmp_path)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(CorpusError, match="manifest"):
            corpus_read(tmp_path)

    def test_corrupt_manifest(self, tmp_path):
        (tmp_path / "manifest").write_text("00000 reflection alpha\n")
        with pytest.raises(CorpusError, match="malformed"):
            corpus_read(tmp_path)

    def test_corrupt_image(self, tmp_path):
        corpus_write(generate_corpus(SynthesisConfig(seed=1, size=16), 1), tmp_path)
        (tmp_path / "00000_B.png").write_bytes(b"not a png")
        with pytest.raises(CorpusError, match="unreadable"):
            corpus_read(tmp_path)
