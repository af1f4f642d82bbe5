import numpy as np
import pytest

from psrnn import data as D
from psrnn.errors import FormatError, ShapeError, SizeError, UsageError


class TestPgm:
    def test_p5_normalization(self, tmp_path):
        p = tmp_path / "a.pgm"
        p.write_bytes(b"P5\n2 2\n255\n" + bytes([0, 255, 128, 64]))
        img = D.load_image(p)
        np.testing.assert_allclose(
            img.pixels, [[0.0, 1.0], [128 / 255, 64 / 255]], rtol=1e-6)

    def test_p2_equals_p5(self, tmp_path):
        p2 = tmp_path / "a.pgm"
        p2.write_text("P2\n# comment\n2 2\n255\n0 255\n128 64\n")
        p5 = tmp_path / "b.pgm"
        p5.write_bytes(b"P5\n2 2\n255\n" + bytes([0, 255, 128, 64]))
        np.testing.assert_array_equal(D.load_image(p2).pixels, D.load_image(p5).pixels)

    def test_truncated_payload(self, tmp_path):
        p = tmp_path / "a.pgm"
        p.write_bytes(b"P5\n4 4\n255\n" + bytes([0, 1, 2]))
        with pytest.raises(FormatError):
            D.load_image(p)

    def test_truncated_header(self, tmp_path):
        p = tmp_path / "a.pgm"
        p.write_bytes(b"P5\n4")
        with pytest.raises(FormatError):
            D.load_image(p)

    def test_sixteen_bit_rejected(self, tmp_path):
        p = tmp_path / "a.pgm"
        p.write_bytes(b"P5\n1 1\n65535\n\x00\x00")
        with pytest.raises(FormatError):
            D.load_image(p)

    def test_ppm_bt601_luma(self, tmp_path):
        p = tmp_path / "a.ppm"
        p.write_bytes(b"P6\n1 1\n255\n" + bytes([255, 0, 0]))
        img = D.load_image(p)
        assert img.pixels[0, 0] == pytest.approx(0.299, abs=1e-6)

    def test_raw_plane_with_sidecar(self, tmp_path):
        p = tmp_path / "a.y"
        p.write_bytes(bytes([10, 20, 30, 40, 50, 60]))
        (tmp_path / "a.y.txt").write_text("3 2\n")
        img = D.load_image(p)
        assert img.pixels.shape == (2, 3)
        assert img.pixels[1, 2] == pytest.approx(60 / 255)

    def test_raw_plane_missing_sidecar(self, tmp_path):
        p = tmp_path / "a.y"
        p.write_bytes(b"\x00" * 4)
        with pytest.raises(FormatError):
            D.load_image(p)

    def test_unsupported_format(self, tmp_path):
        p = tmp_path / "a.png"
        p.write_bytes(b"\x89PNG....")
        with pytest.raises(FormatError):
            D.load_image(p)

    def test_save_load_round_trip(self, tmp_path):
        gen = np.random.default_rng(0)
        img = D.GrayImage((gen.integers(0, 256, (9, 7)) / 255.0).astype(np.float32))
        path = tmp_path / "rt.pgm"
        D.save_pgm(img, path)
        back = D.load_image(path)
        np.testing.assert_allclose(back.pixels, img.pixels, atol=1e-7)

    def test_read_manifest(self, tmp_path):
        m = tmp_path / "m.txt"
        m.write_text("# header\n\n/a/b.pgm\n  /c/d.pgm  \n")
        assert [str(p) for p in D.read_manifest(m)] == ["/a/b.pgm", "/c/d.pgm"]


class TestMultiScale:
    def test_reference_scales(self):
        ramp = np.linspace(0, 1, 1792 * 1024, dtype=np.float32).reshape(1024, 1792)
        scales = D.multi_scale(D.GrayImage(ramp))
        assert [(s.width, s.height) for s in scales] == list(D.PAPER_SCALES)

    def test_constant_image_stays_constant(self):
        img = D.GrayImage(np.full((256, 448), 0.37, dtype=np.float32))
        for s in D.multi_scale(img):
            np.testing.assert_allclose(s.pixels, 0.37, rtol=1e-6)

    def test_checkerboard_halves_to_mid_gray(self):
        yy, xx = np.mgrid[0:144, 0:252]
        board = ((yy + xx) % 2).astype(np.float32)
        scales = D.multi_scale(D.GrayImage(board))
        np.testing.assert_allclose(scales[2].pixels, 0.5, atol=1e-7)

    def test_proportional_ratios(self):
        img = D.GrayImage(np.zeros((200, 360), dtype=np.float32))
        s1, s2, s3 = D.multi_scale(img)
        assert (s2.width, s2.height) == (s1.width * 3 // 4, s1.height * 3 // 4)
        assert (s3.width, s3.height) == (s1.width // 2, s1.height // 2)

    def test_too_small(self):
        with pytest.raises(SizeError):
            D.multi_scale(D.GrayImage(np.zeros((20, 20), dtype=np.float32)))

    def test_box_resize_integer_mean(self):
        x = np.arange(16, dtype=np.float64).reshape(4, 4)
        out = D.box_resize(x, 2, 2)
        want = np.array([[x[:2, :2].mean(), x[:2, 2:].mean()],
                         [x[2:, :2].mean(), x[2:, 2:].mean()]])
        np.testing.assert_allclose(out, want, rtol=1e-6)


class TestDegrade:
    def test_qstep_values(self):
        assert D.qstep(22) == pytest.approx(8.0)
        assert D.qstep(4) == pytest.approx(1.0)

    def test_near_lossless_at_qp4(self):
        gen = np.random.default_rng(1)
        img = D.GrayImage(gen.random((64, 64)).astype(np.float32))
        out = D.degrade(img, D.DegradeConfig(qp=4))
        mse = float(np.mean((out.pixels - img.pixels) ** 2))
        psnr = -10 * np.log10(max(mse, 1e-12))
        assert psnr > 50.0

    def test_constant_image_within_one_step(self):
        img = D.GrayImage(np.full((32, 32), 0.42, dtype=np.float32))
        out = D.degrade(img, D.DegradeConfig(qp=32))
        assert np.max(np.abs(out.pixels - 0.42)) <= D.qstep(32) / 255.0

    def test_idempotent_within_one_step(self):
        gen = np.random.default_rng(2)
        img = D.GrayImage(gen.random((40, 40)).astype(np.float32))
        cfg = D.DegradeConfig(qp=27)
        once = D.degrade(img, cfg)
        twice = D.degrade(once, cfg)
        step = D.qstep(27) / 255.0
        assert np.max(np.abs(twice.pixels - once.pixels)) <= step + 1e-6

    def test_padding_for_odd_sizes(self):
        img = D.GrayImage(np.random.default_rng(3).random((19, 13)).astype(np.float32))
        out = D.degrade(img, D.DegradeConfig(qp=22))
        assert out.pixels.shape == (19, 13)
        assert out.pixels.min() >= 0.0 and out.pixels.max() <= 1.0

    def test_heavier_qp_degrades_more(self):
        img = D.synth_texture("sinusoid", 64, freq=7.0, angle=30.0)
        e = []
        for qp in (22, 37):
            out = D.degrade(img, D.DegradeConfig(qp=qp))
            e.append(float(np.mean((out.pixels - img.pixels) ** 2)))
        assert e[1] > e[0]


class TestContexts:
    def _pair(self, size=64, seed=0):
        img = D.GrayImage(np.random.default_rng(seed).random((size, size)).astype(np.float32))
        deg = D.degrade(img, D.DegradeConfig(qp=32))
        return img, deg

    def test_count_zero(self):
        img, deg = self._pair()
        assert D.sample_contexts(img, deg, 8, 0) == []

    def test_same_seed_identical(self):
        img, deg = self._pair()
        a = D.sample_contexts(img, deg, 8, 20, seed=9)
        b = D.sample_contexts(img, deg, 8, 20, seed=9)
        for s, t in zip(a, b):
            assert s.origin == t.origin and s.availability_mode == t.availability_mode
            np.testing.assert_array_equal(s.context, t.context)
            np.testing.assert_array_equal(s.target, t.target)

    def test_masking_audit(self):
        img, deg = self._pair()
        for block in D.sample_contexts(img, deg, 8, 200, seed=4, fill=0.5):
            assert np.all(block.context[8:, 8:] == 0.5)
            if block.availability_mode == D.THREE_BLOCK:
                assert np.all(block.context[8:, :8] == 0.5)

    def test_alignment_audit(self):
        # degraded == clean: re-pasting the target must rebuild the window
        img, _ = self._pair(seed=5)
        for block in D.sample_contexts(img, img, 8, 50, seed=6):
            y, x = block.origin
            window = img.pixels[y : y + 16, x : x + 16].copy()
            rebuilt = block.context.copy()
            rebuilt[8:, 8:] = block.target
            np.testing.assert_array_equal(rebuilt[8:, 8:], window[8:, 8:])

    def test_forced_mode(self):
        img, deg = self._pair()
        blocks = D.sample_contexts(img, deg, 8, 30, seed=1,
                                   availability_mode=D.FOUR_BLOCK)
        assert all(b.availability_mode == D.FOUR_BLOCK for b in blocks)

    def test_mix_fraction(self):
        img, deg = self._pair(size=96)
        blocks = D.sample_contexts(img, deg, 8, 3000, seed=2, availability_mix=0.25)
        four = sum(b.availability_mode == D.FOUR_BLOCK for b in blocks)
        assert 0.18 < four / len(blocks) < 0.32

    def test_disjoint_seeds_disjoint_origins(self):
        img, deg = self._pair(size=128)
        a = {b.origin for b in D.sample_contexts(img, deg, 8, 300, seed=100)}
        b = {b.origin for b in D.sample_contexts(img, deg, 8, 300, seed=200)}
        overlap = len(a & b) / 300
        assert overlap <= 0.05

    def test_too_small_image(self):
        img = D.GrayImage(np.zeros((12, 12), dtype=np.float32))
        with pytest.raises(SizeError):
            D.sample_contexts(img, img, 8, 1)

    def test_mismatched_pair(self):
        a = D.GrayImage(np.zeros((32, 32), dtype=np.float32))
        b = D.GrayImage(np.zeros((64, 64), dtype=np.float32))
        with pytest.raises(ShapeError):
            D.sample_contexts(a, b, 8, 1)

    def test_range_invariant(self):
        img, deg = self._pair()
        for block in D.sample_contexts(img, deg, 8, 50, seed=3):
            for arr in (block.context, block.target):
                assert arr.min() >= 0.0 and arr.max() <= 1.0


class TestSynthTextures:
    def test_flat(self):
        img = D.synth_texture("flat", 16, value=0.3)
        np.testing.assert_allclose(img.pixels, 0.3, rtol=1e-6)

    def test_directional_zero_degrees(self):
        img = D.synth_texture("directional", 16, angle=0.0)
        for row in img.pixels:
            np.testing.assert_allclose(row, row[0], atol=1e-6)
        col = img.pixels[:, 0]
        assert np.all(np.diff(col) > 0)

    def test_rings_periodicity(self):
        size, period = 64, 12.0
        img = D.synth_texture("rings", size, period=period, center=(0.0, 0.0))
        gen_val = lambda r: 0.5 + 0.5 * np.cos(2 * np.pi * r / period)
        assert gen_val(period) == pytest.approx(gen_val(2 * period))
        assert img.pixels[0, 12] == pytest.approx(gen_val(12.0), abs=1e-6)
        assert img.pixels[0, 24] == pytest.approx(gen_val(24.0), abs=1e-6)

    def test_invalid_kind(self):
        with pytest.raises(UsageError):
            D.synth_texture("plasma", 16)

    def test_invalid_params(self):
        with pytest.raises(UsageError):
            D.synth_texture("flat", 16, wavelength=3)
        with pytest.raises(UsageError):
            D.synth_texture("rings", 16, period=-1.0)
        with pytest.raises(UsageError):
            D.synth_texture("flat", 4)

    def test_noise_stays_in_range(self):
        img = D.synth_texture("directional", 32, seed=1, noise=0.5, angle=45.0)
        assert img.pixels.min() >= 0.0 and img.pixels.max() <= 1.0

    def test_corpus_and_training_samples(self):
        images = D.synthetic_corpus(64, seed=3, per_kind=2)
        samples = D.build_training_samples(images, 8, 120, seed=3,
                                           availability_mode=D.THREE_BLOCK)
        assert len(samples) == 120
        assert all(s.availability_mode == D.THREE_BLOCK for s in samples)
        assert all(s.context.shape == (16, 16) for s in samples)
