import numpy as np
import pytest

from conftest import rel_err
from psrnn import data as D
from psrnn import training as TR
from psrnn.errors import ConfigError, DivergenceError, UsageError
from psrnn.hadamard import SatdConfig, satd, satd_loss_grad, satd_smooth
from psrnn.model import NetworkConfig, build_network, parameters


def make_samples(n=8, count=600, seed=0, size=64):
    images = D.synthetic_corpus(size, seed=seed, per_kind=3)
    return D.build_training_samples(images, n, count, seed=seed,
                                    availability_mode=D.THREE_BLOCK)


def small_cfg(**kw):
    base = dict(total_iters=40, batch_size=8, seed=1, val_subset_cap=64,
                checkpoint_every=10)
    base.update(kw)
    return TR.TrainConfig(**base)


SMALL_NET = NetworkConfig(pu_size=8, preproc_channels=(4, 4), unit_hidden=(4, 2, 2),
                          recon_channels=(4,))


class TestLossAndGrad:
    def test_zero_residue_both_kinds(self):
        x = np.random.default_rng(0).random((8, 8)).astype(np.float32)
        for kind in ("satd", "mse"):
            loss, grad = TR.loss_and_grad(x, x, kind)
            assert loss == 0.0
            assert not grad.any()

    def test_mse_value(self):
        pred = np.full((4, 4), 0.5, dtype=np.float32)
        target = np.zeros((4, 4), dtype=np.float32)
        loss, grad = TR.loss_and_grad(pred, target, "mse")
        assert loss == pytest.approx(0.25)
        np.testing.assert_allclose(grad, 2 * 0.5 / 16, rtol=1e-6)

    def test_satd_delegates_exactly(self):
        gen = np.random.default_rng(5)
        pred = gen.random((8, 8)).astype(np.float32)
        target = gen.random((8, 8)).astype(np.float32)
        cfg = SatdConfig()
        loss, grad = TR.loss_and_grad(pred, target, "satd", cfg)
        d = pred.astype(np.float64) - target.astype(np.float64)
        assert loss == satd(d, cfg)
        np.testing.assert_array_equal(grad, satd_loss_grad(d, cfg))

    @pytest.mark.parametrize("kind", ["satd", "mse"])
    def test_finite_differences(self, kind):
        # the satd gradient is the exact gradient of the eps-smoothed
        # objective, so that surrogate is what the reference differentiates
        gen = np.random.default_rng(7)
        cfg = SatdConfig()

        def f(pred, target):
            if kind == "satd":
                return satd_smooth(pred - target, cfg)
            return TR.loss_and_grad(pred, target, kind, cfg)[0]

        for _ in range(10):
            pred = gen.random((8, 8))
            target = gen.random((8, 8))
            _, grad = TR.loss_and_grad(pred, target, kind, cfg)
            ref = np.zeros((8, 8))
            h = 1e-5
            for i in range(8):
                for j in range(8):
                    pp = pred.copy(); pp[i, j] += h
                    pm = pred.copy(); pm[i, j] -= h
                    ref[i, j] = (f(pp, target) - f(pm, target)) / (2 * h)
            assert rel_err(grad, ref) < 1e-4

    def test_shape_mismatch(self):
        with pytest.raises(UsageError):
            TR.loss_and_grad(np.zeros((4, 4)), np.zeros((8, 8)), "mse")

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            TR.loss_and_grad(np.zeros((4, 4)), np.zeros((4, 4)), "huber")


class TestTrain:
    def test_zero_iterations_returns_unchanged(self):
        samples = make_samples(count=200)
        net = build_network(SMALL_NET, seed=2)
        before = {k: v.copy() for k, v in parameters(net).items()}
        net, rows = TR.train(net, samples, small_cfg(total_iters=0))
        for k, v in parameters(net).items():
            np.testing.assert_array_equal(v, before[k])
        assert len(rows) == 1 and rows[0].iteration == 0

    def test_empty_stream_rejected(self):
        net = build_network(SMALL_NET, seed=2)
        with pytest.raises(UsageError):
            TR.train(net, [], small_cfg())

    def test_block_size_mismatch(self):
        net = build_network(SMALL_NET, seed=2)
        with pytest.raises(ConfigError):
            TR.train(net, make_samples(), small_cfg(block_size=16))

    def test_determinism_bitwise(self):
        samples = make_samples(count=300)
        logs = []
        weights = []
        for _ in range(2):
            net = build_network(SMALL_NET, seed=3)
            net, rows = TR.train(net, samples, small_cfg(seed=11))
            logs.append([r.csv() for r in rows])
            weights.append({k: v.tobytes() for k, v in parameters(net).items()})
        assert logs[0] == logs[1]
        assert weights[0] == weights[1]

    def test_divergence_reported_with_iteration(self):
        samples = make_samples(count=200)
        bad = TR.as_sample_set(samples)
        bad.targets[0:: 2] = np.nan
        net = build_network(SMALL_NET, seed=2)
        with pytest.raises(DivergenceError) as exc:
            TR.train(net, bad, small_cfg())
        assert exc.value.iteration >= 0

    def test_selected_checkpoint_beats_final(self):
        samples = make_samples(count=400)
        net = build_network(SMALL_NET, seed=4)
        net, rows = TR.train(net, samples, small_cfg(total_iters=60, seed=5))
        window_start = 60 - int(round(60 * 0.2))
        window = [r.val_loss for r in rows if r.iteration > window_start]
        final_val = rows[-1].val_loss
        cap = TR.TrainConfig(total_iters=60).val_subset_cap
        best = TR.validation_metric(
            net, *_val_arrays(samples, 5, cap), "satd", SatdConfig())
        assert best == pytest.approx(min(window), rel=1e-9)
        assert best <= final_val + 1e-9

    def test_constant_images_learn_the_constant(self):
        from psrnn.model import network_forward

        images = [D.synth_texture("flat", 64, value=v) for v in (0.25, 0.5, 0.75)]
        samples = D.build_training_samples(images, 8, 1200, seed=0,
                                           availability_mode=D.THREE_BLOCK)
        net = build_network(NetworkConfig(pu_size=8), seed=6)
        cfg = TR.TrainConfig(total_iters=500, batch_size=32, seed=6,
                             val_subset_cap=96, checkpoint_every=25)
        net, rows = TR.train(net, samples, cfg)
        # windowed validation trend is monotone downward
        vals = [r.val_loss for r in rows[1:]]
        thirds = np.array_split(np.array(vals), 3)
        means = [t.mean() for t in thirds]
        assert means[0] > means[1] > means[2]
        sset = TR.as_sample_set(samples)
        err = max(float(np.max(np.abs(network_forward(net, sset.contexts[i])
                                      - sset.targets[i])))
                  for i in range(0, 160, 8))
        assert err < 0.05


def _val_arrays(samples, seed, cap):
    from psrnn.rng import stream

    sset = TR.as_sample_set(samples)
    split = stream(seed, "split").permutation(len(sset))
    n_val = max(1, int(round(len(sset) * 0.1)))
    idx = split[:n_val][:cap]
    return sset.contexts[idx], sset.targets[idx]


class TestEvaluate:
    def _images(self, count=2, size=64):
        return [D.synth_texture("directional", size, seed=i, angle=30.0 * i, noise=0.02)
                for i in range(count)]

    def test_oracle_full_selection(self):
        report = TR.evaluate(None, self._images(), 32,
                             TR.EvalConfig(block_sizes=(8,), oracle=True))
        assert report.summary["selection_rate_pct"] == 100.0
        for r in report.records:
            assert r.net.satd == 0.0
            assert r.winner == "network"

    def test_baseline_only_zero_reduction(self):
        report = TR.evaluate(None, self._images(), 32, TR.EvalConfig(block_sizes=(8,)))
        assert report.summary["selection_rate_pct"] == 0.0
        assert report.summary["mean_cost_reduction_pct"] == 0.0
        assert all(r.net is None for r in report.records)

    def test_untrained_network_barely_selected(self):
        net = build_network(SMALL_NET, seed=9)
        report = TR.evaluate({8: net}, self._images(), 32,
                             TR.EvalConfig(block_sizes=(8,)))
        assert report.summary["selection_rate_pct"] < 15.0

    def test_double_entry_audit(self):
        net = build_network(SMALL_NET, seed=9)
        report = TR.evaluate({8: net}, self._images(), 32,
                             TR.EvalConfig(block_sizes=(8,)))
        for r in report.records:
            want = min(r.base.total, r.net.total)
            assert r.winner_total == want
            if r.net.total < r.base.total:
                assert r.winner == "network"
            else:
                assert r.winner == "baseline"

    def test_determinism(self):
        net = build_network(SMALL_NET, seed=9)
        cfg = TR.EvalConfig(block_sizes=(8,))
        r1 = TR.evaluate({8: net}, self._images(), 32, cfg)
        r2 = TR.evaluate({8: net}, self._images(), 32, cfg)
        assert list(r1.csv_rows()) == list(r2.csv_rows())
        assert r1.summary == r2.summary

    def test_missing_model_rejected(self):
        net = build_network(SMALL_NET, seed=9)
        with pytest.raises(ConfigError):
            TR.evaluate({8: net}, self._images(), 32, TR.EvalConfig(block_sizes=(8, 16)))

    def test_greedy_policy_covers_image(self):
        nets = {8: build_network(SMALL_NET, seed=9),
                16: build_network(NetworkConfig(pu_size=16, preproc_channels=(4, 4),
                                                unit_hidden=(4, 2, 2),
                                                recon_channels=(4,)), seed=9)}
        img = self._images(count=1, size=96)
        report = TR.evaluate(nets, img, 32,
                             TR.EvalConfig(block_sizes=(8, 16), policy="greedy"))
        area = sum(r.n * r.n for r in report.records)
        h, w = img[0].pixels.shape
        tiles = [(y, x) for y in range(16, h - 16 + 1, 16)
                 for x in range(16, w - 16 + 1, 16)]
        assert area == len(tiles) * 16 * 16
        assert {r.n for r in report.records} <= {8, 16}

    def test_greedy_needs_two_sizes(self):
        with pytest.raises(ConfigError):
            TR.evaluate(None, self._images(), 32,
                        TR.EvalConfig(block_sizes=(8,), policy="greedy", oracle=True))


class TestExperiments:
    def test_compare_losses_needs_three_seeds(self):
        with pytest.raises(UsageError):
            TR.compare_losses(make_samples(count=120), small_cfg(), [1, 2])

    def test_compare_losses_control_gap_zero(self):
        samples = make_samples(count=300)
        out = TR.compare_losses(samples, small_cfg(total_iters=20), [1, 2, 3],
                                kinds=("satd", "satd"))
        assert out["median_gap"] == 0.0
        for row in out["rows"]:
            assert row["satd_val_satd"] == row["mse_val_satd"]

    def test_compare_losses_rows_reproducible(self):
        samples = make_samples(count=300)
        a = TR.compare_losses(samples, small_cfg(total_iters=20), [4, 5, 6])
        b = TR.compare_losses(samples, small_cfg(total_iters=20), [4, 5, 6])
        assert a == b

    def test_ablate_rejects_zero_units(self):
        with pytest.raises(UsageError):
            TR.ablate_units(make_samples(count=120), [0], small_cfg(), [])

    def test_ablate_emits_row_per_count(self):
        samples = make_samples(count=300)
        images = [D.synth_texture("directional", 64, angle=20.0)]
        rows = TR.ablate_units(samples, [1, 2], small_cfg(total_iters=15), images)
        assert [r["units"] for r in rows] == [1, 2]
        for r in rows:
            assert np.isfinite(r["final_val_loss"])

    def test_fine_tune_composite_heads(self):
        from psrnn.model import (build_psrnn_plus, psrnn_plus_parameters)

        base = build_network(SMALL_NET, seed=3)
        plus = build_psrnn_plus(base, 16, seed=3, channels=16)
        base_before = {k: v.copy() for k, v in parameters(base).items()}
        head_before = {k: v.copy() for k, v in psrnn_plus_parameters(plus).items()}
        samples = make_samples(n=16, count=200, size=96)
        plus, losses = TR.fine_tune_psrnn_plus(plus, samples, iters=8, batch_size=4)
        assert len(losses) == 8 and all(np.isfinite(l) for l in losses)
        # the base stays frozen; the heads move
        for k, v in parameters(plus.base).items():
            np.testing.assert_array_equal(v, base_before[k])
        moved = any(not np.array_equal(v, head_before[k])
                    for k, v in psrnn_plus_parameters(plus).items())
        assert moved
