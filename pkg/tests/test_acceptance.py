"""Acceptance suite: one test per criterion, one printed line each.

Criteria 8-10 run the full pipeline over multiple seeds and dominate the
runtime; they are marked ``slow`` (deselect with ``-m "not slow"``).
Run with ``-s`` to see the per-criterion lines as they pass.
"""

import copy
import filecmp
import json
import time

import numpy as np
import pytest

from neuroxfer import analysis, embed, pipeline, ridge, synth
from neuroxfer import net as netmod
from neuroxfer.signal import hilbert_envelope, high_gamma, welch_psd
from neuroxfer.tensorio import TimeSeries


def _report(num, text):
    print(f"[PASS] criterion {num:>2}: {text}")


class TestCriterion1RidgeOracle:
    def test_ridge_matches_normal_equations(self):
        rng = np.random.default_rng(101)
        alphas = np.logspace(0, 8, 10)
        t0 = time.time()
        worst = 0.0
        for _ in range(50):
            n = int(rng.integers(20, 201))
            f = int(rng.integers(2, 21))
            c = int(rng.integers(1, 6))
            Z = rng.normal(size=(n, f))
            Y = rng.normal(size=(n, c))
            betas = ridge.ridge_solve(Z, Y, alphas)
            for i, a in enumerate(alphas):
                ref = np.linalg.solve(Z.T @ Z + a * np.eye(f), Z.T @ Y)
                rel = np.abs(betas[i] - ref).max() / max(np.abs(ref).max(), 1e-30)
                worst = max(worst, rel)
        elapsed = time.time() - t0
        assert worst < 1e-6
        assert elapsed < 10.0
        _report(1, f"ridge oracle equivalence: worst rel err {worst:.2e}, "
                   f"{elapsed:.1f}s over 50 instances")


class TestCriterion2GradientCorrectness:
    def test_gradients_match_finite_differences(self):
        t0 = time.time()
        worst = 0.0
        for draw in range(20):
            rng = np.random.default_rng(200 + draw)
            cfg = netmod.FeatureNetConfig(
                frontend_stride=4, n_layers=2, d_model=int(rng.choice([8, 16])),
                n_heads=2, mlp_width=16, tap_layer=2, window_s=0.5,
                seed=int(rng.integers(1000)), lora_rank=2, proj_rank=6)
            net = netmod.FeatureNet(cfg, wave_rate_hz=32.0)
            net.init_projection(5, seed=int(rng.integers(1000)))
            for ad in net.adapters.values():
                ad.A[:] = rng.normal(0, 0.05, ad.A.shape)
            W = rng.normal(size=(2, net.window_len))
            Yb = rng.normal(size=(2, 5))

            feats, cache = net.forward_batch(W, want_cache=True)
            P1 = feats @ net.proj.U
            _, dpred, _ = spatial_loss_grad = netmod.spatial_corr_loss(
                P1 @ net.proj.V, Yb, return_grad=True)
            grads = net.backward_batch(cache, dpred @ net.proj.V.T @ net.proj.U.T)
            grads["proj.U"] = feats.T @ (dpred @ net.proj.V.T)
            grads["proj.V"] = P1.T @ dpred

            def loss_value():
                f = net.forward_batch(W)
                return netmod.spatial_corr_loss(f @ net.proj.U @ net.proj.V, Yb)[0]

            eps = 1e-4
            params = net.trainables()
            # spot-check a random subset of coordinates in every tensor
            for name, arr in params.items():
                flat = arr.reshape(-1)
                g = grads[name].reshape(-1)
                picks = rng.choice(flat.size, size=min(6, flat.size), replace=False)
                for ix in picks:
                    old = flat[ix]
                    flat[ix] = old + eps
                    lp = loss_value()
                    flat[ix] = old - eps
                    lm = loss_value()
                    flat[ix] = old
                    fd = (lp - lm) / (2 * eps)
                    rel = abs(fd - g[ix]) / max(abs(fd), abs(g[ix]), 1e-8)
                    worst = max(worst, rel)
        elapsed = time.time() - t0
        assert worst < 1e-4
        assert elapsed < 120.0
        _report(2, f"gradient correctness: worst rel err {worst:.2e} over 20 "
                   f"draws, {elapsed:.0f}s")


class TestCriterion3FreezeAndEquivalence:
    def test_zero_lora_equivalence_and_frozen_base(self):
        rng = np.random.default_rng(300)
        cfg = netmod.FeatureNetConfig(frontend_stride=8, n_layers=2, d_model=16,
                                      n_heads=2, mlp_width=32, tap_layer=2,
                                      window_s=2.0, seed=31, lora_rank=4)
        net = netmod.FeatureNet(cfg, wave_rate_hz=64.0)
        ref = netmod.FeatureNet(cfg, wave_rate_hz=64.0)
        w = rng.normal(size=net.window_len)
        assert np.array_equal(net.forward_window(w), ref.forward_window(w))

        h0 = net.base_hash()
        wave = TimeSeries(rng.normal(size=(1, 64 * 120)), 64.0)
        feats = net.extract_features(wave, 0.25)
        from neuroxfer.signal import lanczos_matrix
        R = lanczos_matrix(feats.n_samples, 4.0, 0.5)
        resp = TimeSeries((R @ feats.values @ rng.normal(size=(16, 6))).T, 0.5)
        net.init_projection(6, seed=1)
        # 100 optimizer steps: 10 epochs x 10 contiguous batches
        netmod.finetune(net, [(wave, resp)], 0.25, epochs=10, batch_trs=6,
                        lr=1e-3, seed=7)
        assert net.base_hash() == h0
        _report(3, "zero-adapter equivalence exact; base hash unchanged after "
                   "100 steps")


class TestCriterion4LagRecovery:
    def test_planted_delay_recovered_across_seeds(self):
        hits = 0
        total = 0
        for seed in range(10):
            rng = np.random.default_rng(400 + seed)
            n, n_feat, n_chan = 1200, 4, 8
            f = rng.normal(size=(n + 64, n_feat))
            k = np.hanning(7)
            f = np.apply_along_axis(
                lambda v: np.convolve(v, k / k.sum(), "same"), 0, f)[32:32 + n]
            w = rng.normal(size=(n_feat, n_chan))
            resp = np.zeros((n, n_chan))
            resp[6:] = f[:-6] @ w          # planted 0.3 s delay at 20 Hz
            resp += 0.3 * rng.normal(size=resp.shape)
            sweep = ridge.lag_sweep(embed.FeatureMatrix(f, 20.0),
                                    TimeSeries(resp.T, 20.0),
                                    embed.lag_grid(-2, 2, 81, 20))
            hits += int((sweep.best_lag_per_channel == 6).sum())
            total += n_chan
        assert hits / total >= 0.95
        _report(4, f"lag recovery: best_lag=6 on {hits}/{total} channels")


class TestCriterion5SpectralEstimators:
    def test_welch_hilbert_highgamma(self):
        rng = np.random.default_rng(500)
        x = rng.normal(size=(1, 2 ** 14))
        psd = welch_psd(TimeSeries(x, 100.0), 2 ** 10)
        parseval = abs(psd.band_power(0, 50)[0] - x.var()) / x.var()
        assert parseval < 0.05

        t = np.arange(20000) / 1000.0
        mod = 1.0 + 0.5 * np.cos(2 * np.pi * t)
        env = hilbert_envelope(TimeSeries((mod * np.cos(2 * np.pi * 100 * t))[None, :],
                                          1000.0))
        env_err = (np.abs(env.values[0, 500:-500] - mod[500:-500]).max()
                   / mod.max())
        assert env_err < 0.02

        t = np.arange(60000) / 1000.0
        raw = (1 + 0.5 * np.cos(2 * np.pi * 0.5 * t)) * np.cos(2 * np.pi * 135 * t)
        hg = high_gamma(TimeSeries(raw[None, :], 1000.0))
        t20 = np.arange(hg.n_samples) / 20.0
        ref = 1 + 0.5 * np.cos(2 * np.pi * 0.5 * t20)
        r = np.corrcoef(hg.values[0, 40:-40], ref[40:-40])[0, 1]
        assert r > 0.99
        _report(5, f"spectral estimators: Parseval {parseval:.3f}, envelope "
                   f"{env_err:.4f}, band-power tracking r={r:.4f}")


class TestCriterion6SNRRecovery:
    def test_injected_band_snr_recovered(self):
        lat = synth.make_latent(4096.0, 1, seed=600, c_slow=4)
        clean = synth.render_slow(lat, synth.HRFParams())
        spec = synth.NoiseSpec([(0.0, 0.125, 0.155), (0.125, 0.25, 0.114)])
        reps = synth.make_repeats(clean, 10, spec, seeds=list(range(10)))
        est = analysis.snr_spectrum(reps, 256)
        below = est.band_mean(0.0, 0.125).mean()
        above = est.band_mean(0.125, 0.25).mean()
        err_b = abs(below - 0.155) / 0.155
        err_a = abs(above - 0.114) / 0.114
        assert err_b < 0.1 and err_a < 0.1
        _report(6, f"SNR recovery: {below:.4f} vs 0.155 ({err_b:.1%}), "
                   f"{above:.4f} vs 0.114 ({err_a:.1%})")


class TestCriterion7ScalingRecovery:
    def test_noiseless_and_noisy_recovery(self):
        counts = [1, 2, 4, 8, 16]
        scores = {n: 0.01 * np.log2(n) * np.ones(8) for n in counts}
        fit = analysis.fit_scaling(scores, np.zeros(8))
        assert np.abs(fit.slope - 0.01).max() < 1e-9

        rng = np.random.default_rng(700)
        sigma = 0.002
        noisy = {n: 0.02 * np.log2(n) + sigma * rng.normal(size=400)
                 for n in counts}
        fit_n = analysis.fit_scaling(noisy, np.zeros(400))
        rel = abs(fit_n.slope.mean() - 0.02) / 0.02
        assert rel < 0.05

        # SE of the per-N mean delta consistent with the bootstrap estimate
        x = np.log2(counts)
        deltas = noisy[4]
        boot = analysis.bootstrap_se_mean(deltas, n_boot=1000, seed=1)
        analytic = deltas.std(ddof=1) / np.sqrt(deltas.size)
        assert abs(boot - analytic) / analytic < 0.2
        _report(7, f"scaling recovery: noiseless exact, noisy {rel:.1%}, "
                   f"bootstrap SE {boot:.2e} vs analytic {analytic:.2e}")


# -- pipeline-scale criteria -------------------------------------------------


def _desk_config(seed: int) -> pipeline.ExperimentConfig:
    cfg = pipeline.ExperimentConfig()
    cfg.seed = seed
    return cfg


@pytest.fixture(scope="module")
def transfer_runs(tmp_path_factory):
    """Shared pipeline runs for criteria 8 and 10: per seed, one dataset,
    one fine-tune, fast encodings for pretrained and tuned nets."""
    root = tmp_path_factory.mktemp("transfer")
    runs = []
    for seed in range(5):
        cfg = _desk_config(seed)
        data = pipeline.cmd_synth(cfg, root / f"data_{seed}")
        ft = pipeline.cmd_finetune(cfg, data, root / f"ft_{seed}")
        pre = pipeline.cmd_encode_fast(cfg, data, root / f"pre_{seed}")
        post = pipeline.cmd_encode_fast(cfg, data, root / f"post_{seed}",
                                        checkpoint=ft)
        runs.append({"cfg": cfg, "data": data, "ft": ft, "pre": pre,
                     "post": post})
    return runs


@pytest.mark.slow
class TestCriterion8TransferAnalogue:
    def test_tuned_net_beats_pretrained_on_fast_responses(self, transfer_runs):
        t0 = time.time()
        wins = 0
        lines = []
        for seed, run in enumerate(transfer_runs):
            _, _, s_pre = pipeline._load_fast_run(run["pre"])
            _, _, s_post = pipeline._load_fast_run(run["post"])
            tt = analysis.paired_ttest(s_post, s_pre)
            gain = s_post.mean() - s_pre.mean()
            wins += int(gain > 0)
            lines.append(f"seed {seed}: {s_pre.mean():.4f}->{s_post.mean():.4f} "
                         f"(p={tt.p:.2e})")
            assert tt.p < 0.05, f"seed {seed}: t-test p={tt.p}"
        assert wins >= 4, f"only {wins}/5 seeds improved: {lines}"
        _report(8, f"transfer analogue: {wins}/5 seeds improved; " + "; ".join(lines))


@pytest.mark.slow
class TestCriterion9DownsamplingAnalogue:
    def test_downsampled_tuning_matches_original(self, transfer_runs):
        run = transfer_runs[0]
        cfg, data = run["cfg"], run["data"]
        out = run["post"].parent
        ft_ds = pipeline.cmd_finetune(cfg, data, out / "ft_ds",
                                      downsample_factor=2)
        post_ds = pipeline.cmd_encode_fast(cfg, data, out / "post_ds",
                                           checkpoint=ft_ds)
        _, _, s_orig = pipeline._load_fast_run(run["post"])
        _, _, s_ds = pipeline._load_fast_run(post_ds)
        diff = s_ds - s_orig
        se = analysis.bootstrap_se_mean(diff, n_boot=cfg.analysis.n_boot,
                                        seed=cfg.seed)
        assert abs(diff.mean()) <= se, (
            f"mean diff {diff.mean():.5f} exceeds 1 bootstrap SE {se:.5f}")
        _report(9, f"downsampling analogue: mean diff {diff.mean():+.5f} "
                   f"within 1 SE ({se:.5f})")


@pytest.mark.slow
class TestCriterion10SpectrumAnalogue:
    def test_residual_power_reduced_in_both_bands(self, transfer_runs):
        reduced_below = 0
        reduced_above = 0
        for run in transfer_runs:
            spec = pipeline.cmd_spectrum(run["cfg"], run["pre"], run["post"],
                                         run["post"].parent / "spectrum",
                                         force=True)
            info = json.loads((spec / "spectrum.json").read_text())
            reduced_below += int(info["mean_pct_below"] < 0)
            reduced_above += int(info["mean_pct_above"] < 0)
        # sign of the band-integrated change, majority of seeds
        assert reduced_below >= 4 and reduced_above >= 4, (
            f"below: {reduced_below}/5, above: {reduced_above}/5")
        _report(10, f"spectrum analogue: residual power reduced below/above "
                    f"the slow Nyquist in {reduced_below}/5 and "
                    f"{reduced_above}/5 seeds")


@pytest.mark.slow
class TestCriterion11Determinism:
    def test_pipeline_reruns_byte_identical(self, tmp_path):
        cfg = _desk_config(0)
        cfg.dataset.train_stories = 2
        cfg.dataset.story_duration_s = 300.0
        cfg.dataset.fast_duration_s = 120.0
        cfg.dataset.n_slow_channels = 8
        cfg.dataset.n_fast_channels = 8
        cfg.finetune.epochs = 1
        cfg.lags.count = 11
        cfg.lags.lo_s, cfg.lags.hi_s = -0.25, 0.25
        trees = []
        for tag in ("x", "y"):
            d = pipeline.cmd_synth(cfg, tmp_path / tag / "data")
            ft = pipeline.cmd_finetune(cfg, d, tmp_path / tag / "ft")
            pipeline.cmd_encode_fast(cfg, d, tmp_path / tag / "fast",
                                     checkpoint=ft)
            pipeline.cmd_snr(cfg, d, tmp_path / tag / "snr")
            trees.append(tmp_path / tag)
        a, b = trees
        files_a = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
        files_b = sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
        assert files_a == files_b
        diffs = [str(rel) for rel in files_a
                 if not filecmp.cmp(a / rel, b / rel, shallow=False)]
        assert diffs == [], f"differing files: {diffs}"
        _report(11, f"determinism: {len(files_a)} files byte-identical across "
                    f"two full pipeline runs")
