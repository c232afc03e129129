"""Feature network tests: forward oracle, gradients, optimizer, tuning loop."""

import numpy as np
import pytest

from neuroxfer.embed import FeatureMatrix
from neuroxfer.errors import ConfigError, DataError, NumericalError
from neuroxfer.net import (
    FeatureNet, FeatureNetConfig, TrainState, adam_step, finetune, gelu,
    gelu_grad, load_checkpoint, save_checkpoint, select_epoch,
    sinusoidal_positions, spatial_corr_loss,
)
from neuroxfer.signal import lanczos_matrix
from neuroxfer.tensorio import TimeSeries


def tiny_config(**kw):
    base = dict(frontend_stride=4, n_layers=2, d_model=8, n_heads=2,
                mlp_width=16, tap_layer=2, window_s=1.0, seed=7,
                lora_rank=2, proj_rank=5)
    base.update(kw)
    return FeatureNetConfig(**base)


def tiny_net(**kw):
    return FeatureNet(tiny_config(**kw), wave_rate_hz=32.0)


class TestConfig:
    def test_invariants(self):
        with pytest.raises(ConfigError):
            tiny_config(tap_layer=3)
        with pytest.raises(ConfigError):
            tiny_config(d_model=9)
        with pytest.raises(ConfigError):
            tiny_config(window_s=-1.0)


class TestForward:
    def test_determinism(self):
        net = tiny_net()
        w = np.random.default_rng(0).normal(size=net.window_len)
        a = net.forward_window(w)
        b = net.forward_window(w)
        assert np.array_equal(a, b)

    def test_two_nets_same_seed_identical(self):
        a, b = tiny_net(), tiny_net()
        assert a.base_hash() == b.base_hash()
        w = np.random.default_rng(1).normal(size=a.window_len)
        assert np.array_equal(a.forward_window(w), b.forward_window(w))

    def test_zero_lora_equals_base_output(self):
        net = tiny_net()
        tuned = tiny_net()
        rng = np.random.default_rng(2)
        # perturbing B alone must not change anything while A stays zero
        for ad in tuned.adapters.values():
            ad.B[:] = rng.normal(size=ad.B.shape)
        w = rng.normal(size=net.window_len)
        assert np.array_equal(net.forward_window(w), tuned.forward_window(w))

    def test_wrong_window_length_rejected(self):
        net = tiny_net()
        with pytest.raises(DataError):
            net.forward_window(np.ones(net.window_len + 1))

    def test_matches_literal_reimplementation(self):
        """Straight-line re-computation of the full forward arithmetic."""
        net = tiny_net()
        rng = np.random.default_rng(3)
        for ad in net.adapters.values():
            ad.A[:] = rng.normal(0, 0.1, ad.A.shape)
        w = rng.normal(size=net.window_len)

        cfg = net.config
        d, H = cfg.d_model, cfg.n_heads
        dh = d // H
        T = net.window_len // cfg.frontend_stride
        frames = w[net.window_len - T * cfg.frontend_stride:].reshape(T, -1)
        x = frames @ net.base["frontend.W"] + net.base["frontend.b"]
        x = x + sinusoidal_positions(T, d)

        def ln(v, g, b):
            out = np.empty_like(v)
            for t in range(T):
                mu = v[t].mean()
                var = ((v[t] - mu) ** 2).mean()
                out[t] = (v[t] - mu) / np.sqrt(var + 1e-5) * g + b
            return out

        for l in (1, 2):
            pre = f"layers.{l}"
            u = ln(x, net.base[f"{pre}.ln1.g"], net.base[f"{pre}.ln1.b"])
            eff = {}
            for t in ("q", "k", "v"):
                ad = net.adapters[(l, t)]
                eff[t] = net.base[f"{pre}.W{t}"] + ad.scaling * (ad.A @ ad.B)
            attn_out = np.zeros((T, d))
            for h in range(H):
                sl = slice(h * dh, (h + 1) * dh)
                q = u @ eff["q"][:, sl]
                k = u @ eff["k"][:, sl]
                v = u @ eff["v"][:, sl]
                for ti in range(T):
                    scores = np.array([q[ti] @ k[tj] / np.sqrt(dh)
                                       for tj in range(T)])
                    e = np.exp(scores - scores.max())
                    p = e / e.sum()
                    attn_out[ti, sl] = sum(p[tj] * v[tj] for tj in range(T))
            x = x + attn_out @ net.base[f"{pre}.Wo"] + net.base[f"{pre}.bo"]
            wn = ln(x, net.base[f"{pre}.ln2.g"], net.base[f"{pre}.ln2.b"])
            z = wn @ net.base[f"{pre}.W1"] + net.base[f"{pre}.c1"]
            x = x + gelu(z) @ net.base[f"{pre}.W2"] + net.base[f"{pre}.c2"]

        np.testing.assert_allclose(net.forward_window(w), x[-1], atol=1e-10)


class TestExtractFeatures:
    def test_row_counts_match_stride(self):
        net = tiny_net()
        stim = TimeSeries(np.random.default_rng(4).normal(size=(1, 32 * 60)), 32.0)
        feats = net.extract_features(stim, 0.25)
        assert feats.n_samples == 240
        assert feats.rate_hz == 4.0
        half = net.extract_features(stim, 0.5)
        assert half.n_samples == 120

    def test_stride_equal_window_matches_disjoint_forwards(self):
        net = tiny_net()
        rng = np.random.default_rng(5)
        stim = TimeSeries(rng.normal(size=(1, net.window_len * 5)), 32.0)
        feats = net.extract_features(stim, net.config.window_s)
        wave = stim.values[0]
        L = net.window_len
        for k in range(feats.n_samples):
            end = k * L  # row k ends at sample k*stride
            win = np.zeros(L)
            lo = end - L + 1
            win[max(0, -lo):] = wave[max(0, lo):end + 1]
            np.testing.assert_allclose(feats.values[k], net.forward_window(win),
                                       atol=1e-12)

    def test_rate_mismatch_rejected(self):
        net = tiny_net()
        with pytest.raises(DataError):
            net.extract_features(TimeSeries(np.ones((1, 320)), 16.0), 0.25)


class TestSpatialCorrLoss:
    def test_perfect_match(self):
        rng = np.random.default_rng(6)
        y = rng.normal(size=(10, 5))
        loss, _ = spatial_corr_loss(y, y)
        assert abs(loss - (-1.0)) < 1e-12

    def test_anti_match(self):
        rng = np.random.default_rng(7)
        y = rng.normal(size=(10, 5))
        loss, _ = spatial_corr_loss(-y, y)
        assert abs(loss - 1.0) < 1e-12

    def test_shift_invariance_per_timepoint(self):
        rng = np.random.default_rng(8)
        y = rng.normal(size=(10, 5))
        offsets = rng.normal(size=(10, 1))
        loss, _ = spatial_corr_loss(y + offsets, y)
        assert abs(loss - (-1.0)) < 1e-12

    def test_positive_scale_invariance(self):
        rng = np.random.default_rng(9)
        p = rng.normal(size=(8, 6))
        y = rng.normal(size=(8, 6))
        l1, _ = spatial_corr_loss(p, y)
        l2, _ = spatial_corr_loss(3.0 * p + rng.normal(size=(8, 1)), y)
        assert abs(l1 - l2) < 1e-12

    def test_zero_variance_row_flagged(self):
        rng = np.random.default_rng(10)
        p = rng.normal(size=(4, 5))
        y = rng.normal(size=(4, 5))
        p[2] = 7.0
        loss, grad, flags = spatial_corr_loss(p, y, return_grad=True)
        assert flags[2] and not flags[0]
        assert np.all(grad[2] == 0.0)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(11)
        p = rng.normal(size=(5, 7))
        y = rng.normal(size=(5, 7))
        _, grad, _ = spatial_corr_loss(p, y, return_grad=True)
        eps = 1e-6
        for i in range(5):
            for j in range(7):
                pp = p.copy(); pp[i, j] += eps
                pm = p.copy(); pm[i, j] -= eps
                fd = (spatial_corr_loss(pp, y)[0] - spatial_corr_loss(pm, y)[0]) / (2 * eps)
                assert abs(fd - grad[i, j]) < 1e-7

    def test_temporal_mode_transposes(self):
        rng = np.random.default_rng(12)
        p = rng.normal(size=(6, 4))
        y = rng.normal(size=(6, 4))
        l1, _ = spatial_corr_loss(p, y, mode="temporal")
        l2, _ = spatial_corr_loss(p.T, y.T, mode="spatial")
        assert abs(l1 - l2) < 1e-15


class TestBackward:
    def test_gradients_match_finite_differences(self):
        net = tiny_net()
        net.init_projection(6, seed=11)
        rng = np.random.default_rng(0)
        for ad in net.adapters.values():
            ad.A[:] = rng.normal(0, 0.05, ad.A.shape)
        W = rng.normal(size=(3, net.window_len))
        Yb = rng.normal(size=(3, 6))

        feats, cache = net.forward_batch(W, want_cache=True)
        P1 = feats @ net.proj.U
        _, dpred, _ = spatial_corr_loss(P1 @ net.proj.V, Yb, return_grad=True)
        grads = net.backward_batch(cache, dpred @ net.proj.V.T @ net.proj.U.T)
        grads["proj.U"] = feats.T @ (dpred @ net.proj.V.T)
        grads["proj.V"] = P1.T @ dpred

        def loss_value():
            f = net.forward_batch(W)
            return spatial_corr_loss(f @ net.proj.U @ net.proj.V, Yb)[0]

        eps = 1e-5
        for name, arr in net.trainables().items():
            g = grads[name]
            it = np.nditer(arr, flags=["multi_index"])
            for _ in it:
                ix = it.multi_index
                old = arr[ix]
                arr[ix] = old + eps
                lp = loss_value()
                arr[ix] = old - eps
                lm = loss_value()
                arr[ix] = old
                fd = (lp - lm) / (2 * eps)
                rel = abs(fd - g[ix]) / max(abs(fd), abs(g[ix]), 1e-8)
                assert rel < 1e-4, f"{name}[{ix}]: fd={fd} analytic={g[ix]}"

    def test_layers_above_tap_get_zero_gradient(self):
        net = tiny_net(n_layers=3, tap_layer=2)
        net.init_projection(4, seed=1)
        rng = np.random.default_rng(1)
        W = rng.normal(size=(2, net.window_len))
        feats, cache = net.forward_batch(W, want_cache=True)
        grads = net.backward_batch(cache, rng.normal(size=feats.shape))
        for t in ("q", "k", "v"):
            assert np.all(grads[f"lora.3.{t}.A"] == 0.0)
            assert np.all(grads[f"lora.3.{t}.B"] == 0.0)
            assert np.any(grads[f"lora.1.{t}.A"] != 0.0)

    def test_base_weights_receive_no_gradient_entries(self):
        net = tiny_net()
        net.init_projection(4, seed=1)
        rng = np.random.default_rng(2)
        W = rng.normal(size=(2, net.window_len))
        feats, cache = net.forward_batch(W, want_cache=True)
        grads = net.backward_batch(cache, rng.normal(size=feats.shape))
        assert all(k.startswith("lora.") for k in grads)


class TestAdam:
    def test_zero_gradient_leaves_params(self):
        state = TrainState(lr=0.1)
        params = {"w": np.array([1.0, 2.0])}
        adam_step(state, params, {"w": np.zeros(2)})
        np.testing.assert_array_equal(params["w"], [1.0, 2.0])
        assert state.step == 1

    def test_first_step_is_signed_lr(self):
        state = TrainState(lr=5e-4)
        params = {"w": np.zeros(3)}
        g = np.array([0.3, -2.0, 1e-3])
        adam_step(state, params, {"w": g})
        np.testing.assert_allclose(params["w"], -5e-4 * np.sign(g), atol=1e-6)

    def test_two_steps_match_hand_rolled_recurrence(self):
        lr, b1, b2, eps = 1e-3, 0.9, 0.999, 1e-8
        state = TrainState(lr=lr, beta1=b1, beta2=b2, eps=eps)
        params = {"w": np.array([0.5])}
        g = np.array([0.7])
        adam_step(state, params, {"w": g})
        adam_step(state, params, {"w": g})
        # manual trace
        w, m, v = 0.5, 0.0, 0.0
        for t in (1, 2):
            m = b1 * m + (1 - b1) * 0.7
            v = b2 * v + (1 - b2) * 0.49
            w -= lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
        assert abs(params["w"][0] - w) < 1e-15

    def test_non_finite_gradient_aborts(self):
        state = TrainState()
        with pytest.raises(NumericalError):
            adam_step(state, {"w": np.zeros(1)}, {"w": np.array([np.nan])})


def _toy_training_setup(seed=5, n_channels=8, duration_s=120.0):
    rng = np.random.default_rng(seed)
    net = tiny_net(frontend_stride=8, d_model=16, mlp_width=32, window_s=2.0)
    net = FeatureNet(net.config, wave_rate_hz=64.0)
    wave = TimeSeries(rng.normal(size=(1, int(64 * duration_s))), 64.0)
    feats = net.extract_features(wave, 0.25)
    R = lanczos_matrix(feats.n_samples, 4.0, 0.5)
    true_map = rng.normal(size=(16, n_channels))
    resp = TimeSeries((R @ feats.values @ true_map).T, 0.5)
    net.init_projection(n_channels, seed=1)
    return net, wave, resp


class TestFinetune:
    def test_zero_epochs_is_identity(self):
        net, wave, resp = _toy_training_setup()
        before = {k: v.copy() for k, v in net.trainables().items()}
        dirs, losses = finetune(net, [(wave, resp)], 0.25, epochs=0)
        assert dirs == [] and losses == []
        for k, v in net.trainables().items():
            np.testing.assert_array_equal(v, before[k])

    def test_loss_decreases_on_linear_target(self):
        net, wave, resp = _toy_training_setup()
        _, losses = finetune(net, [(wave, resp)], 0.25, epochs=5, lr=5e-4, seed=9)
        diffs = np.diff(losses)
        assert np.all(diffs <= 1e-3), f"loss not decreasing: {losses}"

    def test_bit_identical_checkpoints_across_runs(self, tmp_path):
        outs = []
        for run in ("a", "b"):
            net, wave, resp = _toy_training_setup()
            dirs, _ = finetune(net, [(wave, resp)], 0.25, epochs=2, seed=9,
                               ckpt_root=tmp_path / run)
            outs.append(dirs)
        for da, db in zip(*outs):
            for f in sorted(da.glob("*.nst")):
                assert (db / f.name).read_bytes() == f.read_bytes()

    def test_base_weights_frozen_through_training(self):
        net, wave, resp = _toy_training_setup()
        h0 = net.base_hash()
        finetune(net, [(wave, resp)], 0.25, epochs=3, seed=2)
        assert net.base_hash() == h0

    def test_projection_required(self):
        net = tiny_net()
        with pytest.raises(ConfigError):
            finetune(net, [(TimeSeries(np.ones((1, 64)), 32.0),
                            TimeSeries(np.ones((1, 4)), 0.5))], 0.25)


class TestCheckpointsAndSelection:
    def test_checkpoint_roundtrip(self, tmp_path):
        net, wave, resp = _toy_training_setup()
        finetune(net, [(wave, resp)], 0.25, epochs=1, seed=3)
        save_checkpoint(net, tmp_path / "ck", {"epoch": 1})
        net2, _, _ = _toy_training_setup()
        meta = load_checkpoint(net2, tmp_path / "ck")
        assert meta["epoch"] == 1
        for k, v in net.trainables().items():
            np.testing.assert_array_equal(net2.trainables()[k], v)

    def test_single_checkpoint_selected_trivially(self, tmp_path):
        net, wave, resp = _toy_training_setup()
        save_checkpoint(net, tmp_path / "only", {"epoch": 0})
        best, refit, scores = select_epoch(
            net, [tmp_path / "only"], [(wave, resp)], 0.25, [1, 2, 3, 4],
            np.logspace(0, 8, 4), n_folds=2)
        assert best == 0 and len(scores) == 1

    def test_planted_optimum_epoch_selected(self, tmp_path):
        # responses are generated by the zero-adapter feature map; plant that
        # state as the middle checkpoint among degraded neighbors
        net, wave, resp = _toy_training_setup()
        rng = np.random.default_rng(4)
        for ad in net.adapters.values():
            ad.A[:] = rng.normal(0, 1.0, ad.A.shape)
            ad.B[:] = rng.normal(0, 0.5, ad.B.shape)
        save_checkpoint(net, tmp_path / "e0", {"epoch": 0})
        for ad in net.adapters.values():
            ad.A[:] = 0.0
        save_checkpoint(net, tmp_path / "e1", {"epoch": 1})
        for ad in net.adapters.values():
            ad.A[:] = rng.normal(0, 2.0, ad.A.shape)
            ad.B[:] = rng.normal(0, 1.0, ad.B.shape)
        save_checkpoint(net, tmp_path / "e2", {"epoch": 2})
        best, _, scores = select_epoch(
            net, [tmp_path / "e0", tmp_path / "e1", tmp_path / "e2"],
            [(wave, resp)], 0.25, [1, 2], np.logspace(0, 8, 4), n_folds=2)
        assert best == 1, f"scores: {scores}"

    def test_tie_selects_earliest(self, tmp_path):
        net, wave, resp = _toy_training_setup()
        save_checkpoint(net, tmp_path / "a", {"epoch": 0})
        save_checkpoint(net, tmp_path / "b", {"epoch": 1})
        best, _, scores = select_epoch(
            net, [tmp_path / "a", tmp_path / "b"], [(wave, resp)], 0.25,
            [1, 2], np.logspace(0, 8, 4), n_folds=2)
        assert best == 0 and scores[0] == scores[1]
