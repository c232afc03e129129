"""Trainable windowed feature extractor and the slow-response tuning loop.

A small attention network maps a window of stimulus waveform to one
feature vector (the final token of a tapped layer).  The base weights
are frozen at construction; training touches only the low-rank adapters
on the attention projections and the rank-constrained response
projection.  Gradients are exact reverse-mode, computed by hand in
float64, which keeps runs bit-reproducible and lets the test suite
verify them against finite differences.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .embed import FeatureMatrix, delay_embed, valid_rows_for_delays
from .errors import ConfigError, DataError, NumericalError
from .ridge import fit_ridge_cv
from .signal import lanczos_matrix
from .tensorio import TimeSeries, read_tensor, write_tensor

_LN_EPS = 1e-5
_GELU_C = 0.7978845608028654  # sqrt(2/pi)
LORA_TARGETS = ("q", "k", "v")


@dataclass
class FeatureNetConfig:
    frontend_stride: int
    n_layers: int = 4
    d_model: int = 64
    n_heads: int = 4
    mlp_width: int = 128
    tap_layer: int = 3
    window_s: float = 4.0
    seed: int = 0
    lora_rank: int = 4
    proj_rank: int = 100

    def __post_init__(self):
        if not 1 <= self.tap_layer <= self.n_layers:
            raise ConfigError(f"tap_layer {self.tap_layer} outside 1..{self.n_layers}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by {self.n_heads} heads")
        if self.window_s <= 0:
            raise ConfigError("window_s must be positive")
        if self.frontend_stride < 1:
            raise ConfigError("frontend_stride must be >= 1 sample")

    def to_dict(self) -> dict:
        return {
            "frontend_stride": self.frontend_stride,
            "n_layers": self.n_layers,
            "d_model": self.d_model,
            "n_heads": self.n_heads,
            "mlp_width": self.mlp_width,
            "tap_layer": self.tap_layer,
            "window_s": self.window_s,
            "seed": self.seed,
            "lora_rank": self.lora_rank,
            "proj_rank": self.proj_rank,
        }


@dataclass
class LoRAAdapter:
    """Low-rank delta for one frozen weight matrix: W_eff = W + scaling*(A @ B)."""

    A: np.ndarray  # (d, r), zero-initialized so the initial delta vanishes
    B: np.ndarray  # (r, d)
    scaling: float


@dataclass
class ResponseProjection:
    """Rank-constrained feature-to-channel map, pred = feats @ U @ V."""

    U: np.ndarray  # (F, r)
    V: np.ndarray  # (r, C)


def gelu(x: np.ndarray) -> np.ndarray:
    """tanh-form GELU, written with in-place ops (this runs on every token
    of every window, so temporaries dominate its cost otherwise)."""
    u = x * x
    u *= 0.044715
    u += 1.0
    u *= x
    u *= _GELU_C
    np.tanh(u, out=u)
    u += 1.0
    u *= x
    u *= 0.5
    return u


def gelu_grad(x: np.ndarray) -> np.ndarray:
    x2 = x * x
    u = x2 * 0.044715
    u += 1.0
    u *= x
    u *= _GELU_C
    np.tanh(u, out=u)                 # u = tanh(c*(x + 0.044715 x^3))
    w = x2 * (3 * 0.044715)
    w += 1.0
    w *= _GELU_C
    w *= x                            # w = c x (1 + 3*0.044715 x^2)
    t2 = u * u
    np.subtract(1.0, t2, out=t2)
    w *= t2                           # w = c x (...) (1 - tanh^2)
    u += 1.0
    u += w
    u *= 0.5
    return u


def sinusoidal_positions(n_tokens: int, d_model: int) -> np.ndarray:
    pos = np.arange(n_tokens)[:, None]
    dim = np.arange(d_model // 2)[None, :]
    angles = pos / np.power(10000.0, 2.0 * dim / d_model)
    pe = np.zeros((n_tokens, d_model))
    pe[:, 0::2] = np.sin(angles)
    pe[:, 1::2] = np.cos(angles)
    return pe


def _layer_norm(x: np.ndarray, g: np.ndarray, b: np.ndarray):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = np.einsum("...d,...d->...", xc, xc)[..., None] / x.shape[-1]
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = xc
    xhat *= inv
    return xhat * g + b, xhat, inv


def _layer_norm_back(dy: np.ndarray, g: np.ndarray, xhat: np.ndarray,
                     inv: np.ndarray) -> np.ndarray:
    dxhat = dy * g
    return inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )


class FeatureNet:
    """Frozen attention network with trainable low-rank adapters.

    Construction is fully determined by (config, waveform rate); two nets
    built from the same pair are bit-identical.
    """

    def __init__(self, config: FeatureNetConfig, wave_rate_hz: float):
        self.config = config
        self.wave_rate_hz = float(wave_rate_hz)
        win = config.window_s * wave_rate_hz
        if abs(win - round(win)) > 1e-9:
            raise ConfigError(
                f"window {config.window_s}s is not a whole number of samples at "
                f"{wave_rate_hz} Hz"
            )
        self.window_len = int(round(win))
        if self.window_len < config.frontend_stride:
            raise ConfigError("window shorter than one frontend frame")

        ss_base, ss_lora = np.random.SeedSequence(config.seed).spawn(2)
        rng = np.random.default_rng(ss_base)
        d, m, s = config.d_model, config.mlp_width, config.frontend_stride
        self.base: dict[str, np.ndarray] = {
            "frontend.W": rng.normal(0.0, np.sqrt(2.0 / (s + d)), (s, d)),
            "frontend.b": np.zeros(d),
        }
        for l in range(1, config.n_layers + 1):
            pre = f"layers.{l}"
            self.base[f"{pre}.ln1.g"] = np.ones(d)
            self.base[f"{pre}.ln1.b"] = np.zeros(d)
            for t in ("Wq", "Wk", "Wv", "Wo"):
                self.base[f"{pre}.{t}"] = rng.normal(0.0, np.sqrt(1.0 / d), (d, d))
            self.base[f"{pre}.bo"] = np.zeros(d)
            self.base[f"{pre}.ln2.g"] = np.ones(d)
            self.base[f"{pre}.ln2.b"] = np.zeros(d)
            self.base[f"{pre}.W1"] = rng.normal(0.0, np.sqrt(2.0 / (d + m)), (d, m))
            self.base[f"{pre}.c1"] = np.zeros(m)
            self.base[f"{pre}.W2"] = rng.normal(0.0, np.sqrt(2.0 / (d + m)), (m, d))
            self.base[f"{pre}.c2"] = np.zeros(d)

        rng_l = np.random.default_rng(ss_lora)
        r = config.lora_rank
        self.adapters: dict[tuple[int, str], LoRAAdapter] = {}
        for l in range(1, config.n_layers + 1):
            for t in LORA_TARGETS:
                self.adapters[(l, t)] = LoRAAdapter(
                    A=np.zeros((d, r)),
                    B=rng_l.normal(0.0, 0.02, (r, d)),
                    scaling=1.0 / r,
                )
        self.proj: ResponseProjection | None = None
        self.n_tokens = self.window_len // config.frontend_stride
        self._pe = sinusoidal_positions(self.n_tokens, d)

    # -- parameter bookkeeping -------------------------------------------

    def base_hash(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.base):
            h.update(name.encode())
            h.update(self.base[name].tobytes())
        return h.hexdigest()

    def init_projection(self, n_channels: int, seed: int) -> None:
        cfg = self.config
        r = min(cfg.proj_rank, cfg.d_model, n_channels)
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        self.proj = ResponseProjection(
            U=rng.normal(0.0, 1.0 / np.sqrt(cfg.d_model), (cfg.d_model, r)),
            V=rng.normal(0.0, 1.0 / np.sqrt(r), (r, n_channels)),
        )

    def trainables(self) -> dict[str, np.ndarray]:
        out = {}
        for (l, t), ad in sorted(self.adapters.items()):
            out[f"lora.{l}.{t}.A"] = ad.A
            out[f"lora.{l}.{t}.B"] = ad.B
        if self.proj is not None:
            out["proj.U"] = self.proj.U
            out["proj.V"] = self.proj.V
        return out

    def set_trainables(self, values: dict[str, np.ndarray]) -> None:
        own = self.trainables()
        for name, arr in values.items():
            if name not in own:
                raise DataError(f"unknown trainable parameter {name!r}")
            if own[name].shape != arr.shape:
                raise DataError(f"shape mismatch for {name!r}")
            own[name][...] = arr

    def _effective(self, layer: int) -> dict[str, np.ndarray]:
        pre = f"layers.{layer}"
        eff = {}
        for t in LORA_TARGETS:
            ad = self.adapters[(layer, t)]
            eff[t] = self.base[f"{pre}.W{t}"] + ad.scaling * (ad.A @ ad.B)
        return eff

    # -- forward / backward ----------------------------------------------

    def _frames(self, windows: np.ndarray) -> np.ndarray:
        stride = self.config.frontend_stride
        rem = self.window_len - self.n_tokens * stride
        return windows[:, rem:].reshape(windows.shape[0], self.n_tokens, stride)

    def forward_batch(self, windows: np.ndarray, want_cache: bool = False):
        """Features for a (B, window_len) batch; optionally keep the cache
        needed by :meth:`backward_batch`.

        Token-parallel projections run as single 2D GEMMs (query, key, and
        value fused into one (d, 3d) weight) — the per-window loop count
        makes this the hot path of the whole pipeline.
        """
        windows = np.atleast_2d(np.asarray(windows, dtype=np.float64))
        if windows.shape[1] != self.window_len:
            raise DataError(
                f"window length {windows.shape[1]} != expected {self.window_len}"
            )
        cfg = self.config
        H, d = cfg.n_heads, cfg.d_model
        dh = d // H
        T = self.n_tokens
        B = windows.shape[0]
        x = self._frames(windows) @ self.base["frontend.W"] + self.base["frontend.b"]
        x = x + self._pe[None, :, :]
        cache = {"layers": [], "B": B} if want_cache else None
        for l in range(1, cfg.tap_layer + 1):
            pre = f"layers.{l}"
            eff = self._effective(l)
            Wqkv = np.concatenate([eff["q"], eff["k"], eff["v"]], axis=1)
            u, xh1, inv1 = _layer_norm(x, self.base[f"{pre}.ln1.g"], self.base[f"{pre}.ln1.b"])
            u2 = u.reshape(B * T, d)
            qkv = (u2 @ Wqkv).reshape(B, T, 3, H, dh).transpose(2, 0, 3, 1, 4)
            qf = qkv[0].reshape(B * H, T, dh)
            kf = qkv[1].reshape(B * H, T, dh)
            vf = qkv[2].reshape(B * H, T, dh)
            s = np.matmul(qf, kf.transpose(0, 2, 1))
            s *= 1.0 / np.sqrt(dh)
            s -= s.max(axis=-1, keepdims=True)
            p = np.exp(s, out=s)
            p /= p.sum(axis=-1, keepdims=True)
            a2 = np.matmul(p, vf).reshape(B, H, T, dh).transpose(0, 2, 1, 3) \
                .reshape(B * T, d)
            x = x + (a2 @ self.base[f"{pre}.Wo"]).reshape(B, T, d) + self.base[f"{pre}.bo"]
            w, xh2, inv2 = _layer_norm(x, self.base[f"{pre}.ln2.g"], self.base[f"{pre}.ln2.b"])
            z1 = w.reshape(B * T, d) @ self.base[f"{pre}.W1"] + self.base[f"{pre}.c1"]
            gz = gelu(z1)
            x = x + (gz @ self.base[f"{pre}.W2"]).reshape(B, T, d) + self.base[f"{pre}.c2"]
            if want_cache:
                cache["layers"].append({
                    "Wqkv": Wqkv, "u2": u2, "xh1": xh1, "inv1": inv1,
                    "qf": qf, "kf": kf, "vf": vf, "p": p,
                    "xh2": xh2, "inv2": inv2, "z1": z1,
                })
        feats = x[:, -1, :].copy()
        return (feats, cache) if want_cache else feats

    def forward_window(self, window: np.ndarray) -> np.ndarray:
        """Feature vector for one window (deterministic given the seed)."""
        return self.forward_batch(np.asarray(window)[None, :])[0]

    def backward_batch(self, cache: dict, dfeat: np.ndarray) -> dict[str, np.ndarray]:
        """Gradients of the adapter matrices given d(loss)/d(features).

        Adapters on layers above the tap never influence the features and
        receive exact zero gradients.  Base weights receive none at all.
        """
        cfg = self.config
        H, d = cfg.n_heads, cfg.d_model
        dh = d // H
        T = self.n_tokens
        B = dfeat.shape[0]
        if B != cache["B"]:
            raise DataError("cache batch size does not match gradient batch")
        dx = np.zeros((B, T, d))
        dx[:, -1, :] = dfeat
        grads = {}
        for l in range(cfg.tap_layer, 0, -1):
            c = cache["layers"][l - 1]
            pre = f"layers.{l}"
            # MLP sublayer
            dgz = dx.reshape(B * T, d) @ self.base[f"{pre}.W2"].T
            dz1 = dgz * gelu_grad(c["z1"])
            dw = (dz1 @ self.base[f"{pre}.W1"].T).reshape(B, T, d)
            dx = dx + _layer_norm_back(dw, self.base[f"{pre}.ln2.g"], c["xh2"], c["inv2"])
            # attention sublayer
            da = (dx.reshape(B * T, d) @ self.base[f"{pre}.Wo"].T) \
                .reshape(B, T, H, dh).transpose(0, 2, 1, 3).reshape(B * H, T, dh)
            dp = np.matmul(da, c["vf"].transpose(0, 2, 1))
            dv = np.matmul(c["p"].transpose(0, 2, 1), da)
            ds = c["p"] * (dp - (dp * c["p"]).sum(axis=-1, keepdims=True))
            dq = np.matmul(ds, c["kf"]) / np.sqrt(dh)
            dk = np.matmul(ds.transpose(0, 2, 1), c["qf"]) / np.sqrt(dh)
            dqkv = np.stack([dq, dk, dv]).reshape(3, B, H, T, dh) \
                .transpose(1, 3, 0, 2, 4).reshape(B * T, 3 * d)
            dWqkv = c["u2"].T @ dqkv
            du = (dqkv @ c["Wqkv"].T).reshape(B, T, d)
            for ti, t in enumerate(LORA_TARGETS):
                dW = dWqkv[:, ti * d:(ti + 1) * d]
                ad = self.adapters[(l, t)]
                grads[f"lora.{l}.{t}.A"] = ad.scaling * (dW @ ad.B.T)
                grads[f"lora.{l}.{t}.B"] = ad.scaling * (ad.A.T @ dW)
            dx = dx + _layer_norm_back(du, self.base[f"{pre}.ln1.g"], c["xh1"], c["inv1"])
        for l in range(cfg.tap_layer + 1, cfg.n_layers + 1):
            for t in LORA_TARGETS:
                ad = self.adapters[(l, t)]
                grads[f"lora.{l}.{t}.A"] = np.zeros_like(ad.A)
                grads[f"lora.{l}.{t}.B"] = np.zeros_like(ad.B)
        return grads

    # -- feature extraction ----------------------------------------------

    def window_indices(self, n_samples: int, stride_samples: int) -> np.ndarray:
        n_rows = (n_samples - 1) // stride_samples + 1
        offs = np.arange(self.window_len) - self.window_len + 1
        return np.arange(n_rows)[:, None] * stride_samples + offs[None, :]

    def gather_windows(self, wave: np.ndarray, idx: np.ndarray) -> np.ndarray:
        clipped = np.clip(idx, 0, wave.size - 1)
        out = wave[clipped]
        out[idx < 0] = 0.0  # left-zero-padded context before the first full window
        return out

    def extract_features(self, stimulus: TimeSeries, stride_s: float,
                         batch_size: int = 512) -> FeatureMatrix:
        """One feature row per stride step; output rate is 1/stride_s."""
        if stimulus.n_channels != 1:
            raise DataError("stimulus waveform must be single-channel")
        if abs(stimulus.rate_hz - self.wave_rate_hz) > 1e-9:
            raise DataError(
                f"stimulus rate {stimulus.rate_hz} != net rate {self.wave_rate_hz}"
            )
        ss = stride_s * stimulus.rate_hz
        if abs(ss - round(ss)) > 1e-9 or round(ss) < 1:
            raise ConfigError(
                f"stride {stride_s}s is not a whole positive number of samples"
            )
        ss = int(round(ss))
        if stimulus.n_samples < self.window_len:
            raise DataError("stimulus shorter than one window")
        wave = stimulus.values[0]
        idx = self.window_indices(stimulus.n_samples, ss)
        rows = []
        for start in range(0, idx.shape[0], batch_size):
            block = self.gather_windows(wave, idx[start:start + batch_size])
            rows.append(self.forward_batch(block))
        return FeatureMatrix(np.concatenate(rows, axis=0), 1.0 / stride_s)


# -- loss ------------------------------------------------------------------


def spatial_corr_loss(pred: np.ndarray, actual: np.ndarray,
                      return_grad: bool = False, mode: str = "spatial"):
    """Negative mean correlation between prediction and target patterns.

    ``spatial`` mode (default) correlates across channels within each
    timepoint; ``temporal`` correlates across timepoints within each
    channel.  Zero-variance rows contribute zero and are flagged.
    """
    if mode == "temporal":
        pred, actual = pred.T, actual.T
    elif mode != "spatial":
        raise ConfigError(f"unknown loss mode {mode!r}")
    pred = np.atleast_2d(pred)
    actual = np.atleast_2d(actual)
    if pred.shape != actual.shape:
        raise DataError(f"shape mismatch: {pred.shape} vs {actual.shape}")
    if pred.shape[1] < 2:
        raise DataError("need at least 2 columns to correlate within a row")
    n_rows = pred.shape[0]
    p = pred - pred.mean(axis=1, keepdims=True)
    a = actual - actual.mean(axis=1, keepdims=True)
    pn = np.sqrt((p ** 2).sum(axis=1, keepdims=True))
    an = np.sqrt((a ** 2).sum(axis=1, keepdims=True))
    flags = (pn[:, 0] == 0) | (an[:, 0] == 0)
    safe_pn = np.where(pn == 0, 1.0, pn)
    safe_an = np.where(an == 0, 1.0, an)
    r = (p * a).sum(axis=1) / (safe_pn * safe_an)[:, 0]
    r[flags] = 0.0
    loss = -r.mean()
    if not return_grad:
        return loss, flags
    # d(-mean r)/d pred; both terms below are already row-centered
    dr = a / (safe_pn * safe_an) - r[:, None] * p / safe_pn ** 2
    dr[flags] = 0.0
    grad = -dr / n_rows
    if mode == "temporal":
        grad = grad.T
    return loss, grad, flags


# -- optimizer -------------------------------------------------------------


@dataclass
class TrainState:
    """Adam state for a named parameter set (bias-corrected updates)."""

    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    epoch: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: TrainState, params: dict[str, np.ndarray],
              grads: dict[str, np.ndarray]) -> TrainState:
    """Standard Adam update, applied in place to ``params``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for {name!r}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for name, g in grads.items():
        if name not in state.m:
            state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        state.m[name] = b1 * state.m[name] + (1 - b1) * g
        state.v[name] = b2 * state.v[name] + (1 - b2) * g * g
        mhat = state.m[name] / bc1
        vhat = state.v[name] / bc2
        params[name] -= state.lr * mhat / (np.sqrt(vhat) + state.eps)
    return state


# -- checkpoints -----------------------------------------------------------


def save_checkpoint(net: FeatureNet, out_dir, meta: dict) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, arr in net.trainables().items():
        write_tensor(out / (name.replace(".", "_") + ".nst"), arr)
    with open(out / "meta.json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_checkpoint(net: FeatureNet, in_dir) -> dict:
    src = Path(in_dir)
    values = {}
    for name in net.trainables():
        arr, _ = read_tensor(src / (name.replace(".", "_") + ".nst"))
        values[name] = arr
    net.set_trainables(values)
    return json.loads((src / "meta.json").read_text())


# -- fine-tuning -----------------------------------------------------------


def finetune(net: FeatureNet, train_stories: list[tuple[TimeSeries, TimeSeries]],
             stride_s: float, epochs: int = 30, batch_trs: int = 10,
             lr: float = 5e-4, seed: int = 0, loss_mode: str = "spatial",
             ckpt_root=None, resample_a: int = 3, align_offset_s: float = 0.0):
    """Tune the adapters and projection on slow responses.

    Per epoch: contiguous spans of ``batch_trs`` response samples in
    shuffled order; for each span the features are re-extracted (stride
    ``stride_s``), linearly resampled to the response rate, projected to
    channels, scored with the correlation loss, and updated with one Adam
    step.  A checkpoint of the trainables is written per epoch when
    ``ckpt_root`` is given.  Returns (checkpoint dirs, per-epoch mean loss).

    ``align_offset_s`` pairs the response at time t with features at
    t - offset, compensating the hemodynamic lag between stimulus content
    and the slow response it drives (downstream ridge models handle this
    with FIR delays; the projection here has no temporal structure).
    """
    if net.proj is None:
        raise ConfigError("call init_projection before finetune")
    if not train_stories:
        raise DataError("no training stories")
    stride_samp = int(round(stride_s * net.wave_rate_hz))

    # per story: window gather indices, resample operator, response rows
    prep = []
    for stim, resp in train_stories:
        idx = net.window_indices(stim.n_samples, stride_samp)
        R = lanczos_matrix(idx.shape[0], 1.0 / stride_s, resp.rate_hz, a=resample_a)
        off = int(round(align_offset_s * resp.rate_hz))
        if off:
            R = R[:-off] if off < R.shape[0] else R[:0]
            Ys = resp.values.T[off:]
        else:
            Ys = resp.values.T
        n_tr = min(R.shape[0], Ys.shape[0])
        if n_tr < batch_trs:
            raise DataError("story too short after alignment offset")
        prep.append({
            "wave": stim.values[0],
            "idx": idx,
            "R": R[:n_tr],
            "Y": Ys[:n_tr],
        })

    spans = []
    for si, p in enumerate(prep):
        n_tr = p["Y"].shape[0]
        starts = list(range(0, n_tr, batch_trs))
        for s in starts:
            e = min(s + batch_trs, n_tr)
            if e - s < 2 and spans and spans[-1][0] == si:
                spans[-1] = (si, spans[-1][1], e)
            else:
                spans.append((si, s, e))

    rng = np.random.default_rng(np.random.SeedSequence(seed))
    state = TrainState(lr=lr)
    params = net.trainables()
    ckpt_dirs = []
    losses = []
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(spans))
        epoch_loss = 0.0
        for bi, oi in enumerate(order):
            si, s, e = spans[oi]
            p = prep[si]
            Rb = p["R"][s:e]
            cols = np.flatnonzero(np.abs(Rb).sum(axis=0) > 0)
            windows = net.gather_windows(p["wave"], p["idx"][cols])
            feats, cache = net.forward_batch(windows, want_cache=True)
            Rsub = Rb[:, cols]
            batch_feats = Rsub @ feats
            P1 = batch_feats @ net.proj.U
            pred = P1 @ net.proj.V
            loss, dpred, _ = spatial_corr_loss(
                pred, p["Y"][s:e], return_grad=True, mode=loss_mode
            )
            if not np.isfinite(loss):
                raise NumericalError(
                    f"non-finite loss at epoch {epoch}, batch {bi} (story {si})"
                )
            dV = P1.T @ dpred
            dP1 = dpred @ net.proj.V.T
            dU = batch_feats.T @ dP1
            dfeats = Rsub.T @ (dP1 @ net.proj.U.T)
            grads = net.backward_batch(cache, dfeats)
            grads["proj.U"] = dU
            grads["proj.V"] = dV
            adam_step(state, params, grads)
            epoch_loss += loss
        state.epoch = epoch
        losses.append(epoch_loss / len(spans))
        if ckpt_root is not None:
            ck = Path(ckpt_root) / f"epoch_{epoch:03d}"
            save_checkpoint(net, ck, {
                "epoch": epoch,
                "loss_curve": losses.copy(),
                "seed": seed,
                "config": net.config.to_dict(),
                "rng_state": repr(rng.bit_generator.state),
            })
            ckpt_dirs.append(ck)
    return ckpt_dirs, losses


def build_slow_design(net: FeatureNet, stories: list[tuple[TimeSeries, TimeSeries]],
                      stride_s: float, delays, resample_a: int = 3):
    """Delayed design + responses + edge-validity mask over concatenated stories.

    Features are extracted per story, resampled to the response rate,
    delay-embedded per story (so edges never leak across stories), then
    stacked.
    """
    Xs, Ys, masks = [], [], []
    for stim, resp in stories:
        feats = net.extract_features(stim, stride_s)
        R = lanczos_matrix(feats.n_samples, feats.rate_hz, resp.rate_hz, a=resample_a)
        n_tr = min(R.shape[0], resp.n_samples)
        at_tr = FeatureMatrix(R[:n_tr] @ feats.values, resp.rate_hz)
        design = delay_embed(at_tr, delays)
        Xs.append(design.values)
        Ys.append(resp.values.T[:n_tr])
        masks.append(valid_rows_for_delays(n_tr, delays))
    return np.concatenate(Xs), np.concatenate(Ys), np.concatenate(masks)


def select_epoch(net: FeatureNet, checkpoints: list,
                 val_stories: list[tuple[TimeSeries, TimeSeries]],
                 stride_s: float, delays, alphas,
                 fixed_alpha_per_channel: np.ndarray | None = None,
                 n_folds: int = 4):
    """Pick the checkpoint with the best validation encoding score.

    Stage one scores every checkpoint with ridge at the fixed per-channel
    regularization (typically the pretrained model's); stage two re-runs
    the full cross-validated grid for the winner.  Ties go to the
    earliest epoch.  Returns (index, refit solution, per-epoch scores).
    """
    if not checkpoints:
        raise DataError("need at least one checkpoint")
    scores = []
    for ck in checkpoints:
        load_checkpoint(net, ck)
        X, Y, mask = build_slow_design(net, val_stories, stride_s, delays)
        sol = fit_ridge_cv(X, Y, alphas=alphas, n_folds=n_folds, valid=mask,
                           alpha_per_channel=fixed_alpha_per_channel)
        scores.append(float(sol.cv_score_per_channel.mean()))
    best = int(np.argmax(scores))  # argmax takes the first (earliest) on ties
    load_checkpoint(net, checkpoints[best])
    X, Y, mask = build_slow_design(net, val_stories, stride_s, delays)
    refit = fit_ridge_cv(X, Y, alphas=alphas, n_folds=n_folds, valid=mask)
    return best, refit, scores
