"""Synthetic cross-modality dataset generator.

One latent neural drive is observed two ways: as slow responses (latent
mixed into channels, convolved with a hemodynamic-style kernel, sampled
at 0.5 Hz) and as fast responses (mixed, delayed by a few hundred ms,
smoothed, softly rectified, sampled at 20 Hz).  The stimulus "waveform"
consumed by the feature network is a sum of carriers amplitude-modulated
by the same latent, so stimulus -> features -> responses closes without
any recorded corpus.  Noise is shaped per frequency band to hit target
signal-to-noise ratios exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import gamma as gamma_dist

from .errors import ConfigError, DataError
from .signal import resample_lanczos
from .tensorio import TimeSeries


@dataclass
class LatentDrive:
    """K latent channels at a high internal rate plus channel mixing maps."""

    values: np.ndarray              # (samples, K)
    rate_hz: float
    seed: int
    mixing_slow: np.ndarray | None = None   # (K, C_slow)
    mixing_fast: np.ndarray | None = None   # (K, C_fast)

    @property
    def n_samples(self) -> int:
        return self.values.shape[0]

    @property
    def n_latents(self) -> int:
        return self.values.shape[1]

    @property
    def duration_s(self) -> float:
        return self.n_samples / self.rate_hz


@dataclass
class HRFParams:
    """Double-gamma hemodynamic kernel: peak at ``peak_s`` seconds, an
    undershoot peaking ``undershoot_s - peak_s`` later, net positive area."""

    peak_s: float = 4.0
    undershoot_s: float = 10.0
    undershoot_ratio: float = 6.0
    dispersion: float = 0.9
    length_s: float = 28.0

    def __post_init__(self):
        if not 3.0 <= self.peak_s <= 4.0:
            raise ConfigError(f"peak_s {self.peak_s} outside [3, 4]")
        ret = self.undershoot_s - self.peak_s
        if not 4.0 <= ret <= 6.0:
            raise ConfigError(f"undershoot return {ret}s after peak outside [4, 6]")
        if self.length_s < self.undershoot_s + 4:
            raise ConfigError("kernel too short to cover the undershoot return")

    def kernel(self, rate_hz: float) -> np.ndarray:
        """Kernel sampled at rate_hz, peak normalized to 1."""
        t = np.arange(int(round(self.length_s * rate_hz))) / rate_hz
        b = self.dispersion
        a1 = self.peak_s / b + 1.0          # gamma mode = (a-1)*b = peak
        a2 = self.undershoot_s / b + 1.0
        k = gamma_dist.pdf(t, a1, scale=b) - gamma_dist.pdf(t, a2, scale=b) / self.undershoot_ratio
        if k.sum() <= 0:
            raise ConfigError("kernel does not integrate to a positive value")
        return k / k.max()


@dataclass
class NoiseSpec:
    """Band edges (Hz) with per-band SNR targets (signal power / noise power).

    Bands must tile (0, Nyquist].  An infinite target leaves the band
    noise-free.
    """

    bands: list = field(default_factory=list)   # [(lo_hz, hi_hz, snr), ...]

    def __post_init__(self):
        if not self.bands:
            raise ConfigError("noise spec needs at least one band")
        prev_hi = 0.0
        for lo, hi, snr in self.bands:
            if lo != prev_hi:
                raise ConfigError(f"bands must be contiguous from 0, got gap at {lo}")
            if hi <= lo:
                raise ConfigError(f"empty band ({lo}, {hi})")
            if not snr > 0:
                raise ConfigError(f"SNR target must be positive, got {snr}")
            prev_hi = hi

    def validate_rate(self, rate_hz: float) -> None:
        if self.bands[-1][1] < rate_hz / 2 - 1e-9:
            raise ConfigError(
                f"bands end at {self.bands[-1][1]} Hz, below Nyquist {rate_hz / 2}"
            )


def _unit_variance_band_noise(n: int, rate_hz: float, lo_hz: float, hi_hz: float,
                              rng: np.random.Generator) -> np.ndarray:
    """White-in-band Gaussian noise, used by make_latent."""
    freqs = np.fft.rfftfreq(n, 1.0 / rate_hz)
    spec = np.zeros(freqs.size, dtype=complex)
    mask = (freqs >= lo_hz) & (freqs <= hi_hz)
    m = int(mask.sum())
    spec[mask] = rng.normal(size=m) + 1j * rng.normal(size=m)
    x = np.fft.irfft(spec, n)
    sd = x.std()
    if sd == 0:
        raise ConfigError(f"band ({lo_hz}, {hi_hz}) contains no FFT bins")
    return x / sd


def make_mixing(k: int, c: int, rng: np.random.Generator) -> np.ndarray:
    """Full-row-rank K x C map with unit-norm columns."""
    if c < k:
        raise ConfigError(f"need at least K={k} channels, got {c}")
    M = rng.normal(size=(k, c))
    M /= np.linalg.norm(M, axis=0, keepdims=True)
    if np.linalg.matrix_rank(M) < k:
        raise ConfigError("mixing map is rank-deficient")  # measure-zero event
    return M


def make_latent(duration_s: float, k: int, seed: int, rate_hz: float = 100.0,
                band_hz=(0.01, 5.0), c_slow: int | None = None,
                c_fast: int | None = None) -> LatentDrive:
    """K independent filtered-noise channels with unit variance.

    Power spans ``band_hz`` so both the slow and the fast observation see
    structure.  Deterministic per seed, including the mixing maps.
    """
    if duration_s <= 0:
        raise ConfigError("duration must be positive")
    n = int(round(duration_s * rate_hz))
    ss = np.random.SeedSequence(seed)
    ch_seeds = ss.spawn(k + 1)
    values = np.empty((n, k))
    for i in range(k):
        rng = np.random.default_rng(ch_seeds[i])
        values[:, i] = _unit_variance_band_noise(n, rate_hz, band_hz[0], band_hz[1], rng)
    rng_mix = np.random.default_rng(ch_seeds[k])
    mixing_slow = make_mixing(k, c_slow, rng_mix) if c_slow else None
    mixing_fast = make_mixing(k, c_fast, rng_mix) if c_fast else None
    return LatentDrive(values, rate_hz, seed, mixing_slow, mixing_fast)


def render_slow(latent: LatentDrive, hrf: HRFParams,
                out_rate_hz: float = 0.5) -> TimeSeries:
    """Mix latents into channels, convolve with the HRF kernel, resample."""
    if latent.mixing_slow is None:
        raise DataError("latent has no slow mixing map")
    kern = hrf.kernel(latent.rate_hz)
    if latent.duration_s < 10 * hrf.length_s:
        raise DataError(
            f"latent duration {latent.duration_s}s < 10 x kernel length {hrf.length_s}s"
        )
    mixed = latent.values @ latent.mixing_slow   # (n, C)
    n = mixed.shape[0]
    conv = np.stack([np.convolve(mixed[:, c], kern)[:n] for c in range(mixed.shape[1])])
    return resample_lanczos(TimeSeries(conv, latent.rate_hz), out_rate_hz)


def _gaussian_kernel(sigma_s: float, rate_hz: float) -> np.ndarray:
    half = max(1, int(round(3 * sigma_s * rate_hz)))
    t = np.arange(-half, half + 1) / rate_hz
    k = np.exp(-0.5 * (t / sigma_s) ** 2)
    return k / k.sum()


def render_fast(latent: LatentDrive, delay_s, out_rate_hz: float = 20.0,
                smooth_s: float = 0.03) -> TimeSeries:
    """Mix, delay per channel, smooth, soft-rectify, resample.

    ``delay_s`` is a scalar or one value per fast channel, each in
    [0.2, 0.8] seconds.
    """
    if latent.mixing_fast is None:
        raise DataError("latent has no fast mixing map")
    mixed = latent.values @ latent.mixing_fast
    n, c = mixed.shape
    delays = np.broadcast_to(np.asarray(delay_s, dtype=float), (c,))
    if np.any((delays < 0.2) | (delays > 0.8)):
        raise ConfigError(f"delays must lie in [0.2, 0.8] s, got {delays}")
    if np.any(delays >= latent.duration_s):
        raise ConfigError("delay exceeds latent duration")
    kern = _gaussian_kernel(smooth_s, latent.rate_hz)
    half = (kern.size - 1) // 2
    out = np.empty((c, n))
    for ci in range(c):
        d = int(round(delays[ci] * latent.rate_hz))
        shifted = np.zeros(n)
        shifted[d:] = mixed[:n - d, ci]
        sm = np.convolve(shifted, kern)[half:half + n]
        out[ci] = np.logaddexp(0.0, sm)  # softplus keeps it envelope-like
    return resample_lanczos(TimeSeries(out, latent.rate_hz), out_rate_hz)


def _band_component(coeffs: np.ndarray, mask: np.ndarray, n: int) -> np.ndarray:
    spec = np.zeros_like(coeffs)
    spec[mask] = coeffs[mask]
    return np.fft.irfft(spec, n)


def add_noise(ts: TimeSeries, spec: NoiseSpec, seed: int) -> TimeSeries:
    """Additive Gaussian noise shaped to hit per-band SNR targets exactly.

    Within each band the noise spectrum is proportional to the signal
    spectrum, so the ratio of signal to noise power is flat across the
    band; each band component is rescaled so the realized band SNR equals
    the target.
    """
    spec.validate_rate(ts.rate_hz)
    x = ts.values
    c, n = x.shape
    freqs = np.fft.rfftfreq(n, 1.0 / ts.rate_hz)
    ch_seeds = np.random.SeedSequence(seed).spawn(c)
    out = x.copy()
    for ci in range(c):
        rng = np.random.default_rng(ch_seeds[ci])
        sig_spec = np.fft.rfft(x[ci])
        draw = rng.normal(size=freqs.size) + 1j * rng.normal(size=freqs.size)
        shaped = draw * np.abs(sig_spec)
        shaped[0] = 0.0
        for lo, hi, snr in spec.bands:
            if not np.isfinite(snr):
                continue
            mask = (freqs > lo) & (freqs <= hi)
            if not mask.any():
                continue
            sig_band = _band_component(sig_spec, mask, n)
            noise_band = _band_component(shaped, mask, n)
            sig_pow = float((sig_band ** 2).sum())
            noise_pow = float((noise_band ** 2).sum())
            if sig_pow == 0.0 or noise_pow == 0.0:
                continue
            out[ci] += noise_band * np.sqrt(sig_pow / (snr * noise_pow))
    return TimeSeries(out, ts.rate_hz)


def make_repeats(clean: TimeSeries, n: int, spec: NoiseSpec, seeds) -> list[TimeSeries]:
    """n noisy renditions of one clean series, independent noise draws."""
    if n < 2:
        raise ConfigError("need at least 2 repeats")
    seeds = list(seeds)
    if len(seeds) != n:
        raise ConfigError(f"need {n} seeds, got {len(seeds)}")
    if len(set(seeds)) != n:
        raise ConfigError("duplicate repeat seeds rejected")
    return [add_noise(clean, spec, s) for s in seeds]


def synth_waveform(latent: LatentDrive, carriers_hz, wave_rate_hz: float,
                   seed: int, nuisance: LatentDrive | None = None,
                   nuisance_carriers_hz=(), nuisance_gain: float = 1.0,
                   noise_sd: float = 0.0) -> TimeSeries:
    """Stimulus waveform: carriers amplitude-modulated by the latent drive.

    Each latent channel modulates its own carrier; optional nuisance
    latents modulate extra carriers that drive no response, and white
    background noise of ``noise_sd`` is added on top, giving the feature
    network something to learn to ignore.
    """
    carriers_hz = list(carriers_hz)
    if len(carriers_hz) != latent.n_latents:
        raise ConfigError(
            f"{latent.n_latents} latents need as many carriers, got {len(carriers_hz)}"
        )
    if max(carriers_hz, default=0) >= wave_rate_hz / 2:
        raise ConfigError("carrier above Nyquist")
    n_out = int(round(latent.duration_s * wave_rate_hz))
    t = np.arange(n_out) / wave_rate_hz
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    wave = np.zeros(n_out)

    def _add(drive: LatentDrive, freqs, gain):
        env = resample_lanczos(
            TimeSeries(drive.values.T, drive.rate_hz), wave_rate_hz
        ).values[:, :n_out]
        for i, f in enumerate(freqs):
            phase = rng.uniform(0, 2 * np.pi)
            wave[:env.shape[1]] += gain * np.logaddexp(0.0, env[i]) * np.cos(
                2 * np.pi * f * t[:env.shape[1]] + phase
            )

    _add(latent, carriers_hz, 1.0)
    if nuisance is not None:
        if len(list(nuisance_carriers_hz)) != nuisance.n_latents:
            raise ConfigError("nuisance carriers must match nuisance latents")
        _add(nuisance, list(nuisance_carriers_hz), nuisance_gain)
    if noise_sd > 0:
        wave += noise_sd * rng.normal(size=n_out)
    return TimeSeries(wave[None, :], wave_rate_hz)
