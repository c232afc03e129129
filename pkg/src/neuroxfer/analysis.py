"""Evaluation mathematics: repeat-based SNR spectra, residual-PSD deltas,
response downsampling, scaling-law fits, paired tests, and bootstrap SEs.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.stats import t as t_dist

from .errors import ConfigError, DataError
from .signal import PSDEstimate, lowpass_fir, welch_psd
from .tensorio import TimeSeries

SNR_CAP = 1e9


@dataclass
class SNRSpectrum:
    """Per-frequency ratio of repeat-consistent signal power to noise power."""

    freqs_hz: np.ndarray
    snr: np.ndarray            # (channels, n_freq), capped at SNR_CAP
    n_repeats: int
    bias_corrected: bool
    capped: np.ndarray         # bins where the noise estimate vanished

    def band_mean(self, lo_hz: float, hi_hz: float) -> np.ndarray:
        """Mean SNR over the requested band, per channel."""
        mask = (self.freqs_hz > lo_hz) & (self.freqs_hz <= hi_hz)
        if not mask.any():
            raise ConfigError(f"band ({lo_hz}, {hi_hz}) covers no PSD bins")
        return self.snr[:, mask].mean(axis=1)


def snr_spectrum(repeats: list[TimeSeries], segment_length: int,
                 overlap_fraction: float = 0.5,
                 bias_corrected: bool = True) -> SNRSpectrum:
    """Band-wise SNR from repeated presentations.

    Signal is the mean across repeats; noise is each repeat minus that
    mean.  With bias correction (default) the residual PSD is scaled by
    n/(n-1) and the mean-signal PSD is debiased by the noise leakage
    N/n, so a pure-noise input yields SNR near zero instead of 1/(n-1).
    """
    if len(repeats) < 2:
        raise DataError(f"need at least 2 repeats, got {len(repeats)}")
    shapes = {r.values.shape for r in repeats}
    rates = {r.rate_hz for r in repeats}
    if len(shapes) != 1 or len(rates) != 1:
        raise DataError("repeats must share shape and rate")
    n = len(repeats)
    stack = np.stack([r.values for r in repeats])   # (n, C, T)
    # mean via deviations from the first repeat: exact for identical repeats
    mean_vals = stack[0] + (stack - stack[0]).sum(axis=0) / n
    mean_ts = TimeSeries(mean_vals, repeats[0].rate_hz)
    psd_mean = welch_psd(mean_ts, segment_length, overlap_fraction)
    noise_acc = np.zeros_like(psd_mean.power)
    for i in range(n):
        resid = TimeSeries(stack[i] - mean_ts.values, mean_ts.rate_hz)
        noise_acc += welch_psd(resid, segment_length, overlap_fraction).power
    noise_raw = noise_acc / n
    if bias_corrected:
        noise = noise_raw * n / (n - 1)
        sig = np.clip(psd_mean.power - noise / n, 0.0, None)
    else:
        noise = noise_raw
        sig = psd_mean.power
    zero_noise = noise == 0
    snr = np.where(zero_noise, SNR_CAP, sig / np.where(zero_noise, 1.0, noise))
    capped = zero_noise | (snr >= SNR_CAP)
    snr = np.minimum(snr, SNR_CAP)
    return SNRSpectrum(psd_mean.freqs_hz, snr, n, bias_corrected, capped)


@dataclass
class ResidualDelta:
    """Change in residual PSD between two models plus band summaries."""

    freqs_hz: np.ndarray
    delta: np.ndarray          # (channels, n_freq): PSD_b - PSD_a
    pct_below: np.ndarray      # per-channel % change of integrated power
    pct_above: np.ndarray
    split_hz: float
    psd_a: PSDEstimate
    psd_b: PSDEstimate


def residual_psd_delta(resid_a: TimeSeries, resid_b: TimeSeries,
                       segment_length: int, overlap_fraction: float = 0.5,
                       split_hz: float = 0.25) -> ResidualDelta:
    """Per-frequency residual-power change and integrated band summaries.

    Positive percentages mean model b has more residual power (worse fit)
    than model a in that band.
    """
    if resid_a.values.shape != resid_b.values.shape:
        raise DataError("residuals must share shape")
    if abs(resid_a.rate_hz - resid_b.rate_hz) > 1e-9:
        raise DataError("residuals must share rate")
    pa = welch_psd(resid_a, segment_length, overlap_fraction)
    pb = welch_psd(resid_b, segment_length, overlap_fraction)
    nyq = resid_a.rate_hz / 2
    below_a = pa.band_power(0.0, split_hz)
    below_b = pb.band_power(0.0, split_hz)
    above_a = pa.band_power(split_hz, nyq)
    above_b = pb.band_power(split_hz, nyq)
    return ResidualDelta(
        freqs_hz=pa.freqs_hz,
        delta=pb.power - pa.power,
        pct_below=100.0 * (below_b - below_a) / below_a,
        pct_above=100.0 * (above_b - above_a) / above_a,
        split_hz=split_hz,
        psd_a=pa,
        psd_b=pb,
    )


def downsample_responses(resp: TimeSeries, factor: int = 2,
                         taps: int | None = None) -> TimeSeries:
    """Anti-alias low-pass at 0.8x the new Nyquist, then decimate."""
    if int(factor) != factor or factor < 2:
        raise ConfigError(f"factor must be an integer >= 2, got {factor}")
    factor = int(factor)
    if taps is None:
        taps = int(np.ceil(16.5 * factor))
        taps += 1 - taps % 2
    cutoff = 0.8 * resp.rate_hz / (2 * factor)
    filtered = lowpass_fir(resp, cutoff, taps)
    return TimeSeries(filtered.values[:, ::factor], resp.rate_hz / factor)


@dataclass
class ScalingFit:
    """Per-channel linear fit of score change against log2 story count."""

    story_counts: np.ndarray
    slope: np.ndarray        # score change per doubling, per channel
    intercept: np.ndarray
    r2: np.ndarray
    bootstrap_se: np.ndarray | None = None


def fit_scaling(scores: dict, baseline: np.ndarray) -> ScalingFit:
    """OLS of (score(N) - baseline) on log2 N, independently per channel."""
    counts = np.asarray(sorted(scores), dtype=float)
    if counts.size < 2:
        raise ConfigError("need at least 2 story counts")
    if np.any(np.diff(counts) <= 0):
        raise ConfigError("story counts must be strictly increasing")
    baseline = np.asarray(baseline, dtype=float)
    Y = np.stack([np.asarray(scores[int(n) if float(n).is_integer() else n])
                  - baseline for n in counts])      # (N, C)
    x = np.log2(counts)
    X = np.stack([x, np.ones_like(x)], axis=1)
    coef, *_ = np.linalg.lstsq(X, Y, rcond=None)
    pred = X @ coef
    ss_res = ((Y - pred) ** 2).sum(axis=0)
    ss_tot = ((Y - Y.mean(axis=0)) ** 2).sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        r2 = np.where(ss_tot > 0, 1.0 - ss_res / ss_tot,
                      np.where(ss_res < 1e-30, 1.0, 0.0))
    return ScalingFit(counts.astype(int), coef[0], coef[1], r2)


def threshold_channels(scores: np.ndarray, rho_min: float = 0.1) -> np.ndarray:
    """Indices of channels whose baseline score is strictly above threshold."""
    scores = np.asarray(scores)
    if not np.all(np.isfinite(scores)):
        raise DataError("scores must be finite")
    keep = np.flatnonzero(scores > rho_min)
    if keep.size == 0:
        warnings.warn(f"no channels above threshold {rho_min}", stacklevel=2)
    return keep


@dataclass
class TTestResult:
    t: float
    p: float
    dof: int
    degenerate: bool


def paired_ttest(a: np.ndarray, b: np.ndarray) -> TTestResult:
    """Two-sided paired t-test on per-channel scores."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise DataError("inputs must share shape")
    n = a.size
    if n < 3:
        raise DataError(f"need at least 3 pairs, got {n}")
    d = a - b
    sd = d.std(ddof=1)
    if sd == 0:
        # all differences identical: no variability to test against
        return TTestResult(t=0.0 if d[0] == 0 else np.inf * np.sign(d[0]),
                           p=1.0 if d[0] == 0 else 0.0,
                           dof=n - 1, degenerate=True)
    t = d.mean() / (sd / np.sqrt(n))
    p = 2.0 * float(t_dist.sf(abs(t), n - 1))
    return TTestResult(t=float(t), p=p, dof=n - 1, degenerate=False)


def bootstrap_se(n_units: int, statistic, n_boot: int = 1000, seed: int = 0):
    """SD of a statistic over with-replacement resamples of unit indices.

    ``statistic`` maps an index array to a scalar or vector; the return
    matches its shape.  Deterministic per seed.
    """
    if n_units < 2:
        raise ConfigError(f"need at least 2 units, got {n_units}")
    if n_boot < 2:
        raise ConfigError(f"need at least 2 bootstrap draws, got {n_boot}")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    stats = []
    for _ in range(n_boot):
        idx = rng.integers(0, n_units, size=n_units)
        stats.append(np.asarray(statistic(idx), dtype=float))
    return np.std(np.stack(stats), axis=0, ddof=1)


def bootstrap_se_mean(values: np.ndarray, n_boot: int = 1000, seed: int = 0) -> float:
    """Bootstrap SE of the mean of a 1-D sample."""
    values = np.asarray(values, dtype=float)
    return float(bootstrap_se(values.size, lambda i: values[i].mean(), n_boot, seed))
