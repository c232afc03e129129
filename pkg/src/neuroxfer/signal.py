"""Signal kernels: Lanczos resampling, FIR filtering, analytic envelope,
band-power extraction, and Welch PSD estimation.

All operations act on :class:`~neuroxfer.tensorio.TimeSeries` (channels x
samples) along the sample axis and are pure functions.  Edge samples of
the resampler (first/last ``a`` outputs) and of the FIR filters (half the
tap count at each end) are computed with zero-padded context and should
be trimmed before quantitative analysis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import fftconvolve

from .errors import ConfigError, DataError
from .tensorio import TimeSeries


def _sinc(x: np.ndarray) -> np.ndarray:
    return np.sinc(x)  # normalized: sin(pi x)/(pi x)


# When downsampling, the kernel is stretched to place its cutoff slightly
# above the output Nyquist.  At exactly the Nyquist (multiplier 1.0) the
# Lanczos-3 passband ripple reaches 1.7e-3, which violates the resampler's
# interpolation tolerance; 1.2 keeps ripple under 1e-3 with little extra
# aliasing.
_CUTOFF_MULT = 1.2


def lanczos_matrix(n_in: int, rate_in: float, rate_out: float, a: int = 3) -> np.ndarray:
    """Dense (n_out, n_in) Lanczos resampling operator.

    Output sample k sits at time k / rate_out.  When downsampling the
    kernel is stretched by the rate ratio (anti-aliasing).  Rows are
    renormalized to unit sum after clipping at the signal edges, so a
    constant input maps to the same constant everywhere.
    """
    if rate_out <= 0 or rate_in <= 0:
        raise ConfigError("sampling rates must be positive")
    if a < 1:
        raise ConfigError("Lanczos window parameter a must be >= 1")
    if n_in < 2 * a:
        raise DataError(f"input too short for Lanczos a={a}: {n_in} samples")
    n_out = int(np.ceil(n_in * rate_out / rate_in))
    scale = max(1.0, rate_in / rate_out / _CUTOFF_MULT)
    half = a * scale
    centers = np.arange(n_out) * (rate_in / rate_out)
    R = np.zeros((n_out, n_in))
    for k, c in enumerate(centers):
        j0 = max(0, int(np.floor(c - half)) + 1)
        j1 = min(n_in - 1, int(np.ceil(c + half)) - 1)
        j = np.arange(j0, j1 + 1)
        u = (c - j) / scale
        w = _sinc(u) * _sinc(u / a)
        s = w.sum()
        if s != 0.0:
            R[k, j] = w / s
    return R


def resample_lanczos(ts: TimeSeries, target_rate_hz: float, a: int = 3) -> TimeSeries:
    """Resample every channel to ``target_rate_hz`` with a Lanczos kernel.

    Output duration matches the input duration within one output sample.
    The first and last ``a`` output samples are edge-affected.
    """
    if target_rate_hz <= 0:
        raise ConfigError("target rate must be positive")
    x = ts.values
    n_in = x.shape[1]
    if n_in < 2 * a:
        raise DataError(f"input too short for Lanczos a={a}: {n_in} samples")
    rate_in = ts.rate_hz
    n_out = int(np.ceil(n_in * target_rate_hz / rate_in))
    scale = max(1.0, rate_in / target_rate_hz / _CUTOFF_MULT)
    half = a * scale
    n_taps = int(np.ceil(2 * half)) + 1
    centers = np.arange(n_out) * (rate_in / target_rate_hz)
    j0 = np.floor(centers - half).astype(int) + 1
    offsets = np.arange(n_taps)
    idx = j0[:, None] + offsets[None, :]          # (n_out, n_taps)
    u = (centers[:, None] - idx) / scale
    w = np.where(np.abs(u) < a, _sinc(u) * _sinc(u / a), 0.0)
    w[(idx < 0) | (idx >= n_in)] = 0.0
    norm = w.sum(axis=1, keepdims=True)
    np.divide(w, norm, out=w, where=norm != 0)
    idx = np.clip(idx, 0, n_in - 1)
    out = np.einsum("cot,ot->co", x[:, idx], w)
    return TimeSeries(out, target_rate_hz)


def _hamming(n: int) -> np.ndarray:
    return np.hamming(n)


def _fir_bandpass_taps(lo_hz: float, hi_hz: float, rate_hz: float, taps: int) -> np.ndarray:
    m = (taps - 1) // 2
    n = np.arange(taps) - m
    f_lo = lo_hz / rate_hz
    f_hi = hi_hz / rate_hz
    ideal = 2 * f_hi * _sinc(2 * f_hi * n) - 2 * f_lo * _sinc(2 * f_lo * n)
    h = ideal * _hamming(taps)
    fc = 0.5 * (lo_hz + hi_hz) / rate_hz
    gain = np.sum(h * np.cos(2 * np.pi * fc * n))
    return h / gain


def _fir_lowpass_taps(cutoff_hz: float, rate_hz: float, taps: int) -> np.ndarray:
    m = (taps - 1) // 2
    n = np.arange(taps) - m
    fc = cutoff_hz / rate_hz
    h = 2 * fc * _sinc(2 * fc * n) * _hamming(taps)
    return h / h.sum()  # unit DC gain


def _apply_fir(x: np.ndarray, h: np.ndarray, edge_mode: str = "zero") -> np.ndarray:
    """Zero-phase FIR: full convolution, then group-delay compensation.

    ``edge_mode='replicate'`` extends the first/last sample into the
    filter context instead of zeros, so DC survives at the edges.
    """
    taps = h.size
    m = (taps - 1) // 2
    n = x.shape[1]
    if edge_mode == "replicate":
        x = np.pad(x, ((0, 0), (m, m)), mode="edge")
    elif edge_mode != "zero":
        raise ConfigError(f"unknown edge mode {edge_mode!r}")
    if x.shape[1] * taps > 10_000_000:
        full = fftconvolve(x, h[None, :], axes=1)
    else:
        full = np.stack([np.convolve(row, h) for row in x])
    if edge_mode == "replicate":
        return full[:, 2 * m:2 * m + n]
    return full[:, m:m + n]


def auto_taps(lo_hz: float, hi_hz: float, rate_hz: float) -> int:
    """Odd tap count giving >= 40 dB one octave outside the band (Hamming)."""
    trans = min(lo_hz / 2, hi_hz, rate_hz / 2 - hi_hz)
    taps = int(np.ceil(1.25 * 3.3 * rate_hz / trans))
    return taps + 1 if taps % 2 == 0 else taps


def bandpass_fir(ts: TimeSeries, lo_hz: float, hi_hz: float, taps: int | None = None) -> TimeSeries:
    """Zero-phase windowed-sinc band-pass (Hamming window).

    Unit gain at the band center; stopband attenuation >= 40 dB one
    octave outside the band with the default tap count.
    """
    rate = ts.rate_hz
    if not (0 < lo_hz < hi_hz < rate / 2):
        raise ConfigError(
            f"band ({lo_hz}, {hi_hz}) must satisfy 0 < lo < hi < Nyquist ({rate / 2})"
        )
    if taps is None:
        taps = auto_taps(lo_hz, hi_hz, rate)
    if taps % 2 == 0:
        raise ConfigError(f"tap count must be odd, got {taps}")
    h = _fir_bandpass_taps(lo_hz, hi_hz, rate, taps)
    return TimeSeries(_apply_fir(ts.values, h), rate)


def lowpass_fir(ts: TimeSeries, cutoff_hz: float, taps: int,
                edge_mode: str = "replicate") -> TimeSeries:
    """Zero-phase windowed-sinc low-pass with unit DC gain.

    Edge context replicates the boundary samples by default so constant
    series pass through unchanged.
    """
    if not (0 < cutoff_hz < ts.rate_hz / 2):
        raise ConfigError(f"cutoff {cutoff_hz} outside (0, Nyquist)")
    if taps % 2 == 0:
        raise ConfigError(f"tap count must be odd, got {taps}")
    if ts.n_samples < taps:
        raise DataError(f"series shorter than filter ({ts.n_samples} < {taps})")
    h = _fir_lowpass_taps(cutoff_hz, ts.rate_hz, taps)
    return TimeSeries(_apply_fir(ts.values, h, edge_mode), ts.rate_hz)


def hilbert_envelope(ts: TimeSeries) -> TimeSeries:
    """Analytic-signal magnitude via the frequency-domain construction."""
    n = ts.n_samples
    if n < 8:
        raise DataError(f"need at least 8 samples for the envelope, got {n}")
    X = np.fft.fft(ts.values, axis=1)
    mult = np.zeros(n)
    mult[0] = 1.0
    if n % 2 == 0:
        mult[n // 2] = 1.0
        mult[1:n // 2] = 2.0
    else:
        mult[1:(n + 1) // 2] = 2.0
    analytic = np.fft.ifft(X * mult[None, :], axis=1)
    return TimeSeries(np.abs(analytic), ts.rate_hz)


def high_gamma(raw: TimeSeries, out_rate_hz: float = 20.0,
               lo_hz: float = 70.0, hi_hz: float = 200.0,
               taps: int | None = None) -> TimeSeries:
    """Band power trace: band-pass, analytic envelope, then resample."""
    if raw.rate_hz < 400:
        raise DataError(
            f"raw rate {raw.rate_hz} Hz too low to contain the {lo_hz}-{hi_hz} Hz band"
        )
    banded = bandpass_fir(raw, lo_hz, hi_hz, taps)
    env = hilbert_envelope(banded)
    return resample_lanczos(env, out_rate_hz)


@dataclass
class PSDEstimate:
    """One-sided Welch PSD per channel (density scaling).

    ``band_power`` integrates with the trapezoidal rule on the Welch grid,
    so the integral over (0, Nyquist] approximates the signal variance.
    """

    freqs_hz: np.ndarray          # (n_freq,)
    power: np.ndarray             # (channels, n_freq)
    segment_length: int
    overlap_fraction: float
    rate_hz: float

    def band_power(self, lo_hz: float, hi_hz: float) -> np.ndarray:
        mask = (self.freqs_hz >= lo_hz) & (self.freqs_hz <= hi_hz)
        if mask.sum() < 2:
            raise ConfigError(f"band ({lo_hz}, {hi_hz}) covers fewer than 2 PSD bins")
        return np.trapz(self.power[:, mask], self.freqs_hz[mask], axis=1)


def welch_psd(ts: TimeSeries, segment_length: int,
              overlap_fraction: float = 0.5) -> PSDEstimate:
    """Welch PSD with a Hann window; per-channel mean removed first.

    Scaled so that the integral of the PSD over frequency equals the
    signal variance (Parseval-consistent).
    """
    n = ts.n_samples
    if segment_length > n:
        raise DataError(f"segment {segment_length} longer than series ({n})")
    if segment_length < 2 or segment_length & (segment_length - 1):
        raise ConfigError(f"segment_length must be a power of two, got {segment_length}")
    if not 0 <= overlap_fraction < 1:
        raise ConfigError(f"overlap_fraction must be in [0, 1), got {overlap_fraction}")
    x = ts.values - ts.values.mean(axis=1, keepdims=True)
    hop = max(1, int(round(segment_length * (1 - overlap_fraction))))
    starts = range(0, n - segment_length + 1, hop)
    win = np.hanning(segment_length)
    norm = ts.rate_hz * np.sum(win ** 2)
    n_freq = segment_length // 2 + 1
    acc = np.zeros((x.shape[0], n_freq))
    count = 0
    for s in starts:
        seg = x[:, s:s + segment_length] * win[None, :]
        spec = np.fft.rfft(seg, axis=1)
        acc += (spec.real ** 2 + spec.imag ** 2)
        count += 1
    power = acc / (count * norm)
    power[:, 1:-1] *= 2.0  # one-sided (DC and Nyquist not doubled)
    freqs = np.fft.rfftfreq(segment_length, 1.0 / ts.rate_hz)
    return PSDEstimate(freqs, power, segment_length, overlap_fraction, ts.rate_hz)
