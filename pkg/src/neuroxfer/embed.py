"""Design-matrix construction: FIR delay embedding and single-lag shifts.

Out-of-range rows are zero-filled so the design stays on the same clock
as the response; callers exclude those edge rows from fitting/scoring
(see :mod:`neuroxfer.ridge`).  Delays and lags are expressed in samples.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

DEFAULT_DELAYS = (1, 2, 3, 4)


@dataclass
class FeatureMatrix:
    """samples x features values at a stated rate."""

    values: np.ndarray
    rate_hz: float

    def __post_init__(self):
        self.values = np.atleast_2d(np.asarray(self.values, dtype=np.float64))
        if self.rate_hz <= 0:
            raise ConfigError(f"rate_hz must be positive, got {self.rate_hz}")

    @property
    def n_samples(self) -> int:
        return self.values.shape[0]

    @property
    def n_features(self) -> int:
        return self.values.shape[1]


@dataclass
class DelayedDesign:
    """samples x (d*F) concatenation of delayed feature copies."""

    values: np.ndarray
    delays: tuple[int, ...]


def lag_shift(feats: FeatureMatrix, tau_samples: int) -> FeatureMatrix:
    """Row t of the output is the source row t - tau; vacated rows are zero.

    Positive tau delays the features (response lags stimulus); negative
    tau advances them (response leads stimulus).
    """
    n = feats.n_samples
    if abs(tau_samples) >= n:
        raise ConfigError(f"|tau|={abs(tau_samples)} must be < {n} samples")
    out = np.zeros_like(feats.values)
    if tau_samples > 0:
        out[tau_samples:] = feats.values[:-tau_samples]
    elif tau_samples < 0:
        out[:tau_samples] = feats.values[-tau_samples:]
    else:
        out[:] = feats.values
    return FeatureMatrix(out, feats.rate_hz)


def delay_embed(feats: FeatureMatrix, delays=DEFAULT_DELAYS) -> DelayedDesign:
    """Concatenate copies of the features shifted by each delay.

    Block k of row t equals the source row t - delays[k]; the width grows
    to d*F.  Delays must be strictly positive and distinct.
    """
    delays = tuple(int(d) for d in delays)
    if not delays:
        raise ConfigError("delay list must be non-empty")
    if any(d <= 0 for d in delays):
        raise ConfigError(f"delays must be strictly positive, got {delays}")
    if len(set(delays)) != len(delays):
        raise ConfigError(f"delays must be distinct, got {delays}")
    blocks = [lag_shift(feats, d).values for d in delays]
    return DelayedDesign(np.concatenate(blocks, axis=1), delays)


def valid_rows_for_delays(n_samples: int, delays) -> np.ndarray:
    """Mask of rows free of zero-filled context for the given delays."""
    mask = np.ones(n_samples, dtype=bool)
    mask[:max(delays)] = False
    return mask


def valid_rows_for_lags(n_samples: int, lags) -> np.ndarray:
    """Mask of rows valid under every lag in the sweep (common support)."""
    lags = np.asarray(list(lags), dtype=int)
    lead = int(max(0, lags.max()))
    trail = int(max(0, -lags.min()))
    mask = np.ones(n_samples, dtype=bool)
    if lead:
        mask[:lead] = False
    if trail:
        mask[n_samples - trail:] = False
    return mask


def lag_grid(lo_s: float = -2.0, hi_s: float = 2.0, count: int = 81,
             rate_hz: float = 20.0) -> np.ndarray:
    """Evenly spaced integer sample lags between lo_s and hi_s seconds."""
    if count < 1:
        raise ConfigError("count must be >= 1")
    if count == 1:
        if abs(lo_s - hi_s) > 1e-12:
            raise ConfigError("count=1 requires lo == hi")
        lag = lo_s * rate_hz
        if abs(lag - round(lag)) > 1e-9:
            raise ConfigError(f"lag {lo_s}s is not an integer sample at {rate_hz} Hz")
        return np.array([int(round(lag))])
    step = (hi_s - lo_s) * rate_hz / (count - 1)
    if abs(step - round(step)) > 1e-9 or round(step) == 0:
        raise ConfigError(
            f"grid ({lo_s}, {hi_s}, {count}) at {rate_hz} Hz gives non-integer "
            f"step {step} samples"
        )
    lo = lo_s * rate_hz
    if abs(lo - round(lo)) > 1e-9:
        raise ConfigError(f"endpoint {lo_s}s is not an integer sample at {rate_hz} Hz")
    return int(round(lo)) + int(round(step)) * np.arange(count)
