"""Delay embedding and lag-shift tests."""

import numpy as np
import pytest

from neuroxfer.embed import (
    FeatureMatrix, delay_embed, lag_grid, lag_shift, valid_rows_for_delays,
    valid_rows_for_lags,
)
from neuroxfer.errors import ConfigError


def fm(values, rate=20.0):
    return FeatureMatrix(np.asarray(values, dtype=float), rate)


class TestLagShift:
    def test_zero_is_identity(self):
        x = fm([[10.0], [20.0], [30.0]])
        np.testing.assert_array_equal(lag_shift(x, 0).values, x.values)

    def test_positive_shift(self):
        x = fm([[10.0], [20.0], [30.0]])
        np.testing.assert_array_equal(lag_shift(x, 1).values, [[0], [10], [20]])

    def test_negative_shift(self):
        x = fm([[10.0], [20.0], [30.0]])
        np.testing.assert_array_equal(lag_shift(x, -1).values, [[20], [30], [0]])

    def test_shift_inverse_away_from_edges(self):
        rng = np.random.default_rng(0)
        x = fm(rng.normal(size=(30, 4)))
        for a in (1, 3, 7):
            back = lag_shift(lag_shift(x, a), -a).values
            np.testing.assert_array_equal(back[a:-a], x.values[a:-a])

    def test_too_large_shift_rejected(self):
        with pytest.raises(ConfigError):
            lag_shift(fm([[1.0], [2.0]]), 2)


class TestDelayEmbed:
    def test_single_delay(self):
        d = delay_embed(fm([[1.0], [2.0], [3.0], [4.0]]), [1])
        np.testing.assert_array_equal(d.values, [[0], [1], [2], [3]])

    def test_two_delays_hand_construction(self):
        d = delay_embed(fm([[1.0], [2.0], [3.0]]), [1, 2])
        np.testing.assert_array_equal(d.values, [[0, 0], [1, 0], [2, 1]])

    def test_matches_brute_force_blocks(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(20, 3))
        delays = [1, 2, 3, 4]
        d = delay_embed(fm(x), delays)
        assert d.values.shape == (20, 12)
        # independent brute-force construction of each block
        for k, tau in enumerate(delays):
            block = np.zeros_like(x)
            for t in range(20):
                if t - tau >= 0:
                    block[t] = x[t - tau]
            np.testing.assert_array_equal(d.values[:, 3 * k:3 * (k + 1)], block)

    def test_block_equals_lag_shift(self):
        rng = np.random.default_rng(2)
        x = fm(rng.normal(size=(15, 2)))
        delays = [2, 5]
        d = delay_embed(x, delays)
        for k, tau in enumerate(delays):
            np.testing.assert_array_equal(
                d.values[:, 2 * k:2 * (k + 1)], lag_shift(x, tau).values)

    def test_validation(self):
        x = fm([[1.0], [2.0], [3.0]])
        with pytest.raises(ConfigError):
            delay_embed(x, [])
        with pytest.raises(ConfigError):
            delay_embed(x, [0, 1])
        with pytest.raises(ConfigError):
            delay_embed(x, [1, 1])


class TestLagGrid:
    def test_default_grid_is_81_unit_steps(self):
        lags = lag_grid()
        assert lags.size == 81
        assert lags[0] == -40 and lags[-1] == 40
        assert np.all(np.diff(lags) == 1)

    def test_single_point(self):
        np.testing.assert_array_equal(lag_grid(0.0, 0.0, 1, 20.0), [0])

    def test_smaller_grid(self):
        lags = lag_grid(-1.0, 1.0, 41, 20.0)
        assert lags[0] == -20 and lags[-1] == 20
        assert np.all(np.diff(lags) == 1)

    def test_non_integer_step_rejected(self):
        with pytest.raises(ConfigError):
            lag_grid(-1.0, 1.0, 30, 20.0)


class TestValidRows:
    def test_delays_mask(self):
        m = valid_rows_for_delays(6, [1, 3])
        np.testing.assert_array_equal(m, [0, 0, 0, 1, 1, 1])

    def test_lags_mask(self):
        m = valid_rows_for_lags(8, [-2, 0, 3])
        np.testing.assert_array_equal(m, [0, 0, 0, 1, 1, 1, 0, 0])
