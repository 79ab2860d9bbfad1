"""Waveform container: interpolation, grid nesting, range errors."""

import numpy as np
import pytest

from mqshmm.waveform import (
    GridNestingError,
    TimeRangeError,
    Waveform,
    constant_waveform,
    require_nested,
    time_grid,
)


def test_linear_interpolation_exact_for_linear_data():
    t = time_grid(0.0, 1.0, 4)
    wf = Waveform(t, np.column_stack([2.0 * t, -t + 1.0]))
    np.testing.assert_allclose(wf.sample(0.3), [0.6, 0.7], rtol=1e-14)
    np.testing.assert_allclose(wf.sample(1.0), [2.0, 0.0], rtol=1e-14)


def test_grid_properties_and_endpoints():
    t = time_grid(0.0, 2e-5, 20)
    assert len(t) == 21
    wf = constant_waveform(t, np.array([1.5, 2.5]))
    assert wf.n_steps == 20
    np.testing.assert_allclose(wf.dt, 1e-6, rtol=1e-12)
    np.testing.assert_allclose(wf.values[0], wf.values[-1])


def test_out_of_range_sampling_raises():
    wf = constant_waveform(time_grid(0.0, 1.0, 2), np.zeros(3))
    with pytest.raises(TimeRangeError):
        wf.sample(1.5)
    with pytest.raises(TimeRangeError):
        wf.sample(-0.1)


def test_nonuniform_grid_rejected():
    with pytest.raises(ValueError):
        Waveform(np.array([0.0, 0.1, 0.3]), np.zeros((3, 1)))


def test_index_of_snaps_only_to_grid_points():
    wf = constant_waveform(time_grid(0.0, 1.0, 10), np.zeros(1))
    assert wf.index_of(0.3) == 3
    with pytest.raises(GridNestingError):
        wf.index_of(0.35)


def test_require_nested_accepts_multiples_only():
    fine = time_grid(0.0, 1.0, 10)
    coarse = time_grid(0.0, 1.0, 5)
    np.testing.assert_array_equal(require_nested(fine, coarse),
                                  [0, 2, 4, 6, 8, 10])
    with pytest.raises(GridNestingError):
        require_nested(time_grid(0.0, 1.0, 7), coarse)
