import math

import numpy as np
import pytest

from loda.exceptions import ContractError
from loda.spectrum import (
    AMPLITUDE_FLOOR,
    amplitude_spectrum,
    compare_profiles,
    fourier_profile,
    high_band,
    token_grid,
    write_plot_data,
)


def test_constant_map_has_floor_non_dc():
    prof = fourier_profile(np.full((3, 8, 8), 2.5))
    assert np.all(prof.log_amplitude[1:] == math.log(AMPLITUDE_FLOOR))
    assert prof.log_amplitude[0] == pytest.approx(math.log(2.5 * 64))


def test_impulse_is_flat():
    m = np.zeros((1, 16, 16))
    m[0, 3, 5] = 1.0
    assert np.max(np.abs(fourier_profile(m).delta)) < 1e-9


@pytest.mark.parametrize("k", [1, 2, 3])
def test_cosine_peak(k):
    n = 16
    yy, xx = np.mgrid[0:n, 0:n]
    m = np.cos(2 * np.pi * k * (xx + yy) / n)[None]
    prof = fourier_profile(m)
    assert np.argmax(prof.log_amplitude) == k
    assert np.sum(prof.log_amplitude > math.log(AMPLITUDE_FLOOR) + 1) == 1
    amp = amplitude_spectrum(np.cos(2 * np.pi * k * xx / n))
    c = n // 2
    assert set(zip(*np.nonzero(amp > 1e-9))) == {(c, c - k), (c, c + k)}


def test_frequency_axis():
    prof = fourier_profile(np.random.default_rng(0).normal(size=(2, 8, 8)))
    assert len(prof.frequency) == 5
    assert prof.frequency[-1] == pytest.approx(math.sqrt(2) * math.pi / 2)
    assert list(high_band(prof)) == [False, False, False, True, True]


def test_token_grid_drops_cls_and_checks_square():
    toks = np.arange(2 * 17 * 3, dtype=float).reshape(2, 17, 3)
    grid = token_grid(toks)
    assert grid.shape == (2, 3, 4, 4)
    assert grid[0, 1, 0, 0] == toks[0, 1, 1]
    with pytest.raises(ContractError):
        token_grid(np.zeros((1, 16, 3)))


def test_identical_models_give_zero_difference(tmp_path):
    g = np.random.default_rng(0)

    def layers(images):
        return [np.tanh(images.reshape(len(images), 17, -1) * s) for s in (1.0, 2.0)]

    images = g.normal(size=(4, 17, 6))
    report = compare_profiles(layers, layers, images)
    for entry in report["layers"]:
        assert np.all(entry["delta_diff"] == 0.0) and entry["high_band_diff"] == 0.0
    write_plot_data(report, tmp_path / "plot.csv")
    lines = (tmp_path / "plot.csv").read_text().splitlines()
    assert lines[0] == "frequency,delta_log_amplitude,model,layer"
    assert len(lines) == 1 + 2 * 2 * 3
