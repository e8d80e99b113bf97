"""Fourier analysis of feature maps and token grids."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .exceptions import ContractError

AMPLITUDE_FLOOR = 1e-12

LayerFn = Callable[[np.ndarray], Sequence[np.ndarray]]


@dataclass
class SpectrumProfile:
    """Log amplitude along the half-diagonal of the centred 2-D spectrum.

    ``frequency`` is k * sqrt(2) * pi / n for diagonal bin k = 0..n/2, so it
    ends at sqrt(2) * pi / 2.
    """

    frequency: np.ndarray
    log_amplitude: np.ndarray

    @property
    def delta(self) -> np.ndarray:
        return self.log_amplitude - self.log_amplitude[0]


def token_grid(tokens: np.ndarray) -> np.ndarray:
    """(b, 1 + g*g, D) tokens -> (b, D, g, g) maps; the CLS token is dropped."""
    tokens = np.asarray(tokens, dtype=np.float64)
    b, l, d = tokens.shape
    g = math.isqrt(l - 1)
    if g * g != l - 1:
        raise ContractError(f"{l - 1} patch tokens do not form a square grid")
    return tokens[:, 1:, :].reshape(b, g, g, d).transpose(0, 3, 1, 2)


def amplitude_spectrum(maps: np.ndarray) -> np.ndarray:
    """Centred amplitude spectrum averaged over every leading axis.

    ``maps`` is (..., h, w) with h == w; returns (h, w) with DC at (h//2, w//2).
    """
    maps = np.asarray(maps, dtype=np.float64)
    if maps.ndim < 2 or maps.shape[-1] != maps.shape[-2]:
        raise ContractError(f"expected square spatial maps, got shape {maps.shape}")
    amp = np.abs(np.fft.fftshift(np.fft.fft2(maps), axes=(-2, -1)))
    return amp.reshape(-1, *amp.shape[-2:]).mean(axis=0)


def profile_from_amplitude(amp: np.ndarray) -> SpectrumProfile:
    n = amp.shape[-1]
    c = n // 2
    ks = np.arange(n // 2 + 1)
    idx = (c + ks) % n  # k = n/2 wraps onto the Nyquist row/column
    diag = amp[idx, idx]
    freq = ks * math.sqrt(2.0) * math.pi / n
    return SpectrumProfile(freq, np.log(np.maximum(diag, AMPLITUDE_FLOOR)))


def fourier_profile(feature_map) -> SpectrumProfile:
    """Profile of one (c, h, w) map, amplitude averaged over channels.

    Callers average over images by passing (n, c, h, w) instead.
    """
    data = getattr(feature_map, "data", feature_map)
    return profile_from_amplitude(amplitude_spectrum(data))


def high_band(profile: SpectrumProfile) -> np.ndarray:
    """Mask of the upper half of the frequency axis."""
    kmax = len(profile.frequency) - 1
    return np.arange(kmax + 1) > kmax / 2


def compare_profiles(layers_a: LayerFn, layers_b: LayerFn, images: np.ndarray,
                     names: tuple[str, str] = ("a", "b")) -> dict:
    """Per-layer spectra of two token producers evaluated on the same images.

    ``layers_*`` map an image batch to a list of per-layer token arrays of
    shape (b, l, D).  Returned ``high_band_diff[i]`` is the mean over the upper
    frequency half of delta_b - delta_a for layer i.
    """
    toks_a = list(layers_a(images))
    toks_b = list(layers_b(images))
    if len(toks_a) != len(toks_b):
        raise ContractError(f"layer count mismatch: {len(toks_a)} vs {len(toks_b)}")
    layers = []
    for i, (ta, tb) in enumerate(zip(toks_a, toks_b)):
        pa = fourier_profile(token_grid(ta))
        pb = fourier_profile(token_grid(tb))
        diff = pb.delta - pa.delta
        layers.append({
            "layer": i,
            "profiles": {names[0]: pa, names[1]: pb},
            "delta_diff": diff,
            "high_band_diff": float(diff[high_band(pa)].mean()),
        })
    return {"names": names, "layers": layers}


def plot_rows(report: dict) -> list[tuple[float, float, str, int]]:
    rows = []
    for entry in report["layers"]:
        for name in report["names"]:
            prof = entry["profiles"][name]
            for f, d in zip(prof.frequency, prof.delta):
                rows.append((float(f), float(d), name, entry["layer"]))
    return rows


def write_plot_data(report: dict, path) -> None:
    """Comma-separated: frequency, delta_log_amplitude, model, layer."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frequency", "delta_log_amplitude", "model", "layer"])
        for f, d, name, layer in plot_rows(report):
            w.writerow([repr(f), repr(d), name, layer])
