"""Short-time Fourier analysis: framing, windowing, FFT, power spectrograms.

All spectral features in this package derive from one shared power
spectrogram per audio segment, so the pipeline computes it once and hands
the same object to every extractor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_N_FFT = 2048
DEFAULT_HOP = 512
POWER_FLOOR = 1e-10

_WINDOW_NAMES = ("hann", "hamming", "rectangular")


class DspConfigError(ValueError):
    """Raised for invalid framing or transform parameters."""


@dataclass(frozen=True)
class StftConfig:
    n_fft: int = DEFAULT_N_FFT
    hop: int = DEFAULT_HOP
    window: str = "hann"
    centered: bool = True

    def __post_init__(self):
        if self.n_fft < 16 or not _is_power_of_two(self.n_fft):
            raise DspConfigError(f"n_fft must be a power of two >= 16, got {self.n_fft}")
        if not 0 < self.hop <= self.n_fft:
            raise DspConfigError(f"hop must satisfy 0 < hop <= n_fft, got hop={self.hop}")
        if self.window not in _WINDOW_NAMES:
            raise DspConfigError(f"unknown window {self.window!r}, expected one of {_WINDOW_NAMES}")


@dataclass
class ComplexSpectrogram:
    """(n_fft/2 + 1) x T complex STFT bins."""

    bins: np.ndarray
    config: StftConfig
    sample_rate: int

    @property
    def n_frames(self) -> int:
        return self.bins.shape[1]


@dataclass
class PowerSpectrogram:
    """(n_fft/2 + 1) x T squared-magnitude spectrogram, all entries >= 0."""

    power: np.ndarray
    config: StftConfig
    sample_rate: int

    @property
    def n_frames(self) -> int:
        return self.power.shape[1]

    def bin_frequencies(self) -> np.ndarray:
        n_fft = self.config.n_fft
        return np.arange(n_fft // 2 + 1) * (self.sample_rate / n_fft)


def _is_power_of_two(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


def make_window(name: str, n: int) -> np.ndarray:
    """Periodic (DFT-symmetric) analysis window of length n."""
    k = np.arange(n)
    if name == "hann":
        return 0.5 - 0.5 * np.cos(2.0 * np.pi * k / n)
    if name == "hamming":
        return 0.54 - 0.46 * np.cos(2.0 * np.pi * k / n)
    if name == "rectangular":
        return np.ones(n)
    raise DspConfigError(f"unknown window {name!r}")


def expected_frame_count(n_samples: int, n_fft: int, hop: int, centered: bool) -> int:
    if centered:
        return 1 + n_samples // hop
    return 1 + (n_samples - n_fft) // hop


def frame_signal(samples: np.ndarray, n_fft: int, hop: int, centered: bool = True) -> np.ndarray:
    """Slice a 1-D signal into overlapping frames of length n_fft.

    When centered, the signal is first reflection-padded by n_fft/2 on both
    ends and frame t starts at t*hop in the padded signal.  Returns a
    T x n_fft array.
    """
    samples = np.asarray(samples)
    if samples.ndim != 1 or samples.size == 0:
        raise DspConfigError("samples must be a non-empty 1-D array")
    if n_fft < 16 or not _is_power_of_two(n_fft):
        raise DspConfigError(f"n_fft must be a power of two >= 16, got {n_fft}")
    if not 0 < hop <= n_fft:
        raise DspConfigError(f"hop must satisfy 0 < hop <= n_fft, got {hop}")

    if centered:
        pad = n_fft // 2
        samples = np.pad(samples, pad, mode="reflect")
    elif samples.size < n_fft:
        raise DspConfigError(f"signal of length {samples.size} shorter than n_fft={n_fft} with centered=False")

    windows = np.lib.stride_tricks.sliding_window_view(samples, n_fft)
    return windows[::hop]


def _bit_reversal_indices(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for _ in range(bits):
        rev = (rev << 1) | (idx & 1)
        idx >>= 1
    return rev


def fft(x: np.ndarray) -> np.ndarray:
    """Iterative radix-2 FFT over the last axis (length must be a power of two)."""
    x = np.asarray(x)
    n = x.shape[-1]
    if not _is_power_of_two(n):
        raise DspConfigError(f"FFT length must be a power of two, got {n}")
    out = np.ascontiguousarray(x[..., _bit_reversal_indices(n)], dtype=np.complex128)
    size = 2
    while size <= n:
        half = size // 2
        twiddle = np.exp(-2j * np.pi * np.arange(half) / size)
        view = out.reshape(-1, n // size, size)
        even = view[..., :half].copy()
        odd = view[..., half:] * twiddle
        view[..., :half] = even + odd
        view[..., half:] = even - odd
        size *= 2
    return out


def rfft(x: np.ndarray) -> np.ndarray:
    """Non-negative-frequency half of the radix-2 FFT (last-axis length n/2+1)."""
    n = np.asarray(x).shape[-1]
    return fft(x)[..., : n // 2 + 1]


def stft(samples: np.ndarray, config: StftConfig, sample_rate: int) -> ComplexSpectrogram:
    """Windowed, hopped FFT of a mono signal; keeps non-negative-frequency bins."""
    frames = frame_signal(samples, config.n_fft, config.hop, config.centered)
    window = make_window(config.window, config.n_fft)
    bins = rfft(frames * window)
    return ComplexSpectrogram(bins=bins.T, config=config, sample_rate=sample_rate)


def power_spectrogram(spec: ComplexSpectrogram) -> PowerSpectrogram:
    power = (spec.bins.real**2 + spec.bins.imag**2)
    return PowerSpectrogram(power=power, config=spec.config, sample_rate=spec.sample_rate)


def analyze_segment(samples: np.ndarray, sample_rate: int, config: StftConfig | None = None) -> PowerSpectrogram:
    """One-call STFT -> power spectrogram, the shared input of all extractors."""
    if config is None:
        config = StftConfig()
    return power_spectrogram(stft(samples, config, sample_rate))


def dump_matrix(path, matrix: np.ndarray, delimiter: str = "\t") -> None:
    """Debug dump of a 2-D matrix as delimiter-separated text."""
    np.savetxt(path, np.asarray(matrix), delimiter=delimiter)
