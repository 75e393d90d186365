"""Six time-frequency feature representations and their normalization.

Mel-spectrograms, chroma, and the three MFCC variants all fold the shared
2048-point power spectrogram; filterbank energies instead re-frame the raw
segment at 25 ms / 10 ms, mirroring the separate speech-features tooling
they model, which is why their frame count differs.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .corpus import AudioClip
from .dsp import POWER_FLOOR, PowerSpectrogram, rfft

N_MELS = 128
N_CHROMA = 12
N_FILTERBANK = 26
CHROMA_FMIN = 27.5
STD_FLOOR = 1e-6

FBANK_WIN_SECONDS = 0.025
FBANK_HOP_SECONDS = 0.010
FBANK_NFFT = 512
FBANK_PREEMPH = 0.97

FEATURE_KINDS = ("chroma", "filterbank", "melspec", "mfcc13", "mfcc20", "mfcc40")
_KIND_ROWS = {"chroma": 12, "filterbank": 26, "melspec": 128, "mfcc13": 13, "mfcc20": 20, "mfcc40": 40}
_KIND_BYTE = {kind: i for i, kind in enumerate(FEATURE_KINDS)}

PITCH_CLASS_NAMES = ("C", "C#", "D", "D#", "E", "F", "F#", "G", "G#", "A", "A#", "B")

YMFT_MAGIC = b"YMFT"


class FeatureConfigError(ValueError):
    """Raised for mismatched shapes or invalid extractor parameters."""


@dataclass
class FeatureMap:
    """F x T real feature matrix with axis metadata."""

    values: np.ndarray
    kind: str
    bin_labels: list[str]
    hop_seconds: float

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.kind not in _KIND_ROWS:
            raise FeatureConfigError(f"unknown feature kind {self.kind!r}")
        if self.values.ndim != 2 or self.values.shape[0] != _KIND_ROWS[self.kind]:
            raise FeatureConfigError(
                f"{self.kind} expects {_KIND_ROWS[self.kind]} rows, got shape {self.values.shape}"
            )
        if not np.all(np.isfinite(self.values)):
            raise FeatureConfigError("feature values must be finite")

    @property
    def shape(self):
        return self.values.shape


@dataclass
class NormalizationStats:
    """Per-bin mean/std fitted on the training split only."""

    mean: np.ndarray
    std: np.ndarray
    kind: str


@dataclass
class MelFilterbank:
    """n_mels x (n_fft/2 + 1) triangular filter matrix."""

    weights: np.ndarray
    scale_variant: str
    fmin: float
    fmax: float
    normalization: str
    sample_rate: int
    n_fft: int

    @property
    def n_mels(self) -> int:
        return self.weights.shape[0]


# --------------------------------------------------------------------------
# Mel scale
# --------------------------------------------------------------------------

_SLANEY_LINEAR_SLOPE = 3.0 / 200.0  # mel per Hz below the 1 kHz knee
_SLANEY_KNEE_HZ = 1000.0
_SLANEY_KNEE_MEL = 15.0
_SLANEY_LOG_STEP = np.log(6.4) / 27.0


def hz_to_mel(f, variant: str = "slaney"):
    f = np.asarray(f, dtype=np.float64)
    if np.any(f < 0):
        raise ValueError("frequency must be non-negative")
    if variant == "htk":
        return 2595.0 * np.log10(1.0 + f / 700.0)
    if variant == "slaney":
        mel = f * _SLANEY_LINEAR_SLOPE
        log_region = f >= _SLANEY_KNEE_HZ
        if np.any(log_region):
            mel = np.where(
                log_region,
                _SLANEY_KNEE_MEL + np.log(np.maximum(f, _SLANEY_KNEE_HZ) / _SLANEY_KNEE_HZ) / _SLANEY_LOG_STEP,
                mel,
            )
        return mel if mel.ndim else float(mel)
    raise ValueError(f"unknown mel variant {variant!r}")


def mel_to_hz(m, variant: str = "slaney"):
    m = np.asarray(m, dtype=np.float64)
    if variant == "htk":
        return 700.0 * (10.0 ** (m / 2595.0) - 1.0)
    if variant == "slaney":
        f = m / _SLANEY_LINEAR_SLOPE
        log_region = m >= _SLANEY_KNEE_MEL
        if np.any(log_region):
            f = np.where(log_region, _SLANEY_KNEE_HZ * np.exp(_SLANEY_LOG_STEP * (m - _SLANEY_KNEE_MEL)), f)
        return f if f.ndim else float(f)
    raise ValueError(f"unknown mel variant {variant!r}")


def build_mel_filterbank(
    n_mels: int,
    n_fft: int,
    sample_rate: int,
    fmin: float = 0.0,
    fmax: float | None = None,
    variant: str = "slaney",
    normalization: str = "area",
) -> MelFilterbank:
    """Triangular filters with break points equally spaced on the mel axis.

    Area normalization scales each triangle by 2 / (Hz bandwidth) so filters
    integrate to roughly unit area; without it every triangle peaks at 1.
    """
    if fmax is None:
        fmax = sample_rate / 2.0
    if not (0 <= fmin < fmax <= sample_rate / 2.0):
        raise FeatureConfigError(f"need 0 <= fmin < fmax <= Nyquist, got fmin={fmin} fmax={fmax}")
    if n_mels < 1:
        raise FeatureConfigError("n_mels must be >= 1")
    if normalization not in ("none", "area"):
        raise FeatureConfigError(f"unknown normalization {normalization!r}")

    breaks_mel = np.linspace(hz_to_mel(fmin, variant), hz_to_mel(fmax, variant), n_mels + 2)
    breaks_hz = mel_to_hz(breaks_mel, variant)
    bin_freqs = np.arange(n_fft // 2 + 1) * (sample_rate / n_fft)

    lower = breaks_hz[:-2, None]
    center = breaks_hz[1:-1, None]
    upper = breaks_hz[2:, None]
    rising = (bin_freqs[None, :] - lower) / np.maximum(center - lower, 1e-12)
    falling = (upper - bin_freqs[None, :]) / np.maximum(upper - center, 1e-12)
    weights = np.maximum(0.0, np.minimum(rising, falling))

    if np.any(weights.sum(axis=1) == 0.0):
        raise FeatureConfigError(
            f"{n_mels} mel filters leave at least one empty row at n_fft={n_fft}; reduce n_mels"
        )
    if normalization == "area":
        weights = weights * (2.0 / (breaks_hz[2:] - breaks_hz[:-2]))[:, None]
    return MelFilterbank(
        weights=weights,
        scale_variant=variant,
        fmin=fmin,
        fmax=fmax,
        normalization=normalization,
        sample_rate=sample_rate,
        n_fft=n_fft,
    )


def _check_fb_compatible(power: PowerSpectrogram, fb: MelFilterbank) -> None:
    if fb.n_fft != power.config.n_fft or fb.sample_rate != power.sample_rate:
        raise FeatureConfigError(
            f"filterbank built for n_fft={fb.n_fft}, rate={fb.sample_rate} but spectrogram has "
            f"n_fft={power.config.n_fft}, rate={power.sample_rate}"
        )


def _mel_bin_labels(fb: MelFilterbank) -> list[str]:
    centers = mel_to_hz(
        np.linspace(hz_to_mel(fb.fmin, fb.scale_variant), hz_to_mel(fb.fmax, fb.scale_variant), fb.n_mels + 2),
        fb.scale_variant,
    )[1:-1]
    return [f"{c:.1f}Hz" for c in centers]


# --------------------------------------------------------------------------
# Extractors
# --------------------------------------------------------------------------

def mel_spectrogram(power: PowerSpectrogram, fb: MelFilterbank) -> FeatureMap:
    """Mel-filtered power in dB, referenced to the per-map maximum."""
    _check_fb_compatible(power, fb)
    mel_power = fb.weights @ power.power
    db = 10.0 * np.log10(np.maximum(mel_power, POWER_FLOOR))
    db -= db.max()
    return FeatureMap(
        values=db,
        kind="melspec",
        bin_labels=_mel_bin_labels(fb),
        hop_seconds=power.config.hop / power.sample_rate,
    )


def _dct_ii_orthonormal(n: int) -> np.ndarray:
    k = np.arange(n)[:, None]
    m = np.arange(n)[None, :]
    basis = np.cos(np.pi * (2 * m + 1) * k / (2 * n))
    basis *= np.sqrt(2.0 / n)
    basis[0] *= np.sqrt(0.5)
    return basis


def mfcc(power: PowerSpectrogram, fb: MelFilterbank, n_coeff: int) -> FeatureMap:
    """DCT-II of log mel energies, truncated to the first n_coeff coefficients.

    The full transform over all mel bands is always computed and then
    sliced, so mfcc13 is bit-for-bit the first 13 rows of mfcc40.
    """
    kind = f"mfcc{n_coeff}"
    if kind not in _KIND_ROWS:
        raise FeatureConfigError(f"unsupported coefficient count {n_coeff} (expected 13, 20 or 40)")
    if n_coeff > fb.n_mels:
        raise FeatureConfigError(f"n_coeff={n_coeff} exceeds n_mels={fb.n_mels}")
    _check_fb_compatible(power, fb)
    log_mel = 10.0 * np.log10(np.maximum(fb.weights @ power.power, POWER_FLOOR))
    coeffs = _dct_ii_orthonormal(fb.n_mels) @ log_mel
    return FeatureMap(
        values=coeffs[:n_coeff],
        kind=kind,
        bin_labels=[f"c{i}" for i in range(n_coeff)],
        hop_seconds=power.config.hop / power.sample_rate,
    )


def chroma(power: PowerSpectrogram) -> FeatureMap:
    """Octave-folded pitch-class energy profile, max-normalized per frame."""
    freqs = power.bin_frequencies()
    voiced = freqs >= CHROMA_FMIN
    # class 0 = C; A440 sits 9 semitones above C
    classes = (np.round(12.0 * np.log2(np.where(voiced, freqs, 440.0) / 440.0)).astype(np.int64) + 9) % 12
    folded = np.zeros((N_CHROMA, power.n_frames))
    np.add.at(folded, classes[voiced], power.power[voiced])
    peaks = folded.max(axis=0)
    scale = np.where(peaks > 0.0, peaks, 1.0)
    return FeatureMap(
        values=folded / scale,
        kind="chroma",
        bin_labels=list(PITCH_CLASS_NAMES),
        hop_seconds=power.config.hop / power.sample_rate,
    )


def logfbank_energies(clip_segment: AudioClip) -> FeatureMap:
    """Log mel-filter energies over independent 25 ms / 10 ms frames.

    Pre-emphasis 0.97, rectangular window, 512-point periodogram (frames
    longer than 512 samples are truncated), 26 HTK-mel triangles spanning
    0 to Nyquist, natural log with the shared power floor.
    """
    rate = clip_segment.sample_rate
    win = int(FBANK_WIN_SECONDS * rate)
    hop = int(FBANK_HOP_SECONDS * rate)
    x = clip_segment.samples
    if x.size < win:
        raise FeatureConfigError(f"segment of {x.size} samples shorter than one {win}-sample frame")
    emphasized = np.concatenate([x[:1], x[1:] - FBANK_PREEMPH * x[:-1]])
    n_frames = 1 + (emphasized.size - win) // hop
    frames = np.lib.stride_tricks.sliding_window_view(emphasized, win)[::hop][:n_frames]
    if win >= FBANK_NFFT:
        frames = frames[:, :FBANK_NFFT]
    else:
        frames = np.pad(frames, ((0, 0), (0, FBANK_NFFT - win)))
    spectrum = rfft(frames)
    periodogram = (spectrum.real**2 + spectrum.imag**2) / FBANK_NFFT
    fb = build_mel_filterbank(
        N_FILTERBANK, FBANK_NFFT, rate, fmin=0.0, fmax=rate / 2.0, variant="htk", normalization="none"
    )
    energies = periodogram @ fb.weights.T
    values = np.log(np.maximum(energies, POWER_FLOOR)).T
    return FeatureMap(
        values=values,
        kind="filterbank",
        bin_labels=_mel_bin_labels(fb),
        hop_seconds=hop / rate,
    )


# --------------------------------------------------------------------------
# Normalization
# --------------------------------------------------------------------------

def fit_normalizer(train_maps: list[FeatureMap]) -> NormalizationStats:
    """Per-bin mean and std over every frame of the training maps."""
    if not train_maps:
        raise FeatureConfigError("need at least one training map")
    kind = train_maps[0].kind
    if any(m.kind != kind for m in train_maps):
        raise FeatureConfigError("all training maps must share one kind")
    stacked = np.concatenate([m.values.astype(np.float64) for m in train_maps], axis=1)
    return NormalizationStats(
        mean=stacked.mean(axis=1),
        std=stacked.std(axis=1),
        kind=kind,
    )


def apply_normalizer(feature_map: FeatureMap, stats: NormalizationStats) -> FeatureMap:
    if feature_map.kind != stats.kind:
        raise FeatureConfigError(f"normalizer fitted for {stats.kind!r}, applied to {feature_map.kind!r}")
    values = (feature_map.values.astype(np.float64) - stats.mean[:, None]) / np.maximum(stats.std, STD_FLOOR)[:, None]
    return FeatureMap(
        values=values,
        kind=feature_map.kind,
        bin_labels=feature_map.bin_labels,
        hop_seconds=feature_map.hop_seconds,
    )


# --------------------------------------------------------------------------
# Serialization (binary container "YMFT")
# --------------------------------------------------------------------------

def save_feature_map(feature_map: FeatureMap, path) -> None:
    values = np.ascontiguousarray(feature_map.values, dtype="<f4")
    f, t = values.shape
    header = YMFT_MAGIC + struct.pack("<BII", _KIND_BYTE[feature_map.kind], f, t)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(values.tobytes())


def load_feature_map(path) -> FeatureMap:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != YMFT_MAGIC or len(data) < 13:
        raise FeatureConfigError(f"{path}: not a YMFT container")
    kind_byte, f, t = struct.unpack_from("<BII", data, 4)
    kinds = {v: k for k, v in _KIND_BYTE.items()}
    if kind_byte not in kinds:
        raise FeatureConfigError(f"{path}: unknown kind byte {kind_byte}")
    payload = np.frombuffer(data, dtype="<f4", count=f * t, offset=13).reshape(f, t)
    kind = kinds[kind_byte]
    labels = list(PITCH_CLASS_NAMES) if kind == "chroma" else [f"bin{i}" for i in range(f)]
    return FeatureMap(values=payload.copy(), kind=kind, bin_labels=labels, hop_seconds=0.0)
