import numpy as np
import pytest

from ymir_bench import dsp, features
from ymir_bench.corpus import AudioClip
from ymir_bench.features import (
    FeatureConfigError,
    FeatureMap,
    apply_normalizer,
    build_mel_filterbank,
    chroma,
    fit_normalizer,
    hz_to_mel,
    load_feature_map,
    logfbank_energies,
    mel_spectrogram,
    mel_to_hz,
    mfcc,
    save_feature_map,
)

SR = 22050
SEGMENT_SAMPLES = 132300


def tone_segment(freq, amplitude=0.5):
    t = np.arange(SEGMENT_SAMPLES) / SR
    return amplitude * np.sin(2 * np.pi * freq * t)


@pytest.fixture(scope="module")
def default_fb():
    return build_mel_filterbank(features.N_MELS, dsp.DEFAULT_N_FFT, SR)


@pytest.fixture(scope="module")
def noise_power():
    noise = np.random.default_rng(7).standard_normal(SEGMENT_SAMPLES) * 0.1
    return dsp.analyze_segment(noise, SR)


# -- Mel scale ------------------------------------------------------------

def test_mel_zero_maps_to_zero():
    assert hz_to_mel(0.0, "htk") == 0.0
    assert hz_to_mel(0.0, "slaney") == 0.0


def test_htk_1khz():
    assert hz_to_mel(1000.0, "htk") == pytest.approx(2595.0 * np.log10(1 + 1000.0 / 700.0), abs=1e-9)
    assert hz_to_mel(1000.0, "htk") == pytest.approx(999.9855, abs=1e-3)


def test_slaney_linear_region():
    assert hz_to_mel(200.0, "slaney") == pytest.approx(3.0, abs=1e-12)


@pytest.mark.parametrize("variant", ["htk", "slaney"])
def test_mel_inverse_roundtrip(variant, rng):
    freqs = rng.uniform(0, SR / 2, 200)
    back = mel_to_hz(hz_to_mel(freqs, variant), variant)
    assert np.abs(back - freqs).max() < 1e-6


def test_negative_frequency_rejected():
    with pytest.raises(ValueError):
        hz_to_mel(-1.0, "htk")


# -- Filterbank ------------------------------------------------------------

def test_filterbank_shape():
    fb = build_mel_filterbank(128, 2048, SR)
    assert fb.weights.shape == (128, 1025)


def test_unnormalized_rows_peak_near_one():
    fb = build_mel_filterbank(40, 2048, SR, normalization="none")
    peaks = fb.weights.max(axis=1)
    # apex quantization to the bin grid keeps peaks just below 1
    assert np.all(peaks > 0.8) and np.all(peaks <= 1.0 + 1e-12)


def test_filterbank_support_and_adjacent_sum():
    fb = build_mel_filterbank(40, 2048, SR, variant="htk", normalization="none")
    breaks = mel_to_hz(
        np.linspace(hz_to_mel(0.0, "htk"), hz_to_mel(SR / 2, "htk"), 42), "htk"
    )
    bin_freqs = np.arange(1025) * SR / 2048
    for i in range(40):
        support = np.flatnonzero(fb.weights[i] > 0)
        assert support.size > 0
        assert bin_freqs[support[0]] > breaks[i] - SR / 2048
        assert bin_freqs[support[-1]] < breaks[i + 2] + SR / 2048
    # between apex i and apex i+1, filter i's falling edge and filter
    # i+1's rising edge are complementary
    apexes = breaks[1:-1]
    mids = (apexes[:-1] + apexes[1:]) / 2.0
    for i, f in enumerate(mids[:20]):
        falling_i = (breaks[i + 2] - f) / (breaks[i + 2] - breaks[i + 1])
        rising_next = (f - breaks[i + 1]) / (breaks[i + 2] - breaks[i + 1])
        assert falling_i + rising_next == pytest.approx(1.0, abs=1e-9)


def test_too_many_filters_rejected():
    with pytest.raises(FeatureConfigError):
        build_mel_filterbank(2000, 256, SR)


# -- Mel spectrogram ------------------------------------------------------------

def test_melspec_silent_segment_is_uniform(default_fb):
    power = dsp.analyze_segment(np.zeros(SEGMENT_SAMPLES), SR)
    mel = mel_spectrogram(power, default_fb)
    assert mel.shape == (128, 259)
    assert np.all(mel.values == mel.values[0, 0])


def test_melspec_tone_band(default_fb):
    power = dsp.analyze_segment(tone_segment(440.0), SR)
    mel = mel_spectrogram(power, default_fb)
    band = int(np.argmax(mel.values.mean(axis=1)))
    centers = mel_to_hz(
        np.linspace(hz_to_mel(0.0, "slaney"), hz_to_mel(SR / 2, "slaney"), 130), "slaney"
    )[1:-1]
    assert abs(centers[band] - 440.0) < 80.0  # within the band spacing near 440 Hz


def test_melspec_scale_invariance_after_max_reference(default_fb, rng):
    x = rng.standard_normal(SEGMENT_SAMPLES) * 0.1
    a = mel_spectrogram(dsp.analyze_segment(x, SR), default_fb)
    b = mel_spectrogram(dsp.analyze_segment(2.0 * x, SR), default_fb)
    assert np.abs(a.values - b.values).max() < 1e-4


# -- MFCC ------------------------------------------------------------

def test_dct_orthonormal():
    d = features._dct_ii_orthonormal(128)
    assert np.abs(d @ d.T - np.eye(128)).max() < 1e-12


def test_dct_of_constant_vector():
    d = features._dct_ii_orthonormal(128)
    c = 3.7
    coeffs = d @ np.full(128, c)
    assert coeffs[0] == pytest.approx(c * np.sqrt(128), rel=1e-12)
    assert np.abs(coeffs[1:]).max() < 1e-10


def test_mfcc_prefix_consistency(noise_power, default_fb):
    m13 = mfcc(noise_power, default_fb, 13)
    m20 = mfcc(noise_power, default_fb, 20)
    m40 = mfcc(noise_power, default_fb, 40)
    assert np.array_equal(m13.values, m40.values[:13])
    assert np.array_equal(m20.values, m40.values[:20])


def test_mfcc_rejects_too_many_coefficients(noise_power):
    small_fb = build_mel_filterbank(20, 2048, SR)
    with pytest.raises(FeatureConfigError):
        mfcc(noise_power, small_fb, 40)


# -- Chroma ------------------------------------------------------------

def test_chroma_a440(default_fb):
    c = chroma(dsp.analyze_segment(tone_segment(440.0), SR))
    assert c.shape == (12, 259)
    assert int(np.bincount(np.argmax(c.values, axis=0)).argmax()) == 9  # A


def test_chroma_octave_equivalence():
    low = chroma(dsp.analyze_segment(tone_segment(440.0), SR))
    high = chroma(dsp.analyze_segment(tone_segment(880.0), SR))
    a = int(np.bincount(np.argmax(low.values, axis=0)).argmax())
    b = int(np.bincount(np.argmax(high.values, axis=0)).argmax())
    assert a == b == 9


def test_chroma_silence_is_zero():
    c = chroma(dsp.analyze_segment(np.zeros(SEGMENT_SAMPLES), SR))
    assert np.all(c.values == 0)


def test_chroma_all_pitch_classes_three_octaves():
    # three octaves, starting where FFT bin spacing resolves every semitone
    for octave in (4, 5, 6):
        for pc in range(12):
            freq = 440.0 * 2 ** ((pc - 9) / 12 + (octave - 4))
            c = chroma(dsp.analyze_segment(tone_segment(freq, 0.6), SR))
            got = int(np.bincount(np.argmax(c.values, axis=0)).argmax())
            assert got == pc, (octave, pc, freq)


# -- Filterbank energies ------------------------------------------------------------

def test_fbank_shape_and_frame_count():
    fbank = logfbank_energies(AudioClip(np.random.default_rng(0).standard_normal(SEGMENT_SAMPLES) * 0.1, SR))
    assert fbank.shape == (26, 599)  # 1 + (132300 - 551) // 220


def test_fbank_silence_floor():
    fbank = logfbank_energies(AudioClip(np.zeros(SEGMENT_SAMPLES), SR))
    assert np.all(fbank.values == np.float32(np.log(1e-10)))


def test_fbank_tone_hits_center_filter():
    fb = build_mel_filterbank(26, 512, SR, variant="htk", normalization="none")
    breaks = mel_to_hz(np.linspace(0.0, hz_to_mel(SR / 2, "htk"), 28), "htk")
    target = 10
    freq = breaks[target + 1]  # apex of filter `target`
    fbank = logfbank_energies(AudioClip(tone_segment(freq, 0.6), SR))
    row_energy = fbank.values.mean(axis=1)
    assert int(np.argmax(row_energy)) in (target - 1, target, target + 1)


def test_fbank_too_short_segment():
    with pytest.raises(FeatureConfigError):
        logfbank_energies(AudioClip(np.zeros(100), SR))


# -- Normalization ------------------------------------------------------------

def _noise_map(rng, kind="melspec", f=128, t=50):
    return FeatureMap(rng.standard_normal((f, t)), kind, [str(i) for i in range(f)], 0.023)


def test_normalizer_constant_input_gives_zeros(rng):
    maps = [FeatureMap(np.full((12, 10), 4.2), "chroma", list(".:" * 6), 0.02) for _ in range(3)]
    stats = fit_normalizer(maps)
    out = apply_normalizer(maps[0], stats)
    assert np.abs(out.values).max() < 1e-5


def test_normalizer_against_two_pass_oracle(rng):
    maps = [_noise_map(rng) for _ in range(4)]
    stats = fit_normalizer(maps)
    stacked = np.concatenate([m.values.astype(np.float64) for m in maps], axis=1)
    assert stats.mean == pytest.approx(stacked.mean(axis=1), abs=1e-12)
    assert stats.std == pytest.approx(stacked.std(axis=1), abs=1e-12)
    # applying twice is not idempotent unless already standardized
    once = apply_normalizer(maps[0], stats)
    twice = apply_normalizer(once, stats)
    assert not np.allclose(once.values, twice.values)


def test_normalized_training_set_is_standard(rng):
    maps = [_noise_map(rng) for _ in range(5)]
    stats = fit_normalizer(maps)
    normalized = np.concatenate([apply_normalizer(m, stats).values.astype(np.float64) for m in maps], axis=1)
    assert np.abs(normalized.mean(axis=1)).max() < 1e-6
    assert np.abs(normalized.std(axis=1) - 1.0).max() < 1e-5


def test_normalizer_kind_mismatch(rng):
    stats = fit_normalizer([_noise_map(rng)])
    with pytest.raises(FeatureConfigError):
        apply_normalizer(_noise_map(rng, kind="chroma", f=12), stats)


# -- Shapes, determinism, serialization ------------------------------------------------------------

def test_all_feature_shapes_for_six_second_segment(default_fb, rng):
    seg = AudioClip(rng.standard_normal(SEGMENT_SAMPLES) * 0.1, SR)
    power = dsp.analyze_segment(seg.samples, SR)
    assert mel_spectrogram(power, default_fb).shape == (128, 259)
    assert chroma(power).shape == (12, 259)
    assert mfcc(power, default_fb, 13).shape == (13, 259)
    assert mfcc(power, default_fb, 20).shape == (20, 259)
    assert mfcc(power, default_fb, 40).shape == (40, 259)
    assert logfbank_energies(seg).shape == (26, 599)


def test_extractors_deterministic(default_fb, rng):
    seg = AudioClip(rng.standard_normal(SEGMENT_SAMPLES) * 0.1, SR)
    power_a = dsp.analyze_segment(seg.samples, SR)
    power_b = dsp.analyze_segment(seg.samples, SR)
    assert np.array_equal(
        mel_spectrogram(power_a, default_fb).values, mel_spectrogram(power_b, default_fb).values
    )
    assert np.array_equal(logfbank_energies(seg).values, logfbank_energies(seg).values)


def test_ymft_roundtrip(tmp_path, rng):
    feature_map = _noise_map(rng, kind="mfcc20", f=20, t=33)
    path = tmp_path / "m.ymft"
    save_feature_map(feature_map, path)
    loaded = load_feature_map(path)
    assert loaded.kind == "mfcc20"
    assert np.array_equal(loaded.values, feature_map.values.astype(np.float32))
    raw = path.read_bytes()
    assert raw[:4] == b"YMFT"


def test_ymft_rejects_garbage(tmp_path):
    path = tmp_path / "bad.ymft"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(FeatureConfigError):
        load_feature_map(path)
