"""Corpus handling: WAV ingestion, labels, segmentation, splits, agreement.

Audio enters the pipeline here: RIFF/WAVE files are decoded, downmixed to
mono, and resampled to the working rate (22050 Hz).  Clips are cut into
five 6-second segments, and train/test assignment is stratified per genre,
optionally at track granularity so segments of one song never straddle the
split.  A synthetic corpus generator produces a layout-compatible stand-in
dataset with one distinct spectral recipe per genre.
"""

from __future__ import annotations

import csv
import enum
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

TARGET_RATE = 22050
CLIP_SECONDS = 30.0
SEGMENTS_PER_CLIP = 5
SEGMENT_SECONDS = 6.0
MANIFEST_NAME = "manifest.csv"
MANIFEST_COLUMNS = ("song_number", "sample_number", "title", "artist", "genre", "file_path")

# Polyphase resampler design (Kaiser-windowed sinc).
KAISER_BETA = 12.0
TAPS_PER_PHASE_HALF = 64


class CorpusError(Exception):
    """Base class for corpus-level failures."""


class WavFormatError(CorpusError):
    """Malformed RIFF/WAVE container."""


class UnsupportedCodecError(CorpusError):
    """WAV encoding other than PCM-16 / float-32, or more than 2 channels."""


class EmptyAudioError(CorpusError):
    """WAV file with a zero-length data payload."""


class LabelError(CorpusError):
    """Filename with an unknown genre token."""


class LabelFormatError(CorpusError):
    """Filename that does not follow the underscore-separated label scheme."""


class StratificationError(CorpusError):
    """Split request that cannot satisfy the stratification contract."""


class KappaUndefinedError(CorpusError):
    """Fleiss' kappa with expected agreement 1 (all ratings in one category)."""


class GenreLabel(enum.IntEnum):
    SANAANI = 0
    HADHRAMI = 1
    LAHJI = 2
    TIHAMI = 3
    ADENI = 4

    @property
    def display_name(self) -> str:
        return self.name.capitalize()

    @classmethod
    def from_name(cls, token: str) -> "GenreLabel":
        try:
            return cls[token.strip().upper()]
        except KeyError:
            raise LabelError(f"unknown genre token {token!r}") from None


GENRE_NAMES = tuple(g.display_name for g in GenreLabel)
NUM_GENRES = len(GenreLabel)


@dataclass
class AudioClip:
    """Mono sample buffer in [-1, 1] with its sample rate."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise ValueError("AudioClip requires a non-empty 1-D sample buffer")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("AudioClip samples must be finite")
        if self.sample_rate <= 0:
            raise ValueError("AudioClip sample_rate must be positive")

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class TrackRecord:
    song_number: int
    sample_number: int
    title: str
    artist: str
    genre: GenreLabel
    file_path: str


@dataclass
class Manifest:
    records: list[TrackRecord]
    corpus_root: Path

    def class_counts(self) -> dict[str, int]:
        counts = {name: 0 for name in GENRE_NAMES}
        for rec in self.records:
            counts[rec.genre.display_name] += 1
        return counts

    def summary(self) -> dict:
        """Clip counts per genre plus expected vs. actual segment totals.

        The loader reports both numbers instead of assuming every clip
        yields exactly SEGMENTS_PER_CLIP segments.
        """
        counts = self.class_counts()
        return {
            "clips": len(self.records),
            "per_genre": counts,
            "expected_segments": len(self.records) * SEGMENTS_PER_CLIP,
        }


@dataclass
class AnnotationMatrix:
    """N items x k categories vote counts from n raters; rows sum to n."""

    counts: np.ndarray
    raters: int

    def __post_init__(self):
        self.counts = np.asarray(self.counts)
        if self.counts.ndim != 2 or self.counts.shape[0] < 1:
            raise ValueError("counts must be a non-empty N x k matrix")
        if np.any(self.counts < 0) or not np.issubdtype(self.counts.dtype, np.integer):
            raise ValueError("counts must be non-negative integers")
        if self.raters < 2:
            raise ValueError("at least 2 raters required")
        row_sums = self.counts.sum(axis=1)
        if np.any(row_sums != self.raters):
            raise ValueError("every row must sum to the number of raters")


@dataclass
class SplitAssignment:
    train_indices: np.ndarray
    test_indices: np.ndarray
    mode: str
    ratio: float
    seed: int

    def __post_init__(self):
        self.train_indices = np.asarray(self.train_indices, dtype=np.int64)
        self.test_indices = np.asarray(self.test_indices, dtype=np.int64)


# --------------------------------------------------------------------------
# WAV I/O
# --------------------------------------------------------------------------

def _read_wav_file(path) -> tuple[np.ndarray, int]:
    """Decode a RIFF/WAVE file into a channels-last float array in [-1, 1]."""
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise WavFormatError(f"{path}: not a RIFF/WAVE file")

    fmt = None
    payload = None
    pos = 12
    while pos + 8 <= len(data):
        chunk_id = data[pos : pos + 4]
        (chunk_size,) = struct.unpack_from("<I", data, pos + 4)
        body = data[pos + 8 : pos + 8 + chunk_size]
        if chunk_id == b"fmt ":
            if len(body) < 16:
                raise WavFormatError(f"{path}: truncated fmt chunk")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
        elif chunk_id == b"data":
            payload = body
        pos += 8 + chunk_size + (chunk_size & 1)

    if fmt is None or payload is None:
        raise WavFormatError(f"{path}: missing fmt or data chunk")

    audio_format, channels, sample_rate, _byte_rate, _block_align, bits = fmt
    if channels not in (1, 2):
        raise UnsupportedCodecError(f"{path}: {channels} channels unsupported (expected 1 or 2)")
    if audio_format == 1 and bits == 16:
        raw = np.frombuffer(payload[: len(payload) - len(payload) % (2 * channels)], dtype="<i2")
        samples = raw.astype(np.float64) / 32768.0
    elif audio_format == 3 and bits == 32:
        raw = np.frombuffer(payload[: len(payload) - len(payload) % (4 * channels)], dtype="<f4")
        samples = raw.astype(np.float64)
    else:
        raise UnsupportedCodecError(f"{path}: format tag {audio_format} with {bits}-bit samples unsupported")

    if samples.size == 0:
        raise EmptyAudioError(f"{path}: zero-length audio payload")
    return samples.reshape(-1, channels), sample_rate


def write_wav(path, samples: np.ndarray, sample_rate: int = TARGET_RATE) -> None:
    """Write mono PCM-16 LE WAV."""
    clipped = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0)
    # scale matches the decoder's /32768 so a round trip only quantizes
    pcm = np.clip(np.round(clipped * 32768.0), -32768, 32767).astype("<i2")
    payload = pcm.tobytes()
    header = b"RIFF" + struct.pack("<I", 36 + len(payload)) + b"WAVE"
    header += b"fmt " + struct.pack("<IHHIIHH", 16, 1, 1, sample_rate, sample_rate * 2, 2, 16)
    header += b"data" + struct.pack("<I", len(payload))
    Path(path).write_bytes(header + payload)


def _design_lowpass(up: int, down: int) -> np.ndarray:
    """Kaiser-windowed sinc prototype for a rate change of up/down.

    Half-length is TAPS_PER_PHASE_HALF taps per polyphase branch, cutoff at
    the narrower of the two Nyquist rates, gain `up` to compensate for
    zero-stuffing.
    """
    half = TAPS_PER_PHASE_HALF * up
    n = np.arange(-half, half + 1)
    cutoff = 1.0 / max(up, down)
    proto = up * cutoff * np.sinc(cutoff * n)
    return proto * np.kaiser(2 * half + 1, KAISER_BETA)


def resample(samples: np.ndarray, orig_rate: int, target_rate: int) -> np.ndarray:
    """Band-limited polyphase resampling from orig_rate to target_rate."""
    samples = np.asarray(samples, dtype=np.float64)
    if orig_rate == target_rate:
        return samples
    g = math.gcd(orig_rate, target_rate)
    up, down = target_rate // g, orig_rate // g
    h = _design_lowpass(up, down)
    delay = (len(h) - 1) // 2

    n_in = samples.size
    n_out = -((-n_in * up) // down)  # ceil(n_in * up / down)

    # Output j draws from the conceptually zero-stuffed signal at position
    # j*down + delay; only every up-th tap hits a real input sample, so each
    # phase reduces to a strided dot product with its own sub-filter.
    max_taps = delay // up + 1
    padded = np.concatenate([np.zeros(max_taps + 1), samples, np.zeros(max_taps + 2)])
    out = np.empty(n_out)
    j = np.arange(n_out)
    stuffed_pos = j * down + delay
    phase = stuffed_pos % up
    base = stuffed_pos // up  # input index of the newest contributing sample
    for r in range(up):
        mask = phase == r
        if not np.any(mask):
            continue
        sub = h[r::up][::-1]  # taps ordered oldest-to-newest input sample
        starts = base[mask] - (sub.size - 1) + (max_taps + 1)
        windows = np.lib.stride_tricks.sliding_window_view(padded, sub.size)[starts]
        out[mask] = windows @ sub
    return out


def load_wav(path, target_rate: int = TARGET_RATE) -> AudioClip:
    """Decode a WAV file, downmix to mono, and resample to target_rate."""
    samples, rate = _read_wav_file(path)
    mono = samples.mean(axis=1)
    if rate != target_rate:
        mono = resample(mono, rate, target_rate)
    return AudioClip(samples=np.clip(mono, -1.0, 1.0), sample_rate=target_rate)


# --------------------------------------------------------------------------
# Labels
# --------------------------------------------------------------------------

def parse_label(filename: str) -> TrackRecord:
    """Recover (song, sample, title, artist, genre) from an underscore-separated stem.

    The first two and last two fields are positional; any extra middle
    tokens are rejoined into the title, so titles may themselves contain
    underscores.
    """
    stem = Path(filename).stem
    tokens = stem.split("_")
    if len(tokens) < 5:
        raise LabelFormatError(f"{filename!r}: expected at least 4 underscore separators")
    song_tok, sample_tok = tokens[0], tokens[1]
    artist_tok, genre_tok = tokens[-2], tokens[-1]
    title = "_".join(tokens[2:-2])
    if not song_tok.isdigit() or not sample_tok.isdigit():
        raise LabelFormatError(f"{filename!r}: leading fields must be numeric")
    genre = GenreLabel.from_name(genre_tok)
    return TrackRecord(
        song_number=int(song_tok),
        sample_number=int(sample_tok),
        title=title,
        artist=artist_tok,
        genre=genre,
        file_path=str(filename),
    )


def format_label(record: TrackRecord) -> str:
    return (
        f"{record.song_number:03d}_{record.sample_number:02d}_"
        f"{record.title}_{record.artist}_{record.genre.display_name}.wav"
    )


def save_manifest(manifest: Manifest, path=None) -> Path:
    path = Path(path) if path is not None else manifest.corpus_root / MANIFEST_NAME
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_COLUMNS)
        for rec in manifest.records:
            writer.writerow(
                [rec.song_number, rec.sample_number, rec.title, rec.artist, rec.genre.display_name, rec.file_path]
            )
    return path


def load_manifest(corpus_root, manifest_path=None) -> Manifest:
    corpus_root = Path(corpus_root)
    path = Path(manifest_path) if manifest_path is not None else corpus_root / MANIFEST_NAME
    records = []
    seen = set()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            rec = TrackRecord(
                song_number=int(row["song_number"]),
                sample_number=int(row["sample_number"]),
                title=row["title"],
                artist=row["artist"],
                genre=GenreLabel.from_name(row["genre"]),
                file_path=row["file_path"],
            )
            key = (rec.song_number, rec.sample_number)
            if key in seen:
                raise CorpusError(f"duplicate (song_number, sample_number) = {key} in manifest")
            seen.add(key)
            if not (corpus_root / rec.file_path).exists():
                raise CorpusError(f"manifest entry {rec.file_path} missing under {corpus_root}")
            records.append(rec)
    return Manifest(records=records, corpus_root=corpus_root)


# --------------------------------------------------------------------------
# Segmentation
# --------------------------------------------------------------------------

def segment(clip: AudioClip, count: int = SEGMENTS_PER_CLIP, seg_seconds: float = SEGMENT_SECONDS) -> list[AudioClip]:
    """Cut a clip into `count` consecutive segments of seg_seconds each.

    The clip is first truncated, or zero-padded at the tail, to exactly
    count * seg_seconds so the segment count per file is fixed.
    """
    if count <= 0 or seg_seconds <= 0:
        raise ValueError("count and seg_seconds must be positive")
    seg_len = int(round(seg_seconds * clip.sample_rate))
    total = count * seg_len
    samples = clip.samples
    if samples.size >= total:
        samples = samples[:total]
    else:
        samples = np.concatenate([samples, np.zeros(total - samples.size)])
    return [
        AudioClip(samples=samples[i * seg_len : (i + 1) * seg_len], sample_rate=clip.sample_rate)
        for i in range(count)
    ]


# --------------------------------------------------------------------------
# Splits
# --------------------------------------------------------------------------

def _allocate_train_counts(class_sizes: dict, ratio: float) -> dict:
    """Per-class train counts: floor of ratio*size, topped up by largest
    fractional remainder until the global floor(ratio*N) total is met."""
    total = sum(class_sizes.values())
    target_total = int(math.floor(ratio * total + 1e-9))
    counts = {}
    remainders = []
    for cls, size in class_sizes.items():
        exact = ratio * size
        take = int(math.floor(exact + 1e-9))
        counts[cls] = take
        remainders.append((-(exact - take), cls))
    shortfall = target_total - sum(counts.values())
    for _, cls in sorted(remainders):
        if shortfall <= 0:
            break
        if counts[cls] < class_sizes[cls]:
            counts[cls] += 1
            shortfall -= 1
    return counts


def stratified_split(
    labels,
    groups=None,
    ratio: float = 0.8,
    mode: str = "track",
    seed: int = 0,
) -> SplitAssignment:
    """Deterministic stratified train/test split.

    In segment mode every sample is assigned independently; in track mode
    samples sharing a group id stay on one side of the split and the
    stratification is applied at track granularity.
    """
    labels = [GenreLabel(l) for l in labels]
    if not labels:
        raise StratificationError("labels must be non-empty")
    if not 0.0 < ratio < 1.0:
        raise StratificationError(f"ratio must be in (0, 1), got {ratio}")
    if mode not in ("segment", "track"):
        raise StratificationError(f"unknown split mode {mode!r}")
    rng = np.random.default_rng(seed)

    if mode == "segment":
        by_class: dict[GenreLabel, list[int]] = {}
        for i, lab in enumerate(labels):
            by_class.setdefault(lab, []).append(i)
        for lab, idxs in by_class.items():
            if len(idxs) < 2:
                raise StratificationError(f"class {lab.display_name} has fewer than 2 samples")
        counts = _allocate_train_counts({lab: len(v) for lab, v in by_class.items()}, ratio)
        train, test = [], []
        for lab in sorted(by_class):
            idxs = np.array(by_class[lab])
            perm = rng.permutation(idxs.size)
            take = counts[lab]
            train.extend(idxs[perm[:take]])
            test.extend(idxs[perm[take:]])
    else:
        if groups is None:
            raise StratificationError("track mode requires group ids")
        groups = list(groups)
        if len(groups) != len(labels):
            raise StratificationError("groups must align with labels")
        group_class: dict = {}
        group_members: dict = {}
        for i, (lab, grp) in enumerate(zip(labels, groups)):
            if grp in group_class and group_class[grp] != lab:
                raise StratificationError(f"group {grp!r} spans multiple classes")
            group_class[grp] = lab
            group_members.setdefault(grp, []).append(i)
        by_class: dict[GenreLabel, list] = {}
        for grp, lab in group_class.items():
            by_class.setdefault(lab, []).append(grp)
        for lab, grps in by_class.items():
            if len(grps) < 2:
                raise StratificationError(f"class {lab.display_name} has fewer than 2 tracks")
        counts = _allocate_train_counts({lab: len(v) for lab, v in by_class.items()}, ratio)
        train, test = [], []
        for lab in sorted(by_class):
            grps = by_class[lab]
            perm = rng.permutation(len(grps))
            take = counts[lab]
            for pos, k in enumerate(perm):
                dest = train if pos < take else test
                dest.extend(group_members[grps[k]])

    return SplitAssignment(
        train_indices=np.sort(np.array(train, dtype=np.int64)),
        test_indices=np.sort(np.array(test, dtype=np.int64)),
        mode=mode,
        ratio=ratio,
        seed=seed,
    )


# --------------------------------------------------------------------------
# Inter-annotator agreement
# --------------------------------------------------------------------------

def fleiss_kappa(matrix: AnnotationMatrix) -> float:
    """Multi-rater chance-corrected agreement kappa = (P0 - Pe) / (1 - Pe)."""
    counts = matrix.counts.astype(np.float64)
    n = float(matrix.raters)
    big_n = counts.shape[0]

    per_item = (np.sum(counts * (counts - 1.0), axis=1)) / (n * (n - 1.0))
    p_observed = float(np.mean(per_item))
    p_j = counts.sum(axis=0) / (big_n * n)
    p_expected = float(np.sum(p_j**2))

    if p_expected >= 1.0 - 1e-15:
        raise KappaUndefinedError("expected agreement is 1 (all ratings in one category); kappa undefined")
    return (p_observed - p_expected) / (1.0 - p_expected)


# --------------------------------------------------------------------------
# Synthetic corpus
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SignalRecipe:
    """Per-genre synthesis recipe: a distinct spectral signature."""

    genre: GenreLabel
    fundamental_hz: tuple[float, float]
    harmonics: int
    am_rate_hz: float
    noise_level: float


DEFAULT_RECIPES = (
    SignalRecipe(GenreLabel.SANAANI, (110.0, 155.0), 6, 1.5, 0.010),
    SignalRecipe(GenreLabel.HADHRAMI, (233.0, 311.0), 5, 3.0, 0.015),
    SignalRecipe(GenreLabel.LAHJI, (466.0, 622.0), 4, 5.0, 0.020),
    SignalRecipe(GenreLabel.TIHAMI, (932.0, 1245.0), 3, 7.0, 0.015),
    SignalRecipe(GenreLabel.ADENI, (1865.0, 2489.0), 2, 9.0, 0.010),
)


def _synthesize_clip(recipe: SignalRecipe, rng: np.random.Generator, seconds: float, rate: int) -> np.ndarray:
    t = np.arange(int(round(seconds * rate))) / rate
    f0 = rng.uniform(*recipe.fundamental_hz)
    signal = np.zeros_like(t)
    for k in range(1, recipe.harmonics + 1):
        phase = rng.uniform(0.0, 2.0 * np.pi)
        signal += (1.0 / k) * np.sin(2.0 * np.pi * k * f0 * t + phase)
    am_phase = rng.uniform(0.0, 2.0 * np.pi)
    envelope = 1.0 + 0.5 * np.sin(2.0 * np.pi * recipe.am_rate_hz * t + am_phase)
    signal = signal * envelope + recipe.noise_level * rng.standard_normal(t.size)
    return 0.9 * signal / np.max(np.abs(signal))


def generate_synthetic_corpus(
    out_dir,
    clips_per_class: int,
    seed: int = 0,
    recipes=DEFAULT_RECIPES,
    seconds: float = CLIP_SECONDS,
    rate: int = TARGET_RATE,
) -> Manifest:
    """Write a YMIR-layout corpus of synthetic clips, one folder per genre.

    Deterministic per seed: each clip draws from its own child generator so
    regenerating with the same seed is byte-identical.
    """
    if len(recipes) != NUM_GENRES:
        raise ValueError(f"expected {NUM_GENRES} recipes, got {len(recipes)}")
    if len({r.genre for r in recipes}) != NUM_GENRES:
        raise ValueError("recipes must cover each genre exactly once")
    out_dir = Path(out_dir)
    records = []
    for recipe in sorted(recipes, key=lambda r: int(r.genre)):
        genre_dir = out_dir / recipe.genre.display_name
        genre_dir.mkdir(parents=True, exist_ok=True)
        for i in range(clips_per_class):
            rng = np.random.default_rng([seed, int(recipe.genre), i])
            samples = _synthesize_clip(recipe, rng, seconds, rate)
            song = int(recipe.genre) * clips_per_class + i + 1
            record = TrackRecord(
                song_number=song,
                sample_number=1,
                title=f"{recipe.genre.display_name}Tune{i:03d}",
                artist="Synth",
                genre=recipe.genre,
                file_path=f"{recipe.genre.display_name}/{song:03d}_01_{recipe.genre.display_name}Tune{i:03d}_Synth_{recipe.genre.display_name}.wav",
            )
            write_wav(out_dir / record.file_path, samples, rate)
            records.append(record)
    manifest = Manifest(records=records, corpus_root=out_dir)
    save_manifest(manifest)
    return manifest
