"""Command-line harness: corpus -> features -> models -> training -> reports.

Subcommands: synth, extract, train, grid, report, kappa.  The grid runs the
full 6-feature x 5-model experiment table with per-cell seeds derived as
seed + cell index, a shared on-disk feature cache, and Table-style summary
emission.  Exit codes: 0 success, 2 config error, 3 data error, 4 training
failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import corpus as corpus_mod
from . import dsp, features, models
from . import train_eval as te
from .corpus import GENRE_NAMES, Manifest, load_manifest, load_wav, segment
from .features import FEATURE_KINDS, FeatureMap

FEATURE_DISPLAY = {
    "chroma": "Chroma",
    "filterbank": "FilterBanks",
    "melspec": "Mel-Spectrogram",
    "mfcc13": "MFCC13",
    "mfcc20": "MFCC20",
    "mfcc40": "MFCC40",
}
MODEL_DISPLAY = {
    "alexnet": "AlexNet",
    "vgg16_mini": "VGG16-mini",
    "mobilenet_mini": "MobileNet-mini",
    "cnn": "CNN (Baseline)",
    "ymcm": "YMCM (Proposed)",
}
# Table row order follows the benchmark report layout.
TABLE_MODEL_ORDER = ("alexnet", "vgg16_mini", "mobilenet_mini", "cnn", "ymcm")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_TRAINING = 4


class StageError(Exception):
    """Failure attributed to a named pipeline stage."""

    def __init__(self, stage: str, message: str, exit_code: int):
        super().__init__(message)
        self.stage = stage
        self.exit_code = exit_code


@dataclass(frozen=True)
class ExperimentConfig:
    corpus_root: str
    feature: str
    model: str
    seed: int
    out_dir: str
    cache_dir: str | None = None
    split_mode: str = "track"
    split_ratio: float = 0.8
    epochs: int = 50
    batch_size: int = 16
    learning_rate: float = 1e-4
    patience: int = 10
    val_fraction: float = 0.1

    def train_config(self) -> te.TrainConfig:
        return te.TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            patience=self.patience,
            val_fraction=self.val_fraction,
            seed=self.seed,
        )

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


# --------------------------------------------------------------------------
# Feature extraction with cache
# --------------------------------------------------------------------------

EXTRACTION_PARAMS = {
    "stft": {"n_fft": dsp.DEFAULT_N_FFT, "hop": dsp.DEFAULT_HOP, "window": "hann", "centered": True},
    "mel": {"n_mels": features.N_MELS, "variant": "slaney", "normalization": "area"},
    "fbank": {"filters": features.N_FILTERBANK, "win": features.FBANK_WIN_SECONDS, "hop": features.FBANK_HOP_SECONDS},
    "segmentation": {"count": corpus_mod.SEGMENTS_PER_CLIP, "seconds": corpus_mod.SEGMENT_SECONDS},
    "rate": corpus_mod.TARGET_RATE,
}


def corpus_digest(manifest_path: Path) -> str:
    payload = Path(manifest_path).read_bytes() + json.dumps(EXTRACTION_PARAMS, sort_keys=True).encode()
    return hashlib.sha256(payload).hexdigest()[:16]


class FeatureExtractor:
    """Per-segment feature computation with an on-disk YMFT cache.

    The five STFT-derived kinds share one cached power spectrogram per
    segment; filterbank energies re-frame the raw segment.  Cache paths are
    keyed by corpus digest, feature kind, and extraction parameters.
    """

    def __init__(self, manifest: Manifest, cache_dir=None, manifest_path=None):
        self.manifest = manifest
        path = manifest_path or (manifest.corpus_root / corpus_mod.MANIFEST_NAME)
        self.digest = corpus_digest(path)
        self.cache_dir = Path(cache_dir) if cache_dir else None
        self.cache_hits = 0
        self.cache_misses = 0
        self._mel_fb = features.build_mel_filterbank(
            features.N_MELS, dsp.DEFAULT_N_FFT, corpus_mod.TARGET_RATE
        )

    def _cache_path(self, kind: str, stem: str, seg_index: int) -> Path | None:
        if self.cache_dir is None:
            return None
        return self.cache_dir / kind / self.digest / f"{stem}_s{seg_index}.ymft"

    def _compute(self, seg, kinds: tuple) -> dict[str, FeatureMap]:
        out = {}
        stft_kinds = [k for k in kinds if k != "filterbank"]
        if stft_kinds:
            power = dsp.analyze_segment(seg.samples, seg.sample_rate)
            for kind in stft_kinds:
                if kind == "melspec":
                    out[kind] = features.mel_spectrogram(power, self._mel_fb)
                elif kind == "chroma":
                    out[kind] = features.chroma(power)
                else:
                    out[kind] = features.mfcc(power, self._mel_fb, int(kind[4:]))
        if "filterbank" in kinds:
            out["filterbank"] = features.logfbank_energies(seg)
        return out

    def extract(self, kinds: tuple) -> dict[str, list[FeatureMap]]:
        """Feature maps for every segment of every clip, manifest order."""
        for kind in kinds:
            if kind not in FEATURE_KINDS:
                raise StageError("features", f"unknown feature kind {kind!r}", EXIT_CONFIG)
        maps: dict[str, list] = {kind: [] for kind in kinds}
        for record in self.manifest.records:
            stem = Path(record.file_path).stem
            seg_count = corpus_mod.SEGMENTS_PER_CLIP
            cached = {
                kind: [self._cache_path(kind, stem, s) for s in range(seg_count)] for kind in kinds
            }
            missing = [
                kind for kind in kinds if any(p is None or not p.exists() for p in cached[kind])
            ]
            if missing:
                clip = load_wav(self.manifest.corpus_root / record.file_path)
                segments = segment(clip)
                computed = [self._compute(seg, tuple(missing)) for seg in segments]
                for kind in missing:
                    self.cache_misses += seg_count
                    for s, seg_maps in enumerate(computed):
                        path = cached[kind][s]
                        if path is not None:
                            path.parent.mkdir(parents=True, exist_ok=True)
                            # per-process temp name keeps concurrent grid
                            # workers safe; the rename is atomic
                            tmp = path.with_suffix(f".tmp{os.getpid()}")
                            features.save_feature_map(seg_maps[kind], tmp)
                            os.replace(tmp, path)
                        maps[kind].append(seg_maps[kind])
            for kind in kinds:
                if kind not in missing:
                    self.cache_hits += seg_count
                    maps[kind].extend(features.load_feature_map(p) for p in cached[kind])
        return maps

    def segment_labels(self) -> tuple[np.ndarray, list]:
        labels, groups = [], []
        for idx, record in enumerate(self.manifest.records):
            labels.extend([int(record.genre)] * corpus_mod.SEGMENTS_PER_CLIP)
            groups.extend([idx] * corpus_mod.SEGMENTS_PER_CLIP)
        return np.array(labels, dtype=np.int64), groups


# --------------------------------------------------------------------------
# Single experiment
# --------------------------------------------------------------------------

def _assemble_inputs(maps: list[FeatureMap], stats) -> np.ndarray:
    arrays = [models.adapt_input(features.apply_normalizer(m, stats))[0] for m in maps]
    return np.stack(arrays).astype(np.float32)


def run_single(config: ExperimentConfig, extractor: FeatureExtractor | None = None) -> te.MetricsReport:
    """Run one (feature, model) experiment and write its artifacts."""
    timings = {}
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    if config.model not in models.ARCHITECTURE_NAMES:
        raise StageError("models", f"unknown architecture {config.model!r}", EXIT_CONFIG)
    if config.feature not in FEATURE_KINDS:
        raise StageError("features", f"unknown feature kind {config.feature!r}", EXIT_CONFIG)

    started = time.perf_counter()
    if extractor is None:
        try:
            manifest = load_manifest(config.corpus_root)
        except Exception as exc:
            raise StageError("corpus", str(exc), EXIT_DATA) from exc
        extractor = FeatureExtractor(manifest, cache_dir=config.cache_dir)
    try:
        maps = extractor.extract((config.feature,))[config.feature]
    except StageError:
        raise
    except Exception as exc:
        raise StageError("features", str(exc), EXIT_DATA) from exc
    labels, groups = extractor.segment_labels()
    timings["features"] = time.perf_counter() - started

    started = time.perf_counter()
    try:
        split = corpus_mod.stratified_split(
            labels, groups=groups if config.split_mode == "track" else None,
            ratio=config.split_ratio, mode=config.split_mode, seed=config.seed,
        )
    except corpus_mod.StratificationError as exc:
        raise StageError("split", str(exc), EXIT_DATA) from exc
    train_maps = [maps[i] for i in split.train_indices]
    stats = features.fit_normalizer(train_maps)
    x_train = _assemble_inputs(train_maps, stats)
    y_train = labels[split.train_indices]
    x_test = _assemble_inputs([maps[i] for i in split.test_indices], stats)
    y_test = labels[split.test_indices]
    timings["normalize"] = time.perf_counter() - started

    started = time.perf_counter()
    geometry = tuple(x_train.shape[1:])
    spec = models.build_architecture(config.model)
    try:
        model = models.ModelInstance(spec, geometry, seed=config.seed)
        model, logs, best_state = te.train(model, x_train, y_train, config.train_config())
    except te.DataError as exc:
        raise StageError("train", str(exc), EXIT_DATA) from exc
    except Exception as exc:
        raise StageError("train", str(exc), EXIT_TRAINING) from exc
    timings["train"] = time.perf_counter() - started

    started = time.perf_counter()
    matrix, report = te.evaluate(model, x_test, y_test)
    timings["evaluate"] = time.perf_counter() - started

    model.save_checkpoint(out_dir / "checkpoint.ymck")
    (out_dir / "epochs.tsv").write_text(te.format_epoch_logs(logs), encoding="utf-8")
    (out_dir / "confusion.txt").write_text(
        te.format_confusion(matrix, list(GENRE_NAMES)), encoding="utf-8"
    )
    (out_dir / "metrics.txt").write_text(
        te.format_metrics(report, list(GENRE_NAMES)), encoding="utf-8"
    )
    np.savetxt(out_dir / "confusion.tsv", matrix.counts, fmt="%d", delimiter="\t")
    provenance = {
        "config": asdict(config),
        "config_digest": config.digest(),
        "corpus_digest": extractor.digest,
        "seed": config.seed,
        "timings": {k: round(v, 3) for k, v in timings.items()},
        "epochs_run": len(logs),
        "cache_hits": extractor.cache_hits,
        "cache_misses": extractor.cache_misses,
    }
    (out_dir / "provenance.json").write_text(json.dumps(provenance, indent=2, sort_keys=True), encoding="utf-8")
    return report


# --------------------------------------------------------------------------
# Grid
# --------------------------------------------------------------------------

@dataclass
class GridCell:
    feature: str
    model: str
    index: int
    seed: int
    out_dir: str
    report: te.MetricsReport | None = None
    error: str | None = None
    stage: str | None = None
    wall_seconds: float = 0.0


@dataclass
class GridResult:
    cells: list[GridCell]

    def cell(self, feature: str, model: str) -> GridCell:
        for c in self.cells:
            if c.feature == feature and c.model == model:
                return c
        raise KeyError((feature, model))


def _run_cell_worker(config_dict: dict):
    """Self-contained cell execution for process pools (module-level for pickling)."""
    config = ExperimentConfig(**config_dict)
    started = time.perf_counter()
    try:
        report = run_single(config)
        return {"report": report, "wall": time.perf_counter() - started}
    except StageError as exc:
        return {"error": str(exc), "stage": exc.stage, "wall": time.perf_counter() - started}
    except Exception as exc:
        return {"error": str(exc), "stage": "unknown", "wall": time.perf_counter() - started}


def run_grid(base: ExperimentConfig, out_dir: Path, jobs: int = 1) -> GridResult:
    """Execute all feature x model cells with seeds derived as seed + index.

    Per-cell seeding keeps results independent of scheduling, so the
    optional process pool (jobs > 1) produces byte-identical artifacts to a
    sequential run.
    """
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        manifest = load_manifest(base.corpus_root)
    except Exception as exc:
        raise StageError("corpus", str(exc), EXIT_DATA) from exc
    extractor = FeatureExtractor(manifest, cache_dir=base.cache_dir)
    extractor.extract(FEATURE_KINDS)  # warm the cache once for every kind

    cells = []
    configs = []
    index = 0
    for feature in FEATURE_KINDS:
        for model in TABLE_MODEL_ORDER:
            cell_dir = out_dir / "cells" / f"{feature}__{model}"
            cells.append(
                GridCell(
                    feature=feature, model=model, index=index,
                    seed=base.seed + index, out_dir=str(cell_dir),
                )
            )
            configs.append(
                replace(base, feature=feature, model=model, seed=base.seed + index, out_dir=str(cell_dir))
            )
            index += 1

    if jobs > 1 and base.cache_dir is not None:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_run_cell_worker, [asdict(c) for c in configs]))
    else:
        outcomes = []
        for config in configs:
            started = time.perf_counter()
            try:
                outcomes.append(
                    {"report": run_single(config, extractor=extractor), "wall": time.perf_counter() - started}
                )
            except StageError as exc:
                outcomes.append({"error": str(exc), "stage": exc.stage, "wall": time.perf_counter() - started})
            except Exception as exc:  # cell failures never abort the grid
                outcomes.append({"error": str(exc), "stage": "unknown", "wall": time.perf_counter() - started})

    for cell, outcome in zip(cells, outcomes):
        cell.wall_seconds = outcome["wall"]
        if "report" in outcome:
            cell.report = outcome["report"]
        else:
            cell.error = outcome["error"]
            cell.stage = outcome["stage"]

    result = GridResult(cells=cells)
    (out_dir / "summary_table.txt").write_text(format_results_table(result), encoding="utf-8")
    (out_dir / "optimal_features.txt").write_text(format_optimal_table(result), encoding="utf-8")
    (out_dir / "grid.json").write_text(grid_json(result), encoding="utf-8")
    emit_plots(out_dir, result)
    return result


def grid_json(result: GridResult) -> str:
    payload = []
    for c in result.cells:
        entry = {
            "feature": c.feature, "model": c.model, "index": c.index, "seed": c.seed,
            "out_dir": c.out_dir, "wall_seconds": round(c.wall_seconds, 3),
        }
        if c.report is not None:
            entry["metrics"] = {
                "accuracy": c.report.accuracy,
                "weighted_precision": c.report.weighted_precision,
                "weighted_recall": c.report.weighted_recall,
                "weighted_f1": c.report.weighted_f1,
                "weighted_specificity": c.report.weighted_specificity,
                "balanced_accuracy": c.report.balanced_accuracy,
            }
        else:
            entry["error"] = c.error
            entry["stage"] = c.stage
        payload.append(entry)
    return json.dumps(payload, indent=2, sort_keys=True)


def format_results_table(result: GridResult) -> str:
    """Performance table: one block per model, one row per feature kind."""
    lines = [
        f"{'Model':<16} {'Feature Extraction':<20} {'Acc.(%)':>8} {'Prec.(%)':>9} {'Rec.(%)':>8} {'F1.(%)':>8}",
        "-" * 72,
    ]
    for model in TABLE_MODEL_ORDER:
        for i, feature in enumerate(FEATURE_KINDS):
            cell = result.cell(feature, model)
            name = MODEL_DISPLAY[model] if i == 0 else ""
            if cell.report is None:
                lines.append(f"{name:<16} {FEATURE_DISPLAY[feature]:<20} {'failed: ' + (cell.stage or '?'):>35}")
                continue
            r = cell.report
            lines.append(
                f"{name:<16} {FEATURE_DISPLAY[feature]:<20} {100*r.accuracy:8.2f} "
                f"{100*r.weighted_precision:9.2f} {100*r.weighted_recall:8.2f} {100*r.weighted_f1:8.2f}"
            )
        lines.append("-" * 72)
    return "\n".join(lines) + "\n"


def format_optimal_table(result: GridResult) -> str:
    """Best feature per model by accuracy; ties go to the first feature in order."""
    lines = [f"{'Model':<16} {'Optimal Feature':<20} {'Accuracy':>9}", "-" * 47]
    for model in TABLE_MODEL_ORDER:
        best_feature, best_acc = None, -1.0
        for feature in FEATURE_KINDS:
            cell = result.cell(feature, model)
            if cell.report is not None and cell.report.accuracy > best_acc:
                best_feature, best_acc = feature, cell.report.accuracy
        if best_feature is None:
            lines.append(f"{MODEL_DISPLAY[model]:<16} {'(all cells failed)':<20} {'-':>9}")
        else:
            lines.append(f"{MODEL_DISPLAY[model]:<16} {FEATURE_DISPLAY[best_feature]:<20} {100*best_acc:8.2f}%")
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# Plots (self-contained SVG + numeric tables)
# --------------------------------------------------------------------------

def _svg_curves(series: dict[str, list[tuple[float, float]]], title: str, x_label: str, y_label: str) -> str:
    width, height, margin = 640, 400, 50
    palette = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"]
    points = [p for pts in series.values() for p in pts]
    if not points:
        return f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}"></svg>'
    xs = [p[0] for p in points]
    ys = [p[1] for p in points]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    x_span = (x1 - x0) or 1.0
    y_span = (y1 - y0) or 1.0

    def sx(x):
        return margin + (x - x0) / x_span * (width - 2 * margin)

    def sy(y):
        return height - margin - (y - y0) / y_span * (height - 2 * margin)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<text x="{width/2}" y="20" text-anchor="middle" font-size="14">{title}</text>',
        f'<text x="{width/2}" y="{height-10}" text-anchor="middle" font-size="11">{x_label}</text>',
        f'<text x="15" y="{height/2}" font-size="11" transform="rotate(-90 15 {height/2})" text-anchor="middle">{y_label}</text>',
        f'<rect x="{margin}" y="{margin}" width="{width-2*margin}" height="{height-2*margin}" fill="none" stroke="#888"/>',
    ]
    for i, (name, pts) in enumerate(series.items()):
        color = palette[i % len(palette)]
        path = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in pts)
        parts.append(f'<polyline points="{path}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        parts.append(
            f'<text x="{width-margin+4}" y="{margin+14*i+10}" font-size="10" fill="{color}">{name}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts)


def _svg_confusion(counts: np.ndarray, title: str, class_names: list[str]) -> str:
    k = counts.shape[0]
    cell, margin = 52, 70
    size = margin + k * cell + 20
    peak = counts.max() or 1
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}">',
        f'<text x="{size/2}" y="20" text-anchor="middle" font-size="13">{title}</text>',
    ]
    for i in range(k):
        for j in range(k):
            shade = int(255 - 200 * counts[i, j] / peak)
            x, y = margin + j * cell, margin + i * cell - 30
            parts.append(
                f'<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="rgb({shade},{shade},255)" stroke="#666"/>'
            )
            parts.append(
                f'<text x="{x + cell/2}" y="{y + cell/2 + 4}" text-anchor="middle" font-size="11">{int(counts[i,j])}</text>'
            )
    for i, name in enumerate(class_names):
        parts.append(f'<text x="{margin-6}" y="{margin + i*cell + cell/2 - 26}" text-anchor="end" font-size="9">{name}</text>')
        parts.append(
            f'<text x="{margin + i*cell + cell/2}" y="{margin + k*cell - 16}" text-anchor="middle" font-size="9">{name}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts)


def emit_plots(out_dir: Path, result: GridResult) -> None:
    """Validation curves per feature (for every model) and confusion grids.

    Every SVG is paired with the numeric table it was drawn from, so tests
    assert on numbers, not rendering.
    """
    plots_dir = Path(out_dir) / "plots"
    plots_dir.mkdir(parents=True, exist_ok=True)
    for model in TABLE_MODEL_ORDER:
        acc_series: dict[str, list] = {}
        loss_series: dict[str, list] = {}
        rows = []
        for feature in FEATURE_KINDS:
            cell = result.cell(feature, model)
            epochs_file = Path(cell.out_dir) / "epochs.tsv"
            if cell.report is None or not epochs_file.exists():
                continue
            logs = te.parse_epoch_logs(epochs_file.read_text(encoding="utf-8"))
            acc_series[FEATURE_DISPLAY[feature]] = [(l.epoch, l.val_accuracy) for l in logs]
            loss_series[FEATURE_DISPLAY[feature]] = [(l.epoch, l.val_loss) for l in logs]
            rows += [
                [FEATURE_DISPLAY[feature], l.epoch, f"{l.val_accuracy:.6f}", f"{l.val_loss:.6f}"]
                for l in logs
            ]
        display = MODEL_DISPLAY[model]
        (plots_dir / f"val_accuracy_{model}.svg").write_text(
            _svg_curves(acc_series, f"Validation accuracy: {display}", "epoch", "accuracy"), encoding="utf-8"
        )
        (plots_dir / f"val_loss_{model}.svg").write_text(
            _svg_curves(loss_series, f"Validation loss: {display}", "epoch", "loss"), encoding="utf-8"
        )
        with open(plots_dir / f"val_curves_{model}.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["feature", "epoch", "val_accuracy", "val_loss"])
            writer.writerows(rows)

    for cell_obj in result.cells:
        confusion_file = Path(cell_obj.out_dir) / "confusion.tsv"
        if cell_obj.report is None or not confusion_file.exists():
            continue
        counts = np.loadtxt(confusion_file, delimiter="\t", dtype=np.int64).reshape(
            len(GENRE_NAMES), len(GENRE_NAMES)
        )
        title = f"{MODEL_DISPLAY[cell_obj.model]} / {FEATURE_DISPLAY[cell_obj.feature]}"
        (plots_dir / f"confusion_{cell_obj.feature}__{cell_obj.model}.svg").write_text(
            _svg_confusion(counts, title, list(GENRE_NAMES)), encoding="utf-8"
        )


# --------------------------------------------------------------------------
# Subcommands
# --------------------------------------------------------------------------

def _cmd_synth(args) -> int:
    manifest = corpus_mod.generate_synthetic_corpus(
        args.out, clips_per_class=args.clips_per_class, seed=args.seed, seconds=args.duration
    )
    summary = manifest.summary()
    print(f"wrote {summary['clips']} clips under {args.out}")
    for genre, count in summary["per_genre"].items():
        print(f"  {genre}: {count}")
    print(f"expected segments after preprocessing: {summary['expected_segments']}")
    return EXIT_OK


def _cmd_extract(args) -> int:
    manifest = load_manifest(args.corpus)
    kinds = tuple(FEATURE_KINDS) if args.feature == "all" else (args.feature,)
    extractor = FeatureExtractor(manifest, cache_dir=args.cache)
    extractor.extract(kinds)
    print(f"extracted {', '.join(kinds)}: {extractor.cache_misses} computed, {extractor.cache_hits} cache hits")
    return EXIT_OK


def _config_from_args(args, feature: str, model: str, out_dir: str) -> ExperimentConfig:
    return ExperimentConfig(
        corpus_root=args.corpus,
        feature=feature,
        model=model,
        seed=args.seed,
        out_dir=out_dir,
        cache_dir=args.cache,
        split_mode=args.split_mode,
        split_ratio=args.ratio,
        epochs=args.epochs,
        batch_size=args.batch_size,
        learning_rate=args.learning_rate,
        patience=args.patience,
        val_fraction=args.val_fraction,
    )


def _cmd_train(args) -> int:
    config = _config_from_args(args, args.feature, args.model, args.out)
    report = run_single(config)
    print(f"test accuracy: {report.accuracy:.4f}  weighted F1: {report.weighted_f1:.4f}")
    print(f"artifacts in {args.out}")
    return EXIT_OK


def _cmd_grid(args) -> int:
    base = _config_from_args(args, FEATURE_KINDS[0], TABLE_MODEL_ORDER[0], args.out)
    started = time.perf_counter()
    result = run_grid(base, Path(args.out), jobs=args.jobs)
    elapsed = time.perf_counter() - started
    completed = sum(1 for c in result.cells if c.report is not None)
    print(f"grid: {completed}/{len(result.cells)} cells completed in {elapsed:.0f}s")
    print((Path(args.out) / "summary_table.txt").read_text(encoding="utf-8"))
    print((Path(args.out) / "optimal_features.txt").read_text(encoding="utf-8"))
    failed = [c for c in result.cells if c.report is None]
    return EXIT_TRAINING if failed else EXIT_OK


def _cmd_report(args) -> int:
    grid_file = Path(args.runs) / "grid.json"
    if not grid_file.exists():
        raise StageError("report", f"no grid.json under {args.runs}", EXIT_DATA)
    entries = json.loads(grid_file.read_text(encoding="utf-8"))
    cells = []
    for entry in entries:
        cell = GridCell(
            feature=entry["feature"], model=entry["model"], index=entry["index"],
            seed=entry["seed"], out_dir=entry["out_dir"],
            wall_seconds=entry.get("wall_seconds", 0.0),
        )
        metrics = entry.get("metrics")
        if metrics is not None:
            per_class = []  # summary tables only need the aggregates
            cell.report = te.MetricsReport(
                accuracy=metrics["accuracy"],
                balanced_accuracy=metrics["balanced_accuracy"],
                weighted_precision=metrics["weighted_precision"],
                weighted_recall=metrics["weighted_recall"],
                weighted_f1=metrics["weighted_f1"],
                weighted_specificity=metrics["weighted_specificity"],
                per_class=per_class,
            )
        else:
            cell.error, cell.stage = entry.get("error"), entry.get("stage")
        cells.append(cell)
    result = GridResult(cells=cells)
    out = Path(args.out or args.runs)
    out.mkdir(parents=True, exist_ok=True)
    (out / "summary_table.txt").write_text(format_results_table(result), encoding="utf-8")
    (out / "optimal_features.txt").write_text(format_optimal_table(result), encoding="utf-8")
    emit_plots(out, result)
    print((out / "summary_table.txt").read_text(encoding="utf-8"))
    return EXIT_OK


def _cmd_kappa(args) -> int:
    rows = []
    with open(args.matrix, newline="", encoding="utf-8") as fh:
        for row in csv.reader(fh):
            if row and not row[0].lstrip().startswith("#"):
                rows.append([int(v) for v in row])
    if not rows or len({len(r) for r in rows}) != 1:
        raise StageError("kappa", f"{args.matrix}: expected a rectangular count matrix", EXIT_CONFIG)
    counts = np.array(rows, dtype=np.int64)
    raters = args.raters if args.raters else int(counts[0].sum())
    kappa = corpus_mod.fleiss_kappa(corpus_mod.AnnotationMatrix(counts=counts, raters=raters))
    print(f"fleiss_kappa\t{kappa:.6f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ymir-bench", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic five-genre corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--clips-per-class", type=int, default=40)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--duration", type=float, default=corpus_mod.CLIP_SECONDS)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("extract", help="extract features into the cache")
    p.add_argument("--corpus", required=True)
    p.add_argument("--feature", default="all", choices=("all",) + FEATURE_KINDS)
    p.add_argument("--cache", required=True)
    p.set_defaults(func=_cmd_extract)

    def add_train_flags(p, require_seed=True):
        p.add_argument("--corpus", required=True)
        p.add_argument("--seed", type=int, required=require_seed)
        p.add_argument("--out", required=True)
        p.add_argument("--cache", default=None)
        p.add_argument("--split-mode", default="track", choices=("track", "segment"))
        p.add_argument("--ratio", type=float, default=0.8)
        p.add_argument("--epochs", type=int, default=50)
        p.add_argument("--batch-size", type=int, default=16)
        p.add_argument("--learning-rate", type=float, default=1e-4)
        p.add_argument("--patience", type=int, default=10)
        p.add_argument("--val-fraction", type=float, default=0.1)

    p = sub.add_parser("train", help="run one feature x model experiment")
    p.add_argument("--feature", required=True)
    p.add_argument("--model", required=True)
    add_train_flags(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("grid", help="run the full feature x model grid")
    add_train_flags(p)
    p.add_argument("--jobs", type=int, default=1, help="cell-parallel worker processes (needs --cache)")
    p.set_defaults(func=_cmd_grid)

    p = sub.add_parser("report", help="re-emit tables and plots from grid artifacts")
    p.add_argument("--runs", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_report)

    p = sub.add_parser("kappa", help="Fleiss' kappa of an annotation count matrix (CSV)")
    p.add_argument("--matrix", required=True)
    p.add_argument("--raters", type=int, default=None)
    p.set_defaults(func=_cmd_kappa)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except StageError as exc:
        print(f"error at stage {exc.stage}: {exc}", file=sys.stderr)
        return exc.exit_code
    except corpus_mod.CorpusError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ValueError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
