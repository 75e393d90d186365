"""Benchmark engine for five-genre music classification.

Pipeline: WAV ingestion and segmentation -> six time-frequency feature
representations -> five CNN architectures on a from-scratch reverse-mode
tensor engine -> training with early stopping -> weighted evaluation
metrics and the full feature x model experiment grid.
"""

__version__ = "0.1.0"
