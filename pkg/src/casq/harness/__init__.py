"""Experiment harness: synthetic data, training, metrics, benchmarks, CLI."""

from .data import Dataset, SyntheticTaskSpec, Utterance, generate_dataset
from .metrics import EditResult, corpus_error_rate, edit_distance
