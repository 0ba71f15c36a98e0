"""Preprocessing, synthetic data, dataset readers and windowing."""
from .io import load_dataset, save_dataset
from .preprocess import preprocess_note
from .synthetic import gen_synthetic
from .types import TaskExample, ValidationError
from .windows import EncodedWindow, window_examples

__all__ = ["load_dataset", "save_dataset", "preprocess_note", "gen_synthetic", "TaskExample",
           "ValidationError", "EncodedWindow", "window_examples"]
