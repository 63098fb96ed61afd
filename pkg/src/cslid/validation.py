"""Input checks shared by the estimators and the CLI."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np

from . import LANGUAGES
from .dsp import AudioBuffer
from .errors import ConfigError, EmptyInputError, ShapeError


def check_feature_matrix(feat, n_mels: int = 80, min_frames: int = 1) -> np.ndarray:
    arr = np.asarray(feat)
    if arr.ndim != 2:
        raise ShapeError(f"features must be 2-D (frames, bins), got shape {arr.shape}")
    if arr.shape[1] != n_mels:
        raise ShapeError(f"features must have {n_mels} mel bins, got {arr.shape[1]}")
    if arr.shape[0] < min_frames:
        raise EmptyInputError(f"need at least {min_frames} frames, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("features contain NaN or infinite values")
    return arr.astype(np.float32, copy=False)


def check_feature_list(X, n_mels: int = 80) -> list[np.ndarray]:
    """Accept a list of (T_i, n_mels) matrices or one (N, T, n_mels) array."""
    if isinstance(X, np.ndarray) and X.ndim == 3:
        X = list(X)
    if isinstance(X, np.ndarray) and X.ndim == 2:
        raise ShapeError("expected a sequence of feature matrices, got a single 2-D array")
    X = list(X)
    if not X:
        raise EmptyInputError("no samples")
    return [check_feature_matrix(x, n_mels) for x in X]


def check_audio_list(X) -> list[AudioBuffer]:
    X = [X] if isinstance(X, AudioBuffer) else list(X)
    if not X:
        raise EmptyInputError("no samples")
    for i, a in enumerate(X):
        if not isinstance(a, AudioBuffer):
            raise TypeError(f"item {i} is {type(a).__name__}, expected AudioBuffer")
    return X


def check_labels(y, n: int) -> np.ndarray:
    """Language labels as class indices; accepts 'en'/'zh' strings or 0/1."""
    y = list(y)
    if len(y) != n:
        raise ValueError(f"got {n} samples but {len(y)} labels")
    out = []
    for v in y:
        if isinstance(v, str):
            if v not in LANGUAGES:
                raise ValueError(f"unknown language label {v!r}")
            out.append(LANGUAGES.index(v))
        elif int(v) in (0, 1) and int(v) == v:
            out.append(int(v))
        else:
            raise ValueError(f"labels must be 'en'/'zh' or 0/1, got {v!r}")
    return np.asarray(out, dtype=np.int64)


def check_positive(name: str, value, integer: bool = False):
    if integer and (int(value) != value):
        raise ConfigError(f"{name} must be an integer, got {value!r}")
    if not value > 0:
        raise ConfigError(f"{name} must be positive, got {value!r}")
    return int(value) if integer else float(value)


def check_existing_file(path, what: str = "file") -> Path:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"{what} not found: {p}")
    return p


def check_output_dir(path, force: bool = False) -> Path:
    """An output directory must not exist (or be empty) unless ``force`` is given."""
    p = Path(path)
    if p.exists() and not p.is_dir():
        raise ConfigError(f"output path exists and is not a directory: {p}")
    if p.is_dir() and any(p.iterdir()) and not force:
        raise ConfigError(f"output directory {p} already exists; pass --force to overwrite")
    p.mkdir(parents=True, exist_ok=True)
    return p


def check_choice(name: str, value, choices: Sequence):
    if value not in choices:
        raise ConfigError(f"{name} must be one of {list(choices)}, got {value!r}")
    return value
