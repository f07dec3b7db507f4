"""Dice coefficient and the 256-threshold mean-Dice between a mask and a gray map."""
from __future__ import annotations

import math
from typing import Iterable

import numpy as np

N_LEVELS = 256


def _check_pair(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def _dice_from_counts(inter: int, size_a: int, size_b: int) -> float:
    total = size_a + size_b
    if total == 0:
        return 1.0  # both empty: perfect agreement
    return 2.0 * inter / total


def dice(a: np.ndarray, b: np.ndarray) -> float:
    """``2|A∩B| / (|A|+|B|)`` for boolean masks; two empty masks score 1."""
    a, b = np.asarray(a, dtype=bool), np.asarray(b, dtype=bool)
    _check_pair(a, b)
    return _dice_from_counts(int(np.count_nonzero(a & b)), int(a.sum()), int(b.sum()))


def binarize(gray: np.ndarray, t: int) -> np.ndarray:
    """Foreground where ``gray > t`` (strict)."""
    if not 0 <= t <= 255:
        raise ValueError(f"threshold must be in [0, 255], got {t}")
    return np.asarray(gray) > t


def _check_gray(gray: np.ndarray) -> np.ndarray:
    gray = np.asarray(gray)
    if gray.size and (gray.min() < 0 or gray.max() > 255):
        raise ValueError("gray map values must lie in [0, 255]")
    return gray.astype(np.int64)


def mean_dice_reference(a: np.ndarray, gray: np.ndarray) -> float:
    """Literal definition: average of Dice(A, gray > t) over t = 0..255."""
    a = np.asarray(a, dtype=bool)
    gray = _check_gray(gray)
    _check_pair(a, gray)
    return math.fsum(dice(a, binarize(gray, t)) for t in range(N_LEVELS)) / N_LEVELS


def mean_dice(a: np.ndarray, gray: np.ndarray) -> float:
    """Same value as :func:`mean_dice_reference`, from two histograms and suffix sums."""
    a = np.asarray(a, dtype=bool)
    gray = _check_gray(gray)
    _check_pair(a, gray)
    hist_all = np.bincount(gray.ravel(), minlength=N_LEVELS)
    hist_in = np.bincount(gray[a], minlength=N_LEVELS)
    # count of values > t is the suffix sum starting at t + 1
    above_all = np.concatenate([np.cumsum(hist_all[::-1])[::-1][1:], [0]])
    above_in = np.concatenate([np.cumsum(hist_in[::-1])[::-1][1:], [0]])
    size_a = int(a.sum())
    return math.fsum(
        _dice_from_counts(int(i), size_a, int(b)) for i, b in zip(above_in, above_all)
    ) / N_LEVELS


def averaged_mean_dice(pairs: Iterable[tuple[np.ndarray, np.ndarray]]) -> float:
    values = [mean_dice(a, g) for a, g in pairs]
    if not values:
        raise ValueError("no (mask, gray map) pairs to average")
    return math.fsum(values) / len(values)
