"""Input checks shared by the estimators."""

from __future__ import annotations

import numpy as np

from .data import HsiCube


def check_cube(X) -> HsiCube:
    if isinstance(X, HsiCube):
        return X
    arr = np.asarray(X)
    if arr.ndim != 3:
        raise ValueError(f"expected an H x W x C cube, got array of shape {arr.shape}")
    return HsiCube(arr)


def check_cube_batch(X) -> list[HsiCube]:
    if isinstance(X, HsiCube):
        return [X]
    if isinstance(X, np.ndarray):
        if X.ndim == 3:
            return [HsiCube(X)]
        if X.ndim == 4:
            return [HsiCube(x) for x in X]
        raise ValueError(f"expected cube(s), got array of shape {X.shape}")
    cubes = [check_cube(x) for x in X]
    if not cubes:
        raise ValueError("no cubes given")
    shapes = {c.shape for c in cubes}
    if len(shapes) != 1:
        raise ValueError(f"cubes have differing shapes {sorted(shapes)}")
    return cubes


def check_labels(labels, shape: tuple[int, int]) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != tuple(shape):
        raise ValueError(f"label shape {labels.shape} does not match cube shape {tuple(shape)}")
    if not np.issubdtype(labels.dtype, np.integer):
        if not np.all(labels == np.round(labels)):
            raise ValueError("labels must be integers")
        labels = labels.astype(np.int64)
    return labels
