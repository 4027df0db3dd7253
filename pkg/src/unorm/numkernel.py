"""Dense numeric substrate shared by every other module.

Matrices are plain 2-D ``float64`` numpy arrays (rows = folded batch B*N,
cols = channels C). Channel vectors are 1-D ``float64`` arrays of length C.
The seeded generator is numpy's PCG64.
"""

from __future__ import annotations

import io
from pathlib import Path
from typing import Callable, Union

import numpy as np

REDUCTIONS = ("mean", "quadratic_mean", "variance")


class ShapeError(ValueError):
    pass


def as_matrix(x, name: str = "x") -> np.ndarray:
    """Validate and return ``x`` as a finite 2-D float64 array."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {a.shape}")
    if a.shape[0] < 1 or a.shape[1] < 1:
        raise ShapeError(f"{name} must have at least one row and column, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite values")
    return a


def as_vector(v, length: int | None = None, name: str = "v") -> np.ndarray:
    a = np.asarray(v, dtype=np.float64)
    if a.ndim != 1:
        raise ShapeError(f"{name} must be 1-D, got shape {a.shape}")
    if length is not None and a.shape[0] != length:
        raise ShapeError(f"{name} has length {a.shape[0]}, expected {length}")
    return a


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 generator; identical seeds give identical streams."""
    return np.random.Generator(np.random.PCG64(seed))


def matmul(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"matmul dimension mismatch: {a.shape[0]}x{a.shape[1]} @ {b.shape[0]}x{b.shape[1]}"
        )
    return a @ b


def column_reduce(x, kind: str) -> np.ndarray:
    """Per-channel reduction over rows.

    ``quadratic_mean`` is the second moment ``mean(x**2)`` (no square root);
    ``variance`` is the biased (divide-by-B) variance.
    """
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"column_reduce needs a 2-D matrix, got {a.shape}")
    if a.shape[0] == 0:
        raise ShapeError("column_reduce over zero rows")
    if kind == "mean":
        return a.mean(axis=0)
    if kind == "quadratic_mean":
        return np.mean(a * a, axis=0)
    if kind == "variance":
        mu = a.mean(axis=0)
        d = a - mu
        return np.mean(d * d, axis=0)
    raise ValueError(f"unknown reduction {kind!r}; expected one of {REDUCTIONS}")


def finite_difference_gradient(
    f: Callable[[np.ndarray], float], x, h: float = 1e-5
) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``, one element at a time."""
    if not h > 0:
        raise ValueError("step h must be positive")
    x = np.array(x, dtype=np.float64, copy=True)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ValueError(f"f returned a non-finite value at element {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(a, b, floor: float = 1e-12) -> float:
    """max |a-b| / max(|b|_inf, floor), a scale-aware comparison for gradients."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(float(np.max(np.abs(b))) if b.size else 0.0, floor)
    return float(np.max(np.abs(a - b))) / scale if a.size else 0.0


# --- CSV matrix format: header line "rows,cols", then one row per line ---

def matrix_to_csv(x) -> str:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError("only 2-D matrices serialize to CSV")
    lines = [f"{a.shape[0]},{a.shape[1]}"]
    lines += [",".join(repr(float(v)) for v in row) for row in a]
    return "\n".join(lines) + "\n"


def matrix_from_csv(text: str) -> np.ndarray:
    buf = io.StringIO(text)
    header = buf.readline().strip()
    try:
        rows, cols = (int(t) for t in header.split(","))
    except ValueError as exc:
        raise ValueError(f"bad matrix CSV header {header!r}") from exc
    body = [ln for ln in buf.read().splitlines() if ln.strip()]
    if len(body) != rows:
        raise ShapeError(f"header says {rows} rows, found {len(body)}")
    data = np.array([[float(t) for t in ln.split(",")] for ln in body], dtype=np.float64)
    if data.shape != (rows, cols):
        raise ShapeError(f"header says {rows}x{cols}, parsed {data.shape}")
    return data


def save_matrix(path: Union[str, Path], x) -> None:
    Path(path).write_text(matrix_to_csv(x))


def load_matrix(path: Union[str, Path]) -> np.ndarray:
    return matrix_from_csv(Path(path).read_text())
