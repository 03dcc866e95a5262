"""Local spatial auto-correlation statistics on rectangular grids.

Each cell gets a local Moran's I value: its standardized deviation from the
map mean times the sum of standardized deviations over its queen
neighborhood (the up-to-8 cells sharing an edge or corner, clipped at the
map border). Standardization divides by the sample standard deviation; a
zero-variance map yields all-zero statistics by convention so constant
fields pass a neutral signal downstream.

Cells are also classified into LISA quadrants. The interesting ones here
are HL (high value amid low neighbors) and LH (low amid high): the
spatially irregular cells that are hardest to forecast.

All functions share one vectorized code path over (batch, n, m, channels)
stacks, so per-grid and per-volume results are bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError

LABELS = ("HH", "HL", "LH", "LL", "NONE")


@dataclass(frozen=True)
class MoranField:
    """Per-cell local Moran's I for one grid, plus the moments used."""

    n: int
    m: int
    stats: np.ndarray
    mean: float
    sd: float


@dataclass(frozen=True)
class QuadrantMap:
    """Per-cell LISA labels: HH, HL, LH, LL, or NONE on ties/zero variance."""

    n: int
    m: int
    labels: np.ndarray  # dtype <U4


def _as_grid(grid) -> np.ndarray:
    arr = np.asarray(grid, dtype=np.float64)
    if arr.ndim != 2 or arr.size == 0:
        raise ShapeError(f"expected a non-empty 2-D grid, got shape {arr.shape}")
    return arr


def _moments(v: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Standardized deviations per channel; zero where a channel is constant."""
    b, n, m, t = v.shape
    mean = v.mean(axis=(1, 2), keepdims=True)
    if n * m > 1:
        sd = v.std(axis=(1, 2), ddof=1, keepdims=True)
    else:
        sd = np.zeros((b, 1, 1, t))
    dev = np.zeros_like(v)
    np.divide(v - mean, sd, out=dev, where=sd != 0.0)
    return dev, mean, sd


def _queen_sum(dev: np.ndarray) -> np.ndarray:
    """Sum over the 8 queen neighbors of each cell, zero outside the border."""
    b, n, m, t = dev.shape
    padded = np.zeros((b, n + 2, m + 2, t))
    padded[:, 1 : n + 1, 1 : m + 1, :] = dev
    out = np.zeros_like(dev)
    for di in range(3):
        for dj in range(3):
            if di == 1 and dj == 1:
                continue
            out += padded[:, di : di + n, dj : dj + m, :]
    return out


def _neighbor_sum(field: np.ndarray) -> np.ndarray:
    return _queen_sum(field[None, :, :, None])[0, :, :, 0]


def moran_volume(volume: np.ndarray) -> np.ndarray:
    """Local Moran's I over every channel of a (batch, n, m, t) stack."""
    v = np.asarray(volume, dtype=np.float64)
    if v.ndim != 4:
        raise ShapeError(f"expected (batch, n, m, t), got shape {v.shape}")
    if v.shape[1] * v.shape[2] == 0:
        raise ShapeError("empty spatial extent")
    dev, _, _ = _moments(v)
    return dev * _queen_sum(dev)


def local_morans_i(grid) -> MoranField:
    """Local Moran's I statistic for every cell of a grid."""
    arr = _as_grid(grid)
    v = arr[None, :, :, None]
    dev, mean, sd = _moments(v)
    stats = (dev * _queen_sum(dev))[0, :, :, 0]
    return MoranField(arr.shape[0], arr.shape[1], stats, float(mean[0, 0, 0, 0]), float(sd[0, 0, 0, 0]))


def quadrants(grid) -> QuadrantMap:
    """LISA quadrant labels for every cell of a grid.

    Signs are taken from the same standardized deviations the Moran
    statistic uses, so an HL cell always has a non-positive statistic.
    """
    arr = _as_grid(grid)
    v = arr[None, :, :, None]
    dev4, _, sd = _moments(v)
    labels = np.full(arr.shape, "NONE", dtype="<U4")
    if sd[0, 0, 0, 0] != 0.0:
        dev = dev4[0, :, :, 0]
        nbr = _queen_sum(dev4)[0, :, :, 0]
        labels[(dev > 0) & (nbr > 0)] = "HH"
        labels[(dev > 0) & (nbr < 0)] = "HL"
        labels[(dev < 0) & (nbr > 0)] = "LH"
        labels[(dev < 0) & (nbr < 0)] = "LL"
    return QuadrantMap(arr.shape[0], arr.shape[1], labels)
