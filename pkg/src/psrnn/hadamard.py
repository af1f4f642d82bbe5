"""Hadamard transform, SATD, and the smoothed SATD gradient.

SATD of a residue block D is the L1 norm of its two-sided Hadamard
transform D' = H D H (H is symmetric, so the transposed form is the same
matrix). Residues larger than the transform order are tiled into
non-overlapping partition x partition blocks in raster order, matching how
encoders apply it, and the per-tile values are summed.

The absolute value has no derivative at zero, so the training gradient uses
a smoothed surrogate: |v| ~ sqrt(v^2 + eps). Differentiating the tile loss
through the transform gives

    dS/dD[k, l] = sum_ij D'[i, j] / sqrt(D'[i, j]^2 + eps) * H[i, k] * H[j, l]

which in matrix form is H G H with G = D' / sqrt(D'^2 + eps). All of this
runs in float64 internally.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import PartitionError, ShapeError


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def hadamard_matrix(order: int) -> np.ndarray:
    """Sylvester-recursive Hadamard matrix of the given power-of-two order.

    Entries are int64 in {-1, +1}; H @ H.T == order * I exactly.
    """
    if not _is_pow2(order):
        raise ShapeError(f"Hadamard order must be a power of two >= 1, got {order}")
    h = np.array([[1]], dtype=np.int64)
    while h.shape[0] < order:
        h = np.block([[h, h], [h, -h]])
    return h


@dataclass(frozen=True)
class SatdConfig:
    """Tiling and smoothing parameters for the SATD loss.

    partition is the Hadamard block size (4 keeps every block size from 4
    to 32 divisible and matches the smallest prediction unit); epsilon is
    the gradient smoothing term. The loss is not normalized by pixel count;
    its scale is absorbed by the learning rate.
    """

    partition: int = 4
    epsilon: float = 1e-8

    def __post_init__(self):
        if not _is_pow2(self.partition):
            raise ShapeError(f"partition must be a power of two, got {self.partition}")
        if not self.epsilon > 0:
            raise ShapeError(f"epsilon must be positive, got {self.epsilon}")


def hadamard_transform(d: np.ndarray, h: np.ndarray) -> np.ndarray:
    """Two-sided transform H @ D @ H of a square residue block, in float64."""
    if d.ndim != 2 or d.shape[0] != d.shape[1]:
        raise ShapeError(f"residue block must be square rank-2, got {d.shape}")
    if d.shape[0] != h.shape[0]:
        raise ShapeError(f"block size {d.shape[0]} != transform order {h.shape[0]}")
    hf = h.astype(np.float64)
    return hf @ d.astype(np.float64) @ hf


def _tiles(d: np.ndarray, p: int):
    if d.ndim != 2:
        raise ShapeError(f"residue must be rank-2, got shape {d.shape}")
    rows, cols = d.shape
    if rows % p or cols % p:
        raise PartitionError(f"residue {d.shape} not divisible by partition {p}")
    for i in range(0, rows, p):
        for j in range(0, cols, p):
            yield i, j, d[i : i + p, j : j + p]


def satd(d: np.ndarray, cfg: SatdConfig = SatdConfig()) -> float:
    """Sum of absolute transformed differences over raster-order tiles."""
    h = hadamard_matrix(cfg.partition).astype(np.float64)
    total = 0.0
    for _, _, tile in _tiles(d, cfg.partition):
        total += float(np.abs(h @ tile.astype(np.float64) @ h).sum())
    return total


def satd_smooth(d: np.ndarray, cfg: SatdConfig = SatdConfig()) -> float:
    """The eps-smoothed objective whose exact gradient is satd_loss_grad."""
    h = hadamard_matrix(cfg.partition).astype(np.float64)
    total = 0.0
    for _, _, tile in _tiles(d, cfg.partition):
        t = h @ tile.astype(np.float64) @ h
        total += float(np.sqrt(t * t + cfg.epsilon).sum())
    return total


def satd_loss_grad(d: np.ndarray, cfg: SatdConfig = SatdConfig()) -> np.ndarray:
    """Gradient of the smoothed SATD with respect to every residue entry."""
    grad = satd_loss_grad64(np.asarray(d, dtype=np.float64), cfg)
    return grad.astype(np.float32)


def satd_loss_grad64(d: np.ndarray, cfg: SatdConfig = SatdConfig()) -> np.ndarray:
    h = hadamard_matrix(cfg.partition).astype(np.float64)
    p = cfg.partition
    grad = np.zeros(d.shape, dtype=np.float64)
    for i, j, tile in _tiles(d, p):
        t = h @ tile.astype(np.float64) @ h
        g = t / np.sqrt(t * t + cfg.epsilon)
        grad[i : i + p, j : j + p] = h @ g @ h
    return grad


def satd_batch(d: np.ndarray, cfg: SatdConfig = SatdConfig()) -> np.ndarray:
    """Per-sample SATD for a (b, n, n) stack of residues, in float64."""
    h = hadamard_matrix(cfg.partition).astype(np.float64)
    t = _transform_tiles_batch(d, h, cfg.partition)
    return np.abs(t).sum(axis=(1, 2, 3, 4))


def satd_loss_grad_batch(d: np.ndarray, cfg: SatdConfig = SatdConfig()) -> np.ndarray:
    """Smoothed-SATD gradients for a (b, n, n) stack of residues."""
    h = hadamard_matrix(cfg.partition).astype(np.float64)
    p = cfg.partition
    t = _transform_tiles_batch(d, h, p)
    g = t / np.sqrt(t * t + cfg.epsilon)
    gd = np.einsum("ik,boukl,lj->bouij", h, g, h, optimize=True)
    b = d.shape[0]
    n_r, n_c = d.shape[1] // p, d.shape[2] // p
    return gd.transpose(0, 1, 3, 2, 4).reshape(b, n_r * p, n_c * p)


def _transform_tiles_batch(d: np.ndarray, h: np.ndarray, p: int) -> np.ndarray:
    if d.ndim != 3:
        raise ShapeError(f"expected (b, n, n) residues, got {d.shape}")
    b, rows, cols = d.shape
    if rows % p or cols % p:
        raise PartitionError(f"residues {d.shape[1:]} not divisible by partition {p}")
    tiles = (
        d.astype(np.float64)
        .reshape(b, rows // p, p, cols // p, p)
        .transpose(0, 1, 3, 2, 4)
    )
    return np.einsum("ik,boukl,lj->bouij", h, tiles, h, optimize=True)
