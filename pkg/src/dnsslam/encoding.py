"""One-blob encoding and the multiresolution hash feature grid."""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass

import torch
from torch import nn

__all__ = [
    "OneBlobConfig",
    "oneblob_encode",
    "HashGrid",
    "hash_index",
    "PRIMES",
    "DIAGNOSTICS",
]

# XOR-hash primes (first is 1 so consecutive x cells stay coherent)
PRIMES = (1, 2654435761, 805459861)

DIAGNOSTICS: Counter = Counter()


@dataclass(frozen=True)
class OneBlobConfig:
    bins_per_dim: int = 16
    kernel_sigma: float | None = None  # defaults to 1 / bins

    def __post_init__(self):
        if self.bins_per_dim < 2:
            raise ValueError("bins_per_dim must be >= 2")
        if self.kernel_sigma is not None and self.kernel_sigma <= 0:
            raise ValueError("kernel_sigma must be positive")

    @property
    def sigma(self) -> float:
        return self.kernel_sigma if self.kernel_sigma is not None else 1.0 / self.bins_per_dim

    @property
    def out_dim(self) -> int:
        return 3 * self.bins_per_dim


def oneblob_encode(x: torch.Tensor, cfg: OneBlobConfig) -> torch.Tensor:
    """Soft-bin each coordinate of ``x`` (..., 3) in [0, 1] with a Gaussian kernel.

    Each dimension's bin vector sums to one. Inputs outside the unit cube are
    clamped and counted in ``DIAGNOSTICS["oneblob_clamped"]``.
    """
    outside = (x < 0) | (x > 1)
    if bool(outside.any()):
        DIAGNOSTICS["oneblob_clamped"] += int(outside.any(-1).sum())
        x = x.clamp(0.0, 1.0)
    b = cfg.bins_per_dim
    centers = (torch.arange(b, dtype=x.dtype) + 0.5) / b
    z = (x[..., None] - centers) / cfg.sigma
    k = torch.exp(-0.5 * z * z)
    k = k / k.sum(-1, keepdim=True)
    return k.flatten(-2)


def hash_index(resolution: int, cell: torch.Tensor, table_size: int) -> torch.Tensor:
    """Table index of integer grid vertices ``cell`` (..., 3).

    ``resolution`` is the number of grid vertices per axis. Levels with at most
    ``table_size`` vertices use dense row-major indexing, finer levels the
    XOR-of-primes spatial hash masked to ``table_size`` (a power of two).
    """
    if table_size & (table_size - 1):
        raise ValueError("table_size must be a power of two")
    cell = cell.long()
    if resolution**3 <= table_size:
        return cell[..., 0] + cell[..., 1] * resolution + cell[..., 2] * resolution * resolution
    h = cell[..., 0] * PRIMES[0]
    h = h ^ (cell[..., 1] * PRIMES[1])
    h = h ^ (cell[..., 2] * PRIMES[2])
    return h & (table_size - 1)


class HashGrid(nn.Module):
    """Multiresolution grid of trainable features addressed by spatial hashing.

    Level ``l`` has ``floor(base * growth**l)`` cells per axis, growing
    geometrically from ``base_resolution`` to ``max_resolution``.
    """

    def __init__(
        self,
        levels: int = 16,
        base_resolution: int = 16,
        max_resolution: int = 512,
        features_per_level: int = 2,
        table_size: int = 2**15,
        seed: int = 0,
        init_scale: float = 1e-4,
        dtype=torch.float64,
    ):
        super().__init__()
        if table_size & (table_size - 1):
            raise ValueError("table_size must be a power of two")
        if max_resolution < base_resolution:
            raise ValueError("max_resolution must be >= base_resolution")
        self.levels = levels
        self.base_resolution = base_resolution
        self.max_resolution = max_resolution
        self.features_per_level = features_per_level
        self.table_size = table_size
        growth = math.exp((math.log(max_resolution) - math.log(base_resolution)) / max(levels - 1, 1))
        self.resolutions = [int(math.floor(base_resolution * growth**l + 1e-9)) for l in range(levels)]
        self.table_rows = [min(table_size, (r + 1) ** 3) for r in self.resolutions]
        gen = torch.Generator().manual_seed(seed)
        tables = torch.rand(levels, table_size, features_per_level, generator=gen, dtype=dtype)
        self.tables = nn.Parameter((tables * 2 - 1) * init_scale)

    @property
    def out_dim(self) -> int:
        return self.levels * self.features_per_level

    def _level_constants(self):
        if not hasattr(self, "_consts"):
            res = torch.tensor(self.resolutions, dtype=torch.long)
            n_dense = int(((res + 1) ** 3 <= self.table_size).sum())
            strides = torch.stack([torch.ones_like(res), res + 1, (res + 1) ** 2], 1)
            primes = torch.tensor(PRIMES, dtype=torch.long).expand(len(res), 3)
            # dense levels come first since resolution grows monotonically
            mult = torch.cat([strides[:n_dense], primes[n_dense:]])
            offset = torch.arange(self.levels) * self.table_size
            self._consts = (res, n_dense, mult, offset)
        return self._consts

    def corner_indices(self, x: torch.Tensor):
        """Flat table indices (N, L, 8) and trilinear weights (N, L, 8) of the cell corners."""
        res, n_dense, mult, offset = self._level_constants()
        pos = x[:, None, :] * res.to(x.dtype)[None, :, None]
        cell = torch.minimum(pos.detach().floor().long(), (res - 1)[None, :, None]).clamp(min=0)
        frac = pos - cell.to(pos.dtype)
        wts = torch.stack([1 - frac, frac], -1)  # (N, L, 3, 2)
        w = wts[..., 0, :, None, None] * wts[..., 1, None, :, None] * wts[..., 2, None, None, :]
        corner = (cell[..., None] + torch.arange(2)) * mult[None, :, :, None]  # (N, L, 3, 2)
        parts = []
        if n_dense:
            c = corner[:, :n_dense]
            c = c + torch.tensor([1, 0, 0])[:, None] * offset[:n_dense, None, None]
            parts.append(c[..., 0, :, None, None] + c[..., 1, None, :, None] + c[..., 2, None, None, :])
        if n_dense < self.levels:
            c = corner[:, n_dense:]
            h = (c[..., 0, :, None, None] ^ c[..., 1, None, :, None] ^ c[..., 2, None, None, :])
            parts.append((h & (self.table_size - 1)) + offset[n_dense:, None, None, None])
        idx = torch.cat(parts, 1) if len(parts) > 1 else parts[0]
        # corner order is (i, j, k) with k varying fastest
        return idx.flatten(-3), w.flatten(-3)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Features for points ``x`` (N, 3) in the unit cube, shape (N, levels*F)."""
        if bool(torch.isnan(self.tables).any()):
            raise FloatingPointError("NaN in hash grid tables")
        x = x.clamp(0.0, 1.0)
        idx, w = self.corner_indices(x)
        flat = self.tables.reshape(-1, self.features_per_level)
        feats = flat[idx]  # (N, L, 8, F)
        out = (feats * w[..., None]).sum(-2)
        return out.flatten(-2)
