import numpy as np
import pytest
import torch

from dnsslam.encoding import DIAGNOSTICS, HashGrid, OneBlobConfig, hash_index, oneblob_encode


def test_oneblob_rows_sum_to_one_and_peak_at_bin():
    cfg = OneBlobConfig(8)
    x = torch.tensor([[0.0625, 0.5, 0.99]], dtype=torch.float64)
    enc = oneblob_encode(x, cfg).reshape(3, 8)
    assert torch.allclose(enc.sum(-1), torch.ones(3, dtype=torch.float64))
    assert enc[0].argmax() == 0 and enc[2].argmax() == 7


def test_oneblob_clamps_and_counts():
    DIAGNOSTICS.clear()
    cfg = OneBlobConfig(4)
    a = oneblob_encode(torch.tensor([[1.5, 0.2, -0.1]], dtype=torch.float64), cfg)
    b = oneblob_encode(torch.tensor([[1.0, 0.2, 0.0]], dtype=torch.float64), cfg)
    assert torch.equal(a, b)
    assert DIAGNOSTICS["oneblob_clamped"] == 1
    with pytest.raises(ValueError):
        OneBlobConfig(1)


def test_hash_index_dense_and_hashed():
    cell = torch.tensor([[1, 2, 3]])
    assert int(hash_index(4, cell, 64)) == 1 + 2 * 4 + 3 * 16
    h = int(hash_index(100, cell, 64))
    assert 0 <= h < 64
    assert h == (1 ^ (2 * 2654435761) ^ (3 * 805459861)) & 63
    with pytest.raises(ValueError):
        hash_index(4, cell, 60)


def reference_forward(grid: HashGrid, x: torch.Tensor) -> torch.Tensor:
    """Per-level, per-corner loop used to check the vectorised lookup."""
    outs = []
    tables = grid.tables.reshape(grid.levels, grid.table_size, grid.features_per_level)
    for lvl, res in enumerate(grid.resolutions):
        pos = x * res
        cell = pos.floor().long().clamp(0, res - 1)
        frac = pos - cell
        acc = 0
        for corner in range(8):
            off = torch.tensor([(corner >> 2) & 1, (corner >> 1) & 1, corner & 1])
            w = torch.prod(torch.where(off.bool(), frac, 1 - frac), -1)
            idx = hash_index(res + 1, cell + off, grid.table_size)
            acc = acc + w[:, None] * tables[lvl, idx]
        outs.append(acc)
    return torch.cat(outs, -1)


def test_vectorised_grid_matches_reference():
    grid = HashGrid(4, 4, 64, 2, 2**9, seed=3)
    with torch.no_grad():
        grid.tables.normal_()
    x = torch.rand(200, 3, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
    assert torch.allclose(grid(x), reference_forward(grid, x), atol=1e-12)


def test_grid_interpolates_exactly_at_vertices_and_is_continuous():
    grid = HashGrid(2, 4, 8, 2, 2**12, seed=0)
    with torch.no_grad():
        grid.tables.normal_()
    x = torch.tensor([[0.25, 0.5, 0.75]], dtype=torch.float64)
    eps = 1e-9
    a = grid(x - eps)
    b = grid(x + eps)
    assert torch.allclose(a, b, atol=1e-7)


def test_grid_gradients_reach_tables_and_inputs():
    grid = HashGrid(3, 4, 32, 2, 2**10, seed=1)
    x = torch.rand(10, 3, dtype=torch.float64, requires_grad=True)
    grid(x).square().sum().backward()
    assert grid.tables.grad is not None and grid.tables.grad.abs().sum() > 0
    assert x.grad is not None


def test_grid_rejects_nan_tables():
    grid = HashGrid(2, 4, 8, 2, 2**8)
    with torch.no_grad():
        grid.tables[0, 0] = float("nan")
    with pytest.raises(FloatingPointError):
        grid(torch.rand(3, 3, dtype=torch.float64))


def test_grid_resolutions_are_geometric():
    grid = HashGrid(5, 16, 256, 2, 2**12)
    r = np.asarray(grid.resolutions, dtype=float)
    assert r[0] == 16 and r[-1] == 256
    ratios = r[1:] / r[:-1]
    assert np.allclose(ratios, ratios[0], rtol=0.1)
