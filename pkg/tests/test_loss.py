import math

import pytest
import torch

from dnsslam.loss import (LossLog, LossWeights, freespace_loss, geometry_loss, latent_loss, mapping_loss,
                          occupancy_loss, occupancy_target, photometric_loss, semantic_loss, tracking_geometry_loss,
                          tracking_loss)
from gradsuite import COMBOS, check_case


def t(x):
    return torch.tensor(x, dtype=torch.float64)


def test_occupancy_target_closed_form():
    s = 0.03125  # dyadic, so 2.0 +- s is exact
    assert occupancy_target(2.0, 2.0, s) == 1.0
    assert occupancy_target(2.0 + s, 2.0, s) == pytest.approx(math.exp(-0.5), abs=1e-12)
    assert occupancy_target(2.0 - s, 2.0, s) == occupancy_target(2.0 + s, 2.0, s)
    v = occupancy_target(t([1.9, 2.0, 2.1]), t(2.0), s)
    assert torch.allclose(v[0], v[2]) and v[1] == 1.0


def test_geometry_loss_ignores_holes():
    assert geometry_loss(t([1.0, 5.0]), t([1.5, 0.0])).item() == 0.5


def test_photometric_and_semantic():
    assert photometric_loss(t([[0.0, 0.0, 0.0]]), t([[1.0, 1.0, 0.0]])).item() == 2.0
    logits = t([[0.0, 0.0]])
    assert semantic_loss(logits, [1]).item() == pytest.approx(math.log(2))
    with pytest.raises(ValueError):
        semantic_loss(logits, [2])


def test_latent_loss_detaches_fine_side():
    hf = t([[3.0, 4.0]]).requires_grad_(True)
    hc = t([[0.0, 0.0]]).requires_grad_(True)
    loss = latent_loss(hf, hc)
    assert loss.item() == 5.0
    loss.backward()
    assert hf.grad is None and hc.grad is not None


def test_occupancy_and_freespace_bands():
    w = LossWeights(tr=0.1)
    depths = t([[0.5, 0.95, 1.0, 1.3]])
    occ = t([[0.2, 0.5, 1.0, 0.9]])
    gt = t([1.0])
    target = math.exp(-0.5 * (0.05 / w.sigma) ** 2)
    expect = ((target - 0.5) ** 2 + 0.0) / 2
    assert occupancy_loss(occ, depths, gt, w).item() == pytest.approx(expect)
    assert freespace_loss(occ, depths, gt, 0.1).item() == pytest.approx(0.04)
    assert freespace_loss(t([0.5, 0.5])).item() == 0.25


def test_tracking_geometry_normalises_by_std():
    v = tracking_geometry_loss(t([1.0, 2.0]), t([0.25, 1.0]), t([1.5, 0.0]))
    assert v.item() == pytest.approx(1.0)


def test_weighted_sums():
    w = LossWeights()
    terms = {k: t(1.0) for k in ("geo", "photo", "sem", "latent", "occ", "fs")}
    assert mapping_loss(terms, w).item() == pytest.approx(1 + 3 + 0.1 + 10 + 10 + 5)
    assert tracking_loss(terms, w).item() == pytest.approx(1 + 3 + 0.1)


def test_weights_validation_and_presets():
    with pytest.raises(ValueError):
        LossWeights(lambda_o=-1)
    with pytest.raises(ValueError):
        LossWeights(tr=0)
    assert LossWeights().sigma == pytest.approx(0.1 / 3)
    toy = LossWeights.toy(lambda_p=1.0)
    assert toy.lambda_p == 1.0 and toy.tr == 0.05


def test_loss_log(tmp_path):
    log = LossLog(tmp_path / "l.csv")
    log.record({"geo": t(1.0)})
    log.close()
    assert (tmp_path / "l.csv").read_text().splitlines() == ["iteration,term,value", "0,geo,1"]


@pytest.mark.parametrize("name,target", COMBOS)
def test_gradients_match_finite_differences(name, target):
    assert check_case(3, name, target) <= 1e-4
