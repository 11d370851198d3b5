import math

import numpy as np
import pytest
import torch
from scipy import ndimage

from drivesod.decoder import PredictionBundle
from drivesod.model import ModelConfig, build_model, forward
from drivesod.supervision import (
    EPS,
    band_width_for,
    bce_loss,
    derive_boundary_interior,
    ground_truth_triple,
    loss_terms,
    total_loss,
)


def loop_bce(p, g, eps=EPS):
    total = 0.0
    for pv, gv in zip(p.ravel(), g.ravel()):
        pv = min(max(pv, eps), 1 - eps)
        total += -(gv * math.log(pv) + (1 - gv) * math.log(1 - pv))
    return total / p.size


def scipy_band(g0, width):
    st = np.ones((2 * width + 1,) * 2, dtype=bool)
    g = g0.astype(bool)
    dil = ndimage.binary_dilation(g, st)
    ero = ndimage.binary_erosion(g, st, border_value=0)
    return dil & ~ero, ero


def test_bce_half_is_ln2():
    p = torch.full((1, 1, 4, 4), 0.5, dtype=torch.float64)
    g = torch.randint(0, 2, (1, 1, 4, 4)).double()
    assert abs(float(bce_loss(p, g)) - math.log(2)) < 1e-12


def test_bce_exact_prediction_near_zero():
    g = torch.tensor([[0.0, 1.0], [1.0, 0.0]], dtype=torch.float64)
    assert abs(float(bce_loss(g.clone(), g)) - (-math.log(1 - EPS))) < 1e-12


def test_bce_matches_loop_oracle():
    rng = np.random.default_rng(0)
    p = rng.uniform(0, 1, (3, 3))
    g = (rng.uniform(size=(3, 3)) > 0.5).astype(float)
    assert abs(float(bce_loss(torch.from_numpy(p), torch.from_numpy(g))) - loop_bce(p, g)) < 1e-9


def test_bce_shape_mismatch():
    with pytest.raises(ValueError):
        bce_loss(torch.rand(2, 2), torch.rand(2, 3))


def test_empty_mask_gives_empty_band():
    g_b, g_i = derive_boundary_interior(torch.zeros(6, 6), 2)
    assert g_b.sum() == 0 and g_i.sum() == 0


def test_full_5x5_mask_hand_traced():
    g_b, g_i = derive_boundary_interior(torch.ones(5, 5), 1)
    expected_i = np.zeros((5, 5))
    expected_i[1:4, 1:4] = 1
    np.testing.assert_array_equal(g_i.numpy(), expected_i)
    np.testing.assert_array_equal(g_b.numpy(), 1 - expected_i)
    assert g_b.sum() == 16


@pytest.mark.parametrize("width", [1, 2, 3])
def test_band_matches_scipy_morphology(width):
    rng = np.random.default_rng(width)
    for _ in range(100):
        g0 = ndimage.binary_opening(rng.uniform(size=(12, 16)) > 0.55).astype(np.float32)
        g_b, g_i = derive_boundary_interior(torch.from_numpy(g0), width)
        ref_b, ref_i = scipy_band(g0, width)
        np.testing.assert_array_equal(g_b.numpy().astype(bool), ref_b)
        np.testing.assert_array_equal(g_i.numpy().astype(bool), ref_i)
        assert not (g_b.numpy().astype(bool) & g_i.numpy().astype(bool)).any()
        assert not (g_i.numpy().astype(bool) & ~g0.astype(bool)).any()
        edges = g0.astype(bool) & ~ndimage.binary_erosion(g0.astype(bool), np.ones((3, 3)), border_value=0)
        assert not (edges & ~g_b.numpy().astype(bool)).any()
        eroded_again = derive_boundary_interior(g_i, width)[1]
        assert not ((eroded_again > 0) & ~(g_i > 0)).any()


def test_band_width_scales_with_resolution():
    assert band_width_for(512) == 2
    assert band_width_for(1024) == 4
    assert band_width_for(64) == 1


def half_bundle(with_boundary=True, shape=(1, 1, 8, 16)):
    maps = [torch.full(shape, 0.5, dtype=torch.float64) for _ in range(5)]
    if with_boundary:
        return PredictionBundle(m0=maps, m_b=[m.clone() for m in maps], m_i=[m.clone() for m in maps])
    return PredictionBundle(m0=maps)


def test_total_loss_half_predictions():
    g0 = (torch.rand(1, 1, 8, 16) > 0.5).double()
    assert abs(float(total_loss(half_bundle(True), g0)) - 15 * math.log(2)) < 1e-9
    assert abs(float(total_loss(half_bundle(False), g0)) - 5 * math.log(2)) < 1e-9


def test_total_loss_matches_term_oracle():
    rng = np.random.default_rng(3)
    g0 = (rng.uniform(size=(1, 1, 8, 16)) > 0.5).astype(float)
    g_b, g_i = scipy_band(g0[0, 0], 1)
    bundle = PredictionBundle(*[[torch.from_numpy(rng.uniform(0.01, 0.99, (1, 1, 8, 16))) for _ in range(5)]
                                for _ in range(3)])
    expected = 0.0
    for i in range(5):
        expected += loop_bce(bundle.m0[i].numpy(), g0)
        expected += loop_bce(bundle.m_b[i].numpy(), g_b.astype(float))
        expected += loop_bce(bundle.m_i[i].numpy(), g_i.astype(float))
    assert abs(float(total_loss(bundle, torch.from_numpy(g0), width=1)) - expected) < 1e-9


def test_missing_stage_rejected():
    b = half_bundle(True)
    b.m_b = b.m_b[:4]
    with pytest.raises(ValueError):
        total_loss(b, torch.zeros(1, 1, 8, 16))


def test_loss_nonnegative_and_step_decreases():
    passed = 0
    for seed in range(10):
        torch.manual_seed(seed)
        model = build_model(ModelConfig(input_height=16, input_width=32), seed)
        x = torch.randn(2, 3, 16, 32)
        gt = ground_truth_triple((torch.rand(2, 1, 16, 32) > 0.6).float())
        loss = total_loss(forward(model, x), gt)
        assert loss.item() >= 0
        model.zero_grad()
        loss.backward()
        with torch.no_grad():
            for p in model.parameters():
                if p.grad is not None:
                    p.sub_(1e-3 * p.grad)
        passed += total_loss(forward(model, x), gt).item() < loss.item()
    assert passed >= 9


def test_loss_terms_keys():
    g0 = torch.zeros(1, 1, 8, 16)
    assert len(loss_terms(half_bundle(True), ground_truth_triple(g0))) == 15
    assert len(loss_terms(half_bundle(False), ground_truth_triple(g0))) == 5
