"""Numbered acceptance criteria.

Each test carries ``@pytest.mark.acceptance(n, title)``; the conftest prints
one PASS/FAIL line per criterion at the end of the run.
"""

import math
from fractions import Fraction

import numpy as np
import pytest
import torch

from drivesod.dataset import ObjectInstance, aam, dataset_stats, object_saliency, select_salient
from drivesod.decoder import PredictionBundle
from drivesod.metrics import f_beta, image_metrics, mae, s_measure, weighted_f_beta
from drivesod.model import ABLATIONS, ModelConfig, ablation_config, build_model, count_parameters, forward, \
    infer, to_tensor
from drivesod.registry import BenchmarkRegistry
from drivesod.supervision import total_loss
from drivesod.synthetic import synthetic_scenes
from drivesod.training import TrainConfig, general_hash, grad_check, train_two_stage
from drivesod.transfer import AKTUnit, akt_transfer, attention_map, channel_softmax_gap, spatial_softmax
from oracles import loop_f_beta, loop_mae, loop_s_measure, loop_weighted_f_beta


@pytest.mark.acceptance(1, "attention distributions sum to one")
def test_attention_invariants(stopwatch):
    rng = np.random.default_rng(100)
    for _ in range(100):
        c, h, w = (int(v) for v in rng.integers(1, 17, size=3))
        f = torch.from_numpy(rng.normal(scale=rng.uniform(0.1, 20), size=(c, h, w))).float()
        assert torch.all((spatial_softmax(f).sum(dim=(-2, -1)) - 1).abs() <= 1e-5)
        assert abs(float(channel_softmax_gap(f).sum()) - 1) <= 1e-5
        assert abs(float(attention_map(f).sum()) - 1) <= 1e-5
    assert stopwatch() < 10


@pytest.mark.acceptance(2, "zero residual transfer is the identity")
def test_zero_residual_identity(stopwatch):
    torch.manual_seed(2)
    for c in (3, 16, 64):
        task = torch.randn(2, c, 6, 10)
        assert torch.equal(akt_transfer(torch.randn(2, c, 6, 10), task, AKTUnit(c)), task)
    x = torch.randn(2, 3, 32, 64)
    pairs = (("Baseline", "Baseline + AKT"), ("Baseline + BFD", "Ours"))
    for without, with_akt in pairs:
        a = build_model(ablation_config(without), seed=5).eval()
        b = build_model(ablation_config(with_akt), seed=5).eval()
        with torch.no_grad():
            for ma, mb in zip(forward(a, x).maps(), forward(b, x).maps()):
                assert (ma - mb).abs().max() <= 1e-5
    assert stopwatch() < 30


@pytest.mark.acceptance(3, "analytic gradients match central differences")
def test_gradient_fidelity(stopwatch):
    model = build_model(ModelConfig(input_height=16, input_width=32), seed=0)
    gen = torch.Generator().manual_seed(3)
    with torch.no_grad():
        # the zero-initialized residual output would otherwise hide AKT and general gradients
        for unit in model.akt:
            unit.expand.weight.copy_(0.1 * torch.randn(unit.expand.weight.shape, generator=gen))
    scenes = synthetic_scenes(2, size=(16, 32), seed=3)
    x = torch.cat([to_tensor(img) for img, _ in scenes])
    g0 = torch.stack([torch.from_numpy(m.astype(np.float64))[None] for _, m in scenes])
    res = grad_check(model, x, g0, epsilon=1e-5, samples_per_group=200)
    assert all(n >= 200 for n in res.n_checked.values()), res.n_checked
    assert set(res.per_group) == {"general", "akt", "task", "decoder"}
    assert res.max_rel_error < 1e-3, res
    assert stopwatch() < 300


@pytest.mark.acceptance(4, "loss of half predictions counts the supervised terms")
def test_analytic_loss_values():
    maps = [torch.full((2, 1, 16, 32), 0.5, dtype=torch.float64) for _ in range(5)]
    g0 = (torch.rand(2, 1, 16, 32) > 0.5).double()
    full = PredictionBundle(m0=maps, m_b=list(maps), m_i=list(maps))
    assert abs(float(total_loss(full, g0)) - 15 * math.log(2)) <= 1e-6
    assert abs(float(total_loss(PredictionBundle(m0=maps), g0)) - 5 * math.log(2)) <= 1e-6


def _exact_score(density, mask):
    # rational arithmetic: (1 + 1/|O|) * sum over the object's pixels
    total = Fraction(0)
    n = 0
    for i in range(len(mask)):
        for j in range(len(mask[0])):
            if mask[i][j]:
                total += Fraction(density[i][j])
                n += 1
    return (1 + Fraction(1, n)) * total


@pytest.mark.acceptance(5, "object saliency equals the brute-force oracle")
def test_object_saliency_oracle(stopwatch):
    rng = np.random.default_rng(5)
    for _ in range(20):
        # dyadic densities and power-of-two object sizes keep every step exact in floating point
        density = rng.integers(0, 1024, size=(10, 10)) / 1024.0
        n = int(2 ** rng.integers(0, 7))
        mask = np.zeros(100, dtype=bool)
        mask[rng.choice(100, size=n, replace=False)] = True
        mask = mask.reshape(10, 10)
        got = object_saliency(ObjectInstance.from_mask(1, mask), [density])
        assert Fraction(got) == _exact_score(density.tolist(), mask.tolist())
    density = np.zeros((2, 2))
    density[[0, 0, 1, 1], [0, 1, 0, 1]] = [0.1, 0.2, 0.3, 0.4]
    assert object_saliency(ObjectInstance.from_mask(1, np.ones((2, 2))), [density]) == pytest.approx(1.25, abs=1e-12)
    for _ in range(20):
        scores = {k: float(v) for k, v in enumerate(rng.uniform(0, 1, size=6))}
        for k in (0.001, 0.37, 3.0, 1e4):
            assert select_salient(scores) == select_salient({i: v * k for i, v in scores.items()})
    assert stopwatch() < 5


@pytest.mark.acceptance(6, "metrics equal the loop references")
def test_metric_oracles(stopwatch):
    rng = np.random.default_rng(6)
    for _ in range(50):
        gt = rng.uniform(size=(8, 8)) > rng.uniform(0.3, 0.8)
        gt[rng.integers(8), rng.integers(8)] = True
        gt[rng.integers(8), rng.integers(8)] = False
        pred = np.clip(0.5 * gt + rng.uniform(-0.3, 0.6, (8, 8)), 0, 1)
        p, g = pred.tolist(), gt.tolist()
        assert abs(mae(pred, gt) - loop_mae(p, g)) <= 1e-6
        assert abs(f_beta(pred, gt) - loop_f_beta(p, g)) <= 1e-6
        assert abs(weighted_f_beta(pred, gt) - loop_weighted_f_beta(p, g)) <= 1e-6
        assert abs(s_measure(pred, gt) - loop_s_measure(p, g)) <= 1e-6
    gt = np.zeros((8, 8), dtype=bool)
    gt[2:6, 3:7] = True
    m = image_metrics(gt.astype(float), gt)
    assert m["mae"] == 0
    assert m["f_beta"] == pytest.approx(1, abs=1e-12)
    assert m["weighted_f_beta"] == pytest.approx(1, abs=1e-12)
    assert m["s_measure"] == pytest.approx(1, abs=1e-12)
    assert stopwatch() < 60


@pytest.mark.acceptance(7, "two-stage training overfits 8 synthetic scenes")
def test_overfit_smoke(stopwatch):
    torch.set_num_threads(1)
    task = synthetic_scenes(8, size=(32, 64), seed=1, domain="task")
    general = synthetic_scenes(8, size=(32, 64), seed=2, domain="general")
    model = build_model(ModelConfig(input_height=32, input_width=64), seed=0)
    g_cfg = TrainConfig.desk("general", iterations=200)
    t_cfg = TrainConfig.desk("task", iterations=1500)
    assert g_cfg.iterations + t_cfg.iterations <= 2000
    first, second = train_two_stage(g_cfg, t_cfg, general, task, model)
    assert first is not None
    assert second.general_hash_before == second.general_hash_after == general_hash(model)
    assert second.probe_final < second.probe_initial
    err = float(np.mean([mae(infer(model, img), mask > 0) for img, mask in task]))
    print(f"training-set MAE {err:.4f}")
    assert err < 0.05
    assert stopwatch() < 15 * 60


@pytest.mark.acceptance(8, "every ablation builds, trains one step and evaluates")
def test_ablation_harness():
    general = synthetic_scenes(4, size=(16, 32), seed=2, domain="general")
    task = synthetic_scenes(4, size=(16, 32), seed=1, domain="task")
    counts = {}
    for name in ABLATIONS:
        model = build_model(ablation_config(name, ModelConfig(input_height=16, input_width=32)), seed=0)
        counts[name] = count_parameters(model)
        kw = dict(iterations=1, batch_size=2, resolution=(16, 32))
        _, second = train_two_stage(TrainConfig.desk("general", **kw), TrainConfig.desk("task", **kw),
                                    general, task, model)
        assert len(second.losses) == 1 and math.isfinite(second.losses[0])
        for img, mask in task[:2]:
            metrics = image_metrics(infer(model, img), mask > 0)
            assert all(0 <= v <= 1 for v in metrics.values()), (name, metrics)
    assert counts["Baseline"] < counts["Baseline + AKT"] < counts["Ours"]


BLOBS = [
    [],
    [(0, 0, 2)],
    [(0, 0, 4)],
    [(0, 0, 3), (5, 5, 3)],
    [(0, 0, 4), (0, 5, 4), (5, 0, 4)],
    [(0, 0, 4), (0, 5, 4), (5, 0, 4), (5, 5, 4)],
    [(0, 0, 10)],
    [(0, 0, 1)],
    [(2, 2, 5)],
    [(0, 0, 2), (5, 5, 2)],
]


@pytest.mark.acceptance(9, "dataset statistics match hand counts")
def test_dataset_statistics():
    masks = []
    for blobs in BLOBS:
        m = np.zeros((10, 10), dtype=np.uint8)
        for r, c, s in blobs:
            m[r:r + s, c:c + s] = 1
        masks.append(m)
    stats = dataset_stats(masks)
    # objects per image: 0,1,1,2,3,4,1,1,1,2
    assert stats.count_hist.tolist() == [1, 5, 2, 1, 1]
    # area fractions: 0, .04, .16, .18, .48, .64, 1, .01, .25, .08
    assert stats.area_hist.tolist() == [4, 2, 1, 0, 1, 0, 1, 0, 0, 1]
    assert stats.count_hist.sum() == 10 and stats.area_hist.sum() == 10
    np.testing.assert_allclose(aam([masks[8]], (10, 10)), masks[8].astype(float), atol=1e-12)


TABLE_ROWS = {
    ("Ours", "after"): ("0.133", "0.751", "0.811", "0.785"),
    ("R3Net†", "before"): ("0.392", "0.074", "0.153", "0.292"),
    ("R3Net†", "after"): ("0.140", "0.741", "0.805", "0.760"),
    ("Baseline", "after"): ("0.149", "0.721", "0.796", "0.770"),
    ("Baseline + PT", "after"): ("0.143", "0.726", "0.797", "0.772"),
    ("Baseline + AKT", "after"): ("0.141", "0.735", "0.810", "0.782"),
    ("Baseline + BFD", "after"): ("0.140", "0.737", "0.810", "0.780"),
    ("DSS†", "after"): ("0.155", "0.697", "0.790", "0.767"),
    ("UCF", "before"): ("0.428", "0.208", "0.291", "0.361"),
    ("BANet", "after"): ("0.144", "0.735", "0.805", "0.771"),
}


@pytest.mark.acceptance(10, "registry reproduces the reference rows verbatim")
def test_registry_integrity():
    reg = BenchmarkRegistry.default()
    assert len(reg) == 29
    assert sum(r.phase == "before" for r in reg.rows) == 12
    for (method, phase), cells in TABLE_ROWS.items():
        row = reg.get(method, phase)
        assert row.method == method
        assert row.raw == cells
        assert tuple(row.values().values()) == tuple(float(c) for c in cells)
