import numpy as np
import pytest
import torch

from flowfit.flowloss import (FLOW_SCALE_FLOOR, bidirectional_flow_loss,
                              directional_flow_loss, keypoint_2d_loss,
                              sample_flow, scale_loss, threshold_residuals)
from flowfit.render import FlowMap


def random_flow(rng, H=32, W=32, scale=3.0, valid_frac=0.9):
    return FlowMap(dx=rng.normal(0, scale, (H, W)).astype(np.float32),
                   dy=rng.normal(0, scale, (H, W)).astype(np.float32),
                   valid=(rng.random((H, W)) < valid_frac).astype(np.uint8))


def oracle_weak_label_loss(proj_1, proj_2, flow, visible, threshold):
    """Independent point-to-point form: target p2~ = p1 + OF[p1], loss is the
    mean distance |p2 - p2~| with the same mask, threshold and no scaling."""
    values, ok = sample_flow(flow, torch.as_tensor(proj_1))
    values = values.numpy()
    mask = visible & ok.numpy()
    weak = proj_1 + values
    dist = np.linalg.norm(proj_2 - weak, axis=1)
    if threshold and mask.any():
        thr = np.linalg.norm(values[mask], axis=1).max()
        mask = mask & (dist <= thr)
    if not mask.any():
        return 0.0
    return float(dist[mask].mean())


def test_directional_equals_weak_label_form():
    rng = np.random.default_rng(0)
    for trial in range(100):
        flow = random_flow(rng)
        n = 60
        p1 = rng.uniform(-2, 34, (n, 2))
        p2 = p1 + rng.normal(0, 2.0, (n, 2))
        vis = rng.random(n) < 0.8
        term = directional_flow_loss(torch.as_tensor(p1), torch.as_tensor(p2),
                                     flow, torch.as_tensor(vis))
        ref = oracle_weak_label_loss(p1, p2, flow, vis, threshold=True)
        assert abs(float(term.loss) - ref) <= 1e-9


def test_bilinear_sample_exact_at_centers_and_midpoints():
    dx = np.arange(16, dtype=np.float32).reshape(4, 4)
    flow = FlowMap(dx=dx, dy=2.0 * dx, valid=np.ones((4, 4), np.uint8))
    pts = torch.tensor([[1.5, 1.5],    # center of pixel (1,1) -> value 5
                        [2.0, 1.5],    # midpoint between (1,1) and (1,2)
                        [1.5, 2.0]])   # midpoint between (1,1) and (2,1)
    values, ok = sample_flow(flow, pts)
    assert ok.all()
    assert torch.allclose(values[:, 0], torch.tensor([5.0, 5.5, 7.0]))
    assert torch.allclose(values[:, 1], 2.0 * values[:, 0])


def test_sample_flow_boundary_and_validity():
    flow = FlowMap(dx=np.ones((8, 8), np.float32), dy=np.ones((8, 8), np.float32),
                   valid=np.ones((8, 8), np.uint8))
    flow.valid[3, 3] = 0
    pts = torch.tensor([
        [0.4, 4.0],   # support column -1 -> out of bounds
        [7.6, 4.0],   # support column 7.1 -> out of bounds
        [4.0, 0.2],
        [3.2, 3.2],   # touches the invalid pixel
        [5.5, 5.5],   # interior, fully valid
    ])
    _, ok = sample_flow(flow, pts)
    assert ok.tolist() == [False, False, False, False, True]


def test_sample_flow_gradient_flows_through_points():
    rng = np.random.default_rng(1)
    flow = random_flow(rng, 16, 16)
    pts = torch.tensor([[5.3, 7.1], [8.9, 3.2]], dtype=torch.float64,
                       requires_grad=True)
    values, ok = sample_flow(flow, pts)
    values.sum().backward()
    assert ok.all()
    assert pts.grad is not None and pts.grad.abs().sum() > 0


def test_threshold_drops_only_outliers():
    rnorm = torch.tensor([0.5, 1.0, 9.0, 2.0])
    fnorm = torch.tensor([1.0, 3.0, 2.0, 2.5])
    mask = torch.tensor([True, True, True, False])
    keep, clipped = threshold_residuals(rnorm, fnorm, mask)
    # threshold = max masked flow norm = 3.0; only the 9.0 residual goes
    assert keep.tolist() == [True, True, False, False]
    assert clipped.tolist() == [False, False, True, False]
    keep2, clipped2 = threshold_residuals(rnorm, fnorm, torch.zeros(4, dtype=torch.bool))
    assert not keep2.any() and not clipped2.any()


def test_scale_loss_floor():
    loss = torch.tensor(2.0)
    assert float(scale_loss(loss, 4.0)) == pytest.approx(0.5)
    # below the floor the divisor saturates at FLOW_SCALE_FLOOR
    assert float(scale_loss(loss, 0.001)) == pytest.approx(2.0 / FLOW_SCALE_FLOOR)
    assert float(scale_loss(loss, 0.0)) == pytest.approx(20.0)


def test_bidirectional_symmetry_and_report():
    rng = np.random.default_rng(2)
    for _ in range(20):
        fwd = random_flow(rng)
        bwd = random_flow(rng)
        n = 50
        p1 = torch.as_tensor(rng.uniform(2, 30, (n, 2)))
        p2 = torch.as_tensor(rng.uniform(2, 30, (n, 2)))
        v1 = rng.random(n) < 0.9
        v2 = rng.random(n) < 0.9
        la, ra = bidirectional_flow_loss(p1, p2, fwd, bwd, v1, v2)
        lb, rb = bidirectional_flow_loss(p2, p1, bwd, fwd, v2, v1)
        assert float(la) == float(lb)
        assert ra.loss == pytest.approx((ra.loss_1to2 + ra.loss_2to1) / 2, abs=1e-12)
        assert ra.visible_count_1to2 == rb.visible_count_2to1
        assert ra.mean_flow_norm == rb.mean_flow_norm


def test_missing_backward_flow_degrades_gracefully():
    rng = np.random.default_rng(3)
    fwd = random_flow(rng)
    p1 = torch.as_tensor(rng.uniform(2, 30, (40, 2)))
    p2 = torch.as_tensor(rng.uniform(2, 30, (40, 2)))
    loss, rep = bidirectional_flow_loss(p1, p2, fwd, None)
    assert rep.missing_backward
    assert rep.visible_count_2to1 == 0
    assert float(loss) == pytest.approx(rep.loss_1to2)


def test_empty_mask_zero_loss_and_flag():
    rng = np.random.default_rng(4)
    fwd = random_flow(rng)
    bwd = random_flow(rng)
    p1 = torch.as_tensor(rng.uniform(100, 200, (30, 2)))  # fully off-frame
    p2 = torch.as_tensor(rng.uniform(100, 200, (30, 2)))
    loss, rep = bidirectional_flow_loss(p1, p2, fwd, bwd)
    assert float(loss) == 0.0
    assert rep.empty_mask
    assert rep.visible_count_1to2 == 0 and rep.visible_count_2to1 == 0


def test_loss_differentiable_wrt_both_projections():
    rng = np.random.default_rng(5)
    fwd = random_flow(rng)
    bwd = random_flow(rng)
    p1 = torch.tensor(rng.uniform(4, 28, (40, 2)), requires_grad=True)
    p2 = torch.tensor(rng.uniform(4, 28, (40, 2)), requires_grad=True)
    loss, _ = bidirectional_flow_loss(p1, p2, fwd, bwd)
    loss.backward()
    assert p1.grad.abs().sum() > 0
    assert p2.grad.abs().sum() > 0


def test_keypoint_loss_weighted_mean():
    pred = torch.tensor([[0.0, 0.0], [3.0, 4.0], [1.0, 1.0]])
    ref = torch.tensor([[0.0, 1.0], [0.0, 0.0], [1.0, 1.0]])
    conf = torch.tensor([1.0, 0.5, 0.0])
    loss, degenerate = keypoint_2d_loss(pred, ref, conf)
    # distances 1, 5, irrelevant; weighted mean = (1*1 + 0.5*5) / 1.5
    assert float(loss) == pytest.approx(3.5 / 1.5)
    assert not degenerate
    zero, flag = keypoint_2d_loss(pred, ref, torch.zeros(3))
    assert float(zero) == 0.0 and flag
