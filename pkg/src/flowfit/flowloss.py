"""Flow-consistency supervision between two body configurations.

The residual for the 1 -> 2 direction compares model-induced vertex motion
against the flow field:

    r_v = (proj_2[v] - proj_1[v]) - flow_1to2[proj_1[v]]

restricted to vertices visible in both frames whose flow sample is usable.
The bidirectional loss averages the two directions.  Two robustness passes
sit on top: residuals larger than the biggest sampled flow magnitude are
dropped (occlusion/boundary outliers), and the loss is divided by the mean
sampled flow magnitude so fast and slow pairs weigh alike, with a 0.1 px
floor so near-static pairs cannot blow up.

Gradients flow through both projections, including through the bilinear
sample location; the flow maps themselves are constant data.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .render import FlowMap

FLOW_SCALE_FLOOR = 0.1  # pixels


def _flow_tensors(flow, dtype) -> tuple:
    """Normalize a FlowMap (or (H, W, 2)+valid pair of arrays) to tensors."""
    if isinstance(flow, FlowMap):
        data = np.stack([flow.dx, flow.dy], axis=-1)
        valid = flow.valid.astype(bool)
        return torch.as_tensor(data, dtype=dtype), torch.as_tensor(valid)
    data, valid = flow
    return (torch.as_tensor(data, dtype=dtype),
            torch.as_tensor(np.asarray(valid).astype(bool)))


def sample_flow(flow, points: torch.Tensor) -> tuple:
    """Bilinear flow lookup at continuous pixel positions.

    points: (V, 2) in pixel coordinates (values live at pixel centers).
    Returns (values (V, 2), ok (V,) bool); ok requires all four support
    pixels to be inside the frame and marked valid.  values are
    differentiable w.r.t. points.
    """
    data, valid = _flow_tensors(flow, points.dtype)
    H, W = valid.shape
    u = points[:, 0] - 0.5
    v = points[:, 1] - 0.5
    j0 = torch.floor(u.detach()).long()
    i0 = torch.floor(v.detach()).long()
    ok = (j0 >= 0) & (j0 + 1 <= W - 1) & (i0 >= 0) & (i0 + 1 <= H - 1)
    j0c = j0.clamp(0, max(W - 2, 0))
    i0c = i0.clamp(0, max(H - 2, 0))
    fx = (u - j0c.to(points.dtype)).unsqueeze(-1)
    fy = (v - i0c.to(points.dtype)).unsqueeze(-1)
    g00 = data[i0c, j0c]
    g01 = data[i0c, j0c + 1]
    g10 = data[i0c + 1, j0c]
    g11 = data[i0c + 1, j0c + 1]
    values = (g00 * (1 - fx) * (1 - fy) + g01 * fx * (1 - fy)
              + g10 * (1 - fx) * fy + g11 * fx * fy)
    ok = ok & valid[i0c, j0c] & valid[i0c, j0c + 1] \
        & valid[i0c + 1, j0c] & valid[i0c + 1, j0c + 1]
    return values, ok


def threshold_residuals(residual_norms: torch.Tensor, flow_norms: torch.Tensor,
                        mask: torch.Tensor) -> tuple:
    """Outlier pass: drop masked vertices whose residual exceeds the largest
    sampled flow magnitude.  Returns (keep, clipped) bool masks; dropped
    vertices are removed from the mean, not clamped."""
    if not bool(mask.any()):
        return mask, torch.zeros_like(mask)
    thr = flow_norms.detach()[mask].max()
    clipped = mask & (residual_norms.detach() > thr)
    return mask & ~clipped, clipped


def scale_loss(loss: torch.Tensor, mean_flow_norm) -> torch.Tensor:
    """Normalize by pair speed with a FLOW_SCALE_FLOOR pixel floor."""
    denom = max(float(mean_flow_norm), FLOW_SCALE_FLOOR)
    return loss / denom


@dataclass
class DirectionalFlowTerm:
    """Raw (unscaled) single-direction statistics, tensors still on graph."""

    loss: torch.Tensor          # scalar, mean residual norm over kept vertices
    residuals: torch.Tensor     # (V, 2)
    mask: torch.Tensor          # (V,) bool, visibility ∧ usable sample
    kept: torch.Tensor          # (V,) bool, mask minus thresholded outliers
    clipped: torch.Tensor       # (V,) bool
    flow_norm_sum: float
    flow_norm_max: float

    @property
    def count(self) -> int:
        return int(self.mask.sum())


def directional_flow_loss(proj_1: torch.Tensor, proj_2: torch.Tensor,
                          flow_1to2, visible: torch.Tensor,
                          threshold: bool = True) -> DirectionalFlowTerm:
    """One direction of the consistency loss; proj_* are (V, 2) projections
    of the same vertices under the two configurations and visible is the
    (V,) intersection visibility mask."""
    samples, ok = sample_flow(flow_1to2, proj_1)
    mask = visible.to(torch.bool) & ok
    residuals = (proj_2 - proj_1) - samples
    rnorm = torch.linalg.vector_norm(residuals, dim=-1)
    fnorm = torch.linalg.vector_norm(samples.detach(), dim=-1)
    if threshold:
        kept, clipped = threshold_residuals(rnorm, fnorm, mask)
    else:
        kept, clipped = mask, torch.zeros_like(mask)
    if bool(kept.any()):
        loss = rnorm[kept].mean()
    else:
        loss = proj_1.sum() * 0.0
    masked_f = fnorm[mask]
    return DirectionalFlowTerm(
        loss=loss, residuals=residuals, mask=mask, kept=kept, clipped=clipped,
        flow_norm_sum=float(masked_f.sum()) if mask.any() else 0.0,
        flow_norm_max=float(masked_f.max()) if mask.any() else 0.0,
    )


@dataclass
class FlowLossReport:
    """Detached summary of one bidirectional evaluation."""

    loss: float
    loss_1to2: float
    loss_2to1: float
    mean_flow_norm: float
    max_flow_norm: float
    visible_count_1to2: int
    visible_count_2to1: int
    clipped_count: int
    empty_mask: bool
    missing_backward: bool


def bidirectional_flow_loss(proj_1: torch.Tensor, proj_2: torch.Tensor,
                            flow_1to2, flow_2to1=None,
                            visible_1=None, visible_2=None,
                            threshold: bool = True,
                            scale: bool = True) -> tuple:
    """Average of the two directional losses, scaled by pair speed.

    visible_1/visible_2 are the per-frame vertex visibility masks; their
    intersection gates both directions.  A missing backward flow degrades to
    the forward direction alone (flagged in the report).  Returns
    (loss tensor, FlowLossReport); the tensor stays differentiable w.r.t.
    both projections.
    """
    V = proj_1.shape[0]
    ones = torch.ones(V, dtype=torch.bool)
    v1 = ones if visible_1 is None else torch.as_tensor(np.asarray(visible_1)).to(torch.bool)
    v2 = ones if visible_2 is None else torch.as_tensor(np.asarray(visible_2)).to(torch.bool)
    both = v1 & v2

    fwd = directional_flow_loss(proj_1, proj_2, flow_1to2, both, threshold)
    if flow_2to1 is not None:
        bwd = directional_flow_loss(proj_2, proj_1, flow_2to1, both, threshold)
        norm_count = fwd.count + bwd.count
        norm_sum = fwd.flow_norm_sum + bwd.flow_norm_sum
        mean_norm = norm_sum / norm_count if norm_count else 0.0
        max_norm = max(fwd.flow_norm_max, bwd.flow_norm_max)
        l12 = scale_loss(fwd.loss, mean_norm) if scale else fwd.loss
        l21 = scale_loss(bwd.loss, mean_norm) if scale else bwd.loss
        loss = (l12 + l21) / 2.0
        clipped = int((fwd.clipped | bwd.clipped).sum())
        empty = fwd.count == 0 and bwd.count == 0
        report = FlowLossReport(
            loss=float(loss.detach()), loss_1to2=float(l12.detach()),
            loss_2to1=float(l21.detach()), mean_flow_norm=mean_norm,
            max_flow_norm=max_norm, visible_count_1to2=fwd.count,
            visible_count_2to1=bwd.count, clipped_count=clipped,
            empty_mask=empty, missing_backward=False)
    else:
        mean_norm = fwd.flow_norm_sum / fwd.count if fwd.count else 0.0
        loss = scale_loss(fwd.loss, mean_norm) if scale else fwd.loss
        report = FlowLossReport(
            loss=float(loss.detach()), loss_1to2=float(loss.detach()),
            loss_2to1=0.0, mean_flow_norm=mean_norm,
            max_flow_norm=fwd.flow_norm_max, visible_count_1to2=fwd.count,
            visible_count_2to1=0, clipped_count=int(fwd.clipped.sum()),
            empty_mask=fwd.count == 0, missing_backward=True)
    return loss, report


def keypoint_2d_loss(pred: torch.Tensor, reference: torch.Tensor,
                     confidence: torch.Tensor) -> tuple:
    """Confidence-weighted mean pixel distance between predicted and
    reference keypoints.  Returns (loss, degenerate); degenerate is True
    (and the loss zero) when every confidence is zero."""
    conf = confidence.to(pred.dtype)
    total = conf.sum()
    if float(total.detach()) <= 0.0:
        return pred.sum() * 0.0, True
    dist = torch.linalg.vector_norm(pred - reference, dim=-1)
    return (conf * dist).sum() / total, False
