"""Metrics and audits: P-MPJPE, acceleration error, flow-quality ratios.

All joint positions are in meters internally; reported errors are mm for
P-MPJPE and mm/s^2 for the acceleration error.  Reports serialize to plain
``key=value`` text so shell pipelines and tests can parse them without a
schema.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .body import BodyParams, forward, project
from .flowloss import sample_flow
from .regressor import BodyRegressor, ContextNetwork, ContextAffine
from .synthdata import SyntheticDataset

DEFAULT_FPS = 30.0


def procrustes_align(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Similarity-align pred (J, 3) onto target: translation, rotation and
    isotropic scale, reflection disallowed via the determinant sign fix."""
    mu_p = pred.mean(axis=0)
    mu_t = target.mean(axis=0)
    Xp = pred - mu_p
    Xt = target - mu_t
    var_p = (Xp ** 2).sum()
    K = Xp.T @ Xt
    U, s, Vh = np.linalg.svd(K)
    Z = np.eye(3)
    Z[-1, -1] = np.sign(np.linalg.det(U @ Vh))
    R = Vh.T @ Z @ U.T
    scale = np.trace(R @ K) / var_p
    return scale * (R @ pred.T).T + (mu_t - scale * (R @ mu_p))


def pmpjpe(pred_joints: np.ndarray, gt_joints: np.ndarray) -> float:
    """Procrustes-aligned mean per joint position error in millimeters."""
    aligned = procrustes_align(np.asarray(pred_joints, dtype=np.float64),
                               np.asarray(gt_joints, dtype=np.float64))
    return float(np.linalg.norm(aligned - gt_joints, axis=-1).mean() * 1000.0)


def acceleration_error(pred_track: np.ndarray, gt_track: np.ndarray,
                       fps: float = DEFAULT_FPS) -> float:
    """Mean acceleration difference in mm/s^2 over (T, J, 3) joint tracks.

    a_t = (x_{t+1} - 2 x_t + x_{t-1}) * fps^2, defined for the T-2 interior
    frames; needs T >= 3.
    """
    pred = np.asarray(pred_track, dtype=np.float64)
    gt = np.asarray(gt_track, dtype=np.float64)
    if pred.shape != gt.shape or pred.shape[0] < 3:
        raise ValueError("tracks must share shape (T>=3, J, 3)")
    a_pred = (pred[2:] - 2.0 * pred[1:-1] + pred[:-2]) * fps ** 2
    a_gt = (gt[2:] - 2.0 * gt[1:-1] + gt[:-2]) * fps ** 2
    return float(np.linalg.norm(a_pred - a_gt, axis=-1).mean() * 1000.0)


# ---------------------------------------------------------------------------
# Model evaluation over a dataset
# ---------------------------------------------------------------------------

@dataclass
class MetricReport:
    pmpjpe_mm: float
    accel_err_mm_s2: float
    num_frames: int
    num_sequences: int
    context_length: int = 0
    per_sequence: dict = field(default_factory=dict)

    def to_lines(self) -> list:
        lines = [
            f"pmpjpe_mm={self.pmpjpe_mm:.6f}",
            f"accel_err_mm_s2={self.accel_err_mm_s2:.6f}",
            f"num_frames={self.num_frames}",
            f"num_sequences={self.num_sequences}",
            f"context_length={self.context_length}",
        ]
        for seq in sorted(self.per_sequence):
            p, a = self.per_sequence[seq]
            lines.append(f"seq.{seq}.pmpjpe_mm={p:.6f}")
            lines.append(f"seq.{seq}.accel_err_mm_s2={a:.6f}")
        return lines


def _joints_of_track(template, track: np.ndarray) -> np.ndarray:
    out = np.zeros((track.shape[0], template.num_joints, 3))
    for t in range(track.shape[0]):
        mesh = forward(template, BodyParams.from_flat(torch.as_tensor(track[t])))
        out[t] = mesh.joints.detach().numpy()
    return out


def predict_sequence(dataset: SyntheticDataset, model: BodyRegressor, seq: str,
                     length: int, context: ContextNetwork | None = None,
                     context_length: int = 0, batch_size: int = 32) -> np.ndarray:
    """Parameter track (T, 85) for one sequence.

    With context, a first pass produces plain estimates; each frame is then
    re-decoded from its cached feature modulated by the context network fed
    with the plain estimates of the previous ``context_length`` frames.
    """
    model.eval()
    feats = []
    with torch.no_grad():
        for start in range(0, length, batch_size):
            imgs = [dataset.load_image(dataset.frame(seq, t).path)
                    for t in range(start, min(start + batch_size, length))]
            x = torch.as_tensor(np.stack(imgs)).permute(0, 3, 1, 2)
            feats.append(model.features(x))
        feats = torch.cat(feats)                         # (T, F)
        plain = model.params_from_features(feats)        # (T, 85)
        if context is None or context_length <= 0:
            return plain.numpy().astype(np.float64)
        out = []
        for t in range(length):
            lo = max(0, t - context_length)
            if t == 0 or lo == t:
                out.append(plain[t])
                continue
            affine = context(plain[lo:t])
            out.append(model.params_from_features(
                affine.apply(feats[t]).unsqueeze(0))[0])
        return torch.stack(out).numpy().astype(np.float64)


def evaluate_model(dataset: SyntheticDataset, model: BodyRegressor,
                   context: ContextNetwork | None = None,
                   context_length: int = 0) -> MetricReport:
    """P-MPJPE and acceleration error of a model over every sequence."""
    template = dataset.template
    dataset.unlabeled_gt_locked = False
    per_seq = {}
    p_all, frames = [], 0
    a_sum, a_count = 0.0, 0
    for seq, length in dataset.sequences():
        track = predict_sequence(dataset, model, seq, length, context, context_length)
        gt = dataset._track(seq)[:length]
        pj = _joints_of_track(template, track)
        gj = _joints_of_track(template, gt)
        p_seq = [pmpjpe(pj[t], gj[t]) for t in range(length)]
        a_seq = acceleration_error(pj, gj, dataset.fps) if length >= 3 else 0.0
        per_seq[seq] = (float(np.mean(p_seq)), a_seq)
        p_all.extend(p_seq)
        frames += length
        if length >= 3:
            a_sum += a_seq * (length - 2)
            a_count += length - 2
    return MetricReport(
        pmpjpe_mm=float(np.mean(p_all)),
        accel_err_mm_s2=a_sum / a_count if a_count else 0.0,
        num_frames=frames, num_sequences=len(per_seq),
        context_length=context_length, per_sequence=per_seq)


# ---------------------------------------------------------------------------
# Flow-quality audit
# ---------------------------------------------------------------------------

@dataclass
class FlowQualityReport:
    """Per frame-spacing ratio of regressor motion error to flow error.

    For a pair (t, t+dt): F_GT is the ground-truth keypoint displacement,
    F_B the displacement implied by the regressor's predictions and F_OF the
    flow map sampled at keypoints.  d_B = mean |F_B - F_GT| and
    d_OF = mean |F_OF - F_GT|; the tracked statistic is d_B / d_OF.
    """

    deltas: tuple
    mean_ratio: dict          # dt -> float
    median_ratio: dict        # dt -> float
    mean_d_b: dict            # dt -> px
    mean_d_of: dict           # dt -> px
    pair_count: dict          # dt -> int
    dropped: dict             # dt -> pairs skipped (too few keypoints)
    degenerate: dict          # dt -> pairs with near-zero d_OF

    def to_mapping(self) -> dict:
        out = {}
        for dt in self.deltas:
            out[f"dt{dt}.mean_ratio"] = self.mean_ratio[dt]
            out[f"dt{dt}.median_ratio"] = self.median_ratio[dt]
            out[f"dt{dt}.mean_d_b"] = self.mean_d_b[dt]
            out[f"dt{dt}.mean_d_of"] = self.mean_d_of[dt]
            out[f"dt{dt}.pairs"] = self.pair_count[dt]
            out[f"dt{dt}.dropped"] = self.dropped[dt]
            out[f"dt{dt}.degenerate"] = self.degenerate[dt]
        return out

    def to_lines(self) -> list:
        return [f"{k}={v:.6f}" if isinstance(v, float) else f"{k}={v}"
                for k, v in self.to_mapping().items()]


DEGENERATE_FLOW_PX = 1e-6
MIN_AUDIT_KEYPOINTS = 3


def flow_quality_audit(dataset: SyntheticDataset, model: BodyRegressor,
                       deltas: tuple = (1, 3, 5, 7),
                       oracle_positions: bool = True) -> FlowQualityReport:
    """Compare regressor-implied keypoint motion against the flow maps.

    oracle_positions chooses where the flow is sampled: at ground-truth
    keypoints (oracle) or at the regressor's own keypoint estimates (the
    realistic setting, where sampling error compounds with flow magnitude).
    """
    template = dataset.template
    dataset.unlabeled_gt_locked = False
    size = dataset.image_size
    H, W = size

    pred_tracks = {seq: predict_sequence(dataset, model, seq, length)
                   for seq, length in dataset.sequences()}

    def joints_px(vec):
        params = BodyParams.from_flat(torch.as_tensor(vec))
        mesh = forward(template, params)
        return project(mesh.joints, params.pi, size).detach().numpy()

    ratios = {dt: [] for dt in deltas}
    d_bs = {dt: [] for dt in deltas}
    d_ofs = {dt: [] for dt in deltas}
    dropped = {dt: 0 for dt in deltas}
    degenerate = {dt: 0 for dt in deltas}

    for pair in dataset.pairs:
        if pair.dt not in ratios:
            continue
        gt1 = joints_px(dataset._track(pair.seq)[pair.t1])
        gt2 = joints_px(dataset._track(pair.seq)[pair.t2])
        pr1 = joints_px(pred_tracks[pair.seq][pair.t1])
        pr2 = joints_px(pred_tracks[pair.seq][pair.t2])
        f_gt = gt2 - gt1
        f_b = pr2 - pr1
        flow = dataset.load_flow(pair.flow_fwd)
        anchors = gt1 if oracle_positions else pr1
        values, ok = sample_flow(flow, torch.as_tensor(anchors))
        ok = ok.numpy()
        inb = (anchors[:, 0] >= 0) & (anchors[:, 0] < W) \
            & (anchors[:, 1] >= 0) & (anchors[:, 1] < H)
        use = ok & inb
        if use.sum() < MIN_AUDIT_KEYPOINTS:
            dropped[pair.dt] += 1
            continue
        f_of = values.numpy()
        d_b = float(np.linalg.norm(f_b[use] - f_gt[use], axis=-1).mean())
        d_of = float(np.linalg.norm(f_of[use] - f_gt[use], axis=-1).mean())
        if d_of < DEGENERATE_FLOW_PX:
            degenerate[pair.dt] += 1
            continue
        ratios[pair.dt].append(d_b / d_of)
        d_bs[pair.dt].append(d_b)
        d_ofs[pair.dt].append(d_of)

    return FlowQualityReport(
        deltas=tuple(deltas),
        mean_ratio={dt: float(np.mean(r)) if r else float("nan")
                    for dt, r in ratios.items()},
        median_ratio={dt: float(np.median(r)) if r else float("nan")
                      for dt, r in ratios.items()},
        mean_d_b={dt: float(np.mean(v)) if v else float("nan")
                  for dt, v in d_bs.items()},
        mean_d_of={dt: float(np.mean(v)) if v else float("nan")
                   for dt, v in d_ofs.items()},
        pair_count={dt: len(r) for dt, r in ratios.items()},
        dropped=dropped, degenerate=degenerate)


# ---------------------------------------------------------------------------
# key=value report files
# ---------------------------------------------------------------------------

def write_report(path, mapping: dict):
    """One metric per line, keys sorted, floats fixed to 6 decimals."""
    with open(path, "w") as fh:
        for k in sorted(mapping):
            v = mapping[k]
            if isinstance(v, float):
                fh.write(f"{k}={v:.6f}\n")
            else:
                fh.write(f"{k}={v}\n")


def read_report(path) -> dict:
    out = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or "=" not in line:
                continue
            k, v = line.split("=", 1)
            try:
                out[k] = int(v)
            except ValueError:
                try:
                    out[k] = float(v)
                except ValueError:
                    out[k] = v
    return out
