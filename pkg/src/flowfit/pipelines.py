"""Training and optimization pipelines.

Five entry points:
  * pretrain_baseline       supervised training on the labeled fraction
  * refine_with_flow        supervised + flow-consistency refinement
  * refine_anchored_unsupervised
                            label-free refinement anchored to the baseline
  * optimize_sequence       per-sequence test-time parameter optimization
  * apply_color_noise       the pair-frame augmentation used by refinement

Every random draw goes through generators derived from the config seed, so a
rerun with identical (seed, config, data) reproduces checkpoints bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np
import torch

from .body import BodyParams, forward_batch, project, rodrigues
from .flowloss import bidirectional_flow_loss, keypoint_2d_loss
from .regressor import (BodyRegressor, ContextNetwork, RegressorConfig,
                        params_to_u, u_to_params)
from .render import visibility
from .synthdata import SyntheticDataset, FrameRecord

# Supervised loss component weights (rotation matrices, shape, camera,
# pelvis-centered 3D joints, normalized 2D joints).
W_ROT = 5.0
W_BETA = 0.05
W_CAM = 10.0
W_J3D = 20.0
W_J2D = 20.0


class PipelineError(RuntimeError):
    """Raised when a pipeline hits a non-finite loss or bad configuration."""


@dataclass
class TrainConfig:
    """Shared knob set for all pipelines; unused fields are ignored by the
    pipelines that do not touch them."""

    steps: int = 600
    batch_size: int = 12
    batch_ratio_labeled: int = 1   # labeled : pair composition of a batch
    batch_ratio_pairs: int = 1
    learning_rate: float = 1e-4
    label_fraction: float = 1.0    # p, subset of archive-labeled frames
    lambda_sup: float = 1.0
    lambda_of: float = 0.01
    lambda_tp: float = 10.0        # reserved for a temporal-prior term; unused
    lambda_2d: float = 0.0
    lambda_theta: float = 1.0      # pose anchor weight
    lambda_beta: float = 1.0       # shape anchor weight
    lambda_smooth: float = 0.0     # moving-average pull in sequence optimization
    smooth_window: int = 30
    color_noise_std: float = 0.02
    context_length: int = 0        # N-1 previous frames fed to the context net
    freeze_baseline: bool = False
    threshold_residuals: bool = True
    scale_loss: bool = True
    seed: int = 0
    log_every: int = 50

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise PipelineError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainingLog:
    entries: list = field(default_factory=list)

    def add(self, step: int, **losses):
        self.entries.append({"step": step, **{k: float(v) for k, v in losses.items()}})

    def last(self) -> dict:
        return self.entries[-1] if self.entries else {}

    def to_lines(self) -> list:
        lines = []
        for e in self.entries:
            parts = " ".join(f"{k}={v:.6f}" for k, v in e.items() if k != "step")
            lines.append(f"step={e['step']} {parts}")
        return lines


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(stream,)))


def select_labeled(dataset: SyntheticDataset, fraction: float, seed: int) -> list:
    """Deterministic subset of the archive's labeled frames.

    fraction is relative to the frames the manifest exposes as labeled; the
    same (fraction, seed) always picks the same frames, so a pretraining run
    and a later refinement see an identical supervised pool.
    """
    pool = dataset.labeled_frames()
    if not pool:
        raise PipelineError("dataset has no labeled frames")
    if not (0.0 < fraction <= 1.0):
        raise PipelineError(f"label fraction must be in (0, 1], got {fraction}")
    n = max(1, int(round(fraction * len(pool))))
    order = _rng(seed, 3).permutation(len(pool))
    return [pool[i] for i in sorted(order[:n].tolist())]


def apply_color_noise(image: np.ndarray, std: float,
                      rng: np.random.Generator) -> np.ndarray:
    """Per-pixel i.i.d. Gaussian color noise, clipped back to [0, 1]."""
    if std <= 0:
        return image
    noisy = image + rng.normal(0.0, std, size=image.shape)
    return np.clip(noisy, 0.0, 1.0).astype(np.float32)


def supervised_loss(template, pred: torch.Tensor, target: torch.Tensor,
                    image_size: tuple) -> tuple:
    """Full-supervision loss on (B, 85) parameter vectors.

    Rotation matrices, shape, camera, pelvis-centered 3D joints and
    image-normalized 2D joints, mean-squared each.  Returns (loss, parts).
    """
    B = pred.shape[0]
    pt, pb, pc = pred[:, :72].reshape(B, 24, 3), pred[:, 72:82], pred[:, 82:85]
    tt, tb, tc = target[:, :72].reshape(B, 24, 3), target[:, 72:82], target[:, 82:85]
    l_rot = (rodrigues(pt) - rodrigues(tt)).pow(2).mean()
    l_beta = (pb - tb).pow(2).mean()
    l_cam = (pc - tc).pow(2).mean()

    pv, pj = forward_batch(template, pt, pb)
    tv, tj = forward_batch(template, tt, tb)
    l_j3d = ((pj - pj[:, :1]) - (tj - tj[:, :1])).pow(2).mean()
    H, W = image_size
    norm = torch.tensor([W, H], dtype=pred.dtype)
    # project each sample with its own camera
    pj2 = torch.stack([project(pj[i], pc[i], image_size) for i in range(B)])
    tj2 = torch.stack([project(tj[i], tc[i], image_size) for i in range(B)])
    l_j2d = ((pj2 - tj2) / norm).pow(2).mean()

    loss = (W_ROT * l_rot + W_BETA * l_beta + W_CAM * l_cam
            + W_J3D * l_j3d + W_J2D * l_j2d)
    parts = {"rot": l_rot, "beta": l_beta, "cam": l_cam,
             "j3d": l_j3d, "j2d": l_j2d}
    return loss, parts


def _check_finite(loss: torch.Tensor, step: int, ids: list):
    if not bool(torch.isfinite(loss.detach())):
        raise PipelineError(
            f"non-finite loss at step {step}; batch frames: {ids}")


def _stack_images(images: list) -> torch.Tensor:
    x = torch.as_tensor(np.stack(images), dtype=torch.float32)
    return x.permute(0, 3, 1, 2)


def pretrain_baseline(dataset: SyntheticDataset, config: TrainConfig,
                      model: BodyRegressor | None = None) -> tuple:
    """Supervised baseline on the selected labeled fraction.

    Returns (model, TrainingLog).  The labeled pool is the deterministic
    subset picked by (label_fraction, seed).
    """
    template = dataset.template
    size = dataset.image_size
    pool = select_labeled(dataset, config.label_fraction, config.seed)
    if model is None:
        model = BodyRegressor(RegressorConfig()).init_weights(config.seed)
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    batch_rng = _rng(config.seed, 1)
    log = TrainingLog()

    targets = {(f.seq, f.t): dataset.gt_params(f.seq, f.t) for f in pool}
    for step in range(config.steps):
        idx = batch_rng.integers(0, len(pool), size=config.batch_size)
        recs = [pool[i] for i in idx]
        x = _stack_images([dataset.load_image(r.path) for r in recs])
        gt = torch.as_tensor(np.stack([targets[(r.seq, r.t)] for r in recs]),
                             dtype=torch.float32)
        pred = model(x)
        loss, parts = supervised_loss(template, pred, gt, size)
        loss = config.lambda_sup * loss
        _check_finite(loss, step, [(r.seq, r.t) for r in recs])
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % config.log_every == 0 or step == config.steps - 1:
            log.add(step, loss=loss.detach(), **{k: v.detach() for k, v in parts.items()})
    model.eval()
    return model, log


# ---------------------------------------------------------------------------
# Flow refinement
# ---------------------------------------------------------------------------

def _pair_flow_loss(dataset: SyntheticDataset, template, pair, params_1,
                    params_2, config: TrainConfig) -> torch.Tensor:
    """Bidirectional flow loss for one pair given predicted (85,) vectors.

    Visibility comes from rendering the current predictions (detached); the
    loss itself stays differentiable through projection and kinematics.
    """
    size = dataset.image_size
    p1 = BodyParams.from_flat(params_1)
    p2 = BodyParams.from_flat(params_2)
    v1 = visibility(template, p1, size)
    v2 = visibility(template, p2, size)
    verts, _ = forward_batch(template, torch.stack([p1.theta, p2.theta]),
                             torch.stack([p1.beta, p2.beta]))
    proj_1 = project(verts[0], p1.pi, size)
    proj_2 = project(verts[1], p2.pi, size)
    loss, _ = bidirectional_flow_loss(
        proj_1, proj_2,
        dataset.load_flow(pair.flow_fwd), dataset.load_flow(pair.flow_bwd),
        v1, v2, threshold=config.threshold_residuals, scale=config.scale_loss)
    return loss


def _batch_counts(config: TrainConfig) -> tuple:
    total = config.batch_ratio_labeled + config.batch_ratio_pairs
    n_lab = int(round(config.batch_size * config.batch_ratio_labeled / total))
    n_lab = min(max(n_lab, 0), config.batch_size)
    return n_lab, config.batch_size - n_lab


class _FeatureBank:
    """Clean-image features and plain predictions for the frozen-encoder
    path; computed once because the base model does not move."""

    def __init__(self, dataset: SyntheticDataset, model: BodyRegressor,
                 batch: int = 64):
        self.feats = {}
        self.plain = {}
        model.eval()
        frames = dataset.frames
        with torch.no_grad():
            for i in range(0, len(frames), batch):
                chunk = frames[i:i + batch]
                x = _stack_images([dataset.load_image(f.path) for f in chunk])
                ft = model.features(x)
                pr = model.params_from_features(ft)
                for f, a, b in zip(chunk, ft, pr):
                    self.feats[(f.seq, f.t)] = a
                    self.plain[(f.seq, f.t)] = b


def _histories(plain_lookup, keys: list, k: int) -> list:
    """Per-unit context history (oldest -> newest) or None when empty."""
    out = []
    for src, seq, t in keys:
        lo = max(0, t - k)
        if k <= 0 or lo == t:
            out.append(None)
            continue
        rows = [plain_lookup(src, seq, tt) for tt in range(lo, t)]
        out.append(torch.stack(rows))
    return out


def _apply_context(model: BodyRegressor, ctxnet: ContextNetwork | None,
                   feats: torch.Tensor, histories: list) -> torch.Tensor:
    """Decode features into parameters, modulating rows that have history."""
    B, F = feats.shape
    if ctxnet is None or all(h is None for h in histories):
        return model.params_from_features(feats)
    idx = [i for i, h in enumerate(histories) if h is not None]
    gamma = torch.ones(B, F, dtype=feats.dtype)
    delta = torch.zeros(B, F, dtype=feats.dtype)
    aff = ctxnet(torch.stack([ctxnet._prepare(histories[i]) for i in idx]))
    gamma = gamma.index_put((torch.tensor(idx),), aff.gamma)
    delta = delta.index_put((torch.tensor(idx),), aff.delta)
    return model.params_from_features(gamma * feats + delta)


def refine_with_flow(dataset: SyntheticDataset, model: BodyRegressor,
                     config: TrainConfig,
                     context: ContextNetwork | None = None,
                     sup_dataset: SyntheticDataset | None = None) -> tuple:
    """Joint supervised + flow-consistency refinement (the labeled fraction
    keeps its supervision; every pair contributes the flow loss).

    sup_dataset optionally holds the supervised pool (the original
    pretraining archive, when it differs from the video archive supplying
    the pairs); it must share the mesh template and image size.  With
    context_length > 0 a context network (created here when not passed in)
    modulates features from the plain estimates of preceding frames.  With
    freeze_baseline only the context network trains, on cached clean-image
    features.  Returns (model, context, TrainingLog).
    """
    template = dataset.template
    size = dataset.image_size
    sup_ds = sup_dataset if sup_dataset is not None else dataset
    if sup_ds.image_size != size:
        raise PipelineError("supervised archive image size differs from the pair archive")
    pool = select_labeled(sup_ds, config.label_fraction, config.seed)
    pairs = dataset.pairs
    if not pairs:
        raise PipelineError("dataset has no frame pairs")
    n_lab, n_pair = _batch_counts(config)
    sources = {0: dataset, 1: sup_ds}
    lab_src = 1 if sup_dataset is not None else 0

    if config.context_length > 0 and context is None:
        context = ContextNetwork(model.config).init_weights(config.seed + 1)

    trainable = []
    if config.freeze_baseline:
        for p in model.parameters():
            p.requires_grad_(False)
    else:
        trainable += list(model.parameters())
    if context is not None:
        trainable += list(context.parameters())
    if not trainable:
        raise PipelineError("nothing to train: baseline frozen and no context net")
    opt = torch.optim.Adam(trainable, lr=config.learning_rate)

    banks = None
    if config.freeze_baseline:
        banks = {0: _FeatureBank(dataset, model)}
        banks[1] = _FeatureBank(sup_ds, model) if sup_ds is not dataset else banks[0]
    targets = {(f.seq, f.t): sup_ds.gt_params(f.seq, f.t) for f in pool}
    batch_rng = _rng(config.seed, 1)
    noise_rng = _rng(config.seed, 2)
    log = TrainingLog()
    model.train() if not config.freeze_baseline else model.eval()

    for step in range(config.steps):
        lab_idx = batch_rng.integers(0, len(pool), size=n_lab) if n_lab else []
        pair_idx = batch_rng.integers(0, len(pairs), size=n_pair) if n_pair else []
        lab_recs = [pool[i] for i in lab_idx]
        pair_recs = [pairs[i] for i in pair_idx]
        units = [(lab_src, r.seq, r.t) for r in lab_recs]
        for pr in pair_recs:
            units += [(0, pr.seq, pr.t1), (0, pr.seq, pr.t2)]
        ids = units

        # features for every unit
        if banks is not None:
            feats = torch.stack([banks[src].feats[(s, t)]
                                 for src, s, t in units]) if units else None
            plain_lookup = lambda src, s, t: banks[src].plain[(s, t)]
        else:
            imgs = [sources[src].load_image(sources[src].frame(s, t).path)
                    for src, s, t in units]
            # color noise only on the pair frames
            for k in range(len(lab_recs), len(units)):
                imgs[k] = apply_color_noise(imgs[k], config.color_noise_std, noise_rng)
            feats = model.features(_stack_images(imgs))
            plain_cache = {}
            if context is not None and config.context_length > 0:
                need = sorted({(src, s, tt) for src, s, t in units
                               for tt in range(max(0, t - config.context_length), t)})
                with torch.no_grad():
                    for i in range(0, len(need), 64):
                        chunk = need[i:i + 64]
                        x = _stack_images([sources[src].load_image(
                            sources[src].frame(s, t).path) for src, s, t in chunk])
                        out = model(x)
                        for key, vec in zip(chunk, out):
                            plain_cache[key] = vec
            plain_lookup = lambda src, s, t: plain_cache[(src, s, t)]

        hists = _histories(plain_lookup, units,
                           config.context_length if context is not None else 0)
        preds = _apply_context(model, context, feats, hists)

        loss = torch.zeros((), dtype=torch.float32)
        parts = {}
        if lab_recs:
            gt = torch.as_tensor(np.stack([targets[(r.seq, r.t)] for r in lab_recs]),
                                 dtype=torch.float32)
            l_sup, _ = supervised_loss(template, preds[:len(lab_recs)], gt, size)
            loss = loss + config.lambda_sup * l_sup
            parts["sup"] = l_sup.detach()
        if pair_recs:
            fl = torch.zeros((), dtype=torch.float32)
            kp = torch.zeros((), dtype=torch.float32)
            for k, pr in enumerate(pair_recs):
                a = len(lab_recs) + 2 * k
                fl = fl + _pair_flow_loss(dataset, template, pr,
                                          preds[a], preds[a + 1], config)
                if config.lambda_2d > 0:
                    for off, t in ((0, pr.t1), (1, pr.t2)):
                        vec = preds[a + off]
                        kp_gt, conf = dataset.gt_keypoints(pr.seq, t)
                        _, joints = forward_batch(
                            template, vec[:72].reshape(1, 24, 3), vec[72:82].unsqueeze(0))
                        pj = project(joints[0], vec[82:85], size)
                        l_kp, _ = keypoint_2d_loss(pj, torch.as_tensor(kp_gt, dtype=pj.dtype),
                                                   torch.as_tensor(conf, dtype=pj.dtype))
                        kp = kp + l_kp
            fl = fl / len(pair_recs)
            loss = loss + config.lambda_of * fl
            parts["flow"] = fl.detach()
            if config.lambda_2d > 0:
                kp = kp / (2 * len(pair_recs))
                loss = loss + config.lambda_2d * kp
                parts["kp2d"] = kp.detach()

        _check_finite(loss, step, ids)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % config.log_every == 0 or step == config.steps - 1:
            log.add(step, loss=loss.detach(), **parts)

    if config.freeze_baseline:
        for p in model.parameters():
            p.requires_grad_(True)
    model.eval()
    return model, context, log


def refine_anchored_unsupervised(dataset: SyntheticDataset,
                                 model: BodyRegressor,
                                 config: TrainConfig) -> tuple:
    """Label-free refinement: flow consistency plus anchors that pull pose
    and shape back to the frozen starting model's predictions.

    anchor loss = lambda_theta |theta0 - theta|_2 + lambda_beta |beta0 - beta|_2
    per frame; the camera is not anchored.  Returns (model, TrainingLog).
    """
    template = dataset.template
    pairs = dataset.pairs
    if not pairs:
        raise PipelineError("dataset has no frame pairs")
    n_pair = max(1, config.batch_size // 2)

    # anchors: the incoming model's clean-image predictions, frozen
    anchors = {}
    model.eval()
    frames = dataset.frames
    with torch.no_grad():
        for i in range(0, len(frames), 64):
            chunk = frames[i:i + 64]
            x = _stack_images([dataset.load_image(f.path) for f in chunk])
            for f, vec in zip(chunk, model(x)):
                anchors[(f.seq, f.t)] = vec.clone()

    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    batch_rng = _rng(config.seed, 1)
    noise_rng = _rng(config.seed, 2)
    log = TrainingLog()
    model.train()

    for step in range(config.steps):
        pair_recs = [pairs[i] for i in batch_rng.integers(0, len(pairs), size=n_pair)]
        units = []
        for pr in pair_recs:
            units += [(pr.seq, pr.t1), (pr.seq, pr.t2)]
        imgs = [apply_color_noise(dataset.load_image(dataset.frame(s, t).path),
                                  config.color_noise_std, noise_rng)
                for s, t in units]
        preds = model(_stack_images(imgs))

        anchor_vecs = torch.stack([anchors[u] for u in units])
        d_theta = torch.linalg.vector_norm(preds[:, :72] - anchor_vecs[:, :72], dim=1)
        d_beta = torch.linalg.vector_norm(preds[:, 72:82] - anchor_vecs[:, 72:82], dim=1)
        l_anchor = (config.lambda_theta * d_theta + config.lambda_beta * d_beta).mean()

        fl = torch.zeros((), dtype=torch.float32)
        for k, pr in enumerate(pair_recs):
            fl = fl + _pair_flow_loss(dataset, template, pr,
                                      preds[2 * k], preds[2 * k + 1], config)
        fl = fl / len(pair_recs)

        loss = l_anchor + config.lambda_of * fl
        _check_finite(loss, step, units)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % config.log_every == 0 or step == config.steps - 1:
            log.add(step, loss=loss.detach(), anchor=l_anchor.detach(), flow=fl.detach())
    model.eval()
    return model, log


# ---------------------------------------------------------------------------
# Per-sequence test-time optimization
# ---------------------------------------------------------------------------

def _moving_average(x: torch.Tensor, window: int) -> torch.Tensor:
    """Centered boxcar average over the time axis of (T, D), edge-truncated."""
    T = x.shape[0]
    half = window // 2
    csum = torch.cat([torch.zeros(1, x.shape[1], dtype=x.dtype),
                      torch.cumsum(x, dim=0)])
    lo = torch.clamp(torch.arange(T) - half, min=0)
    hi = torch.clamp(torch.arange(T) + half + 1, max=T)
    return (csum[hi] - csum[lo]) / (hi - lo).unsqueeze(1).to(x.dtype)


def optimize_sequence(dataset: SyntheticDataset, model: BodyRegressor,
                      seq: str, config: TrainConfig) -> tuple:
    """Optimize one sequence's parameter track against flow consistency.

    Variables are the per-frame parameter vectors (scale optimized in log
    space), initialized from and anchored to the model's own predictions
    with the same pose and shape anchors as the unsupervised refinement.
    lambda_smooth > 0 adds a pull toward the window-centered moving average
    of pose and shape.  Returns (track (T, 85) float64, TrainingLog).
    """
    template = dataset.template
    size = dataset.image_size
    length = dict(dataset.sequences())[seq]
    from .evaluation import predict_sequence
    track0 = predict_sequence(dataset, model, seq, length)
    anchor = torch.as_tensor(track0, dtype=torch.float64)
    u = params_to_u(anchor).clone().requires_grad_(True)

    pair_flows = []
    for pr in dataset.pairs:
        if pr.seq == seq and pr.dt == 1:
            pair_flows.append((pr.t1, pr.t2, dataset.load_flow(pr.flow_fwd),
                               dataset.load_flow(pr.flow_bwd)))
    if not pair_flows:
        raise PipelineError(f"sequence {seq} has no dt=1 pairs")

    opt = torch.optim.Adam([u], lr=config.learning_rate)
    log = TrainingLog()
    for step in range(config.steps):
        params = u_to_params(u)                              # (T, 85)
        theta = params[:, :72].reshape(length, 24, 3)
        beta = params[:, 72:82]
        verts, _ = forward_batch(template, theta, beta)

        d_theta = torch.linalg.vector_norm(params[:, :72] - anchor[:, :72], dim=1)
        d_beta = torch.linalg.vector_norm(params[:, 72:82] - anchor[:, 72:82], dim=1)
        l_anchor = (config.lambda_theta * d_theta
                    + config.lambda_beta * d_beta).mean()

        with torch.no_grad():
            vis = [visibility(template, BodyParams.from_flat(params[t].detach()),
                              size) for t in range(length)]
        proj = [project(verts[t], params[t, 82:85], size) for t in range(length)]
        fl = torch.zeros((), dtype=torch.float64)
        for t1, t2, ff, fb in pair_flows:
            l, _ = bidirectional_flow_loss(
                proj[t1], proj[t2], ff, fb, vis[t1], vis[t2],
                threshold=config.threshold_residuals, scale=config.scale_loss)
            fl = fl + l
        fl = fl / len(pair_flows)
        loss = l_anchor + config.lambda_of * fl

        if config.lambda_smooth > 0:
            ma_theta = _moving_average(params[:, :72].detach(), config.smooth_window)
            ma_beta = _moving_average(params[:, 72:82].detach(), config.smooth_window)
            l_smooth = (torch.linalg.vector_norm(params[:, :72] - ma_theta, dim=1)
                        + torch.linalg.vector_norm(params[:, 72:82] - ma_beta, dim=1)).mean()
            loss = loss + config.lambda_smooth * l_smooth

        _check_finite(loss, step, [seq])
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % config.log_every == 0 or step == config.steps - 1:
            log.add(step, loss=loss.detach(), anchor=l_anchor.detach(), flow=fl.detach())

    final = u_to_params(u.detach()).numpy().astype(np.float64)
    return final, log
