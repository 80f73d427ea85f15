"""Synthetic video corpus: animated bodies, rendered frames, exact flow.

A dataset archive is a directory tree with one subdirectory per sequence
holding PNG frames, flow files for the configured frame spacings and the
ground-truth parameter track, plus a text manifest at the root listing every
frame and pair record.  The manifest is the single source of truth for what
a consumer may read; ground-truth parameters of unlabeled frames are locked
behind an explicit opt-out so training code cannot consume them by accident.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, asdict

import numpy as np
from PIL import Image

from .body import BodyParams, MeshTemplate, NUM_JOINTS, default_template, forward, project
from .body import save_template, load_template
from .render import FlowMap, ground_truth_flow, render, smooth_noise_background

MANIFEST_NAME = "manifest.txt"
TEMPLATE_NAME = "template.ffm"


@dataclass
class SynthConfig:
    """Knobs of the synthetic generator; every draw is seed-determined."""

    num_sequences: int = 8
    frames_per_sequence: int = 30
    image_height: int = 64
    image_width: int = 64
    fps: float = 30.0
    delta_ts: tuple = (1,)
    labeled_fraction: float = 1.0
    speed: float = 1.0
    pose_amplitude: float = 0.35
    shape_std: float = 0.8
    seed: int = 0
    palette_seed: int = 0
    flow_noise_std: float = 0.0

    @property
    def image_size(self):
        return (self.image_height, self.image_width)


# Per-joint animation amplitude scaling: big joints swing, fingers barely.
_JOINT_AMP = np.array([
    0.25, 0.8, 0.8, 0.3, 0.9, 0.9, 0.3, 0.5, 0.5, 0.25, 0.3, 0.3,
    0.4, 0.2, 0.2, 0.5, 0.9, 0.9, 0.9, 0.9, 0.5, 0.5, 0.2, 0.2,
])


def animate_sequence(config: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    """One smooth sinusoidal motion track, returned as (T, 85) float64."""
    T = config.frames_per_sequence
    beta = rng.normal(0.0, config.shape_std, size=10).clip(-2.0, 2.0)
    theta0 = rng.normal(0.0, 0.1, size=(NUM_JOINTS, 3)) * _JOINT_AMP[:, None]
    amp = rng.uniform(0.2, 1.0, size=(NUM_JOINTS, 3)) \
        * config.pose_amplitude * _JOINT_AMP[:, None]
    freq = rng.uniform(0.3, 1.1, size=(NUM_JOINTS, 3)) * config.speed
    phase = rng.uniform(0.0, 2.0 * np.pi, size=(NUM_JOINTS, 3))

    s0 = rng.uniform(0.75, 1.05)
    cam_amp = rng.uniform(0.02, 0.08, size=2)
    cam_freq = rng.uniform(0.2, 0.6, size=2) * config.speed
    cam_phase = rng.uniform(0.0, 2.0 * np.pi, size=2)
    s_amp = rng.uniform(0.0, 0.04)
    s_freq = rng.uniform(0.2, 0.5) * config.speed
    s_phase = rng.uniform(0.0, 2.0 * np.pi)

    track = np.zeros((T, 85))
    for t in range(T):
        tt = t / config.fps
        theta = theta0 + amp * np.sin(2.0 * np.pi * freq * tt + phase)
        s = s0 * np.exp(s_amp * np.sin(2.0 * np.pi * s_freq * tt + s_phase))
        tx = cam_amp[0] * np.sin(2.0 * np.pi * cam_freq[0] * tt + cam_phase[0])
        ty = cam_amp[1] * np.sin(2.0 * np.pi * cam_freq[1] * tt + cam_phase[1])
        track[t, :72] = theta.reshape(-1)
        track[t, 72:82] = beta
        track[t, 82:] = (s, tx, ty)
    return track


def _noise_flow(flow: FlowMap, std: float, rng: np.random.Generator) -> FlowMap:
    """Corrupt a flow map with smooth noise (stand-in for estimator error)."""
    if std <= 0:
        return flow
    H, W = flow.shape
    nx = smooth_noise_background((H, W), int(rng.integers(2 ** 31)))[:, :, 0]
    ny = smooth_noise_background((H, W), int(rng.integers(2 ** 31)))[:, :, 0]
    dx = flow.dx + ((nx - 0.5) * 2.0 * std * 3.0).astype(np.float32)
    dy = flow.dy + ((ny - 0.5) * 2.0 * std * 3.0).astype(np.float32)
    return FlowMap(dx=dx, dy=dy, valid=flow.valid)


def generate_dataset(config: SynthConfig, out_dir, template: MeshTemplate = None) -> str:
    """Write a full archive under out_dir; returns the manifest path."""
    os.makedirs(out_dir, exist_ok=True)
    if template is None:
        template = default_template()
    save_template(template, os.path.join(out_dir, TEMPLATE_NAME))

    size = config.image_size
    root_ss = np.random.SeedSequence(config.seed)
    seq_seeds = root_ss.spawn(config.num_sequences)
    label_rng = np.random.default_rng(root_ss.spawn(1)[0])

    frame_lines, pair_lines = [], []
    all_frames = []
    for si in range(config.num_sequences):
        seq = f"seq{si:04d}"
        seq_dir = os.path.join(out_dir, seq)
        os.makedirs(seq_dir, exist_ok=True)
        rng = np.random.default_rng(seq_seeds[si])
        track = animate_sequence(config, rng)
        np.save(os.path.join(seq_dir, "gt.npy"), track)

        frames = []
        bg_seed = int(rng.integers(2 ** 31))
        for t in range(config.frames_per_sequence):
            params = BodyParams.from_flat(track[t])
            fr = render(template, params, size,
                        palette_seed=config.palette_seed,
                        background_seed=bg_seed + t)
            name = f"frame{t:04d}.png"
            img = Image.fromarray(
                np.clip(fr.image * 255.0 + 0.5, 0, 255).astype(np.uint8))
            img.save(os.path.join(seq_dir, name))
            frames.append((params, fr))
            all_frames.append((seq, t))
            frame_lines.append(f"frame seq={seq} t={t} path={seq}/{name}")

        for dt in config.delta_ts:
            for t in range(config.frames_per_sequence - dt):
                p1, f1 = frames[t]
                p2, f2 = frames[t + dt]
                fwd = ground_truth_flow(template, p1, p2, size, f1)
                bwd = ground_truth_flow(template, p2, p1, size, f2)
                if config.flow_noise_std > 0:
                    fwd = _noise_flow(fwd, config.flow_noise_std, rng)
                    bwd = _noise_flow(bwd, config.flow_noise_std, rng)
                fn = f"flow_f_dt{dt}_{t:04d}.flo"
                bn = f"flow_b_dt{dt}_{t:04d}.flo"
                fwd.save(os.path.join(seq_dir, fn))
                bwd.save(os.path.join(seq_dir, bn))
                pair_lines.append(
                    f"pair seq={seq} t1={t} t2={t + dt} dt={dt} "
                    f"frame1={seq}/frame{t:04d}.png frame2={seq}/frame{t + dt:04d}.png "
                    f"flow_fwd={seq}/{fn} flow_bwd={seq}/{bn}")

    n_labeled = int(round(config.labeled_fraction * len(all_frames)))
    order = label_rng.permutation(len(all_frames))
    labeled = set(order[:n_labeled].tolist())
    frame_lines = [line + f" labeled={1 if i in labeled else 0}"
                   for i, line in enumerate(frame_lines)]

    manifest = os.path.join(out_dir, MANIFEST_NAME)
    with open(manifest, "w") as fh:
        fh.write("format=flowfit-dataset-v1\n")
        for k, v in asdict(config).items():
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            fh.write(f"{k}={v}\n")
        fh.write(f"template={TEMPLATE_NAME}\n")
        fh.write("records:\n")
        for line in frame_lines:
            fh.write(line + "\n")
        for line in pair_lines:
            fh.write(line + "\n")
    return manifest


# ---------------------------------------------------------------------------
# Loader
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FrameRecord:
    seq: str
    t: int
    path: str
    labeled: bool


@dataclass(frozen=True)
class PairRecord:
    seq: str
    t1: int
    t2: int
    dt: int
    frame1: str
    frame2: str
    flow_fwd: str
    flow_bwd: str


class UnlabeledAccessError(PermissionError):
    """Ground truth of an unlabeled frame was requested while locked."""


def _parse_kv(tokens):
    return {k: v for k, v in (tok.split("=", 1) for tok in tokens)}


class SyntheticDataset:
    """Reader over a generated archive.

    ``unlabeled_gt_locked`` (default True) makes ``gt_params`` raise for
    frames the manifest marks unlabeled; evaluation code opts out explicitly.
    ``gt_keypoints`` stays available everywhere, standing in for an
    off-the-shelf 2D keypoint detector.
    """

    def __init__(self, root):
        self.root = str(root)
        self.meta = {}
        self.frames: list[FrameRecord] = []
        self.pairs: list[PairRecord] = []
        self.unlabeled_gt_locked = True
        self.gt_reads = 0
        self._gt_cache = {}
        self._template = None

        in_records = False
        with open(os.path.join(self.root, MANIFEST_NAME)) as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                if line == "records:":
                    in_records = True
                    continue
                if not in_records:
                    k, v = line.split("=", 1)
                    self.meta[k] = v
                    continue
                kind, *rest = line.split(" ")
                kv = _parse_kv(rest)
                if kind == "frame":
                    self.frames.append(FrameRecord(
                        seq=kv["seq"], t=int(kv["t"]), path=kv["path"],
                        labeled=kv["labeled"] == "1"))
                elif kind == "pair":
                    self.pairs.append(PairRecord(
                        seq=kv["seq"], t1=int(kv["t1"]), t2=int(kv["t2"]),
                        dt=int(kv["dt"]), frame1=kv["frame1"], frame2=kv["frame2"],
                        flow_fwd=kv["flow_fwd"], flow_bwd=kv["flow_bwd"]))
        self._frame_index = {(f.seq, f.t): f for f in self.frames}

    @property
    def image_size(self):
        return (int(self.meta["image_height"]), int(self.meta["image_width"]))

    @property
    def fps(self) -> float:
        return float(self.meta.get("fps", 30.0))

    @property
    def template(self) -> MeshTemplate:
        if self._template is None:
            self._template = load_template(os.path.join(self.root, self.meta["template"]))
        return self._template

    def sequences(self) -> list:
        seen = {}
        for f in self.frames:
            seen[f.seq] = max(seen.get(f.seq, 0), f.t + 1)
        return sorted(seen.items())

    def labeled_frames(self) -> list:
        return [f for f in self.frames if f.labeled]

    def frame(self, seq: str, t: int) -> FrameRecord:
        return self._frame_index[(seq, t)]

    def load_image(self, rel_path: str) -> np.ndarray:
        img = Image.open(os.path.join(self.root, rel_path)).convert("RGB")
        return np.asarray(img, dtype=np.float32) / 255.0

    def load_flow(self, rel_path: str) -> FlowMap:
        return FlowMap.load(os.path.join(self.root, rel_path))

    def _track(self, seq: str) -> np.ndarray:
        if seq not in self._gt_cache:
            self._gt_cache[seq] = np.load(os.path.join(self.root, seq, "gt.npy"))
        return self._gt_cache[seq]

    def gt_params(self, seq: str, t: int) -> np.ndarray:
        rec = self._frame_index[(seq, t)]
        if self.unlabeled_gt_locked and not rec.labeled:
            raise UnlabeledAccessError(
                f"gt_params({seq}, {t}): frame is unlabeled and ground truth is locked")
        self.gt_reads += 1
        return self._track(seq)[t].copy()

    def gt_keypoints(self, seq: str, t: int, noise_std: float = 0.0) -> tuple:
        """Weak 2D supervision: projected joints plus in-frame confidences.

        Not gated by the label lock (a keypoint detector would run on any
        frame).  Returns (keypoints (J, 2), confidence (J,)).
        """
        import torch
        vec = self._track(seq)[t]
        params = BodyParams.from_flat(torch.as_tensor(vec))
        mesh = forward(self.template, params)
        kp = project(mesh.joints, params.pi, self.image_size).detach().numpy()
        if noise_std > 0:
            rng = np.random.default_rng(
                np.random.SeedSequence([hash(seq) & 0x7FFFFFFF, t, 777]))
            kp = kp + rng.normal(0.0, noise_std, size=kp.shape)
        H, W = self.image_size
        conf = ((kp[:, 0] >= 0) & (kp[:, 0] < W)
                & (kp[:, 1] >= 0) & (kp[:, 1] < H)).astype(np.float64)
        return kp, conf
