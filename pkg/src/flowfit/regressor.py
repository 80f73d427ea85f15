"""Single-frame body regressor and the temporal-context conditioning net.

The regressor is a small strided conv encoder producing a 2048-d feature,
followed by an iterative refinement head that starts from the mean parameter
vector and predicts additive corrections.  Scale is parameterized as exp of
a free value so every output is a valid configuration.

The context network turns the previous N-1 parameter estimates of a sequence
into a per-channel affine (gamma, delta) applied to the 2048-d feature before
the head runs, which is how temporal context conditions the prediction
without touching the encoder.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, asdict, field

import numpy as np
import torch
import torch.nn as nn

from .body import BodyParams, PARAM_DIM

CHECKPOINT_MAGIC = b"FFCK"


@dataclass
class RegressorConfig:
    feature_dim: int = 2048
    encoder_widths: tuple = (16, 32, 64, 128)
    head_hidden: int = 256
    refine_steps: int = 3
    max_history: int = 8
    context_hidden: int = 128
    context_channels: int = 16

    @classmethod
    def from_dict(cls, d: dict) -> "RegressorConfig":
        cfg = cls(**d)
        cfg.encoder_widths = tuple(cfg.encoder_widths)
        return cfg


def u_to_params(u: torch.Tensor) -> torch.Tensor:
    """Map the unconstrained 85-vector (log-scale slot) to public params."""
    s = torch.exp(u[..., 82:83])
    return torch.cat([u[..., :82], s, u[..., 83:]], dim=-1)


def params_to_u(p: torch.Tensor) -> torch.Tensor:
    """Inverse of u_to_params; requires scale > 0."""
    s = torch.log(p[..., 82:83])
    return torch.cat([p[..., :82], s, p[..., 83:]], dim=-1)


@dataclass
class ContextAffine:
    """Per-channel feature modulation f' = gamma * f + delta."""

    gamma: torch.Tensor
    delta: torch.Tensor

    @classmethod
    def identity(cls, feature_dim: int, dtype=torch.float32) -> "ContextAffine":
        return cls(gamma=torch.ones(feature_dim, dtype=dtype),
                   delta=torch.zeros(feature_dim, dtype=dtype))

    def apply(self, features: torch.Tensor) -> torch.Tensor:
        return self.gamma * features + self.delta


class ContextNetwork(nn.Module):
    """History of past parameter estimates -> feature modulation.

    Rows of the history are ordered oldest to newest.  Shorter histories are
    padded at the old end by repeating the oldest row; longer ones keep the
    most recent max_history rows; an empty history short-circuits to the
    identity modulation.
    """

    def __init__(self, config: RegressorConfig = None):
        super().__init__()
        self.config = config or RegressorConfig()
        c = self.config
        self.conv = nn.Conv1d(c.max_history, c.context_channels, kernel_size=1)
        self.fc = nn.Linear(c.context_channels * PARAM_DIM, c.context_hidden)
        self.gamma_head = nn.Linear(c.context_hidden, c.feature_dim)
        self.delta_head = nn.Linear(c.context_hidden, c.feature_dim)
        self.act = nn.LeakyReLU(0.2)

    def init_weights(self, seed: int = 0):
        g = torch.Generator().manual_seed(seed)
        for m in self.modules():
            if isinstance(m, (nn.Conv1d, nn.Linear)):
                m.weight.data.normal_(0.0, 0.01, generator=g)
                if m.bias is not None:
                    m.bias.data.zero_()
        return self

    def _prepare(self, history: torch.Tensor) -> torch.Tensor:
        """Pad/crop (N, 85) history to exactly (max_history, 85)."""
        n = history.shape[0]
        m = self.config.max_history
        if n > m:
            return history[-m:]
        if n < m:
            pad = history[0:1].expand(m - n, -1)
            return torch.cat([pad, history], dim=0)
        return history

    def forward(self, history: torch.Tensor) -> ContextAffine:
        squeeze = history.dim() == 2
        if squeeze:
            history = history.unsqueeze(0)
        h = torch.stack([self._prepare(row) for row in history])  # (B, M, 85)
        x = self.act(self.conv(h))                                # (B, 16, 85)
        x = x.reshape(x.shape[0], -1)                             # (B, 1360)
        x = self.act(self.fc(x))                                  # (B, 128)
        gamma = 1.0 + self.gamma_head(x)                          # (B, 2048)
        delta = self.delta_head(x)
        if squeeze:
            gamma, delta = gamma[0], delta[0]
        return ContextAffine(gamma=gamma, delta=delta)

    def shape_trace(self, history: torch.Tensor) -> list:
        """Intermediate shapes for a single (N, 85) history, for audits."""
        h = self._prepare(history).unsqueeze(0)
        trace = [("input", tuple(history.shape))]
        x = self.act(self.conv(h))
        trace.append(("conv", tuple(x.shape[1:])))
        x = x.reshape(1, -1)
        trace.append(("flatten", tuple(x.shape[1:])))
        x = self.act(self.fc(x))
        trace.append(("hidden", tuple(x.shape[1:])))
        trace.append(("gamma", tuple(self.gamma_head(x).shape[1:])))
        trace.append(("delta", tuple(self.delta_head(x).shape[1:])))
        return trace


class BodyRegressor(nn.Module):
    """Image -> body parameter vector, iterative refinement from the mean."""

    def __init__(self, config: RegressorConfig = None):
        super().__init__()
        self.config = config or RegressorConfig()
        c = self.config
        layers = []
        prev = 3
        for w in c.encoder_widths:
            layers += [nn.Conv2d(prev, w, 3, stride=2, padding=1),
                       nn.GroupNorm(4, w), nn.ReLU(inplace=True)]
            prev = w
        self.encoder = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d(2)
        self.to_feature = nn.Linear(prev * 4, c.feature_dim)
        self.head = nn.Sequential(
            nn.Linear(c.feature_dim + PARAM_DIM, c.head_hidden), nn.ReLU(inplace=True),
            nn.Linear(c.head_hidden, c.head_hidden), nn.ReLU(inplace=True),
            nn.Linear(c.head_hidden, PARAM_DIM),
        )
        self.register_buffer("mean_u", torch.zeros(PARAM_DIM))

    def init_weights(self, seed: int = 0):
        g = torch.Generator().manual_seed(seed)
        for m in self.modules():
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                fan_in = m.weight.shape[1] * (m.weight[0, 0].numel()
                                              if m.weight.dim() > 2 else 1)
                bound = float(np.sqrt(6.0 / fan_in))
                m.weight.data.uniform_(-bound, bound, generator=g)
                if m.bias is not None:
                    m.bias.data.zero_()
        # tame the head's last layer so step 0 stays near the mean params
        self.head[-1].weight.data.mul_(0.01)
        return self

    def features(self, images: torch.Tensor) -> torch.Tensor:
        """images: (B, 3, H, W) float in [0, 1] -> (B, feature_dim)."""
        x = self.encoder(images - 0.5)
        x = self.pool(x).flatten(1)
        return self.to_feature(x)

    def params_from_features(self, feat: torch.Tensor) -> torch.Tensor:
        u = self.mean_u.to(feat.dtype).expand(feat.shape[0], -1)
        for _ in range(self.config.refine_steps):
            u = u + self.head(torch.cat([feat, u], dim=1))
        return u_to_params(u)

    def forward(self, images: torch.Tensor,
                context: ContextAffine | None = None) -> torch.Tensor:
        feat = self.features(images)
        if context is not None:
            feat = context.apply(feat)
        return self.params_from_features(feat)

    @torch.no_grad()
    def predict(self, image: np.ndarray,
                context: ContextAffine | None = None) -> BodyParams:
        """Single (H, W, 3) float image in [0, 1] -> BodyParams."""
        x = torch.as_tensor(image, dtype=torch.float32).permute(2, 0, 1).unsqueeze(0)
        vec = self.forward(x, context)[0]
        return BodyParams.from_flat(vec)


# ---------------------------------------------------------------------------
# Checkpoint archive
# ---------------------------------------------------------------------------

def save_checkpoint(path, config: dict, tensors: dict):
    """Archive layout: magic, uint32 header length, JSON header (config plus
    an ordered tensor directory), then raw little-endian float32 payloads in
    directory order.  Serialization is deterministic for fixed inputs."""
    names = sorted(tensors.keys())
    arrays = {}
    directory = []
    for name in names:
        a = tensors[name]
        if isinstance(a, torch.Tensor):
            a = a.detach().cpu().numpy()
        a = np.asarray(a, dtype="<f4")
        arrays[name] = a
        directory.append({"name": name, "shape": list(a.shape)})
    header = json.dumps({"version": 1, "config": config, "tensors": directory},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for name in names:
            fh.write(arrays[name].tobytes())


def load_checkpoint(path) -> tuple:
    """Returns (config dict, {name: float32 array})."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a checkpoint archive (magic {magic!r})")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        tensors = {}
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * 4)
            if len(buf) != count * 4:
                raise ValueError("checkpoint archive truncated")
            tensors[entry["name"]] = np.frombuffer(buf, dtype="<f4").reshape(shape).copy()
    return header["config"], tensors


def save_models(path, config: RegressorConfig, model: BodyRegressor,
                context: ContextNetwork | None = None, extra: dict | None = None):
    cfg = {"regressor": asdict(config), "has_context": context is not None}
    if extra:
        cfg["extra"] = extra
    tensors = {f"model.{k}": v for k, v in model.state_dict().items()}
    if context is not None:
        tensors.update({f"context.{k}": v for k, v in context.state_dict().items()})
    save_checkpoint(path, cfg, tensors)


def load_models(path) -> tuple:
    """Returns (RegressorConfig, BodyRegressor, ContextNetwork | None, extra)."""
    cfg, tensors = load_checkpoint(path)
    rcfg = RegressorConfig.from_dict(cfg["regressor"])
    model = BodyRegressor(rcfg)
    state = {k[len("model."):]: torch.as_tensor(v)
             for k, v in tensors.items() if k.startswith("model.")}
    model.load_state_dict(state)
    context = None
    if cfg.get("has_context"):
        context = ContextNetwork(rcfg)
        cstate = {k[len("context."):]: torch.as_tensor(v)
                  for k, v in tensors.items() if k.startswith("context.")}
        context.load_state_dict(cstate)
    return rcfg, model, context, cfg.get("extra", {})
