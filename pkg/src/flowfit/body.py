"""Articulated body model: parameters, mesh template, skinning and projection.

The body is parameterized SMPL-style by per-joint axis-angle rotations theta
(J x 3), linear shape coefficients beta (10,) and a weak-perspective camera
pi = (scale, tx, ty).  The flattened vector layout used throughout the code
base is [theta (72), beta (10), pi (3)], 85 numbers total for J = 24.

Conventions (used everywhere, do not change in one place only):
  * world/camera: x right, y down, z away from the camera; depth of a vertex
    is its z coordinate and anything with z <= 0 is behind the camera,
  * image: pixel (row i, col j) covers [j, j+1) x [i, i+1) with its sample
    point at (j + 0.5, i + 0.5); a projected point p lies in-frame when
    0 <= p_x < W and 0 <= p_y < H.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch

NUM_JOINTS = 24
NUM_BETAS = 10
PARAM_DIM = NUM_JOINTS * 3 + NUM_BETAS + 3  # 85

# Kinematic tree of the 24-joint skeleton (index -> parent, root = -1).
PARENTS = (
    -1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8,
    9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21,
)

JOINT_NAMES = (
    "pelvis", "l_hip", "r_hip", "spine1", "l_knee", "r_knee", "spine2",
    "l_ankle", "r_ankle", "spine3", "l_foot", "r_foot", "neck", "l_collar",
    "r_collar", "head", "l_shoulder", "r_shoulder", "l_elbow", "r_elbow",
    "l_wrist", "r_wrist", "l_hand", "r_hand",
)

_TWO_PI = 2.0 * np.pi


class ValidationError(ValueError):
    """Raised when parameters or templates violate their documented domain."""


def _as_tensor(value, shape, name) -> torch.Tensor:
    t = torch.as_tensor(value)
    if not t.is_floating_point():
        t = t.double()
    if tuple(t.shape) != tuple(shape):
        raise ValidationError(f"{name}: expected shape {tuple(shape)}, got {tuple(t.shape)}")
    finite = torch.isfinite(t.detach())
    if not bool(finite.all()):
        bad = torch.nonzero(~finite)[0].tolist()
        raise ValidationError(f"{name}: non-finite entry at index {bad}")
    return t


def canonicalize_axis_angle(theta: torch.Tensor) -> torch.Tensor:
    """Reduce each axis-angle norm into [0, 2*pi) while keeping the axis.

    Identity for vectors that are already canonical, including under autograd
    (the non-canonical branch is only selected where the norm crosses 2*pi).
    """
    norms = torch.linalg.vector_norm(theta, dim=-1, keepdim=True)  # (J, 1)
    safe = torch.clamp(norms, min=1e-12)
    wrapped = torch.remainder(norms, _TWO_PI)
    scale = torch.where(norms >= _TWO_PI, wrapped / safe, torch.ones_like(norms))
    return theta * scale


@dataclass(frozen=True)
class BodyParams:
    """One body configuration: pose, shape and weak-perspective camera.

    theta is canonicalized on construction (rotation norms in [0, 2*pi)),
    scale must be strictly positive.  Tensors keep whatever float dtype they
    arrive with so the same type serves float32 training and float64 checks.
    """

    theta: torch.Tensor  # (24, 3) axis-angle per joint
    beta: torch.Tensor   # (10,) shape coefficients
    pi: torch.Tensor     # (3,) = (scale, tx, ty)

    def __post_init__(self):
        theta = canonicalize_axis_angle(_as_tensor(self.theta, (NUM_JOINTS, 3), "theta"))
        beta = _as_tensor(self.beta, (NUM_BETAS,), "beta")
        pi = _as_tensor(self.pi, (3,), "pi")
        if float(pi[0].detach()) <= 0.0:
            raise ValidationError(f"pi: scale must be > 0, got {float(pi[0].detach())}")
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "pi", pi)

    @property
    def scale(self) -> float:
        return float(self.pi[0].detach())

    def flat(self) -> torch.Tensor:
        """Flatten to the canonical 85-vector [theta, beta, pi]."""
        return torch.cat([self.theta.reshape(-1), self.beta, self.pi])

    @classmethod
    def from_flat(cls, vec) -> "BodyParams":
        v = torch.as_tensor(vec)
        if v.shape != (PARAM_DIM,):
            raise ValidationError(f"flat params: expected shape ({PARAM_DIM},), got {tuple(v.shape)}")
        return cls(theta=v[:72].reshape(NUM_JOINTS, 3), beta=v[72:82], pi=v[82:85])

    @classmethod
    def rest(cls, dtype=torch.float64) -> "BodyParams":
        return cls(
            theta=torch.zeros(NUM_JOINTS, 3, dtype=dtype),
            beta=torch.zeros(NUM_BETAS, dtype=dtype),
            pi=torch.tensor([0.9, 0.0, 0.0], dtype=dtype),
        )

    @classmethod
    def random(cls, rng: np.random.Generator, pose_std=0.15, shape_std=0.8,
               dtype=torch.float64) -> "BodyParams":
        """Mild random configuration around the rest pose (for tests/demos)."""
        theta = rng.normal(0.0, pose_std, size=(NUM_JOINTS, 3))
        beta = rng.normal(0.0, shape_std, size=(NUM_BETAS,))
        pi = np.array([
            np.exp(rng.normal(np.log(0.9), 0.1)),
            rng.normal(0.0, 0.05),
            rng.normal(0.0, 0.05),
        ])
        return cls(
            theta=torch.as_tensor(theta, dtype=dtype),
            beta=torch.as_tensor(beta, dtype=dtype),
            pi=torch.as_tensor(pi, dtype=dtype),
        )

    def detach(self) -> "BodyParams":
        return BodyParams(self.theta.detach().clone(), self.beta.detach().clone(),
                          self.pi.detach().clone())

    def numpy(self) -> np.ndarray:
        return self.flat().detach().cpu().numpy()


@dataclass
class MeshTemplate:
    """Rest mesh plus the linear and skinning structure driving it.

    Invariants checked by ``validate``:
      * parents encode a tree rooted at joint 0 (parents[0] = -1, every other
        parent index is smaller than its child),
      * skinning weight rows are non-negative and sum to 1,
      * joint_regressor rows sum to 1,
      * face indices are in range.
    """

    rest_vertices: np.ndarray    # (V, 3) float64
    faces: np.ndarray            # (F, 3) int32
    joint_regressor: np.ndarray  # (J, V)
    skinning_weights: np.ndarray # (V, J)
    shape_basis: np.ndarray      # (10, V, 3)
    parents: np.ndarray          # (J,) int32
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def num_vertices(self) -> int:
        return self.rest_vertices.shape[0]

    @property
    def num_faces(self) -> int:
        return self.faces.shape[0]

    @property
    def num_joints(self) -> int:
        return self.parents.shape[0]

    def validate(self):
        V, J = self.num_vertices, self.num_joints
        if self.rest_vertices.shape != (V, 3):
            raise ValidationError("rest_vertices must be (V, 3)")
        if self.parents[0] != -1:
            raise ValidationError("parents[0] must be -1 (root)")
        for j in range(1, J):
            if not (0 <= self.parents[j] < j):
                raise ValidationError(f"parents[{j}]={self.parents[j]} does not precede its child")
        if self.faces.min() < 0 or self.faces.max() >= V:
            raise ValidationError("face indices out of range")
        if self.joint_regressor.shape != (J, V):
            raise ValidationError("joint_regressor must be (J, V)")
        if self.skinning_weights.shape != (V, J):
            raise ValidationError("skinning_weights must be (V, J)")
        if self.shape_basis.shape != (NUM_BETAS, V, 3):
            raise ValidationError(f"shape_basis must be ({NUM_BETAS}, V, 3)")
        if np.any(self.skinning_weights < 0):
            raise ValidationError("skinning weights must be non-negative")
        if not np.allclose(self.skinning_weights.sum(axis=1), 1.0, atol=1e-6):
            raise ValidationError("skinning weight rows must sum to 1")
        if not np.allclose(self.joint_regressor.sum(axis=1), 1.0, atol=1e-6):
            raise ValidationError("joint_regressor rows must sum to 1")
        return self

    def tensors(self, dtype=torch.float64) -> dict:
        """Torch copies of the arrays, cached per dtype."""
        key = str(dtype)
        if key not in self._cache:
            self._cache[key] = {
                "rest_vertices": torch.as_tensor(self.rest_vertices, dtype=dtype),
                "joint_regressor": torch.as_tensor(self.joint_regressor, dtype=dtype),
                "skinning_weights": torch.as_tensor(self.skinning_weights, dtype=dtype),
                "shape_basis": torch.as_tensor(self.shape_basis, dtype=dtype),
            }
        return self._cache[key]


@dataclass(frozen=True)
class BodyMesh:
    """Posed surface: world-space vertices and joints for one BodyParams."""

    vertices: torch.Tensor  # (V, 3)
    joints: torch.Tensor    # (J, 3)


def rodrigues(omega: torch.Tensor) -> torch.Tensor:
    """Axis-angle (..., 3) -> rotation matrices (..., 3, 3).

    Branch-free form R = I + sinc(t/pi) K + 0.5 sinc(t/2pi)^2 K^2 with
    K = skew(omega); smooth through t = 0 so gradient checks at the rest
    pose behave.
    """
    tiny = torch.finfo(omega.dtype).tiny
    theta = torch.sqrt((omega * omega).sum(-1, keepdim=True).unsqueeze(-1) + tiny)
    x, y, z = omega[..., 0], omega[..., 1], omega[..., 2]
    zero = torch.zeros_like(x)
    K = torch.stack([
        torch.stack([zero, -z, y], dim=-1),
        torch.stack([z, zero, -x], dim=-1),
        torch.stack([-y, x, zero], dim=-1),
    ], dim=-2)  # (..., 3, 3)
    eye = torch.eye(3, dtype=omega.dtype, device=omega.device).expand(K.shape)
    a = torch.sinc(theta / torch.pi)
    b = 0.5 * torch.sinc(theta / (2.0 * torch.pi)) ** 2
    return eye + a * K + b * (K @ K)


def forward_batch(template: MeshTemplate, theta: torch.Tensor,
                  beta: torch.Tensor) -> tuple:
    """Batched shape + pose + skinning.

    theta: (B, J, 3), beta: (B, 10).  Returns (vertices (B, V, 3),
    joints (B, J, 3)).  Differentiable w.r.t. both inputs.
    """
    dtype = theta.dtype
    T = template.tensors(dtype)
    shaped = T["rest_vertices"] + torch.einsum(
        "bk,kvc->bvc", beta, T["shape_basis"])               # (B, V, 3)
    joints_rest = torch.einsum("jv,bvc->bjc", T["joint_regressor"], shaped)

    R = rodrigues(theta)                                     # (B, J, 3, 3)
    J = template.num_joints
    parents = template.parents
    glob_R = [None] * J
    glob_t = [None] * J
    glob_R[0] = R[:, 0]
    glob_t[0] = joints_rest[:, 0]
    for j in range(1, J):
        p = int(parents[j])
        offset = joints_rest[:, j] - joints_rest[:, p]
        glob_R[j] = glob_R[p] @ R[:, j]
        glob_t[j] = glob_t[p] + torch.einsum("bxy,by->bx", glob_R[p], offset)
    Rw = torch.stack(glob_R, dim=1)                          # (B, J, 3, 3)
    joints_world = torch.stack(glob_t, dim=1)                # (B, J, 3)

    W = T["skinning_weights"]                                # (V, J)
    VR = torch.einsum("vj,bjxy->bvxy", W, Rw)                # (B, V, 3, 3)
    anchor = torch.einsum("vj,bjxy,bjy->bvx", W, Rw, joints_rest)
    trans = torch.einsum("vj,bjc->bvc", W, joints_world)
    verts = torch.einsum("bvxy,bvy->bvx", VR, shaped) - anchor + trans
    return verts, joints_world


def forward(template: MeshTemplate, params: BodyParams) -> BodyMesh:
    """Shape, pose and skin the template; returns world-space mesh.

    Shaped rest vertices feed the joint regressor, the kinematic chain
    accumulates per-joint transforms root-down and linear blend skinning
    carries vertices along.  Differentiable w.r.t. theta and beta.
    """
    verts, joints = forward_batch(template, params.theta.unsqueeze(0),
                                  params.beta.unsqueeze(0))
    return BodyMesh(vertices=verts[0], joints=joints[0])


def project(points: torch.Tensor, pi: torch.Tensor, image_size: tuple) -> torch.Tensor:
    """Weak-perspective projection of (..., 3) points to pixel coordinates.

    p_x = ((s * (x + tx)) + 1) / 2 * W and likewise for y with H; depth is
    ignored.  image_size is (H, W).
    """
    H, W = image_size
    s, tx, ty = pi[0], pi[1], pi[2]
    px = (s * (points[..., 0] + tx) + 1.0) * 0.5 * W
    py = (s * (points[..., 1] + ty) + 1.0) * 0.5 * H
    return torch.stack([px, py], dim=-1)


def project_params(template: MeshTemplate, params: BodyParams,
                   image_size: tuple) -> tuple:
    """Convenience: forward + project. Returns (mesh, vertex_px, joint_px)."""
    mesh = forward(template, params)
    return (mesh,
            project(mesh.vertices, params.pi, image_size),
            project(mesh.joints, params.pi, image_size))


def finite_difference_gradient(op: Callable[[np.ndarray], float],
                               params: np.ndarray,
                               eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar op over a flat parameter vector.

    eps outside [1e-7, 1e-3] is rejected (too small drowns in rounding, too
    large leaves the linear regime of the kinematic chain).
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ValidationError(f"finite-difference eps {eps} outside [1e-7, 1e-3]")
    p = np.asarray(params, dtype=np.float64).copy()
    if p.ndim != 1:
        raise ValidationError("params must be a flat vector")
    grad = np.zeros_like(p)
    for i in range(p.size):
        save = p[i]
        p[i] = save + eps
        hi = op(p)
        p[i] = save - eps
        lo = op(p)
        p[i] = save
        if np.ndim(hi) != 0:
            raise ValidationError("op must return a scalar")
        grad[i] = (float(hi) - float(lo)) / (2.0 * eps)
    return grad


# ---------------------------------------------------------------------------
# Template archive IO
# ---------------------------------------------------------------------------

_TEMPLATE_MAGIC = b"FFTM"
_TEMPLATE_VERSION = 1


def save_template(template: MeshTemplate, path):
    """Binary template archive: magic, version, (V, F, J) header, then the
    arrays in declaration order, little-endian.  Float payloads are float32,
    index payloads int32."""
    template.validate()
    V, F, J = template.num_vertices, template.num_faces, template.num_joints
    with open(path, "wb") as fh:
        fh.write(_TEMPLATE_MAGIC)
        fh.write(struct.pack("<III", _TEMPLATE_VERSION, 0, 0))
        fh.write(struct.pack("<III", V, F, J))
        fh.write(template.rest_vertices.astype("<f4").tobytes())
        fh.write(template.faces.astype("<i4").tobytes())
        fh.write(template.joint_regressor.astype("<f4").tobytes())
        fh.write(template.skinning_weights.astype("<f4").tobytes())
        fh.write(template.shape_basis.astype("<f4").tobytes())
        fh.write(template.parents.astype("<i4").tobytes())


def load_template(path) -> MeshTemplate:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _TEMPLATE_MAGIC:
            raise ValidationError(f"not a template archive (magic {magic!r})")
        head = fh.read(24)
        if len(head) != 24:
            raise ValidationError("template archive truncated")
        version, _, _, V, F, J = struct.unpack("<IIIIII", head)
        if version != _TEMPLATE_VERSION:
            raise ValidationError(f"unsupported template version {version}")

        def arr(count, dt):
            buf = fh.read(count * 4)
            if len(buf) != count * 4:
                raise ValidationError("template archive truncated")
            return np.frombuffer(buf, dtype=dt).copy()

        rest = arr(V * 3, "<f4").astype(np.float64).reshape(V, 3)
        faces = arr(F * 3, "<i4").astype(np.int32).reshape(F, 3)
        regressor = arr(J * V, "<f4").astype(np.float64).reshape(J, V)
        weights = arr(V * J, "<f4").astype(np.float64).reshape(V, J)
        basis = arr(NUM_BETAS * V * 3, "<f4").astype(np.float64).reshape(NUM_BETAS, V, 3)
        parents = arr(J, "<i4").astype(np.int32)
    # float32 round-trip can nudge row sums off by ~1e-7; renormalize exactly.
    weights = weights / weights.sum(axis=1, keepdims=True)
    regressor = regressor / regressor.sum(axis=1, keepdims=True)
    return MeshTemplate(rest, faces, regressor, weights, basis, parents).validate()


# ---------------------------------------------------------------------------
# Default capsule humanoid
# ---------------------------------------------------------------------------

# Per-joint capsule layout: joint -> (rings, segments, radius).  Counts are
# chosen so the vertex total lands exactly on 402.
_CAPSULE_SPEC = {
    0: (3, 8, 0.110), 3: (3, 8, 0.105), 6: (3, 8, 0.115), 9: (3, 8, 0.095),
    15: (3, 8, 0.090),
    12: (3, 6, 0.048), 13: (3, 6, 0.050), 14: (3, 6, 0.050),
    1: (3, 5, 0.070), 2: (3, 5, 0.070), 4: (3, 5, 0.055), 5: (3, 5, 0.055),
    7: (2, 5, 0.045), 8: (2, 5, 0.045), 10: (2, 5, 0.040), 11: (2, 5, 0.040),
    16: (2, 5, 0.045), 17: (2, 5, 0.045), 18: (2, 5, 0.040), 19: (2, 5, 0.040),
    20: (2, 5, 0.035), 21: (2, 5, 0.035), 22: (2, 5, 0.030), 23: (2, 5, 0.030),
}

# Rest joint locations, y down (negative y is up), pelvis at the origin.
_REST_JOINTS = {
    "pelvis": (0.0, 0.0, 0.0),
    "l_hip": (0.09, 0.03, 0.0), "r_hip": (-0.09, 0.03, 0.0),
    "spine1": (0.0, -0.115, 0.0), "spine2": (0.0, -0.23, 0.0),
    "spine3": (0.0, -0.33, 0.0),
    "l_knee": (0.10, 0.45, 0.0), "r_knee": (-0.10, 0.45, 0.0),
    "l_ankle": (0.10, 0.84, 0.0), "r_ankle": (-0.10, 0.84, 0.0),
    "l_foot": (0.10, 0.90, -0.09), "r_foot": (-0.10, 0.90, -0.09),
    "neck": (0.0, -0.46, 0.0), "head": (0.0, -0.55, 0.0),
    "l_collar": (0.05, -0.41, 0.0), "r_collar": (-0.05, -0.41, 0.0),
    "l_shoulder": (0.18, -0.43, 0.0), "r_shoulder": (-0.18, -0.43, 0.0),
    "l_elbow": (0.45, -0.43, 0.0), "r_elbow": (-0.45, -0.43, 0.0),
    "l_wrist": (0.70, -0.43, 0.0), "r_wrist": (-0.70, -0.43, 0.0),
    "l_hand": (0.78, -0.43, 0.0), "r_hand": (-0.78, -0.43, 0.0),
}

# Direction each leaf capsule extends in, mirroring the bone it continues.
_LEAF_TIPS = {
    10: (0.0, 0.02, -0.08), 11: (0.0, 0.02, -0.08),   # toes, toward camera
    15: (0.0, -0.22, 0.0),                             # skull above head joint
    22: (0.07, 0.0, 0.0), 23: (-0.07, 0.0, 0.0),       # finger tips
}

# Primary child giving each internal capsule its axis.
_PRIMARY_CHILD = {
    0: 3, 3: 6, 6: 9, 9: 12, 12: 15, 13: 16, 14: 17,
    1: 4, 2: 5, 4: 7, 5: 8, 7: 10, 8: 11,
    16: 18, 17: 19, 18: 20, 19: 21, 20: 22, 21: 23,
}

BODY_DEPTH = 4.0  # meters; rest pelvis sits this far in front of the camera


def _orthonormal_frame(axis: np.ndarray) -> tuple:
    axis = axis / np.linalg.norm(axis)
    helper = np.array([0.0, 0.0, 1.0]) if abs(axis[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    u = np.cross(axis, helper)
    u /= np.linalg.norm(u)
    v = np.cross(axis, u)
    return axis, u, v


def default_template() -> MeshTemplate:
    """Procedural 24-joint capsule humanoid (V = 402) used by the synthetic
    world.  One capsule per joint, rigidly skinned, base ring centered on the
    joint so the joint regressor is exact under any pose."""
    joints = np.array([_REST_JOINTS[name] for name in JOINT_NAMES], dtype=np.float64)
    joints[:, 2] += BODY_DEPTH

    verts, faces, owner, radial = [], [], [], []
    ring0 = {}  # joint -> (start index, count) of the base ring
    for j in range(NUM_JOINTS):
        rings, segs, radius = _CAPSULE_SPEC[j]
        a = joints[j]
        if j in _PRIMARY_CHILD:
            b = joints[_PRIMARY_CHILD[j]]
        else:
            b = a + np.array(_LEAF_TIPS[j])
        axis, u, v = _orthonormal_frame(b - a)
        base = len(verts)
        for r in range(rings):
            t = r / (rings - 1)
            center = a + (b - a) * t
            for k in range(segs):
                ang = 2.0 * np.pi * k / segs
                rad = np.cos(ang) * u + np.sin(ang) * v
                verts.append(center + radius * rad)
                owner.append(j)
                radial.append(rad)
        cap_a = len(verts)
        verts.append(a - radius * axis)
        owner.append(j)
        radial.append(-axis)
        cap_b = len(verts)
        verts.append(b + radius * axis)
        owner.append(j)
        radial.append(axis)
        ring0[j] = (base, segs)

        for r in range(rings - 1):
            for k in range(segs):
                k2 = (k + 1) % segs
                v00 = base + r * segs + k
                v01 = base + r * segs + k2
                v10 = base + (r + 1) * segs + k
                v11 = base + (r + 1) * segs + k2
                faces.append((v00, v10, v01))
                faces.append((v01, v10, v11))
        last = base + (rings - 1) * segs
        for k in range(segs):
            k2 = (k + 1) % segs
            faces.append((base + k2, cap_a, base + k))
            faces.append((last + k, cap_b, last + k2))

    verts = np.array(verts, dtype=np.float64)
    faces = np.array(faces, dtype=np.int32)
    owner = np.array(owner, dtype=np.int64)
    radial = np.array(radial, dtype=np.float64)
    V = verts.shape[0]

    weights = np.zeros((V, NUM_JOINTS))
    weights[np.arange(V), owner] = 1.0

    regressor = np.zeros((NUM_JOINTS, V))
    for j, (start, count) in ring0.items():
        regressor[j, start:start + count] = 1.0 / count

    basis = np.zeros((NUM_BETAS, V, 3))
    centered = verts - joints[0]
    basis[0] = centered * 0.06                       # overall size
    basis[1][:, 1] = centered[:, 1] * 0.06           # height
    basis[2][:, 0] = centered[:, 0] * 0.05           # arm span
    basis[2][:, 1] = np.maximum(centered[:, 1], 0.0) * 0.05  # leg length
    basis[3] = radial * 0.012                        # girth
    head_sel = (owner == 15)
    basis[4][head_sel] = (verts[head_sel] - joints[15]) * 0.12
    for k in range(5, NUM_BETAS):
        freq = 2.0 + 0.9 * k
        phase = 0.7 * k
        wave = np.sin(freq * centered[:, 1] + phase)
        basis[k][:, 0] = 0.006 * wave * np.cos(0.5 * k)
        basis[k][:, 2] = 0.006 * np.sin(freq * centered[:, 0] + phase)

    return MeshTemplate(verts, faces, regressor, weights, basis,
                        np.array(PARENTS, dtype=np.int32)).validate()
