"""Software renderer for the synthetic world.

Flat-shaded z-buffer rasterization of the posed template over a smooth noise
background.  Besides the color image the rasterizer keeps per-pixel face ids
and barycentric coordinates, which is what makes exact ground-truth flow
between two configurations of the same body cheap to compute.

Depth convention: depth of a surface point is its camera-space z, faces with
any vertex at z <= 0 are behind the camera and are culled.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from numba import njit

from .body import BodyParams, MeshTemplate, forward, project

# A vertex counts as visible when its depth is within this margin (meters)
# of the rendered depth at its pixel.
DEPTH_EPS = 1e-3
# Slack (meters) when testing whether a reprojected surface point is occluded
# in the second frame; looser than DEPTH_EPS because the test compares against
# a depth buffer sampled at pixel centers, not at the exact point.
OCCLUSION_EPS = 5e-3

_LIGHT = np.array([0.3, -0.5, -0.8])
_LIGHT = _LIGHT / np.linalg.norm(_LIGHT)


@njit(cache=True)
def _raster_kernel(px, py, z, faces, depth, face_id, bary):
    H, W = depth.shape
    for f in range(faces.shape[0]):
        a, b, c = faces[f, 0], faces[f, 1], faces[f, 2]
        if z[a] <= 0.0 or z[b] <= 0.0 or z[c] <= 0.0:
            continue
        x0, y0 = px[a], py[a]
        x1, y1 = px[b], py[b]
        x2, y2 = px[c], py[c]
        den = (x1 - x0) * (y2 - y0) - (y1 - y0) * (x2 - x0)
        if den == 0.0:
            continue
        xmin = min(x0, min(x1, x2))
        xmax = max(x0, max(x1, x2))
        ymin = min(y0, min(y1, y2))
        ymax = max(y0, max(y1, y2))
        j0 = max(int(np.ceil(xmin - 0.5)), 0)
        j1 = min(int(np.floor(xmax - 0.5)), W - 1)
        i0 = max(int(np.ceil(ymin - 0.5)), 0)
        i1 = min(int(np.floor(ymax - 0.5)), H - 1)
        for i in range(i0, i1 + 1):
            sy = i + 0.5
            for j in range(j0, j1 + 1):
                sx = j + 0.5
                w0 = ((x1 - sx) * (y2 - sy) - (y1 - sy) * (x2 - sx)) / den
                w1 = ((x2 - sx) * (y0 - sy) - (y2 - sy) * (x0 - sx)) / den
                w2 = 1.0 - w0 - w1
                if w0 < 0.0 or w1 < 0.0 or w2 < 0.0:
                    continue
                d = w0 * z[a] + w1 * z[b] + w2 * z[c]
                if d < depth[i, j]:
                    depth[i, j] = d
                    face_id[i, j] = f
                    bary[i, j, 0] = w0
                    bary[i, j, 1] = w1
                    bary[i, j, 2] = w2


def rasterize(verts_px: np.ndarray, verts_z: np.ndarray, faces: np.ndarray,
              image_size: tuple):
    """Z-buffer pass at pixel centers.

    Returns (depth, face_id, barycentric); depth is +inf and face_id -1 where
    nothing rendered.
    """
    H, W = image_size
    depth = np.full((H, W), np.inf, dtype=np.float64)
    face_id = np.full((H, W), -1, dtype=np.int32)
    bary = np.zeros((H, W, 3), dtype=np.float64)
    _raster_kernel(np.ascontiguousarray(verts_px[:, 0]),
                   np.ascontiguousarray(verts_px[:, 1]),
                   np.ascontiguousarray(verts_z, dtype=np.float64),
                   np.ascontiguousarray(faces, dtype=np.int64),
                   depth, face_id, bary)
    return depth, face_id, bary


def _pose_and_project(template: MeshTemplate, params: BodyParams,
                      image_size: tuple):
    mesh = forward(template, params.detach())
    verts = mesh.vertices.detach().cpu().numpy().astype(np.float64)
    px = project(mesh.vertices, params.detach().pi, image_size)
    return verts, px.detach().cpu().numpy().astype(np.float64)


def smooth_noise_background(image_size: tuple, seed: int,
                            cell: int = 8) -> np.ndarray:
    """Low-frequency random background in [0.2, 0.8], bilinear-upsampled."""
    H, W = image_size
    rng = np.random.default_rng(seed)
    gh, gw = H // cell + 2, W // cell + 2
    grid = rng.uniform(0.2, 0.8, size=(gh, gw, 3))
    ys = (np.arange(H) + 0.5) / cell
    xs = (np.arange(W) + 0.5) / cell
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    g00 = grid[y0][:, x0]
    g01 = grid[y0][:, x0 + 1]
    g10 = grid[y0 + 1][:, x0]
    g11 = grid[y0 + 1][:, x0 + 1]
    out = (g00 * (1 - fy) * (1 - fx) + g01 * (1 - fy) * fx
           + g10 * fy * (1 - fx) + g11 * fy * fx)
    return out.astype(np.float32)


def face_palette(num_faces: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.uniform(0.1, 0.95, size=(num_faces, 3)).astype(np.float32)


@dataclass
class RenderedFrame:
    """One rendered view plus the buffers the geometry passes produce."""

    image: np.ndarray        # (H, W, 3) float32 in [0, 1]
    depth: np.ndarray        # (H, W) float64, +inf on background
    face_id: np.ndarray      # (H, W) int32, -1 on background
    barycentric: np.ndarray  # (H, W, 3) float64
    mask: np.ndarray         # (H, W) bool, body coverage


def render(template: MeshTemplate, params: BodyParams, image_size: tuple,
           palette_seed: int = 0, background_seed: int = 0) -> RenderedFrame:
    """Flat-shaded render of the posed body over a smooth noise background.

    The palette seed fixes per-face colors (keep it constant across a dataset
    so appearance tracks geometry); the background seed varies freely.
    """
    verts, px = _pose_and_project(template, params, image_size)
    depth, face_id, bary = rasterize(px, verts[:, 2], template.faces, image_size)
    mask = face_id >= 0

    colors = face_palette(template.num_faces, palette_seed)
    tri = verts[template.faces]                      # (F, 3, 3)
    n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    n /= np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-12)
    shade = (0.55 + 0.45 * np.abs(n @ _LIGHT)).astype(np.float32)
    lit = np.clip(colors * shade[:, None], 0.0, 1.0)

    image = smooth_noise_background(image_size, background_seed).copy()
    image[mask] = lit[face_id[mask]]
    return RenderedFrame(image=image, depth=depth, face_id=face_id,
                         barycentric=bary, mask=mask)


def visibility(template: MeshTemplate, params: BodyParams, image_size: tuple,
               depth_buffer: np.ndarray | None = None) -> np.ndarray:
    """Per-vertex visibility mask (V,) bool.

    A vertex is visible iff its projection lands in-frame and its depth is
    within DEPTH_EPS of the depth buffer at that pixel.  Pass a depth buffer
    rendered from the same params to skip the internal z-pass.
    """
    H, W = image_size
    verts, px = _pose_and_project(template, params, image_size)
    if depth_buffer is None:
        depth_buffer, _, _ = rasterize(px, verts[:, 2], template.faces, image_size)
    mask = np.zeros(template.num_vertices, dtype=bool)
    cols = np.floor(px[:, 0]).astype(int)
    rows = np.floor(px[:, 1]).astype(int)
    inside = (px[:, 0] >= 0) & (px[:, 0] < W) & (px[:, 1] >= 0) & (px[:, 1] < H) \
        & (verts[:, 2] > 0)
    idx = np.nonzero(inside)[0]
    mask[idx] = verts[idx, 2] <= depth_buffer[rows[idx], cols[idx]] + DEPTH_EPS
    return mask


# ---------------------------------------------------------------------------
# Flow maps
# ---------------------------------------------------------------------------

_FLOW_MAGIC = b"FFLW"


@dataclass
class FlowMap:
    """Dense 2D flow with a validity plane.

    dx/dy are pixel displacements stored at pixel centers; valid == 0 marks
    background or points that are occluded / out of frame at the far end.
    """

    dx: np.ndarray     # (H, W) float32
    dy: np.ndarray     # (H, W) float32
    valid: np.ndarray  # (H, W) uint8

    @property
    def shape(self):
        return self.dx.shape

    def magnitude(self) -> np.ndarray:
        return np.hypot(self.dx, self.dy)

    def save(self, path):
        H, W = self.dx.shape
        with open(path, "wb") as fh:
            fh.write(_FLOW_MAGIC)
            fh.write(struct.pack("<II", H, W))
            fh.write(self.dx.astype("<f4").tobytes())
            fh.write(self.dy.astype("<f4").tobytes())
            fh.write(self.valid.astype(np.uint8).tobytes())

    @classmethod
    def load(cls, path) -> "FlowMap":
        with open(path, "rb") as fh:
            magic = fh.read(4)
            if magic != _FLOW_MAGIC:
                raise ValueError(f"not a flow file (magic {magic!r})")
            H, W = struct.unpack("<II", fh.read(8))
            n = H * W
            dx = np.frombuffer(fh.read(n * 4), dtype="<f4").reshape(H, W).copy()
            dy = np.frombuffer(fh.read(n * 4), dtype="<f4").reshape(H, W).copy()
            valid = np.frombuffer(fh.read(n), dtype=np.uint8).reshape(H, W).copy()
        return cls(dx=dx, dy=dy, valid=valid)


def ground_truth_flow(template: MeshTemplate, params_1: BodyParams,
                      params_2: BodyParams, image_size: tuple,
                      frame_1: RenderedFrame | None = None) -> FlowMap:
    """Exact flow from configuration 1 to configuration 2.

    Every body pixel in frame 1 names a surface point through its face id and
    barycentric coordinates; the same material point is carried through the
    second configuration and reprojected.  valid drops background pixels and
    points that leave the frame or end up occluded in frame 2.
    """
    H, W = image_size
    if frame_1 is None:
        v1, p1 = _pose_and_project(template, params_1, image_size)
        depth1, face_id, bary = rasterize(p1, v1[:, 2], template.faces, image_size)
    else:
        face_id, bary = frame_1.face_id, frame_1.barycentric

    mesh2 = forward(template, params_2.detach())
    v2 = mesh2.vertices.detach().cpu().numpy().astype(np.float64)
    p2 = project(mesh2.vertices, params_2.detach().pi, image_size)
    p2 = p2.detach().cpu().numpy().astype(np.float64)
    depth2, _, _ = rasterize(p2, v2[:, 2], template.faces, image_size)

    dx = np.zeros((H, W), dtype=np.float32)
    dy = np.zeros((H, W), dtype=np.float32)
    valid = np.zeros((H, W), dtype=np.uint8)

    body = face_id >= 0
    rows, cols = np.nonzero(body)
    if rows.size:
        f = face_id[rows, cols]
        b = bary[rows, cols]                              # (N, 3)
        tri2 = template.faces[f]                          # (N, 3)
        pt_px = np.einsum("nk,nkc->nc", b, p2[tri2])      # (N, 2)
        pt_z = np.einsum("nk,nk->n", b, v2[tri2][..., 2])
        cx = cols + 0.5
        cy = rows + 0.5
        dx[rows, cols] = (pt_px[:, 0] - cx).astype(np.float32)
        dy[rows, cols] = (pt_px[:, 1] - cy).astype(np.float32)

        in2 = (pt_px[:, 0] >= 0) & (pt_px[:, 0] < W) \
            & (pt_px[:, 1] >= 0) & (pt_px[:, 1] < H) & (pt_z > 0)
        r2 = np.clip(np.floor(pt_px[:, 1]).astype(int), 0, H - 1)
        c2 = np.clip(np.floor(pt_px[:, 0]).astype(int), 0, W - 1)
        unoccluded = pt_z <= depth2[r2, c2] + OCCLUSION_EPS
        valid[rows, cols] = (in2 & unoccluded).astype(np.uint8)
    return FlowMap(dx=dx, dy=dy, valid=valid)
