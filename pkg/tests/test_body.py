import numpy as np
import pytest
import torch

from flowfit.body import (BodyParams, MeshTemplate, ValidationError,
                          canonicalize_axis_angle, default_template,
                          finite_difference_gradient, forward, forward_batch,
                          load_template, project, rodrigues, save_template,
                          PARAM_DIM)


def test_default_template_counts(template):
    assert template.num_vertices == 402
    assert template.num_joints == 24
    assert template.num_faces > 0
    template.validate()


def test_template_weight_rows_sum_to_one(template):
    assert np.allclose(template.skinning_weights.sum(axis=1), 1.0)
    assert np.all(template.skinning_weights >= 0)
    assert np.allclose(template.joint_regressor.sum(axis=1), 1.0)


def test_template_validation_rejects_bad_weights(template):
    bad = MeshTemplate(template.rest_vertices.copy(), template.faces.copy(),
                       template.joint_regressor.copy(),
                       template.skinning_weights.copy(),
                       template.shape_basis.copy(), template.parents.copy())
    bad.skinning_weights[5, :] = 0.0
    with pytest.raises(ValidationError):
        bad.validate()


def test_template_validation_rejects_bad_faces(template):
    bad = MeshTemplate(template.rest_vertices.copy(), template.faces.copy(),
                       template.joint_regressor.copy(),
                       template.skinning_weights.copy(),
                       template.shape_basis.copy(), template.parents.copy())
    bad.faces[0, 0] = template.num_vertices
    with pytest.raises(ValidationError):
        bad.validate()


def test_params_flat_roundtrip():
    rng = np.random.default_rng(0)
    for _ in range(10):
        p = BodyParams.random(rng)
        q = BodyParams.from_flat(p.flat())
        assert torch.allclose(p.flat(), q.flat())


def test_params_validation():
    theta = torch.zeros(24, 3)
    beta = torch.zeros(10)
    with pytest.raises(ValidationError):
        BodyParams(theta, beta, torch.tensor([0.0, 0.0, 0.0]))  # scale 0
    with pytest.raises(ValidationError):
        BodyParams(theta, beta, torch.tensor([-1.0, 0.0, 0.0]))
    with pytest.raises(ValidationError):
        BodyParams(theta, torch.zeros(9), torch.tensor([1.0, 0.0, 0.0]))
    bad = theta.clone()
    bad[3, 1] = float("nan")
    with pytest.raises(ValidationError):
        BodyParams(bad, beta, torch.tensor([1.0, 0.0, 0.0]))


def test_axis_angle_canonicalization():
    axis = torch.tensor([0.6, 0.0, 0.8], dtype=torch.float64)
    theta = torch.zeros(24, 3, dtype=torch.float64)
    theta[4] = axis * (2.0 * np.pi + 0.3)
    p = BodyParams(theta, torch.zeros(10, dtype=torch.float64),
                   torch.tensor([1.0, 0.0, 0.0], dtype=torch.float64))
    n = torch.linalg.vector_norm(p.theta[4])
    assert abs(float(n) - 0.3) < 1e-9
    # same rotation matrix before and after reduction
    R_big = rodrigues(theta[4])
    R_can = rodrigues(p.theta[4])
    assert torch.allclose(R_big, R_can, atol=1e-9)
    # already-canonical vectors pass through untouched
    small = torch.rand(24, 3, dtype=torch.float64)
    assert torch.equal(canonicalize_axis_angle(small), small)


def test_rodrigues_matches_oracle(chain_oracle):
    from conftest import np_rodrigues
    rng = np.random.default_rng(1)
    for _ in range(50):
        w = rng.normal(0, 1.0, 3)
        R = rodrigues(torch.as_tensor(w)).numpy()
        assert np.allclose(R, np_rodrigues(w), atol=1e-10)
        assert np.allclose(R @ R.T, np.eye(3), atol=1e-10)
        assert abs(np.linalg.det(R) - 1.0) < 1e-10


def test_identity_pose_reproduces_rest(template):
    p = BodyParams(torch.zeros(24, 3, dtype=torch.float64),
                   torch.zeros(10, dtype=torch.float64),
                   torch.tensor([1.0, 0.0, 0.0], dtype=torch.float64))
    mesh = forward(template, p)
    assert torch.allclose(mesh.vertices,
                          torch.as_tensor(template.rest_vertices), atol=1e-12)


def test_shape_basis_is_linear(template):
    for k in range(3):
        beta = torch.zeros(10, dtype=torch.float64)
        beta[k] = 1.0
        p = BodyParams(torch.zeros(24, 3, dtype=torch.float64), beta,
                       torch.tensor([1.0, 0.0, 0.0], dtype=torch.float64))
        mesh = forward(template, p)
        expected = template.rest_vertices + template.shape_basis[k]
        assert np.allclose(mesh.vertices.numpy(), expected, atol=1e-9)


def test_joints_match_regressor_under_pose(template):
    rng = np.random.default_rng(3)
    jr = torch.as_tensor(template.joint_regressor)
    for _ in range(10):
        p = BodyParams.random(rng, pose_std=0.4)
        mesh = forward(template, p)
        assert torch.allclose(jr @ mesh.vertices, mesh.joints, atol=1e-6)


def test_forward_matches_chain_oracle(template, chain_oracle):
    rng = np.random.default_rng(4)
    for _ in range(5):
        p = BodyParams.random(rng, pose_std=0.5)
        mesh = forward(template, p)
        joints, GR, jr = chain_oracle(template, p.theta.numpy(), p.beta.numpy())
        assert np.allclose(mesh.joints.numpy(), joints, atol=1e-9)
        # rigidly skinned vertices follow their owning joint's transform
        shaped = template.rest_vertices + np.einsum(
            "k,kvc->vc", p.beta.numpy(), template.shape_basis)
        owner = template.skinning_weights.argmax(axis=1)
        for v in rng.integers(0, template.num_vertices, 20):
            j = owner[v]
            expected = GR[j] @ (shaped[v] - jr[j]) + joints[j]
            assert np.allclose(mesh.vertices[v].numpy(), expected, atol=1e-9)


def test_root_rotation_preserves_distances(template):
    rng = np.random.default_rng(5)
    theta = torch.zeros(24, 3, dtype=torch.float64)
    theta[0] = torch.as_tensor(rng.normal(0, 1.0, 3))
    p = BodyParams(theta, torch.zeros(10, dtype=torch.float64),
                   torch.tensor([1.0, 0.0, 0.0], dtype=torch.float64))
    mesh = forward(template, p)
    rest = torch.as_tensor(template.rest_vertices)
    sel = rng.integers(0, template.num_vertices, 40)
    d0 = torch.cdist(rest[sel], rest[sel])
    d1 = torch.cdist(mesh.vertices[sel], mesh.vertices[sel])
    assert torch.allclose(d0, d1, atol=1e-7)


def test_batched_forward_matches_single(template):
    rng = np.random.default_rng(6)
    ps = [BodyParams.random(rng) for _ in range(4)]
    verts, joints = forward_batch(template,
                                  torch.stack([p.theta for p in ps]),
                                  torch.stack([p.beta for p in ps]))
    for i, p in enumerate(ps):
        mesh = forward(template, p)
        assert torch.allclose(verts[i], mesh.vertices, atol=1e-12)
        assert torch.allclose(joints[i], mesh.joints, atol=1e-12)


def test_projection_formula():
    # hand-computed: p = ((s*(v+t)) + 1)/2 * size
    pt = torch.tensor([[0.2, -0.4, 4.0]], dtype=torch.float64)
    pi = torch.tensor([0.8, 0.1, -0.05], dtype=torch.float64)
    out = project(pt, pi, (50, 100))
    assert abs(float(out[0, 0]) - 62.0) < 1e-12
    assert abs(float(out[0, 1]) - 16.0) < 1e-12
    # image center for a centered point at unit scale
    centered = project(torch.tensor([[0.0, 0.0, 3.0]], dtype=torch.float64),
                       torch.tensor([1.0, 0.0, 0.0], dtype=torch.float64), (64, 64))
    assert torch.allclose(centered, torch.tensor([[32.0, 32.0]], dtype=torch.float64))


def test_projection_scale_and_translation_linearity():
    rng = np.random.default_rng(7)
    pts = torch.as_tensor(rng.normal(0, 0.5, (30, 3)))
    pi = torch.tensor([0.9, 0.02, -0.03], dtype=torch.float64)
    base = project(pts, pi, (64, 64))
    shifted = project(pts + torch.tensor([0.1, 0.0, 0.0], dtype=torch.float64),
                      pi, (64, 64))
    # dx_px = s * dx * W / 2
    assert torch.allclose(shifted[:, 0] - base[:, 0],
                          torch.full((30,), 0.9 * 0.1 * 32, dtype=torch.float64))
    assert torch.allclose(shifted[:, 1], base[:, 1])


def test_finite_difference_gradient_checks_eps():
    with pytest.raises(ValidationError):
        finite_difference_gradient(lambda p: float(p.sum()), np.zeros(3), eps=1e-8)
    with pytest.raises(ValidationError):
        finite_difference_gradient(lambda p: float(p.sum()), np.zeros(3), eps=1e-2)
    g = finite_difference_gradient(lambda p: float((p ** 2).sum()),
                                   np.array([1.0, -2.0, 3.0]))
    assert np.allclose(g, [2.0, -4.0, 6.0], atol=1e-8)


def test_kinematics_gradient_matches_finite_differences(template):
    """d(scalar of projected vertices)/d(params) via autograd vs central FD."""
    rng = np.random.default_rng(8)
    weights = rng.normal(0, 1.0, (template.num_vertices, 2))

    def op(vec):
        p = BodyParams.from_flat(torch.as_tensor(vec))
        mesh = forward(template, p)
        px = project(mesh.vertices, p.pi, (64, 64))
        return float((torch.as_tensor(weights) * px).sum())

    base = BodyParams.random(rng).numpy()
    fd = finite_difference_gradient(op, base, eps=1e-6)

    vec = torch.tensor(base, requires_grad=True)
    p = BodyParams.from_flat(vec)
    mesh = forward(template, p)
    px = project(mesh.vertices, p.pi, (64, 64))
    (torch.as_tensor(weights) * px).sum().backward()
    g = vec.grad.numpy()
    scale = np.maximum(np.abs(g), 1.0)
    assert np.max(np.abs(fd - g) / scale) < 1e-6


def test_template_archive_roundtrip(template, tmp_path):
    path = tmp_path / "t.ffm"
    save_template(template, path)
    back = load_template(path)
    assert back.num_vertices == template.num_vertices
    assert np.array_equal(back.faces, template.faces)
    assert np.array_equal(back.parents, template.parents)
    assert np.allclose(back.rest_vertices, template.rest_vertices, atol=1e-6)
    assert np.allclose(back.shape_basis, template.shape_basis, atol=1e-6)
    assert np.allclose(back.skinning_weights.sum(axis=1), 1.0, atol=1e-12)


def test_template_archive_rejects_garbage(tmp_path):
    path = tmp_path / "bad.ffm"
    path.write_bytes(b"NOPE" + b"\x00" * 64)
    with pytest.raises(ValidationError):
        load_template(path)
    path.write_bytes(b"FFTM" + b"\x01\x00\x00\x00" * 3)  # truncated
    with pytest.raises(ValidationError):
        load_template(path)


def test_param_dim_is_85():
    rng = np.random.default_rng(9)
    assert PARAM_DIM == 85
    assert BodyParams.random(rng).flat().shape == (85,)
