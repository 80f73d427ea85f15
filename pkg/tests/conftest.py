import numpy as np
import pytest
import torch

from flowfit.body import default_template
from flowfit.synthdata import SynthConfig, SyntheticDataset, generate_dataset

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def template():
    return default_template()


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Small shared archive: 3 sequences, 12 frames, half labeled."""
    root = tmp_path_factory.mktemp("tiny_ds")
    cfg = SynthConfig(num_sequences=3, frames_per_sequence=12,
                      labeled_fraction=0.5, seed=42)
    generate_dataset(cfg, root)
    return SyntheticDataset(root)


def np_rodrigues(w):
    th = np.linalg.norm(w)
    if th < 1e-12:
        return np.eye(3)
    k = w / th
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(th) * K + (1 - np.cos(th)) * (K @ K)


def np_chain_joints(template, theta, beta):
    """Independent forward-kinematics oracle (numpy only)."""
    shaped = template.rest_vertices + np.einsum("k,kvc->vc", beta,
                                                template.shape_basis)
    jr = template.joint_regressor @ shaped
    J = template.num_joints
    GR = [None] * J
    Gt = [None] * J
    GR[0] = np_rodrigues(theta[0])
    Gt[0] = jr[0]
    for j in range(1, J):
        p = template.parents[j]
        GR[j] = GR[p] @ np_rodrigues(theta[j])
        Gt[j] = Gt[p] + GR[p] @ (jr[j] - jr[p])
    return np.stack(Gt), GR, jr


@pytest.fixture(scope="session")
def chain_oracle():
    return np_chain_joints
