"""Workbench for flow-guided refinement of articulated body-mesh regressors."""

__version__ = "0.1.0"

from .body import BodyParams, MeshTemplate, BodyMesh, forward, project

__all__ = [
    "BodyParams",
    "MeshTemplate",
    "BodyMesh",
    "forward",
    "project",
    "__version__",
]
