"""Facial expression retargeting toolkit.

Embeds human and avatar expressions into latent spaces learned from
per-vertex deformation features, then translates codes across domains
using geometric correspondences (deformation transfer + retrieval) and
perceptually annotated triplets.
"""

from retarget.mesh import Mesh, MeshSet, load_obj, save_obj, one_ring
from retarget.drfeature import (
    DRFeature,
    EdgeWeights,
    cotangent_weights,
    uniform_weights,
    dr_encode,
    dr_decode,
    polar_decompose,
)
from retarget.rig import Rig, ExpressionSample, pose, sample_expressions, fit_blendshape_weights, make_parallel_rigs
from retarget.transfer import TriangleCorrespondence, identity_correspondence, transfer

__all__ = [
    "Mesh",
    "MeshSet",
    "load_obj",
    "save_obj",
    "one_ring",
    "DRFeature",
    "EdgeWeights",
    "cotangent_weights",
    "uniform_weights",
    "dr_encode",
    "dr_decode",
    "polar_decompose",
    "Rig",
    "ExpressionSample",
    "pose",
    "sample_expressions",
    "fit_blendshape_weights",
    "make_parallel_rigs",
    "TriangleCorrespondence",
    "identity_correspondence",
    "transfer",
]
