"""Diffeomorphic registration of square-root ODF fields.

The main entry points are :func:`register`, :func:`make_phantom`,
:func:`load_field` / :func:`save_field` and the metrics :func:`skl_map` and
:func:`dice`.  Lower-level pieces live in the submodules ``sphere``,
``reorient``, ``deformation``, ``matching``, ``optimize``, ``fields``,
``evaluation`` and ``render``.
"""
__version__ = "0.1.0"

from .deformation import KernelParams, MomentumField, Trajectory, flow_forward
from .evaluation import dice, skl, skl_map, support_mask
from .fields import (ODFField, PhantomSpec, load_field, make_phantom, save_field,
                     uniform_field)
from .grid import Grid
from .matching import grad_E_phi1, match, matching_energy
from .optimize import RegistrationConfig, RegistrationResult, evaluate_J, register
from .reorient import FoldedDeformationError, affine_act, group_action
from .sphere import SphereSampling, distance, exp_map, log_map

__all__ = [
    "Grid", "KernelParams", "MomentumField", "ODFField", "PhantomSpec",
    "RegistrationConfig", "RegistrationResult", "SphereSampling", "Trajectory",
    "FoldedDeformationError", "affine_act", "dice", "distance", "evaluate_J",
    "exp_map", "flow_forward", "grad_E_phi1", "group_action", "load_field", "log_map",
    "make_phantom", "match", "matching_energy", "register", "save_field", "skl",
    "skl_map", "support_mask", "uniform_field",
]
