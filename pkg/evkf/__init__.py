"""Exponential family variational Kalman filter.

Online latent-state inference and dynamics learning for state-space models
whose transitions belong to a constant base measure exponential family.
"""

from __future__ import annotations

from .dynamics import DynamicsModel, natural_map
from .expfam import FamilyTag, MeanParams, NaturalParams
from .filtering import EvkfConfig, EvkfFilter, FilterState, predict, step, update
from .observations import ObservationModel
from .simulate import Trajectory, make_experiment, simulate

__all__ = [
    "DynamicsModel",
    "EvkfConfig",
    "EvkfFilter",
    "FamilyTag",
    "FilterState",
    "MeanParams",
    "NaturalParams",
    "ObservationModel",
    "Trajectory",
    "make_experiment",
    "natural_map",
    "predict",
    "simulate",
    "step",
    "update",
]

__version__ = "0.1.0"
