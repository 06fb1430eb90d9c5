"""Conditional argmax-flow policy: base encoder, coupling flow, posterior and bounds."""

from .coupling import AffineCoupling, CouplingFlow, LatentPoint
from .policy import (
    ALPHA_MODES,
    POSTERIOR_MODES,
    AlphaWeight,
    BaseParams,
    BoundEstimates,
    FlowPolicy,
    LogProbBounds,
    StateEncoder,
)
from .posterior import FlowPosterior, GaussianPosterior, PosteriorSample
from .threshold import argmax_decode, inverse_soft_threshold, soft_threshold

__all__ = [
    "ALPHA_MODES",
    "POSTERIOR_MODES",
    "AffineCoupling",
    "AlphaWeight",
    "BaseParams",
    "BoundEstimates",
    "CouplingFlow",
    "FlowPolicy",
    "FlowPosterior",
    "GaussianPosterior",
    "LatentPoint",
    "LogProbBounds",
    "PosteriorSample",
    "StateEncoder",
    "argmax_decode",
    "inverse_soft_threshold",
    "soft_threshold",
]
