"""Sample-based posterior estimation for max-stable spatial processes."""
from .spatial_core import (
    DomainError,
    Family,
    HGrid,
    ParameterVector,
    ThetaCurve,
    bivariate_cdf,
    bivariate_density,
    smith_to_brown_resnick,
    theta,
    theta_mc,
)
from .simulator import FieldSample, GridSpec, PriorBox, TrainingSet, generate_training_set, simulate
from .scoring import PosteriorSample, energy_score, interval_score

__version__ = "0.1.0"
