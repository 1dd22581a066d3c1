"""Mixture-of-ICA texture modeling and stained-object classification."""

from .errors import DataError, MoicaError, NumericalError
from .manifold import (
    LbfgsConfig,
    MinimizeResult,
    ObliqueMatrix,
    TangentVector,
    minimize,
    project_tangent,
    retract,
    transport,
)
from .model import (
    IcaComponent,
    MoGSource,
    MoicaModel,
    Responsibilities,
    component_loglik,
    component_posteriors,
    e_step,
    model_loglik,
    mog_logpdf,
    objective_and_gradient,
    source_vector_logpdf,
)

__version__ = "0.1.0"
