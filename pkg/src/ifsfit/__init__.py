"""Learning iterated-function-system fractals that reconstruct target images by gradient descent."""

from .errors import (
    CorruptFile,
    DegenerateSystem,
    IFSError,
    NonFiniteGradient,
    NonFinitePoint,
    NonFiniteTrajectory,
    ShapeMismatch,
    UnsupportedFormat,
)
from .grad import MSELoss, ParameterGradients, backprop_trajectory, finite_difference_check, mse_loss
from .ifs import (
    FractalSystem,
    IndexSequence,
    PointTrajectory,
    ReparamTransform,
    compose_matrix,
    concat_systems,
    iterate_ifs,
    normalize_points,
    random_system,
    sample_index_sequence,
    transform_probabilities,
)
from .optim import Objective, OptimizerConfig, clamp_sigmas, evaluate_min_mse, fit, inject_noise
from .render import Canvas, RenderConfig, render, render_backward

__version__ = "0.1.0"

__all__ = [
    "Canvas", "CorruptFile", "DegenerateSystem", "FractalSystem", "IFSError", "IndexSequence",
    "MSELoss", "NonFiniteGradient", "NonFinitePoint", "NonFiniteTrajectory", "Objective",
    "OptimizerConfig", "ParameterGradients", "PointTrajectory", "RenderConfig", "ReparamTransform",
    "ShapeMismatch", "UnsupportedFormat", "backprop_trajectory", "clamp_sigmas", "compose_matrix",
    "concat_systems", "evaluate_min_mse", "finite_difference_check", "fit", "inject_noise",
    "iterate_ifs", "mse_loss", "normalize_points", "random_system", "render", "render_backward",
    "sample_index_sequence", "transform_probabilities",
]
