"""Flow matching for continuous normalizing flows, in numpy.

Submodules
----------
autodiff    reverse-mode differentiation on numpy arrays
paths       Gaussian conditional probability paths (OT, VP, VE)
oracle      exact marginals of small datasets and continuity-equation checks
objectives  flow matching, score matching and noise regression losses
model       MLP vector fields, Adam and the training loop
ode         fixed-step and adaptive solvers, divergences, likelihood and BPD
data        seeded toy datasets and named random streams
config      JSON run configs
verify      the numerical invariant suite
cli         command-line front end
"""

from .autodiff import Tensor, grad, no_grad
from .data import ToyDataset, substream
from .model import VectorFieldModel
from .ode import SolverCfg, integrate, log_likelihood
from .oracle import GridSpec, MixtureOracle
from .paths import OTPath, VEPath, VPPath, schedule_from_config

__all__ = [
    "Tensor", "grad", "no_grad", "ToyDataset", "substream", "VectorFieldModel",
    "SolverCfg", "integrate", "log_likelihood", "GridSpec", "MixtureOracle",
    "OTPath", "VPPath", "VEPath", "schedule_from_config",
]
__version__ = "0.1.0"
