"""Low-rank tensor completion with Riemannian preconditioned first-order methods."""
from .cp_model import ProblemConfig, euclidean_gradient, objective, rmse
from .data import init_factors, parse_ratings, split_train_test
from .exceptions import DivergenceError, DomainError, NumericalError, ParseError, ResourceError
from .kernels import gram_hadamard, naive_gradient_path, residual_at_observed, sparse_mttkrp
from .metric import Preconditioner, build_preconditioner, metric_inner, riemannian_gradient
from .optim import IterationRecord, OptimizerConfig, RunResult, run
from .synth import SynthConfig, generate, hooi_truncate
from .tensor_core import (
    ObservedTensor,
    dense_cp_assemble,
    khatri_rao,
    matricize_index,
    read_coo,
    sparse_inner,
    write_coo,
)

__version__ = "0.1.0"
