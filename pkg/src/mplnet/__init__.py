"""Network inference for count data from mixed populations.

A mixture of Poisson log-normal models is fitted by variational EM with a
lasso penalty on each component's latent precision matrix.
"""

__version__ = "0.1.0"

from .engine import (FitConfig, FitResult, Selection, fit, icl_score, initialize,
                     select_lambda_density, select_lambda_icl)
from .errors import (CalibrationError, DegenerateComponentError, InitializationError,
                     InputError, MplnError, NumericalError, ParameterError, SamplingError)
from .evaluation import (EdgeScoreList, EvalReport, edge_scores, jaccard_stability,
                         pauprc_ratio, two_step_baseline)
from .glasso import GlassoSolution, ZeroEdgeSet, glasso_fit
from .pln import CountDataset, MixtureParams, loglik_oracle, sample_mpln
from .simgen import SimConfig, SyntheticDataset, ari, calibrate_mixing, gen_dataset, gen_graph
from .variational import VariationalState, elbo

__all__ = [
    "CalibrationError", "CountDataset", "DegenerateComponentError", "EdgeScoreList",
    "EvalReport", "FitConfig", "FitResult", "GlassoSolution", "InitializationError",
    "InputError", "MixtureParams", "MplnError", "NumericalError", "ParameterError",
    "SamplingError", "Selection", "SimConfig", "SyntheticDataset", "VariationalState",
    "ZeroEdgeSet", "ari", "calibrate_mixing", "edge_scores", "elbo", "fit", "gen_dataset",
    "gen_graph", "glasso_fit", "icl_score", "initialize", "jaccard_stability",
    "loglik_oracle", "pauprc_ratio", "sample_mpln", "select_lambda_density",
    "select_lambda_icl", "two_step_baseline",
]
