"""Bayesian inference for the phylogenetic multivariate probit model.

Latent tip traits of a Brownian diffusion on a rooted tree generate binary
observations by sign-thresholding and continuous observations directly. The
latent block is sampled by a bouncy particle sampler whose precision products
run in O(N P^2) through tree dynamic programming; the trait covariance,
decomposed into an LKJ-distributed correlation matrix and per-trait scales,
is sampled by HMC; a random-scan Gibbs scheme alternates the two.
"""

__version__ = "0.1.0"

from .bps import (DensePrecision, TruncatedNormalTarget, boundary_event_time,
                  bounce_boundary, bounce_gradient, bps_transition,
                  gradient_event_time, tune_travel_time)
from .covariance import (CorrelationTransform, CovarianceDecomposition,
                         CovarianceTarget, cov_posterior_log_density_and_grad,
                         lkj_log_density, sample_correlation, scale_log_prior)
from .diagnostics import ess, hpd_interval, rhat
from .engine import (ChainResult, GibbsModel, GibbsSchedule, SampleRecord,
                     baseline_sweep, baseline_taxon_transition,
                     benchmark_latent_sampler, iter_chain, run_chain, run_chains)
from .hmc import DualAveragingStepSize, adapt_stepsize, hmc_transition, leapfrog
from .model import (ColumnSpec, DataError, TraitData, augmented_log_likelihood,
                    build_target, initial_latent, load_traits, simulate_latent,
                    threshold_traits, traits_to_csv)
from .tree import (CovarianceMode, NewickError, RootPrior, Tree, TreeError,
                   parse_newick, random_tree, read_trees, tree_covariance_dense)
from .treegauss import (StarGaussian, TreeGaussian, TreePrecision, build_gaussian,
                        dense_precision, post_order_pass, pre_order_pass,
                        precision_column, precision_vector_product)
