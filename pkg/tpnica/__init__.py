from .config import ExperimentConfig, SweepConfig, TrainConfig
from .elbo import elbo_gradient, posterior_components
from .evaluation import linear_ica_baseline, mcc
from .exceptions import *
from .lattice import KernelSpec, Lattice, assemble_covariance, gram, kernel_eval
from .mixing import MixingNetwork, generate_dataset, mix
from .model import TpNicaModel
from .optimizer import Trainer, train
from .posterior import VariationalFamily, VariationalState, build_conditional, kl_u, marginal_qs
from .processes import GammaParams, TpPrior, gamma_kl, mvt_logpdf, sample_gamma, sample_tp_components

__version__ = "0.1.0"
