"""Spectral representation learning for conditional moment models."""

from .cmm import CmmFit, HparamGrid, fit_minimax, fit_minimax_factored, heldout_violation, predict, select_hparams
from .config import ExperimentConfig
from .contrastive import SpectralModel, TrainConfig, empirical_risk, train_spectral
from .datagen import Dataset, gen_npiv, gen_proxy
from .errors import (DegenerateInput, DegenerateMatrix, InfeasibleConstraint, InvalidInput,
                     NumericalFailure, Refused, SpectralCMMError, Unsupported)
from .kernels import LearnedKernel, RbfKernel, build_kx, build_kz, gram, product_kernel
from .oracles import discrete_oracle, gaussian_oracle, torus_oracle

__version__ = "0.1.0"
