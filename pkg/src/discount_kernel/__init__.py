"""Kernel-based discount curve estimation, finite-factor reduction and affine dynamics."""
from .kernels import KernelSpec, SumKernelSpec, eval_kernel, gram_matrix, weight_sequence
from .curve_fit import CashflowSystem, FitConfig, FittedCurve, fit_curve, cross_validate
from .reduce import ReducedModel, OptimizerConfig, optimize_rates, naive_fit
from .dynamics import AffineModelSpec, DiffusionSpec, simulate, martingale_diagnostic
from .data_io import BondQuote, SyntheticSpec, generate_synthetic, ingest_csv, save_artifacts, load_artifacts

__version__ = "0.1.0"
