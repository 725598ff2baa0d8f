"""Active-learning estimation of rare failure probabilities with single- and bi-fidelity GPs."""
from .gp_core import Dataset, FitOptions, GPPosterior, KernelParams, fit_gp
from .bifi_gp import BiDataset, BiGPPosterior, fit_bifi_gp, fit_difference_gp
from .acquisition import CandidateSet, benefit, select_next_bifi, select_next_single
from .problems import Problem, ground_truth_Pa, make_problem

__all__ = [
    "Dataset", "FitOptions", "GPPosterior", "KernelParams", "fit_gp",
    "BiDataset", "BiGPPosterior", "fit_bifi_gp", "fit_difference_gp",
    "CandidateSet", "benefit", "select_next_bifi", "select_next_single",
    "Problem", "ground_truth_Pa", "make_problem",
]
