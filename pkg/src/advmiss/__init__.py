"""Adversarial missingness attacks on linear Gaussian causal structure learning."""
from .scm import Dag, GaussianScm, covariance_of, gaussian_kl, factorized_kl, sample

__version__ = "0.1.0"

__all__ = ["Dag", "GaussianScm", "covariance_of", "gaussian_kl", "factorized_kl", "sample"]
