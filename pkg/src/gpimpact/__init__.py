"""Counterfactual impact estimation with multi-output Gaussian processes."""

from .coregional import VARIANTS, MogpStructure, VariantDefaults, build_variant
from .dataset import CsvSchema, HeterotopicDataset, SeriesRecord, ingest_csv
from .effects import CausalEffects
from .engine import FittedGp, fit_gp, posterior_predictive
from .evaluation import combination_search, screen_donors, train_test_split
from .hmc import HmcConfig, counterfactual_posterior, hmc_sample, make_loading_target
from .optimize import Ml2Config, OptimizerConfig, fit_ml2, lbfgsb_minimize

__version__ = "0.1.0"

__all__ = [
    "VARIANTS", "MogpStructure", "VariantDefaults", "build_variant",
    "CsvSchema", "HeterotopicDataset", "SeriesRecord", "ingest_csv",
    "CausalEffects", "FittedGp", "fit_gp", "posterior_predictive",
    "combination_search", "screen_donors", "train_test_split",
    "HmcConfig", "counterfactual_posterior", "hmc_sample",
    "make_loading_target", "Ml2Config", "OptimizerConfig", "fit_ml2",
    "lbfgsb_minimize",
]
