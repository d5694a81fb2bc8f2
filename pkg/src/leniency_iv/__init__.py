"""Leniency-design instrumental variables: UJIVE and related jackknife
estimators, robust inference, assumption checks and simulation tools."""

from .data import Dataset, Schema, load_dataset, write_csv
from .design import DesignContext, GMatrixSpec, Kind, build_design, g_apply, g_trace, make_spec, probe_checksum
from .errors import (CapacityError, ConfigError, DegenerateDesignError, DesignError, InputError,
                     LeniencyError, UnsupportedOperationError)
from .estimators import EstimatorResult, FirstStageStats, bias_rules, estimate, estimate_many, first_stage
from .inference import robust_se, rho_diagnostic, weak_iv_test
from .checklist import balance_check, complier_means, monotonicity_test
from .prune import PruneReport, prune
from .simulation import SimConfig, SyntheticTruth, generate, monte_carlo, oracle_beta_star, oracle_lambda

__version__ = "0.1.0"
