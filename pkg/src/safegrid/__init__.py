"""safegrid: statistical-guarantee machinery for uncertainty-aware traffic control.

Subsystems: uncertainty-weighted attention forecasting math, spatially
clustered conformal intervals with adaptive levels, conformalized anomaly
p-values under FDR control, grid-to-intersection aggregation, Lyapunov safety
certification with safe-action projection, and a seeded synthetic grid-traffic
simulator that wires them end to end.
"""

__version__ = "0.1.0"

from safegrid._kernels import BACKEND as KERNEL_BACKEND
from safegrid.anomaly import (bh_procedure, by_procedure, conformal_pvalue,
                              empirical_fdr, fit_scorer, normalize_residuals,
                              trim_calibration)
from safegrid.conformal import (CalibrationLedger, ForecastBundle, aci_update,
                                build_intervals, cluster_nodes, cluster_quantile,
                                conformity_scores, evaluate_coverage)
from safegrid.dependence import block_bootstrap_verify
from safegrid.safety import (check_lyapunov_safe, epsilon_star, lipschitz_bounds,
                             lyapunov_value, project_safe_action, spectral_norm)
from safegrid.sim import SimConfig, generate_dataset, init_grid
from safegrid.worldmodel import ensemble_predict, fit_world_ensemble, model_error

__all__ = [
    "KERNEL_BACKEND", "__version__",
    "bh_procedure", "by_procedure", "conformal_pvalue", "empirical_fdr",
    "fit_scorer", "normalize_residuals", "trim_calibration",
    "CalibrationLedger", "ForecastBundle", "aci_update", "build_intervals",
    "cluster_nodes", "cluster_quantile", "conformity_scores",
    "evaluate_coverage", "block_bootstrap_verify",
    "check_lyapunov_safe", "epsilon_star", "lipschitz_bounds",
    "lyapunov_value", "project_safe_action", "spectral_norm",
    "SimConfig", "generate_dataset", "init_grid",
    "ensemble_predict", "fit_world_ensemble", "model_error",
]
