"""Panel double machine learning for high-dimensional dynamic panels."""
from .errors import (ConvergenceError, DataValidationError, InfeasibleError, InvariantError,
                     NumericalError, PanelDMLError, ReplicationError, SingularMatrixError)
from .panel_core import (BetaSpec, FoldPartition, PanelDataset, load_panel_csv, partition_folds,
                         write_panel_csv)
from .first_stage import (FirstStageConfig, LambdaPolicy, ResidualizedPanel, cross_fit, fit_dynamic_panel_lasso,
                          fit_lasso, kock_tang_lambda, residualize)
from .second_stage_ld import doubly_robust_dml, orthogonal_ols, wald_intervals
from .second_stage_hds import (clime, debias, opt_lambda, orthogonal_lasso, ridge_inverse,
                               simultaneous_quantile)

__version__ = "0.1.0"
