"""Uplink multicell massive MIMO simulator with slow-fading combining.

Pipeline: geometry and one-ring covariances -> pilot MMSE estimation ->
matched-filter / zero-forcing reception with inter-cell combining ->
closed-form SINR evaluation (validated by Monte Carlo) -> max-min power
control.
"""

__version__ = "0.1.0"

from .errors import (ConfigurationError, ConvergenceError, LsfpsimError,
                     NumericError, NumericWarning, PowerControlAnomalyError,
                     QuadratureError, SingularityError, SpecError)
from .geometry import (CovarianceSet, NetworkScenario, UserDrop,
                       build_covariance_set, drop_users, hexagonal_cell_positions,
                       load_scenario, noise_variance_dbm, one_ring_covariance,
                       path_gain, save_scenario, urban_macro_loss_db)
from .estimation import (EstimationModel, build_estimation_model,
                         draw_true_channels, estimate_channels)
from .lsfp import (LsfpSet, MfSinrValue, SinrReport, SlowFadingSummaries,
                   ZfSinrValue, build_summaries, closed_form_report,
                   optimal_lsfp, sinr_mf_closed, sinr_zf_closed, vec_index)
from .detequiv import (DetEquivProblem, GammaRecomputer, ZLimits,
                       build_det_equiv_problem, gamma, gamma_all_cells,
                       sample_gram, solve_derivative_system, solve_fixed_point,
                       take_z_limits)
from .montecarlo import (EmpiricalSinr, UplinkRealization,
                         draw_uplink_realization, lsfp_combine,
                         measure_empirical_sinr, mf_statistics, zf_statistics)
from .power import (DistributedResult, PowerAllocation, PowerOptResult,
                    bisection_maxmin, distributed_power_iteration, outage_curve)
from .experiment import (ExperimentSpec, ResultBundle, compute_cdf,
                         load_experiment_spec, make_sinr_evaluator,
                         nearest_rank_quantile, run_experiment)
