"""Balancing-group formation and robust battery dispatch scheduling.

Off-line, customers are clustered into energy balancing groups by a
Bayesian switchpoint analysis of their demand-deviation statistics.
On-line, a sliding-window stochastic optimizer schedules battery
charge/discharge against a convex imbalance tariff using short-term
forecasts and reduced scenario sets, solved by an in-house sparse
simplex and branch-and-bound engine.
"""

from .core import (BatterySpec, DacVector, DemandSeries, ImbalanceTariff,
                   aggregate_series, compute_dsd, compute_mdsd,
                   imbalance_cost, load_demand_csv, load_holidays)
from .groupform import (GroupInfo, GroupList, McmcParams, PosteriorSamples,
                        SwitchpointModel, compute_alpha, delta_dac,
                        expected_dac, form_groups, log_posterior, run_mcmc)
from .milp import (LinearProgram, MilpProblem, MilpSolution, ProblemBuilder,
                   SimplexError, parse_lp_text, solve_lp, solve_milp,
                   write_lp_text)
from .predictor import (RollingPredictor, SvrModel, build_training_set,
                        predict_window, train_svr)
from .scengen import (ErrorStats, ScenarioSet, VariabilityStats,
                      build_covariance, reduce, sample_space)
from .scheduler import (DispatchDecision, SchedulerError, WindowInput,
                        build_problem, solve_window, solve_window_full,
                        verify_solution)
from .simulator import (Campaign, CampaignConfig, SimulationTrace,
                        battery_for_capacity, capacity_sweep, derived_seed,
                        generate_synthetic_fleet, make_contract,
                        run_deterministic, run_no_battery, run_sswcd)

__version__ = "0.1.0"
