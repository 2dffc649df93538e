"""CVaR-optimal exploration and planning in low-rank MDPs."""
from .driver import RunConfig, RunResult, run_ela, run_ella
from .env_core import AugmentedPolicy, LowRankModel, RewardModel
from .plan_exact import augmented_vi, enumerate_cvar_oracle, plan_cvar
from .plan_lsvi import LsviConfig, cvar_lsvi
from .risk_math import BudgetGrid, ReturnDistribution, cvar_of_distribution, empirical_cvar

__version__ = "0.1.0"
