"""Sensitivity-regularized surrogate training for offline black-box optimization."""

__version__ = "0.1.0"

from .boss import BossConfig, BossTrace, boss_train
from .core import ContractError, OfflineDataset, SeededRng, normalize_score
from .evaluation import pseudo_oracle_tune, rmse_ood, score_candidates
from .search import SearchConfig, ensemble_search, ga_search
from .sensitivity import PerturbationParams, cdf_sensitivity, mc_sensitivity, upper_bound_sensitivity
from .surrogate import MlpSpec, SurrogateParams, train_surrogate
from .tasks import TASK_IDS, get_task, make_offline_dataset
