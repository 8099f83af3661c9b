"""Data-parallel LoRA / PiSSA / HD-PiSSA fine-tuning simulator with update-rank analysis."""

from .adapters import AdapterPair, init_hd_pissa, init_lora, init_pissa
from .distsim import Method, TrainerConfig, TrainResult, train
from .linalg import SvdResult, svd, truncate
from .rankanalysis import RankSpectrum, compute_delta, spectrum
from .tasks import SyntheticTask, gen_linear_task, gen_mlp_task

__version__ = "0.1.0"

__all__ = [
    "AdapterPair",
    "Method",
    "RankSpectrum",
    "SvdResult",
    "SyntheticTask",
    "TrainResult",
    "TrainerConfig",
    "compute_delta",
    "gen_linear_task",
    "gen_mlp_task",
    "init_hd_pissa",
    "init_lora",
    "init_pissa",
    "spectrum",
    "svd",
    "train",
    "truncate",
]
