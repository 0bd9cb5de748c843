"""Multi-business generative recommendation with semantic IDs."""
from .data import SyntheticConfig, generate_dataset, split
from .trainer import MBGR, RunConfig, build_context, desk_config, evaluate, tiny_config, train

__all__ = ["MBGR", "RunConfig", "SyntheticConfig", "build_context", "desk_config", "evaluate", "generate_dataset",
           "split", "tiny_config", "train"]
__version__ = "0.1.0"
