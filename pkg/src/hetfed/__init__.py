"""Decentralized mutual distillation across heterogeneous models and rotated domains."""
from .config import RunConfig, load_config
from .protocol import RunResult, run_asynchronous_pairs, run_synchronous
from .runner import run_cell, run_matrix

__version__ = "0.1.0"

__all__ = ["RunConfig", "RunResult", "load_config", "run_asynchronous_pairs", "run_cell",
           "run_matrix", "run_synchronous", "__version__"]
