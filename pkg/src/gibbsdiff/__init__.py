"""Blocked Gibbs diffusion in logit space for constraint satisfaction and combinatorial optimisation."""

from .chain import ChainConfig, sample_chain
from .denoisers import AttentionDenoiser, AttentionDenoiserConfig, OracleGibbsDenoiser
from .energy import energy_discrete, energy_relaxed
from .problems import ProblemInstance, gen_graph_instance, graph_instance, load_sudoku

__version__ = "0.1.0"

__all__ = [
    "AttentionDenoiser",
    "AttentionDenoiserConfig",
    "ChainConfig",
    "OracleGibbsDenoiser",
    "ProblemInstance",
    "energy_discrete",
    "energy_relaxed",
    "gen_graph_instance",
    "graph_instance",
    "load_sudoku",
    "sample_chain",
]
