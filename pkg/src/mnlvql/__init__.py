"""Reinforcement learning with multinomial-logit choice feedback over assortments."""

from . import agents, assort, bench, envs, mnl, numerics, values

__all__ = ["agents", "assort", "bench", "envs", "mnl", "numerics", "values"]
__version__ = "0.1.0"
