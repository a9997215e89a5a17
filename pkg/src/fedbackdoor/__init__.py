"""Seed-reproducible federated-learning backdoor simulator.

Submodules: :mod:`nn` (numpy MLP engine), :mod:`data`, :mod:`flcore` (server
loop), :mod:`defenses`, :mod:`attacks`, :mod:`env` (attacker MDP), :mod:`rl`
(TD3) and :mod:`cli`.
"""
from .kernels import BACKEND
from .nn import ConfigurationError, NumericError

__version__ = "0.1.0"
__all__ = ["BACKEND", "ConfigurationError", "NumericError", "__version__"]
