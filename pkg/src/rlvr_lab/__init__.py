"""Toy-scale laboratory for the learning dynamics of RL with verifiable rewards.

Exact-likelihood softmax policies over short token sequences, GRPO and SELF
objectives, interference and coverage probes, the two-action bandit
analysis, and a seeded experiment runner.
"""

__version__ = "0.1.0"

from rlvr_lab.kernels import available_backends, backend, set_backend  # noqa: E402

__all__ = ["__version__", "available_backends", "backend", "set_backend"]
