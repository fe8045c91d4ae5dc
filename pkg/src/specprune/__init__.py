"""specprune: structured pruning of small neural networks by greedy spectral
subset selection, with optional cross-domain moment-matching regularization,
plus low-rank factorization baselines and a config-driven experiment pipeline.
"""

from .backend import greedy_backend_name

__version__ = "0.1.0"

__all__ = ["greedy_backend_name", "__version__"]
