"""Sparse binary classifiers from noisy multi-expert labels.

MAP-EM with an L1 penalty fits a latent-label model; the surrogate score
(average disagreement with held-out expert votes) selects among models
without access to true labels.
"""

__version__ = "0.1.0"
