"""Policy resilience against training-time environment poisoning.

Three stages: federated meta-learning of a shared dynamics model
(preparation), few-shot adaptation to the deployment environment
(diagnosis), and planning-based restoration of a poisoned policy
(recovery).
"""

__version__ = "0.1.0"
