"""Robust sequential patrol planning under parameter uncertainty.

Minimax-regret double-oracle planning over a green-security patrol model,
together with the logistic deterrence regression behind the poacher model,
the comparison baselines and a max-regret evaluation harness.
"""

__version__ = "0.1.0"
