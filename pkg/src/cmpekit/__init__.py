"""Constrained most-probable-explanation toolkit for binary Markov networks."""
from .polymodel import (CmpeInstance, MarkovNetwork, MultilinearPolynomial, build_instance, condition, evaluate,
                        gradient, parse_uai, read_uai, to_polynomial)

__version__ = "0.1.0"

__all__ = ["CmpeInstance", "MarkovNetwork", "MultilinearPolynomial", "build_instance", "condition", "evaluate",
           "gradient", "parse_uai", "read_uai", "to_polynomial"]
