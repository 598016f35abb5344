"""Lattice local limit laboratory: exact lattice laws, Bernoulli-part coupling,
level-set correlations and almost sure local limit averages."""

__version__ = "0.1.0"
