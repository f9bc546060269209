"""Counterfactual explanation generation by reflecting classifier features
across pairwise decision boundaries, with step-wise image transitions."""

__version__ = "0.1.0"
