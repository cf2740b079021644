"""Learned surrogate solvers for parametric constrained optimization with a
differentiable feasibility-seeking step."""

__version__ = "0.1.0"
