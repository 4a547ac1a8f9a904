"""Numerical laboratory for subRiemannian geodesics and Brunn-Minkowski counterexamples."""

__version__ = "0.1.0"
