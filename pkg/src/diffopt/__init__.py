"""Differentiation of optimization problem solutions via implicit linear solves."""

__version__ = "0.1.0"
