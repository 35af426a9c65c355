"""Toolkit for building, training, searching and evaluating unrolled
sparse-recovery networks on synthetic LASSO problems."""

__version__ = "0.1.0"
