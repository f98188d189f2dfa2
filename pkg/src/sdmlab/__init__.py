"""Offline RL by matching stationary state-action distributions: exact tabular
tools (solvers, divergences, bound checks) and a numpy actor-critic with a GAN
regulariser."""

__version__ = "0.1.0"
