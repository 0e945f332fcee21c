"""Surrogate modeling of per-element brain strain from head-impact kinematics."""

__version__ = "0.1.0"
