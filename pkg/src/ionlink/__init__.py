"""Simulation and analysis toolkit for trapped-ion photon conversion links."""

__version__ = "0.1.0"
