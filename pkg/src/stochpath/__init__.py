"""Continuously monitored qubit: trajectories, conditioned statistics, diagrams, most-likely paths."""

__version__ = "0.1.0"
