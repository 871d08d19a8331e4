"""Experiment and log tools built on the pyfu package."""
