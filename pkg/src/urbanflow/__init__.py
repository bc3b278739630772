"""Dependable stream processing for sensor fleets on a single machine."""

__version__ = "0.1.0"
