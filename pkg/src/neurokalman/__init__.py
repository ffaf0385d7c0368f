"""Learned recursive Bayesian filter (prior GRU, memory-augmented measurement,
learnable gain) for continuous waypoint navigation, in numpy."""

__version__ = "0.1.0"
