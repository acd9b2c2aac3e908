"""Target-free user simulation harness for evaluating conversational recommenders."""

__version__ = "0.1.0"
