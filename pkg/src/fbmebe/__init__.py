"""Online forward-backward zero-shot RL with maximum-entropy behavior exploration."""

__version__ = "0.1.0"
