"""Sequential Monte Carlo calibration and model comparison for stochastic glacial-cycle models."""

__version__ = "0.1.0"
