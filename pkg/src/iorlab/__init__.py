"""Desk-scale lab for miscalibration-driven illusions of robustness in text classifiers."""

__version__ = "0.1.0"
