"""Accuracy-versus-uncertainty calibration (AvUC) toolkit."""
__version__ = "0.1.0"
