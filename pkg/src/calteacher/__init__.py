"""Pseudo-labeling with online confidence calibration for sparsely annotated detection."""

__version__ = "0.1.0"
