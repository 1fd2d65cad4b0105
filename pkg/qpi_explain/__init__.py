"""qpi-explain - interpretable, calibrated leukocyte classification on quantitative phase images."""
__version__ = "0.1.0"
