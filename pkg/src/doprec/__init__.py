"""Photovoltage simulation and doping-profile reconstruction.

The package couples a finite-volume drift-diffusion solver for laser-probed
semiconductor samples with data generation utilities and learned inverse
models (least squares, MLP, 1D residual networks) that recover the doping
profile from the measured photovoltage signal.
"""

__version__ = "0.1.0"
