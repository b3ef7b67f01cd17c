"""
sketchforge - semi-supervised face sketch synthesis.

Pseudo sketch features from feature-space patch matching supervise a
residual generator trained with LSGAN and total-variation losses; SSIM,
FSIM and NLDA recognition evaluate the results.
"""

__version__ = "0.1.0"
