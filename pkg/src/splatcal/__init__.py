"""splatcal: self-supervised camera calibration with differentiable Gaussian splatting."""

__version__ = "0.1.0"
