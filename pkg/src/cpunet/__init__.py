"""CP-UNet: contour-probabilistic U-Net on a small numpy autodiff engine."""

from .network import CpUnet, CpUnetConfig, ForwardOutput, forward, parameter_census

__all__ = ["CpUnet", "CpUnetConfig", "ForwardOutput", "forward", "parameter_census"]
__version__ = "0.1.0"
