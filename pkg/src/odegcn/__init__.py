"""Graph forecasting models built from reaction-diffusion and SIR network dynamics."""

__version__ = "0.1.0"
