"""Meta-learned neural state-space models with implicit meta-gradients and tracking MPC."""

__version__ = "0.1.0"
