"""Layer-parallel training of ODE residual networks with nested iteration."""

__version__ = "0.1.0"
