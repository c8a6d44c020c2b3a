"""Coagulation-diffusion in periodically perforated media: micro solver, cell problems and two-scale limit."""

__version__ = "0.1.0"
