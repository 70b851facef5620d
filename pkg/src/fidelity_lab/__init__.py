"""Desk-scale color-fidelity toolkit: a toy guided diffusion model, a learned
fidelity scorer trained with a soft-rank objective, and attention-driven
guidance refinement."""

__version__ = "0.1.0"
