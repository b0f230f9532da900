"""Discrete diffusion with a learnable forward (noising) process.

Desk-scale laboratory: small state spaces, exact enumeration oracles, and a
two-phase (relaxed warm-up, then score-function) training loop.
"""

__version__ = "0.1.0"
