"""Fiber-orientation modeling toolkit: CSD fitting, synthetic phantoms, and a
small 3D CNN that regresses multi-shell FOD coefficients from single-shell ones.
"""

__version__ = "0.1.0"
