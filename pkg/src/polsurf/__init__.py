"""Polarimetric neural implicit surface reconstruction, CPU scale.

Recovers a signed distance field of an object from multi-view
polarization images by jointly minimizing photometric, polarimetric,
normal-smoothness and eikonal losses; ships a synthetic polarization
renderer with analytic ground truth for verification.
"""

__version__ = "0.1.0"
