"""Synthetic encoding fields and sampling-matched grids.

A grid is "matched" to a protocol when the k-space step times the pixel
size times the number of encodes is 1 on each encoded axis; on such a
grid the linear-gradient model is an exact (oversampled) DFT.
"""

import numpy as np

from .constants import DEFAULT_CONSTANTS
from .fieldmap import FieldMap, Grid3
from .sequence import GRADIENT_LIMITS

__all__ = ["matched_spacing", "matched_grid", "readout_map", "coil_map", "quadratic_for_deviation"]


def matched_spacing(protocol, gx, gz, gy=None, constants=DEFAULT_CONSTANTS):
    """Pixel sizes (dx, dy, dz) for which the linear encoding is an exact DFT."""
    gam = constants.gamma
    dx = 1.0 / (gam * gx * protocol.dwell * protocol.n_samples)
    out = [dx]
    for g, n in ((gy, protocol.matrix[1]), (gz, protocol.matrix[2])):
        m = n // 2
        if g is None or m == 0:
            out.append(dx)
        else:
            out.append(m / (n * gam * g * protocol.tau))
    return tuple(out)


def matched_grid(protocol, gx, gz=None, gy=None, planar=True, constants=DEFAULT_CONSTANTS):
    """Centered grid of ``matrix`` pixels with matched spacing.

    ``gz``/``gy`` default to the coil efficiency times peak current.
    With ``planar`` the grid is the single ``y = 0`` slice.
    """
    if gz is None:
        gz = GRADIENT_LIMITS["z"][0] * GRADIENT_LIMITS["z"][1]
    if gy is None:
        gy = GRADIENT_LIMITS["y"][0] * GRADIENT_LIMITS["y"][1]
    dx, dy, dz = matched_spacing(protocol, gx, gz, gy, constants)
    nx, ny, nz = protocol.matrix
    return Grid3.centered((nx, 1 if planar else ny, nz), (dx, dy, dz))


def readout_map(grid, g=7.6e-3, q=0.0, b0=0.0, axis=0, label="Gx"):
    """``b0 + g x + q x**2`` along ``axis``."""
    x = grid.points()[:, axis]
    return FieldMap(grid, b0 + g * x + q * x * x, label)


def coil_map(grid, g, axis, label=None, q=0.0):
    """Phase-encode coil field ``g r_axis + q r_axis**2`` at peak current."""
    r = grid.points()[:, axis]
    return FieldMap(grid, g * r + q * r * r, label or f"G{'xyz'[axis]}")


def quadratic_for_deviation(g, half_fov, fraction=0.1):
    """Quadratic coefficient making ``q x**2`` equal ``fraction * g x`` at ``x = half_fov``."""
    return fraction * g / half_fov
