"""Regular-grid scalar field maps and point-dipole magnet physics.

Maps store one scalar per grid sample in x-fastest order (index
``i + nx*(j + ny*k)``), which is also the on-disk FMAP layout.  Regions
outside an analysis ROI carry NaN and are skipped by every statistic.
"""

import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import (
    EncodingHoleError,
    RankDeficiencyError,
    SingularityError,
    axis_index,
    check_points,
    check_vector3,
)
from .constants import DEFAULT_CONSTANTS

__all__ = [
    "Grid3",
    "Sphere",
    "FieldMap",
    "Dipole",
    "LinearFit",
    "dipole_field",
    "dipole_field_matrix",
    "synthesize_field",
    "linear_fit",
    "error_map",
    "deformation_map",
    "LinearFieldFit",
    "spanned_axes",
]


@dataclass(frozen=True)
class Grid3:
    nx: int
    ny: int
    nz: int
    dx: float
    dy: float
    dz: float
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        for name in ("nx", "ny", "nz"):
            n = getattr(self, name)
            if int(n) != n or n < 1:
                raise ValueError(f"{name} must be an integer >= 1, got {n!r}")
            object.__setattr__(self, name, int(n))
        for name in ("dx", "dy", "dz"):
            d = float(getattr(self, name))
            if not (np.isfinite(d) and d > 0):
                raise ValueError(f"{name} must be positive, got {d!r}")
            object.__setattr__(self, name, d)
        object.__setattr__(self, "origin", tuple(float(v) for v in check_vector3(self.origin, "origin")))

    @classmethod
    def centered(cls, shape, spacing):
        """Grid whose sample ``n//2`` on each axis sits at the world origin."""
        shape = tuple(int(n) for n in shape)
        spacing = np.broadcast_to(np.asarray(spacing, dtype=float), (3,))
        origin = tuple(-(n // 2) * d for n, d in zip(shape, spacing))
        return cls(*shape, *spacing, origin=origin)

    @property
    def shape(self):
        return (self.nx, self.ny, self.nz)

    @property
    def spacing(self):
        return np.array([self.dx, self.dy, self.dz])

    @property
    def size(self):
        return self.nx * self.ny * self.nz

    def axis_coords(self, axis):
        a = axis_index(axis)
        return self.origin[a] + np.arange(self.shape[a]) * self.spacing[a]

    def points(self):
        """World coordinates of every sample, shape (size, 3), x-fastest."""
        x, y, z = (self.axis_coords(a) for a in range(3))
        X, Y, Z = np.meshgrid(x, y, z, indexing="ij")
        return np.column_stack([X.ravel(order="F"), Y.ravel(order="F"), Z.ravel(order="F")])

    def reshape(self, values):
        """Flat x-fastest vector -> array indexed ``[i, j, k]``."""
        return np.asarray(values).reshape(self.shape, order="F")

    def flatten(self, volume):
        return np.asarray(volume).reshape(-1, order="F")

    def matches(self, other, rtol=1e-9):
        return (
            self.shape == other.shape
            and np.allclose(self.spacing, other.spacing, rtol=rtol, atol=0)
            and np.allclose(self.origin, other.origin, rtol=0, atol=rtol * float(self.spacing.max()))
        )

    def slice_y(self, j):
        """The single-``y`` plane containing sample index ``j``."""
        y = self.origin[1] + j * self.dy
        return Grid3(self.nx, 1, self.nz, self.dx, self.dy, self.dz, (self.origin[0], y, self.origin[2]))

    def to_dict(self):
        return {
            "nx": self.nx, "ny": self.ny, "nz": self.nz,
            "dx": self.dx, "dy": self.dy, "dz": self.dz,
            "origin": list(self.origin),
        }


@dataclass(frozen=True)
class Sphere:
    center: tuple = (0.0, 0.0, 0.0)
    radius: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(v) for v in check_vector3(self.center, "center")))
        if not (np.isfinite(self.radius) and self.radius > 0):
            raise ValueError("radius must be positive")
        object.__setattr__(self, "radius", float(self.radius))

    def contains(self, points):
        pts = check_points(points)
        d2 = ((pts - np.asarray(self.center)) ** 2).sum(axis=1)
        # a hair of slack so samples exactly on the surface count as inside
        return d2 <= self.radius**2 * (1 + 1e-12)


@dataclass(frozen=True, eq=False)
class FieldMap:
    grid: Grid3
    values: np.ndarray
    label: str = ""
    units: str = "T"

    def __post_init__(self):
        vals = np.array(self.values, dtype=float).reshape(-1)
        if vals.size != self.grid.size:
            raise ValueError(f"values length {vals.size} does not match grid size {self.grid.size}")
        if np.any(np.isinf(vals)):
            raise ValueError("field map values must be finite (NaN marks invalid samples)")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @property
    def valid(self):
        return np.isfinite(self.values)

    @property
    def volume(self):
        return self.grid.reshape(self.values)

    def with_values(self, values, label=None, units=None):
        return FieldMap(self.grid, values, self.label if label is None else label, self.units if units is None else units)

    def slice_y(self, j):
        vol = self.volume[:, j : j + 1, :]
        return FieldMap(self.grid.slice_y(j), self.grid.slice_y(j).flatten(vol), self.label, self.units)

    def __add__(self, other):
        if not self.grid.matches(other.grid):
            raise ValueError("cannot add maps on different grids")
        return self.with_values(self.values + other.values)

    def __sub__(self, other):
        if not self.grid.matches(other.grid):
            raise ValueError("cannot subtract maps on different grids")
        return self.with_values(self.values - other.values)


@dataclass(frozen=True)
class Dipole:
    position: tuple
    moment: tuple

    def __post_init__(self):
        object.__setattr__(self, "position", tuple(float(v) for v in check_vector3(self.position, "position")))
        object.__setattr__(self, "moment", tuple(float(v) for v in check_vector3(self.moment, "moment")))


@dataclass(frozen=True)
class LinearFit:
    """``B(r) ~ b0 + g . r`` with ``r`` in world coordinates."""

    b0: float
    g: np.ndarray
    rmse: float
    roi: Optional[Sphere] = None
    n_samples: int = 0
    axes: tuple = (0, 1, 2)

    def __post_init__(self):
        object.__setattr__(self, "g", check_vector3(self.g, "g"))
        if self.rmse < 0:
            raise ValueError("rmse must be >= 0")

    def evaluate(self, points):
        pts = check_points(points)
        return self.b0 + pts @ self.g

    def ideal_map(self, grid, label=None):
        return FieldMap(grid, self.evaluate(grid.points()), label or "ideal")


def _dipole_kernel(r, constants):
    """Field per unit moment: tensor (n, 3, 3) mapping moment -> B."""
    dist = np.linalg.norm(r, axis=-1)
    rhat = r / dist[..., None]
    k = constants.mu0 / (4 * np.pi)
    eye = np.eye(3)
    return k * (3 * rhat[..., :, None] * rhat[..., None, :] - eye) / dist[..., None, None] ** 3


def dipole_field(dipole, points, constants=DEFAULT_CONSTANTS):
    """Magnetic flux density of an ideal point dipole.

    Parameters
    ----------
    dipole : Dipole
    points : array_like, shape (3,) or (n, 3)
        Evaluation positions in meters.

    Returns
    -------
    ndarray, shape matching ``points``
        B in Tesla.
    """
    single = np.ndim(points) == 1
    pts = check_points(points)
    r = pts - np.asarray(dipole.position)
    dist = np.linalg.norm(r, axis=1)
    if np.any(dist <= 1e-12):
        raise SingularityError("evaluation point coincides with dipole position")
    m = np.asarray(dipole.moment)
    rhat = r / dist[:, None]
    k = constants.mu0 / (4 * np.pi)
    B = k * (3 * rhat * (rhat @ m)[:, None] - m) / dist[:, None] ** 3
    return B[0] if single else B


def dipole_field_matrix(positions, points, component, constants=DEFAULT_CONSTANTS):
    """Linear map from stacked dipole moments to one field component.

    Returns ``M`` of shape (n_points, n_dipoles, 3) such that the selected
    component at point p equals ``sum_s M[p, s] . m_s``.
    """
    c = axis_index(component)
    pos = check_points(positions, "positions")
    pts = check_points(points)
    r = pts[:, None, :] - pos[None, :, :]
    dist = np.linalg.norm(r, axis=-1)
    hit = np.argwhere(dist <= 1e-12)
    if hit.size:
        raise SingularityError(f"grid point {hit[0, 0]} coincides with dipole {hit[0, 1]}")
    rhat = r / dist[..., None]
    k = constants.mu0 / (4 * np.pi)
    M = 3 * rhat[..., c, None] * rhat
    M[..., c] -= 1.0
    M *= k / dist[..., None] ** 3
    return M


def synthesize_field(dipoles: Sequence[Dipole], grid: Grid3, component="x", constants=DEFAULT_CONSTANTS,
                     label=None, chunk=256):
    """Superpose dipole fields on every sample of ``grid``."""
    c = axis_index(component)
    pts = grid.points()
    total = np.zeros(grid.size)
    if len(dipoles) == 0:
        return FieldMap(grid, total, label or "xyz"[c])
    pos = np.array([d.position for d in dipoles])
    mom = np.array([d.moment for d in dipoles])
    for start in range(0, len(dipoles), chunk):
        sl = slice(start, start + chunk)
        r = pts[:, None, :] - pos[None, sl, :]
        dist = np.linalg.norm(r, axis=-1)
        hit = np.argwhere(dist <= 1e-12)
        if hit.size:
            raise SingularityError(
                f"dipole {start + hit[0, 1]} coincides with grid sample {hit[0, 0]}"
            )
        rhat = r / dist[..., None]
        mr = np.einsum("psk,sk->ps", rhat, mom[sl])
        contrib = (3 * rhat[..., c] * mr - mom[None, sl, c]) / dist**3
        total += contrib.sum(axis=1)
    total *= constants.mu0 / (4 * np.pi)
    return FieldMap(grid, total, label or "xyz"[c])


def spanned_axes(grid):
    """Axes along which ``grid`` has more than one sample."""
    return tuple(a for a in range(3) if grid.shape[a] > 1)


def _roi_samples(fmap, roi):
    pts = fmap.grid.points()
    mask = fmap.valid.copy()
    if roi is not None:
        mask &= roi.contains(pts)
    return pts, mask


def linear_fit(fmap: FieldMap, roi: Optional[Sphere] = None, axes=None) -> LinearFit:
    """Least-squares ``b0 + g . r`` over the valid samples inside ``roi``.

    ``axes`` restricts which gradient components are fitted (for example
    ``("x", "z")`` on a single-y plane); the others are reported as 0.
    Raises ``RankDeficiencyError`` when the samples cannot determine the
    requested model.
    """
    ax = (0, 1, 2) if axes is None else tuple(sorted({axis_index(a) for a in axes}))
    pts, mask = _roi_samples(fmap, roi)
    P = pts[mask]
    y = fmap.values[mask]
    if len(y) < len(ax) + 1:
        raise RankDeficiencyError(f"only {len(y)} samples inside ROI, need >= {len(ax) + 1}")
    center = P.mean(axis=0)
    X = np.column_stack([np.ones(len(y))] + [P[:, a] - center[a] for a in ax])
    scale = np.linalg.norm(X, axis=0)
    scale[scale == 0] = 1.0
    sv = np.linalg.svd(X / scale, compute_uv=False)
    if sv[-1] <= 1e-10 * sv[0]:
        raise RankDeficiencyError("ROI samples are degenerate (coplanar or collinear) for the requested axes")
    beta = np.linalg.solve(X.T @ X, X.T @ y)
    resid = y - X @ beta
    g = np.zeros(3)
    for i, a in enumerate(ax):
        g[a] = beta[1 + i]
    b0 = beta[0] - center @ g
    rmse = float(np.sqrt(np.mean(resid**2)))
    return LinearFit(float(b0), g, rmse, roi, int(len(y)), ax)


def error_map(fmap: FieldMap, fit: LinearFit, roi: Optional[Sphere] = None) -> FieldMap:
    """Percent deviation from the fitted linear field, normalized by the ideal field's ROI span."""
    pts, mask = _roi_samples(fmap, roi)
    ideal = fit.evaluate(pts)
    span = np.ptp(ideal[mask]) if mask.any() else 0.0
    # rounding leaves a ~1e-16 relative slope on constant maps
    if not span > 1e-12 * np.abs(ideal[mask]).max(initial=0.0):
        raise RankDeficiencyError("ideal field has zero span over the ROI")
    out = np.full(fmap.grid.size, np.nan)
    out[mask] = 100.0 * (fmap.values[mask] - ideal[mask]) / span
    return FieldMap(fmap.grid, out, f"{fmap.label} error", "%")


def deformation_map(fmap: FieldMap, fit: LinearFit, axis, roi: Optional[Sphere] = None) -> FieldMap:
    """Apparent-minus-true position along ``axis`` if the field were assumed linear."""
    a = axis_index(axis)
    ga = fit.g[a]
    if ga == 0 or not np.isfinite(ga) or abs(ga) < 1e-15 * max(np.abs(fit.g).max(), 1e-300):
        raise EncodingHoleError(f"fitted gradient along {'xyz'[a]} vanishes")
    pts, mask = _roi_samples(fmap, roi)
    off = np.delete(np.arange(3), a)
    other = pts[:, off] @ fit.g[off]
    apparent = (fmap.values - fit.b0 - other) / ga
    out = np.full(fmap.grid.size, np.nan)
    out[mask] = apparent[mask] - pts[mask, a]
    return FieldMap(fmap.grid, out, f"{fmap.label} deformation {'xyz'[a]}", "m")


class LinearFieldFit(BaseEstimator):
    """Estimator wrapper around :func:`linear_fit`.

    Parameters
    ----------
    roi : Sphere or None
        Samples used in the fit; ``None`` uses every valid sample.
    axes : sequence or None
        Gradient components to fit.
    """

    def __init__(self, roi=None, axes=None):
        self.roi = roi
        self.axes = axes

    def fit(self, X, y=None):
        if not isinstance(X, FieldMap):
            raise TypeError("LinearFieldFit.fit expects a FieldMap")
        self.fit_ = linear_fit(X, self.roi, self.axes)
        self.b0_ = self.fit_.b0
        self.gradient_ = self.fit_.g
        self.rmse_ = self.fit_.rmse
        return self

    def predict(self, X):
        check_is_fitted(self)
        if isinstance(X, Grid3):
            return self.fit_.evaluate(X.points())
        return self.fit_.evaluate(X)

    def error_map(self, fmap):
        check_is_fitted(self)
        return error_map(fmap, self.fit_, self.roi)

    def deformation_map(self, fmap, axis="x"):
        check_is_fitted(self)
        return deformation_map(fmap, self.fit_, axis, self.roi)


def warn_if_near(distance, cube_side):
    if cube_side and distance < 2 * cube_side:
        warnings.warn(
            f"dipole model used {distance:.4f} m from a {cube_side:.4f} m cube (< 2 sides)",
            RuntimeWarning,
            stacklevel=3,
        )
