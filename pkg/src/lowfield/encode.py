"""Digital phantoms and the matrix-free encoding operator.

For readout time ``t`` (zero at the echo center), shot ``n`` and echo ``e``
the modeled sample is

    s[n, e, t] = sum_r exp(-i 2 pi gamma (Gx(r) t + l_z(n) Gz(r) tau + l_y(e) Gy(r) tau)) m(r)

with Dirac voxels on the phantom grid and no relaxation.  The phase
factorizes per axis, so forward and adjoint are a handful of dense
products with precomputed per-axis exponentials.  On a single-y slice the
``Gy`` term is absent and ``e`` has length 1.
"""

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.sparse.linalg import LinearOperator

from ._validation import check_positive, check_same_grid
from .constants import DEFAULT_CONSTANTS
from .fieldmap import FieldMap, Grid3, linear_fit, spanned_axes
from .sequence import AcquisitionProtocol, PhaseEncodeTable, encode_indices

__all__ = [
    "Phantom",
    "SignalData",
    "EncodingOperator",
    "make_phantom",
    "partition_y",
    "add_noise",
    "shepp_logan_ellipses",
]


@dataclass(frozen=True, eq=False)
class Phantom:
    grid: Grid3
    values: np.ndarray
    kind: str = "custom"

    def __post_init__(self):
        v = np.array(self.values, dtype=float).reshape(-1)
        if v.size != self.grid.size:
            raise ValueError(f"phantom has {v.size} values, grid has {self.grid.size}")
        if not np.all(np.isfinite(v)) or np.any(v < 0):
            raise ValueError("phantom values must be finite and >= 0")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def volume(self):
        return self.grid.reshape(self.values)

    def slice_y(self, j):
        g = self.grid.slice_y(j)
        return Phantom(g, g.flatten(self.volume[:, j : j + 1, :]), self.kind)

    def to_fieldmap(self, label=None):
        return FieldMap(self.grid, self.values, label or f"phantom {self.kind}", "a.u.")


@dataclass(frozen=True, eq=False)
class SignalData:
    """Complex samples indexed (shot, echo, readout sample)."""

    samples: np.ndarray
    dwell: float
    protocol_hash: str = ""
    noise_sigma: float = 0.0
    partition: Optional[int] = None

    def __post_init__(self):
        s = np.array(self.samples, dtype=complex)
        if s.ndim != 3:
            raise ValueError(f"signal samples must be 3-D (shots, echoes, samples), got shape {s.shape}")
        s.setflags(write=False)
        object.__setattr__(self, "samples", s)
        check_positive(float(self.dwell), "dwell")

    @property
    def shape(self):
        return self.samples.shape

    def energy(self):
        return float(np.vdot(self.samples, self.samples).real)

    def with_samples(self, samples, **changes):
        kw = dict(dwell=self.dwell, protocol_hash=self.protocol_hash, noise_sigma=self.noise_sigma,
                  partition=self.partition)
        kw.update(changes)
        return SignalData(samples, **kw)


def _warn_outside(grid, center, radius):
    lo = np.asarray(grid.origin)
    hi = lo + (np.array(grid.shape) - 1) * grid.spacing
    c = np.asarray(center, dtype=float)
    flat = np.array(grid.shape) > 1
    if np.any(((c - radius < lo - 1e-12) | (c + radius > hi + 1e-12)) & flat):
        warnings.warn(f"disc at {tuple(c)} radius {radius} extends outside the grid; clipped", RuntimeWarning,
                      stacklevel=3)


def _disk_values(grid, disks):
    pts = grid.points()
    out = np.zeros(grid.size)
    planar = grid.ny == 1
    for d in disks:
        c = np.asarray(d["center"], dtype=float)
        if c.size == 2:
            c = np.array([c[0], grid.origin[1], c[1]])
        r = float(d["radius"])
        check_positive(r, "radius")
        v = float(d.get("intensity", 1.0))
        _warn_outside(grid, c, r)
        diff = pts - c
        if planar:
            diff[:, 1] = 0.0
        inside = (diff**2).sum(axis=1) <= r * r
        out[inside] = v if d.get("mode", "set") == "set" else out[inside] + v
    return np.clip(out, 0, None)


def shepp_logan_ellipses():
    """Modified Shepp-Logan ellipses: (intensity, a, b, x0, y0, angle in degrees)."""
    return [
        (1.0, 0.69, 0.92, 0.0, 0.0, 0.0),
        (-0.8, 0.6624, 0.874, 0.0, -0.0184, 0.0),
        (-0.2, 0.11, 0.31, 0.22, 0.0, -18.0),
        (-0.2, 0.16, 0.41, -0.22, 0.0, 18.0),
        (0.1, 0.21, 0.25, 0.0, 0.35, 0.0),
        (0.1, 0.046, 0.046, 0.0, 0.1, 0.0),
        (0.1, 0.046, 0.046, 0.0, -0.1, 0.0),
        (0.1, 0.046, 0.023, -0.08, -0.605, 0.0),
        (0.1, 0.023, 0.023, 0.0, -0.606, 0.0),
        (0.1, 0.023, 0.046, 0.06, -0.605, 0.0),
    ]


def _grid_center_and_halfwidth(grid):
    lo = np.asarray(grid.origin)
    hi = lo + (np.array(grid.shape) - 1) * grid.spacing
    return (lo + hi) / 2, (hi - lo) / 2


def _shepp_logan(grid, scale=0.9):
    pts = grid.points()
    center, half = _grid_center_and_halfwidth(grid)
    u = (pts[:, 0] - center[0]) / (half[0] * scale if half[0] > 0 else 1.0)
    w = (pts[:, 2] - center[2]) / (half[2] * scale if half[2] > 0 else 1.0)
    out = np.zeros(grid.size)
    for rho, a, b, x0, y0, ang in shepp_logan_ellipses():
        th = np.deg2rad(ang)
        du, dw = u - x0, w - y0
        ur = du * np.cos(th) + dw * np.sin(th)
        wr = -du * np.sin(th) + dw * np.cos(th)
        out[(ur / a) ** 2 + (wr / b) ** 2 <= 1] += rho
    return np.clip(out, 0, None)


def _raster(grid, params):
    from PIL import Image

    from .io import read_raster

    if "path" in params:
        img = read_raster(params["path"])
    else:
        img = np.asarray(params["array"], dtype=float)
    if img.ndim != 2:
        raise ValueError("raster phantoms must be 2-D grayscale")
    resized = np.asarray(Image.fromarray(img.astype(np.float32), mode="F").resize((grid.nx, grid.nz),
                                                                                    Image.BILINEAR))
    # image rows run top to bottom, z runs bottom to top
    plane = np.clip(resized[::-1, :].T, 0, None)
    vol = np.repeat(plane[:, None, :], grid.ny, axis=1)
    return grid.flatten(vol)


def make_phantom(kind, grid: Grid3, params=None, seed=None) -> Phantom:
    """Proton-density phantom on ``grid``.

    Parameters
    ----------
    kind : {"disks", "shepp-logan", "random_disks", "raster"}
    params : dict
        ``disks``: ``{"disks": [{"center", "radius", "intensity"}, ...]}``
        (spheres on a 3-D grid, discs in x-z on a single-y grid; a 2-entry
        center means (x, z)).  ``shepp-logan``: optional ``scale``.
        ``random_disks``: ``n``, ``radius_range`` (m).  ``raster``:
        ``path`` or ``array``.
    seed : int, optional
        Used by ``random_disks``.
    """
    params = dict(params or {})
    if kind == "disks":
        values = _disk_values(grid, params.get("disks", []))
    elif kind == "shepp-logan":
        values = _shepp_logan(grid, params.get("scale", 0.9))
    elif kind == "random_disks":
        rng = np.random.default_rng(seed)
        center, half = _grid_center_and_halfwidth(grid)
        rmin, rmax = params.get("radius_range", (0.05 * half.max(), 0.25 * half.max()))
        disks = []
        for _ in range(int(params.get("n", 5))):
            r = float(rng.uniform(rmin, rmax))
            c = center + rng.uniform(-1, 1, 3) * np.clip(half - r, 0, None)
            disks.append({"center": c, "radius": r, "intensity": float(rng.uniform(0.2, 1.0)), "mode": "add"})
        values = _disk_values(grid, disks)
    elif kind == "raster":
        values = _raster(grid, params)
    else:
        raise ValueError(f"unknown phantom kind {kind!r}")
    return Phantom(grid, values, kind)


def _map_values(fmap, name):
    v = np.asarray(fmap.values, dtype=float)
    if not np.all(np.isfinite(v)):
        raise ValueError(f"{name} map has invalid (non-finite) samples on the encoding grid")
    return v


class EncodingOperator:
    """Forward model ``A`` and its adjoint for one slice or a full 3-D grid.

    Parameters
    ----------
    gx, gz : FieldMap
        Readout field (full B0 map) and z-coil field at peak current.
    protocol, table :
        Timing and encode tables.
    gy : FieldMap, optional
        y-coil field; required to model echoes on a grid with ``ny > 1``.
    b0 : float, optional
        Demodulation offset subtracted from ``gx``; defaults to the
        intercept of a linear fit of ``gx``.
    weights : array, optional
        Per-pixel multipliers (``A diag(w)``); used for nonuniform variants.
    """

    def __init__(self, gx: FieldMap, gz: FieldMap, protocol: AcquisitionProtocol, table: PhaseEncodeTable,
                 gy: Optional[FieldMap] = None, b0=None, weights=None, constants=DEFAULT_CONSTANTS):
        maps = [gx, gz] + ([gy] if gy is not None else [])
        self.grid = check_same_grid(*maps)
        if table.nz != protocol.n_shots or table.ny != protocol.echo_train_length:
            raise ValueError("phase-encode table does not match protocol matrix")
        self.protocol = protocol
        self.table = table
        self.constants = constants
        self.b0 = float(linear_fit(gx, axes=spanned_axes(self.grid)).b0) if b0 is None else float(b0)
        self.planar = gy is None
        if self.planar and self.grid.ny != 1:
            raise ValueError("a Gy map is required when the grid has ny > 1")
        k = -2j * np.pi * constants.gamma
        t = protocol.readout_times
        self.Ex = np.exp(k * np.outer(t, _map_values(gx, "Gx") - self.b0))
        self.Ez = np.exp(k * np.outer(table.l_z * protocol.tau, _map_values(gz, "Gz")))
        self.Ey = None if self.planar else np.exp(k * np.outer(table.l_y * protocol.tau, _map_values(gy, "Gy")))
        n_img = self.grid.size
        if weights is None:
            self.weights = None
        else:
            w = np.asarray(weights).reshape(-1)
            if w.size != n_img:
                raise ValueError("weights must have one entry per pixel")
            self.weights = w
        n_e = 1 if self.planar else table.ny
        self.data_shape = (table.nz, n_e, protocol.n_samples)

    @property
    def n_pixels(self):
        return self.grid.size

    @property
    def shape(self):
        return (int(np.prod(self.data_shape)), self.n_pixels)

    def _image(self, m):
        m = np.asarray(m)
        if m.size != self.n_pixels:
            raise ValueError(f"image has {m.size} entries, operator expects {self.n_pixels}")
        m = m.reshape(-1).astype(complex)
        return m * self.weights if self.weights is not None else m

    def forward(self, m):
        """Image (flat grid order) -> samples of shape ``data_shape``."""
        m = self._image(m)
        if self.planar:
            return ((self.Ez * m) @ self.Ex.T)[:, None, :]
        out = np.empty(self.data_shape, dtype=complex)
        for e in range(self.data_shape[1]):
            out[:, e, :] = (self.Ez * (self.Ey[e] * m)) @ self.Ex.T
        return out

    def adjoint(self, s):
        """Samples -> image-shaped complex vector (flat grid order)."""
        s = s.samples if isinstance(s, SignalData) else np.asarray(s)
        if s.size != int(np.prod(self.data_shape)):
            raise ValueError(f"data has shape {s.shape}, operator expects {self.data_shape}")
        s = s.reshape(self.data_shape)
        cEx = np.conj(self.Ex)
        cEz = np.conj(self.Ez)
        if self.planar:
            m = (cEz * (s[:, 0, :] @ cEx)).sum(axis=0)
        else:
            m = np.zeros(self.n_pixels, dtype=complex)
            for e in range(self.data_shape[1]):
                m += np.conj(self.Ey[e]) * (cEz * (s[:, e, :] @ cEx)).sum(axis=0)
        return m * np.conj(self.weights) if self.weights is not None else m

    def normal(self, m):
        return self.adjoint(self.forward(m))

    def diag_normal(self):
        """``diag(A^H A)`` computed from the per-axis factors (no unit-magnitude assumption)."""
        d = (np.abs(self.Ex) ** 2).sum(axis=0) * (np.abs(self.Ez) ** 2).sum(axis=0)
        if not self.planar:
            d = d * (np.abs(self.Ey) ** 2).sum(axis=0)
        if self.weights is not None:
            d = d * np.abs(self.weights) ** 2
        return d

    def simulate(self, phantom: Phantom, protocol_hash="", partition=None) -> SignalData:
        if not phantom.grid.matches(self.grid):
            raise ValueError("phantom grid does not match the encoding maps")
        return SignalData(self.forward(phantom.values), self.protocol.dwell, protocol_hash, 0.0, partition)

    def as_linear_operator(self):
        n_data = int(np.prod(self.data_shape))
        return LinearOperator(
            (n_data, self.n_pixels),
            matvec=lambda v: self.forward(v).reshape(-1),
            rmatvec=lambda v: self.adjoint(np.asarray(v).reshape(self.data_shape)),
            dtype=complex,
        )


def partition_y(data: SignalData, table: PhaseEncodeTable, unitary=True):
    """Split a 3-D acquisition into per-y-partition slice datasets.

    Echoes are reordered to ascending ``k_y`` and inverse-transformed along
    the echo axis.  Partition ``p`` holds the slice at
    ``y = (p - N//2) * FOV_y / N`` when the y encoding is linear and
    matched to the grid.  ``unitary=True`` preserves energy; ``False``
    scales by ``1/N`` so each partition equals that slice's own signal.
    """
    s = data.samples
    n = s.shape[1]
    if n != table.ny:
        raise ValueError(f"data has {n} echoes, table has {table.ny} y encodes")
    if sorted(table.y_order.tolist()) != encode_indices(n).tolist():
        raise ValueError("y encodes do not form a complete symmetric index set")
    if n == 1:
        return [data.with_samples(s.copy(), partition=0)]
    order = np.argsort(table.y_order)
    ky = table.y_order[order]
    c = n // 2
    p = np.arange(n)
    F = np.exp(2j * np.pi * np.outer(p - c, ky) / n) / (np.sqrt(n) if unitary else n)
    parts = np.einsum("pk,skt->spt", F, s[:, order, :])
    sigma = data.noise_sigma if unitary else data.noise_sigma / np.sqrt(n)
    return [data.with_samples(parts[:, j : j + 1, :], partition=j, noise_sigma=sigma) for j in range(n)]


def add_noise(data: SignalData, sigma, seed=None) -> SignalData:
    """Add i.i.d. complex Gaussian noise with standard deviation ``sigma`` per real/imag part."""
    check_positive(sigma, "sigma", allow_zero=True)
    if sigma == 0:
        return data.with_samples(data.samples.copy())
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, sigma, data.shape) + 1j * rng.normal(0.0, sigma, data.shape)
    total = float(np.hypot(data.noise_sigma, sigma))
    return data.with_samples(data.samples + noise, noise_sigma=total)
