"""Model-based reconstruction by preconditioned CG, FFT baseline, intensity correction and SNR."""

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.ndimage import gaussian_filter
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import DivergenceError, check_positive
from .constants import DEFAULT_CONSTANTS
from .encode import EncodingOperator, SignalData
from .fieldmap import Grid3, LinearFit

__all__ = [
    "Image",
    "Preconditioner",
    "build_preconditioner",
    "cg_solve",
    "fft_recon",
    "intensity_correct",
    "compute_snr",
    "relative_rmse",
    "ModelBasedReconstructor",
    "FFTReconstructor",
]


@dataclass(frozen=True, eq=False)
class Image:
    grid: Grid3
    values: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        v = np.array(self.values, dtype=complex).reshape(-1)
        if v.size != self.grid.size:
            raise ValueError(f"image has {v.size} values, grid has {self.grid.size}")
        if not np.all(np.isfinite(v)):
            raise ValueError("image values must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def magnitude(self):
        return np.abs(self.values)

    def plane(self, magnitude=True):
        """2-D array indexed ``[x, z]`` for a single-y slice."""
        vol = self.grid.reshape(self.magnitude if magnitude else self.values)
        if vol.shape[1] != 1:
            raise ValueError("plane() needs a single-y slice")
        return vol[:, 0, :]


@dataclass(frozen=True, eq=False)
class Preconditioner:
    """Per-pixel weights ``diag(A^H A)**2`` and the encoding-hole mask."""

    weights: np.ndarray
    holes: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        if not np.all(np.isfinite(w)) or np.any(w <= 0):
            raise ValueError("preconditioner weights must be positive and finite")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "holes", np.asarray(self.holes, dtype=bool).reshape(-1))

    @property
    def n_holes(self):
        return int(self.holes.sum())

    def inverse(self):
        """Inverse of the preconditioning matrix, as applied in PCG.

        The weights are applied symmetrically as ``W**(-1/4)`` on each side
        of ``A^H A``; in PCG form that is ``M^-1 = W**(-1/2)``.
        """
        return self.weights ** -0.5


def build_preconditioner(op: EncodingOperator) -> Preconditioner:
    """Squared diagonal of ``A^H A``; zero-diagonal pixels get unit weight and are flagged."""
    if op.shape[0] == 0:
        raise ValueError("operator has no samples")
    d = np.asarray(op.diag_normal(), dtype=float)
    holes = ~(d > 0)
    if holes.any():
        warnings.warn(f"{int(holes.sum())} encoding-hole pixels (zero diagonal) given unit weight", RuntimeWarning,
                      stacklevel=2)
    w = np.where(holes, 1.0, d**2)
    return Preconditioner(w, holes)


def cg_solve(data, op: EncodingOperator, precond: Optional[Preconditioner] = None, tol=1e-3, max_iter=100,
             lam=0.0, x0=None) -> Image:
    """Solve ``(A^H A + lam I) m = A^H s`` by (preconditioned) conjugate gradient.

    Stops when ``||A^H s - (A^H A + lam I) m|| / ||A^H s|| < tol``.  The
    data residual ``||s - A m||`` is recorded every iteration; CG on the
    normal equations minimizes it over the growing Krylov space, so the
    history is non-increasing.

    Raises
    ------
    DivergenceError
        If a residual becomes non-finite; ``history`` holds the iterations so far.
    """
    check_positive(tol, "tol")
    s = data.samples if isinstance(data, SignalData) else np.asarray(data)
    s = s.reshape(op.data_shape)
    minv = None if precond is None else precond.inverse()

    def C(v):
        out = op.normal(v)
        return out + lam * v if lam else out

    b = op.adjoint(s)
    bnorm = float(np.linalg.norm(b))
    x = np.zeros(op.n_pixels, dtype=complex) if x0 is None else np.asarray(x0, dtype=complex).reshape(-1).copy()
    prov = {"method": "CG", "preconditioned": precond is not None, "tol": tol, "lambda": lam,
            "encoding_holes": 0 if precond is None else precond.n_holes}
    if bnorm == 0:
        prov.update(iterations=0, relative_residual=0.0, residual_history=[0.0],
                    data_residual_history=[float(np.linalg.norm(s))])
        return Image(op.grid, np.zeros(op.n_pixels), prov)
    r = b - C(x) if x0 is not None else b.copy()
    z = r * minv if minv is not None else r
    p = z.copy()
    rz = np.vdot(r, z).real
    hist = [float(np.linalg.norm(r)) / bnorm]
    dres = [float(np.linalg.norm(s - op.forward(x)))]
    it = 0
    while hist[-1] >= tol and it < max_iter:
        Cp = C(p)
        denom = np.vdot(p, Cp).real
        if not np.isfinite(denom) or denom <= 0:
            if not np.isfinite(denom):
                raise DivergenceError(f"non-finite curvature at iteration {it}", hist)
            break
        alpha = rz / denom
        x = x + alpha * p
        r = r - alpha * Cp
        it += 1
        rel = float(np.linalg.norm(r)) / bnorm
        if not np.isfinite(rel):
            raise DivergenceError(f"non-finite residual at iteration {it}", hist + [rel])
        hist.append(rel)
        dres.append(float(np.linalg.norm(s - op.forward(x))))
        z = r * minv if minv is not None else r
        rz_new = np.vdot(r, z).real
        p = z + (rz_new / rz) * p
        rz = rz_new
    prov.update(iterations=it, relative_residual=hist[-1], residual_history=hist, data_residual_history=dres)
    return Image(op.grid, x, prov)


def _slope(fit, axis):
    return float(fit.g[axis]) if isinstance(fit, LinearFit) else float(fit)


def fft_recon(data: SignalData, fit_x: LinearFit, fit_z: LinearFit, protocol, table, grid: Grid3, b0=None,
              constants=DEFAULT_CONSTANTS) -> Image:
    """Inverse DFT under the ideal linear encoding implied by the fits.

    The readout is assumed to encode ``k_x = gamma g_x t`` and shot ``n`` to
    encode ``k_z = gamma g_z l(n) tau``; constant terms of the fits become
    phase corrections.  Each pixel is the normalized inverse-DFT sum, so
    when the sampling matches the grid (``dk * d * N`` equal to 1 on both
    axes) this is the exact inverse of the linear model.
    """
    s = data.samples if isinstance(data, SignalData) else np.asarray(data)
    if s.ndim == 3:
        if s.shape[1] != 1:
            raise ValueError("fft_recon works on one y-partition (n_echoes == 1)")
        s = s[:, 0, :]
    if s.shape != (table.nz, protocol.n_samples):
        raise ValueError(f"data shape {s.shape} does not cover the {table.nz} x {protocol.n_samples} encodes")
    if not np.all(np.isfinite(s)):
        raise ValueError("data has missing (non-finite) encodes")
    if grid.ny != 1:
        raise ValueError("fft_recon reconstructs a single-y slice")
    gx, gz = _slope(fit_x, 0), _slope(fit_z, 2)
    if gx == 0 or gz == 0:
        raise ValueError("fits must have nonzero readout and phase-encode gradients")
    b0 = float(getattr(fit_x, "b0", 0.0)) if b0 is None else float(b0)
    cx = float(getattr(fit_x, "b0", 0.0)) - b0
    cz = float(getattr(fit_z, "b0", 0.0))
    y0 = grid.origin[1]
    if isinstance(fit_x, LinearFit):
        cx += fit_x.g[1] * y0
    if isinstance(fit_z, LinearFit):
        cz += fit_z.g[1] * y0
    k = 2j * np.pi * constants.gamma
    t = protocol.readout_times
    lt = table.l_z * protocol.tau
    x = grid.axis_coords(0)
    z = grid.axis_coords(2)
    Px = np.exp(k * np.outer(t, gx * x + cx))  # (Nt, Nx)
    Pz = np.exp(k * np.outer(lt, gz * z + cz))  # (Nn, Nz)
    img = (Pz.T @ s @ Px) / (t.size * lt.size)  # (Nz, Nx)
    vals = grid.flatten(img.T[:, None, :])
    prov = {"method": "FFT", "iterations": 0, "relative_residual": float("nan"), "gx": gx, "gz": gz}
    return Image(grid, vals, prov)


def _plane(img, grid):
    a = np.asarray(img)
    if a.ndim == 1:
        vol = grid.reshape(a)
        return vol[:, 0, :] if vol.shape[1] == 1 else vol
    return a


def intensity_correct(img: Image, mask=None, sigma=None, eps_rel=1e-3) -> Image:
    """Divide the masked magnitude by its low-pass version.

    The low-pass is a normalized Gaussian convolution (blurred masked
    image over blurred mask), which stays unbiased near mask edges.
    ``sigma`` is in meters and defaults to FOV/8 per axis.  The divisor is
    floored at ``eps_rel`` times its maximum.
    """
    g = img.grid
    mag = g.reshape(img.magnitude)
    m = np.ones(mag.shape, dtype=bool) if mask is None else g.reshape(np.asarray(mask, dtype=bool).reshape(-1))
    fov = np.array(g.shape) * g.spacing
    sig = fov / 8 if sigma is None else np.broadcast_to(np.asarray(sigma, dtype=float), (3,))
    sig_px = np.where(np.array(g.shape) > 1, sig / g.spacing, 0.0)
    prov = dict(img.provenance, intensity_corrected=True, filter_sigma_m=[float(v) for v in sig])
    if not m.any():
        return Image(g, np.zeros(g.size), prov)
    masked = np.where(m, mag, 0.0)
    if not np.any(masked > 0):
        warnings.warn("masked image is all zero; intensity correction returns zeros", RuntimeWarning, stacklevel=2)
        return Image(g, np.zeros(g.size), prov)
    num = gaussian_filter(masked, sig_px, mode="constant")
    den = gaussian_filter(m.astype(float), sig_px, mode="constant")
    low = np.where(den > 1e-12, num / np.where(den > 1e-12, den, 1.0), 0.0)
    eps = eps_rel * low.max()
    out = np.where(m, masked / np.maximum(low, eps), 0.0)
    return Image(g, g.flatten(out), prov)


def compute_snr(img, signal_roi, background_roi):
    """``mean|signal| / mean|background| * sqrt(pi/2)`` (Rician correction of the background mean)."""
    vals = img.magnitude if isinstance(img, Image) else np.abs(np.asarray(img))
    vals = vals.reshape(-1)
    sig = np.asarray(signal_roi, dtype=bool).reshape(-1)
    bg = np.asarray(background_roi, dtype=bool).reshape(-1)
    if sig.size != vals.size or bg.size != vals.size:
        raise ValueError("ROI masks must match the image size")
    if not sig.any() or not bg.any():
        raise ValueError("signal and background ROIs must be nonempty")
    if np.any(sig & bg):
        raise ValueError("signal and background ROIs must be disjoint")
    mb = float(vals[bg].mean())
    if mb == 0:
        raise ValueError("background mean is zero; SNR undefined")
    return float(vals[sig].mean() / mb * np.sqrt(np.pi / 2))


def relative_rmse(estimate, truth):
    """``||estimate - truth|| / ||truth||``."""
    a = estimate.values if isinstance(estimate, Image) else np.asarray(estimate)
    b = np.asarray(truth.values if hasattr(truth, "values") else truth).reshape(-1)
    n = np.linalg.norm(b)
    if n == 0:
        raise ValueError("reference has zero norm")
    return float(np.linalg.norm(np.asarray(a).reshape(-1) - b) / n)


class ModelBasedReconstructor(BaseEstimator, TransformerMixin):
    """Generalized reconstruction: ``fit`` builds the operator, ``transform`` solves.

    Parameters
    ----------
    gx, gz, gy : FieldMap
        Encoding maps on the reconstruction grid.
    protocol, table :
        Acquisition description.
    precondition : bool
        Use the diagonal preconditioner.
    tol, max_iter, lam :
        CG stopping rule and optional Tikhonov weight.
    """

    def __init__(self, gx=None, gz=None, protocol=None, table=None, gy=None, b0=None, precondition=True,
                 tol=1e-3, max_iter=100, lam=0.0):
        self.gx = gx
        self.gz = gz
        self.protocol = protocol
        self.table = table
        self.gy = gy
        self.b0 = b0
        self.precondition = precondition
        self.tol = tol
        self.max_iter = max_iter
        self.lam = lam

    def fit(self, X=None, y=None):
        if self.gx is None or self.gz is None or self.protocol is None or self.table is None:
            raise ValueError("gx, gz, protocol and table are required")
        self.operator_ = EncodingOperator(self.gx, self.gz, self.protocol, self.table, self.gy, self.b0)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            self.preconditioner_ = build_preconditioner(self.operator_) if self.precondition else None
        for w in caught:
            warnings.warn(w.message, w.category, stacklevel=2)
        return self

    def transform(self, X):
        check_is_fitted(self)
        img = cg_solve(X, self.operator_, self.preconditioner_, self.tol, self.max_iter, self.lam)
        self.n_iter_ = img.provenance["iterations"]
        self.residual_ = img.provenance["relative_residual"]
        return img

    def inverse_transform(self, X):
        """Forward model of an image (``Image`` or flat array) as SignalData."""
        check_is_fitted(self)
        vals = X.values if isinstance(X, Image) else X
        return SignalData(self.operator_.forward(vals), self.protocol.dwell)


class FFTReconstructor(BaseEstimator, TransformerMixin):
    """Linear-gradient baseline: assumes the fitted gradients are exact."""

    def __init__(self, fit_x=None, fit_z=None, protocol=None, table=None, grid=None, b0=None):
        self.fit_x = fit_x
        self.fit_z = fit_z
        self.protocol = protocol
        self.table = table
        self.grid = grid
        self.b0 = b0

    def fit(self, X=None, y=None):
        if any(v is None for v in (self.fit_x, self.fit_z, self.protocol, self.table, self.grid)):
            raise ValueError("fit_x, fit_z, protocol, table and grid are required")
        self.gradients_ = (_slope(self.fit_x, 0), _slope(self.fit_z, 2))
        return self

    def transform(self, X):
        check_is_fitted(self)
        return fft_recon(X, self.fit_x, self.fit_z, self.protocol, self.table, self.grid, self.b0)
