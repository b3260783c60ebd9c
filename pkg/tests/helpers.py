"""Shared builders and independent oracles for the test suite."""

import numpy as np

from lowfield.constants import DEFAULT_CONSTANTS
from lowfield.encode import make_phantom
from lowfield.fieldmap import dipole_field_matrix, linear_fit, spanned_axes
from lowfield.sequence import build_protocol
from lowfield.synthetic import coil_map, matched_grid, quadratic_for_deviation, readout_map

GAMMA = DEFAULT_CONSTANTS.gamma

# criterion number -> (passed, detail); printed in the terminal summary
ACCEPTANCE = {}

G_READ = 7.6e-3
G_Z = 0.815e-3 * 9.0


def slice_setup(n=16, nt=None, q_fraction=0.0, b0=0.0, fov=0.22, gz_q=0.0):
    """Single-y slice with a matched grid and synthetic readout/z maps.

    ``q_fraction`` sets the readout quadratic term as a fraction of the
    linear field at the FOV edge.
    """
    nt = nt or n
    dwell = 1.0 / (GAMMA * G_READ * (fov / n) * nt)
    prot, tab = build_protocol("PD", (n, 1, n), n_samples=nt, dwell=dwell)
    grid = matched_grid(prot, G_READ, G_Z)
    q = quadratic_for_deviation(G_READ, fov / 2, q_fraction) if q_fraction else 0.0
    gx = readout_map(grid, G_READ, q, b0)
    gz = coil_map(grid, G_Z, 2, q=gz_q)
    return prot, tab, grid, gx, gz


def dense_matrix(gx, gz, protocol, table, gy=None, b0=None):
    """Encoding matrix built row by row straight from the signal equation."""
    if b0 is None:
        b0 = linear_fit(gx, axes=spanned_axes(gx.grid)).b0
    t = protocol.readout_times
    lz = table.l_z
    ly = table.l_y if gy is not None else np.zeros(1)
    rows = []
    for n in range(len(lz)):
        for e in range(len(ly)):
            for tt in t:
                phase = (gx.values - b0) * tt + lz[n] * gz.values * protocol.tau
                if gy is not None:
                    phase = phase + ly[e] * gy.values * protocol.tau
                rows.append(np.exp(-2j * np.pi * GAMMA * phase))
    return np.array(rows)


def blob_phantom(grid, centers, sigma_px=1.5, disc=0.3, disc_radius=0.09):
    pts = grid.points()
    x, z = pts[:, 0], pts[:, 2]
    sig = sigma_px * grid.dx
    m = np.zeros(grid.size)
    for cx, cz in centers:
        m += np.exp(-((x - cx) ** 2 + (z - cz) ** 2) / (2 * sig**2))
    if disc:
        m += disc * make_phantom("disks", grid, {"disks": [{"center": (0, 0), "radius": disc_radius}]}).values
    return m


BLOB_CENTERS = [(-0.08, 0.0), (0.08, 0.0), (0.0, 0.05), (-0.05, -0.06), (0.06, 0.06), (0.0, 0.0)]


def distortion_instance(n=128, nt=160):
    """The 22 cm, 10%-quadratic readout instance used for the distortion criteria."""
    prot, tab, grid, gx, gz = slice_setup(n, nt, q_fraction=0.1)
    m = blob_phantom(grid, BLOB_CENTERS)
    return prot, tab, grid, gx, gz, m


def rk4_bloch(M0, pulse, offsets, b1_scale=1.0, substeps=100):
    """Classical RK4 on dM/dt = M x w, ``substeps`` steps per waveform sample.

    For a linear constant-coefficient step RK4 is exactly the degree-4
    Taylor polynomial of ``h A``, so each sample's propagator is that
    polynomial raised to ``substeps``.  Vectorized over isochromats.
    """
    offsets = np.atleast_1d(np.asarray(offsets, dtype=float))
    M = np.broadcast_to(np.asarray(M0, dtype=float), offsets.shape + (3,)).copy()
    k = 2 * np.pi * GAMMA
    h = pulse.dt / substeps
    eye = np.eye(3)
    for b in pulse.samples:
        w = np.zeros(offsets.shape + (3,))
        w[..., 0] = k * b.real * b1_scale
        w[..., 1] = k * b.imag * b1_scale
        w[..., 2] = 2 * np.pi * offsets
        # M x w = -[w]_x M
        A = np.zeros(offsets.shape + (3, 3))
        A[..., 0, 1], A[..., 0, 2] = w[..., 2], -w[..., 1]
        A[..., 1, 0], A[..., 1, 2] = -w[..., 2], w[..., 0]
        A[..., 2, 0], A[..., 2, 1] = w[..., 1], -w[..., 0]
        hA = h * A
        hA2 = hA @ hA
        P = eye + hA + hA2 / 2 + hA2 @ hA / 6 + hA2 @ hA2 / 24
        M = np.einsum("...ij,...j->...i", np.linalg.matrix_power(P, substeps), M)
    return M


def perturbed_shim_fixture(seed=0):
    """Linear 7.6 mT/m target plus three random dipoles outside a 4 cm ROI, with 64 ring shim sites."""
    from lowfield.fieldmap import Dipole, Grid3, LinearFit, Sphere, synthesize_field

    grid = Grid3.centered((9, 9, 9), 0.01)
    roi = Sphere((0, 0, 0), 0.04)
    target = LinearFit(0.08, np.array([7.6e-3, 0.0, 0.0]), 0.0)
    rng = np.random.default_rng(seed)
    dipoles = []
    for _ in range(3):
        d = rng.normal(size=3)
        dipoles.append(Dipole(d / np.linalg.norm(d) * rng.uniform(0.10, 0.14), rng.normal(size=3) * 3))
    base = target.ideal_map(grid) + synthesize_field(dipoles, grid, "x")
    az = 2 * np.pi * np.arange(16) / 16
    sites = np.array([(0.07 * np.cos(a), 0.07 * np.sin(a), z) for z in (-0.03, -0.01, 0.01, 0.03) for a in az])
    return base, sites, target, roi


def coil_weights(grid, floor=0.1, center=(0.11, 0.0), width=0.06):
    """Receive-coil-like sensitivity: a Gaussian bump on a constant floor."""
    pts = grid.points()
    r2 = (pts[:, 0] - center[0]) ** 2 + (pts[:, 2] - center[1]) ** 2
    return floor + (1 - floor) * np.exp(-r2 / (2 * width**2))


def condition_numbers(A, precond):
    """Dense eigensolve: cond(A^H A) and cond of its symmetric Jacobi scaling."""
    C = A.conj().T @ A
    s = precond.inverse() ** 0.5
    e = np.linalg.eigvalsh(C)
    ep = np.linalg.eigvalsh(s[:, None] * C * s[None, :])
    return e[-1] / e[0], ep[-1] / ep[0]


def halbach_cylinder(n_az, radius, zs, k=2):
    """Stacked rings of unit-total-moment dipoles with the ``k`` Halbach rotation."""
    th = 2 * np.pi * np.arange(n_az) / n_az
    pos = np.array([(radius * np.cos(t), radius * np.sin(t), z) for z in zs for t in th])
    mom = np.array([(np.cos(k * t), np.sin(k * t), 0.0) for z in zs for t in th]) / n_az
    return pos, mom


def bfield(pos, mom, pts):
    return np.column_stack([np.einsum("psk,sk->p", dipole_field_matrix(pos, pts, c), mom) for c in range(3)])


def peak_position_x(plane, grid, x_guess, k, half_window=4):
    """Sub-pixel x of the magnitude peak in row ``k`` near ``x_guess`` (parabolic vertex)."""
    x = grid.axis_coords(0)
    j0 = int(np.argmin(np.abs(x - x_guess)))
    lo = max(j0 - half_window, 1)
    j = lo + int(np.argmax(plane[lo:j0 + half_window + 1, k]))
    a, b, c = plane[j - 1:j + 2, k]
    return x[0] + (j + 0.5 * (a - c) / (a - 2 * b + c)) * grid.dx
