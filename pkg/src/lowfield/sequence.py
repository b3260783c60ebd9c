"""3D RARE protocol construction: phase-encode tables, echo ordering and resolution estimates.

Axis conventions: x is the readout (built-in magnet gradient), y is
encoded along the echo train and later partitioned by FFT, z is encoded
shot to shot.  Encode indices run over ``-(N//2) .. ceil(N/2) - 1`` and the
blip scaling is ``l = index / (N//2)``.
"""

import json
from dataclasses import asdict, dataclass
from typing import Optional, Tuple

import numpy as np

from ._validation import SingularityError, TimingError, check_positive
from .constants import DEFAULT_CONSTANTS
from .io import canonical_hash, write_csv

__all__ = [
    "CONTRASTS",
    "GRADIENT_LIMITS",
    "AcquisitionProtocol",
    "PhaseEncodeTable",
    "encode_indices",
    "center_out_order",
    "build_protocol",
    "estimate_resolution",
]

CONTRASTS = ("PD", "T1", "T2")

# Gradient coil efficiency (T/m/A) and peak current (A) per phase axis.
GRADIENT_LIMITS = {"y": (0.575e-3, 4.5), "z": (0.815e-3, 9.0)}


def encode_indices(n):
    """Sorted encode indices ``-(n//2) .. ceil(n/2) - 1``."""
    if int(n) != n or n < 1:
        raise ValueError(f"encode count must be an integer >= 1, got {n!r}")
    n = int(n)
    return np.arange(-(n // 2), -(n // 2) + n)


def center_out_order(n):
    """0, +1, -1, +2, -2, ... restricted to the valid index set."""
    valid = set(encode_indices(n).tolist())
    order = [0]
    k = 1
    while len(order) < n:
        for v in (k, -k):
            if v in valid:
                order.append(v)
        k += 1
    return np.array(order[:n])


def _scaling(indices, n):
    m = n // 2
    return np.zeros(len(indices)) if m == 0 else np.asarray(indices, dtype=float) / m


@dataclass(frozen=True, eq=False)
class PhaseEncodeTable:
    y_order: np.ndarray
    z_order: np.ndarray

    def __post_init__(self):
        for name in ("y_order", "z_order"):
            v = np.array(getattr(self, name), dtype=int).reshape(-1)
            if sorted(v.tolist()) != encode_indices(len(v)).tolist():
                raise ValueError(f"{name} must be a permutation of the symmetric encode index set")
            v.setflags(write=False)
            object.__setattr__(self, name, v)

    @property
    def ny(self):
        return self.y_order.size

    @property
    def nz(self):
        return self.z_order.size

    @property
    def l_y(self):
        return _scaling(self.y_order, self.ny)

    @property
    def l_z(self):
        return _scaling(self.z_order, self.nz)

    def pairs(self):
        """``(shot, echo, y_index, z_index)`` for every acquired encode."""
        return [(s, e, int(self.y_order[e]), int(self.z_order[s]))
                for s in range(self.nz) for e in range(self.ny)]

    def rows(self):
        ly, lz = self.l_y, self.l_z
        return [(s, e, y, z, float(ly[e]), float(lz[s])) for s, e, y, z in self.pairs()]

    def write_csv(self, path):
        return write_csv(path, ["shot", "echo", "y_index", "z_index", "l_y", "l_z"], self.rows())

    def to_dict(self):
        return {"y_order": self.y_order.tolist(), "z_order": self.z_order.tolist()}


@dataclass(frozen=True)
class AcquisitionProtocol:
    contrast: str
    matrix: Tuple[int, int, int]
    tr: float
    te_eff: float
    echo_spacing: float
    n_samples: int
    dwell: float
    tau: float
    ti: Optional[float] = None
    averages: int = 1
    usable_echoes: str = "all"

    def __post_init__(self):
        if self.contrast not in CONTRASTS:
            raise ValueError(f"contrast must be one of {CONTRASTS}, got {self.contrast!r}")
        object.__setattr__(self, "matrix", tuple(int(v) for v in self.matrix))
        if len(self.matrix) != 3 or min(self.matrix) < 1:
            raise ValueError("matrix must be three counts >= 1")
        for name in ("tr", "te_eff", "echo_spacing", "dwell", "tau"):
            check_positive(float(getattr(self, name)), name)
        if int(self.n_samples) < 1 or int(self.averages) < 1:
            raise ValueError("n_samples and averages must be >= 1")
        if self.usable_echoes not in ("all", "odd", "even"):
            raise ValueError("usable_echoes must be 'all', 'odd' or 'even'")

    @property
    def echo_train_length(self):
        return self.matrix[1]

    @property
    def n_shots(self):
        return self.matrix[2]

    @property
    def readout_duration(self):
        return self.n_samples * self.dwell

    @property
    def readout_times(self):
        """Sample times relative to the echo center; sample ``n_samples // 2`` is t = 0."""
        return (np.arange(self.n_samples) - self.n_samples // 2) * self.dwell

    @property
    def echo_times(self):
        return self.echo_spacing * np.arange(1, self.echo_train_length + 1)

    def usable_mask(self):
        k = np.arange(1, self.echo_train_length + 1)
        if self.usable_echoes == "odd":
            return k % 2 == 1
        if self.usable_echoes == "even":
            return k % 2 == 0
        return np.ones(k.size, dtype=bool)

    def to_dict(self):
        d = asdict(self)
        d["matrix"] = list(self.matrix)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**{**d, "matrix": tuple(d["matrix"])})

    def hash(self, table: Optional[PhaseEncodeTable] = None):
        obj = {"protocol": self.to_dict()}
        if table is not None:
            obj["table"] = table.to_dict()
        return canonical_hash(obj)

    def to_json(self, table=None):
        obj = {"protocol": self.to_dict()}
        if table is not None:
            obj["table"] = table.to_dict()
        return json.dumps(obj, indent=2, sort_keys=True)


def build_protocol(contrast="PD", matrix=(64, 23, 16), tr=3.0, te_eff=None, ti=None, echo_spacing=13.9e-3,
                   n_samples=100, dwell=14e-6, tau=1e-3, averages=1, usable_echoes="all"):
    """RARE protocol and its phase-encode table.

    PD and T1 acquire k_y = 0 first and move outward alternating sign.
    T2 places k_y = 0 on the echo nearest ``te_eff`` (default: the middle echo) and
    orders the remaining encodes linearly in acquisition time; T1 adds an
    inversion time.

    Returns
    -------
    (AcquisitionProtocol, PhaseEncodeTable)
    """
    if contrast not in CONTRASTS:
        raise ValueError(f"contrast must be one of {CONTRASTS}, got {contrast!r}")
    nx, ny, nz = (int(v) for v in matrix)
    check_positive(echo_spacing, "echo_spacing")
    check_positive(tr, "tr")
    if contrast == "T2":
        target = echo_spacing * (ny // 2 + 1) if te_eff is None else float(te_eff)
        e0 = int(round(target / echo_spacing)) - 1
        if not 0 <= e0 < ny:
            attainable = ", ".join(f"{echo_spacing * (k + 1):.6g}" for k in range(ny))
            raise TimingError(f"te_eff {target:g} s is not attainable; attainable values (s): {attainable}")
        s = encode_indices(ny)
        y_order = np.roll(s, e0 - ny // 2)
    else:
        if te_eff is not None and not np.isclose(te_eff, echo_spacing):
            raise TimingError(
                f"center-out ordering puts k_y = 0 on the first echo; the only attainable te_eff is {echo_spacing:g} s"
            )
        e0 = 0
        y_order = center_out_order(ny)
    if contrast == "T1":
        if ti is None:
            raise ValueError("T1 contrast requires an inversion time ti")
        check_positive(ti, "ti")
    elif ti is not None:
        raise ValueError(f"ti applies only to T1 contrast, not {contrast}")
    if ny * echo_spacing + (ti or 0.0) > tr:
        raise TimingError(f"echo train ({ny} x {echo_spacing:g} s) plus ti exceeds tr {tr:g} s")
    table = PhaseEncodeTable(y_order, encode_indices(nz))
    protocol = AcquisitionProtocol(contrast, (nx, ny, nz), float(tr), float(echo_spacing * (e0 + 1)),
                                   float(echo_spacing), int(n_samples), float(dwell), float(tau),
                                   None if ti is None else float(ti), int(averages), usable_echoes)
    return protocol, table


def _gradient(fit, axis, name):
    g = float(fit.g[axis]) if hasattr(fit, "g") else float(fit)
    if g == 0 or not np.isfinite(g):
        raise SingularityError(f"{name} gradient is zero")
    return abs(g)


def estimate_resolution(fit_x, protocol: AcquisitionProtocol, fits_yz=None, constants=DEFAULT_CONSTANTS):
    """Nominal voxel size (m) per axis from linear fits of the encoding fields.

    Readout: ``1 / (gamma g_x T_readout)``.  Phase axes: the blip at
    ``|l| = 1`` reaches ``k_max = gamma g_peak tau``; with ``N // 2`` steps to
    ``k_max`` the FOV is ``(N // 2) / k_max`` and the voxel is ``FOV / N``
    (``1 / (2 gamma g_peak tau)`` for even ``N``).

    ``fits_yz`` holds the y- and z-coil fits at peak current (LinearFit or
    a gradient in T/m); by default the coil efficiency times peak current
    is used.
    """
    gx = _gradient(fit_x, 0, "readout")
    res = [1.0 / (constants.gamma * gx * protocol.readout_duration)]
    if fits_yz is None:
        fits_yz = tuple(e * i for e, i in (GRADIENT_LIMITS["y"], GRADIENT_LIMITS["z"]))
    for axis, fit, n in ((1, fits_yz[0], protocol.matrix[1]), (2, fits_yz[1], protocol.matrix[2])):
        g = _gradient(fit, axis, "yz"[axis - 1])
        m = n // 2
        if m == 0:
            raise SingularityError(f"{'xyz'[axis]} axis has a single encode (max index 0); resolution undefined")
        kmax = constants.gamma * g * protocol.tau
        res.append(m / kmax / n)
    return np.array(res)
