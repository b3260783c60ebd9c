"""Relaxation-free Bloch simulation of hard and WURST pulses.

Rotating-frame convention: ``dM/dt = M x w`` with
``w = 2 pi (gamma B1x, gamma B1y, df)``.  A hard pulse about +x therefore
tips +z toward +y, and free precession at positive offset multiplies
``M+ = Mx + i My`` by ``exp(-i 2 pi df t)``.  Each waveform sample is held
constant for ``dt`` and applied as the exact rotation about its effective
field, which keeps ``|M|`` fixed to rounding.
"""

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from ._validation import TimingError, check_positive
from .constants import DEFAULT_CONSTANTS

__all__ = [
    "PulseWaveform",
    "SpinState",
    "ProfileGrid",
    "EchoTrainResult",
    "wurst_envelope",
    "wurst_phase",
    "adiabatic_peak_b1",
    "make_wurst",
    "make_hard",
    "make_ideal",
    "rotate",
    "precess",
    "propagate",
    "excitation_profile",
    "refocusing_profile",
    "simulate_echo_train",
    "phase_linearity_rms",
    "write_pulse_csv",
    "read_pulse_csv",
    "write_profile",
]

# Landau-Zener adiabaticity targets: P = 1 - exp(-pi Q / 2)
Q_EXCITATION = 2 * np.log(2) / np.pi  # P = 1/2, a 90 degree flip
Q_REFOCUS = 4.0


@dataclass(frozen=True, eq=False)
class PulseWaveform:
    """Complex B1+ samples (Tesla) held for ``dt`` each.

    ``kind="ideal"`` marks an instantaneous rotation: ``samples`` holds a
    single value whose modulus is the flip angle (rad) and whose argument
    is the pulse phase; ``dt`` is 0.
    """

    samples: np.ndarray
    dt: float
    kind: str = "custom"
    sweep_bw: float = 0.0
    order: int = 0
    label: str = ""

    def __post_init__(self):
        s = np.array(self.samples, dtype=complex).reshape(-1)
        if not np.all(np.isfinite(s)):
            raise ValueError("pulse waveform contains non-finite samples")
        if self.kind == "ideal":
            if s.size != 1 or self.dt != 0:
                raise ValueError("ideal pulses carry one sample and dt = 0")
        else:
            check_positive(float(self.dt), "dt")
            if s.size == 0:
                raise ValueError("pulse waveform needs at least one sample")
        s.setflags(write=False)
        object.__setattr__(self, "samples", s)
        object.__setattr__(self, "dt", float(self.dt))

    @property
    def n_samples(self):
        return self.samples.size

    @property
    def duration(self):
        return 0.0 if self.kind == "ideal" else self.n_samples * self.dt

    @property
    def times(self):
        """Sample midpoints measured from the pulse start."""
        return (np.arange(self.n_samples) + 0.5) * self.dt

    @property
    def peak_b1(self):
        return float(np.abs(self.samples).max())

    def scaled(self, c):
        return PulseWaveform(self.samples * c, self.dt, self.kind, self.sweep_bw, self.order, self.label)

    def phased(self, phase):
        return PulseWaveform(self.samples * np.exp(1j * phase), self.dt, self.kind, self.sweep_bw, self.order,
                             self.label)

    def split(self, index):
        """Two pulses made of samples ``[:index]`` and ``[index:]``."""
        if self.kind == "ideal":
            raise ValueError("ideal pulses cannot be split")
        return (PulseWaveform(self.samples[:index], self.dt, self.kind, label=self.label),
                PulseWaveform(self.samples[index:], self.dt, self.kind, label=self.label))

    def inverse(self):
        """Time-reversed, sign-flipped waveform; undoes this pulse on resonance."""
        if self.kind == "ideal":
            return PulseWaveform(-self.samples, 0.0, "ideal", label=self.label)
        return PulseWaveform(-self.samples[::-1], self.dt, self.kind, self.sweep_bw, self.order, self.label)

    def metadata(self):
        return {"kind": self.kind, "sweep_bw": self.sweep_bw, "envelope_order": self.order,
                "dt": self.dt, "duration": self.duration, "n_samples": self.n_samples,
                "peak_b1": self.peak_b1}


@dataclass(frozen=True, eq=False)
class SpinState:
    magnetization: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    off_resonance: float = 0.0
    b1_scale: float = 1.0

    def __post_init__(self):
        m = np.array(self.magnetization, dtype=float).reshape(3)
        if not np.all(np.isfinite(m)) or np.linalg.norm(m) > 1 + 1e-9:
            raise ValueError("magnetization must be finite with |M| <= 1")
        m.setflags(write=False)
        object.__setattr__(self, "magnetization", m)

    @property
    def mxy(self):
        return complex(self.magnetization[0], self.magnetization[1])


@dataclass(frozen=True, eq=False)
class ProfileGrid:
    """Response per (b1_scale, offset) cell; ``values[i, j]`` is at ``b1_scales[i]``, ``offsets[j]``."""

    b1_scales: np.ndarray
    offsets: np.ndarray
    values: np.ndarray
    quantity: str = "mxy"

    def __post_init__(self):
        b = np.asarray(self.b1_scales, dtype=float).reshape(-1)
        f = np.asarray(self.offsets, dtype=float).reshape(-1)
        v = np.asarray(self.values, dtype=float)
        if v.shape != (b.size, f.size):
            raise ValueError(f"values shape {v.shape} does not match axes ({b.size}, {f.size})")
        object.__setattr__(self, "b1_scales", b)
        object.__setattr__(self, "offsets", f)
        object.__setattr__(self, "values", v)

    def row(self, b1_scale=1.0):
        i = int(np.argmin(np.abs(self.b1_scales - b1_scale)))
        return self.values[i]

    def band_halfwidth(self, threshold=0.9, b1_scale=1.0, center=0.0):
        """Half-width of the contiguous run around ``center`` where the row stays >= threshold.

        Returns 0 when the center cell itself is below threshold; the value
        is the distance to the last passing offset on the narrower side.
        """
        v = self.row(b1_scale)
        f = self.offsets
        c = int(np.argmin(np.abs(f - center)))
        if v[c] < threshold:
            return 0.0
        hi = c
        while hi + 1 < f.size and v[hi + 1] >= threshold:
            hi += 1
        lo = c
        while lo - 1 >= 0 and v[lo - 1] >= threshold:
            lo -= 1
        return float(min(f[hi] - f[c], f[c] - f[lo]))


@dataclass(frozen=True, eq=False)
class EchoTrainResult:
    """Per-echo signals (isochromat mean at each echo center) and per-isochromat phases."""

    signals: np.ndarray
    phases: np.ndarray
    isochromat_signals: np.ndarray
    offsets: np.ndarray
    echo_times: np.ndarray
    labels: tuple
    phase_cycled: bool = False

    @property
    def labels_by_echo(self):
        return dict(zip(range(1, len(self.labels) + 1), self.labels))


def wurst_envelope(t, duration, order, peak_b1):
    """``peak_b1 * (1 - |cos(pi t / T)|**order)``."""
    t = np.asarray(t, dtype=float)
    return peak_b1 * (1.0 - np.abs(np.cos(np.pi * t / duration)) ** order)


def wurst_phase(t, duration, sweep_bw):
    """Quadratic phase whose derivative sweeps linearly from -bw/2 to +bw/2 (Hz) over the pulse."""
    t = np.asarray(t, dtype=float)
    return 2 * np.pi * (-0.5 * sweep_bw * t + sweep_bw * t**2 / (2 * duration))


def adiabatic_peak_b1(duration, sweep_bw, q, constants=DEFAULT_CONSTANTS):
    """Peak B1 giving adiabaticity factor ``q = w1**2 / R`` for a linear sweep of rate ``R``."""
    rate = 2 * np.pi * sweep_bw / duration
    return float(np.sqrt(q * rate) / (2 * np.pi * constants.gamma))


def _n_samples(duration, dt):
    check_positive(duration, "duration")
    check_positive(dt, "dt")
    if dt > duration:
        raise TimingError(f"dt {dt} exceeds pulse duration {duration}")
    return max(1, int(round(duration / dt)))


def make_wurst(duration, sweep_bw, order=40, peak_b1=None, dt=1e-6, role="excitation",
               constants=DEFAULT_CONSTANTS) -> PulseWaveform:
    """WURST-``order`` chirp sampled at the midpoints of ``duration / dt`` steps.

    ``peak_b1=None`` picks the adiabatic-passage amplitude for ``role``
    (``"excitation"``: half inversion, a 90 degree flip; ``"refocusing"``:
    ``Q = 4``).  ``dt`` is adjusted so an integer number of samples spans
    the duration exactly.
    """
    check_positive(sweep_bw, "sweep_bw")
    if int(order) != order or order < 1:
        raise ValueError(f"order must be an integer >= 1, got {order!r}")
    n = _n_samples(duration, dt)
    if peak_b1 is None:
        q = {"excitation": Q_EXCITATION, "refocusing": Q_REFOCUS}.get(role)
        if q is None:
            raise ValueError(f"role must be 'excitation' or 'refocusing', got {role!r}")
        peak_b1 = adiabatic_peak_b1(duration, sweep_bw, q, constants)
    check_positive(peak_b1, "peak_b1", allow_zero=True)
    dt = duration / n
    t = (np.arange(n) + 0.5) * dt
    samples = wurst_envelope(t, duration, order, peak_b1) * np.exp(1j * wurst_phase(t, duration, sweep_bw))
    return PulseWaveform(samples, dt, "wurst", float(sweep_bw), int(order), f"WURST-{order}")


def make_hard(duration, flip_target, dt=1e-6, phase=0.0, constants=DEFAULT_CONSTANTS) -> PulseWaveform:
    """Constant pulse with ``2 pi gamma B1 duration = flip_target``."""
    n = _n_samples(duration, min(dt, duration))
    b1 = flip_target / (2 * np.pi * constants.gamma * duration)
    return PulseWaveform(np.full(n, b1 * np.exp(1j * phase)), duration / n, "hard", label="hard")


def make_ideal(flip, phase=0.0) -> PulseWaveform:
    """Instantaneous rotation by ``flip`` about the transverse axis at ``phase``."""
    return PulseWaveform([flip * np.exp(1j * phase)], 0.0, "ideal", label="ideal")


def _rodrigues(M, n, theta):
    """Rotate vectors ``M`` by ``-theta`` about unit axes ``n`` (the sense of M x w)."""
    c = np.cos(theta)[..., None]
    s = -np.sin(theta)[..., None]
    d = (n * M).sum(axis=-1, keepdims=True)
    return M * c + np.cross(n, M) * s + n * d * (1 - c)


def precess(M, offsets, t):
    """Free precession for time ``t`` at ``offsets`` (Hz)."""
    ang = 2 * np.pi * np.asarray(offsets, dtype=float) * t
    c, s = np.cos(ang), np.sin(ang)
    out = np.empty_like(M)
    out[..., 0] = M[..., 0] * c + M[..., 1] * s
    out[..., 1] = -M[..., 0] * s + M[..., 1] * c
    out[..., 2] = M[..., 2]
    return out


def rotate(M, pulse: PulseWaveform, offsets=0.0, b1_scale=1.0, constants=DEFAULT_CONSTANTS):
    """Propagate an array of magnetizations ``(..., 3)`` through ``pulse``.

    ``offsets`` and ``b1_scale`` broadcast against ``M.shape[:-1]``.
    """
    M = np.array(M, dtype=float)
    shape = M.shape[:-1]
    scale = np.broadcast_to(np.asarray(b1_scale, dtype=float), shape)
    if pulse.kind == "ideal":
        a = pulse.samples[0]
        theta = np.abs(a) * scale
        n = np.broadcast_to(np.array([np.cos(np.angle(a)), np.sin(np.angle(a)), 0.0]), shape + (3,))
        return _rodrigues(M, n, theta)
    wz = np.broadcast_to(2 * np.pi * np.asarray(offsets, dtype=float), shape)
    k = 2 * np.pi * constants.gamma
    dt = pulse.dt
    for b in pulse.samples:
        wx = (k * b.real) * scale
        wy = (k * b.imag) * scale
        w = np.sqrt(wx * wx + wy * wy + wz * wz)
        safe = np.where(w > 0, w, 1.0)
        n = np.stack([wx / safe, wy / safe, np.where(w > 0, wz / safe, 1.0)], axis=-1)
        M = _rodrigues(M, n, w * dt)
    return M


def propagate(state: SpinState, pulse: PulseWaveform, constants=DEFAULT_CONSTANTS) -> SpinState:
    """Exact piecewise-constant rotation of one isochromat through ``pulse``."""
    M = rotate(state.magnetization, pulse, state.off_resonance, state.b1_scale, constants)
    n = np.linalg.norm(M)
    if n > 1:
        M = M / n
    return SpinState(M, state.off_resonance, state.b1_scale)


def _grid_axes(b1_scales, offsets):
    b = np.atleast_1d(np.asarray(b1_scales, dtype=float))
    f = np.atleast_1d(np.asarray(offsets, dtype=float))
    if b.size == 0 or f.size == 0:
        raise ValueError("profile grids must be nonempty")
    return b, f


def excitation_profile(pulse, b1_scales=(1.0,), offsets=(0.0,), constants=DEFAULT_CONSTANTS) -> ProfileGrid:
    """``|Mxy|`` after the pulse, starting from equilibrium, per (B1 scale, offset)."""
    b, f = _grid_axes(b1_scales, offsets)
    B, F = np.meshgrid(b, f, indexing="ij")
    M = np.zeros(B.shape + (3,))
    M[..., 2] = 1.0
    M = rotate(M, pulse, F, B, constants)
    return ProfileGrid(b, f, np.hypot(M[..., 0], M[..., 1]), "mxy")


def refocusing_profile(pulse, b1_scales=(1.0,), offsets=(0.0,), n_dephase=8,
                       constants=DEFAULT_CONSTANTS) -> ProfileGrid:
    """Spin-echo refocusing efficiency per (B1 scale, offset).

    An ideal 90 places the spins on +y; during the first delay each
    sub-isochromat acquires a dephasing angle psi from ``n_dephase``
    uniformly spaced values, the pulse acts, and the second delay adds psi
    again.  The efficiency is ``|mean M+|`` at the echo.  Pathways not
    refocused by the pulse carry ``exp(+-i psi)`` or ``exp(-2 i psi)`` and
    cancel in the mean, so the delays need not be simulated explicitly;
    the result equals the echo of a 90 - tau - pulse - tau experiment with
    any tau long enough to separate the pulse from the echo.
    """
    if n_dephase < 3:
        raise ValueError("n_dephase must be >= 3 to cancel unrefocused pathways")
    b, f = _grid_axes(b1_scales, offsets)
    psi = 2 * np.pi * np.arange(n_dephase) / n_dephase
    B, F, P = np.meshgrid(b, f, psi, indexing="ij")
    M = np.zeros(B.shape + (3,))
    M[..., 1] = 1.0
    dephase = P / (2 * np.pi)  # precess() multiplies by 2 pi
    M = precess(M, dephase, 1.0)
    M = rotate(M, pulse, F, B, constants)
    M = precess(M, dephase, 1.0)
    echo = (M[..., 0] + 1j * M[..., 1]).mean(axis=-1)
    return ProfileGrid(b, f, np.abs(echo), "refocusing_efficiency")


def _train_once(exc, ref, n_echoes, esp, offsets, exc_phase, ref_phase, b1_scale, constants):
    M = np.zeros((offsets.size, 3))
    M[:, 2] = 1.0
    M = rotate(M, exc.phased(exc_phase), offsets, b1_scale, constants)
    ref = ref.phased(ref_phase)
    t = exc.duration / 2
    out = np.empty((n_echoes, offsets.size), dtype=complex)
    for k in range(n_echoes):
        start = esp / 2 + k * esp - ref.duration / 2
        M = precess(M, offsets, start - t)
        M = rotate(M, ref, offsets, b1_scale, constants)
        t = start + ref.duration
        Me = precess(M, offsets, (k + 1) * esp - t)
        out[k] = Me[:, 0] + 1j * Me[:, 1]
    return out


def simulate_echo_train(exc: PulseWaveform, ref: PulseWaveform, n_echoes, echo_spacing, offsets,
                        phase_cycle=False, exc_phase=0.0, ref_phase=np.pi / 2, b1_scale=1.0,
                        constants=DEFAULT_CONSTANTS) -> EchoTrainResult:
    """CPMG-style train: excitation centered at t = 0, refocusing centered at ESP/2 + k ESP.

    Echo ``k`` (1-based) is sampled at ``k * ESP``.  Odd echoes are labeled
    "FID" (classic spin echoes), even echoes "spectral".  A refocusing
    pulse conjugates the transverse phase, so FID echoes carry the
    excitation phase as ``exp(-i phi)`` and spectral echoes as
    ``exp(+i phi)``.  With ``phase_cycle`` the train is run at excitation
    phases 0 and 90 degrees and combined per echo as
    ``(s0 + i s90) / 2`` (FID) or ``(s0 - i s90) / 2`` (spectral), which
    cancels the opposite-phase pathway exactly.
    """
    if int(n_echoes) != n_echoes or n_echoes < 1:
        raise ValueError("n_echoes must be an integer >= 1")
    n_echoes = int(n_echoes)
    check_positive(echo_spacing, "echo_spacing")
    if exc.duration / 2 + ref.duration / 2 > echo_spacing / 2 + 1e-15:
        raise TimingError(
            f"excitation ({exc.duration:g} s) and refocusing ({ref.duration:g} s) overlap at echo spacing "
            f"{echo_spacing:g} s; need exc/2 + ref/2 <= ESP/2"
        )
    if ref.duration > echo_spacing / 2 + 1e-15 and n_echoes > 1:
        raise TimingError(f"refocusing pulse ({ref.duration:g} s) overlaps its echo at spacing {echo_spacing:g} s")
    offsets = np.atleast_1d(np.asarray(offsets, dtype=float))
    if offsets.size == 0:
        raise ValueError("at least one isochromat is required")
    s0 = _train_once(exc, ref, n_echoes, echo_spacing, offsets, exc_phase, ref_phase, b1_scale, constants)
    if phase_cycle:
        s90 = _train_once(exc, ref, n_echoes, echo_spacing, offsets, exc_phase + np.pi / 2, ref_phase,
                          b1_scale, constants)
        sign = np.where(np.arange(1, n_echoes + 1) % 2 == 1, 1.0, -1.0)[:, None]
        iso = 0.5 * (s0 + sign * 1j * s90)
    else:
        iso = s0
    labels = tuple("FID" if k % 2 == 1 else "spectral" for k in range(1, n_echoes + 1))
    return EchoTrainResult(
        signals=iso.mean(axis=1),
        phases=np.angle(iso),
        isochromat_signals=iso,
        offsets=offsets,
        echo_times=echo_spacing * np.arange(1, n_echoes + 1),
        labels=labels,
        phase_cycled=bool(phase_cycle),
    )


def phase_linearity_rms(offsets, phases):
    """RMS deviation (rad) of unwrapped phase from its least-squares line."""
    f = np.asarray(offsets, dtype=float)
    ph = np.unwrap(np.asarray(phases, dtype=float))
    A = np.column_stack([np.ones_like(f), f])
    coef = np.linalg.lstsq(A, ph, rcond=None)[0]
    return float(np.sqrt(np.mean((ph - A @ coef) ** 2)))


def write_pulse_csv(path, pulse: PulseWaveform):
    """Columns t (sample midpoint, s), real and imaginary B1 (T)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "b1_real", "b1_imag"])
        for t, b in zip(pulse.times, pulse.samples):
            w.writerow([repr(float(t)), repr(float(b.real)), repr(float(b.imag))])
    return path


def read_pulse_csv(path, kind="custom") -> PulseWaveform:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or [c.strip() for c in rows[0]] != ["t", "b1_real", "b1_imag"]:
        raise ValueError(f"{path}: expected header t,b1_real,b1_imag")
    data = np.array([[float(v) for v in r] for r in rows[1:] if r], dtype=float)
    if data.shape[0] == 0:
        raise ValueError(f"{path}: no samples")
    t = data[:, 0]
    dt = float(np.median(np.diff(t))) if len(t) > 1 else 2 * t[0]
    if len(t) > 1 and not np.allclose(np.diff(t), dt, rtol=1e-6, atol=0):
        raise ValueError(f"{path}: samples must be uniformly spaced")
    return PulseWaveform(data[:, 1] + 1j * data[:, 2], dt, kind)


def write_profile(path, profile: ProfileGrid):
    """FMAP-style raster: x = offset, y = B1 scale, with the axis values in the header."""
    from .fieldmap import FieldMap, Grid3
    from .io import write_fmap

    f, b = profile.offsets, profile.b1_scales
    dx = float(f[1] - f[0]) if f.size > 1 else 1.0
    dy = float(b[1] - b[0]) if b.size > 1 else 1.0
    grid = Grid3(f.size, b.size, 1, abs(dx) or 1.0, abs(dy) or 1.0, 1.0, (float(f[0]), float(b[0]), 0.0))
    fmap = FieldMap(grid, profile.values.T.reshape(-1, order="F"), profile.quantity, "1")
    extra = {"axis_x": "offset_hz", "axis_y": "b1_scale", "offsets": f.tolist(), "b1_scales": b.tolist()}
    return write_fmap(path, fmap, extra)
