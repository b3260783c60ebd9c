"""Sparse Halbach magnet design by genetic search, plus target-field shimming.

Every cube slot is modeled as a point dipole at the cube center with moment
``Br * V / mu0`` pointing along the Halbach rule (angle ``k * theta`` for a
slot at azimuth ``theta``; ``k = 2`` rotates the magnetization 4 pi around the
cylinder).  Because field is linear in remanence, fitness evaluation reduces
to one matrix product per population.
"""

import json
from dataclasses import dataclass, field, asdict
from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import axis_index, check_points
from .constants import CUBE_SIDE_1IN, DEFAULT_CONSTANTS, REMANENCE
from .fieldmap import FieldMap, Grid3, LinearFit, Sphere, dipole_field_matrix, warn_if_near

__all__ = [
    "ALLELES",
    "HalbachLayer",
    "BoosterRing",
    "HalbachGeometry",
    "Chromosome",
    "FitnessTargets",
    "FitnessReport",
    "GAParams",
    "RoiSampler",
    "evaluate_fitness",
    "run_ga",
    "HalbachGA",
    "ShimLayout",
    "solve_shims",
    "ShimOptimizer",
    "shim_field",
    "design_field",
    "prototype_population",
]

ALLELES = ("Empty", "N42", "N52")


@dataclass(frozen=True)
class HalbachLayer:
    radius: float
    n_rungs: int
    n_slots: int
    pitch: float = CUBE_SIDE_1IN
    z_center: float = 0.0


@dataclass(frozen=True)
class BoosterRing:
    radius: float
    n_slots: int
    z: float


@dataclass(frozen=True)
class HalbachGeometry:
    layers: tuple
    cube_side: float = CUBE_SIDE_1IN
    booster: Optional[BoosterRing] = None
    k: int = 2

    def __post_init__(self):
        layers = tuple(l if isinstance(l, HalbachLayer) else HalbachLayer(**l) for l in self.layers)
        object.__setattr__(self, "layers", layers)
        if isinstance(self.booster, dict):
            object.__setattr__(self, "booster", BoosterRing(**self.booster))

    @property
    def n_slots(self):
        n = sum(l.n_rungs * l.n_slots for l in self.layers)
        return n + (self.booster.n_slots if self.booster else 0)

    def slots(self):
        """Slot centers (n, 3) and unit magnetization directions (n, 3)."""
        pos, th = [], []
        for layer in self.layers:
            for r in range(layer.n_rungs):
                theta = 2 * np.pi * r / layer.n_rungs
                for j in range(layer.n_slots):
                    z = layer.z_center + (j - (layer.n_slots - 1) / 2) * layer.pitch
                    pos.append((layer.radius * np.cos(theta), layer.radius * np.sin(theta), z))
                    th.append(theta)
        if self.booster:
            b = self.booster
            for r in range(b.n_slots):
                theta = 2 * np.pi * r / b.n_slots
                pos.append((b.radius * np.cos(theta), b.radius * np.sin(theta), b.z))
                th.append(theta)
        th = np.asarray(th)
        dirs = np.column_stack([np.cos(self.k * th), np.sin(self.k * th), np.zeros_like(th)])
        return np.asarray(pos, dtype=float).reshape(-1, 3), dirs

    def to_dict(self):
        return {
            "layers": [asdict(l) for l in self.layers],
            "cube_side": self.cube_side,
            "booster": asdict(self.booster) if self.booster else None,
            "k": self.k,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            layers=tuple(HalbachLayer(**l) for l in d["layers"]),
            cube_side=d.get("cube_side", CUBE_SIDE_1IN),
            booster=BoosterRing(**d["booster"]) if d.get("booster") else None,
            k=d.get("k", 2),
        )

    @classmethod
    def prototype(cls):
        """Two 24-rung layers (diameters 41 and 50 cm, 18 cubes per rung) and a 32 cm booster ring.

        Isocenter is the origin; rungs span 17.8 cm toward the shoulders and
        27.9 cm superior, the booster sits in the first cube row at the
        shoulder end.  888 slots in total.
        """
        zc = (0.279 - 0.178) / 2
        layers = (
            HalbachLayer(0.205, 24, 18, CUBE_SIDE_1IN, zc),
            HalbachLayer(0.25, 24, 18, CUBE_SIDE_1IN, zc),
        )
        return cls(layers, CUBE_SIDE_1IN, BoosterRing(0.16, 24, -0.178 + CUBE_SIDE_1IN / 2))

    @classmethod
    def desk(cls):
        """2 layers x 12 rungs x 8 slots, small enough for interactive runs."""
        layers = (HalbachLayer(0.10, 12, 8), HalbachLayer(0.125, 12, 8))
        return cls(layers)


@dataclass(frozen=True, eq=False)
class Chromosome:
    alleles: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.alleles, dtype=np.int8).reshape(-1)
        if a.size and (a.min() < 0 or a.max() >= len(ALLELES)):
            raise ValueError("alleles must be 0 (Empty), 1 (N42) or 2 (N52)")
        a.setflags(write=False)
        object.__setattr__(self, "alleles", a)

    def __len__(self):
        return self.alleles.size

    def counts(self):
        return {name: int((self.alleles == i).sum()) for i, name in enumerate(ALLELES)}

    def to_dict(self):
        return {str(i): ALLELES[a] for i, a in enumerate(self.alleles)}

    @classmethod
    def from_dict(cls, d):
        idx = {name: i for i, name in enumerate(ALLELES)}
        n = len(d)
        return cls([idx[d[str(i)]] for i in range(n)])


@dataclass(frozen=True)
class FitnessTargets:
    b0_min: float = 0.07
    range_cap: float = 0.008
    lambda_mono: float = 1e3
    lambda_range: float = 10.0
    mono_tol: float = 1e-9
    readout_axis: str = "x"
    component: str = "x"

    def scaled(self, c):
        """Targets for remanences multiplied by ``c`` (keeps the argmax)."""
        return FitnessTargets(self.b0_min * c, self.range_cap * c, self.lambda_mono, self.lambda_range,
                              self.mono_tol * c, self.readout_axis, self.component)


@dataclass(frozen=True)
class FitnessReport:
    mean_b0: float
    monotonic: bool
    field_range: float
    violation: float
    score: float
    feasible: bool


@dataclass(frozen=True)
class GAParams:
    population: int = 40
    generations: int = 200
    tournament: int = 3
    crossover: float = 0.5
    mutation: Optional[float] = None
    elitism: int = 1
    seed: int = 0


class RoiSampler:
    """Regular sample grid inside a sphere, organized into readout-axis lines.

    The sample grid is centered on the sphere center so every line along the
    readout axis is a contiguous run of inside samples.
    """

    def __init__(self, roi: Sphere, spacing=0.01, readout_axis="x"):
        self.roi = roi
        self.spacing = float(spacing)
        self.axis = axis_index(readout_axis)
        n = int(np.floor(roi.radius / spacing + 1e-9))
        offs = np.arange(-n, n + 1) * spacing
        c = np.asarray(roi.center)
        X, Y, Z = np.meshgrid(offs + c[0], offs + c[1], offs + c[2], indexing="ij")
        cube = np.stack([X, Y, Z], axis=-1)
        inside = roi.contains(cube.reshape(-1, 3)).reshape(X.shape)
        self.inside = inside
        self.points = cube[inside]
        # neighbor pairs (a, b) with b one step further along the readout axis
        index = np.full(X.shape, -1)
        index[inside] = np.arange(inside.sum())
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[self.axis] = slice(0, -1)
        hi[self.axis] = slice(1, None)
        a, b = index[tuple(lo)], index[tuple(hi)]
        ok = (a >= 0) & (b >= 0)
        self.pairs = (a[ok], b[ok])

    @property
    def n_points(self):
        return len(self.points)


def _remanence_vector(remanence):
    return np.array([0.0, remanence["N42"], remanence["N52"]])


class _FieldBasis:
    """Selected field component at ROI samples per tesla of slot remanence."""

    def __init__(self, geom, sampler, component, constants=DEFAULT_CONSTANTS):
        pos, dirs = geom.slots()
        if len(pos):
            d = np.linalg.norm(sampler.points[:, None, :] - pos[None, :, :], axis=-1)
            warn_if_near(float(d.min()), geom.cube_side)
            M = dipole_field_matrix(pos, sampler.points, component, constants)
            vol = geom.cube_side**3
            self.basis = np.einsum("psk,sk->sp", M, dirs) * (vol / constants.mu0)
        else:
            self.basis = np.zeros((0, sampler.n_points))


def _score_fields(F, sampler, t: FitnessTargets):
    """Vectorized fitness for fields F of shape (n_pop, n_points)."""
    mean = F.mean(axis=1)
    frange = F.max(axis=1) - F.min(axis=1)
    a, b = sampler.pairs
    inc = F[:, b] - F[:, a]
    viol = np.clip(-inc, 0, None).sum(axis=1)
    mono = (inc >= t.mono_tol).all(axis=1) & (inc.shape[1] > 0)
    score = mean - t.lambda_mono * viol - t.lambda_range * np.clip(frange - t.range_cap, 0, None)
    return mean, mono, frange, viol, score


def _report(i, scored, t):
    mean, mono, frange, viol, score = (s[i] for s in scored)
    feasible = bool(mono and mean >= t.b0_min and frange <= t.range_cap)
    return FitnessReport(float(mean), bool(mono), float(frange), float(viol), float(score), feasible)


def evaluate_fitness(chrom: Chromosome, geom: HalbachGeometry, roi: Sphere, targets=FitnessTargets(),
                     spacing=0.01, remanence=REMANENCE, constants=DEFAULT_CONSTANTS) -> FitnessReport:
    """Mean B0, readout-axis monotonicity and field range of one design."""
    if len(chrom) != geom.n_slots:
        raise ValueError(f"chromosome has {len(chrom)} alleles, geometry has {geom.n_slots} slots")
    sampler = RoiSampler(roi, spacing, targets.readout_axis)
    basis = _FieldBasis(geom, sampler, targets.component, constants).basis
    F = (_remanence_vector(remanence)[chrom.alleles] @ basis)[None, :]
    return _report(0, _score_fields(F, sampler, targets), targets)


def run_ga(geom: HalbachGeometry, roi: Sphere, targets=FitnessTargets(), params=GAParams(),
           spacing=0.01, remanence=REMANENCE, constants=DEFAULT_CONSTANTS, initial=None):
    """Genetic search over slot alleles.

    Tournament selection, uniform crossover, per-allele mutation and
    elitism.  Returns ``(best_chromosome, report, history)`` where history
    rows are ``(generation, best_score, mean_score)`` and the best is the
    best ever seen.  Deterministic for a fixed ``params.seed``.
    """
    if params.population < 2:
        raise ValueError("population must be >= 2")
    if params.generations < 1:
        raise ValueError("generations must be >= 1")
    S = geom.n_slots
    rng = np.random.default_rng(params.seed)
    sampler = RoiSampler(roi, spacing, targets.readout_axis)
    basis = _FieldBasis(geom, sampler, targets.component, constants).basis
    br = _remanence_vector(remanence)
    pmut = params.mutation if params.mutation is not None else 1.0 / max(S, 1)
    n_elite = min(max(params.elitism, 0), params.population)

    pop = rng.integers(0, len(ALLELES), size=(params.population, S), dtype=np.int8)
    if initial is not None:
        init = np.asarray(initial, dtype=np.int8).reshape(-1, S)[: params.population]
        pop[: len(init)] = init

    best_score, best, best_i_scored = -np.inf, None, None
    history = []
    for gen in range(params.generations):
        scored = _score_fields(br[pop] @ basis, sampler, targets)
        score = scored[-1]
        i = int(np.argmax(score))
        if score[i] > best_score:
            best_score, best = float(score[i]), pop[i].copy()
            best_i_scored = tuple(np.atleast_1d(s[i]) for s in scored)
        history.append((gen, best_score, float(score.mean())))
        if gen == params.generations - 1:
            break
        order = np.argsort(-score, kind="stable")
        nxt = [pop[j].copy() for j in order[:n_elite]]
        if n_elite and best_score > score[order[0]]:
            nxt[0] = best.copy()
        while len(nxt) < params.population:
            parents = []
            for _ in range(2):
                cand = rng.integers(0, params.population, size=params.tournament)
                parents.append(pop[cand[np.argmax(score[cand])]])
            mask = rng.random(S) < params.crossover
            child = np.where(mask, parents[0], parents[1])
            mut = rng.random(S) < pmut
            if mut.any():
                child[mut] = rng.integers(0, len(ALLELES), size=int(mut.sum()), dtype=np.int8)
            nxt.append(child)
        pop = np.asarray(nxt, dtype=np.int8)

    report = _report(0, best_i_scored, targets)
    return Chromosome(best), report, history


class HalbachGA(BaseEstimator):
    """Estimator front-end to :func:`run_ga`.

    ``fit()`` needs no data; learned attributes are ``best_chromosome_``,
    ``report_`` and ``history_``.
    """

    def __init__(self, geometry=None, roi=None, targets=None, population=40, generations=200,
                 tournament=3, crossover=0.5, mutation=None, elitism=1, seed=0, spacing=0.01,
                 remanence=None):
        self.geometry = geometry
        self.roi = roi
        self.targets = targets
        self.population = population
        self.generations = generations
        self.tournament = tournament
        self.crossover = crossover
        self.mutation = mutation
        self.elitism = elitism
        self.seed = seed
        self.spacing = spacing
        self.remanence = remanence

    def _resolved(self):
        geom = self.geometry or HalbachGeometry.desk()
        roi = self.roi or Sphere((0, 0, 0), 0.04)
        targets = self.targets or FitnessTargets()
        return geom, roi, targets, self.remanence or REMANENCE

    def fit(self, X=None, y=None):
        geom, roi, targets, rem = self._resolved()
        params = GAParams(self.population, self.generations, self.tournament, self.crossover,
                          self.mutation, self.elitism, self.seed)
        self.best_chromosome_, self.report_, self.history_ = run_ga(geom, roi, targets, params, self.spacing, rem)
        return self

    def score(self, X=None, y=None):
        check_is_fitted(self)
        return self.report_.score

    def field_map(self, grid: Grid3, component=None):
        """Field of the best design on an arbitrary grid."""
        check_is_fitted(self)
        geom, _, targets, rem = self._resolved()
        return design_field(geom, self.best_chromosome_, grid, component or targets.component, rem)


def design_field(geom, chrom, grid, component="x", remanence=REMANENCE, constants=DEFAULT_CONSTANTS,
                 chunk=4096):
    """Synthesize one field component of a populated geometry on ``grid``."""
    pos, dirs = geom.slots()
    br = _remanence_vector(remanence)[chrom.alleles]
    keep = br > 0
    moments = dirs[keep] * (br[keep] * geom.cube_side**3 / constants.mu0)[:, None]
    pts = grid.points()
    out = np.zeros(len(pts))
    for s in range(0, len(pts), chunk):
        M = dipole_field_matrix(pos[keep], pts[s : s + chunk], component, constants)
        out[s : s + chunk] = np.einsum("psk,sk->p", M, moments)
    return FieldMap(grid, out, f"B{'xyz'[axis_index(component)]}")


@dataclass(frozen=True, eq=False)
class ShimLayout:
    sites: np.ndarray
    moments: np.ndarray
    bounds: np.ndarray
    rmse_before: float = float("nan")
    rmse_after: float = float("nan")
    iterations: int = 0

    def __post_init__(self):
        object.__setattr__(self, "sites", check_points(self.sites, "sites"))
        object.__setattr__(self, "moments", np.asarray(self.moments, dtype=float).reshape(-1, 3))
        object.__setattr__(self, "bounds", np.asarray(self.bounds, dtype=float).reshape(-1))
        norms = np.linalg.norm(self.moments, axis=1)
        if np.any(norms > self.bounds * (1 + 1e-9) + 1e-15):
            raise ValueError("shim moment exceeds its bound")

    def to_dict(self):
        return {
            "sites": self.sites.tolist(),
            "moments": self.moments.tolist(),
            "bounds": self.bounds.tolist(),
            "rmse_before": self.rmse_before,
            "rmse_after": self.rmse_after,
        }


def _project_balls(x, bounds):
    v = x.reshape(-1, 3)
    n = np.linalg.norm(v, axis=1)
    scale = np.where(n > bounds, bounds / np.where(n > 0, n, 1.0), 1.0)
    return (v * scale[:, None]).reshape(-1)


def solve_shims(base: FieldMap, sites, bounds, target: LinearFit, roi: Optional[Sphere] = None,
                component="x", tol=1e-8, max_iter=20000, constants=DEFAULT_CONSTANTS) -> ShimLayout:
    """Dipole moments minimizing RMS of ``base + shim - target`` inside ``roi``.

    Each site's moment is confined to a ball of radius ``bounds[i]``.  The
    problem is convex; it is solved by monotone accelerated projected
    gradient in a per-site rescaled variable, stopping when the relative
    objective change drops below ``tol``.  The zero layout is the starting
    point, so the result is never worse than no shimming.
    """
    sites = check_points(sites, "sites")
    if len(sites) == 0:
        raise ValueError("at least one shim site is required")
    bounds = np.broadcast_to(np.asarray(bounds, dtype=float), (len(sites),)).copy()
    if np.any(bounds < 0):
        raise ValueError("bounds must be >= 0")
    if not np.any(target.g != 0):
        raise ValueError("target gradient must be nonzero")

    pts = base.grid.points()
    mask = base.valid & (roi.contains(pts) if roi is not None else True)
    P = pts[mask]
    resid0 = base.values[mask] - target.evaluate(P)
    rmse0 = float(np.sqrt(np.mean(resid0**2)))
    zeros = np.zeros((len(sites), 3))
    if not np.any(bounds > 0) or rmse0 == 0:
        return ShimLayout(sites, zeros, bounds, rmse0, rmse0, 0)

    A = dipole_field_matrix(sites, P, component, constants).reshape(len(P), -1)
    # per-site isotropic scaling keeps the ball constraints balls
    s = np.linalg.norm(A.reshape(len(P), -1, 3), axis=(0, 2))
    s[s == 0] = 1.0
    col = np.repeat(1.0 / s, 3)
    As = A * col
    sb = bounds * s
    L = np.linalg.norm(As, 2) ** 2
    n = len(P)

    def f(u):
        r = resid0 + As @ u
        return 0.5 * r @ r

    x = np.zeros(As.shape[1])
    y = x.copy()
    tk = 1.0
    fx = f(x)
    f0 = fx
    it = 0
    for it in range(1, max_iter + 1):
        grad = As.T @ (resid0 + As @ y)
        z = _project_balls(y - grad / L, sb)
        fz = f(z)
        t_next = 0.5 * (1 + np.sqrt(1 + 4 * tk**2))
        if fz <= fx:
            x_new, f_new = z, fz
        else:
            x_new, f_new = x, fx
        y = x_new + (tk / t_next) * (z - x_new) + ((tk - 1) / t_next) * (x_new - x)
        change = (fx - f_new) / max(fx, 1e-300)
        x, tk = x_new, t_next
        prev, fx = fx, f_new
        if f_new <= 1e-24 * f0:
            break
        if it > 10 and 0 <= change < tol and fz <= prev:
            break
    m = (x * col).reshape(-1, 3)
    m = _project_balls(m.reshape(-1), bounds).reshape(-1, 3)
    rmse1 = float(np.sqrt(np.mean((resid0 + A @ m.reshape(-1)) ** 2)))
    if rmse1 > rmse0:
        m, rmse1 = zeros, rmse0
    assert rmse1 <= rmse0
    return ShimLayout(sites, m, bounds, rmse0, rmse1, it)


def shim_field(layout: ShimLayout, grid: Grid3, component="x", constants=DEFAULT_CONSTANTS):
    """Field of a shim layout on ``grid`` as a FieldMap."""
    pts = grid.points()
    M = dipole_field_matrix(layout.sites, pts, component, constants)
    return FieldMap(grid, np.einsum("psk,sk->p", M, layout.moments), "shim")


class ShimOptimizer(BaseEstimator):
    """Target-field shimming as an estimator: ``fit(base_map)`` then ``transform(map)``."""

    def __init__(self, sites=None, bounds=1.0, target=None, roi=None, component="x", tol=1e-8,
                 max_iter=20000):
        self.sites = sites
        self.bounds = bounds
        self.target = target
        self.roi = roi
        self.component = component
        self.tol = tol
        self.max_iter = max_iter

    def fit(self, X, y=None):
        from .fieldmap import linear_fit

        if self.sites is None:
            raise ValueError("ShimOptimizer requires sites")
        target = self.target if self.target is not None else linear_fit(X, self.roi)
        self.target_ = target
        self.layout_ = solve_shims(X, self.sites, self.bounds, target, self.roi, self.component,
                                   self.tol, self.max_iter)
        self.rmse_before_ = self.layout_.rmse_before
        self.rmse_after_ = self.layout_.rmse_after
        return self

    def transform(self, X):
        check_is_fitted(self)
        shim = shim_field(self.layout_, X.grid, self.component)
        return X.with_values(X.values + shim.values, label=f"{X.label} shimmed")


def prototype_population(geom=None, n42=342, n52=299, seed=0):
    """Seeded placement with the prototype's cube counts (the real layout is not published)."""
    geom = geom or HalbachGeometry.prototype()
    rng = np.random.default_rng(seed)
    idx = rng.permutation(geom.n_slots)
    alleles = np.zeros(geom.n_slots, dtype=np.int8)
    alleles[idx[:n42]] = 1
    alleles[idx[n42 : n42 + n52]] = 2
    return Chromosome(alleles)
