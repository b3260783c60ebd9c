import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from sklearn.base import clone

from helpers import perturbed_shim_fixture
from lowfield.constants import REMANENCE
from lowfield.fieldmap import Dipole, FieldMap, Grid3, LinearFit, Sphere, dipole_field_matrix, synthesize_field
from lowfield.magnet_opt import (
    BoosterRing,
    Chromosome,
    FitnessTargets,
    GAParams,
    HalbachGA,
    HalbachGeometry,
    HalbachLayer,
    RoiSampler,
    ShimLayout,
    ShimOptimizer,
    design_field,
    evaluate_fitness,
    prototype_population,
    run_ga,
    shim_field,
    solve_shims,
)

DESK = HalbachGeometry.desk()
DESK_ROI = Sphere((0, 0, 0), 0.04)


def quiet(fn, *a, **k):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return fn(*a, **k)


# --- geometry and chromosomes -----------------------------------------------

def test_slot_counts():
    assert DESK.n_slots == 2 * 12 * 8
    proto = HalbachGeometry.prototype()
    assert proto.n_slots == 2 * 24 * 18 + 24
    pos, dirs = proto.slots()
    assert pos.shape == (proto.n_slots, 3)
    np.testing.assert_allclose(np.linalg.norm(dirs, axis=1), 1.0)


def test_slots_deterministic_and_halbach_rule():
    pos1, d1 = DESK.slots()
    pos2, d2 = DESK.slots()
    np.testing.assert_array_equal(pos1, pos2)
    theta = np.arctan2(pos1[:, 1], pos1[:, 0])
    np.testing.assert_allclose(np.exp(2j * theta), d1[:, 0] + 1j * d1[:, 1], atol=1e-12)


def test_geometry_dict_roundtrip():
    g = HalbachGeometry((HalbachLayer(0.1, 6, 2),), booster=BoosterRing(0.08, 6, -0.05))
    assert HalbachGeometry.from_dict(g.to_dict()) == g


def test_chromosome_roundtrip_and_validation():
    c = Chromosome([0, 1, 2, 2])
    assert c.counts() == {"Empty": 1, "N42": 1, "N52": 2}
    assert Chromosome.from_dict(c.to_dict()).alleles.tolist() == [0, 1, 2, 2]
    with pytest.raises(ValueError):
        Chromosome([0, 3])
    with pytest.raises(ValueError):
        evaluate_fitness(Chromosome([1, 1]), DESK, DESK_ROI)


# --- fitness ----------------------------------------------------------------

def test_all_empty():
    rep = evaluate_fitness(Chromosome(np.zeros(DESK.n_slots)), DESK, DESK_ROI)
    assert rep.mean_b0 == 0.0
    assert rep.monotonic is False
    assert rep.feasible is False


def test_prototype_population_mean_b0():
    rep = quiet(evaluate_fitness, prototype_population(), HalbachGeometry.prototype(), Sphere((0, 0, 0), 0.1),
                spacing=0.02)
    assert 0.070 <= rep.mean_b0 <= 0.090


def test_doubling_remanence_doubles_mean():
    rng = np.random.default_rng(0)
    c = Chromosome(rng.integers(0, 3, DESK.n_slots))
    a = evaluate_fitness(c, DESK, DESK_ROI)
    b = evaluate_fitness(c, DESK, DESK_ROI, remanence={k: 2 * v for k, v in REMANENCE.items()})
    assert b.mean_b0 == pytest.approx(2 * a.mean_b0, rel=1e-12)


def test_near_field_warning():
    geom = HalbachGeometry((HalbachLayer(0.05, 4, 1),))
    with pytest.warns(RuntimeWarning, match="dipole model"):
        evaluate_fitness(Chromosome(np.ones(4)), geom, Sphere((0, 0, 0), 0.04))


def _line_scan_monotonic(field, sampler, tol=1e-9):
    """Exhaustive oracle: rebuild each readout line from coordinates and scan it."""
    pts = sampler.points
    a = sampler.axis
    other = [i for i in range(3) if i != a]
    keys = np.round(pts[:, other] / sampler.spacing).astype(int)
    found_step = False
    for key in np.unique(keys, axis=0):
        on = np.all(keys == key, axis=1)
        order = np.argsort(pts[on, a])
        f = field[on][order]
        if f.size > 1:
            found_step = True
            if np.any(np.diff(f) < tol):
                return False
    return found_step


def test_monotonic_predicate_matches_line_scan():
    rng = np.random.default_rng(5)
    best, _, _ = run_ga(DESK, DESK_ROI, params=GAParams(population=20, generations=60, seed=1))
    chroms = [best] + [Chromosome(rng.integers(0, 3, DESK.n_slots)) for _ in range(10)]
    sampler = RoiSampler(DESK_ROI, 0.01, "x")
    grid_pts = sampler.points
    seen = set()
    for c in chroms:
        rep = evaluate_fitness(c, DESK, DESK_ROI)
        pos, dirs = DESK.slots()
        br = np.array([0.0, REMANENCE["N42"], REMANENCE["N52"]])[c.alleles]
        mom = dirs * (br * DESK.cube_side**3 / (4e-7 * np.pi))[:, None]
        field = np.einsum("psk,sk->p", dipole_field_matrix(pos, grid_pts, "x"), mom)
        assert rep.monotonic == _line_scan_monotonic(field, sampler)
        seen.add(rep.monotonic)
    assert seen == {True, False}


# --- GA ---------------------------------------------------------------------

def test_one_slot_toy_picks_stronger_grade():
    geom = HalbachGeometry((HalbachLayer(0.2, 1, 1),))
    roi = Sphere((0, 0, 0), 1e-3)
    best, rep, _ = run_ga(geom, roi, params=GAParams(population=6, generations=5, seed=0))
    assert best.alleles.tolist() == [2]
    assert rep.mean_b0 > 0


def test_ga_deterministic():
    p = GAParams(population=16, generations=20, seed=7)
    a = run_ga(DESK, DESK_ROI, params=p)
    b = run_ga(DESK, DESK_ROI, params=p)
    np.testing.assert_array_equal(a[0].alleles, b[0].alleles)
    assert a[2] == b[2]


def test_elitism_best_non_decreasing():
    _, _, hist = run_ga(DESK, DESK_ROI, params=GAParams(population=20, generations=40, seed=3))
    best = [h[1] for h in hist]
    assert all(b2 >= b1 for b1, b2 in zip(best, best[1:]))
    assert [h[0] for h in hist] == list(range(40))


def test_ga_beats_random_baseline():
    rng = np.random.default_rng(11)
    baseline = max(evaluate_fitness(Chromosome(rng.integers(0, 3, DESK.n_slots)), DESK, DESK_ROI).score
                   for _ in range(50))
    _, rep, _ = run_ga(DESK, DESK_ROI, params=GAParams(generations=200, seed=0))
    assert rep.score >= baseline


@pytest.mark.parametrize("c", [2.0, 0.5])
def test_scaling_invariance_of_selection(c):
    p = GAParams(population=16, generations=25, seed=2)
    a, ra, _ = run_ga(DESK, DESK_ROI, FitnessTargets(), p)
    b, rb, _ = run_ga(DESK, DESK_ROI, FitnessTargets().scaled(c), p,
                      remanence={k: c * v for k, v in REMANENCE.items()})
    np.testing.assert_array_equal(a.alleles, b.alleles)
    assert rb.score == pytest.approx(c * ra.score, rel=1e-12)


def test_ga_parameter_validation():
    with pytest.raises(ValueError):
        run_ga(DESK, DESK_ROI, params=GAParams(population=1))
    with pytest.raises(ValueError):
        run_ga(DESK, DESK_ROI, params=GAParams(generations=0))


def test_ga_initial_population_is_used():
    seed = Chromosome(np.full(DESK.n_slots, 2))
    _, rep, hist = run_ga(DESK, DESK_ROI, params=GAParams(population=4, generations=1), initial=[seed.alleles])
    assert hist[0][1] >= evaluate_fitness(seed, DESK, DESK_ROI).score


def test_halbach_ga_estimator():
    est = HalbachGA(population=10, generations=5, seed=1)
    params = clone(est).get_params()
    assert params["population"] == 10 and params["seed"] == 1
    est.fit()
    assert est.score() == est.report_.score
    grid = Grid3.centered((3, 1, 3), 0.01)
    fm = est.field_map(grid)
    ref = design_field(DESK, est.best_chromosome_, grid)
    np.testing.assert_array_equal(fm.values, ref.values)


def test_design_field_matches_synthesis():
    rng = np.random.default_rng(4)
    c = Chromosome(rng.integers(0, 3, DESK.n_slots))
    grid = Grid3.centered((3, 3, 3), 0.02)
    pos, dirs = DESK.slots()
    br = np.array([0.0, 1.30, 1.45])[c.alleles]
    dips = [Dipole(p, d * b * DESK.cube_side**3 / (4e-7 * np.pi)) for p, d, b in zip(pos, dirs, br) if b > 0]
    np.testing.assert_allclose(design_field(DESK, c, grid, "y").values, synthesize_field(dips, grid, "y").values,
                               rtol=1e-10, atol=1e-15)


# --- shims ------------------------------------------------------------------

GRID = Grid3.centered((7, 7, 7), 0.01)
ROI = Sphere((0, 0, 0), 0.03)
TARGET = LinearFit(0.08, np.array([7.6e-3, 0.0, 0.0]), 0.0)


def test_shim_already_on_target():
    base = TARGET.ideal_map(GRID)
    lay = solve_shims(base, [(0.1, 0, 0)], 1.0, TARGET, ROI)
    assert lay.rmse_before == lay.rmse_after
    assert lay.rmse_before < 1e-15
    assert np.all(lay.moments == 0)


def test_shim_cancels_single_dipole():
    pert = Dipole((0.06, 0.02, -0.01), (0.3, -0.2, 0.5))
    base = TARGET.ideal_map(GRID) + synthesize_field([pert], GRID, "x")
    lay = solve_shims(base, [pert.position], 2.0, TARGET, ROI)
    assert lay.rmse_after <= 0.01 * lay.rmse_before
    np.testing.assert_allclose(lay.moments[0], -np.asarray(pert.moment), rtol=1e-3, atol=1e-4)


def test_shim_perturbed_fixture_vs_lstsq_bound():
    base, sites, target, roi = perturbed_shim_fixture()
    lay = solve_shims(base, sites, 0.5, target, roi)
    assert lay.rmse_after <= 0.5 * lay.rmse_before
    pts = base.grid.points()
    m = roi.contains(pts)
    A = dipole_field_matrix(sites, pts[m], "x").reshape(m.sum(), -1)
    r0 = base.values[m] - target.evaluate(pts[m])
    u = np.linalg.lstsq(A, -r0, rcond=None)[0]
    floor = np.sqrt(np.mean((r0 + A @ u) ** 2))
    assert lay.rmse_after >= floor * (1 - 1e-9)
    assert np.all(np.linalg.norm(lay.moments, axis=1) <= 0.5 * (1 + 1e-9))


def test_shim_unconstrained_reaches_lstsq():
    base, sites, target, roi = perturbed_shim_fixture(seed=1)
    pts = base.grid.points()
    m = roi.contains(pts)
    A = dipole_field_matrix(sites, pts[m], "x").reshape(m.sum(), -1)
    r0 = base.values[m] - target.evaluate(pts[m])
    u = np.linalg.lstsq(A, -r0, rcond=None)[0]
    floor = np.sqrt(np.mean((r0 + A @ u) ** 2))
    lay = solve_shims(base, sites, 10.0, target, roi, max_iter=40000)
    assert lay.rmse_after <= 5 * floor
    assert lay.rmse_after <= 1e-3 * lay.rmse_before


@given(seed=st.integers(0, 2**31 - 1), n_sites=st.integers(1, 6), bound=st.floats(0.0, 5.0))
def test_shim_never_worse(seed, n_sites, bound):
    rng = np.random.default_rng(seed)
    base = FieldMap(GRID, TARGET.evaluate(GRID.points()) + rng.normal(0, 1e-4, GRID.size))
    sites = rng.uniform(0.05, 0.09, (n_sites, 3)) * rng.choice([-1, 1], (n_sites, 3))
    lay = solve_shims(base, sites, bound, TARGET, ROI, max_iter=300)
    assert lay.rmse_after <= lay.rmse_before
    assert np.all(np.linalg.norm(lay.moments, axis=1) <= bound * (1 + 1e-9) + 1e-15)


def test_shim_field_reproduces_reported_rmse():
    base, sites, target, roi = perturbed_shim_fixture()
    lay = solve_shims(base, sites, 0.5, target, roi)
    shimmed = base.values + shim_field(lay, base.grid).values
    m = roi.contains(base.grid.points())
    rmse = np.sqrt(np.mean((shimmed[m] - target.evaluate(base.grid.points()[m])) ** 2))
    assert rmse == pytest.approx(lay.rmse_after, rel=1e-9)


def test_shim_validation():
    base = TARGET.ideal_map(GRID)
    with pytest.raises(ValueError):
        solve_shims(base, np.zeros((0, 3)), 1.0, TARGET)
    with pytest.raises(ValueError):
        solve_shims(base, [(0.1, 0, 0)], -1.0, TARGET)
    with pytest.raises(ValueError):
        solve_shims(base, [(0.1, 0, 0)], 1.0, LinearFit(0.08, np.zeros(3), 0.0))
    with pytest.raises(ValueError):
        ShimLayout([(0, 0, 0)], [(2.0, 0, 0)], [1.0])


def test_shim_optimizer_estimator():
    base, sites, target, roi = perturbed_shim_fixture()
    est = ShimOptimizer(sites=sites, bounds=0.5, target=target, roi=roi)
    assert clone(est).get_params()["bounds"] == 0.5
    out = est.fit(base).transform(base)
    m = roi.contains(base.grid.points())
    rmse = np.sqrt(np.mean((out.values[m] - target.evaluate(base.grid.points()[m])) ** 2))
    assert rmse == pytest.approx(est.rmse_after_, rel=1e-9)
    assert est.rmse_after_ < est.rmse_before_
    with pytest.raises(ValueError):
        ShimOptimizer().fit(base)
