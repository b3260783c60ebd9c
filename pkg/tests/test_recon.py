import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from helpers import coil_weights, condition_numbers, dense_matrix, slice_setup
from lowfield._validation import DivergenceError
from lowfield.encode import EncodingOperator, SignalData, add_noise
from lowfield.fieldmap import FieldMap, Grid3, linear_fit
from lowfield.recon import (
    FFTReconstructor,
    Image,
    ModelBasedReconstructor,
    Preconditioner,
    build_preconditioner,
    cg_solve,
    compute_snr,
    fft_recon,
    intensity_correct,
    relative_rmse,
)


def linear_instance(n=16, b0=0.08):
    prot, tab, grid, gx, gz = slice_setup(n, b0=b0)
    return prot, tab, grid, gx, gz, EncodingOperator(gx, gz, prot, tab)


def fits(gx, gz):
    return linear_fit(gx, axes=("x", "z")), linear_fit(gz, axes=("x", "z"))


# --- CG against oracles -----------------------------------------------------

def test_cg_matches_dense_least_squares():
    prot, tab, grid, gx, gz = slice_setup(16, 20, q_fraction=0.1, b0=0.08)
    op = EncodingOperator(gx, gz, prot, tab)
    A = dense_matrix(gx, gz, prot, tab, b0=op.b0)
    rng = np.random.default_rng(0)
    s = op.forward(rng.random(grid.size)) + 0.01 * (rng.normal(size=op.data_shape) + 1j * rng.normal(size=op.data_shape))
    ref = np.linalg.pinv(A) @ s.reshape(-1)
    for pc in (None, build_preconditioner(op)):
        img = cg_solve(s, op, pc, tol=1e-10, max_iter=500)
        assert relative_rmse(img, ref) <= 1e-6


@given(seed=st.integers(0, 2**31 - 1))
def test_linear_fields_cg_equals_fft(seed):
    prot, tab, grid, gx, gz, op = linear_instance()
    m = np.random.default_rng(seed).random(grid.size)
    data = SignalData(op.forward(m), prot.dwell)
    cg = cg_solve(data, op, build_preconditioner(op), tol=1e-10)
    ff = fft_recon(data, *fits(gx, gz), prot, tab, grid)
    assert relative_rmse(cg, ff.values) <= 1e-6
    assert relative_rmse(cg, m) <= 1e-6
    assert relative_rmse(ff, m) <= 1e-6


@pytest.mark.parametrize("tol", [1e-3, 1e-6, 1e-9])
def test_stops_below_tolerance(tol):
    prot, tab, grid, gx, gz = slice_setup(16, 20, q_fraction=0.1)
    op = EncodingOperator(gx, gz, prot, tab)
    m = np.random.default_rng(1).random(grid.size)
    img = cg_solve(op.forward(m), op, build_preconditioner(op), tol=tol, max_iter=500)
    assert img.provenance["relative_residual"] < tol
    assert img.provenance["residual_history"][-2] >= tol
    b = op.adjoint(op.forward(m))
    true_rel = np.linalg.norm(b - op.normal(img.values)) / np.linalg.norm(b)
    assert true_rel == pytest.approx(img.provenance["relative_residual"], rel=1e-3, abs=1e-12)


def test_constant_preconditioner_matches_plain_cg():
    prot, tab, grid, gx, gz, op = linear_instance()
    pc = build_preconditioner(op)
    assert np.ptp(pc.weights) == 0
    s = op.forward(np.random.default_rng(2).random(grid.size))
    a = cg_solve(s, op, None, tol=1e-8)
    b = cg_solve(s, op, pc, tol=1e-8)
    assert a.provenance["iterations"] == b.provenance["iterations"]
    np.testing.assert_allclose(a.provenance["residual_history"], b.provenance["residual_history"], rtol=1e-12)
    assert np.linalg.norm(a.values - b.values) <= 1e-12 * np.linalg.norm(a.values)


def test_preconditioner_is_squared_diagonal():
    prot, tab, grid, gx, gz = slice_setup(12, 14, q_fraction=0.1)
    w = coil_weights(grid)
    op = EncodingOperator(gx, gz, prot, tab, weights=w)
    pc = build_preconditioner(op)
    n = prot.n_samples * tab.nz
    np.testing.assert_allclose(pc.weights, (n * w**2) ** 2, rtol=1e-12)
    # symmetric split: the PCG inverse is the Jacobi inverse 1 / diag
    np.testing.assert_allclose(pc.inverse(), 1 / (n * w**2), rtol=1e-12)
    assert pc.n_holes == 0


def test_encoding_holes_flagged():
    prot, tab, grid, gx, gz = slice_setup(8)
    w = np.ones(grid.size)
    w[[3, 10]] = 0
    op = EncodingOperator(gx, gz, prot, tab, weights=w)
    with pytest.warns(RuntimeWarning, match="encoding-hole"):
        pc = build_preconditioner(op)
    assert pc.n_holes == 2 and pc.weights[3] == 1.0
    img = cg_solve(op.forward(np.ones(grid.size)), op, pc)
    assert img.provenance["encoding_holes"] == 2
    with pytest.raises(ValueError):
        Preconditioner(np.array([1.0, 0.0]), np.zeros(2))


def test_weighted_variant_condition_reduction():
    prot, tab, grid, gx, gz = slice_setup(24, 30, q_fraction=0.1, b0=0.08)
    w = coil_weights(grid)
    op = EncodingOperator(gx, gz, prot, tab, weights=w)
    A = dense_matrix(gx, gz, prot, tab, b0=op.b0) * w[None, :]
    np.testing.assert_allclose(np.sum(np.abs(A) ** 2, axis=0), op.diag_normal(), rtol=1e-12)
    before, after = condition_numbers(A, build_preconditioner(op))
    assert before / after >= 10


def test_weighted_variant_iterations():
    prot, tab, grid, gx, gz = slice_setup(48, 60, q_fraction=0.1)
    op = EncodingOperator(gx, gz, prot, tab, weights=coil_weights(grid))
    s = op.forward(np.random.default_rng(3).random(grid.size))
    plain = cg_solve(s, op, None, tol=1e-3, max_iter=500).provenance["iterations"]
    pcg = cg_solve(s, op, build_preconditioner(op), tol=1e-3, max_iter=500).provenance["iterations"]
    assert pcg <= 25 and pcg < plain


def test_zero_data_returns_zero_image():
    prot, tab, grid, gx, gz, op = linear_instance(8)
    img = cg_solve(np.zeros(op.data_shape), op, build_preconditioner(op))
    assert np.all(img.values == 0) and img.provenance["iterations"] == 0


@pytest.mark.parametrize("precondition", [False, True])
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_data_residual_non_increasing(precondition, seed):
    prot, tab, grid, gx, gz = slice_setup(16, 20, q_fraction=0.1)
    op = EncodingOperator(gx, gz, prot, tab, weights=coil_weights(grid))
    data = add_noise(SignalData(op.forward(np.random.default_rng(seed).random(grid.size)), prot.dwell), 0.5, seed)
    pc = build_preconditioner(op) if precondition else None
    hist = np.array(cg_solve(data, op, pc, tol=1e-8, max_iter=200).provenance["data_residual_history"])
    assert np.all(np.diff(hist) <= 1e-9 * hist[0])


def test_isocenter_psf_peaks_in_place():
    prot, tab, grid, gx, gz = slice_setup(16, 20, q_fraction=0.1)
    op = EncodingOperator(gx, gz, prot, tab)
    m = np.zeros(grid.size)
    center = int(np.argmin(np.linalg.norm(grid.points(), axis=1)))
    m[center] = 1.0
    img = cg_solve(op.forward(m), op, build_preconditioner(op), tol=1e-6)
    assert int(np.argmax(img.magnitude)) == center


def test_divergence_error_carries_history():
    prot, tab, grid, gx, gz, op = linear_instance(8)

    class Broken(EncodingOperator):
        def normal(self, m):
            return np.full(self.n_pixels, np.nan, dtype=complex)

    bad = Broken(gx, gz, prot, tab)
    with pytest.raises(DivergenceError) as info:
        cg_solve(op.forward(np.ones(grid.size)), bad)
    assert info.value.history[0] == 1.0


def test_tikhonov_shrinks_solution():
    prot, tab, grid, gx, gz, op = linear_instance(8)
    s = op.forward(np.random.default_rng(4).random(grid.size))
    free = cg_solve(s, op, tol=1e-10)
    reg = cg_solve(s, op, tol=1e-10, lam=op.diag_normal()[0])
    # linear matched grid: A^H A = n I, so the ridge solution is exactly half
    np.testing.assert_allclose(reg.values, free.values / 2, rtol=1e-8)


# --- FFT baseline ------------------------------------------------------------

def test_fft_recon_inputs():
    prot, tab, grid, gx, gz, op = linear_instance(8)
    fx, fz = fits(gx, gz)
    s = op.forward(np.ones(grid.size))
    with pytest.raises(ValueError, match="missing"):
        bad = s.copy()
        bad[0, 0, 0] = np.nan
        fft_recon(bad, fx, fz, prot, tab, grid)
    with pytest.raises(ValueError):
        fft_recon(s[:, :, :-1], fx, fz, prot, tab, grid)
    with pytest.raises(ValueError):
        fft_recon(s, 0.0, fz, prot, tab, grid)
    with pytest.raises(ValueError, match="y-partition"):
        fft_recon(np.repeat(s, 2, axis=1), fx, fz, prot, tab, grid)
    # bare slopes work when there is no offset to undo
    np.testing.assert_allclose(fft_recon(s, fx.g[0], fz.g[2], prot, tab, grid).values,
                               fft_recon(s, fx, fz, prot, tab, grid).values, atol=1e-12)


def test_fft_recon_is_inverse_of_fft_forward():
    prot, tab, grid, gx, gz, op = linear_instance(15)
    m = np.random.default_rng(5).random(grid.size)
    img = fft_recon(SignalData(op.forward(m), prot.dwell), *fits(gx, gz), prot, tab, grid)
    assert relative_rmse(img, m) <= 1e-9
    assert img.provenance["method"] == "FFT"


# --- intensity correction ----------------------------------------------------

def disc_mask(grid, radius):
    p = grid.points()
    return np.hypot(p[:, 0], p[:, 2]) <= radius


def test_intensity_correct_constant_image():
    grid = Grid3.centered((32, 1, 32), 1e-2)
    mask = disc_mask(grid, 0.12)
    out = intensity_correct(Image(grid, 3.0 * np.ones(grid.size)), mask)
    np.testing.assert_allclose(out.magnitude[mask], 1.0, rtol=1e-10)
    assert np.all(out.magnitude[~mask] == 0)
    assert out.provenance["intensity_corrected"]


def test_intensity_correct_removes_shading():
    grid = Grid3.centered((64, 1, 64), 4e-3)
    mask = disc_mask(grid, 0.11)
    p = grid.points()
    shading = np.exp(p[:, 0] / 0.08)
    out = intensity_correct(Image(grid, shading * mask), mask)
    inner = disc_mask(grid, 0.08)

    def cv(v):
        return v[inner].std() / v[inner].mean()

    assert cv(out.magnitude) * 3 <= cv(shading)


def test_intensity_correct_edge_cases():
    grid = Grid3.centered((8, 1, 8), 1e-2)
    img = Image(grid, np.random.default_rng(0).random(grid.size))
    assert np.all(intensity_correct(img, np.zeros(grid.size, bool)).values == 0)
    with pytest.warns(RuntimeWarning, match="all zero"):
        intensity_correct(Image(grid, np.zeros(grid.size)))


@given(scale=st.floats(1e-6, 1e6))
def test_intensity_correct_scale_invariant(scale):
    grid = Grid3.centered((16, 1, 16), 1e-2)
    v = np.random.default_rng(1).random(grid.size) + 0.1
    a = intensity_correct(Image(grid, v)).magnitude
    b = intensity_correct(Image(grid, scale * v)).magnitude
    np.testing.assert_allclose(a, b, rtol=1e-9)


# --- SNR -----------------------------------------------------------------------

def rician_image(rng, amplitude, sigma, n=10_000):
    noise = sigma * (rng.normal(size=2 * n) + 1j * rng.normal(size=2 * n))
    vals = np.abs(np.r_[np.full(n, amplitude), np.zeros(n)] + noise)
    roi = np.r_[np.ones(n, bool), np.zeros(n, bool)]
    return vals, roi, ~roi


def test_snr_pure_noise_ratio():
    vals = [compute_snr(*rician_image(np.random.default_rng(s), 0.0, 1.0)) for s in range(100)]
    assert np.mean(vals) == pytest.approx(np.sqrt(np.pi / 2), rel=5e-3)


def test_snr_twenty_recovered():
    for seed in range(100):
        assert compute_snr(*rician_image(np.random.default_rng(seed), 20.0, 1.0)) == pytest.approx(20, rel=0.05)


@given(scale=st.floats(1e-8, 1e8))
def test_snr_scale_invariant(scale):
    vals, sig, bg = rician_image(np.random.default_rng(0), 5.0, 1.0, n=100)
    assert compute_snr(scale * vals, sig, bg) == pytest.approx(compute_snr(vals, sig, bg), rel=1e-12)


def test_snr_validation():
    vals, sig, bg = rician_image(np.random.default_rng(0), 5.0, 1.0, n=10)
    with pytest.raises(ValueError, match="disjoint"):
        compute_snr(vals, sig, sig)
    with pytest.raises(ValueError, match="nonempty"):
        compute_snr(vals, sig, np.zeros_like(bg))
    with pytest.raises(ValueError):
        compute_snr(vals, sig[:-1], bg)
    with pytest.raises(ValueError, match="zero"):
        compute_snr(np.where(bg, 0.0, vals), sig, bg)
    with pytest.raises(ValueError):
        relative_rmse(np.ones(3), np.zeros(3))


# --- estimators ---------------------------------------------------------------

def test_model_based_reconstructor():
    prot, tab, grid, gx, gz = slice_setup(16, 20, q_fraction=0.1)
    rec = ModelBasedReconstructor(gx, gz, prot, tab, tol=1e-8)
    with pytest.raises(NotFittedError):
        rec.transform(None)
    m = np.random.default_rng(6).random(grid.size)
    rec.fit()
    data = rec.inverse_transform(m)
    img = rec.transform(data)
    assert relative_rmse(img, m) <= 1e-6
    assert rec.n_iter_ == img.provenance["iterations"] and rec.residual_ < 1e-8
    assert clone(rec).get_params()["tol"] == 1e-8
    with pytest.raises(ValueError):
        ModelBasedReconstructor().fit()


def test_fft_reconstructor_matches_function():
    prot, tab, grid, gx, gz, op = linear_instance(8)
    fx, fz = fits(gx, gz)
    s = op.forward(np.ones(grid.size))
    est = FFTReconstructor(fx, fz, prot, tab, grid).fit()
    assert est.gradients_ == (fx.g[0], fz.g[2])
    np.testing.assert_array_equal(est.transform(s).values, fft_recon(s, fx, fz, prot, tab, grid).values)
    with pytest.raises(ValueError):
        FFTReconstructor().fit()


def test_image_validation():
    grid = Grid3.centered((2, 1, 2), 1.0)
    with pytest.raises(ValueError):
        Image(grid, np.ones(3))
    with pytest.raises(ValueError):
        Image(grid, [1, 2, np.inf, 0])
    with pytest.raises(ValueError):
        Image(Grid3.centered((2, 2, 2), 1.0), np.ones(8)).plane()
    assert Image(grid, [1, -2, 3, 4]).plane().shape == (2, 2)
    assert FieldMap(grid, np.zeros(4)).grid is grid
