import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wsmp import operators, streams
from wsmp.denoisers import PriorDescriptor


def test_flat_spectrum_from_normalization():
    model = operators.make_dense_roi(4, 2, 1.0, seed=0)
    np.testing.assert_allclose(model.spectrum, [2.0, 2.0], rtol=1e-12)
    chi = operators.exact_moments(model.spectrum, model.n, 1)
    assert chi[1] == pytest.approx(1.0, rel=1e-12)


def test_condition_number_and_power():
    model = operators.make_dense_roi(256, 128, 1e3, seed=7)
    s = np.sqrt(model.spectrum)
    assert s.max() / s.min() == pytest.approx(1e3, abs=1e-9)
    assert np.sum(s**2) / model.n == pytest.approx(1.0, abs=1e-12)


def test_dense_eigendecomposition_matches_stored_spectrum():
    model = operators.make_dense_roi(64, 32, 10.0, seed=1)
    a = model.dense()
    eig = np.sort(np.linalg.eigvalsh(a @ a.T))[::-1]
    np.testing.assert_allclose(eig, model.spectrum, atol=1e-8)


@pytest.mark.parametrize("kind", ["dense_roi", "fijl"])
def test_adjoint_consistency(kind):
    model = operators.make_model(kind, 128, 48, 100.0, seed=2)
    assert operators.adjoint_mismatch(model, pairs=20) <= 1e-10


def test_fijl_materialized_trace():
    model = operators.make_fijl(8, 4, 1.0, seed=0)
    a = np.column_stack([model.apply(e) for e in np.eye(8)])
    assert np.trace(a @ a.T) / 8 == pytest.approx(1.0, abs=1e-10)
    rng = np.random.default_rng(0)
    xs = rng.standard_normal((8, 100))
    # E||Ax||^2 = Tr(A^T A) = N = E||x||^2 for standard Gaussian x
    ratio = np.mean(np.sum(model.apply(xs) ** 2, axis=0)) / np.mean(np.sum(xs**2, axis=0))
    assert ratio == pytest.approx(1.0, rel=0.3)


def test_fijl_gram_is_diagonal():
    model = operators.make_fijl(64, 20, 50.0, seed=4)
    a = model.dense()
    np.testing.assert_allclose(a @ a.T, np.diag(model.spectrum), atol=1e-10)


def test_fijl_batched_matches_vectorwise():
    model = operators.make_fijl(32, 12, 10.0, seed=5)
    rng = np.random.default_rng(1)
    x = rng.standard_normal((32, 3))
    y = rng.standard_normal((12, 3))
    np.testing.assert_allclose(model.apply(x), np.column_stack([model.apply(c) for c in x.T]), atol=1e-12)
    np.testing.assert_allclose(model.apply_t(y), np.column_stack([model.apply_t(c) for c in y.T]), atol=1e-12)


def test_small_delta_regime():
    model = operators.make_fijl(1024, 51, 1e3, seed=3)
    assert model.delta == pytest.approx(0.0498, abs=1e-4)


def test_isometric_rows_with_unit_condition():
    # with kappa = 1 every singular value is sqrt(n/m), so A^T is a scaled isometry
    model = operators.make_dense_roi(40, 20, 1.0, seed=9)
    u = np.random.default_rng(3).standard_normal(20)
    assert np.linalg.norm(model.apply_t(u)) == pytest.approx(np.sqrt(2.0) * np.linalg.norm(u), rel=1e-10)


def test_invalid_dimensions():
    with pytest.raises(ValueError):
        operators.make_dense_roi(8, 8, 1.0, 0)
    with pytest.raises(ValueError):
        operators.make_dense_roi(8, 4, 0.5, 0)
    with pytest.raises(ValueError):
        operators.make_fijl(12, 4, 1.0, 0)


def test_descriptor_round_trip(tmp_path):
    model = operators.make_fijl(64, 16, 30.0, seed=11, noise_var=0.2)
    again = operators.load_descriptor(operators.dump_descriptor(model))
    x = np.random.default_rng(0).standard_normal(64)
    np.testing.assert_array_equal(model.apply(x), again.apply(x))
    assert again.noise_var == 0.2
    assert json.loads(operators.dump_descriptor(model))["kind"] == "fijl"
    path = tmp_path / "spec.csv"
    operators.write_spectrum_csv(model, path)
    np.testing.assert_array_equal(operators.read_spectrum_csv(path), model.spectrum)


def test_custom_operator_cannot_be_serialized():
    model = operators.from_matrix(np.random.default_rng(0).standard_normal((3, 5)))
    with pytest.raises(ValueError):
        operators.dump_descriptor(model)


def test_moments_flat_spectrum():
    model = operators.make_dense_roi(64, 32, 1.0, seed=0)
    info = operators.spectral_moments_mc(model, 3, trials=5, seed=0)
    # AA^T = (1/delta) I, so every Rademacher probe gives the exact value
    assert info.chi[3] == pytest.approx(4.0, rel=1e-10)


def test_moments_monte_carlo_accuracy():
    # a single 1000-probe estimate has a few-percent spread at high orders,
    # so the 5% bound is checked as a rate over probe seeds
    model = operators.make_dense_roi(128, 64, 100.0, seed=0)
    exact = operators.spectral_info_exact(model, 6).chi
    worst = [np.max(np.abs(operators.spectral_moments_mc(model, 6, 1000, seed=s).chi[1:] / exact[1:] - 1))
             for s in range(10)]
    assert sum(w <= 0.05 for w in worst) >= 9
    assert np.mean(worst) <= 0.05


def test_single_probe_is_definition():
    model = operators.make_dense_roi(32, 16, 10.0, seed=2)
    info = operators.spectral_moments_mc(model, 1, trials=1, seed=5)
    u = streams.rademacher(streams.generator(5, streams.PROBES), (16, 1))[:, 0]
    assert info.chi[1] == pytest.approx(np.sum(model.apply_t(u) ** 2) / 32, rel=1e-12)


def test_lazy_moments_extend_consistently():
    model = operators.make_dense_roi(64, 32, 10.0, seed=3)
    lazy = operators.MonteCarloMoments(model, 50, seed=1)
    lazy.ensure(2)
    lazy.ensure(5)
    full = operators.spectral_moments_mc(model, 5, trials=50, seed=1)
    np.testing.assert_allclose(lazy.chi, full.chi, rtol=1e-12)


def test_scaled_moments():
    model = operators.make_dense_roi(64, 32, 10.0, seed=3)
    plain = operators.spectral_info_exact(model, 4).chi
    scaled = operators.spectral_info_exact(model, 4, scale=3.0).chi
    np.testing.assert_allclose(scaled, plain / 3.0 ** np.arange(5), rtol=1e-12)


def test_extreme_eigs_read_off_spectrum():
    model = operators.make_custom(lambda x: x[:3], lambda y: np.r_[y, 0.0], 4, 3,
                                  spectrum=np.array([2.0, 0.5, 0.1]))
    eig = operators.extreme_eigs(model, iters=1)
    assert (eig.lambda_min, eig.lambda_max) == (0.1, 2.0)
    assert eig.converged


def test_extreme_eigs_power_iteration():
    model = operators.make_dense_roi(128, 64, 100.0, seed=0)
    with warnings.catch_warnings():
        # the lower end converges slowly at this conditioning; only the top is checked
        warnings.simplefilter("ignore", RuntimeWarning)
        eig = operators.extreme_eigs(model, iters=200, use_spectrum=False)
    assert eig.lambda_max == pytest.approx(model.spectrum.max(), rel=0.01)


def test_extreme_eigs_scalar_gram():
    model = operators.from_matrix(np.sqrt(3.0) * np.eye(4)[:2])
    eig = operators.extreme_eigs(model, iters=50, use_spectrum=False)
    assert eig.lambda_min == pytest.approx(3.0, rel=1e-9)
    assert eig.lambda_max == pytest.approx(3.0, rel=1e-9)
    assert eig.lambda_dagger == pytest.approx(3.0, rel=1e-9)


def test_problem_snr():
    model = operators.make_fijl(4096, 2048, 10.0, seed=0)
    prior = PriorDescriptor(sparsity=0.1)
    prob = operators.make_problem(model, prior, 20.0, seed=1)
    assert prob.model.noise_var == pytest.approx(operators.noise_var_for_snr(4096, 2048, 1.0, 20.0))
    np.testing.assert_allclose(prob.y, model.apply(prob.x_true) + prob.w_true, atol=1e-12)
    snr = 10 * np.log10(np.sum(prob.x_true**2) / np.sum(prob.w_true**2))
    assert snr == pytest.approx(20.0, abs=0.5)


def test_problem_is_reproducible():
    model = operators.make_dense_roi(64, 32, 10.0, seed=0)
    a = operators.make_problem(model, PriorDescriptor(), 30.0, seed=4)
    b = operators.make_problem(model, PriorDescriptor(), 30.0, seed=4)
    np.testing.assert_array_equal(a.y, b.y)


@settings(max_examples=25, deadline=None)
@given(n_log=st.integers(3, 7), frac=st.floats(0.1, 0.9), kappa=st.floats(1.0, 1e4), seed=st.integers(0, 1000))
def test_construction_contract_holds(n_log, frac, kappa, seed):
    n = 2**n_log
    m = min(max(1, int(frac * n)), n - 1)
    model = operators.make_fijl(n, m, kappa, seed)
    assert np.sum(model.spectrum) / n == pytest.approx(1.0, rel=1e-10)
    if m > 1:
        assert np.sqrt(model.spectrum.max() / model.spectrum.min()) == pytest.approx(kappa, rel=1e-9)
    assert operators.adjoint_mismatch(model, pairs=3, seed=seed) <= 1e-10
