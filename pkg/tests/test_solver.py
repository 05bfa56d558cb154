import numpy as np
import pytest

from pincl.data import GridSample, make_permeability, sample_grf
from pincl.solver import SolverError, assemble_darcy, solve_darcy, solve_labels


def node_grid(n):
    x = np.linspace(0.0, 1.0, n)
    return np.meshgrid(x, x, indexing="ij")


def manufactured_error(n):
    """Relative L2 error against T = sin(pi x) sin(pi y) with k = 1."""
    x, y = node_grid(n)
    exact = np.sin(np.pi * x) * np.sin(np.pi * y)
    q = 2.0 * np.pi ** 2 * exact
    t, _ = solve_darcy(np.ones((n, n)), q)
    return float(np.linalg.norm(t - exact) / np.linalg.norm(exact))


def test_manufactured_solution_accuracy():
    assert manufactured_error(65) < 1e-3


def test_second_order_convergence():
    ratio = manufactured_error(33) / manufactured_error(65)
    assert 3.5 <= ratio <= 4.5


def test_variable_coefficient_manufactured_solution():
    # k = exp(x + y), T = sin(pi x) sin(pi y)
    def err(n):
        x, y = node_grid(n)
        exact = np.sin(np.pi * x) * np.sin(np.pi * y)
        k = np.exp(x + y)
        q = k * (2.0 * np.pi ** 2 * exact
                 - np.pi * np.cos(np.pi * x) * np.sin(np.pi * y)
                 - np.pi * np.sin(np.pi * x) * np.cos(np.pi * y))
        t, _ = solve_darcy(k, q)
        return float(np.linalg.norm(t - exact) / np.linalg.norm(exact))

    assert err(65) < 2e-3
    assert 3.0 <= err(33) / err(65) <= 5.0


def test_symmetric_inputs_give_symmetric_solution():
    x, y = node_grid(41)
    k = 1.0 + np.exp(-((x - 0.5) ** 2 + (y - 0.5) ** 2) / 0.05) + (x + y)
    q = np.cos(np.pi * (x - y)) + 1.5
    t, _ = solve_darcy(k, q, tol=1e-12)
    assert np.max(np.abs(t - t.T)) < 1e-9


def test_maximum_principle_nonnegative_source():
    for seed in range(3):
        k = make_permeability(sample_grf(24, 24, 0.1, seed=seed), mu=0.0, sigma=1.0)
        t, _ = solve_darcy(k)
        assert np.all(t >= 0.0)
        assert t.max() > 0.0


def test_boundary_is_exactly_zero():
    k = make_permeability(sample_grf(20, 20, 0.2, seed=5), mu=0.5, sigma=0.8)
    t, _ = solve_darcy(k)
    assert np.all(t[0, :] == 0.0) and np.all(t[-1, :] == 0.0)
    assert np.all(t[:, 0] == 0.0) and np.all(t[:, -1] == 0.0)


def test_solution_deterministic():
    k = make_permeability(sample_grf(16, 16, 0.1, seed=1), mu=0.0, sigma=1.2)
    t1, _ = solve_darcy(k)
    t2, _ = solve_darcy(k)
    assert t1.tobytes() == t2.tobytes()


def test_report_fields():
    k = make_permeability(sample_grf(24, 24, 0.08, seed=2), mu=0.0, sigma=1.5)
    t, report = solve_darcy(k, tol=1e-10)
    assert report.converged
    assert report.final_residual_norm <= 1e-10
    assert report.iterations > 1
    assert (report.nx, report.ny) == (24, 24)


def test_system_matrix_is_symmetric():
    k = make_permeability(sample_grf(12, 12, 0.1, seed=3), mu=0.0, sigma=1.0)
    a = assemble_darcy(k)
    assert abs(a - a.T).max() < 1e-12


def test_linearity_in_source():
    k = make_permeability(sample_grf(16, 16, 0.15, seed=4), mu=0.0, sigma=0.5)
    rng = np.random.default_rng(0)
    q1 = rng.normal(size=(16, 16))
    q2 = rng.normal(size=(16, 16))
    ta, _ = solve_darcy(k, q1, tol=1e-13)
    tb, _ = solve_darcy(k, q2, tol=1e-13)
    tc, _ = solve_darcy(k, 2.0 * q1 + 3.0 * q2, tol=1e-13)
    np.testing.assert_allclose(tc, 2.0 * ta + 3.0 * tb, atol=1e-7)


def test_input_validation():
    with pytest.raises(ValueError, match="positive"):
        solve_darcy(np.zeros((8, 8)))
    with pytest.raises(ValueError, match="3x3"):
        solve_darcy(np.ones((2, 8)))
    with pytest.raises(ValueError, match="shape"):
        solve_darcy(np.ones((8, 8)), q=np.ones((8, 7)))
    with pytest.raises(ValueError, match="tol"):
        solve_darcy(np.ones((8, 8)), tol=0.0)


def test_solver_error_carries_report():
    err = SolverError("boom", report=None)
    assert err.report is None


def test_solve_labels_fills_in_place():
    samples = [GridSample(k=make_permeability(sample_grf(12, 12, 0.1, seed=s),
                                              0.0, 1.0),
                          group_id=0, sample_index=s) for s in range(2)]
    assert all(s.label is None for s in samples)
    solve_labels(samples)
    for s in samples:
        assert s.label is not None and s.label.shape == (12, 12)
        direct, _ = solve_darcy(s.k)
        assert s.label.tobytes() == direct.tobytes()
