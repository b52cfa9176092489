import numpy as np
import pytest
from scipy.linalg import expm

from fdia.dynamics import OUSystem, Trajectory, linearize, restrict, simulate, simulate_ou
from fdia.errors import CaseError, SimulationError
from fdia.grid import StateVector, solve_power_flow
from fdia.kernels import available_backends


def batch_means_se(x, n_batches=40):
    b = np.array_split(x, n_batches)
    m = np.array([bb.mean() for bb in b])
    return m.std(ddof=1) / np.sqrt(n_batches)


class TestSimulate:
    def test_noise_free_stays_at_equilibrium(self, ieee39, ieee39_eq):
        net = ieee39.with_sigma(0.0)
        tr = simulate(net, 5.0, seed=1, equilibrium=ieee39_eq)
        assert np.max(np.abs(tr.angles - ieee39_eq.angles)) < 1e-10
        assert np.max(np.abs(tr.magnitudes - ieee39_eq.magnitudes)) < 1e-10

    def test_sample_count_and_times(self, two_bus):
        tr = simulate(two_bus, 2.0, dt=0.01, seed=0)
        assert tr.n_samples == 200
        assert tr.times[0] == pytest.approx(0.01) and tr.times[-1] == pytest.approx(2.0)
        tr = simulate(two_bus, 2.0, dt=0.01, seed=0, record_every=10)
        assert tr.n_samples == 20 and tr.dt == pytest.approx(0.1)

    @pytest.mark.parametrize("backend", available_backends())
    def test_deterministic_per_seed(self, ieee39, ieee39_eq, backend):
        a = simulate(ieee39, 3.0, seed=7, equilibrium=ieee39_eq, backend=backend)
        b = simulate(ieee39, 3.0, seed=7, equilibrium=ieee39_eq, backend=backend)
        c = simulate(ieee39, 3.0, seed=8, equilibrium=ieee39_eq, backend=backend)
        assert a.angles.tobytes() == b.angles.tobytes()
        assert a.magnitudes.tobytes() == b.magnitudes.tobytes()
        assert not np.array_equal(a.angles, c.angles)

    def test_backends_agree(self, ieee39, ieee39_eq):
        if len(available_backends()) < 2:
            pytest.skip("compiled kernel not built")
        a = simulate(ieee39, 3.0, seed=3, equilibrium=ieee39_eq, backend="cython")
        b = simulate(ieee39, 3.0, seed=3, equilibrium=ieee39_eq, backend="python")
        assert np.max(np.abs(a.angles - b.angles)) < 1e-12
        assert np.max(np.abs(a.magnitudes - b.magnitudes)) < 1e-12

    def test_chunking_does_not_change_noise(self, two_bus):
        a = simulate(two_bus, 3.0, dt=0.01, seed=4, chunk_steps=7)
        b = simulate(two_bus, 3.0, dt=0.01, seed=4, chunk_steps=6000)
        assert np.array_equal(a.angles, b.angles)

    def test_explicit_scheme_blows_up_on_stiff_zero_injection_modes(self, ieee39, ieee39_eq):
        with pytest.raises(SimulationError, match="voltage band"):
            simulate(ieee39, 5.0, seed=0, equilibrium=ieee39_eq, scheme="explicit")

    def test_explicit_and_exponential_agree_on_slow_system(self, two_bus):
        net = two_bus.with_sigma(0.05)
        lin = linearize(net, solve_power_flow(net), [2])
        var = np.diag(lin.stationary_covariance())
        for scheme in ("explicit", "exponential"):
            tr = simulate(net, 1500.0, dt=0.005, seed=11, scheme=scheme)
            got = np.array([tr.angles[:, 1].var(), tr.magnitudes[:, 1].var()])
            assert np.all(np.abs(got / var - 1) < 0.1), (scheme, got, var)

    def test_stationary_mean_within_three_standard_errors(self, two_bus):
        net = two_bus.with_sigma(0.05)
        eq = solve_power_flow(net)
        tr = simulate(net, 2000.0, dt=0.01, seed=5)
        for series, ref in ((tr.angles[:, 1], eq.angles[1]), (tr.magnitudes[:, 1], eq.magnitudes[1])):
            assert abs(series.mean() - ref) < 3 * batch_means_se(series) + 1e-12

    def test_small_noise_matches_linear_model(self, three_bus):
        net = three_bus.with_sigma(1e-3)
        eq = solve_power_flow(net)
        lin = linearize(net, eq, [2, 3])
        C = lin.stationary_covariance()
        tr = restrict(simulate(net, 1500.0, dt=0.005, seed=2, record_every=4), [2, 3])
        ou = simulate_ou(lin, tr.n_samples, tr.dt, seed=2)
        for t in (tr, ou):
            got = np.cov(np.hstack([t.angles, t.magnitudes]).T)
            assert np.all(np.abs(np.diag(got) / np.diag(C) - 1) < 0.2)

    def test_invalid_arguments(self, two_bus):
        with pytest.raises(ValueError):
            simulate(two_bus, 0.0)
        with pytest.raises(ValueError):
            simulate(two_bus, 1.0, dt=-0.1)
        with pytest.raises(ValueError):
            simulate(two_bus, 1.0, scheme="rk4")

    def test_csv_round_trip(self, two_bus, tmp_path):
        tr = simulate(two_bus, 1.0, dt=0.01, seed=0)
        tr.to_csv(tmp_path / "t.csv")
        back = Trajectory.from_csv(tmp_path / "t.csv")
        assert back.bus_ids == tr.bus_ids
        assert np.array_equal(back.angles, tr.angles) and np.array_equal(back.magnitudes, tr.magnitudes)
        assert back.dt == pytest.approx(tr.dt, rel=1e-12)
        header = (tmp_path / "t.csv").read_text().splitlines()[0]
        assert header == "t,bus_id,v,delta"


class TestLinearize:
    def test_one_load_symbolic_oracle(self, two_bus):
        eq = solve_power_flow(two_bus)
        lin = linearize(two_bus, eq, [2])
        g, b = 1.0, -10.0
        v1, v2 = 1.0, eq.magnitudes[1]
        th = eq.angles[1] - eq.angles[0]
        c, s = np.cos(th), np.sin(th)
        dp_dd = v2 * v1 * (g * s - b * c)
        dp_dv = 2 * v2 * g - v1 * (g * c + b * s)
        dq_dd = -v2 * v1 * (g * c + b * s)
        dq_dv = -2 * v2 * b - v1 * (g * s - b * c)
        expect = -np.array([[dp_dd / 5.0, dp_dv / 5.0], [dq_dd / 3.0, dq_dv / 3.0]])
        assert np.allclose(lin.a_matrix, expect, atol=1e-12)
        assert np.allclose(lin.b_matrix, np.diag([-0.5 / 5.0, -0.2 / 3.0]), atol=1e-15)

    def test_zero_injection_noise_row_vanishes(self, ieee39, ieee39_eq):
        lin = linearize(ieee39, ieee39_eq, [3, 16, 17, 18, 27])
        k = lin.bus_ids.index(17)
        assert np.all(lin.b_matrix[k] == 0.0) and np.all(lin.b_matrix[5 + k] == 0.0)

    def test_region_one_is_stable(self, ieee39, ieee39_eq):
        lin = linearize(ieee39, ieee39_eq, {28, 26, 29})
        assert lin.bus_ids == (26, 28, 29)
        assert np.all(np.linalg.eigvals(lin.a_matrix).real < 0)

    def test_generator_rejected(self, ieee39, ieee39_eq):
        with pytest.raises(CaseError, match="generator"):
            linearize(ieee39, ieee39_eq, [28, 39])


def scalar_system(a, b):
    return OUSystem([[a, 0.0], [0.0, -1.0]], [[b, 0.0], [0.0, 0.0]],
                    StateVector([0.0], [1.0]), (1,))


class TestSimulateOu:
    def test_scalar_stationary_variance(self):
        tr = simulate_ou(scalar_system(-1.0, 1.0), 200_000, 0.05, seed=0)
        assert tr.angles[:, 0].var() == pytest.approx(0.5, rel=0.05)

    def test_zero_noise_decays(self):
        sys = OUSystem([[-2.0, 0.0], [0.0, -1.0]], np.zeros((2, 2)), StateVector([0.0], [1.0]), (1,))
        tr = simulate_ou(sys, 50, 0.1, seed=0, x0=[1.0, 0.5])
        assert tr.angles[-1, 0] == pytest.approx(np.exp(-2.0 * 4.9), rel=1e-9)
        assert tr.magnitudes[-1, 0] - 1.0 == pytest.approx(0.5 * np.exp(-4.9), rel=1e-9)

    def test_lyapunov_convergence(self, ieee39, ieee39_eq):
        lin = linearize(ieee39, ieee39_eq, [26, 28, 29])
        C = lin.stationary_covariance()
        tr = simulate_ou(lin, 1_000_000, 1.0, seed=1)
        X = np.hstack([tr.angles, tr.magnitudes])
        emp = np.cov(X.T)
        assert np.linalg.norm(emp - C) / np.linalg.norm(C) < 0.05

    def test_lag_covariance_follows_regression_theorem(self):
        A = np.array([[-1.0, 0.4], [-0.3, -2.0]])
        sys = OUSystem(A, np.eye(2), StateVector([0.0], [1.0]), (1,))
        tr = simulate_ou(sys, 400_000, 0.05, seed=3)
        X = np.hstack([tr.angles, tr.magnitudes - 1.0])
        lag = 10
        c0 = X[:-lag].T @ X[:-lag] / (len(X) - lag)
        cl = X[lag:].T @ X[:-lag] / (len(X) - lag)
        pred = expm(A * lag * 0.05) @ c0
        assert np.linalg.norm(cl - pred) / np.linalg.norm(pred) < 0.05

    def test_unstable_rejected(self):
        with pytest.raises(SimulationError):
            simulate_ou(scalar_system(0.5, 1.0), 10, 0.1)
