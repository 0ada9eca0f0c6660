import math

import numpy as np
import pytest
from dataclasses import replace
from hypothesis import given, settings, strategies as st

from subdiff.fem import CoefficientSet, build_interval_mesh, build_rect_mesh, interpolate, subdomain_mask
from subdiff.forward import ForwardOperator, observation_spec, observe_states
from subdiff.fractional import TimeGrid
from subdiff.inverse import (
    InversionSetup,
    IterateHistory,
    LMConfig,
    NormalEquationError,
    ParamVector,
    _penalty,
    forward_map,
    full_jacobian,
    h1_gram,
    h1_space_gram,
    intensity_error,
    jacobian_lambda,
    jacobian_u0,
    jacobian_x,
    lm_step,
    location_error,
    run_lm,
    solve_normal_equations,
)


def make_setup_1d(n_cells=40, n_steps=40, alpha=0.5, eps=0.75, region=None, u0=None):
    mesh = build_interval_mesh(1.0, n_cells)
    grid = TimeGrid(1.0, n_steps)
    op = ForwardOperator(mesh, CoefficientSet(), alpha, grid)
    region = region or (lambda p: p[0] < 0.25 or p[0] > 0.75)
    obs = observation_spec(subdomain_mask(mesh, region), grid, eps)
    u0_nodal = interpolate(mesh, u0 or (lambda p: p[..., 0] * (1 - p[..., 0])))
    return InversionSetup(op=op, obs=obs, u0_nodal=u0_nodal)


def make_setup_2d():
    mesh = build_rect_mesh(10, 10)
    grid = TimeGrid(1.0, 12)
    op = ForwardOperator(mesh, CoefficientSet(), 0.5, grid)
    obs = observation_spec(subdomain_mask(mesh, lambda p: p[0] > 0.5 and p[1] > 0.5), grid, 0.75)
    u0 = interpolate(mesh, lambda p: p[..., 0] * (1 - p[..., 0]) * p[..., 1] * (1 - p[..., 1]))
    return InversionSetup(op=op, obs=obs, u0_nodal=u0)


def params_1d(setup, x=(0.43,), with_u0=False):
    t = setup.grid.nodes
    lam = np.array([0.2 * np.exp(t) + 0.05 * k for k in range(len(x))])
    u0 = setup.u0_nodal[setup.interior].copy() if with_u0 else None
    return ParamVector(np.array(x, dtype=float)[:, None], lam, u0)


@pytest.fixture(scope="module")
def setup():
    return make_setup_1d()


class TestParamVector:
    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 3), st.integers(1, 2), st.integers(1, 8), st.booleans())
    def test_pack_roundtrip(self, N, d, n, with_u0):
        rng = np.random.default_rng(N * 100 + d * 10 + n)
        p = ParamVector(rng.normal(size=(N, d)), rng.normal(size=(N, n + 1)),
                        rng.normal(size=5) if with_u0 else None)
        q = p.unpack(p.pack())
        assert np.array_equal(q.locations, p.locations)
        assert np.array_equal(q.intensities, p.intensities)
        assert (q.u0 is None) == (p.u0 is None)
        if with_u0:
            assert np.array_equal(q.u0, p.u0)
        assert np.array_equal(q.pack(), p.pack())

    def test_unpack_size_checked(self):
        p = ParamVector([[0.5]], np.ones((1, 4)))
        with pytest.raises(ValueError):
            p.unpack(np.zeros(3))


class TestForwardMap:
    def test_zero_sources_zero_u0(self, setup):
        s = replace(setup, u0_nodal=np.zeros(setup.mesh.n_nodes))
        p = ParamVector([[0.5]], np.zeros((1, setup.grid.n_steps + 1)))
        assert not forward_map(p, s).any()

    def test_deterministic(self, setup):
        p = params_1d(setup)
        assert np.array_equal(forward_map(p, setup), forward_map(p, setup))

    def test_guard_region(self, setup):
        p = params_1d(setup, x=(0.01,))
        with pytest.raises(ValueError, match="guard"):
            forward_map(p, setup)

    def test_counterexample_pair_indistinguishable(self):
        s = make_setup_1d(n_cells=100, n_steps=50, region=lambda p: p[0] < 0.25, eps=1.0)
        x0, lam0, x1 = 0.5, 1.0, 0.7
        lam1 = lam0 * (1 - x0) / (1 - x1)
        from subdiff.forward import steady_point_source_1d

        n = s.grid.n_steps + 1
        out = []
        for x, lam in ((x0, lam0), (x1, lam1)):
            s2 = replace(s, u0_nodal=steady_point_source_1d(x, lam)(s.mesh.nodes))
            out.append(forward_map(ParamVector([[x]], np.full((1, n), lam)), s2))
        assert np.max(np.abs(out[0] - out[1])) <= 1e-10


class TestJacobianLambda:
    def test_linearity_identity(self, setup):
        p = params_1d(setup, x=(0.31, 0.66))
        J = jacobian_lambda(setup, p.locations)
        zero = replace(p, intensities=np.zeros_like(p.intensities))
        lhs = forward_map(p, setup)
        rhs = forward_map(zero, setup) + J @ p.intensities.ravel()
        assert np.max(np.abs(lhs - rhs)) <= 1e-10

    @pytest.mark.parametrize("m", [1, 7, 25, 40])
    def test_column_is_direct_solve(self, setup, m):
        x = np.array([[0.31], [0.66]])
        J = jacobian_lambda(setup, x)
        op = setup.op
        lam = np.zeros((op.grid.n_steps + 1, 2))
        lam[m, 1] = 1.0
        direct = observe_states(op.run(np.zeros(op.mesh.n_nodes), op.load_matrix(x), lam), setup.obs)
        n_t = op.grid.n_steps + 1
        np.testing.assert_allclose(J[:, n_t + m], direct, atol=1e-14)

    def test_finite_difference(self, setup):
        p = params_1d(setup)
        J = jacobian_lambda(setup, p.locations)
        d = 1e-6
        base = forward_map(p, setup)
        for m in (3, 20, 39):
            lam = p.intensities.copy()
            lam[0, m] += d
            fd = (forward_map(replace(p, intensities=lam), setup) - base) / d
            np.testing.assert_allclose(fd, J[:, m], atol=1e-8)

    def test_hat_columns(self, setup):
        J = jacobian_lambda(setup, [[0.5]])
        assert not J[:, 0].any()  # lambda(t_0) never enters the scheme
        assert np.abs(J[:, 1]).max() > 1e-6  # memory carries early forcing into the window
        assert np.abs(J[:, -1]).max() > 0

    def test_2d(self):
        s = make_setup_2d()
        x = np.array([[0.4, 0.45]])
        J = jacobian_lambda(s, x)
        t = s.grid.nodes
        p = ParamVector(x, [1 + t])
        lhs = forward_map(p, s)
        zero = forward_map(ParamVector(x, [0 * t]), s)
        assert np.max(np.abs(lhs - zero - J @ p.intensities.ravel())) <= 1e-10


class TestJacobianX:
    def test_matches_central_difference_of_map(self, setup):
        p = params_1d(setup, x=(0.43, 0.61))
        f = 1e-4
        J = jacobian_x(setup, p, f)
        for k in range(2):
            plus, minus = p.locations.copy(), p.locations.copy()
            plus[k, 0] += f
            minus[k, 0] -= f
            fd = (forward_map(replace(p, locations=plus), setup) - forward_map(replace(p, locations=minus), setup)) / (2 * f)
            np.testing.assert_allclose(J[:, k], fd, rtol=1e-7, atol=1e-9)

    def test_reflection_antisymmetry(self):
        s = make_setup_1d(n_cells=40, region=lambda p: p[0] < 0.25 or p[0] > 0.75,
                          u0=lambda p: np.zeros(p.shape[:-1]))
        t = s.grid.nodes
        p = ParamVector([[0.5]], [1 + t])
        col = jacobian_x(s, p, 1e-4)[:, 0].reshape(len(s.obs.steps), len(s.obs.mask))
        np.testing.assert_allclose(col[:, ::-1], -col, atol=1e-12 * np.abs(col).max())
        assert np.abs(col).max() > 0

    def test_silent_source(self, setup):
        p = ParamVector([[0.43], [0.6]], np.vstack([np.zeros(41), np.ones(41)]))
        J = jacobian_x(setup, p, 1e-4)
        assert not J[:, 0].any() and J[:, 1].any()

    def test_step_refinement(self, setup):
        # F is piecewise linear in x for P1 loads, so away from nodes the central
        # difference is exact and halving the step changes it only at roundoff
        p = params_1d(setup, x=(0.4375,))
        cols = [jacobian_x(setup, p, f)[:, 0] for f in (4e-4, 2e-4, 1e-4)]
        d1 = np.linalg.norm(cols[0] - cols[1])
        d2 = np.linalg.norm(cols[1] - cols[2])
        scale = np.linalg.norm(cols[2])
        converged = max(d1, d2) <= 1e-9 * scale
        assert converged or math.log2(d1 / d2) >= 1.5

    def test_guard_violation(self, setup):
        p = params_1d(setup, x=(setup.guard + 5e-5,))
        with pytest.raises(ValueError, match="guard"):
            jacobian_x(setup, p, 1e-4)

    def test_2d_columns(self):
        s = make_setup_2d()
        t = s.grid.nodes
        p = ParamVector([[0.43, 0.47]], [1 + t])
        f = 1e-4
        J = jacobian_x(s, p, f)
        assert J.shape == (s.obs.size, 2)
        for c in range(2):
            e = np.zeros((1, 2))
            e[0, c] = f
            fd = (forward_map(replace(p, locations=p.locations + e), s)
                  - forward_map(replace(p, locations=p.locations - e), s)) / (2 * f)
            np.testing.assert_allclose(J[:, c], fd, rtol=1e-7, atol=1e-10)


class TestJacobianU0:
    def test_linearity(self, setup):
        p = params_1d(setup, with_u0=True)
        Ju = jacobian_u0(setup)
        no_u0 = replace(p, u0=np.zeros_like(p.u0))
        np.testing.assert_allclose(forward_map(p, setup), forward_map(no_u0, setup) + Ju @ p.u0, atol=1e-12)


class TestGram:
    def test_constant(self):
        g = TimeGrid(2.0, 7)
        v = np.full(8, 1.5)
        assert v @ h1_gram(g) @ v == pytest.approx(1.5**2 * 2.0, rel=1e-14)

    def test_linear_two_cells(self):
        g = TimeGrid(1.0, 2)
        v = g.nodes
        assert v @ h1_gram(g) @ v == pytest.approx(4 / 3, rel=1e-14)

    def test_spd(self):
        G = h1_gram(TimeGrid(1.0, 30))
        np.testing.assert_array_equal(G, G.T)
        assert np.linalg.eigvalsh(G).min() > 0

    def test_space_gram_spd(self):
        G = h1_space_gram(build_rect_mesh(6, 6))
        assert G.shape == (25, 25)
        assert np.linalg.eigvalsh(G).min() > 0


class TestNormalEquations:
    def test_scalar_toy(self):
        assert solve_normal_equations(np.array([[2.0]]), np.array([1.0]), np.zeros((1, 1)))[0] == pytest.approx(0.5)

    def test_singular_reported(self):
        with pytest.raises(NormalEquationError):
            solve_normal_equations(np.zeros((4, 2)), np.ones(4), np.zeros((2, 2)))

    def test_permutation_invariance(self):
        rng = np.random.default_rng(0)
        J = rng.normal(size=(60, 8))
        r = rng.normal(size=60)
        B = np.diag(rng.uniform(0.1, 1, 8))
        perm = rng.permutation(60)
        a = solve_normal_equations(J, r, B)
        b = solve_normal_equations(J[perm], r[perm], B)
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-14)


class TestLMStep:
    def test_zero_residual(self, setup):
        p = params_1d(setup, x=(0.31, 0.66), with_u0=True)
        new = lm_step(p, forward_map(p, setup), setup, 1e-3, 1e-5, 1e-5)
        np.testing.assert_array_equal(new.pack(), p.pack())

    def test_step_shrinks_with_penalty(self, setup):
        truth = params_1d(setup)
        data = forward_map(truth, setup)
        start = replace(truth, locations=np.array([[0.4]]), intensities=truth.intensities * 0.8)
        steps = []
        for beta in (1e-3, 1e-1, 1e1, 1e3):
            new = lm_step(start, data, setup, beta, beta)
            steps.append(np.linalg.norm(new.pack() - start.pack()))
        assert all(a > b for a, b in zip(steps, steps[1:]))
        assert steps[-1] < 1e-2 * steps[0]

    def test_model_decrease_and_permutation(self, setup):
        truth = params_1d(setup, x=(0.31, 0.66), with_u0=True)
        rng = np.random.default_rng(3)
        data = forward_map(truth, setup) + 1e-3 * rng.normal(size=setup.obs.size)
        start = replace(truth, locations=truth.locations + [[0.03], [-0.02]],
                        intensities=truth.intensities * 1.1, u0=truth.u0 * 0.9)
        J = full_jacobian(setup, start, 1e-4)
        B = _penalty(setup, start, 1e-2, 1e-3, 1e-3)
        r = data - forward_map(start, setup)
        d = solve_normal_equations(J, r, B)

        def model(v):
            return np.sum((J @ v - r) ** 2) + v @ B @ v

        assert model(d) <= model(np.zeros_like(d))
        perm = rng.permutation(len(r))
        d2 = solve_normal_equations(J[perm], r[perm], B)
        np.testing.assert_allclose(d2, d, rtol=1e-12, atol=1e-12 * np.abs(d).max())

    def test_clamped_to_guard(self, setup):
        truth = params_1d(setup, x=(0.06,))
        data = forward_map(truth, setup)
        start = params_1d(setup, x=(0.2,))
        new = lm_step(start, data, setup, 1e-12, 1e-3)
        assert new.locations[0, 0] >= setup.guard + 1e-4 - 1e-15


class TestRunLM:
    def test_fixed_point_at_truth(self, setup):
        truth = params_1d(setup, x=(0.31, 0.66))
        data = forward_map(truth, setup)
        cfg = LMConfig(beta_x0=1e-2, beta_lambda0=1e-4, K_max=5, step_tol=0.0)
        p, hist = run_lm(truth, data, setup, cfg)
        assert len(hist) == 5 and hist.stop_reason == "max_iterations"
        assert np.max(np.abs(p.locations - truth.locations)) <= 1e-10

    def test_stops_on_zero_step(self, setup):
        truth = params_1d(setup)
        p, hist = run_lm(truth, forward_map(truth, setup), setup, LMConfig(beta_x0=1.0, beta_lambda0=1.0))
        assert hist.stop_reason == "small_step" and len(hist) == 1

    def test_recovers_noise_free(self, setup):
        s = replace(setup, truth=params_1d(setup))
        data = forward_map(s.truth, s)
        t = s.grid.nodes
        start = ParamVector([[0.4]], [0.25 * np.exp(t)])
        cfg = LMConfig.scaled_to(data, K_max=15)
        p, hist = run_lm(start, data, s, cfg)
        assert abs(p.locations[0, 0] - 0.43) < 2e-3
        assert len(hist) == 15
        assert [r.iteration for r in hist] == list(range(1, 16))
        b = [r.beta_x for r in hist]
        np.testing.assert_allclose(np.array(b[1:]) / np.array(b[:-1]), cfg.gamma_x, rtol=1e-12)

    def test_discrepancy_stop(self, setup):
        truth = params_1d(setup)
        data = forward_map(truth, setup)
        cfg = LMConfig(beta_x0=1.0, beta_lambda0=1.0, noise_delta=0.5)
        _, hist = run_lm(truth, data + 1e-6, setup, cfg)
        assert hist.stop_reason == "discrepancy" and len(hist) == 0

    def test_non_finite_aborts(self, setup):
        truth = params_1d(setup)
        data = forward_map(truth, setup)
        data[0] = np.inf
        _, hist = run_lm(params_1d(setup, x=(0.4,)), data, setup, LMConfig(beta_x0=1.0, beta_lambda0=1.0))
        assert hist.stop_reason.startswith("non-finite")

    def test_config_validation(self):
        with pytest.raises(ValueError):
            LMConfig(beta_x0=0.0, beta_lambda0=1.0)
        with pytest.raises(ValueError):
            LMConfig(beta_x0=1.0, beta_lambda0=1.0, gamma_x=1.0)
        with pytest.raises(ValueError):
            LMConfig(beta_x0=1.0, beta_lambda0=1.0, K_max=0)
        assert LMConfig(beta_x0=1.0, beta_lambda0=2.0).beta_u0 == 2.0

    def test_history_csv(self, tmp_path, setup):
        h = IterateHistory()
        h.to_csv(tmp_path / "h.csv")
        assert (tmp_path / "h.csv").read_text().splitlines() == [",".join(IterateHistory.CSV_FIELDS)]


def test_error_metrics():
    g = TimeGrid(1.0, 10)
    t = g.nodes
    assert intensity_error(2 * t + 1, 2 * t + 1, g) == 0
    assert intensity_error(1.1 * (t + 1), t + 1, g) == pytest.approx(0.1)
    assert location_error([[0.5, 0.5], [0.1, 0.1]], [[0.5, 0.6], [0.1, 0.1]]) == pytest.approx(0.1)
