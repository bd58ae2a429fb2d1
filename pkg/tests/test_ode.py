import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings, strategies as st

from markov_sa.environments import builtin_environment
from markov_sa.learners import LearnerConfig, Schedule, _cumulative, _draw, gtd_block_H, sample_transition, simulate_reference
from markov_sa.ode import (
    AT_INFINITY,
    PROBE_THRESHOLD,
    InterpolatedPath,
    LinearField,
    OdeError,
    TimePartition,
    build_partition,
    discretization_error,
    interpolate,
    ode_at_infinity_probe,
    scaled_field,
    scaled_segment,
    segment_ode,
    solve_ode,
    tracking_errors,
)
from markov_sa.spectral import gtd_expected_system, probe_horizon_estimate


def _linear_scan_m(t_knots, T):
    i = 0
    while i + 1 < len(t_knots) and t_knots[i + 1] <= T:
        i += 1
    return i


def _euler_path(M, b, x0, alphas):
    xs = [np.asarray(x0, float)]
    for a in alphas:
        xs.append(xs[-1] + a * (M @ xs[-1] + b))
    return np.array(xs)


class TestPartition:
    def test_constant_steps(self):
        part = build_partition(np.ones(10), 2.5, 10)
        assert part.m(2.5) == 2
        assert part.T_n[1] == 3.0

    def test_harmonic_numbers(self):
        part = build_partition(Schedule(1.0, 1.0, 1.0), 1.0, 50)
        H = np.concatenate([[0.0], np.cumsum(1.0 / np.arange(1, 51))])
        np.testing.assert_allclose(part.t, H, rtol=1e-15)
        assert part.m(1.0) == _linear_scan_m(H, 1.0) == 1
        assert part.m(2.0) == _linear_scan_m(H, 2.0) == 3

    def test_m_nonpositive_is_zero(self):
        part = build_partition(Schedule(1, 1), 1.0, 20)
        assert part.m(0.0) == 0 and part.m(-3.0) == 0

    def test_beyond_horizon(self):
        part = build_partition(np.ones(5), 1.0, 5)
        assert part.m(5.0) == 5
        with pytest.raises(ValueError, match="horizon"):
            part.m(5.5)

    def test_bracketing_on_random_times(self, rng):
        sch = Schedule(0.7, 3.0, 0.8)
        part = build_partition(sch, 1.0, 5000)
        Ts = rng.uniform(0, part.horizon * 0.999, 1000)
        ms = part.m(Ts)
        assert np.all(part.t[ms] <= Ts)
        assert np.all(Ts < part.t[ms] + sch.alpha(ms))
        for T in Ts[:50]:
            assert part.m(T) == _linear_scan_m(part.t, T)

    @settings(max_examples=30, deadline=None)
    @given(B1=st.floats(0.1, 5), B2=st.floats(0.5, 50), beta=st.floats(0.55, 1.0), T=st.floats(0.05, 3.0))
    def test_segment_lengths(self, B1, B2, beta, T):
        sch = Schedule(B1, B2, beta)
        part = build_partition(sch, T, 3000)
        Tn = part.T_n
        gaps = np.diff(Tn)
        assert np.all(gaps >= T - 1e-12)
        upper = T + sch.alpha(part.m(Tn[:-1] + T))
        assert np.all(gaps <= upper + 1e-12)

    def test_window_sum_converges(self):
        part = build_partition(Schedule(1.0, 1.0, 1.0), 1.0, 300_000)
        n = 100_000
        for t1, t2 in [(-0.5, 0.5), (-1.0, 0.25), (0.0, 1.0)]:
            assert abs(part.window_sum(n, t1, t2) - (t2 - t1)) / (t2 - t1) < 0.01

    def test_invalid(self):
        with pytest.raises(ValueError):
            TimePartition(np.ones(3), 0.0)
        with pytest.raises(ValueError):
            TimePartition(np.array([1.0, -1.0]), 1.0)


class TestInterpolation:
    def _path(self):
        part = build_partition(Schedule(1.0, 2.0), 1.0, 40)
        xs = np.arange(41.0)[:, None] * np.array([[1.0, -1.0]])
        return InterpolatedPath(xs, part)

    def test_knots_and_right_continuity(self):
        path = self._path()
        t = path.partition.t
        np.testing.assert_array_equal(interpolate(path, 0.0), [0.0, -0.0])
        np.testing.assert_array_equal(interpolate(path, np.nextafter(t[1], 0)), path.iterates[0])
        np.testing.assert_array_equal(interpolate(path, t[1]), path.iterates[1])
        np.testing.assert_array_equal(interpolate(path, t), path.iterates)

    def test_random_times_against_scan(self, rng):
        path = self._path()
        for T in rng.uniform(0, path.horizon, 200):
            np.testing.assert_array_equal(path(T), path.iterates[_linear_scan_m(path.partition.t, T)])

    def test_beyond_horizon(self):
        path = self._path()
        with pytest.raises(ValueError, match="horizon"):
            interpolate(path, path.horizon + 1e-9)


class TestScaledSegment:
    def test_small_norm_is_unscaled(self):
        part = build_partition(np.full(30, 0.25), 1.0, 30)
        xs = np.full((31, 2), 0.5)
        seg = scaled_segment(InterpolatedPath(xs, part), 1)
        assert seg.r == 1.0
        np.testing.assert_array_equal(seg.values, xs[seg.indices])
        # T_1 = t(m(1) + 1) = t(5) = 1.25
        assert seg.start == 5 and len(seg.times) == 4

    def test_large_norm_normalised(self):
        part = build_partition(np.full(30, 0.25), 1.0, 30)
        xs = np.zeros((31, 2))
        xs[5] = [3.0, 4.0]
        seg = scaled_segment(InterpolatedPath(xs, part), 1)
        assert seg.r == 5.0
        assert np.linalg.norm(seg.values[0]) == pytest.approx(1.0)
        np.testing.assert_allclose(seg.unscaled(), xs[seg.indices])

    def test_incomplete_segment(self):
        part = build_partition(np.full(10, 0.3), 1.0, 10)
        path = InterpolatedPath(np.zeros((11, 1)), part)
        last = len(part.segment_starts) - 1
        with pytest.raises(ValueError):
            scaled_segment(path, last)
        with pytest.raises(ValueError):
            scaled_segment(path, last + 5)

    def test_recursion_in_scaled_coordinates(self):
        env = builtin_environment("random_offpolicy", seed=2)
        lam, sch, n, seed = 0.5, Schedule(1.0, 5.0), 400, 13
        cfg = LearnerConfig("gtd", lam, theta0=(8.0, -6.0, 4.0))
        states = simulate_reference(cfg, env.mdp, env.pi, env.mu, env.features, sch, n, seed)
        gen = np.random.Generator(np.random.PCG64(seed))
        s = _draw(_cumulative(env.mdp.initial_dist), gen.random())
        samples = []
        for _ in range(n):
            smp = sample_transition(env.mdp, env.mu, gen, s, env.pi, env.features)
            samples.append(smp)
            s = smp.s_next
        xs = np.array([st_.x for st_ in states])
        path = InterpolatedPath(xs, build_partition(sch, 1.0, n))
        for k in range(4):
            seg = scaled_segment(path, k)
            r = seg.r
            xhat = seg.values[0].copy()
            for j, i in enumerate(seg.indices[:-1]):
                e = states[i + 1].e
                # H_r(x, y) = H(r x, y) / r
                xhat = xhat + sch.alpha(i) * gtd_block_H(r * xhat, samples[i], e, env.mdp.gamma) / r
                np.testing.assert_allclose(xhat, seg.values[j + 1], atol=1e-10)


class TestSolver:
    def test_zero_field(self):
        sol = solve_ode(lambda x: np.zeros_like(x), np.array([1.0, 2.0]), np.linspace(0, 3, 7))
        np.testing.assert_array_equal(sol.values, np.tile([1.0, 2.0], (7, 1)))

    def test_scalar_decay(self):
        sol = solve_ode(lambda x: -x, np.array([1.0]), 1.0)
        assert abs(sol.values[-1, 0] - np.exp(-1.0)) < 1e-9

    @pytest.mark.parametrize("seed", range(4))
    def test_linear_field_against_expm(self, seed):
        rng = np.random.default_rng(seed)
        M = rng.standard_normal((5, 5)) - 2.0 * np.eye(5)
        c = rng.standard_normal(5)
        x0 = rng.standard_normal(5)
        grid = np.linspace(0, 4, 41)
        sol = solve_ode(LinearField(M, c), x0, grid, tol=1e-9)
        # affine flow: z(t) = e^{Mt} x0 + (int_0^t e^{Ms} ds) c via the augmented exponential
        aug = np.zeros((6, 6))
        aug[:5, :5] = M
        aug[:5, 5] = c
        for t, z in zip(grid, sol.values):
            Et = scipy.linalg.expm(aug * t)
            np.testing.assert_allclose(z, Et[:5, :5] @ x0 + Et[:5, 5], atol=1e-8)

    def test_gtd_field_against_expm(self):
        env = builtin_environment("random_offpolicy", seed=4)
        sys_ = gtd_expected_system(env.mdp, env.pi, env.mu, 0.5, env.features)
        field = LinearField(sys_.A_block, sys_.b_block)
        x0 = np.ones(6)
        xs = -np.linalg.solve(sys_.A_block, sys_.b_block)
        grid = np.linspace(0, 20, 11)
        sol = solve_ode(field, x0, grid)
        for t, z in zip(grid, sol.values):
            np.testing.assert_allclose(z, xs + scipy.linalg.expm(sys_.A_block * t) @ (x0 - xs), atol=1e-8)

    def test_dense_output_equals_separate_solves(self):
        field = LinearField(np.array([[-1.0, 3.0], [-3.0, -1.0]]))
        x0 = np.array([1.0, 0.0])
        dense = solve_ode(field, x0, np.linspace(0, 2, 21))
        for t, z in zip(dense.grid[1:], dense.values[1:]):
            single = solve_ode(field, x0, t)
            np.testing.assert_allclose(z, single.values[-1], atol=1e-8)

    def test_finite_time_blowup_underflows(self):
        with pytest.raises(OdeError):
            solve_ode(lambda x: x * x, np.array([1.0]), 2.0)

    def test_column_stacked_states(self):
        M = np.array([[-0.5, 0.0], [0.0, -2.0]])
        X0 = np.eye(2)
        sol = solve_ode(LinearField(M), X0, 1.0)
        np.testing.assert_allclose(sol.values[-1], np.diag(np.exp([-0.5, -2.0])), atol=1e-9)

    def test_bad_grid(self):
        with pytest.raises(ValueError):
            solve_ode(lambda x: x, np.ones(1), np.array([0.0, 1.0, 0.5]))


class TestScaledField:
    def test_identity_at_one(self):
        h = LinearField(np.eye(2), np.ones(2))
        assert scaled_field(h, 1) is h

    def test_linear_offset_scaling(self):
        M = np.array([[1.0, 2.0], [0.0, -1.0]])
        b = np.array([10.0, -20.0])
        hc = scaled_field(LinearField(M, b), 10)
        np.testing.assert_array_equal(hc.M, M)
        np.testing.assert_allclose(hc.c, b / 10)

    def test_infinity_sentinel(self):
        h_inf = scaled_field(LinearField(np.eye(2), np.ones(2)), AT_INFINITY)
        np.testing.assert_array_equal(h_inf(np.array([1.0, 2.0])), [1.0, 2.0])

    def test_c_below_one(self):
        with pytest.raises(ValueError, match=">= 1"):
            scaled_field(LinearField(np.eye(1)), 0.5)

    def test_gap_to_limit_on_unit_ball(self, rng):
        M = rng.standard_normal((3, 3))
        b = rng.standard_normal(3)
        h = LinearField(M, b)
        h_inf = scaled_field(h, AT_INFINITY)
        for c in (1.0, 4.0, 100.0):
            hc = scaled_field(h, c)
            pts = rng.standard_normal((200, 3))
            pts /= np.maximum(1.0, np.linalg.norm(pts, axis=1))[:, None]
            gap = max(np.linalg.norm(hc(x) - h_inf(x)) for x in pts)
            assert gap == pytest.approx(np.linalg.norm(b) / c, rel=1e-12)

    def test_generic_callable(self):
        h = lambda x: -x ** 3 + 1.0
        hc = scaled_field(h, 2.0)
        assert hc(np.array([1.0]))[0] == pytest.approx((-8.0 + 1.0) / 2.0)
        with pytest.raises(ValueError):
            scaled_field(h, AT_INFINITY)


class TestDiscretizationError:
    M = np.array([[-1.0, 0.5], [-0.5, -1.0]])
    b = np.array([1.0, 0.5])

    def _sup_errors(self, B1, n):
        # alpha -> alpha / 2 is B1 -> B1 / 2; n is chosen so both runs cover t >= 3.2
        sch = Schedule(B1, 100.0)
        xs = _euler_path(self.M, self.b, [4.0, -3.0], sch.alphas(n))
        path = InterpolatedPath(xs, build_partition(sch, 1.0, n))
        return tracking_errors(path, LinearField(self.M, self.b), segments=range(3))

    def test_first_point_is_exact(self):
        sch = Schedule(0.5, 10.0)
        xs = _euler_path(self.M, self.b, [4.0, -3.0], sch.alphas(500))
        path = InterpolatedPath(xs, build_partition(sch, 1.0, 500))
        seg, z = segment_ode(path, 0, LinearField(self.M, self.b))
        f = discretization_error(seg, z)
        assert np.all(f.values[0] == 0.0)

    def test_halving_the_steps_halves_the_error(self):
        coarse = self._sup_errors(1.0, 3000)
        fine = self._sup_errors(0.5, 70000)
        assert np.all(fine / coarse <= 0.6)

    @pytest.mark.parametrize("a", [0.01, 0.002])
    def test_first_order_in_constant_step(self, a):
        # constant steps isolate the Euler error: exactly first order
        sups = []
        for step in (a, a / 2):
            n = int(round(3.5 / step))
            xs = _euler_path(self.M, self.b, [4.0, -3.0], np.full(n, step))
            path = InterpolatedPath(xs, build_partition(np.full(n, step), 1.0, n))
            sups.append(tracking_errors(path, LinearField(self.M, self.b), segments=range(3)))
        ratio = sups[1] / sups[0]
        assert np.all((ratio > 0.45) & (ratio < 0.55))

    def test_grid_mismatch(self):
        sch = Schedule(0.5, 10.0)
        xs = _euler_path(self.M, self.b, [1.0, 1.0], sch.alphas(200))
        path = InterpolatedPath(xs, build_partition(sch, 1.0, 200))
        seg = scaled_segment(path, 0)
        z = solve_ode(LinearField(self.M, self.b), seg.values[0], seg.times[:-1])
        with pytest.raises(ValueError, match="grid"):
            discretization_error(seg, z)


class TestProbe:
    def test_decay(self):
        res = ode_at_infinity_probe(LinearField(-np.eye(3)), n_dirs=8, T_probe=3.0)
        assert res.verdict == "consistent"
        assert res.tau == pytest.approx(np.log(4.0), abs=1e-6)
        assert res.threshold == PROBE_THRESHOLD

    def test_growth(self):
        assert ode_at_infinity_probe(LinearField(np.eye(3)), T_probe=3.0).verdict == "inconsistent"

    def test_horizon_too_short(self):
        res = ode_at_infinity_probe(LinearField(-0.1 * np.eye(2)), T_probe=1.0)
        assert res.verdict == "inconclusive" and res.tau is None

    def test_generic_callable_needs_dim(self):
        with pytest.raises(ValueError, match="dim"):
            ode_at_infinity_probe(lambda x: -x)
        res = ode_at_infinity_probe(lambda x: -x ** 3 - x, dim=2, n_dirs=4, T_probe=3.0)
        assert res.verdict == "consistent"

    def test_gtd_limit_field(self):
        env = builtin_environment("random_offpolicy", seed=1)
        sys_ = gtd_expected_system(env.mdp, env.pi, env.mu, 0.0, env.features)
        h_inf = scaled_field(LinearField(sys_.A_block, sys_.b_block), AT_INFINITY)
        T = probe_horizon_estimate(sys_.A_block)
        res = ode_at_infinity_probe(h_inf, T_probe=T)
        assert res.verdict == "consistent"
        assert res.tau <= T
        assert res.to_dict()["verdict"] == "consistent"
