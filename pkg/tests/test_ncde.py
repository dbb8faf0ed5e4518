import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.interpolate import CubicSpline

from irrcast import autodiff as ad
from irrcast.autodiff import Tensor, parameter, reshape
from irrcast.data import window_time_features
from irrcast.embeddings import PEContext
from irrcast.errors import NonFiniteState, NonMonotonicKnots, ParseError, TooFewKnots
from irrcast.ncde import (
    NCDEEmbedding,
    NCDEParams,
    PETable,
    cde_solve,
    load_table,
    natural_cubic_spline,
    ncde_pe_forward,
    pe_table_build,
    pe_table_lookup,
    save_table,
    spline_derivative,
    spline_eval,
    spline_second_derivative,
    time_control_path,
)


def random_knots(rng, n=None, channels=2):
    n = n or int(rng.integers(2, 12))
    t = np.cumsum(rng.uniform(0.1, 2.0, n)) - 1.0
    return t, rng.normal(size=(n, channels))


def linear_control():
    return natural_cubic_spline(np.array([0.0, 1.0]), np.array([[0.0], [1.0]]))


class TestSpline:
    def test_two_knots_linear(self):
        path = natural_cubic_spline([0.0, 2.0], [[1.0], [5.0]])
        np.testing.assert_allclose(spline_eval(path, np.array([0.5, 1.7]))[:, 0], [2.0, 4.4], atol=1e-12)

    def test_linear_data_reproduced(self, rng):
        t = np.sort(rng.uniform(0, 10, 9))
        path = natural_cubic_spline(t, 3.0 * t - 1.0)
        mids = 0.5 * (t[1:] + t[:-1])
        np.testing.assert_allclose(spline_eval(path, mids)[:, 0], 3.0 * mids - 1.0, atol=1e-10)
        np.testing.assert_allclose(spline_derivative(path, mids)[:, 0], 3.0, atol=1e-10)

    def test_three_point_hand_value(self):
        # interior second derivative solves 4*M1 = 6*(0 - 2 + 0)  ->  M1 = -3
        path = natural_cubic_spline([0.0, 1.0, 2.0], [0.0, 1.0, 0.0])
        assert spline_eval(path, 0.5)[0] == pytest.approx(0.6875, abs=1e-12)

    def test_matches_reference_natural_spline(self, rng):
        for _ in range(20):
            t, y = random_knots(rng, channels=3)
            path = natural_cubic_spline(t, y)
            ref = CubicSpline(t, y, bc_type="natural")
            q = rng.uniform(t[0], t[-1], 30)
            np.testing.assert_allclose(spline_eval(path, q), ref(q), atol=1e-10)
            np.testing.assert_allclose(spline_derivative(path, q), ref(q, 1), atol=1e-9)

    def test_structure_on_random_knot_sets(self, rng):
        for _ in range(100):
            t, y = random_knots(rng)
            path = natural_cubic_spline(t, y)
            np.testing.assert_allclose(spline_eval(path, t), y, atol=1e-10)
            if t.size > 2:
                left = spline_second_derivative(path, t[1:-1] - 1e-12)
                right = spline_second_derivative(path, t[1:-1] + 1e-12)
                assert np.max(np.abs(left - right)) < 1e-8
            assert np.max(np.abs(spline_second_derivative(path, t[[0, -1]]))) < 1e-8

    def test_linear_extrapolation(self, rng):
        t, y = random_knots(rng, n=6)
        path = natural_cubic_spline(t, y)
        slope_end = spline_derivative(path, t[-1])
        np.testing.assert_allclose(spline_eval(path, t[-1] + 2.5), y[-1] + 2.5 * slope_end, atol=1e-10)
        slope_start = spline_derivative(path, t[0])
        np.testing.assert_allclose(spline_eval(path, t[0] - 1.0), y[0] - slope_start, atol=1e-10)

    @given(st.integers(0, 10_000))
    @settings(max_examples=30, deadline=None)
    def test_derivative_matches_central_difference(self, seed):
        rng = np.random.default_rng(seed)
        t, y = random_knots(rng, n=7)
        path = natural_cubic_spline(t, y)
        q = rng.uniform(t[0], t[-1], 5)
        h = 1e-6
        central = (spline_eval(path, q + h) - spline_eval(path, q - h)) / (2 * h)
        np.testing.assert_allclose(spline_derivative(path, q), central, atol=1e-6)

    def test_batched_equals_unbatched(self, rng):
        t = np.sort(rng.uniform(0, 1, (3, 6)), axis=-1)
        y = rng.normal(size=(3, 6, 2))
        batched = natural_cubic_spline(t, y)
        q = rng.uniform(0, 1, 3)
        out = spline_eval(batched, q)
        for i in range(3):
            np.testing.assert_allclose(out[i], spline_eval(natural_cubic_spline(t[i], y[i]), q[i]), atol=1e-12)

    def test_errors(self):
        with pytest.raises(TooFewKnots):
            natural_cubic_spline([0.0], [1.0])
        with pytest.raises(NonMonotonicKnots):
            natural_cubic_spline([0.0, 1.0, 1.0], [1.0, 2.0, 3.0])


class TestSolver:
    def test_zero_field_keeps_state(self, rng):
        path = natural_cubic_spline(np.linspace(0, 1, 5), rng.normal(size=(5, 3)))
        p0 = rng.normal(size=4)
        out = cde_solve(lambda p: Tensor(np.zeros(p.shape + (3,))), path, p0, np.linspace(0, 1, 5))
        np.testing.assert_array_equal(out.data, np.tile(p0, (5, 1)))

    def test_constant_integrand_exact(self):
        path = linear_control()
        column = np.array([[1.0], [-2.0]])
        out = cde_solve(lambda p: Tensor(column), path, np.zeros(2), np.array([0.25, 1.0]), substeps=1)
        np.testing.assert_allclose(out.data, [[0.25, -0.5], [1.0, -2.0]], atol=1e-14)

    @staticmethod
    def exp_error(substeps):
        path = linear_control()
        p = cde_solve(lambda s: reshape(s, (1, 1)), path, np.array([1.0]), np.array([1.0]), substeps)
        return abs(p.data[0, 0] - math.e)

    def test_rk4_order(self):
        errors = [self.exp_error(n) for n in (10, 20, 40)]
        orders = [math.log2(a / b) for a, b in zip(errors, errors[1:])]
        assert min(orders) >= 3.5

    def test_divergence_guard(self):
        path = linear_control()
        with pytest.raises(NonFiniteState):
            cde_solve(lambda s: reshape(s * s * 50.0, (1, 1)), path, np.array([1.0]), np.array([1.0]), 4)

    def test_gradients_through_solver(self, rng):
        params = NCDEParams(3, rng, channels=2, field_hidden=5)
        t = np.linspace(0, 1, 4)
        path = natural_cubic_spline(t, rng.normal(size=(4, 2)))
        w = rng.normal(size=(4, 3))
        p0 = parameter(rng.normal(size=3))

        def loss(_x):
            return (cde_solve(params, path, p0, t, substeps=2) * w).sum()

        for target in [p0, params.field_w1, params.field_b2]:
            coords = rng.choice(target.size, size=min(target.size, 8), replace=False)
            assert ad.finite_difference_check(loss, target, coords=coords) < 1e-3

    def test_query_before_start_rejected(self):
        with pytest.raises(ValueError):
            cde_solve(lambda p: Tensor(np.zeros((1, 1))), linear_control(), np.zeros(1), np.array([-0.5]))


class TestForward:
    def test_zero_field_rows_equal_initial_state(self, rng):
        params = NCDEParams(4, rng, field_hidden=6)
        params.field_w2.data[:] = 0.0
        times = np.linspace(0, 1, 5)
        feats = rng.uniform(-0.5, 0.5, (5, 7))
        out = ncde_pe_forward(params, times, feats).data
        np.testing.assert_allclose(out, np.tile(params.initial_state(feats[0]).data, (5, 1)), atol=1e-14)

    def test_row_count_and_batch(self, irregular_windows, rng):
        params = NCDEParams(6, rng, field_hidden=8)
        ctx = PEContext.from_windows(irregular_windows[:2], 3600.0)
        out = ncde_pe_forward(params, ctx.rel_time, ctx.features)
        assert out.shape == (2, 24, 6)

    def test_substep_convergence_on_smooth_window(self, rng):
        params = NCDEParams(6, rng, field_hidden=8)
        # hourly stamps within one morning: every calendar channel is linear or constant
        stamps = 1467331200.0 + 3600.0 * np.arange(1.0, 12.0)
        feats = window_time_features(stamps, stamps[0], stamps[-1])
        a = ncde_pe_forward(params, feats[:, 0], feats, substeps=4).data
        b = ncde_pe_forward(params, feats[:, 0], feats, substeps=8).data
        assert np.max(np.abs(a - b)) < 1e-6

    def test_substep_refinement_is_fourth_order(self, irregular_windows, rng):
        params = NCDEParams(6, rng, field_hidden=8)
        ctx = PEContext.from_windows(irregular_windows[:1], 3600.0)
        outs = [ncde_pe_forward(params, ctx.rel_time, ctx.features, substeps=k).data for k in (2, 4, 8, 16)]
        gaps = [np.max(np.abs(a - b)) for a, b in zip(outs, outs[1:])]
        assert gaps[0] / gaps[1] > 8 and gaps[1] / gaps[2] > 8

    def test_too_few_knots(self, rng):
        with pytest.raises(TooFewKnots):
            ncde_pe_forward(NCDEParams(2, rng), np.array([0.0]), np.zeros((1, 7)))


class TestTable:
    @pytest.fixture
    def params(self, rng):
        return NCDEParams(5, rng, field_hidden=8)

    def test_grid_matches_direct_solve(self, params, rng):
        ref = rng.uniform(-0.5, 0.5, 7)
        table = pe_table_build(params, (0.0, 1.0), 0.05, reference=ref)
        feats = spline_eval(time_control_path((0.0, 1.0), 7, ref), table.grid_times)
        direct = ncde_pe_forward(params, table.grid_times, feats).data
        assert np.max(np.abs(direct - table.grid_values)) < 1e-8

    def test_quartering_resolution(self, params, rng):
        span = (0.0, 1.0)
        ref = rng.uniform(-0.5, 0.5, 7)
        fine_grid = np.linspace(0.0, 1.0, 401)
        path = time_control_path(span, 7, ref)
        fine = cde_solve(params, path, params.initial_state(spline_eval(path, 0.0)), fine_grid, 4).data

        def mid_error(res):
            table = pe_table_build(params, span, res, reference=ref)
            mids = table.grid_times[:-1] + res / 2
            truth = fine[np.rint(mids * 400).astype(int)]
            return np.max(np.abs(pe_table_lookup(table, mids) - truth))

        assert mid_error(0.1) / mid_error(0.025) >= 8.0

    def test_grid_count(self, params):
        a = pe_table_build(params, (0.0, 1.0), 0.1)
        b = pe_table_build(params, (0.0, 1.0), 0.05)
        assert abs(b.grid_times.size - 2 * a.grid_times.size) <= 1
        np.testing.assert_allclose(np.diff(b.grid_times), 0.05, atol=1e-15)

    def test_zero_span(self, params):
        assert pe_table_build(params, (0.3, 0.3), 0.1).grid_values.shape == (1, 5)

    def test_lookup_rules(self):
        table = PETable(np.array([0.0, 1.0, 2.0]), np.array([[0.0], [2.0], [6.0]]), 1.0)
        assert pe_table_lookup(table, 1.0)[0] == 2.0
        assert pe_table_lookup(table, 1.5)[0] == 4.0
        assert pe_table_lookup(table, -3.0)[0] == 0.0
        assert pe_table_lookup(table, 9.0)[0] == 6.0

    def test_persistence_round_trip(self, params, tmp_path):
        table = pe_table_build(params, (0.0, 1.0), 0.1)
        path = tmp_path / "table.txt"
        save_table(table, path)
        assert path.read_text().startswith("ctlpe-petable v1 0.10000000000000001 0 1 5\n")
        back = load_table(path)
        np.testing.assert_array_equal(back.grid_values, table.grid_values)
        np.testing.assert_array_equal(back.grid_times, table.grid_times)

    def test_bad_table_file(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("something else\n")
        with pytest.raises(ParseError):
            load_table(path)


class TestEmbedding:
    def test_freeze_switches_to_table(self, irregular_windows, rng):
        pe = NCDEEmbedding(6, rng, field_hidden=8)
        assert len(pe.parameters()) == 6
        ctx = PEContext.from_windows(irregular_windows[:2], 3600.0)
        pe.freeze(resolution=0.01)
        assert pe.frozen and pe.parameters() == []
        out = pe(ctx).data
        np.testing.assert_allclose(out, pe_table_lookup(pe.table, ctx.rel_time))

    def test_embed_times_is_nonconstant(self, rng):
        pe = NCDEEmbedding(6, rng, field_hidden=8)
        rows = pe.embed_times(np.array([0.0, 0.5, 1.0]))
        assert np.linalg.norm(rows[2] - rows[0]) > 1e-6

    def test_embed_times_rejects_negative(self, rng):
        with pytest.raises(ValueError):
            NCDEEmbedding(4, rng).embed_times(np.array([-1.0, 0.0, 1.0]))
