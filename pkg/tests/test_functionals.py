"""Cameron-Martin processes, cylindrical functionals, and their pairings."""

import math

import numpy as np
import pytest

from flowibp.errors import GridMismatch
from flowibp.flow import BrownianDraw, TimeGrid, simulate_flow
from flowibp.functionals import (DeterministicCm, OccupationCm, cm_eval,
                                 eval_derivative, eval_functional,
                                 ito_divergence, make_cm_process,
                                 make_functional, make_vector_field,
                                 make_weight, pushforward_values,
                                 window_weights)
from flowibp.geometry import project_to_manifold
from flowibp.rng import RngPolicy
from flowibp.systems import default_start, make_system

POLICY = RngPolicy(515)


def sphere_path(seed_index=0, steps=256):
    system = make_system("sphere2-bm")
    grid = TimeGrid.regular(1.0, steps)
    draw = BrownianDraw.make(POLICY, seed_index, grid, 3)
    return system, grid, simulate_flow(system, default_start(system.manifold),
                                       grid, draw)


def euclid_path(seed_index=0, steps=256, name="euclidean-bm:1"):
    system = make_system(name)
    grid = TimeGrid.regular(1.0, steps)
    draw = BrownianDraw.make(POLICY, seed_index, grid, system.noise_dim)
    return system, grid, simulate_flow(system, default_start(system.manifold),
                                       grid, draw)


class TestCmEval:
    def test_linear_interpolation(self):
        v = np.array([2.0, 0.0])
        h = DeterministicCm(np.array([0.0, 1.0]), np.stack([np.zeros(2), v]))
        times = np.linspace(0, 1, 5)
        value, rate = cm_eval(h, np.zeros((5, 2)), times, 2)
        assert np.allclose(value, v / 2)
        assert np.allclose(rate, v)

    def test_zero_process(self):
        system, grid, path = sphere_path()
        h = make_cm_process("h:zero", system, grid)
        value, rate = cm_eval(h, path.points, grid.times, 7)
        assert np.array_equal(value, np.zeros(3))
        assert np.array_equal(rate, np.zeros(3))

    def test_quadratic_rates_are_left_slopes(self):
        system, grid, path = euclid_path(steps=8)
        h = make_cm_process("h:quadratic", system, grid)
        times = grid.times
        for k in range(1, 8):
            _, rate = cm_eval(h, path.points, times, k)
            expect = (times[k] ** 2 - times[k - 1] ** 2) / grid.dt
            assert abs(rate[0] - expect) < 1e-14

    def test_occupation_accumulation_oracle(self):
        system, grid, path = sphere_path(steps=64)
        h = OccupationCm(np.array([0.0, 0.0, 1.0]))
        k = 40
        value, rate = cm_eval(h, path.points, grid.times, k)
        occ = sum(grid.dt for j in range(k) if path.points[j, 0] > 0)
        assert np.allclose(value, occ * h.direction, atol=1e-15)
        expect_ind = 1.0 if path.points[k, 0] > 0 else 0.0
        assert np.allclose(rate, expect_ind * h.direction)

    def test_adapted_rule_ignores_future(self):
        system = make_system("sphere2-bm")
        grid = TimeGrid.regular(1.0, 32)
        base = BrownianDraw.make(POLICY, 1, grid, 3)
        k = 16
        tampered = base.increments.copy()
        tampered[k:] = -tampered[k:]  # permute the future
        p1 = simulate_flow(system, default_start(system.manifold), grid, base)
        p2 = simulate_flow(system, default_start(system.manifold), grid,
                           BrownianDraw(POLICY, 1, tampered))
        h = OccupationCm(np.array([0.0, 0.0, 1.0]))
        v1, r1 = cm_eval(h, p1.points, grid.times, k)
        v2, r2 = cm_eval(h, p2.points, grid.times, k)
        assert np.array_equal(v1, v2)
        assert np.array_equal(r1, r2)

    def test_out_of_grid(self):
        system, grid, path = sphere_path(steps=8)
        h = make_cm_process("h:linear", system, grid)
        with pytest.raises(GridMismatch):
            cm_eval(h, path.points, grid.times, 9)


class TestEvalFunctional:
    def test_coordinate_readout(self):
        system, grid, path = euclid_path(steps=64)
        F = make_functional("coord:0@1.0")
        got = eval_functional(F, path)
        assert abs(got - path.points[-1, 0]) < 1e-15

    def test_constant_surrogate(self):
        # bump at the start point of the sphere path is a known constant
        system, grid, path = sphere_path(steps=16)
        F = make_functional("pairdot@0.0,0.0")
        assert abs(eval_functional(F, path) - 1.0) < 1e-12

    def test_pairdot_is_cosine(self):
        system, grid, path = sphere_path(steps=64)
        F = make_functional("pairdot@0.5,1.0")
        got = eval_functional(F, path)
        a, b = path.points[32], path.points[64]
        cosang = np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b))
        assert abs(got - cosang) < 1e-12

    def test_unmarked_time(self):
        system, grid, path = sphere_path(steps=64)
        F = make_functional("coord:0@0.3")
        with pytest.raises(GridMismatch):
            eval_functional(F, path)


class TestEvalDerivative:
    def test_zero_values(self):
        system, grid, path = sphere_path(steps=16)
        F = make_functional("pairdot@0.5,1.0")
        assert eval_derivative(F, path, [np.zeros(3), np.zeros(3)]) == 0.0

    def test_height_at_pole_kills_tangents(self):
        system, grid, path = sphere_path(steps=16)
        F = make_functional("coord:2@1.0")
        x = path.points[-1]
        # rotate the path's endpoint frame: any tangent at the pole has v_z = 0
        pole = np.array([0.0, 0.0, 1.0])
        v = np.array([0.4, -0.1, 0.0])
        grads = F.grad((pole[None, :],))[0][0]
        assert abs(np.dot(grads, v)) == 0.0

    def test_matches_geodesic_finite_difference(self):
        rng = np.random.default_rng(3)
        system, grid, path = sphere_path(steps=64)
        step = 1e-4
        for name in ("coord:2@1.0", "bump:2@1.0", "pairdot@0.5,1.0"):
            F = make_functional(name)
            idxs = [grid.node_index(t) for t in F.times]
            vs = [project_to_manifold(system.manifold, path.points[i]) * 0.0
                  + rng.standard_normal(3) for i in idxs]
            vs = [v - np.dot(v, path.points[i]) * path.points[i]
                  for v, i in zip(vs, idxs)]
            direct = eval_derivative(F, path, vs)
            plus, minus = [], []
            for s, sign in ((step, +1), (-step, -1)):
                pts = tuple(project_to_manifold(system.manifold,
                                                path.points[i] + s * v)
                            for v, i in zip(vs, idxs))
                (plus if sign > 0 else minus).append(float(F.fn(pts)))
            fd = (plus[0] - minus[0]) / (2 * step)
            assert abs(direct - fd) < 1e-5

    def test_linearity(self):
        system, grid, path = sphere_path(steps=32)
        F = make_functional("pairdot@0.5,1.0")
        rng = np.random.default_rng(4)
        v = [rng.standard_normal(3) for _ in range(2)]
        w = [rng.standard_normal(3) for _ in range(2)]
        lhs = eval_derivative(F, path, [2 * a + b for a, b in zip(v, w)])
        rhs = 2 * eval_derivative(F, path, v) + eval_derivative(F, path, w)
        assert abs(lhs - rhs) < 1e-12


class TestPushforwardAndDivergence:
    def test_zero_process_gives_zeros(self):
        system, grid, path = sphere_path(steps=32)
        h = make_cm_process("h:zero", system, grid)
        vals = pushforward_values(path, h, [0.5, 1.0])
        assert all(np.array_equal(v, np.zeros(3)) for v in vals)
        assert ito_divergence(path, h) == 0.0

    def test_flat_pushforward_is_identity(self):
        system, grid, path = euclid_path(steps=64)
        h = make_cm_process("h:linear", system, grid)
        vals = pushforward_values(path, h, [0.5, 1.0])
        assert np.allclose(vals[0], h.value(0.5), atol=1e-14)
        assert np.allclose(vals[1], h.value(1.0), atol=1e-14)

    def test_ou_pushforward_decays(self):
        system, grid, path = euclid_path(name="euclidean-ou:1", steps=512)
        h = make_cm_process("h:linear", system, grid)
        vals = pushforward_values(path, h, [0.5, 1.0])
        for t, v in zip((0.5, 1.0), vals):
            expect = math.exp(-t) * h.value(t)
            assert abs(v[0] - expect[0]) <= 3e-3 * abs(expect[0])

    def test_flat_linear_telescoping(self):
        system, grid, path = euclid_path(steps=128)
        h = DeterministicCm(np.array([0.0, 1.0]),
                            np.array([[0.0], [1.0]]))  # h_s = s / T, T = 1
        got = ito_divergence(path, h)
        expect = path.draw.increments.sum() / grid.horizon
        assert abs(got - expect) < 1e-13

    def test_linear_in_h(self):
        system, grid, path = sphere_path(steps=64)
        ha = make_cm_process("h:linear", system, grid)
        hb = make_cm_process("h:quadratic", system, grid)
        da, db = ito_divergence(path, ha), ito_divergence(path, hb)
        hc = DeterministicCm(hb.knot_times,
                             2.0 * np.stack([ha.value(float(t))
                                             for t in hb.knot_times])
                             + 3.0 * hb.knot_values)
        dc = ito_divergence(path, hc)
        assert abs(dc - (2.0 * da + 3.0 * db)) <= 1e-12 * max(abs(dc), 1.0)


class TestRegistries:
    def test_vector_fields(self):
        x = project_to_manifold(make_system("sphere2-bm").manifold,
                                np.array([0.3, -0.5, 0.8]))
        killing = make_vector_field("hfield:killing")
        radial = make_vector_field("hfield:radial")
        tradial = make_vector_field("hfield:tradial")
        for fld in (killing, radial, tradial):
            v = fld.value(0.7, x)
            assert abs(np.dot(v, x)) < 1e-12  # tangent
        assert killing.div0(x) == 0.0
        assert abs(radial.div0(x) + 2.0 * x[2]) < 1e-15
        assert tradial.div0(x) == 0.0
        assert np.allclose(tradial.value(0.5, x), 0.5 * radial.value(0.0, x))
        assert np.allclose(tradial.rate(0.5, x), radial.value(0.0, x))

    def test_weights(self):
        grid = TimeGrid.regular(1.0, 512)
        w, quad = make_weight("const", grid)
        assert quad == 1.0 and np.all(w == 1.0)
        w, quad = make_weight("linear", grid)
        assert abs(quad - 0.5) < 1e-15
        w, quad = make_weight("window:0.25,0.5", grid)
        assert quad == 0.5
        assert np.array_equal(w, window_weights(grid, 0.25, 0.5))

    def test_unknown_names(self):
        grid = TimeGrid.regular(1.0, 8)
        system = make_system("sphere2-bm")
        with pytest.raises(ValueError):
            make_functional("nope:0@1.0")
        with pytest.raises(ValueError):
            make_cm_process("h:nope", system, grid)
        with pytest.raises(ValueError):
            make_vector_field("hfield:nope")
        with pytest.raises(ValueError):
            make_weight("nope", grid)
