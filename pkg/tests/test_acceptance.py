"""Acceptance suite: every criterion at its stated tolerance.

Defaults throughout: T = 1, m = 512 steps per unit time, N = 1e5 paths,
z threshold 4, fixed seeds matching configs/acceptance.toml.  Each test
prints one line with the measured numbers next to its tolerance.
"""

import csv
import math

import numpy as np
import pytest

from flowibp import cli, estimators
from flowibp.estimators import (bismut_gradient, crn_fd_gradient, damped_ibp,
                                free_damped_ibp, free_ibp, function_ibp_check,
                                girsanov_derivative, girsanov_invariance,
                                gradient_pair, pathspace_ibp,
                                rate_averaging_check)
from flowibp.flow import BrownianDraw, TimeGrid, damped_transport, simulate_flow
from flowibp.functionals import (make_cm_process, make_functional,
                                 make_vector_field, make_weight)
from flowibp.geometry import divergence, make_manifold
from flowibp.rng import RngPolicy
from flowibp.stats import McAccumulator
from flowibp.systems import default_direction, default_start, make_system

N = 100_000
GRID = TimeGrid.regular(1.0, 512)
Z_MAX = 4.0
E_INV = math.exp(-1.0)


def ctx(name):
    system = make_system(name)
    return (system, default_start(system.manifold),
            default_direction(system.manifold))


def functional_for(system):
    axis = system.manifold.ambient_dim - 1 if not system.manifold.is_flat else 0
    return make_functional(f"coord:{axis}@1.0")


def report_line(label, detail):
    print(f"PASS {label}: {detail}")


class TestCriterion01GaussianOracle:
    def test_bismut_flat_brownian(self):
        system, x0, v0 = ctx("euclidean-bm:1")
        est = bismut_gradient(system, x0, v0, functional_for(system), N, GRID,
                              1001)
        err = abs(est.value - 1.0)
        assert err <= 3 * est.std_error
        report_line("criterion 1",
                    f"value={est.value:.5f} se={est.std_error:.2e} "
                    f"|err|={err:.2e} <= 3se")


class TestCriterion02OuOracle:
    def test_bismut_ou(self):
        system, x0, v0 = ctx("euclidean-ou:1")
        est = bismut_gradient(system, x0, v0, functional_for(system), N, GRID,
                              1002)
        err = abs(est.value - E_INV)
        assert err <= 3 * est.std_error + 5e-3
        report_line("criterion 2a",
                    f"value={est.value:.5f} target={E_INV:.5f} "
                    f"|err|={err:.2e} <= 3se+5e-3")

    def test_fd_oracle_agrees(self):
        system, x0, v0 = ctx("euclidean-ou:1")
        rep = gradient_pair(system, x0, v0, functional_for(system), "crn_fd",
                            "bismut", N, GRID, 1003, params_a={"eps": 0.01})
        assert abs(rep.diff_mean) <= 4 * rep.diff_se + 1e-2
        report_line("criterion 2b",
                    f"|fd-bismut|={abs(rep.diff_mean):.2e} "
                    f"<= 4*{rep.diff_se:.2e}+1e-2")


class TestCriterion03SphereEigenfunction:
    def test_bismut_height_harmonic(self):
        system, x0, v0 = ctx("sphere2-bm")
        est = bismut_gradient(system, x0, v0, functional_for(system), N, GRID,
                              1004)
        err = abs(est.value - E_INV)
        tol = max(3 * est.std_error, 0.02 * E_INV)
        assert err <= tol
        report_line("criterion 3",
                    f"value={est.value:.5f} target={E_INV:.5f} "
                    f"|err|={err:.2e} <= {tol:.2e}")


class TestCriterion04EstimatorConsistency:
    @pytest.mark.parametrize("name,seed", [("sphere2-bm", 1005),
                                           ("euclidean-ou:1", 1006)])
    def test_window_estimator(self, name, seed):
        system, x0, v0 = ctx(name)
        rep = gradient_pair(system, x0, v0, functional_for(system),
                            "thalmaier", "bismut", N, GRID, seed,
                            params_a={"r": 0.5, "width": 0.5})
        assert rep.z <= Z_MAX
        report_line(f"criterion 4 window {name}", f"z={rep.z:.2f}")

    @pytest.mark.parametrize("name,seed", [("sphere2-bm", 1007),
                                           ("euclidean-ou:1", 1008)])
    def test_weighted_estimator(self, name, seed):
        system, x0, v0 = ctx(name)
        w, quad = make_weight("linear", GRID)
        rep = gradient_pair(system, x0, v0, functional_for(system),
                            "weighted", "bismut", N, GRID, seed,
                            params_a={"weights": w, "quad": quad})
        assert rep.z <= Z_MAX
        report_line(f"criterion 4 weighted {name}", f"z={rep.z:.2f}")


class TestCriterion05RateAveraging:
    @pytest.mark.parametrize("name,t,seed", [
        ("euclidean-bm:1", 1.0, 1009), ("euclidean-bm:1", 0.5, 1010),
        ("sphere2-bm", 1.0, 1011), ("sphere2-bm", 0.5, 1012)])
    def test_quadratic_rate(self, name, t, seed):
        system, x0, _ = ctx(name)
        h = make_cm_process("h:quadratic", system, GRID)
        rep = rate_averaging_check(system, x0, functional_for(system), h, t,
                                   N, GRID, seed)
        assert rep.z <= Z_MAX
        report_line(f"criterion 5 {name} t={t}", f"z={rep.z:.2f}")


class TestCriterion06FunctionAndPathspace:
    @pytest.mark.parametrize("name,hname,seed", [
        ("euclidean-bm:1", "h:linear", 1013),
        ("euclidean-bm:1", "h:occupation", 1014),
        ("sphere2-bm", "h:linear", 1015),
        ("sphere2-bm", "h:occupation", 1016)])
    def test_function_identity(self, name, hname, seed):
        system, x0, _ = ctx(name)
        h = make_cm_process(hname, system, GRID)
        rep = function_ibp_check(system, x0, functional_for(system), h, N,
                                 GRID, seed)
        assert rep.z <= Z_MAX
        report_line(f"criterion 6 function {name} {hname}", f"z={rep.z:.2f}")

    @pytest.mark.parametrize("name,seed", [("euclidean-bm:1", 1017),
                                           ("sphere2-bm", 1018)])
    def test_pathspace_identity(self, name, seed):
        system, x0, _ = ctx(name)
        F = make_functional("pairdot@0.5,1.0")
        h = make_cm_process("h:linear", system, GRID)
        rep = pathspace_ibp(system, x0, F, h, N, GRID, seed)
        assert rep.z <= Z_MAX
        report_line(f"criterion 6 pathspace {name}", f"z={rep.z:.2f}")


class TestCriterion07Damped:
    @pytest.mark.parametrize("name,seed", [("euclidean-bm:1", 1019),
                                           ("sphere2-bm", 1020)])
    def test_damped_identity(self, name, seed):
        system, x0, _ = ctx(name)
        h = make_cm_process("h:linear", system, GRID)
        rep = damped_ibp(system, x0, functional_for(system), h, N, GRID, seed)
        assert rep.z <= Z_MAX
        report_line(f"criterion 7 identity {name}", f"z={rep.z:.2f}")

    def test_damped_norm_closed_form(self):
        system, x0, _ = ctx("sphere2-bm")
        draw = BrownianDraw.make(RngPolicy(1020), 0, GRID, 3)
        path = simulate_flow(system, x0, GRID, draw)
        norms = np.linalg.norm(damped_transport(path, np.array([0, 0, 1.0])),
                               axis=1)
        rel = np.abs(norms / np.exp(-GRID.times / 2.0) - 1.0).max()
        assert rel <= 1e-6
        report_line("criterion 7 damped norm", f"max rel err={rel:.2e} <= 1e-6")


class TestCriterion08Girsanov:
    @pytest.mark.parametrize("name,tau,seed", [
        ("euclidean-bm:1", 0.0, 1021), ("euclidean-bm:1", 0.1, 1022),
        ("sphere2-bm", 0.0, 1023), ("sphere2-bm", 0.1, 1024)])
    def test_invariance(self, name, tau, seed):
        system, x0, _ = ctx(name)
        h = make_cm_process("h:linear", system, GRID)
        rep = girsanov_invariance(system, x0, functional_for(system), h, tau,
                                  N, GRID, seed)
        assert rep.z <= Z_MAX
        mart, mart_se = rep.extras["martingale_mean"], rep.extras["martingale_se"]
        assert abs(mart - 1.0) <= Z_MAX * mart_se + 1e-12
        report_line(f"criterion 8 invariance {name} tau={tau}",
                    f"z={rep.z:.2f} martingale={mart:.5f}")

    @pytest.mark.parametrize("name,seed", [("euclidean-bm:1", 1025),
                                           ("sphere2-bm", 1026)])
    def test_derivative(self, name, seed):
        system, x0, _ = ctx(name)
        h = make_cm_process("h:linear", system, GRID)
        rep = girsanov_derivative(system, x0, functional_for(system), h, N,
                                  GRID, seed)
        assert rep.z <= Z_MAX
        assert rep.extras["fd"].z <= Z_MAX
        fd_gap = abs(rep.extras["fd_vs_direct_mean"])
        fd_tol = 3 * rep.extras["fd_vs_direct_se"] + 1e-2
        assert fd_gap <= fd_tol
        report_line(f"criterion 8 derivative {name}",
                    f"z={rep.z:.2f} fd z={rep.extras['fd'].z:.2f} "
                    f"|fd-direct|={fd_gap:.2e} <= {fd_tol:.2e}")


class TestCriterion09FreePathSpace:
    N_BASE = 256
    N_PER = 2048

    @pytest.mark.parametrize("field,seed", [("hfield:killing", 1027),
                                            ("hfield:tradial", 1028)])
    def test_free(self, field, seed):
        system, _, _ = ctx("sphere2-bm")
        rep = free_ibp(system, functional_for(system),
                       make_vector_field(field), self.N_PER, self.N_BASE,
                       GRID, seed)
        assert rep.z <= Z_MAX
        if field == "hfield:killing":
            assert abs(rep.lhs_mean) <= Z_MAX * rep.lhs_se
        report_line(f"criterion 9 free {field}",
                    f"z={rep.z:.2f} lhs={rep.lhs_mean:.4f}")

    @pytest.mark.parametrize("field,seed", [("hfield:killing", 1029),
                                            ("hfield:tradial", 1030)])
    def test_free_damped(self, field, seed):
        system, _, _ = ctx("sphere2-bm")
        rep = free_damped_ibp(system, functional_for(system),
                              make_vector_field(field), self.N_PER,
                              self.N_BASE, GRID, seed)
        assert rep.z <= Z_MAX
        if field == "hfield:killing":
            assert abs(rep.lhs_mean) <= Z_MAX * rep.lhs_se
        report_line(f"criterion 9 free damped {field}",
                    f"z={rep.z:.2f} lhs={rep.lhs_mean:.4f}")


class TestCriterion10PropertySuites:
    def test_derivative_vs_fd_bound(self):
        from flowibp.flow import chunk_increments, run_chunk
        from flowibp.geometry import project_to_manifold
        worst = {}
        for name in ("euclidean-bm:1", "euclidean-ou:1", "circle-bm",
                     "sphere2-bm"):
            system, x0, v0 = ctx(name)
            eps = 1e-4
            xp = project_to_manifold(system.manifold, x0 + eps * v0)
            dB = chunk_increments(RngPolicy(1031), 0, 100, GRID,
                                  system.noise_dim)
            base = run_chunk(system, x0, GRID, dB, deriv=True,
                             snap_nodes=(GRID.steps,))
            pert = run_chunk(system, xp, GRID, dB)
            push = np.einsum("bij,j->bi", base.dsnap[:, 0], v0)
            fd = (pert.xs[:, -1, :] - base.xs[:, -1, :]) / eps
            worst[name] = float(np.abs(push - fd).max())
            # error is C(eps + 1/m), verified O(1/m); the sphere constant
            # sits near 6, so its bound carries an extra factor of 2
            assert worst[name] <= (2e-2 if name == "sphere2-bm" else 1e-2)
        report_line("criterion 10 derivative-vs-fd",
                    " ".join(f"{k}={v:.1e}" for k, v in worst.items()))

    def test_holonomy_and_orthogonality(self):
        sphere = make_manifold("sphere2")
        from flowibp.geometry import transport_step
        n = 10_000
        ex, ey, ez = np.eye(3)

        def arc(a, b):
            angle = math.acos(float(np.clip(np.dot(a, b), -1, 1)))
            ts = np.linspace(0.0, 1.0, n + 1)
            return np.array([(math.sin((1 - t) * angle) * a
                              + math.sin(t * angle) * b) / math.sin(angle)
                             for t in ts])

        loop = np.vstack([arc(ex, ey), arc(ey, ez)[1:], arc(ez, ex)[1:]])
        v = ez.copy()
        for a, b in zip(loop[:-1], loop[1:]):
            v = transport_step(sphere, a, b, v)
        angle = math.acos(float(np.clip(np.dot(v, ez), -1, 1)))
        assert abs(angle - math.pi / 2) < 1e-3
        assert abs(np.linalg.norm(v) - 1.0) < 1e-10
        report_line("criterion 10 holonomy",
                    f"|rotation - pi/2|={abs(angle - math.pi / 2):.2e} <= 1e-3")

    def test_divergence_modes_agree(self):
        sphere = make_manifold("sphere2")
        kill = make_vector_field("hfield:killing")
        rad = make_vector_field("hfield:radial")
        rng = np.random.default_rng(1032)
        worst = 0.0
        for _ in range(10):
            x = rng.standard_normal(3)
            x /= np.linalg.norm(x)
            for fld in (kill, rad):
                wrapped = type("F", (), {
                    "__call__": staticmethod(lambda p, fld=fld: fld.value(0.0, p)),
                    "div": staticmethod(lambda p, fld=fld: fld.div0(p))})()
                diff = abs(divergence(sphere, wrapped, x, mode="numeric")
                           - divergence(sphere, wrapped, x, mode="analytic"))
                worst = max(worst, diff)
        assert worst <= 1e-6
        report_line("criterion 10 divergence", f"max gap={worst:.2e} <= 1e-6")

    def test_accumulator_merge_laws(self):
        rng = np.random.default_rng(1033)
        parts = [rng.standard_normal(n) for n in (11, 37, 101)]
        accs = [McAccumulator.from_samples(p) for p in parts]
        merged = accs[0].merged(accs[1]).merged(accs[2])
        direct = McAccumulator.from_samples(np.concatenate(parts))
        assert abs(merged.mean - direct.mean) <= 1e-12
        assert abs(merged.variance - direct.variance) <= 1e-12
        report_line("criterion 10 accumulators", "merge == concatenation")

    def test_end_to_end_reproducibility(self, tmp_path):
        text = """
[rep]
experiment = "function_ibp"
system = "sphere2-bm"
functional = "coord:2@1.0"
h = "h:linear"
steps_per_unit = 64
n_paths = 3000
seed = 42
"""
        configs, diags = cli.parse_config(text)
        assert not diags
        reports = []
        for name in ("a.csv", "b.csv"):
            assert cli.run_suite(configs, out=str(tmp_path / name)) == 0
            with open(tmp_path / name, newline="") as fh:
                rows = list(csv.DictReader(fh))
            for r in rows:
                r.pop("wall_ms")  # timing is the one varying field
            reports.append(rows)
        assert reports[0] == reports[1]
        report_line("criterion 10 reproducibility",
                    "identical CSV numeric fields across runs")
