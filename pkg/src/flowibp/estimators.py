"""Paired Monte Carlo estimators for the gradient and IBP identities.

Every identity is tested on common random numbers: both sides are computed
path by path from the same Brownian draws and the report carries the paired
difference statistics, so the z-score reflects the per-path spread of
lhs - rhs rather than two independent Monte Carlo errors.

Chunking is fixed (independent of thread count) and chunk accumulators are
merged in index order, which makes every estimate bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import geometry
from .errors import (BadWindow, DegenerateWeight, GridMismatch,
                     NotGradientSystem)
from .flow import (TimeGrid, chunk_increments, run_chunk, variation_rate_table,
                   variation_table)
from .functionals import CylFunctional, VectorFieldProcess, window_weights
from .rng import RngPolicy
from .stats import McAccumulator, paired_z
from .systems import SdeSystem

CHUNK_PATHS = 8192
CHUNK_PATHS_HEAVY = 4096

# Testing hook: scales the rhs samples of every identity check so the
# harness's failure path can be exercised deliberately.
DEBUG_RHS_SCALE = 1.0


@dataclass(frozen=True)
class GradientEstimate:
    value: float
    std_error: float
    n_paths: int
    estimator_kind: str


@dataclass(frozen=True)
class IbpReport:
    lhs_mean: float
    lhs_se: float
    rhs_mean: float
    rhs_se: float
    diff_mean: float
    diff_se: float
    z: float
    n_paths: int
    extras: dict = field(default_factory=dict)


def _policy(seed) -> RngPolicy:
    return seed if isinstance(seed, RngPolicy) else RngPolicy(int(seed))


def _chunk_ranges(n: int, size: int):
    lo = 0
    while lo < n:
        yield lo, min(lo + size, n)
        lo += size


def _paired_report(sample_fn, n_paths: int, chunk_size: int,
                   extras: dict | None = None) -> IbpReport:
    lhs_acc = McAccumulator()
    rhs_acc = McAccumulator()
    diff_acc = McAccumulator()
    for lo, hi in _chunk_ranges(n_paths, chunk_size):
        lhs, rhs = sample_fn(lo, hi)
        if DEBUG_RHS_SCALE != 1.0:
            rhs = rhs * DEBUG_RHS_SCALE
        lhs_acc = lhs_acc.merged(McAccumulator.from_samples(lhs))
        rhs_acc = rhs_acc.merged(McAccumulator.from_samples(rhs))
        diff_acc = diff_acc.merged(McAccumulator.from_samples(lhs - rhs))
    return IbpReport(lhs_acc.mean, lhs_acc.std_error,
                     rhs_acc.mean, rhs_acc.std_error,
                     diff_acc.mean, diff_acc.std_error,
                     paired_z(diff_acc), n_paths,
                     dict(extras or {}))


def _gradient_estimate(sample_fn, n_paths: int, chunk_size: int,
                       kind: str) -> GradientEstimate:
    acc = McAccumulator()
    for lo, hi in _chunk_ranges(n_paths, chunk_size):
        acc = acc.merged(McAccumulator.from_samples(sample_fn(lo, hi)))
    return GradientEstimate(acc.mean, acc.std_error, n_paths, kind)


def _endpoint_functional(F: CylFunctional, grid: TimeGrid) -> int:
    if len(F.times) != 1:
        raise ValueError(f"{F.name}: gradient estimators take a single-time functional")
    return grid.node_index(F.times[0])


def _f_at_nodes(F: CylFunctional, xs: np.ndarray, idxs) -> np.ndarray:
    return F.fn(tuple(xs[:, i, :] for i in idxs))


# ---------------------------------------------------------------------------
# semigroup gradient estimators
# ---------------------------------------------------------------------------


def _weighted_gradient_samples(system, x0, v0, F, grid, policy, weights, norm,
                               lo, hi):
    dB = chunk_increments(policy, lo, hi - lo, grid, system.noise_dim)
    return _weighted_gradient_samples_given(system, x0, v0, F, grid, weights,
                                            norm, dB)


def _weighted_gradient_samples_given(system, x0, v0, F, grid, weights, norm,
                                     dB):
    res = run_chunk(system, x0, grid, dB, deriv=True)
    idx = _endpoint_functional(F, grid)
    s = np.einsum("bkj,k,j->b", res.y1, weights[:-1], v0)
    return norm * _f_at_nodes(F, res.xs, [idx]) * s


def bismut_gradient(system: SdeSystem, x0, v0, F: CylFunctional,
                    n_paths: int, grid: TimeGrid, seed) -> GradientEstimate:
    """Semigroup derivative via the full-interval stochastic-integral weight:
    mean of f(x_T) * (1/T) sum_k <D_k v0, X dB_k>."""
    policy = _policy(seed)
    weights = np.ones_like(grid.times)
    norm = 1.0 / grid.horizon
    v0 = np.asarray(v0, dtype=float)
    return _gradient_estimate(
        lambda lo, hi: _weighted_gradient_samples(
            system, x0, v0, F, grid, policy, weights, norm, lo, hi),
        n_paths, CHUNK_PATHS, "bismut")


def thalmaier_gradient(system: SdeSystem, x0, v0, F: CylFunctional, r: float,
                       width: float, n_paths: int, grid: TimeGrid,
                       seed) -> GradientEstimate:
    """Same estimator with the integral restricted to the window [r, r+width)."""
    policy = _policy(seed)
    T = grid.horizon
    if width <= 0 or r < 0 or r + width > T + 1e-12:
        raise BadWindow(f"bad window [{r}, {r + width}] for horizon {T}")
    try:
        weights = window_weights(grid, r, width)
    except GridMismatch as exc:
        raise BadWindow(str(exc)) from exc
    norm = 1.0 / width
    v0 = np.asarray(v0, dtype=float)
    return _gradient_estimate(
        lambda lo, hi: _weighted_gradient_samples(
            system, x0, v0, F, grid, policy, weights, norm, lo, hi),
        n_paths, CHUNK_PATHS, "thalmaier")


def weighted_gradient(system: SdeSystem, x0, v0, F: CylFunctional,
                      weights: np.ndarray, quad: float, n_paths: int,
                      grid: TimeGrid, seed) -> GradientEstimate:
    """Weight-function variant: node-sampled weights, normalized by their
    trapezoid quadrature."""
    policy = _policy(seed)
    if abs(quad) < 1e-12:
        raise DegenerateWeight(f"weight integrates to {quad:.2e}")
    v0 = np.asarray(v0, dtype=float)
    return _gradient_estimate(
        lambda lo, hi: _weighted_gradient_samples(
            system, x0, v0, F, grid, policy, weights, 1.0 / quad, lo, hi),
        n_paths, CHUNK_PATHS, "weighted")


def crn_fd_gradient(system: SdeSystem, x0, v0, F: CylFunctional, eps: float,
                    n_paths: int, grid: TimeGrid, seed) -> GradientEstimate:
    """Independent oracle: central finite difference of the endpoint
    functional over projected start-point perturbations, same draws on both
    legs."""
    policy = _policy(seed)
    if not 1e-4 <= eps <= 1e-1:
        raise ValueError(f"eps {eps} outside [1e-4, 1e-1]")
    v0 = np.asarray(v0, dtype=float)
    return _gradient_estimate(
        lambda lo, hi: _crn_fd_samples(
            system, x0, v0, F, grid, eps,
            chunk_increments(policy, lo, hi - lo, grid, system.noise_dim)),
        n_paths, CHUNK_PATHS, "crn_fd")


def _crn_fd_samples(system, x0, v0, F, grid, eps, dB):
    idx = _endpoint_functional(F, grid)
    xp = geometry.project_to_manifold(system.manifold, np.asarray(x0) + eps * v0)
    xm = geometry.project_to_manifold(system.manifold, np.asarray(x0) - eps * v0)
    fp = _f_at_nodes(F, run_chunk(system, xp, grid, dB).xs, [idx])
    fm = _f_at_nodes(F, run_chunk(system, xm, grid, dB).xs, [idx])
    return (fp - fm) / (2.0 * eps)


def gradient_pair(system: SdeSystem, x0, v0, F: CylFunctional, kind_a: str,
                  kind_b: str, n_paths: int, grid: TimeGrid, seed,
                  params_a: dict | None = None,
                  params_b: dict | None = None) -> IbpReport:
    """Paired comparison of two gradient estimators on shared draws."""
    policy = _policy(seed)
    v0 = np.asarray(v0, dtype=float)

    def one(kind, params, dB):
        params = params or {}
        if kind == "bismut":
            return _weighted_gradient_samples_given(
                system, x0, v0, F, grid, np.ones_like(grid.times),
                1.0 / grid.horizon, dB)
        if kind == "thalmaier":
            w = window_weights(grid, params["r"], params["width"])
            return _weighted_gradient_samples_given(
                system, x0, v0, F, grid, w, 1.0 / params["width"], dB)
        if kind == "weighted":
            return _weighted_gradient_samples_given(
                system, x0, v0, F, grid, params["weights"],
                1.0 / params["quad"], dB)
        if kind == "crn_fd":
            return _crn_fd_samples(system, x0, v0, F, grid, params["eps"], dB)
        raise ValueError(f"unknown gradient estimator {kind!r}")

    def samples(lo, hi):
        dB = chunk_increments(policy, lo, hi - lo, grid, system.noise_dim)
        return one(kind_a, params_a, dB), one(kind_b, params_b, dB)

    return _paired_report(samples, n_paths, CHUNK_PATHS)


# ---------------------------------------------------------------------------
# integration-by-parts identity checks
# ---------------------------------------------------------------------------


def rate_averaging_check(system: SdeSystem, x0, F: CylFunctional, h,
                         t: float, n_paths: int, grid: TimeGrid,
                         seed) -> IbpReport:
    """Exchange of the running rate for its window average inside the
    stochastic integral over [0, t], both sides integrated against f(x_T)."""
    policy = _policy(seed)
    if h.kind != "deterministic":
        raise ValueError("rate averaging requires a deterministic process")
    T = grid.horizon
    if not 0.0 < t <= T + 1e-12:
        raise BadWindow(f"t = {t} outside (0, {T}]")
    try:
        t_idx = grid.node_index(t)
    except GridMismatch as exc:
        raise BadWindow(str(exc)) from exc
    f_idx = _endpoint_functional(F, grid)
    avg = (h.value(t) - h.value(0.0)) / t
    # constant-rate table, contracted exactly like the lhs rate table so a
    # linear h gives a bitwise-zero difference
    avg_table = np.tile(avg, (t_idx, 1))

    def samples(lo, hi):
        dB = chunk_increments(policy, lo, hi - lo, grid, system.noise_dim)
        res = run_chunk(system, x0, grid, dB, deriv=True)
        fT = _f_at_nodes(F, res.xs, [f_idx])
        lhs_int = h.stochastic_integral_samples(res.xs, res.y1, grid.times,
                                                upto=t_idx)
        rhs_int = np.einsum("bkj,kj->b", res.y1[:, :t_idx, :], avg_table)
        return fT * lhs_int, fT * rhs_int

    return _paired_report(samples, n_paths, CHUNK_PATHS)


def function_ibp_check(system: SdeSystem, x0, F: CylFunctional, h,
                       n_paths: int, grid: TimeGrid, seed) -> IbpReport:
    """One-time identity: E[f(x_T) sum <D hdot, X dB>] vs
    E[df(D_T (h_T - h_0))]."""
    policy = _policy(seed)
    m = grid.steps
    f_idx = _endpoint_functional(F, grid)

    def samples(lo, hi):
        dB = chunk_increments(policy, lo, hi - lo, grid, system.noise_dim)
        res = run_chunk(system, x0, grid, dB, deriv=True, snap_nodes=(f_idx,))
        fT = _f_at_nodes(F, res.xs, [f_idx])
        lhs = fT * h.stochastic_integral_samples(res.xs, res.y1, grid.times)
        offs = (h.values_at_nodes(res.xs, grid.times, [m])[:, 0, :]
                - h.values_at_nodes(res.xs, grid.times, [0])[:, 0, :])
        push = np.einsum("bij,bj->bi", res.dsnap[:, 0], offs)
        grads = F.grad((res.xs[:, f_idx, :],))[0]
        rhs = np.einsum("bi,bi->b", grads, push)
        return lhs, rhs

    return _paired_report(samples, n_paths, CHUNK_PATHS)


def pathspace_ibp(system: SdeSystem, x0, F: CylFunctional, h, n_paths: int,
                  grid: TimeGrid, seed) -> IbpReport:
    """Cylindrical path-space identity: E[dF(V^h)] vs E[F * sum <D hdot, X dB>]
    with V^h_t = D_t h_t and h_0 = 0."""
    policy = _policy(seed)
    _require_based(h)
    idxs = [grid.node_index(t) for t in F.times]

    def samples(lo, hi):
        dB = chunk_increments(policy, lo, hi - lo, grid, system.noise_dim)
        res = run_chunk(system, x0, grid, dB, deriv=True, snap_nodes=idxs)
        pts = tuple(res.xs[:, i, :] for i in idxs)
        grads = F.grad(pts)
        hvals = h.values_at_nodes(res.xs, grid.times, idxs)
        lhs = np.zeros(hi - lo)
        for j in range(len(idxs)):
            push = np.einsum("bij,bj->bi", res.dsnap[:, j], hvals[:, j])
            lhs += np.einsum("bi,bi->b", grads[j], push)
        rhs = F.fn(pts) * h.stochastic_integral_samples(res.xs, res.y1,
                                                        grid.times)
        return lhs, rhs

    return _paired_report(samples, n_paths, CHUNK_PATHS)


def damped_ibp(system: SdeSystem, x0, F: CylFunctional, h, n_paths: int,
               grid: TimeGrid, seed) -> IbpReport:
    """Damped-transport identity: E[dF(W(h))] vs
    E[F * sum <W hdot, X dB>] on gradient systems."""
    policy = _policy(seed)
    if not system.is_gradient:
        raise NotGradientSystem(f"{system.name} is not a gradient system")
    _require_based(h)
    idxs = [grid.node_index(t) for t in F.times]

    def samples(lo, hi):
        dB = chunk_increments(policy, lo, hi - lo, grid, system.noise_dim)
        res = run_chunk(system, x0, grid, dB, damped=True, snap_nodes=idxs)
        pts = tuple(res.xs[:, i, :] for i in idxs)
        grads = F.grad(pts)
        hvals = h.values_at_nodes(res.xs, grid.times, idxs)
        lhs = np.zeros(hi - lo)
        for j in range(len(idxs)):
            push = np.einsum("bij,bj->bi", res.wsnap[:, j], hvals[:, j])
            lhs += np.einsum("bi,bi->b", grads[j], push)
        rhs = F.fn(pts) * h.stochastic_integral_samples(res.xs, res.y2,
                                                        grid.times)
        return lhs, rhs

    return _paired_report(samples, n_paths, CHUNK_PATHS_HEAVY)


def _require_based(h) -> None:
    if h.kind == "deterministic" and np.any(h.value(0.0) != 0.0):
        raise ValueError("path-space identities need h_0 = 0")


# ---------------------------------------------------------------------------
# Girsanov variation identities
# ---------------------------------------------------------------------------


def girsanov_invariance(system: SdeSystem, x0, F: CylFunctional, h,
                        tau: float, n_paths: int, grid: TimeGrid,
                        seed) -> IbpReport:
    """E[F(perturbed flow)] vs E[F(base flow) * exp(log density)].

    The perturbed side re-simulates each cylinder time from the variation-
    flow start point with the same draws; the density integrand lives on
    the base path.  extras carries the exponential-martingale statistics
    (mean/se of exp(log density), which must sit near 1).
    """
    policy = _policy(seed)
    if abs(tau) > 0.5:
        raise ValueError(f"|tau| = {abs(tau)} > 0.5")
    if h.kind != "deterministic":
        raise ValueError("variation flows take deterministic processes")
    x0 = np.asarray(x0, dtype=float)
    idxs = [grid.node_index(t) for t in F.times]
    table = variation_table(system, h, tau, grid, x0)
    gtable = variation_rate_table(table, grid)[:-1]
    mart_acc = McAccumulator()

    def samples(lo, hi):
        nonlocal mart_acc
        dB = chunk_increments(policy, lo, hi - lo, grid, system.noise_dim)
        base = run_chunk(system, x0, grid, dB, deriv=True, gtable=gtable)
        log_rho = np.einsum("bkj,kj->b", base.y1, gtable) - 0.5 * base.s2
        weight = np.exp(log_rho)
        mart_acc = mart_acc.merged(McAccumulator.from_samples(weight))
        rhs = _f_at_nodes(F, base.xs, idxs) * weight
        pert_pts = []
        for i in idxs:
            pert = run_chunk(system, table[i], grid, dB, m_stop=i)
            pert_pts.append(pert.xs[:, i, :])
        lhs = F.fn(tuple(pert_pts))
        return lhs, rhs

    report = _paired_report(samples, n_paths, CHUNK_PATHS)
    report.extras["martingale_mean"] = mart_acc.mean
    report.extras["martingale_se"] = mart_acc.std_error
    return report


def girsanov_derivative(system: SdeSystem, x0, F: CylFunctional, h,
                        n_paths: int, grid: TimeGrid, seed,
                        eps: float = 0.02) -> IbpReport:
    """Variation derivative at tau = 0: direct pairing E[dF(D(X(x0)h))]
    against E[F * sum <X dB, D X(x0) hdot>], plus a central-difference
    cross-check of the lhs through the perturbed flows.

    extras: 'fd' holds the IbpReport of the finite-difference lhs against
    the same rhs, 'fd_vs_direct' the paired difference of the two lhs
    estimators.
    """
    policy = _policy(seed)
    if h.kind != "deterministic":
        raise ValueError("variation flows take deterministic processes")
    _require_based(h)
    x0 = np.asarray(x0, dtype=float)
    idxs = [grid.node_index(t) for t in F.times]
    qtable = np.stack([
        system.apply_diffusion(x0, h.rate(float(s))) for s in grid.times[:-1]])
    hvals = [system.apply_diffusion(x0, h.value(float(grid.times[i])))
             for i in idxs]
    table_p = variation_table(system, h, +eps, grid, x0)
    table_m = variation_table(system, h, -eps, grid, x0)

    fd_lhs_acc = McAccumulator()
    fd_diff_acc = McAccumulator()
    fd_vs_direct_acc = McAccumulator()

    def samples(lo, hi):
        nonlocal fd_lhs_acc, fd_diff_acc, fd_vs_direct_acc
        dB = chunk_increments(policy, lo, hi - lo, grid, system.noise_dim)
        base = run_chunk(system, x0, grid, dB, deriv=True, snap_nodes=idxs)
        pts = tuple(base.xs[:, i, :] for i in idxs)
        grads = F.grad(pts)
        lhs = np.zeros(hi - lo)
        for j in range(len(idxs)):
            push = np.einsum("bij,j->bi", base.dsnap[:, j], hvals[j])
            lhs += np.einsum("bi,bi->b", grads[j], push)
        rhs = F.fn(pts) * np.einsum("bkj,kj->b", base.y1, qtable)
        pp, pm = [], []
        for i in idxs:
            pp.append(run_chunk(system, table_p[i], grid, dB, m_stop=i).xs[:, i, :])
            pm.append(run_chunk(system, table_m[i], grid, dB, m_stop=i).xs[:, i, :])
        fd = (F.fn(tuple(pp)) - F.fn(tuple(pm))) / (2.0 * eps)
        fd_lhs_acc = fd_lhs_acc.merged(McAccumulator.from_samples(fd))
        fd_diff_acc = fd_diff_acc.merged(McAccumulator.from_samples(fd - rhs))
        fd_vs_direct_acc = fd_vs_direct_acc.merged(
            McAccumulator.from_samples(fd - lhs))
        return lhs, rhs

    report = _paired_report(samples, n_paths, CHUNK_PATHS)
    report.extras["fd"] = IbpReport(
        fd_lhs_acc.mean, fd_lhs_acc.std_error,
        report.rhs_mean, report.rhs_se,
        fd_diff_acc.mean, fd_diff_acc.std_error,
        paired_z(fd_diff_acc), n_paths)
    report.extras["fd_vs_direct_mean"] = fd_vs_direct_acc.mean
    report.extras["fd_vs_direct_se"] = fd_vs_direct_acc.std_error
    return report


# ---------------------------------------------------------------------------
# free path-space identities
# ---------------------------------------------------------------------------


def free_ibp(system: SdeSystem, F: CylFunctional, hfield: VectorFieldProcess,
             n_paths_per_point: int, n_base_points: int, grid: TimeGrid,
             seed) -> IbpReport:
    """Free path-space identity with uniformly sampled start points:
    E int dF(D(h(x))) dx vs E int F * (-div h_0(x) + sum <D hdot(x), X dB>) dx."""
    return _free_ibp_impl(system, F, hfield, n_paths_per_point, n_base_points,
                          grid, seed, damped=False)


def free_damped_ibp(system: SdeSystem, F: CylFunctional,
                    hfield: VectorFieldProcess, n_paths_per_point: int,
                    n_base_points: int, grid: TimeGrid, seed) -> IbpReport:
    """Free path-space identity with the damped transport in place of the
    derivative flow."""
    if not system.is_gradient:
        raise NotGradientSystem(f"{system.name} is not a gradient system")
    return _free_ibp_impl(system, F, hfield, n_paths_per_point, n_base_points,
                          grid, seed, damped=True)


def _free_ibp_impl(system, F, hfield, n_per, n_base, grid, seed, damped):
    policy = _policy(seed)
    vol = geometry.riemannian_volume(system.manifold)
    base_points = geometry.uniform_sample(
        system.manifold, policy.generator("base_points"), n_base)
    idxs = [grid.node_index(t) for t in F.times]
    chunk = CHUNK_PATHS_HEAVY if damped else CHUNK_PATHS

    lhs_acc = McAccumulator()
    rhs_acc = McAccumulator()
    diff_acc = McAccumulator()
    for i, xi in enumerate(base_points):
        hv = np.stack([hfield.value(float(s), xi) for s in grid.times])
        hr = np.stack([hfield.rate(float(s), xi) for s in grid.times[:-1]])
        d0 = float(hfield.div0(xi))

        def samples(lo, hi, xi=xi, hv=hv, hr=hr, d0=d0):
            dB = chunk_increments(policy, n_per * i + lo, hi - lo, grid,
                                  system.noise_dim)
            res = run_chunk(system, xi, grid, dB, deriv=not damped,
                            damped=damped, snap_nodes=idxs)
            pts = tuple(res.xs[:, j, :] for j in idxs)
            grads = F.grad(pts)
            snaps = res.wsnap if damped else res.dsnap
            contr = res.y2 if damped else res.y1
            lhs = np.zeros(hi - lo)
            for j, node in enumerate(idxs):
                push = np.einsum("bij,j->bi", snaps[:, j], hv[node])
                lhs += np.einsum("bi,bi->b", grads[j], push)
            rhs = F.fn(pts) * (-d0 + np.einsum("bkj,kj->b", contr, hr))
            return vol * lhs, vol * rhs

        for lo, hi in _chunk_ranges(n_per, chunk):
            lhs, rhs = samples(lo, hi)
            if DEBUG_RHS_SCALE != 1.0:
                rhs = rhs * DEBUG_RHS_SCALE
            lhs_acc = lhs_acc.merged(McAccumulator.from_samples(lhs))
            rhs_acc = rhs_acc.merged(McAccumulator.from_samples(rhs))
            diff_acc = diff_acc.merged(McAccumulator.from_samples(lhs - rhs))
    return IbpReport(lhs_acc.mean, lhs_acc.std_error,
                     rhs_acc.mean, rhs_acc.std_error,
                     diff_acc.mean, diff_acc.std_error,
                     paired_z(diff_acc), n_per * n_base)
