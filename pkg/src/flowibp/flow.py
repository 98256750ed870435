"""Stochastic flow simulation: paths, derivative flows, transports, variations.

Two integrators implement exactly the same scheme:

* a pure-numpy single-path reference (``simulate_flow``) producing a fully
  recorded :class:`FlowPath`, used by tests and the path-level operations;
* the compiled chunk kernel (``run_chunk``) used by the Monte Carlo
  estimators, which records compact per-step contractions instead of full
  operator histories.

The scheme is Stratonovich Heun (Euler predictor, averaged corrector) with
post-step projection onto the manifold; the derivative flow integrates the
variational equation with the same predictor-corrector and is tangent-
projected each step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _kernel, geometry
from .errors import GridMismatch, NumericBlowup
from .rng import RngPolicy
from .systems import SdeSystem

GRID_SNAP_TOL = 1e-9


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid on [t0, T] with marked node indices for cylinder times."""

    times: np.ndarray
    marked: tuple = ()

    @classmethod
    def regular(cls, horizon: float, steps_per_unit: int = 512,
                marked_times=()) -> "TimeGrid":
        if horizon <= 0:
            raise ValueError("horizon must be positive")
        if steps_per_unit < 1:
            raise ValueError("steps_per_unit must be >= 1")
        m = max(1, round(horizon * steps_per_unit))
        times = np.linspace(0.0, horizon, m + 1)
        grid = cls(times)
        marked = tuple(sorted({grid.snap_index(t)[0] for t in marked_times}))
        return cls(times, marked)

    @property
    def steps(self) -> int:
        return len(self.times) - 1

    @property
    def horizon(self) -> float:
        return float(self.times[-1] - self.times[0])

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])

    def snap_index(self, t: float) -> tuple:
        """Nearest node index and the snapping distance."""
        idx = int(np.clip(round((t - self.times[0]) / self.dt), 0, self.steps))
        return idx, abs(float(self.times[idx]) - t)

    def node_index(self, t: float, tol: float = GRID_SNAP_TOL) -> int:
        idx, delta = self.snap_index(t)
        if delta > tol:
            raise GridMismatch(f"time {t} is {delta:.2e} away from grid node")
        return idx

    def suffix(self, r_idx: int) -> "TimeGrid":
        marked = tuple(i - r_idx for i in self.marked if i >= r_idx)
        return TimeGrid(self.times[r_idx:], marked)


@dataclass(frozen=True)
class BrownianDraw:
    """Increments of one driving Brownian path, derived from (seed, index)."""

    policy: RngPolicy
    path_index: int
    increments: np.ndarray  # (steps, noise_dim), variance dt * I per row

    @classmethod
    def make(cls, policy: RngPolicy, path_index: int, grid: TimeGrid,
             noise_dim: int) -> "BrownianDraw":
        gen = policy.generator("brownian", path_index)
        normals = gen.standard_normal((grid.steps, noise_dim))
        scale = np.sqrt(np.diff(grid.times))[:, None]
        return cls(policy, path_index, normals * scale)

    def suffix(self, r_idx: int) -> "BrownianDraw":
        return BrownianDraw(self.policy, self.path_index, self.increments[r_idx:])


def chunk_increments(policy: RngPolicy, start_index: int, count: int,
                     grid: TimeGrid, noise_dim: int) -> np.ndarray:
    """Brownian increments for paths [start, start+count), shape (count, m, n).

    Row i is bit-identical to ``BrownianDraw.make(policy, start + i, ...)``.
    """
    out = np.empty((count, grid.steps, noise_dim))
    policy.fill_normals("brownian", start_index, out)
    out *= np.sqrt(np.diff(grid.times))[None, :, None]
    return out


# ---------------------------------------------------------------------------
# single-path reference integrator and FlowPath
# ---------------------------------------------------------------------------

@dataclass
class FlowPath:
    """One fully recorded realization of the flow and its companion states.

    ``deriv[k]`` is the derivative flow at node k as an ambient matrix
    mapping tangent vectors at x_0 to tangent vectors at x_k; ``frames[k]``
    holds the parallel-transported orthonormal tangent frame (columns);
    ``damped[k]`` the damped transport; ``antidev[k]`` the intrinsic
    antidevelopment increment over [s_k, s_{k+1}] in the frame at x_0.
    """

    system: SdeSystem
    grid: TimeGrid
    draw: BrownianDraw
    points: np.ndarray            # (m+1, a)
    deriv: np.ndarray             # (m+1, a, a)
    frames: np.ndarray            # (m+1, a, di)
    damped: np.ndarray            # (m+1, a, a)
    antidev: np.ndarray           # (m, di)

    def transport_matrix(self, k: int) -> np.ndarray:
        """Parallel transport T_{x_0}M -> T_{x_k}M as an ambient matrix."""
        return self.frames[k] @ self.frames[0].T

    def transport(self, k: int, v: np.ndarray) -> np.ndarray:
        return self.transport_matrix(k) @ np.asarray(v, dtype=float)


def _reference_states(system: SdeSystem, x0: np.ndarray, dt: float,
                      increments: np.ndarray):
    """Generator of (k, x_k, D_k, E_k, W_k, xdb_k) mirroring the kernel step."""
    mf = system.manifold
    a = mf.ambient_dim
    proj = (lambda p: p) if mf.is_flat else (lambda p: p / np.linalg.norm(p))
    x = np.array(x0, dtype=float)
    D = np.eye(a)
    E = geometry.tangent_frame(mf, x).T.copy()
    W = np.eye(a)
    ric = system.ricci_coefficient
    for k, db in enumerate(increments):
        xdb = system.apply_diffusion(x, db)
        yield k, x, D, E, W, xdb
        a0 = xdb + system.drift(x) * dt
        xp = proj(x + a0)
        a1 = system.apply_diffusion(xp, db) + system.drift(xp) * dt
        xn = proj(x + 0.5 * (a0 + a1))
        g0 = system.diffusion_action(x, D, db) + system.drift_action(x, D) * dt
        Dp = D + g0
        g1 = (system.diffusion_action(xp, Dp, db)
              + system.drift_action(xp, Dp) * dt)
        Dn = D + 0.5 * (g0 + g1)
        if not mf.is_flat:
            Dn = Dn - xn[:, None] * (xn @ Dn)[None, :]
            En = E - xn[:, None] * (xn @ E)[None, :]
            En[:, 0] /= np.linalg.norm(En[:, 0])
            if En.shape[1] == 2:
                En[:, 1] -= (En[:, 1] @ En[:, 0]) * En[:, 0]
                En[:, 1] /= np.linalg.norm(En[:, 1])
            W = En @ (E.T @ W)
        else:
            En = E
        W = _damped_linear_step(system, xn, W, dt, ric)
        if np.max(np.abs(xn)) > _kernel.BLOWUP_LIMIT or np.max(np.abs(Dn)) > _kernel.BLOWUP_LIMIT:
            raise NumericBlowup(f"state magnitude exceeded {_kernel.BLOWUP_LIMIT:g} at step {k}")
        x, D, E = xn, Dn, En
    yield len(increments), x, D, E, W, np.zeros(a)


def _damped_linear_step(system: SdeSystem, xn: np.ndarray, W: np.ndarray,
                        dt: float, ric: float) -> np.ndarray:
    a = system.manifold.ambient_dim
    if system.z_code in (0, 1):
        cs = -0.5 * ric + (system.z_param if system.z_code == 1 else 0.0)
        rho = (1.0 + 0.5 * dt * cs) / (1.0 - 0.5 * dt * cs)
        return rho * W
    dz = system.gen_drift_matrix(xn)
    if system.manifold.is_flat:
        C = dz
    else:
        P = np.eye(a) - np.outer(xn, xn)
        C = -0.5 * ric * P + P @ dz @ P
    return np.linalg.solve(np.eye(a) - 0.5 * dt * C,
                           (np.eye(a) + 0.5 * dt * C) @ W)


def simulate_flow(system: SdeSystem, x0: np.ndarray, grid: TimeGrid,
                  draw: BrownianDraw) -> FlowPath:
    """Single-path reference simulation recording all companion states."""
    mf = system.manifold
    a = mf.ambient_dim
    m = grid.steps
    di = a if mf.is_flat else mf.intrinsic_dim
    if draw.increments.shape != (m, system.noise_dim):
        raise GridMismatch("draw shape does not match grid/system")
    points = np.empty((m + 1, a))
    deriv = np.empty((m + 1, a, a))
    frames = np.empty((m + 1, a, di))
    damped = np.empty((m + 1, a, a))
    antidev = np.empty((m, di))
    for k, x, D, E, W, xdb in _reference_states(system, x0, grid.dt,
                                                draw.increments):
        points[k] = x
        deriv[k] = D
        frames[k] = E
        damped[k] = W
        if k < m:
            antidev[k] = E.T @ xdb
    return FlowPath(system, grid, draw, points, deriv, frames, damped, antidev)


def restart_flow(system: SdeSystem, x_at_r: np.ndarray, subgrid: TimeGrid,
                 draw: BrownianDraw) -> FlowPath:
    """Flow restarted at a node; with the parent's suffix draw the points
    coincide with the parent's bit-exactly."""
    if draw.increments.shape[0] != subgrid.steps:
        raise GridMismatch("restart draw does not cover the sub-grid")
    return simulate_flow(system, x_at_r, subgrid, draw)


def antidevelopment_increments(path: FlowPath) -> np.ndarray:
    """Intrinsic Brownian increments, frame coordinates at the start point."""
    return path.antidev


def damped_transport(path: FlowPath, v0: np.ndarray) -> np.ndarray:
    """Damped transport of v0 along the path, one row per node."""
    return np.einsum("kij,j->ki", path.damped, np.asarray(v0, dtype=float))


# ---------------------------------------------------------------------------
# variation flows and Girsanov reweighting
# ---------------------------------------------------------------------------

VARIATION_MAX_STEP = 1.0 / 64.0


def variation_flow(system: SdeSystem, h, tau: float, t: float, x: np.ndarray,
                   grid: TimeGrid) -> np.ndarray:
    """Flow of the vector field y -> X(y) h_t in the variation parameter."""
    idx = grid.node_index(t)
    table = variation_table(system, h, tau, grid, x, m_stop=idx)
    return table[idx]


def variation_table(system: SdeSystem, h, tau: float, grid: TimeGrid,
                    x: np.ndarray, m_stop: int | None = None) -> np.ndarray:
    """Variation-flow points for every grid node, shape (m_stop+1, ambient).

    Row k solves dy/dtau = X(y) h(s_k) from y(0) = x with classical
    fourth-order steps of size <= 1/64 and post-step projection; the rows
    are independent, so they advance together as one batch.
    """
    mf = system.manifold
    m_stop = grid.steps if m_stop is None else m_stop
    nodes = grid.times[:m_stop + 1]
    y = np.tile(np.asarray(x, dtype=float), (len(nodes), 1))
    if tau == 0.0:
        return y
    hvals = np.stack([h.value(float(s)) for s in nodes])
    nsteps = max(1, math.ceil(abs(tau) / VARIATION_MAX_STEP))
    dtau = tau / nsteps
    proj = (lambda p: p) if mf.is_flat else (
        lambda p: p / np.linalg.norm(p, axis=-1, keepdims=True))
    fld = lambda p: system.apply_diffusion(proj(p), hvals)
    for _ in range(nsteps):
        k1 = fld(y)
        k2 = fld(y + 0.5 * dtau * k1)
        k3 = fld(y + 0.5 * dtau * k2)
        k4 = fld(y + dtau * k3)
        y = proj(y + (dtau / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4))
    return y


def variation_rate_table(table: np.ndarray, grid: TimeGrid) -> np.ndarray:
    """Time derivative of the variation-flow points by central differences
    over grid neighbors, one-sided at the endpoints."""
    m = table.shape[0] - 1
    dt = grid.dt
    rates = np.empty_like(table)
    if m == 0:
        rates[0] = 0.0
        return rates
    rates[1:m] = (table[2:] - table[:-2]) / (2.0 * dt)
    rates[0] = (table[1] - table[0]) / dt
    rates[m] = (table[m] - table[m - 1]) / dt
    return rates


def perturbed_cylinder_points(system: SdeSystem, x: np.ndarray, h, tau: float,
                              times, draw: BrownianDraw,
                              grid: TimeGrid) -> np.ndarray:
    """Points of the variation-perturbed flow at the cylinder times.

    For each time t_j the start point is moved by the variation flow and the
    equation is re-simulated from 0 to t_j with the same Brownian draw.
    """
    idxs = [grid.node_index(t) for t in times]
    table = variation_table(system, h, tau, grid, x, m_stop=max(idxs))
    out = np.empty((len(idxs), system.manifold.ambient_dim))
    for j, idx in enumerate(idxs):
        sub = TimeGrid(grid.times[:idx + 1])
        subdraw = BrownianDraw(draw.policy, draw.path_index,
                               draw.increments[:idx])
        path = simulate_flow(system, table[idx], sub, subdraw)
        out[j] = path.points[-1]
    return out


def girsanov_log_density(path: FlowPath, h, tau: float) -> float:
    """Log density of the variation-perturbed path law against the base law.

    Integrand: the diffusion adjoint applied to the derivative flow pushed
    time-rate of the variation table, sampled at left points; the quadratic
    variation uses the same samples.  Exactly zero for tau = 0.
    """
    system = path.system
    grid = path.grid
    if tau == 0.0:
        return 0.0
    table = variation_table(system, h, tau, grid, path.points[0])
    rates = variation_rate_table(table, grid)
    log_density = 0.0
    dt = grid.dt
    for k in range(grid.steps):
        a_k = path.deriv[k] @ rates[k]
        u_k = system.apply_diffusion_adjoint(path.points[k], a_k)
        log_density += float(u_k @ path.draw.increments[k])
        log_density -= 0.5 * float(a_k @ a_k) * dt
    return log_density


# ---------------------------------------------------------------------------
# compiled chunk runner used by the estimators
# ---------------------------------------------------------------------------

_DUMMY1 = np.zeros((1, 1, 1))
_DUMMY2 = np.zeros((1, 1, 1, 1))


@dataclass
class ChunkPaths:
    """Kernel outputs for one chunk of paths (fields None when not requested)."""

    xs: np.ndarray                    # (B, m_stop+1, a)
    y1: np.ndarray | None = None      # (B, m_stop, a)   D_k^T X dB_k
    y2: np.ndarray | None = None      # (B, m_stop, a)   W_k^T X dB_k
    bt: np.ndarray | None = None      # (B, m_stop, di)  E_k^T X dB_k
    s2: np.ndarray | None = None      # (B,)  sum_k |D_k g_k|^2 dt
    dsnap: np.ndarray | None = None   # (B, q, a, a)
    wsnap: np.ndarray | None = None   # (B, q, a, a)
    frames: np.ndarray | None = None  # (B, m_stop+1, a, di)


def run_chunk(system: SdeSystem, x0, grid: TimeGrid, dB: np.ndarray, *,
              m_stop: int | None = None, deriv: bool = False,
              frame: bool = False, damped: bool = False,
              gtable: np.ndarray | None = None, snap_nodes=(),
              frames_history: bool = False) -> ChunkPaths:
    """Evolve a chunk of paths with the compiled kernel."""
    mf = system.manifold
    a = mf.ambient_dim
    B, m, _ = dB.shape
    m_stop = m if m_stop is None else m_stop
    di = a if mf.is_flat else mf.intrinsic_dim
    frame = frame or damped or frames_history
    x0 = np.asarray(x0, dtype=float)
    if x0.ndim == 1:
        x0 = np.broadcast_to(x0, (B, a)).copy()
    snap_idx = np.asarray(sorted(set(snap_nodes)), dtype=np.int64)
    xs = np.empty((B, m_stop + 1, a))
    y1 = np.empty((B, m_stop, a)) if deriv else _DUMMY1
    y2 = np.empty((B, m_stop, a)) if damped else _DUMMY1
    bt = np.empty((B, m_stop, di)) if frame else _DUMMY1
    s2 = np.empty(B)
    has_gt = gtable is not None
    gt = np.asarray(gtable, dtype=float) if has_gt else np.zeros((1, a))
    nq = len(snap_idx)
    dsnap = np.empty((B, nq, a, a)) if nq else _DUMMY2
    wsnap = np.empty((B, nq, a, a)) if nq else _DUMMY2
    es = np.empty((B, m_stop + 1, a, di)) if frames_history else _DUMMY2
    errs = np.empty(B, dtype=np.uint8)
    mkind = _kernel.MKIND_FLAT if mf.is_flat else _kernel.MKIND_UNIT
    _kernel.evolve_chunk(mkind, x0, dB, grid.dt, m_stop,
                         system.a_code, system.a_param,
                         system.z_code, system.z_param,
                         system.ricci_coefficient,
                         deriv, frame, damped, frames_history,
                         gt, has_gt, snap_idx,
                         xs, y1, y2, bt, s2, dsnap, wsnap, es, errs)
    if errs.any():
        raise NumericBlowup(
            f"{int(errs.sum())} paths exceeded magnitude {_kernel.BLOWUP_LIMIT:g}")
    return ChunkPaths(
        xs=xs,
        y1=y1 if deriv else None,
        y2=y2 if damped else None,
        bt=bt if frame else None,
        s2=s2 if has_gt else None,
        dsnap=dsnap if nq else None,
        wsnap=wsnap if nq else None,
        frames=es if frames_history else None,
    )
