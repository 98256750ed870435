"""Perturbation processes, cylindrical functionals, and their pairings.

Cameron-Martin processes ``h`` take values in the tangent space at the
start point (ambient coordinates).  Deterministic processes are piecewise
linear between knots with left-derivative rates at the knots; adapted
processes may read only the path prefix up to the current node.

Cylindrical functionals F(path) = f(x_{t_1}, ..., x_{t_k}) come from a
registered catalog with analytic slot gradients, so identity tests have
exact derivative sides.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import GridMismatch
from .flow import FlowPath, TimeGrid
from .systems import SdeSystem, default_direction

# ---------------------------------------------------------------------------
# Cameron-Martin processes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DeterministicCm:
    """Piecewise-linear deterministic process given by knot times/values."""

    knot_times: np.ndarray    # (K,)
    knot_values: np.ndarray   # (K, a)
    name: str = "deterministic"

    kind = "deterministic"

    def value(self, t: float) -> np.ndarray:
        out = np.empty(self.knot_values.shape[1])
        for j in range(self.knot_values.shape[1]):
            out[j] = np.interp(t, self.knot_times, self.knot_values[:, j])
        return out

    def rate(self, t: float) -> np.ndarray:
        """Slope of the segment ending at t (left derivative at knots);
        the first knot takes the first segment's slope."""
        k = int(np.searchsorted(self.knot_times, t, side="left"))
        k = min(max(k, 1), len(self.knot_times) - 1)
        dt = self.knot_times[k] - self.knot_times[k - 1]
        return (self.knot_values[k] - self.knot_values[k - 1]) / dt

    def eval(self, prefix_points: np.ndarray, times: np.ndarray, k: int):
        t = float(times[k])
        return self.value(t), self.rate(t)

    # -- batch helpers over kernel-recorded chunk arrays -------------------
    def rate_table(self, times: np.ndarray) -> np.ndarray:
        return np.stack([self.rate(float(t)) for t in times])

    def stochastic_integral_samples(self, xs, y1, times, upto=None):
        m = y1.shape[1] if upto is None else upto
        table = self.rate_table(times[:m])
        return np.einsum("bkj,kj->b", y1[:, :m, :], table)

    def endpoint_offset(self, xs, times) -> np.ndarray:
        off = self.value(float(times[-1])) - self.value(float(times[0]))
        return np.broadcast_to(off, (xs.shape[0], off.shape[0]))

    def values_at_nodes(self, xs, times, idxs) -> np.ndarray:
        vals = np.stack([self.value(float(times[i])) for i in idxs])
        return np.broadcast_to(vals, (xs.shape[0],) + vals.shape)


@dataclass(frozen=True)
class OccupationCm:
    """Adapted process h_t = (occupation time of {x_axis > 0}) * direction.

    The rate at node k is the indicator at x_k times the direction, so the
    accumulated value telescopes exactly against the rate sums.
    """

    direction: np.ndarray
    axis: int = 0
    name: str = "occupation"

    kind = "adapted"

    def _indicator(self, points: np.ndarray) -> np.ndarray:
        return (points[..., self.axis] > 0.0).astype(float)

    def eval(self, prefix_points: np.ndarray, times: np.ndarray, k: int):
        dt = float(times[1] - times[0]) if len(times) > 1 else 0.0
        ind = self._indicator(prefix_points[:k])
        occ = float(ind.sum()) * dt
        rate_ind = self._indicator(prefix_points[k])
        return occ * self.direction, rate_ind * self.direction

    def stochastic_integral_samples(self, xs, y1, times, upto=None):
        m = y1.shape[1] if upto is None else upto
        ind = self._indicator(xs[:, :m, :])
        proj = y1[:, :m, :] @ self.direction
        return np.einsum("bk,bk->b", ind, proj)

    def endpoint_offset(self, xs, times) -> np.ndarray:
        dt = float(times[1] - times[0])
        occ = self._indicator(xs[:, :-1, :]).sum(axis=1) * dt
        return occ[:, None] * self.direction[None, :]

    def values_at_nodes(self, xs, times, idxs) -> np.ndarray:
        dt = float(times[1] - times[0])
        ind = self._indicator(xs[:, :-1, :])
        occ = np.concatenate([np.zeros((xs.shape[0], 1)),
                              np.cumsum(ind, axis=1) * dt], axis=1)
        return occ[:, list(idxs), None] * self.direction[None, None, :]


def cm_eval(h, prefix_points: np.ndarray, times: np.ndarray, k: int):
    """Value and rate of a Cameron-Martin process at node k.

    Adapted processes receive only the path prefix up to and including
    node k, which enforces that rules cannot read future nodes.
    """
    if k >= len(times):
        raise GridMismatch(f"node {k} outside grid of {len(times)} nodes")
    return h.eval(prefix_points[:k + 1], times, k)


# ---------------------------------------------------------------------------
# cylindrical functionals
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CylFunctional:
    """F(path) = f(x_{t_1}, ..., x_{t_k}) with analytic slot gradients.

    ``fn`` maps a tuple of k point arrays (..., a) to values (...,);
    ``grad`` returns the k ambient slot gradients, each shaped like its
    input points.
    """

    name: str
    times: tuple
    fn: Callable
    grad: Callable


def eval_functional(F: CylFunctional, path: FlowPath) -> float:
    idxs = [path.grid.node_index(t) for t in F.times]
    pts = tuple(path.points[i] for i in idxs)
    return float(F.fn(pts))


def eval_derivative(F: CylFunctional, path: FlowPath,
                    tangent_values: Sequence[np.ndarray]) -> float:
    """Sum of slot-gradient pairings with tangent vectors at the F-times."""
    idxs = [path.grid.node_index(t) for t in F.times]
    pts = tuple(path.points[i] for i in idxs)
    grads = F.grad(pts)
    return float(sum(np.dot(g, v) for g, v in zip(grads, tangent_values)))


def pushforward_values(path: FlowPath, h, times) -> list[np.ndarray]:
    """Derivative flow applied to the process values: D_{t_j} h_{t_j}."""
    out = []
    for t in times:
        idx = path.grid.node_index(t)
        value, _ = cm_eval(h, path.points, path.grid.times, idx)
        out.append(path.deriv[idx] @ value)
    return out


def ito_divergence(path: FlowPath, h) -> float:
    """Left-point discretization of the pairing integral
    sum_k <D_k hdot_k, X(x_k) dB_k>."""
    system = path.system
    total = 0.0
    for k in range(path.grid.steps):
        _, rate = cm_eval(h, path.points, path.grid.times, k)
        xdb = system.apply_diffusion(path.points[k], path.draw.increments[k])
        total += float((path.deriv[k] @ rate) @ xdb)
    return total


# ---------------------------------------------------------------------------
# vector-field processes on the manifold (free path-space perturbations)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class VectorFieldProcess:
    """Time-dependent tangent field h_t(x) with analytic time rate and
    registered divergence of its time-zero slice."""

    name: str
    value: Callable    # (t, x (..., a)) -> (..., a) tangent at x
    rate: Callable     # (t, x) -> (..., a)
    div0: Callable     # (x (a,)) -> float


def _killing_field(x: np.ndarray) -> np.ndarray:
    out = np.zeros_like(x)
    out[..., 0] = -x[..., 1]
    out[..., 1] = x[..., 0]
    return out


def _grad_height(x: np.ndarray) -> np.ndarray:
    out = -x[..., -1:] * x
    out[..., -1] += 1.0
    return out


# ---------------------------------------------------------------------------
# named registries (config strings)
# ---------------------------------------------------------------------------


def make_functional(spec: str) -> CylFunctional:
    """Build a catalog functional from its config string.

    Grammar: ``coord:<axis>@<t>``, ``bump:<axis>@<t>``, ``pairdot@<t1>,<t2>``.
    """
    if spec.startswith("coord:"):
        head, t = spec.split("@")
        axis = int(head.split(":", 1)[1])

        def fn(pts, axis=axis):
            return pts[0][..., axis]

        def grad(pts, axis=axis):
            g = np.zeros_like(pts[0])
            g[..., axis] = 1.0
            return (g,)

        return CylFunctional(spec, (float(t),), fn, grad)
    if spec.startswith("bump:"):
        head, t = spec.split("@")
        axis = int(head.split(":", 1)[1])

        def fn(pts, axis=axis):
            u = pts[0][..., axis]
            return np.exp(-u * u)

        def grad(pts, axis=axis):
            u = pts[0][..., axis]
            g = np.zeros_like(pts[0])
            g[..., axis] = -2.0 * u * np.exp(-u * u)
            return (g,)

        return CylFunctional(spec, (float(t),), fn, grad)
    if spec.startswith("pairdot@"):
        t1, t2 = spec.split("@", 1)[1].split(",")

        def fn(pts):
            return np.einsum("...i,...i->...", pts[0], pts[1])

        def grad(pts):
            return (pts[1].copy(), pts[0].copy())

        return CylFunctional(spec, (float(t1), float(t2)), fn, grad)
    raise ValueError(f"unknown functional {spec!r}")


def make_cm_process(spec: str, system: SdeSystem, grid: TimeGrid,
                    direction: np.ndarray | None = None):
    """Build a catalog Cameron-Martin process from its config string.

    ``h:linear``     h_s = s * u        (unit direction u, h_0 = 0)
    ``h:quadratic``  h_s = s^2 * u, represented piecewise-linearly on the
                     grid knots (left-derivative rates)
    ``h:zero``       h = 0
    ``h:occupation`` adapted occupation-time process along u
    """
    u = default_direction(system.manifold) if direction is None else np.asarray(direction, dtype=float)
    T = grid.horizon
    if spec == "h:linear":
        knots = np.array([0.0, T])
        vals = np.stack([np.zeros_like(u), T * u])
        return DeterministicCm(knots, vals, spec)
    if spec == "h:quadratic":
        knots = grid.times.copy()
        vals = (knots ** 2)[:, None] * u[None, :]
        return DeterministicCm(knots, vals, spec)
    if spec == "h:zero":
        knots = np.array([0.0, T])
        vals = np.zeros((2, len(u)))
        return DeterministicCm(knots, vals, spec)
    if spec == "h:occupation":
        return OccupationCm(u, 0, spec)
    raise ValueError(f"unknown h-process {spec!r}")


def make_vector_field(spec: str) -> VectorFieldProcess:
    """Build a catalog vector-field process from its config string.

    ``hfield:killing``  time-constant rotation field about the last axis
                        (divergence-free, zero time rate)
    ``hfield:radial``   time-constant gradient of the height coordinate
                        (div h_0 = -2 z on the unit 2-sphere)
    ``hfield:tradial``  t * gradient of the height (h_0 = 0)
    """
    if spec == "hfield:killing":
        return VectorFieldProcess(
            spec,
            value=lambda t, x: _killing_field(x),
            rate=lambda t, x: np.zeros_like(x),
            div0=lambda x: 0.0,
        )
    if spec == "hfield:radial":
        return VectorFieldProcess(
            spec,
            value=lambda t, x: _grad_height(x),
            rate=lambda t, x: np.zeros_like(x),
            div0=lambda x: -2.0 * float(x[-1]),
        )
    if spec == "hfield:tradial":
        return VectorFieldProcess(
            spec,
            value=lambda t, x: t * _grad_height(x),
            rate=lambda t, x: _grad_height(x),
            div0=lambda x: 0.0,
        )
    raise ValueError(f"unknown vector field {spec!r}")


def make_weight(spec: str, grid: TimeGrid):
    """Node-sampled weight function and its trapezoid quadrature.

    ``const``            1 at every node
    ``linear``           w(s) = s
    ``window:<r>,<w>``   half-open indicator of [r, r + w)
    """
    times = grid.times
    if spec == "const":
        w = np.ones_like(times)
    elif spec == "linear":
        w = times.copy()
    elif spec.startswith("window:"):
        r_str, width_str = spec.split(":", 1)[1].split(",")
        w = window_weights(grid, float(r_str), float(width_str))
    else:
        raise ValueError(f"unknown weight {spec!r}")
    quad = grid.dt * (w.sum() - 0.5 * (w[0] + w[-1]))
    return w, float(quad)


def window_weights(grid: TimeGrid, r: float, width: float) -> np.ndarray:
    """Half-open indicator [r, r + width) sampled at the grid nodes."""
    i0 = grid.node_index(r)
    i1 = grid.node_index(r + width)
    w = np.zeros_like(grid.times)
    w[i0:i1] = 1.0
    return w
