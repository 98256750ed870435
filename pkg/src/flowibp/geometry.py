"""Manifold catalog: ambient embeddings, tangent projections, curvature, transport.

Manifolds are represented extrinsically.  A point is an ambient coordinate
vector (numpy array of shape ``(ambient_dim,)``, or any leading batch shape
for the vectorized operations), constrained to the manifold:

* ``euclidean:<d>`` -- all of R^d, no constraint;
* ``circle``       -- unit circle in R^2, |x| = 1;
* ``sphere2``      -- unit sphere in R^3, |x| = 1.

Tangent vectors at x are ambient vectors orthogonal to x (sphere/circle)
or arbitrary (Euclidean).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import StepTooLarge, UnboundedVolume, ZeroVector

EUCLIDEAN = "euclidean"
CIRCLE = "circle"
SPHERE2 = "sphere2"

# Largest allowed chord length for a single transport step.
INJECTIVITY_SCALE = 0.5


@dataclass(frozen=True)
class ManifoldSpec:
    kind: str
    ambient_dim: int
    intrinsic_dim: int
    constraint_tolerance: float = 1e-9

    @property
    def is_flat(self) -> bool:
        return self.kind == EUCLIDEAN

    @property
    def is_compact(self) -> bool:
        return self.kind in (CIRCLE, SPHERE2)


def make_manifold(name: str) -> ManifoldSpec:
    """Build a catalog manifold from its config string."""
    if name.startswith("euclidean:"):
        d = int(name.split(":", 1)[1])
        if d < 1:
            raise ValueError(f"euclidean dimension must be >= 1, got {d}")
        return ManifoldSpec(EUCLIDEAN, d, d)
    if name == CIRCLE:
        return ManifoldSpec(CIRCLE, 2, 1)
    if name == SPHERE2:
        return ManifoldSpec(SPHERE2, 3, 2)
    raise ValueError(f"unknown manifold {name!r}")


def constraint_defect(spec: ManifoldSpec, p: np.ndarray) -> np.ndarray:
    """| |p| - 1 | for embedded manifolds, 0 for Euclidean space."""
    p = np.asarray(p, dtype=float)
    if spec.is_flat:
        return np.zeros(p.shape[:-1])
    return np.abs(np.linalg.norm(p, axis=-1) - 1.0)


def on_manifold(spec: ManifoldSpec, p: np.ndarray, tol: float | None = None) -> bool:
    tol = spec.constraint_tolerance if tol is None else tol
    return bool(np.all(constraint_defect(spec, p) <= tol))


def tangency_defect(spec: ManifoldSpec, x: np.ndarray, v: np.ndarray) -> np.ndarray:
    """|<v, x>| relative to |v|; zero for Euclidean space."""
    v = np.asarray(v, dtype=float)
    if spec.is_flat:
        return np.zeros(v.shape[:-1])
    return np.abs(np.einsum("...i,...i->...", x, v))


def project_to_manifold(spec: ManifoldSpec, p: np.ndarray) -> np.ndarray:
    """Closest-point projection onto the manifold (identity in flat space)."""
    p = np.asarray(p, dtype=float)
    if spec.is_flat:
        return p
    norms = np.linalg.norm(p, axis=-1, keepdims=True)
    if np.any(norms < 1e-300):
        raise ZeroVector("cannot radially project a zero vector")
    return p / norms


def tangent_project(spec: ManifoldSpec, x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Orthogonal projection of an ambient vector onto the tangent space at x.

    This is also the diffusion coefficient of the gradient Brownian systems
    on the embedded catalog manifolds.  Idempotent and self-adjoint.
    """
    w = np.asarray(w, dtype=float)
    if spec.is_flat:
        return w
    x = np.asarray(x, dtype=float)
    c = np.einsum("...i,...i->...", x, w)
    return w - c[..., None] * x


def ricci_sharp(spec: ManifoldSpec, x: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Ricci operator applied to a tangent vector at x.

    Constant-curvature catalog: (intrinsic_dim - 1) * v on the unit sphere,
    zero in flat space and on the circle.
    """
    v = np.asarray(v, dtype=float)
    coef = float(spec.intrinsic_dim - 1) if not spec.is_flat else 0.0
    return coef * v


def transport_step(spec: ManifoldSpec, x_from: np.ndarray, x_to: np.ndarray,
                   v: np.ndarray) -> np.ndarray:
    """One discrete parallel-transport step: project onto the new tangent
    space, then rescale to the original norm.

    Exact in flat space; per-step error O(|x_to - x_from|^2) on the sphere.
    """
    v = np.asarray(v, dtype=float)
    if spec.is_flat:
        return v
    x_from = np.asarray(x_from, dtype=float)
    x_to = np.asarray(x_to, dtype=float)
    if np.linalg.norm(x_to - x_from) >= INJECTIVITY_SCALE:
        raise StepTooLarge(
            f"|x_to - x_from| = {np.linalg.norm(x_to - x_from):.3g} exceeds "
            f"{INJECTIVITY_SCALE}")
    nv = np.linalg.norm(v)
    if nv == 0.0:
        return v
    u = tangent_project(spec, x_to, v)
    nu = np.linalg.norm(u)
    if nu < 1e-300:
        raise StepTooLarge("transported vector degenerated; step too large")
    return u * (nv / nu)


def tangent_frame(spec: ManifoldSpec, x: np.ndarray) -> np.ndarray:
    """Deterministic orthonormal tangent frame at x, shape (intrinsic_dim, ambient_dim)."""
    x = np.asarray(x, dtype=float)
    if spec.is_flat:
        return np.eye(spec.ambient_dim)
    if spec.kind == CIRCLE:
        return np.array([[-x[1], x[0]]])
    # sphere2: seed with the coordinate axis least aligned with x
    j = int(np.argmin(np.abs(x)))
    e = np.zeros(3)
    e[j] = 1.0
    v1 = e - x[j] * x
    v1 /= np.linalg.norm(v1)
    v2 = np.cross(x, v1)
    return np.stack([v1, v2])


def divergence(spec: ManifoldSpec, field, x: np.ndarray, *,
               mode: str = "numeric", step: float = 1e-5) -> float:
    """Riemannian divergence of a tangent vector field at x.

    Numeric mode central-differences the field along an orthonormal tangent
    frame, evaluating at projected points; analytic mode uses the field's
    registered closed form (``field.div(x)``).
    """
    x = np.asarray(x, dtype=float)
    if mode == "analytic":
        return float(field.div(x))
    if mode != "numeric":
        raise ValueError(f"unknown divergence mode {mode!r}")
    frame = tangent_frame(spec, x)
    fn = field if callable(field) else field.value
    total = 0.0
    for e in frame:
        fp = fn(project_to_manifold(spec, x + step * e))
        fm = fn(project_to_manifold(spec, x - step * e))
        total += float(np.dot((fp - fm) / (2.0 * step), e))
    return total


def riemannian_volume(spec: ManifoldSpec) -> float:
    """Total Riemannian volume; raises for (infinite) Euclidean space."""
    if spec.kind == SPHERE2:
        return 4.0 * np.pi
    if spec.kind == CIRCLE:
        return 2.0 * np.pi
    raise UnboundedVolume("euclidean space has infinite volume")


def uniform_sample(spec: ManifoldSpec, rng: np.random.Generator,
                   size: int | None = None) -> np.ndarray:
    """Sample uniformly w.r.t. the Riemannian measure (compact manifolds only)."""
    if spec.is_flat:
        raise UnboundedVolume("cannot sample uniformly from euclidean space")
    n = 1 if size is None else size
    g = rng.standard_normal((n, spec.ambient_dim))
    pts = project_to_manifold(spec, g)
    return pts[0] if size is None else pts
