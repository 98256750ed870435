"""Catalog of diffusion systems driving the stochastic flows.

A system couples a manifold with a diffusion coefficient and two drift
fields: ``A`` enters the Stratonovich equation

    dx = X(x) . dB + A(x) dt        (. = Stratonovich product)

while ``Z`` is the registered drift of the generator (1/2) Laplacian + Z,
used by the damped transport.  Both drifts are selected from a small coded
family so that the compiled simulation kernel and the pure-numpy reference
integrator share exactly the same definitions:

    euclidean-bm:<d>       X = identity on R^d, A = Z = 0
    euclidean-ou:<d>       X = identity, A(x) = Z(x) = -x
    circle-bm              X = tangent projection on S^1, A = Z = 0
    sphere2-bm             X = tangent projection on S^2, A = Z = 0
    sphere2-drift:gradz    gradient system with A = Z = grad of the height z
    sphere2-drift:killing  gradient system with A = Z = rotation field about z

For the projection (gradient Brownian) systems X(x)X(x)* is the identity
on the tangent space and the noise dimension equals the ambient dimension.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geometry
from .geometry import ManifoldSpec, make_manifold

DRIFT_NONE = 0
DRIFT_LINEAR = 1   # c * x
DRIFT_GRADZ = 2    # c * (e_last - x_last * x), tangent gradient of the height
DRIFT_KILLING = 3  # c * (-x_1, x_0, 0, ...), rotation in the first two axes


@dataclass(frozen=True)
class SdeSystem:
    name: str
    manifold: ManifoldSpec
    noise_dim: int
    is_gradient: bool
    a_code: int = DRIFT_NONE
    a_param: float = 0.0
    z_code: int = DRIFT_NONE
    z_param: float = 0.0

    # -- diffusion -------------------------------------------------------
    def apply_diffusion(self, x: np.ndarray, w: np.ndarray) -> np.ndarray:
        """X(x) w: identity in flat space, tangent projection otherwise."""
        return geometry.tangent_project(self.manifold, x, w)

    def apply_diffusion_adjoint(self, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        """X(x)* v; the projection is self-adjoint, identity is its own adjoint."""
        return geometry.tangent_project(self.manifold, x, v)

    def diffusion_action(self, x: np.ndarray, mat: np.ndarray,
                         w: np.ndarray) -> np.ndarray:
        """Columnwise dX(x)[mat e_j](w) for the variational equation."""
        if self.manifold.is_flat:
            return np.zeros_like(mat)
        c = np.einsum("...i,...i->...", x, w)
        q = np.einsum("...i,...ij->...j", w, mat)
        return -(c[..., None, None] * mat + x[..., :, None] * q[..., None, :])

    # -- drift fields ----------------------------------------------------
    def drift(self, x: np.ndarray) -> np.ndarray:
        return _coded_field(self.a_code, self.a_param, x)

    def drift_action(self, x: np.ndarray, mat: np.ndarray) -> np.ndarray:
        return _coded_field_action(self.a_code, self.a_param, x, mat)

    def gen_drift(self, x: np.ndarray) -> np.ndarray:
        return _coded_field(self.z_code, self.z_param, x)

    def gen_drift_matrix(self, x: np.ndarray) -> np.ndarray:
        """Ambient Jacobian of Z at x, shape (..., a, a)."""
        a = self.manifold.ambient_dim
        eye = np.eye(a)
        mat = np.broadcast_to(eye, x.shape + (a,)).copy()
        return _coded_field_action(self.z_code, self.z_param, x, mat)

    @property
    def ricci_coefficient(self) -> float:
        """Scalar c with Ricci-sharp = c * identity on the tangent space."""
        return 0.0 if self.manifold.is_flat else float(self.manifold.intrinsic_dim - 1)


def _coded_field(code: int, c: float, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if code == DRIFT_NONE:
        return np.zeros_like(x)
    if code == DRIFT_LINEAR:
        return c * x
    if code == DRIFT_GRADZ:
        out = -c * x[..., -1:] * x
        out[..., -1] += c
        return out
    if code == DRIFT_KILLING:
        out = np.zeros_like(x)
        out[..., 0] = -c * x[..., 1]
        out[..., 1] = c * x[..., 0]
        return out
    raise ValueError(f"unknown drift code {code}")


def _coded_field_action(code: int, c: float, x: np.ndarray,
                        mat: np.ndarray) -> np.ndarray:
    """Columnwise directional derivative of the coded field: dA(x)[mat e_j]."""
    if code == DRIFT_NONE:
        return np.zeros_like(mat)
    if code == DRIFT_LINEAR:
        return c * mat
    if code == DRIFT_GRADZ:
        zrow = mat[..., -1, :]
        return -c * (x[..., :, None] * zrow[..., None, :]
                     + x[..., -1, None, None] * mat)
    if code == DRIFT_KILLING:
        out = np.zeros_like(mat)
        out[..., 0, :] = -c * mat[..., 1, :]
        out[..., 1, :] = c * mat[..., 0, :]
        return out
    raise ValueError(f"unknown drift code {code}")


def make_system(name: str) -> SdeSystem:
    """Build a catalog system from its config string."""
    if name.startswith("euclidean-bm:"):
        mf = make_manifold("euclidean:" + name.split(":", 1)[1])
        return SdeSystem(name, mf, mf.ambient_dim, is_gradient=True)
    if name.startswith("euclidean-ou:"):
        mf = make_manifold("euclidean:" + name.split(":", 1)[1])
        return SdeSystem(name, mf, mf.ambient_dim, is_gradient=True,
                         a_code=DRIFT_LINEAR, a_param=-1.0,
                         z_code=DRIFT_LINEAR, z_param=-1.0)
    if name == "circle-bm":
        mf = make_manifold("circle")
        return SdeSystem(name, mf, 2, is_gradient=True)
    if name == "sphere2-bm":
        mf = make_manifold("sphere2")
        return SdeSystem(name, mf, 3, is_gradient=True)
    if name.startswith("sphere2-drift:"):
        which = name.split(":", 1)[1]
        mf = make_manifold("sphere2")
        codes = {"gradz": DRIFT_GRADZ, "killing": DRIFT_KILLING}
        if which not in codes:
            raise ValueError(f"unknown sphere2 drift {which!r}")
        return SdeSystem(name, mf, 3, is_gradient=True,
                         a_code=codes[which], a_param=1.0,
                         z_code=codes[which], z_param=1.0)
    raise ValueError(f"unknown system {name!r}")


def default_start(manifold: ManifoldSpec) -> np.ndarray:
    """Canonical start point used when a config does not pin one."""
    if manifold.is_flat:
        return np.zeros(manifold.ambient_dim)
    x = np.zeros(manifold.ambient_dim)
    x[0] = 1.0
    return x


def default_direction(manifold: ManifoldSpec) -> np.ndarray:
    """Canonical unit tangent direction at the default start point."""
    v = np.zeros(manifold.ambient_dim)
    v[-1] = 1.0
    return v
