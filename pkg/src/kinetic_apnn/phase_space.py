"""Phase-space discretization: grids, Maxwellian weights, fluid basis and norms.

The spatial domain is the torus [-pi, pi)^d with uniform nodes; the velocity
domain is the box [-v_max, v_max]^d with an inclusive uniform grid and
trapezoidal quadrature weights.  All fields live on the tensor grid as arrays
of shape (n_x_total, n_v_total).  The global Maxwellian is the standard normal
density; its square root is the weight carried explicitly by the fluid basis,
so fields themselves are plain (unweighted) L^2 functions.

Everything here is immutable after construction and safe to share across
threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class GramNotOrthonormal(Exception):
    """Raised when the velocity grid under-resolves the fluid basis."""


class GridMismatch(Exception):
    """Raised when a field's shape does not match the grids it claims."""


def maxwellian(v: np.ndarray) -> np.ndarray:
    """Standard-normal equilibrium density evaluated at velocity nodes.

    Parameters
    ----------
    v : ndarray, shape (N, dim) or (N,)
        Velocity points.
    """
    v = np.atleast_2d(np.asarray(v, dtype=float).T).T
    d = v.shape[1]
    return (2.0 * np.pi) ** (-0.5 * d) * np.exp(-0.5 * np.sum(v * v, axis=1))


def sqrt_maxwellian(v: np.ndarray) -> np.ndarray:
    return np.sqrt(maxwellian(v))


@dataclass(frozen=True)
class SpatialGrid:
    """Uniform periodic grid on the torus [-pi, pi)^d."""

    dim: int
    n: int

    def __post_init__(self):
        if not 1 <= self.dim <= 3:
            raise ValueError(f"spatial dim must be in 1..3, got {self.dim}")
        if self.n < 4:
            raise ValueError(f"need at least 4 points per dimension, got {self.n}")

    @property
    def spacing(self) -> float:
        return 2.0 * np.pi / self.n

    @property
    def nodes1d(self) -> np.ndarray:
        return -np.pi + self.spacing * np.arange(self.n)

    @property
    def n_total(self) -> int:
        return self.n**self.dim

    @property
    def cell_volume(self) -> float:
        return self.spacing**self.dim

    def nodes(self) -> np.ndarray:
        """All nodes, shape (n_total, dim), last axis fastest."""
        grids = np.meshgrid(*([self.nodes1d] * self.dim), indexing="ij")
        return np.stack([g.ravel() for g in grids], axis=1)

    def wrap(self, idx: np.ndarray) -> np.ndarray:
        """Periodic index wrap along one dimension."""
        return np.mod(idx, self.n)


@dataclass(frozen=True)
class VelocityGrid:
    """Truncated uniform velocity grid on [-v_max, v_max]^d with trapezoid weights.

    The grid is symmetric under v -> -v and carries positive quadrature
    weights.  Integrals of Maxwellian-weighted polynomials are exponentially
    accurate in n for v_max >= 8 (trapezoid rule on a rapidly decaying smooth
    integrand); the truncated Gaussian mass must land in
    [1 - tol_mass, 1 + 1e-12].
    """

    dim: int
    n: int
    v_max: float
    tol_mass: float = 1e-8

    def __post_init__(self):
        if not 1 <= self.dim <= 3:
            raise ValueError(f"velocity dim must be in 1..3, got {self.dim}")
        if self.n < 8:
            raise ValueError(f"degenerate velocity grid rejected (n={self.n} < 8)")
        if self.v_max <= 0:
            raise ValueError("v_max must be positive")
        mass = float(np.sum(self.weights * maxwellian(self.nodes)))
        if not (1.0 - self.tol_mass <= mass <= 1.0 + 1e-12):
            raise ValueError(
                f"truncated Maxwellian mass {mass:.3e} outside "
                f"[1 - {self.tol_mass:.1e}, 1]; enlarge v_max or refine the grid"
            )

    @property
    def spacing(self) -> float:
        return 2.0 * self.v_max / (self.n - 1)

    @property
    def nodes1d(self) -> np.ndarray:
        return np.linspace(-self.v_max, self.v_max, self.n)

    @property
    def weights1d(self) -> np.ndarray:
        w = np.full(self.n, self.spacing)
        w[0] *= 0.5
        w[-1] *= 0.5
        return w

    @property
    def n_total(self) -> int:
        return self.n**self.dim

    @property
    def nodes(self) -> np.ndarray:
        grids = np.meshgrid(*([self.nodes1d] * self.dim), indexing="ij")
        return np.stack([g.ravel() for g in grids], axis=1)

    @property
    def weights(self) -> np.ndarray:
        w = self.weights1d
        out = w
        for _ in range(self.dim - 1):
            out = np.multiply.outer(out, w)
        return out.ravel()

    @property
    def speeds(self) -> np.ndarray:
        return np.linalg.norm(self.nodes, axis=1)


def fluid_basis_values(v: np.ndarray, dim: int) -> np.ndarray:
    """Collision-invariant profiles (1, v_1..v_d, (|v|^2-d)/sqrt(2d)) times sqrt(M).

    Returns shape (N, dim + 2).
    """
    v = np.atleast_2d(np.asarray(v, dtype=float).T).T
    if v.shape[1] != dim:
        raise GridMismatch(f"points have dim {v.shape[1]}, expected {dim}")
    M = sqrt_maxwellian(v)
    cols = [np.ones(v.shape[0])]
    cols.extend(v[:, a] for a in range(dim))
    cols.append((np.sum(v * v, axis=1) - dim) / math.sqrt(2.0 * dim))
    return np.stack(cols, axis=1) * M[:, None]


def fluid_basis_dv_values(v: np.ndarray, dim: int) -> np.ndarray:
    """Velocity gradients of the weighted fluid profiles, shape (N, dim+2, dim)."""
    v = np.atleast_2d(np.asarray(v, dtype=float).T).T
    N = v.shape[0]
    M = sqrt_maxwellian(v)
    m = dim + 2
    out = np.zeros((N, m, dim))
    # d/dv_a (phi_i M) = (dphi_i/dv_a - phi_i v_a / 2) M
    phi = np.empty((N, m))
    phi[:, 0] = 1.0
    for a in range(dim):
        phi[:, 1 + a] = v[:, a]
    phi[:, dim + 1] = (np.sum(v * v, axis=1) - dim) / math.sqrt(2.0 * dim)
    dphi = np.zeros((N, m, dim))
    for a in range(dim):
        dphi[:, 1 + a, a] = 1.0
        dphi[:, dim + 1, a] = 2.0 * v[:, a] / math.sqrt(2.0 * dim)
    for a in range(dim):
        out[:, :, a] = (dphi[:, :, a] - 0.5 * phi * v[:, a : a + 1]) * M[:, None]
    return out


@dataclass(frozen=True)
class FluidBasis:
    """Discrete orthonormal basis of the collision-invariant subspace.

    ``values`` holds the weighted profiles at the grid nodes, ``gram`` the raw
    discrete Gram matrix (identity up to quadrature error), and ``coef_map``
    the Gram-corrected moment functional: coefficients of the orthogonal
    projection are ``values_of_field @ coef_map``.  With that correction the
    projector is exactly idempotent and self-adjoint in the weighted inner
    product, independent of quadrature resolution.
    """

    vgrid: VelocityGrid
    values: np.ndarray  # (n_v_total, dim+2)
    gram: np.ndarray  # (dim+2, dim+2)
    coef_map: np.ndarray  # (n_v_total, dim+2)
    tol_gram: float
    gram_defect: float

    @property
    def dim(self) -> int:
        return self.vgrid.dim

    @property
    def n_fields(self) -> int:
        return self.vgrid.dim + 2

    def eval(self, v: np.ndarray) -> np.ndarray:
        """Weighted profiles at arbitrary velocity points."""
        return fluid_basis_values(v, self.dim)

    def eval_dv(self, v: np.ndarray) -> np.ndarray:
        return fluid_basis_dv_values(v, self.dim)

    def moments(self, h: np.ndarray) -> np.ndarray:
        """Projection coefficients of fields sampled on the velocity grid.

        ``h`` has shape (..., n_v_total); returns (..., dim+2).
        """
        return np.asarray(h) @ self.coef_map

    def project(self, h: np.ndarray) -> np.ndarray:
        """Orthogonal projection onto the collision-invariant subspace."""
        return self.moments(h) @ self.values.T

    def projector_matrix(self) -> np.ndarray:
        """Dense projector over velocity nodes (n_v_total x n_v_total)."""
        return self.values @ self.coef_map.T


def build_fluid_basis(vgrid: VelocityGrid, tol_gram: float = 1e-8) -> FluidBasis:
    """Assemble the discrete fluid basis and validate its orthonormality.

    Raises
    ------
    GramNotOrthonormal
        If any off-diagonal Gram entry (or diagonal deviation from one)
        exceeds ``tol_gram``, signalling an under-resolved velocity grid.
    """
    vals = fluid_basis_values(vgrid.nodes, vgrid.dim)
    w = vgrid.weights
    gram = vals.T @ (w[:, None] * vals)
    defect = float(np.max(np.abs(gram - np.eye(gram.shape[0]))))
    if defect > tol_gram:
        raise GramNotOrthonormal(
            f"fluid-basis Gram defect {defect:.3e} exceeds tol {tol_gram:.1e} "
            f"(n={vgrid.n}, v_max={vgrid.v_max})"
        )
    coef_map = (w[:, None] * vals) @ np.linalg.inv(gram)
    return FluidBasis(
        vgrid=vgrid,
        values=vals,
        gram=gram,
        coef_map=coef_map,
        tol_gram=tol_gram,
        gram_defect=defect,
    )


@dataclass(frozen=True)
class GridFunction:
    """Values of a phase-space field h(x, v) on the tensor grid."""

    values: np.ndarray  # (n_x_total, n_v_total)
    sgrid: SpatialGrid
    vgrid: VelocityGrid

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", vals)
        if vals.shape != (self.sgrid.n_total, self.vgrid.n_total):
            raise GridMismatch(
                f"field shape {vals.shape} does not match grids "
                f"({self.sgrid.n_total}, {self.vgrid.n_total})"
            )
        if not np.all(np.isfinite(vals)):
            raise ValueError("grid function contains non-finite values")

    def with_values(self, values: np.ndarray) -> "GridFunction":
        return GridFunction(values, self.sgrid, self.vgrid)

    def save_csv(self, path) -> None:
        """Write rows of (x-index, v-index, value)."""
        nx, nv = self.values.shape
        xi, vi = np.meshgrid(np.arange(nx), np.arange(nv), indexing="ij")
        table = np.column_stack([xi.ravel(), vi.ravel(), self.values.ravel()])
        np.savetxt(path, table, fmt=["%d", "%d", "%.17e"], delimiter=",",
                   header="x_index,v_index,value", comments="")

    def save_binary(self, path) -> None:
        np.save(path, self.values)

    @staticmethod
    def load_csv(path, sgrid: SpatialGrid, vgrid: VelocityGrid) -> "GridFunction":
        table = np.loadtxt(path, delimiter=",", skiprows=1)
        vals = np.zeros((sgrid.n_total, vgrid.n_total))
        vals[table[:, 0].astype(int), table[:, 1].astype(int)] = table[:, 2]
        return GridFunction(vals, sgrid, vgrid)


@dataclass(frozen=True)
class FluidMoments:
    """Fluid coefficients (density, velocity, temperature) over the spatial grid."""

    rho: np.ndarray  # (n_x_total,)
    u: np.ndarray  # (n_x_total, dim)
    T: np.ndarray  # (n_x_total,)

    @property
    def dim(self) -> int:
        return self.u.shape[1]

    def as_array(self) -> np.ndarray:
        """Stacked coefficients, shape (n_x_total, dim + 2)."""
        return np.column_stack([self.rho, self.u, self.T])

    @staticmethod
    def from_array(m: np.ndarray) -> "FluidMoments":
        d = m.shape[1] - 2
        return FluidMoments(rho=m[:, 0], u=m[:, 1 : 1 + d], T=m[:, 1 + d])


def project_fluid(h: GridFunction, basis: FluidBasis):
    """Split h into its fluid part and microscopic remainder.

    Returns ``(moments, h_fluid, h_perp)`` with ``h = h_fluid + h_perp``
    exactly, the remainder orthogonal to every weighted fluid profile, and the
    projection idempotent (all up to float roundoff).
    """
    coeffs = basis.moments(h.values)
    fluid_vals = coeffs @ basis.values.T
    perp_vals = h.values - fluid_vals
    return (
        FluidMoments.from_array(coeffs),
        h.with_values(fluid_vals),
        h.with_values(perp_vals),
    )


# --- norms and moments -------------------------------------------------------


def l2_inner(f: GridFunction, g: GridFunction) -> float:
    wx = f.sgrid.cell_volume
    wv = f.vgrid.weights
    return float(wx * np.sum((f.values * g.values) @ wv))


def l2_norm(h: GridFunction) -> float:
    return math.sqrt(max(l2_inner(h, h), 0.0))


def lambda_norm(h: GridFunction, gamma: float) -> float:
    """Collision-weighted norm ||h (1+|v|)^{gamma/2}|| over phase space.

    Reduces to the plain L^2 norm for gamma = 0.
    """
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("kernel exponent gamma must lie in [0, 1]")
    wgt = (1.0 + h.vgrid.speeds) ** gamma
    wx = h.sgrid.cell_volume
    wv = h.vgrid.weights * wgt
    return math.sqrt(max(float(wx * np.sum((h.values**2) @ wv)), 0.0))


def macro_flux(h: GridFunction, basis: FluidBasis) -> np.ndarray:
    """Per-node velocity-flux moments of the weighted fluid profiles.

    Returns shape (n_x_total, dim + 2, dim): entry [x, i, a] is the
    Gram-corrected moment of v_a * h against the i-th weighted profile.
    """
    v = basis.vgrid.nodes  # (nv, dim)
    out = np.empty((h.values.shape[0], basis.n_fields, basis.dim))
    for a in range(basis.dim):
        out[:, :, a] = (h.values * v[:, a]) @ basis.coef_map
    return out


def x_derivative(h: GridFunction, axis: int = 0) -> np.ndarray:
    """Second-order central difference in x (periodic), same shape as values."""
    sg = h.sgrid
    vals = h.values.reshape((sg.n,) * sg.dim + (-1,))
    ax = axis
    up = np.roll(vals, -1, axis=ax)
    dn = np.roll(vals, 1, axis=ax)
    der = (up - dn) / (2.0 * sg.spacing)
    return der.reshape(h.values.shape)


def v_derivative(h: GridFunction, axis: int = 0) -> np.ndarray:
    """Central difference in v (one-sided at the box edges)."""
    vg = h.vgrid
    vals = h.values.reshape((h.values.shape[0],) + (vg.n,) * vg.dim)
    der = np.gradient(vals, vg.spacing, axis=1 + axis)
    return der.reshape(h.values.shape)


def h1_norm_squared(h: GridFunction) -> float:
    """Discrete ||h||^2 + ||grad_x h||^2 + ||grad_v h||^2 under the grid weights.

    Grid fields use central differences; network fields should instead be
    evaluated together with their autodiff derivatives and summed with the
    same quadrature weights.
    """
    total = l2_inner(h, h)
    for a in range(h.sgrid.dim):
        d = h.with_values(x_derivative(h, axis=a))
        total += l2_inner(d, d)
    for a in range(h.vgrid.dim):
        d = h.with_values(v_derivative(h, axis=a))
        total += l2_inner(d, d)
    return total


def h1_norm(h: GridFunction) -> float:
    return math.sqrt(max(h1_norm_squared(h), 0.0))
