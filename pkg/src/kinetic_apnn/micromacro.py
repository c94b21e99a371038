"""Micro-macro residuals, the acoustic limit, and the recombination identity.

Fields are split as h = m . (weighted fluid profiles) + eps * g with the
microscopic part g orthogonal to the fluid subspace.  The macroscopic residual
is the fluid-moment balance, the microscopic residual the orthogonal
remainder of the transport-collision balance; dotting the macroscopic
residual back into the profiles and adding the microscopic one reproduces the
residual of the full kinetic equation identically, for arbitrary fields, and
that identity is what the tests pin down.

All operations are pure functions over batched arrays: a leading axis of
collocation points (or spatial nodes), then moment/velocity axes.  Velocity
structure enters only through the fluid basis and the collision coupling, so
every residual can also be evaluated at off-grid velocity points (used by the
finite-difference velocity-gradient losses).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .gpc import SgCoupling
from .phase_space import FluidBasis


class ProjectionNotApplied(Exception):
    """A microscopic field still carries a fluid component."""


@dataclass
class FieldWithDerivatives:
    """Values and first derivatives of one chaos mode at collocation points.

    Macro entries have shape (N, dim+2); micro entries (N, n_v).  Only the
    slots a residual consumes need to be present.
    """

    m: Optional[np.ndarray] = None
    m_t: Optional[np.ndarray] = None
    m_x: Optional[np.ndarray] = None
    g: Optional[np.ndarray] = None
    g_t: Optional[np.ndarray] = None
    g_x: Optional[np.ndarray] = None
    g_v: Optional[np.ndarray] = None


@dataclass
class ResidualSample:
    """One collocation point's residuals, for CSV dumps and inspection."""

    mode: int
    t: float
    x: float
    d1: np.ndarray
    d2: np.ndarray


def flux_jacobian(basis: FluidBasis, direction: int = 0) -> np.ndarray:
    """Fluid-moment flux matrix: coefficients of the projected velocity flux.

    Entry (i, j) is the Gram-corrected moment of v_a * (profile j) against
    profile i.  In one dimension its eigenvalues are the acoustic speeds
    {0, +-sqrt(1 + c_T^2)} with c_T the temperature coupling.
    """
    v_a = basis.vgrid.nodes[:, direction]
    return basis.coef_map.T @ (v_a[:, None] * basis.values)


def transport_profiles(basis: FluidBasis, A: Optional[np.ndarray] = None,
                       v_points: Optional[np.ndarray] = None) -> np.ndarray:
    """Microscopic transport profiles (I - P)(v * profile_j) per moment j.

    Returns shape (n_points, dim+2); defaults to the velocity grid nodes.
    Only the one-dimensional-in-x transport (direction 0) is needed by the
    desk problems.
    """
    if A is None:
        A = flux_jacobian(basis)
    if v_points is None:
        vals = basis.values
        v = basis.vgrid.nodes[:, 0]
    else:
        vals = basis.eval(v_points)
        v = np.atleast_2d(np.asarray(v_points, dtype=float).T).T[:, 0]
    return v[:, None] * vals - vals @ A


def v_moment_map(basis: FluidBasis, direction: int = 0) -> np.ndarray:
    """Matrix turning velocity-sampled fields into moments of v_a * field."""
    v_a = basis.vgrid.nodes[:, direction]
    return v_a[:, None] * basis.coef_map


def macro_residual(
    fields: FieldWithDerivatives,
    basis: FluidBasis,
    eps: float,
    A: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Fluid-moment balance d1 = dm/dt + A dm/dx + eps d/dx <v g profiles>.

    Vanishes identically on exact solutions of the coupled system.
    """
    if A is None:
        A = flux_jacobian(basis)
    d1 = fields.m_t + fields.m_x @ A.T
    if eps != 0.0 and fields.g_x is not None:
        d1 = d1 + eps * (fields.g_x @ v_moment_map(basis))
    return d1


def micro_residual(
    fields_per_mode: list[FieldWithDerivatives],
    coupling: SgCoupling,
    basis: FluidBasis,
    eps: float,
    A: Optional[np.ndarray] = None,
    projection_tol: Optional[float] = 1e-8,
) -> np.ndarray:
    """Microscopic balance d2 per mode, shape (K, N, n_v).

    d2_i = eps dg_i/dt + (I-P)(v dhfluid_i/dx) + eps (I-P)(v dg_i/dx)
           - sum_k L_ik g_k.
    Raises ProjectionNotApplied when a g mode retains a fluid component
    beyond ``projection_tol`` (pass None to skip the check).
    """
    if A is None:
        A = flux_jacobian(basis)
    Psi = transport_profiles(basis, A)
    Mv = v_moment_map(basis)
    g_all = np.stack([f.g for f in fields_per_mode])
    if projection_tol is not None:
        for i, f in enumerate(fields_per_mode):
            size = float(np.max(np.abs(basis.moments(f.g))))
            scale = max(float(np.max(np.abs(f.g))), 1.0)
            if size > projection_tol * scale:
                raise ProjectionNotApplied(
                    f"mode {i + 1} microscopic field has fluid content {size:.3e}"
                )
    coll = coupling.apply(g_all)
    v = basis.vgrid.nodes[:, 0]
    out = []
    for i, f in enumerate(fields_per_mode):
        d2 = f.m_x @ Psi.T - coll[i]
        if eps != 0.0:
            term = v[None, :] * f.g_x - (f.g_x @ Mv) @ basis.values.T
            d2 = d2 + eps * (f.g_t + term)
        out.append(d2)
    return np.stack(out)


def initial_residual(h_net: np.ndarray, h_init: np.ndarray) -> np.ndarray:
    """Pointwise mismatch of the assembled field against the initial datum."""
    return np.asarray(h_net) - np.asarray(h_init)


def boundary_residual(face_pairs) -> np.ndarray:
    """Sum of squared periodic mismatches over paired faces.

    ``face_pairs`` is a sequence of (values_plus, values_minus) arrays, one
    pair per coordinate direction (a single pair in one dimension).
    """
    total = None
    for plus, minus in face_pairs:
        term = (np.asarray(plus) - np.asarray(minus)) ** 2
        total = term if total is None else total + term
    return total


def acoustic_rhs(m_x: np.ndarray, A: np.ndarray) -> np.ndarray:
    """Time derivative of the fluid moments in the vanishing-stiffness limit."""
    return -(m_x @ A.T)


def reduced_flux_jacobian(basis3: FluidBasis) -> np.ndarray:
    """Flux Jacobian of a higher-dimensional basis for one-dimensional-in-x flow.

    For the three-dimensional basis this is the 5x5 matrix whose nonzero sound
    branch travels at sqrt(1 + 2/3) = sqrt(5/3).
    """
    return flux_jacobian(basis3, direction=0)


def recombine_residual(d1: np.ndarray, d2: np.ndarray,
                       basis: FluidBasis) -> np.ndarray:
    """Combined source -d1 . profiles - d2 of the full-equation error balance."""
    return -(np.asarray(d1) @ basis.values.T) - np.asarray(d2)


def full_transport_residual(
    fields_per_mode: list[FieldWithDerivatives],
    coupling: SgCoupling,
    basis: FluidBasis,
    eps: float,
) -> np.ndarray:
    """Residual of the full kinetic system for the assembled h = hfluid + eps g.

    Independent of the micro-macro split; used as the oracle for the
    recombination identity.
    """
    v = basis.vgrid.nodes[:, 0]
    h = np.stack(
        [f.m @ basis.values.T + eps * f.g for f in fields_per_mode]
    )
    h_t = np.stack(
        [f.m_t @ basis.values.T + eps * f.g_t for f in fields_per_mode]
    )
    h_x = np.stack(
        [f.m_x @ basis.values.T + eps * f.g_x for f in fields_per_mode]
    )
    coll = coupling.apply(h)
    return h_t + v[None, None, :] * h_x - coll / eps


def dump_residual_csv(path, samples: list[ResidualSample]) -> None:
    """Write residual samples as rows (mode, t, x, d1 components..., |d2|)."""
    rows = []
    for s in samples:
        rows.append(
            [s.mode, s.t, s.x, *np.asarray(s.d1, dtype=float).ravel(),
             float(np.linalg.norm(np.atleast_1d(s.d2)))]
        )
    arr = np.asarray(rows, dtype=float)
    np.savetxt(path, arr, delimiter=",", fmt="%.17e",
               header="mode,t,x,d1...,norm_d2", comments="")
