"""Discrete linearized collision operators and their hypocoercivity certificates.

Two backends are provided.  The relaxation surrogate ``L = P - I`` (P the
discrete fluid projector) satisfies every hypocoercivity hypothesis exactly
and is the fast default for training and zero-tolerance tests.  The
quadrature backend discretizes the linearized hard-potential operator with
Grad-cutoff kernels ``C |v-v*|^gamma b(cos theta, z)``; it is assembled from
its Dirichlet form (a nonnegative sum of squared collision differences), so
the discrete operator is symmetric negative semidefinite by construction, and
the conservation laws are then enforced exactly by projecting onto the
orthogonal complement of the collision invariants.

In one velocity dimension the quadrature backend uses Kac-style random
rotations of velocity pairs, the only nontrivial binary interaction on the
line.  Rotations conserve mass and energy pointwise but not momentum, so the
momentum invariant is supplied by the same conservation projection that
absorbs the interpolation error of the other invariants; the assembled matrix
then annihilates all dim+2 invariants to machine precision.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np
import scipy.linalg

from .phase_space import FluidBasis, VelocityGrid, build_fluid_basis, maxwellian

AngularFunction = Union[float, Callable[[np.ndarray], np.ndarray]]


class NonPositiveFrequency(Exception):
    """Collision frequency lost positivity (invalid kernel or quadrature)."""


class KernelMarginViolated(Exception):
    """The deterministic kernel part does not dominate the random part."""


class GapNonPositive(Exception):
    """No spectral gap on the complement of the collision invariants."""


def _as_angular(fn: AngularFunction) -> Callable[[np.ndarray], np.ndarray]:
    if callable(fn):
        return fn
    value = float(fn)
    return lambda eta: np.full_like(np.asarray(eta, dtype=float), value)


@dataclass(frozen=True)
class KernelSpec:
    """Hard-potential kernel C |v-v*|^gamma (b0(cos) + b1(cos) z), |z| <= C_z.

    ``q_weight`` is the exponent of the mode weights used by the stochastic
    energy; the admissibility margin requires
    b0 >= (2^q + 2) |b1| C_z pointwise in cos(theta).
    """

    gamma: float = 0.0
    C: float = 1.0
    b0: AngularFunction = 1.0
    b1: AngularFunction = 0.0
    C_z: float = 1.0
    q_weight: int = 3

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if self.C <= 0:
            raise ValueError("kernel strength C must be positive")
        if self.C_z < 0:
            raise ValueError("C_z must be nonnegative")

    def b0_fn(self) -> Callable[[np.ndarray], np.ndarray]:
        return _as_angular(self.b0)

    def b1_fn(self) -> Callable[[np.ndarray], np.ndarray]:
        return _as_angular(self.b1)

    def margin(self, eta: Optional[np.ndarray] = None) -> float:
        """Smallest value of b0 - (2^q + 2)|b1| C_z on a check grid."""
        if eta is None:
            eta = np.linspace(-1.0, 1.0, 401)
        b0 = self.b0_fn()(eta)
        b1 = self.b1_fn()(eta)
        return float(np.min(b0 - (2**self.q_weight + 2) * np.abs(b1) * self.C_z))

    def check_margin(self) -> None:
        m = self.margin()
        if m < 0:
            raise KernelMarginViolated(
                f"b0 fails to dominate the random part: margin {m:.3e} < 0"
            )


def maxwell_kernel(dim: int, C: float = 1.0, b1_strength: float = 0.0,
                   C_z: float = 1.0, q_weight: int = 3) -> KernelSpec:
    """Maxwell-molecule kernel (gamma = 0) with normalized angular mass.

    With ``b1_strength = 0`` the collision frequency is identically C.
    """
    measure = {1: 2.0 * np.pi, 2: 2.0 * np.pi, 3: 4.0 * np.pi}[dim]
    return KernelSpec(
        gamma=0.0, C=C, b0=1.0 / measure, b1=b1_strength / measure,
        C_z=C_z, q_weight=q_weight,
    )


# --- angular quadratures and collision rules ---------------------------------


def _angular_rule(dim: int, n_angle: int):
    """Quadrature for the angular collision variable.

    Returns (parameters, weights); the parameter encodes the rotation angle
    (dim 1) or the unit vector sigma (dims 2, 3).  Weights integrate to the
    full angular measure (2 pi for the circle parameterizations, 4 pi for S^2).
    """
    if dim == 1:
        theta = (np.arange(n_angle) + 0.5) * (2.0 * np.pi / n_angle)
        w = np.full(n_angle, 2.0 * np.pi / n_angle)
        return theta, w
    if dim == 2:
        alpha = (np.arange(n_angle) + 0.5) * (2.0 * np.pi / n_angle)
        sigma = np.stack([np.cos(alpha), np.sin(alpha)], axis=1)
        w = np.full(n_angle, 2.0 * np.pi / n_angle)
        return sigma, w
    # dim 3: Gauss-Legendre in the polar cosine, midpoint in azimuth
    n_pol = max(2, n_angle // 4)
    n_azi = max(4, n_angle)
    c, gw = np.polynomial.legendre.leggauss(n_pol)
    alpha = (np.arange(n_azi) + 0.5) * (2.0 * np.pi / n_azi)
    s = np.sqrt(1.0 - c**2)
    sigma = np.concatenate(
        [
            np.stack(
                [np.outer(s, np.cos(alpha)).ravel(),
                 np.outer(s, np.sin(alpha)).ravel(),
                 np.repeat(c, n_azi)],
                axis=1,
            )
        ]
    )
    w = np.repeat(gw, n_azi) * (2.0 * np.pi / n_azi)
    return sigma, w


def _post_collision(v: np.ndarray, vs: np.ndarray, param, dim: int):
    """Post-collisional velocities and the deviation cosine for one angle."""
    if dim == 1:
        ct, st = math.cos(param), math.sin(param)
        vp = ct * v + st * vs
        vsp = -st * v + ct * vs
        return vp, vsp, ct
    sigma = param
    center = 0.5 * (v + vs)
    rel = v - vs
    rnorm = np.linalg.norm(rel, axis=1, keepdims=True)
    vp = center + 0.5 * rnorm * sigma
    vsp = center - 0.5 * rnorm * sigma
    safe = np.where(rnorm > 0, rnorm, 1.0)
    cos_theta = np.sum((rel / safe) * sigma, axis=1)
    cos_theta = np.where(rnorm[:, 0] > 0, cos_theta, 1.0)
    return vp, vsp, cos_theta


def _interp_weights(points: np.ndarray, vgrid: VelocityGrid):
    """Multilinear interpolation stencils on the velocity grid.

    Returns (indices (N, 2^d), weights (N, 2^d), inside-mask (N,)).
    """
    d = vgrid.dim
    pts = np.atleast_2d(points)
    h = vgrid.spacing
    rel = (pts + vgrid.v_max) / h
    base = np.floor(rel).astype(int)
    frac = rel - base
    inside = np.all((pts >= -vgrid.v_max) & (pts <= vgrid.v_max), axis=1)
    base = np.clip(base, 0, vgrid.n - 2)
    frac = np.clip(rel - base, 0.0, 1.0)
    n_corners = 2**d
    N = pts.shape[0]
    idx = np.zeros((N, n_corners), dtype=int)
    wts = np.ones((N, n_corners))
    for corner in range(n_corners):
        flat = np.zeros(N, dtype=int)
        for a in range(d):
            bit = (corner >> (d - 1 - a)) & 1
            flat = flat * vgrid.n + (base[:, a] + bit)
            wts[:, corner] = wts[:, corner] * np.where(
                bit, frac[:, a], 1.0 - frac[:, a]
            )
        idx[:, corner] = flat
    return idx, wts, inside


def collision_frequency(
    spec: KernelSpec,
    vgrid: VelocityGrid,
    z: float = 0.0,
    n_angle: int = 32,
) -> np.ndarray:
    """Loss-part multiplier nu(v, z): the kernel convolved with the Maxwellian.

    Computed by tensor quadrature over the companion velocity (same grid) and
    the angular rule.  Raises NonPositiveFrequency if positivity is lost.
    """
    if abs(z) > spec.C_z + 1e-12:
        raise ValueError(f"|z| = {abs(z)} exceeds C_z = {spec.C_z}")
    params, wang = _angular_rule(vgrid.dim, n_angle)
    nodes = vgrid.nodes
    w_mw = vgrid.weights * maxwellian(nodes)
    b0, b1 = spec.b0_fn(), spec.b1_fn()
    nu = np.zeros(vgrid.n_total)
    for p, wa in zip(params, wang):
        if vgrid.dim == 1:
            cos_t = math.cos(p)
            bval = (b0(np.array([cos_t])) + z * b1(np.array([cos_t]))).item()
            rel = np.abs(nodes[:, 0][:, None] - nodes[:, 0][None, :])
            nu += wa * bval * spec.C * (rel**spec.gamma) @ w_mw
        else:
            diff = nodes[:, None, :] - nodes[None, :, :]
            rel = np.linalg.norm(diff, axis=2)
            safe = np.where(rel > 0, rel, 1.0)
            cos_t = np.einsum("jka,a->jk", diff / safe[:, :, None], p)
            cos_t = np.where(rel > 0, cos_t, 1.0)
            bval = b0(cos_t) + z * b1(cos_t)
            nu += wa * spec.C * ((rel**spec.gamma) * bval) @ w_mw
    if np.min(nu) <= 0:
        raise NonPositiveFrequency(
            f"collision frequency min {np.min(nu):.3e} is not positive"
        )
    return nu


@dataclass(frozen=True)
class CollisionMatrix:
    """Dense discrete collision operator with its gain/loss split.

    ``matrix`` acts on velocity-sampled fields as ``values @ matrix.T``;
    it satisfies matrix = gain - diag(nu) by construction, is self-adjoint in
    the quadrature inner product up to ``sym_defect``, and annihilates the
    weighted fluid profiles.
    """

    backend: str
    matrix: np.ndarray
    nu: np.ndarray
    vgrid: VelocityGrid
    gamma: float
    z: float = 0.0
    sym_defect: float = 0.0
    dropped_fraction: float = 0.0
    kernel_residual: float = 0.0

    @property
    def gain(self) -> np.ndarray:
        return self.matrix + np.diag(self.nu)

    def apply(self, values: np.ndarray) -> np.ndarray:
        """Apply to fields of shape (..., n_v_total)."""
        return np.asarray(values) @ self.matrix.T

    def save_binary(self, path) -> None:
        np.savez(
            path,
            backend=self.backend,
            matrix=self.matrix,
            nu=self.nu,
            gamma=self.gamma,
            z=self.z,
            sym_defect=self.sym_defect,
            dropped_fraction=self.dropped_fraction,
        )


def assemble_bgk_surrogate(basis: FluidBasis) -> CollisionMatrix:
    """Relaxation stand-in L = P - I with unit frequency.

    Satisfies the hypocoercivity hypotheses exactly: kernel equal to the fluid
    subspace, spectral gap 1, gain equal to the projector, loss the identity.
    """
    P = basis.projector_matrix()
    L = P - np.eye(P.shape[0])
    resid = float(np.max(np.abs(L @ basis.values)))
    return CollisionMatrix(
        backend="bgk-surrogate",
        matrix=L,
        nu=np.ones(P.shape[0]),
        vgrid=basis.vgrid,
        gamma=0.0,
        kernel_residual=resid,
    )


def _assemble_dirichlet_form(
    vgrid: VelocityGrid,
    gamma: float,
    C: float,
    angular: Callable[[np.ndarray], np.ndarray],
    n_angle: int,
):
    """Quadratic-form matrix A with <-L h, h>_w = h^T A h / 4, plus drop stats.

    A is a sum of rho c c^T terms over collision triples (v, v*, angle) with
    rho proportional to the kernel and c the coefficient vector of the
    collision difference; triples whose post-collisional velocities leave the
    box are dropped and counted.
    """
    d = vgrid.dim
    nodes = vgrid.nodes
    N = vgrid.n_total
    w = vgrid.weights
    mw = maxwellian(nodes)
    inv_m = 1.0 / np.sqrt(mw)
    params, wang = _angular_rule(d, n_angle)

    jj, kk = np.meshgrid(np.arange(N), np.arange(N), indexing="ij")
    jj = jj.ravel()
    kk = kk.ravel()
    vj = nodes[jj]
    vk = nodes[kk]
    rel = np.linalg.norm(vj - vk, axis=1)
    phi = C * rel**gamma

    A = np.zeros((N, N))
    dropped = 0
    total = 0
    n_corners = 2**d
    for p, wa in zip(params, wang):
        vp, vsp, cos_t = _post_collision(vj, vk, p, d)
        if d == 1:
            cos_arr = np.full(jj.shape, cos_t)
        else:
            cos_arr = cos_t
        idx_p, wt_p, in_p = _interp_weights(vp, vgrid)
        idx_s, wt_s, in_s = _interp_weights(vsp, vgrid)
        keep = in_p & in_s
        total += keep.size
        dropped += int(np.sum(~keep))
        if not np.any(keep):
            continue
        rho = 0.25 * w[jj] * w[kk] * wa * phi * angular(cos_arr) * mw[jj] * mw[kk]
        rho = rho[keep]
        # coefficient stencil of the collision difference Theta[h]
        cols = np.concatenate(
            [idx_p[keep], idx_s[keep], jj[keep, None], kk[keep, None]], axis=1
        )
        coefs = np.concatenate(
            [
                wt_p[keep] * inv_m[idx_p[keep]],
                wt_s[keep] * inv_m[idx_s[keep]],
                -inv_m[jj[keep, None]],
                -inv_m[kk[keep, None]],
            ],
            axis=1,
        )
        m = cols.shape[1]
        flat = A.ravel()
        for a in range(m):
            for b in range(m):
                np.add.at(
                    flat, cols[:, a] * N + cols[:, b], rho * coefs[:, a] * coefs[:, b]
                )
    return A, dropped / max(total, 1)


def _conservative_fix(L: np.ndarray, basis: FluidBasis) -> np.ndarray:
    """Project the operator onto the complement of the collision invariants."""
    P = basis.projector_matrix()
    Q = np.eye(P.shape[0]) - P
    return Q @ L @ Q


def assemble_boltzmann_matrix(
    spec: KernelSpec,
    vgrid: VelocityGrid,
    z: float = 0.0,
    n_angle: int = 32,
    basis: Optional[FluidBasis] = None,
) -> CollisionMatrix:
    """Quadrature discretization of the linearized collision operator at fixed z.

    Post-collisional velocities are placed back on the grid by multilinear
    interpolation; collisions leaving the truncated box are dropped and the
    fraction reported.  The result is symmetric in the weighted inner product,
    negative semidefinite, and annihilates the weighted fluid profiles
    exactly.
    """
    spec.check_margin()
    if abs(z) > spec.C_z + 1e-12:
        raise ValueError(f"|z| = {abs(z)} exceeds C_z = {spec.C_z}")
    if basis is None:
        basis = build_fluid_basis(vgrid, tol_gram=1e-4)
    b0, b1 = spec.b0_fn(), spec.b1_fn()
    angular = lambda eta: b0(eta) + z * b1(eta)
    A, drop = _assemble_dirichlet_form(vgrid, spec.gamma, spec.C, angular, n_angle)
    w = vgrid.weights
    L_raw = -(A / w[:, None])
    sym_defect = float(
        np.linalg.norm(L_raw - (L_raw.T * w[None, :]) / w[:, None], ord="fro")
    )
    L_sym = 0.5 * (L_raw + (L_raw.T * w[None, :]) / w[:, None])
    L = _conservative_fix(L_sym, basis)
    nu = collision_frequency(spec, vgrid, z=z, n_angle=n_angle)
    resid = float(np.max(np.abs(L @ basis.values)))
    return CollisionMatrix(
        backend="boltzmann-quadrature",
        matrix=L,
        nu=nu,
        vgrid=vgrid,
        gamma=spec.gamma,
        z=z,
        sym_defect=sym_defect,
        dropped_fraction=drop,
        kernel_residual=resid,
    )


def assemble_boltzmann_pair(
    spec: KernelSpec,
    vgrid: VelocityGrid,
    n_angle: int = 32,
    basis: Optional[FluidBasis] = None,
):
    """Deterministic and z-linear component operators (L0, L1).

    The operator at parameter z is L0 + z L1; the pair is what the
    stochastic-Galerkin coupling combines with the chaos recurrence matrix.
    """
    spec.check_margin()
    if basis is None:
        basis = build_fluid_basis(vgrid, tol_gram=1e-4)
    out = []
    for fn in (spec.b0_fn(), spec.b1_fn()):
        A, drop = _assemble_dirichlet_form(vgrid, spec.gamma, spec.C, fn, n_angle)
        w = vgrid.weights
        L_raw = -(A / w[:, None])
        L_sym = 0.5 * (L_raw + (L_raw.T * w[None, :]) / w[:, None])
        out.append((_conservative_fix(L_sym, basis), drop))
    return out[0][0], out[1][0]


# --- hypocoercivity certification --------------------------------------------


@dataclass
class HypoReport:
    """Numerically certified hypocoercivity constants for one operator."""

    backend: str
    gamma: float
    sym_defect: float
    kernel_dim: int
    lambda_gap: float
    nu_constants: dict
    K_reg: list
    C_pi: float
    C_pi1: float
    C_p: float
    kernel_residual: float
    n_velocity: int

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=2, sort_keys=True)

    def save(self, path) -> None:
        with open(path, "w") as f:
            f.write(self.to_json() + "\n")


def _v_gradient_matrices(vgrid: VelocityGrid):
    """Central-difference derivative matrices per velocity dimension."""
    n = vgrid.n
    h = vgrid.spacing
    D1 = np.zeros((n, n))
    for i in range(n):
        if 0 < i < n - 1:
            D1[i, i - 1], D1[i, i + 1] = -0.5 / h, 0.5 / h
        elif i == 0:
            D1[0, 0], D1[0, 1] = -1.0 / h, 1.0 / h
        else:
            D1[-1, -2], D1[-1, -1] = -1.0 / h, 1.0 / h
    mats = []
    eye = np.eye(n)
    for a in range(vgrid.dim):
        factors = [eye] * vgrid.dim
        factors[a] = D1
        M = factors[0]
        for f in factors[1:]:
            M = np.kron(M, f)
        mats.append(M)
    return mats


def verify_hypocoercivity(
    cm: CollisionMatrix,
    basis: FluidBasis,
    gamma: Optional[float] = None,
    n_probes: int = 200,
    deltas=(0.1, 0.5, 1.0),
    tol_kernel: float = 1e-6,
    seed: int = 0,
) -> HypoReport:
    """Estimate the coercivity constants of an assembled collision operator.

    The spectral gap and kernel dimension come from a dense eigendecomposition
    restricted to the complement of the fluid subspace; the projection
    constants are exact generalized-eigenvalue computations on the finite
    basis; the frequency sandwich constants are exact bounds read off the
    loss diagonal; the derivative constants are fitted as the tightest valid
    bounds over random probes (resolution-dependent estimates, not certified
    bounds).
    """
    if gamma is None:
        gamma = cm.gamma
    vgrid = cm.vgrid
    w = vgrid.weights
    sqw = np.sqrt(w)
    N = vgrid.n_total
    L = cm.matrix

    sym_defect = float(
        np.linalg.norm(L - (L.T * w[None, :]) / w[:, None], ord="fro")
    )
    S = (L * sqw[:, None]) / sqw[None, :]
    S = 0.5 * (S + S.T)
    eigvals = np.linalg.eigvalsh(S)
    kernel_dim = int(np.sum(np.abs(eigvals) < tol_kernel))

    # gap on the orthogonal complement of the fluid subspace, measured
    # against the collision-weighted norm
    lam_w = (1.0 + vgrid.speeds) ** gamma
    psi = sqw[:, None] * basis.values
    q, _ = np.linalg.qr(psi)
    V = scipy.linalg.null_space(q.T)
    a = V.T @ (-S) @ V
    b = V.T @ (lam_w[:, None] * V)
    gap_eigs = scipy.linalg.eigh(0.5 * (a + a.T), 0.5 * (b + b.T),
                                 eigvals_only=True)
    lambda_gap = float(gap_eigs[0])
    if lambda_gap <= 0:
        raise GapNonPositive(
            f"spectral gap {lambda_gap:.3e} not positive at n={vgrid.n}"
        )

    # frequency sandwich: exact bounds from the diagonal loss part
    nu0 = float(np.min(cm.nu / lam_w))
    nu1 = nu0
    nu2 = float(np.max(cm.nu / lam_w))

    # derivative constants fitted over random probes
    rng = np.random.default_rng(seed)
    Dv = _v_gradient_matrices(vgrid)
    Lam = np.diag(cm.nu)
    K_mat = cm.gain
    nu3 = 0.5 * nu1
    nu4_fit = 0.0
    K_pairs = {float(d): 0.0 for d in deltas}
    for _ in range(n_probes):
        h = rng.standard_normal(N)
        lam_h = float(np.sum(w * lam_w * h * h))
        l2_h = float(np.sum(w * h * h))
        lhs = 0.0
        grad_lam = 0.0
        grad_l2 = 0.0
        lhs_K = 0.0
        for D in Dv:
            dLh = D @ (Lam @ h)
            dh = D @ h
            lhs += float(np.sum(w * dLh * dh))
            grad_lam += float(np.sum(w * lam_w * dh * dh))
            grad_l2 += float(np.sum(w * dh * dh))
            lhs_K += float(np.sum(w * (D @ (K_mat @ h)) * dh))
        nu4_fit = max(nu4_fit, (nu3 * grad_lam - lhs) / max(lam_h, 1e-300))
        for dlt in K_pairs:
            K_pairs[dlt] = max(
                K_pairs[dlt], (lhs_K - dlt * grad_l2) / max(l2_h, 1e-300)
            )
    nu4 = max(nu4_fit * 1.01, 1e-12)

    # projection constants, exact on the finite basis
    G = basis.gram
    vals = basis.values
    G_lam = vals.T @ ((w * lam_w)[:, None] * vals)
    C_pi = float(scipy.linalg.eigh(G_lam, G, eigvals_only=True)[-1])
    dvals = np.stack([D @ vals for D in Dv], axis=0)  # (dim, N, m)
    G_grad = np.einsum("anm,n,ank->mk", dvals, w, dvals)
    C_a = float(scipy.linalg.eigh(G_grad, G, eigvals_only=True)[-1])
    vmul = vgrid.nodes  # (N, dim)
    G_vgrad = np.einsum(
        "anm,n,ank->mk", dvals * vmul.T[:, :, None], w, dvals * vmul.T[:, :, None]
    )
    C_b = float(scipy.linalg.eigh(G_vgrad, G, eigvals_only=True)[-1])
    G_grad_lam = np.einsum("anm,n,ank->mk", dvals, w * lam_w, dvals)
    C_c = float(scipy.linalg.eigh(G_grad_lam, G, eigvals_only=True)[-1])
    C_pi = max(C_pi, C_c)
    C_pi1 = max(C_a, C_b)

    return HypoReport(
        backend=cm.backend,
        gamma=float(gamma),
        sym_defect=sym_defect,
        kernel_dim=kernel_dim,
        lambda_gap=lambda_gap,
        nu_constants={
            "nu0": nu0, "nu1": nu1, "nu2": nu2, "nu3": float(nu3), "nu4": float(nu4)
        },
        K_reg=[[float(d), float(c)] for d, c in sorted(K_pairs.items())],
        C_pi=C_pi,
        C_pi1=C_pi1,
        C_p=1.0,
        kernel_residual=cm.kernel_residual,
        n_velocity=vgrid.n,
    )
