"""Deterministic reference machinery: solvers, exact waves, and diagnostics.

The chaos-coupled micro-macro system is integrated by a first-order scheme
with explicit upwinded transport and implicit collision; the implicit step is
prefactored once, so the march is uniformly stable in the stiffness parameter
and reduces to a forward-Euler acoustic update as the stiffness vanishes.
The acoustic system itself is integrated exactly, per Fourier mode, through
the spectral decomposition of its flux matrix.

For the relaxation collision backend the module also constructs closed-form
plane-wave solutions of the semi-discrete system (continuous in time and
space, discrete in velocity).  Their residuals vanish identically, at every
velocity, which makes them the reference both for the solver's refinement
studies and for the zero-at-truth floor of the learning losses.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.linalg

from .collision import KernelSpec, collision_frequency
from .gpc import SgCoupling, relaxation_strengths, weighted_h1_energy_from_norms
from .micromacro import flux_jacobian, transport_profiles, v_moment_map
from .phase_space import FluidBasis, GridMismatch, SpatialGrid, VelocityGrid


class CflViolation(Exception):
    """Time step too large for the explicit transport part."""


class SingularImplicitSolve(Exception):
    """The implicit collision system could not be factorized."""


@dataclass(frozen=True)
class SolverConfig:
    """Time-integration parameters for the micro-macro march."""

    eps: float
    dt: float
    t_end: float
    cfl: float = 0.9
    transport_scheme: str = "upwind3"
    n_store: int = 11
    reproject_every_step: bool = True

    def __post_init__(self):
        if self.eps < 0:
            raise ValueError("eps must be nonnegative")
        if self.dt <= 0 or self.t_end <= 0:
            raise ValueError("dt and t_end must be positive")
        if self.transport_scheme not in ("upwind1", "upwind3"):
            raise ValueError(f"unknown transport scheme {self.transport_scheme}")


@dataclass
class Trajectory:
    """Stored snapshots of the chaos-mode fields."""

    times: np.ndarray  # (T,)
    m: np.ndarray  # (T, K, n_x, dim+2)
    g: Optional[np.ndarray]  # (T, K, n_x, n_v)
    sgrid: SpatialGrid
    vgrid: Optional[VelocityGrid]
    eps: float

    @property
    def n_modes(self) -> int:
        return self.m.shape[1]

    def save_csv(self, directory) -> None:
        """One CSV per (time index, mode) pair with x-major rows."""
        import pathlib

        directory = pathlib.Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for ti, t in enumerate(self.times):
            for i in range(self.n_modes):
                rows = [self.m[ti, i]]
                if self.g is not None:
                    rows.append(self.g[ti, i])
                table = np.concatenate(rows, axis=1)
                np.savetxt(
                    directory / f"snapshot_t{ti:03d}_mode{i + 1}.csv",
                    table,
                    delimiter=",",
                    fmt="%.17e",
                    header=f"time={t:.17e}",
                    comments="# ",
                )


def _upwind_derivative(field: np.ndarray, dx: float, positive: bool,
                       scheme: str, axis: int) -> np.ndarray:
    """Periodic upwind-biased x-derivative along ``axis``.

    ``positive`` selects the stencil for transport speed sign; the
    third-order variant is dissipative enough to keep explicit stepping
    stable at first order in time.
    """
    def sh(k):
        return np.roll(field, -k, axis=axis)

    if scheme == "upwind1":
        if positive:
            return (field - sh(-1)) / dx
        return (sh(1) - field) / dx
    if positive:
        return (2.0 * sh(1) + 3.0 * field - 6.0 * sh(-1) + sh(-2)) / (6.0 * dx)
    return (-2.0 * sh(-1) - 3.0 * field + 6.0 * sh(1) - sh(2)) / (6.0 * dx)


def _signed_x_derivative(field: np.ndarray, dx: float, speeds: np.ndarray,
                         scheme: str) -> np.ndarray:
    """Upwind derivative of (..., n_x, n_c) fields with per-column speeds."""
    pos = _upwind_derivative(field, dx, True, scheme, axis=-2)
    neg = _upwind_derivative(field, dx, False, scheme, axis=-2)
    return np.where(speeds >= 0.0, pos, neg)


def _macro_transport_term(m: np.ndarray, lam: np.ndarray, R: np.ndarray,
                          Rinv: np.ndarray, dx: float, scheme: str) -> np.ndarray:
    """Characteristic-upwinded A dm/dx for fields of shape (K, n_x, n_mom)."""
    char = m @ Rinv.T
    dchar = _signed_x_derivative(char, dx, lam[None, None, :], scheme)
    return (dchar * lam[None, None, :]) @ R.T


def solve_sg_micromacro(
    m0: np.ndarray,
    g0: np.ndarray,
    config: SolverConfig,
    coupling: SgCoupling,
    basis: FluidBasis,
    sgrid: SpatialGrid,
    forcing_m: Optional[Callable[[float], np.ndarray]] = None,
    forcing_g: Optional[Callable[[float], np.ndarray]] = None,
) -> Trajectory:
    """March the coupled micro-macro system with the stiffness-uniform scheme.

    ``m0`` has shape (K, n_x, dim+2) and ``g0`` (K, n_x, n_v); optional
    forcings return arrays of the same shapes at a given time.  The
    microscopic part is re-projected onto the orthogonal complement each step
    and the macro update uses the freshly relaxed microscopic flux, which is
    what yields the correct vanishing-stiffness limit.
    """
    vgrid = basis.vgrid
    if sgrid.dim != 1:
        raise ValueError("the reference march is one-dimensional in space")
    K, n_x, n_mom = m0.shape
    if K != coupling.K or g0.shape != (K, n_x, vgrid.n_total):
        raise GridMismatch("initial data shapes do not match the operators")
    dx = sgrid.spacing
    v = vgrid.nodes[:, 0]
    A = flux_jacobian(basis)
    lam, R = np.linalg.eig(A)
    lam = lam.real
    R = R.real
    Rinv = np.linalg.inv(R)
    speed_cap = max(float(np.max(np.abs(v))), float(np.max(np.abs(lam))))
    if config.dt > config.cfl * dx / speed_cap:
        raise CflViolation(
            f"dt = {config.dt:.3e} exceeds cfl * dx / v_max = "
            f"{config.cfl * dx / speed_cap:.3e}"
        )

    eps = config.eps
    eff_eps = max(eps, 1e-300)
    n_v = vgrid.n_total
    block = coupling.block()
    M_imp = np.eye(K * n_v) - (config.dt / eff_eps) * block
    try:
        lu = scipy.linalg.lu_factor(M_imp)
    except scipy.linalg.LinAlgError as exc:  # pragma: no cover
        raise SingularImplicitSolve(str(exc)) from exc

    Mv = v_moment_map(basis)
    proj_coef = basis.coef_map
    vals_T = basis.values.T

    n_steps = int(round(config.t_end / config.dt))
    store_at = np.unique(
        np.round(np.linspace(0, n_steps, min(config.n_store, n_steps + 1))).astype(int)
    )
    times, m_snap, g_snap = [], [], []

    m = m0.astype(float).copy()
    g = g0.astype(float).copy()
    g -= basis.moments(g) @ vals_T  # enforce the orthogonality invariant

    def record(step):
        times.append(step * config.dt)
        m_snap.append(m.copy())
        g_snap.append(g.copy())

    store_set = set(int(s) for s in store_at)
    if 0 in store_set:
        record(0)
    for step in range(n_steps):
        t = step * config.dt
        h_fluid = m @ vals_T  # (K, n_x, n_v)
        t_fluid = v[None, None, :] * _signed_x_derivative(
            h_fluid, dx, v[None, None, :], config.transport_scheme
        )
        t_micro = v[None, None, :] * _signed_x_derivative(
            g, dx, v[None, None, :], config.transport_scheme
        )
        # orthogonal remainders of the transport terms
        t_fluid -= (t_fluid @ proj_coef) @ vals_T
        t_micro -= (t_micro @ proj_coef) @ vals_T

        rhs = g - (config.dt / eff_eps) * t_fluid - config.dt * t_micro
        if forcing_g is not None:
            rhs = rhs + config.dt * forcing_g(t)
        stacked = rhs.transpose(1, 0, 2).reshape(n_x, K * n_v).T
        g_new = scipy.linalg.lu_solve(lu, stacked).T.reshape(n_x, K, n_v)
        g_new = g_new.transpose(1, 0, 2)
        if config.reproject_every_step:
            g_new -= basis.moments(g_new) @ vals_T

        # macro update with the relaxed microscopic flux
        macro_transport = _macro_transport_term(
            m, lam, R, Rinv, dx, config.transport_scheme
        )
        g_flux = v[None, None, :] * _signed_x_derivative(
            g_new, dx, v[None, None, :], config.transport_scheme
        )
        m_new = m - config.dt * (macro_transport + eps * (g_flux @ proj_coef))
        if forcing_m is not None:
            m_new = m_new + config.dt * forcing_m(t)

        m, g = m_new, g_new
        if not np.all(np.isfinite(m)) or not np.all(np.isfinite(g)):
            raise FloatingPointError(f"solution lost finiteness at step {step}")
        if (step + 1) in store_set:
            record(step + 1)

    return Trajectory(
        times=np.asarray(times),
        m=np.asarray(m_snap),
        g=np.asarray(g_snap),
        sgrid=sgrid,
        vgrid=vgrid,
        eps=eps,
    )


def solve_acoustic_discrete(
    m0: np.ndarray,
    A: np.ndarray,
    sgrid: SpatialGrid,
    dt: float,
    t_end: float,
    transport_scheme: str = "upwind3",
    n_store: int = 11,
) -> Trajectory:
    """Forward-Euler acoustic march with the kinetic solver's transport stencil.

    This is exactly the vanishing-stiffness limit of the micro-macro scheme,
    so kinetic-minus-this differences isolate the stiffness dependence from
    the shared discretization error (the discrete counterpart of the limit
    system).
    """
    if sgrid.dim != 1:
        raise ValueError("the acoustic reference is one-dimensional in space")
    lam, R = np.linalg.eig(A)
    lam, R = lam.real, R.real
    Rinv = np.linalg.inv(R)
    dx = sgrid.spacing
    n_steps = int(round(t_end / dt))
    store_at = set(
        int(s)
        for s in np.round(
            np.linspace(0, n_steps, min(n_store, n_steps + 1))
        ).astype(int)
    )
    m = m0.astype(float).copy()
    times, snaps = [], []
    if 0 in store_at:
        times.append(0.0)
        snaps.append(m.copy())
    for step in range(n_steps):
        m = m - dt * _macro_transport_term(
            m[None], lam, R, Rinv, dx, transport_scheme
        )[0]
        if (step + 1) in store_at:
            times.append((step + 1) * dt)
            snaps.append(m.copy())
    return Trajectory(
        times=np.asarray(times),
        m=np.asarray(snaps)[:, None, :, :],
        g=None,
        sgrid=sgrid,
        vgrid=None,
        eps=0.0,
    )


def solve_acoustic(
    m0: np.ndarray,
    A: np.ndarray,
    sgrid: SpatialGrid,
    t_end: float,
    n_store: int = 11,
) -> Trajectory:
    """Exact-in-time spectral integration of the limiting acoustic system.

    ``m0`` has shape (n_x, n_mom) (a single deterministic mode); the constant
    coefficient system is diagonalized per Fourier mode, so the energy of the
    moments is conserved to roundoff.
    """
    if sgrid.dim != 1:
        raise ValueError("the acoustic reference is one-dimensional in space")
    n_x, n_mom = m0.shape
    lam, R = np.linalg.eig(A)
    lam, R = lam.real, R.real
    Rinv = np.linalg.inv(R)
    k = np.fft.rfftfreq(n_x, d=1.0 / n_x)  # integer wavenumbers on [-pi, pi)
    m_hat0 = np.fft.rfft(m0, axis=0)  # (n_k, n_mom)
    char0 = m_hat0 @ Rinv.T
    times = np.linspace(0.0, t_end, n_store)
    snaps = []
    for t in times:
        phase = np.exp(-1j * np.outer(k, lam) * t)  # (n_k, n_mom)
        m_hat = (char0 * phase) @ R.T
        snaps.append(np.fft.irfft(m_hat, n=n_x, axis=0))
    return Trajectory(
        times=times,
        m=np.asarray(snaps)[:, None, :, :],
        g=None,
        sgrid=sgrid,
        vgrid=None,
        eps=0.0,
    )


def manufactured_forcing(
    m_star: Callable[[float], np.ndarray],
    g_star: Callable[[float], np.ndarray],
    dm_dt: Callable[[float], np.ndarray],
    dg_dt: Callable[[float], np.ndarray],
    coupling: SgCoupling,
    basis: FluidBasis,
    sgrid: SpatialGrid,
    config: SolverConfig,
):
    """Source terms turning prescribed fields into a semi-discrete solution.

    The sources are built with the solver's own transport stencils, so the
    manufactured fields satisfy the spatially discrete system exactly and a
    refinement study isolates the pure time-integration error.
    """
    vgrid = basis.vgrid
    dx = sgrid.spacing
    v = vgrid.nodes[:, 0]
    A = flux_jacobian(basis)
    lam, R = np.linalg.eig(A)
    lam, R = lam.real, R.real
    Rinv = np.linalg.inv(R)
    vals_T = basis.values.T
    proj_coef = basis.coef_map
    eps = config.eps
    eff_eps = max(eps, 1e-300)
    scheme = config.transport_scheme

    def forcing_m(t: float) -> np.ndarray:
        m = m_star(t)
        g = g_star(t)
        g_flux = v[None, None, :] * _signed_x_derivative(
            g, dx, v[None, None, :], scheme
        )
        return (
            dm_dt(t)
            + _macro_transport_term(m, lam, R, Rinv, dx, scheme)
            + eps * (g_flux @ proj_coef)
        )

    def forcing_g(t: float) -> np.ndarray:
        m = m_star(t)
        g = g_star(t)
        h_fluid = m @ vals_T
        t_fluid = v[None, None, :] * _signed_x_derivative(
            h_fluid, dx, v[None, None, :], scheme
        )
        t_micro = v[None, None, :] * _signed_x_derivative(
            g, dx, v[None, None, :], scheme
        )
        t_fluid -= (t_fluid @ proj_coef) @ vals_T
        t_micro -= (t_micro @ proj_coef) @ vals_T
        return (
            dg_dt(t)
            + t_fluid / eff_eps
            + t_micro
            - coupling.apply(g) / eff_eps
        )

    return forcing_m, forcing_g


# --- closed-form plane-wave solutions (relaxation backend) -------------------




@dataclass
class KineticPlaneWave:
    """Exact plane-wave solution of the chaos-coupled relaxation system.

    Continuous in time and space, closed form in velocity; every micro-macro
    residual of these fields vanishes identically, so they serve as
    zero-residual references and as exactly-known solver initial data.
    """

    basis: FluidBasis
    coupling: SgCoupling
    eps: float
    wavenumber: int
    omegas: np.ndarray  # (K,) complex frequencies per channel
    fluid_coeffs: np.ndarray  # (K, dim+2) complex channel coefficients
    channel_map: np.ndarray  # (K, K) orthogonal transform Q, h = Q u
    strengths: np.ndarray  # (K,) relaxation strengths per channel
    amplitudes: np.ndarray  # (K,) complex channel amplitudes

    @property
    def n_modes(self) -> int:
        return self.channel_map.shape[0]

    # channel eigenfunction psi(v) = N(v) / D(v), closed form
    def _psi(self, j: int, v: np.ndarray, derivative: bool = False):
        vals = self.basis.eval(v)
        c = self.fluid_coeffs[j]
        N = vals @ c
        v1 = np.atleast_2d(np.asarray(v, dtype=float).T).T[:, 0]
        scale = 1j * self.eps / self.strengths[j]
        D = 1.0 + scale * (self.wavenumber * v1 - self.omegas[j])
        if not derivative:
            return N / D
        dvals = self.basis.eval_dv(v)[:, :, 0]
        Np = dvals @ c
        Dp = scale * self.wavenumber
        return N / D, (Np * D - N * Dp) / D**2

    def _channel_field(self, j: int, t, x, v, derivative_v: bool = False):
        """u_j(t, x, v) with time/space factors; returns complex arrays."""
        phase = self.amplitudes[j] * np.exp(
            1j * (self.wavenumber * np.asarray(x) - self.omegas[j] * t)
        )
        if derivative_v:
            psi, dpsi = self._psi(j, v, derivative=True)
            return phase * psi, phase * dpsi
        return phase * self._psi(j, v)

    def macro_value(self, mode: int, t, x):
        """Fluid moments and their first derivatives at points x, shape (N, m).

        Returns (m, m_t, m_x)."""
        x = np.asarray(x, dtype=float)
        m = np.zeros((x.size, self.basis.n_fields))
        m_t = np.zeros_like(m)
        m_x = np.zeros_like(m)
        for j in range(self.n_modes):
            qij = self.channel_map[mode - 1, j]
            if qij == 0.0:
                continue
            phase = self.amplitudes[j] * np.exp(
                1j * (self.wavenumber * x - self.omegas[j] * t)
            )
            base = np.outer(phase, self.fluid_coeffs[j])
            m += qij * base.real
            m_t += qij * (-1j * self.omegas[j] * base).real
            m_x += qij * (1j * self.wavenumber * base).real
        return m, m_t, m_x

    def micro_value(self, mode: int, t, x, v):
        """Microscopic field and first derivatives at paired points (x_i, v_i).

        Returns (g, g_t, g_x, g_v), each shaped like x."""
        x = np.asarray(x, dtype=float)
        g = np.zeros(x.shape)
        g_t = np.zeros_like(g)
        g_x = np.zeros_like(g)
        g_v = np.zeros_like(g)
        vals = self.basis.eval(v)
        dvals = self.basis.eval_dv(v)[:, :, 0]
        for j in range(self.n_modes):
            qij = self.channel_map[mode - 1, j]
            if qij == 0.0:
                continue
            u, du = self._channel_field(j, t, x, v, derivative_v=True)
            fluid = vals @ self.fluid_coeffs[j]
            dfluid = dvals @ self.fluid_coeffs[j]
            phase = self.amplitudes[j] * np.exp(
                1j * (self.wavenumber * x - self.omegas[j] * t)
            )
            micro = u - phase * fluid
            micro_v = du - phase * dfluid
            g += (qij / self.eps) * micro.real
            g_t += (qij / self.eps) * (-1j * self.omegas[j] * micro).real
            g_x += (qij / self.eps) * (1j * self.wavenumber * micro).real
            g_v += (qij / self.eps) * micro_v.real
        return g, g_t, g_x, g_v

    def h_value(self, mode: int, t, x, v):
        """Assembled field h = m . profiles + eps g with first derivatives.

        Returns (h, h_t, h_x, h_v) at paired points."""
        x = np.asarray(x, dtype=float)
        h = np.zeros(x.shape)
        h_t = np.zeros_like(h)
        h_x = np.zeros_like(h)
        h_v = np.zeros_like(h)
        for j in range(self.n_modes):
            qij = self.channel_map[mode - 1, j]
            if qij == 0.0:
                continue
            u, du = self._channel_field(j, t, x, v, derivative_v=True)
            h += qij * u.real
            h_t += qij * (-1j * self.omegas[j] * u).real
            h_x += qij * (1j * self.wavenumber * u).real
            h_v += qij * du.real
        return h, h_t, h_x, h_v

    def initial_data(self, sgrid: SpatialGrid):
        """Solver initial fields (m0, g0) sampled on the tensor grid."""
        x = sgrid.nodes()[:, 0]
        vg = self.basis.vgrid
        K = self.n_modes
        m0 = np.zeros((K, x.size, self.basis.n_fields))
        g0 = np.zeros((K, x.size, vg.n_total))
        xv_x = np.repeat(x, vg.n_total)
        xv_v = np.tile(vg.nodes[:, 0], x.size)
        for i in range(1, K + 1):
            m0[i - 1] = self.macro_value(i, 0.0, x)[0]
            g0[i - 1] = self.micro_value(i, 0.0, xv_x, xv_v)[0].reshape(
                x.size, vg.n_total
            )
        return m0, g0

    def fields_on_grid(self, t: float, sgrid: SpatialGrid):
        """Exact (m, g) snapshot on the tensor grid at time t."""
        x = sgrid.nodes()[:, 0]
        vg = self.basis.vgrid
        K = self.n_modes
        m = np.zeros((K, x.size, self.basis.n_fields))
        g = np.zeros((K, x.size, vg.n_total))
        xv_x = np.repeat(x, vg.n_total)
        xv_v = np.tile(vg.nodes[:, 0], x.size)
        for i in range(1, K + 1):
            m[i - 1] = self.macro_value(i, t, x)[0]
            g[i - 1] = self.micro_value(i, t, xv_x, xv_v)[0].reshape(
                x.size, vg.n_total
            )
        return m, g


def kinetic_plane_wave(
    basis: FluidBasis,
    coupling: SgCoupling,
    eps: float,
    wavenumber: int = 1,
    amplitudes: Optional[Sequence[complex]] = None,
    direction: int = +1,
) -> KineticPlaneWave:
    """Construct the acoustic-branch plane wave of the relaxation system.

    Channels (eigenvectors of the chaos coupling matrix) decouple; each one is
    solved by a dense eigendecomposition in velocity and converted to the
    closed velocity form through its fluid coefficients.  ``direction`` picks
    the right- or left-moving sound branch.
    """
    c0, c1 = relaxation_strengths(coupling, basis)
    zmat = c0 * np.eye(coupling.K) + c1 * coupling.z_factor
    d, Q = np.linalg.eigh(zmat)
    if np.min(d) <= 0:
        raise ValueError("relaxation strengths lost positivity")
    vg = basis.vgrid
    v = vg.nodes[:, 0]
    P = basis.projector_matrix()
    eye = np.eye(vg.n_total)
    omegas = np.zeros(coupling.K, dtype=complex)
    coeffs = np.zeros((coupling.K, basis.n_fields), dtype=complex)
    for j, dj in enumerate(d):
        gen = -1j * wavenumber * np.diag(v) + (dj / eps) * (P - eye)
        mu, vecs = np.linalg.eig(gen)
        omega = 1j * mu  # generator eigenvalue mu = -i omega
        fluid_frac = np.linalg.norm(
            basis.moments(vecs.T), axis=1
        ) / np.maximum(np.linalg.norm(vecs, axis=0), 1e-300)
        # acoustic branches: strong fluid content, nonzero phase speed
        score = fluid_frac - 1e3 * (np.abs(omega.real) < 1e-10)
        order = np.argsort(score)[::-1]
        pick = None
        for idx in order[:6]:
            if direction * omega[idx].real > 1e-10:
                pick = idx
                break
        if pick is None:
            pick = order[0]
        omegas[j] = omega[pick]
        psi = vecs[:, pick]
        c = basis.moments(psi)
        # normalize the channel so its fluid part has unit norm
        c = c / np.linalg.norm(c)
        coeffs[j] = c
        # self-consistency of the closed velocity form
        scale = 1j * eps / dj
        D = 1.0 + scale * (wavenumber * v - omegas[j])
        psi_cf = (basis.values @ c) / D
        back = basis.moments(psi_cf)
        if np.max(np.abs(back - c)) > 1e-8:
            raise ValueError(
                "closed-form eigenfunction failed self-consistency; "
                "increase the velocity resolution"
            )
    if amplitudes is None:
        amplitudes = np.ones(coupling.K, dtype=complex)
    return KineticPlaneWave(
        basis=basis,
        coupling=coupling,
        eps=eps,
        wavenumber=wavenumber,
        omegas=omegas,
        fluid_coeffs=coeffs,
        channel_map=Q,
        strengths=d,
        amplitudes=np.asarray(amplitudes, dtype=complex),
    )


# --- error energy and Lyapunov diagnostics ------------------------------------


def _grid_h1_parts(field: np.ndarray, sgrid: SpatialGrid, vgrid: VelocityGrid):
    """(||f||^2, ||df/dx||^2, ||df/dv||^2) of an (n_x, n_v) sample."""
    dx = sgrid.spacing
    wv = vgrid.weights
    wx = sgrid.cell_volume
    fx = (np.roll(field, -1, axis=0) - np.roll(field, 1, axis=0)) / (2 * dx)
    fv = np.gradient(field, vgrid.spacing, axis=1)
    parts = []
    for arr in (field, fx, fv):
        parts.append(float(wx * np.sum((arr**2) @ wv)))
    return parts


def error_energy_series(
    provider,
    traj: Trajectory,
    basis: FluidBasis,
    q: int,
    eps: Optional[float] = None,
) -> np.ndarray:
    """Mode-weighted H1 error energy of a field provider against a trajectory.

    The provider exposes ``macro_value(mode, t, x)`` and
    ``micro_value(mode, t, x, v)`` (network bundles and exact waves both do);
    fields are compared on the trajectory's own grid at each stored time.
    """
    if traj.g is None or traj.vgrid is None:
        raise GridMismatch("trajectory carries no microscopic data")
    if eps is None:
        eps = traj.eps
    sgrid, vgrid = traj.sgrid, traj.vgrid
    x = sgrid.nodes()[:, 0]
    xv_x = np.repeat(x, vgrid.n_total)
    xv_v = np.tile(vgrid.nodes[:, 0], x.size)
    out = []
    for ti, t in enumerate(traj.times):
        norms = []
        for i in range(1, traj.n_modes + 1):
            m_p = provider.macro_value(i, t, x)[0]
            g_p = provider.micro_value(i, t, xv_x, xv_v)[0].reshape(
                x.size, vgrid.n_total
            )
            h_p = m_p @ basis.values.T + eps * g_p
            h_s = traj.m[ti, i - 1] @ basis.values.T + eps * traj.g[ti, i - 1]
            parts = _grid_h1_parts(h_s - h_p, sgrid, vgrid)
            norms.append(sum(parts))
        out.append(weighted_h1_energy_from_norms(norms, q))
    return np.asarray(out)


def trajectory_energy_series(traj: Trajectory, basis: FluidBasis, q: int):
    """Weighted H1 energy of the trajectory itself per stored time."""
    sgrid, vgrid = traj.sgrid, traj.vgrid
    out = []
    for ti in range(len(traj.times)):
        norms = []
        for i in range(traj.n_modes):
            h = traj.m[ti, i] @ basis.values.T + traj.eps * traj.g[ti, i]
            norms.append(sum(_grid_h1_parts(h, sgrid, vgrid)))
        out.append(weighted_h1_energy_from_norms(norms, q))
    return np.asarray(out)


DEFAULT_LYAPUNOV_COEFFS = (1.0, 1.0, 0.05, 0.05)


def lyapunov_functional(
    m: np.ndarray,
    g: np.ndarray,
    basis: FluidBasis,
    sgrid: SpatialGrid,
    eps: float,
    q: int,
    coeffs=DEFAULT_LYAPUNOV_COEFFS,
) -> float:
    """Weighted hypocoercivity functional of one snapshot.

    a1 ||h||^2 + a2 ||dx h||^2 + a3 ||dv h_perp||^2 + a4 eps <dx h, dv h>,
    summed over modes with the chaos weights.  ``g`` is the orthogonal
    microscopic part, so h_perp = eps g.
    """
    a1, a2, a3, a4 = coeffs
    vgrid = basis.vgrid
    dx = sgrid.spacing
    wv = vgrid.weights
    wx = sgrid.cell_volume
    K = m.shape[0]
    vals = []
    for i in range(K):
        h = m[i] @ basis.values.T + eps * g[i]
        hx = (np.roll(h, -1, axis=0) - np.roll(h, 1, axis=0)) / (2 * dx)
        hv = np.gradient(h, vgrid.spacing, axis=1)
        perp_v = np.gradient(eps * g[i], vgrid.spacing, axis=1)
        term = (
            a1 * np.sum((h**2) @ wv)
            + a2 * np.sum((hx**2) @ wv)
            + a3 * np.sum((perp_v**2) @ wv)
            + a4 * eps * np.sum((hx * hv) @ wv)
        )
        vals.append(wx * term)
    return weighted_h1_energy_from_norms(vals, q)


def lyapunov_series(traj: Trajectory, basis: FluidBasis, q: int,
                    coeffs=DEFAULT_LYAPUNOV_COEFFS) -> np.ndarray:
    return np.asarray(
        [
            lyapunov_functional(traj.m[ti], traj.g[ti], basis, traj.sgrid,
                                traj.eps, q, coeffs)
            for ti in range(len(traj.times))
        ]
    )


def lyapunov_equivalence_bracket(coeffs, c_pi1: float):
    """Guaranteed stiffness-independent bracket of the functional vs plain H1.

    Returns (c_low, c_high) with
    c_low * N <= functional <= c_high * N,  N = ||h||^2 + ||dx h||^2 + ||dv h||^2,
    valid for every stiffness eps <= 1.  Raises if the coefficients admit no
    positive lower constant.
    """
    a1, a2, a3, a4 = coeffs
    eta = max(2.0 * a4 / a3, 1.0) if a3 > 0 else 1.0
    beta = a3 - a4 / eta
    c_h = a1 - a4 * c_pi1 / eta - beta * c_pi1
    c_x = a2 - a4 * eta / 2.0
    c_v = beta / 2.0
    c_low = min(c_h, c_x, c_v)
    if c_low <= 0:
        raise ValueError(
            f"coefficients {coeffs} admit no positive equivalence constant "
            f"(C_pi1 = {c_pi1:.3f})"
        )
    c_high = max(a1 + 2.0 * a3 * c_pi1, a2 + a4 / 2.0, 2.0 * a3 + a4 / 2.0)
    return float(c_low), float(c_high)


def fit_decay_rate(times: np.ndarray, values: np.ndarray) -> float:
    """Least-squares exponential decay rate of a positive series."""
    mask = np.asarray(values) > 0
    if np.sum(mask) < 2:
        return 0.0
    t = np.asarray(times)[mask]
    y = np.log(np.asarray(values)[mask])
    return float(-np.polyfit(t, y, 1)[0])


# --- velocity-tail diagnostics -------------------------------------------------


@dataclass
class TailReport:
    """Velocity-tail mass of the microscopic fields outside trial boxes."""

    cuts: list
    micro_tails: dict  # per-cut assumption-style integrals
    totals: dict

    def to_json(self) -> str:
        return json.dumps(
            {"cuts": self.cuts, "micro_tails": self.micro_tails,
             "totals": self.totals},
            indent=2,
            sort_keys=True,
        )

    def save(self, path) -> None:
        with open(path, "w") as f:
            f.write(self.to_json() + "\n")


def tail_report(
    traj: Trajectory,
    cuts: Sequence[float],
    coupling: Optional[SgCoupling] = None,
    spec: Optional[KernelSpec] = None,
) -> TailReport:
    """Integrate the tail quantities of the microscopic part beyond |v| > cut.

    Covers the existence-assumption integrals (field, transport, gradients,
    frequency-weighted) and the convergence-assumption ones (time derivative,
    collision action, initial slice, boundary mismatch).  All entries are
    nonnegative and non-increasing in the cut size.
    """
    if traj.g is None or traj.vgrid is None:
        raise GridMismatch("trajectory carries no microscopic data")
    vgrid, sgrid = traj.vgrid, traj.sgrid
    v = vgrid.nodes[:, 0]
    w = vgrid.weights
    wx = sgrid.cell_volume
    dx = sgrid.spacing
    times = traj.times
    K = traj.n_modes

    if spec is not None:
        nu0 = collision_frequency(
            KernelSpec(gamma=spec.gamma, C=spec.C, b0=spec.b0, b1=0.0,
                       C_z=spec.C_z, q_weight=spec.q_weight),
            vgrid,
        )
        b1_abs = spec.b1_fn()(np.linspace(-1, 1, 65))
        if np.max(np.abs(b1_abs)) > 0:
            nu1 = collision_frequency(
                KernelSpec(gamma=spec.gamma, C=spec.C, b0=lambda e: np.abs(
                    spec.b1_fn()(e)) + 1e-300, b1=0.0, C_z=spec.C_z,
                    q_weight=spec.q_weight),
                vgrid,
            )
        else:
            nu1 = np.zeros_like(nu0)
    else:
        nu0 = np.ones(vgrid.n_total)
        nu1 = np.zeros(vgrid.n_total)
    dnu0 = np.gradient(nu0, vgrid.spacing)
    dnu1 = np.gradient(nu1, vgrid.spacing)

    g = traj.g  # (T, K, n_x, n_v)
    g_t = np.gradient(g, times, axis=0) if len(times) > 1 else np.zeros_like(g)
    g_x = (np.roll(g, -1, axis=2) - np.roll(g, 1, axis=2)) / (2 * dx)
    g_v = np.gradient(g, vgrid.spacing, axis=3)
    coll = np.zeros_like(g)
    if coupling is not None:
        for ti in range(len(times)):
            coll[ti] = coupling.apply(g[ti])

    def time_integral(series):
        if len(times) < 2:
            return float(series[0])
        return float(np.trapezoid(series, times))

    micro_tails = {}
    totals = {}
    for cut in cuts:
        mask = (np.abs(v) > cut).astype(float)
        wm = w * mask

        def vint(f2):  # spatial + masked velocity integral, f2 (T,K,n_x,n_v)
            return wx * np.einsum("tkxv,v->tk", f2, wm)

        c_field = vint(g**2 + (v * g_x) ** 2)
        c_gt = vint(g_t**2)
        c_coll = vint(coll**2)
        c_grad_x = vint(g_x**2)
        c_grad_v = vint(g_v**2)
        c_freq = vint((nu0 * g_v) ** 2 + (dnu0 * g) ** 2
                      + (nu1 * g_v) ** 2 + (dnu1 * g) ** 2)
        init_tail = wx * np.einsum("kxv,v->k", g[0] ** 2, wm)
        # periodic boundary mismatch of v |g|^2 across the identified faces
        face = np.abs(
            v * (g[:, :, 0, :] ** 2 - g[:, :, -1, :] ** 2)
        )
        bnd_tail = np.einsum("tkv,v->tk", face, wm)

        entry = {
            "field_and_transport": [
                time_integral(c_field[:, k]) for k in range(K)
            ],
            "time_derivative": [time_integral(c_gt[:, k]) for k in range(K)],
            "collision_action": [time_integral(c_coll[:, k]) for k in range(K)],
            "x_gradient": [time_integral(c_grad_x[:, k]) for k in range(K)],
            "v_gradient": [time_integral(c_grad_v[:, k]) for k in range(K)],
            "frequency_weighted": [
                time_integral(c_freq[:, k]) for k in range(K)
            ],
            "initial_slice": [float(t) for t in init_tail],
            "boundary": [time_integral(bnd_tail[:, k]) for k in range(K)],
        }
        micro_tails[float(cut)] = entry
        totals[float(cut)] = float(
            sum(sum(vals) for vals in entry.values())
        )
    return TailReport(cuts=[float(c) for c in cuts], micro_tails=micro_tails,
                      totals=totals)
