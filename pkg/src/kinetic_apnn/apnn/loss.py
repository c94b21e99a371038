"""Collocation sampling and assembly of the stochastic H1 residual loss.

The loss is the mode-weighted sum of squared micro-macro residuals plus
initial and periodic-boundary mismatches, each also differentiated in space
and velocity.  Time and space integrals are Monte-Carlo over the sampled
collocation points; velocity integrals use the trapezoid grid so the fluid
projection and the collision action inside the residuals stay at quadrature
accuracy.  Spatial and velocity gradients of the interior residuals are
central finite differences of the residual functions themselves (step
``fd_step``), which keeps the differentiation engine first-order only; the
initial and boundary gradient terms come straight from the network Jacobians.

Because every residual is linear in the network outputs, the parameter
gradient is assembled by one mirrored adjoint sweep over the same formulas,
with cotangents accumulated per evaluation batch and pushed through each
network's reverse pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..gpc import SgCoupling, relaxation_strengths
from ..micromacro import flux_jacobian, transport_profiles, v_moment_map
from ..phase_space import FluidBasis
from .network import NetworkBundle, NonFiniteOutput

PART_NAMES = (
    "interior_macro",
    "interior_micro",
    "initial",
    "boundary",
    "interior_macro_dx",
    "interior_micro_dx",
    "initial_dx",
    "boundary_dx",
    "interior_macro_dv",
    "interior_micro_dv",
    "initial_dv",
    "boundary_dv",
)


class DivergedLoss(Exception):
    """Loss exceeded the runaway threshold during training."""


@dataclass(frozen=True)
class SamplingConfig:
    """Collocation sizes and the velocity proposal for the sampler."""

    t_end: float
    n_interior: int = 256
    n_initial: int = 128
    n_boundary: int = 32
    v_max: float = 8.0
    v_proposal: str = "uniform"  # or "maxwellian"

    def __post_init__(self):
        if self.v_proposal not in ("uniform", "maxwellian"):
            raise ValueError(f"unknown velocity proposal {self.v_proposal}")


@dataclass
class CollocationBatch:
    """Sampled integration points with their Monte-Carlo weights.

    Interior rows carry (t, x) plus a velocity sample from the configured
    proposal; the loss quadrature itself evaluates micro residuals on the
    velocity grid, so the sampled v column serves proposal diagnostics and
    pointwise residual dumps.  Weights sum to the respective domain measures.
    """

    interior_tx: np.ndarray  # (P, 2)
    interior_v: np.ndarray  # (P,)
    interior_weight: float
    initial_x: np.ndarray  # (Q,)
    initial_weight: float
    boundary_t: np.ndarray  # (R,)
    boundary_weight: float
    seed: int
    mode_assignment: Optional[np.ndarray] = None  # (P,) mode per point


def sample_collocation(config: SamplingConfig, seed: int) -> CollocationBatch:
    """Draw a reproducible batch: uniform in time and space, proposal in v."""
    rng = np.random.default_rng(seed)
    t = rng.uniform(0.0, config.t_end, config.n_interior)
    x = rng.uniform(-np.pi, np.pi, config.n_interior)
    if config.v_proposal == "uniform":
        v = rng.uniform(-config.v_max, config.v_max, config.n_interior)
    else:
        v = rng.standard_normal(config.n_interior)
        bad = np.abs(v) > config.v_max
        while np.any(bad):
            v[bad] = rng.standard_normal(int(np.sum(bad)))
            bad = np.abs(v) > config.v_max
    x0 = rng.uniform(-np.pi, np.pi, config.n_initial)
    tb = rng.uniform(0.0, config.t_end, config.n_boundary)
    return CollocationBatch(
        interior_tx=np.stack([t, x], axis=1),
        interior_v=v,
        interior_weight=config.t_end * 2.0 * np.pi / config.n_interior,
        initial_x=x0,
        initial_weight=2.0 * np.pi / config.n_initial,
        boundary_t=tb,
        boundary_weight=config.t_end / max(config.n_boundary, 1),
        seed=seed,
    )


@dataclass
class LossConfig:
    """Physical and discretization parameters of the loss functional."""

    eps: float
    q: int = 3
    fd_step: float = 1e-4
    diverged_threshold: float = 1e6
    part_weights: Optional[dict] = None  # per-part multipliers (ablations)

    def weight_of(self, name: str) -> float:
        if self.part_weights is None:
            return 1.0
        return float(self.part_weights.get(name, 1.0))


@dataclass
class LossBreakdown:
    """All loss components per chaos mode, before and after mode weighting."""

    per_mode: dict  # name -> (K,) array
    weighted: dict  # name -> (K,) array, i^{2q} applied
    total: float
    eps: float
    q: int

    def part(self, name: str) -> float:
        return float(np.sum(self.weighted[name]))

    def unweighted_total(self) -> float:
        return float(sum(np.sum(v) for v in self.per_mode.values()))

    def check(self) -> None:
        """Arithmetic invariants: nonnegative parts summing to the total."""
        for name, vals in self.per_mode.items():
            if np.any(np.asarray(vals) < -1e-15):
                raise AssertionError(f"negative loss part {name}")
        s = sum(float(np.sum(v)) for v in self.weighted.values())
        if not np.isclose(s, self.total, rtol=0.0, atol=1e-12 * max(1.0, abs(s))):
            raise AssertionError("loss parts do not sum to the total")

    def to_dict(self) -> dict:
        out = {"total": self.total, "eps": self.eps, "q": self.q}
        for name in PART_NAMES:
            out[name] = float(np.sum(self.weighted[name]))
        return out


class _Record:
    """One evaluation batch of one network, with cotangent accumulators."""

    __slots__ = ("net", "cache", "U", "D", "U_bar", "D_bar")

    def __init__(self, net, cache, U, D):
        self.net = net
        self.cache = cache
        self.U = U
        self.D = D
        self.U_bar = np.zeros_like(U)
        self.D_bar = np.zeros_like(D)


class _MacroEval:
    """Macro-net values/derivatives at (t, x) points, with cotangent views."""

    def __init__(self, rec: _Record):
        self.rec = rec
        self.m = rec.U
        self.m_t = rec.D[:, :, 0]
        self.m_x = rec.D[:, :, 1]

    def add_bar(self, m=None, m_t=None, m_x=None):
        if m is not None:
            self.rec.U_bar += m
        if m_t is not None:
            self.rec.D_bar[:, :, 0] += m_t
        if m_x is not None:
            self.rec.D_bar[:, :, 1] += m_x


class _MicroEval:
    """Micro-net values/derivatives reshaped to (P, n_v), with cotangents."""

    def __init__(self, rec: _Record, shape):
        self.rec = rec
        self.shape = shape
        self.g = rec.U[:, 0].reshape(shape)
        self.g_t = rec.D[:, 0, 0].reshape(shape)
        self.g_x = rec.D[:, 0, 1].reshape(shape)
        self.g_v = rec.D[:, 0, 2].reshape(shape)

    def add_bar(self, g=None, g_t=None, g_x=None, g_v=None):
        n = self.rec.U.shape[0]
        if g is not None:
            self.rec.U_bar[:, 0] += g.reshape(n)
        if g_t is not None:
            self.rec.D_bar[:, 0, 0] += g_t.reshape(n)
        if g_x is not None:
            self.rec.D_bar[:, 0, 1] += g_x.reshape(n)
        if g_v is not None:
            self.rec.D_bar[:, 0, 2] += g_v.reshape(n)


class _ProviderNet:
    """Adapter exposing a field provider mode through the network interface."""

    def __init__(self, provider, mode: int, kind: str):
        self.provider = provider
        self.mode = mode
        self.kind = kind

    def evaluate(self, pts: np.ndarray, with_cache: bool = False):
        pts = np.atleast_2d(pts)
        if self.kind == "macro":
            m, m_t, m_x = self.provider.macro_value(
                self.mode, pts[:, 0], pts[:, 1]
            )
            U = m
            D = np.stack([m_t, m_x], axis=2)
        else:
            g, g_t, g_x, g_v = self.provider.micro_value(
                self.mode, pts[:, 0], pts[:, 1], pts[:, 2]
            )
            U = g[:, None]
            D = np.stack([g_t, g_x, g_v], axis=1)[:, None, :]
        if with_cache:
            return U, D, None
        return U, D


class ProviderBundle:
    """Exact fields injected in place of networks (zero-at-truth checks).

    Wraps anything with ``macro_value``/``micro_value`` (the closed-form
    plane waves, interpolated trajectories) so the loss assembler can
    evaluate it; gradients are not available.
    """

    def __init__(self, provider, n_modes: int):
        self.n_modes = n_modes
        self.macro_nets = [
            _ProviderNet(provider, i, "macro") for i in range(1, n_modes + 1)
        ]
        self.micro_nets = [
            _ProviderNet(provider, i, "micro") for i in range(1, n_modes + 1)
        ]

    def parameter_count(self) -> int:
        return 0


class LossAssembler:
    """Precomputed operators and quadrature for repeated loss evaluations."""

    def __init__(self, basis: FluidBasis, coupling: SgCoupling,
                 config: LossConfig):
        self.basis = basis
        self.coupling = coupling
        self.config = config
        vg = basis.vgrid
        self.v_nodes = vg.nodes[:, 0]
        self.w_v = vg.weights
        self.n_v = vg.n_total
        self.A = flux_jacobian(basis)
        self.Phi = basis.values  # (nv, 3)
        self.coef = basis.coef_map  # (nv, 3)
        self.dPhi = basis.eval_dv(vg.nodes)[:, :, 0]  # (nv, 3)
        self.Mv = v_moment_map(basis)  # (nv, 3)
        self.Psi = transport_profiles(basis, self.A)  # (nv, 3)
        # orthogonalizer B: g_tilde = g @ B
        self.B = np.eye(self.n_v) - self.coef @ self.Phi.T
        self.K = coupling.K
        self.q_weights = np.arange(1, self.K + 1, dtype=float) ** (2 * config.q)
        delta = config.fd_step
        self.v_plus = self.v_nodes + delta
        self.v_minus = self.v_nodes - delta
        self.Phi_p = basis.eval(self.v_plus)
        self.Phi_m = basis.eval(self.v_minus)
        self.Psi_p = transport_profiles(basis, self.A, self.v_plus)
        self.Psi_m = transport_profiles(basis, self.A, self.v_minus)
        if coupling.backend == "bgk-surrogate":
            c0, c1 = relaxation_strengths(coupling, basis)
            self.zmat = c0 * np.eye(self.K) + c1 * coupling.z_factor
            self.off_grid_interp = None
        else:
            self.zmat = None
            self.off_grid_interp = (
                self._interp_matrix(self.v_plus),
                self._interp_matrix(self.v_minus),
            )

    def _interp_matrix(self, v_pts: np.ndarray) -> np.ndarray:
        """Linear interpolation matrix from grid nodes to shifted points."""
        vg = self.basis.vgrid
        h = vg.spacing
        rel = (np.clip(v_pts, -vg.v_max, vg.v_max) + vg.v_max) / h
        i0 = np.clip(np.floor(rel).astype(int), 0, vg.n - 2)
        frac = rel - i0
        M = np.zeros((v_pts.size, self.n_v))
        M[np.arange(v_pts.size), i0] = 1.0 - frac
        M[np.arange(v_pts.size), i0 + 1] = frac
        return M

    # ------------------------------------------------------------------ utils

    def _micro_points(self, t, x):
        """(t, x) rows tensored with the velocity grid, flattened."""
        P = t.size
        pts = np.empty((P * self.n_v, 3))
        pts[:, 0] = np.repeat(t, self.n_v)
        pts[:, 1] = np.repeat(x, self.n_v)
        pts[:, 2] = np.tile(self.v_nodes, P)
        return pts

    def _micro_points_shifted(self, t, x, v_shift):
        P = t.size
        pts = np.empty((P * self.n_v, 3))
        pts[:, 0] = np.repeat(t, self.n_v)
        pts[:, 1] = np.repeat(x, self.n_v)
        pts[:, 2] = np.tile(v_shift, P)
        return pts

    def _eval_macro(self, bundle, mode, pts, records):
        net = bundle.macro_nets[mode - 1]
        U, D, cache = net.evaluate(pts, with_cache=True)
        rec = _Record(net, cache, U, D)
        records.append(rec)
        return _MacroEval(rec)

    def _eval_micro(self, bundle, mode, pts, shape, records):
        net = bundle.micro_nets[mode - 1]
        U, D, cache = net.evaluate(pts, with_cache=True)
        rec = _Record(net, cache, U, D)
        records.append(rec)
        return _MicroEval(rec, shape)

    # -------------------------------------------------------------- main entry

    def assemble(self, bundle: NetworkBundle, batch: CollocationBatch,
                 initial_provider, want_grad: bool = False):
        """Loss breakdown (and optionally the flat parameter gradient)."""
        if bundle.n_modes != self.K:
            raise ValueError("bundle mode count does not match the coupling")
        cfg = self.config
        eps = cfg.eps
        delta = cfg.fd_step
        K, nv = self.K, self.n_v
        records: list[_Record] = []

        t_i = batch.interior_tx[:, 0]
        x_i = batch.interior_tx[:, 1]
        P = t_i.size
        Q = batch.initial_x.size
        R = batch.boundary_t.size

        # ---------------- evaluations
        mac = {}
        mic = {}
        for i in range(1, K + 1):
            mac[i, "base"] = self._eval_macro(
                bundle, i, np.stack([t_i, x_i], 1), records
            )
            mac[i, "xp"] = self._eval_macro(
                bundle, i, np.stack([t_i, x_i + delta], 1), records
            )
            mac[i, "xm"] = self._eval_macro(
                bundle, i, np.stack([t_i, x_i - delta], 1), records
            )
            mac[i, "ini"] = self._eval_macro(
                bundle, i,
                np.stack([np.zeros(Q), batch.initial_x], 1), records
            )
            mac[i, "bl"] = self._eval_macro(
                bundle, i,
                np.stack([batch.boundary_t, np.full(R, np.pi)], 1), records
            )
            mac[i, "br"] = self._eval_macro(
                bundle, i,
                np.stack([batch.boundary_t, np.full(R, -np.pi)], 1), records
            )
            mic[i, "base"] = self._eval_micro(
                bundle, i, self._micro_points(t_i, x_i), (P, nv), records
            )
            mic[i, "xp"] = self._eval_micro(
                bundle, i, self._micro_points(t_i, x_i + delta), (P, nv), records
            )
            mic[i, "xm"] = self._eval_micro(
                bundle, i, self._micro_points(t_i, x_i - delta), (P, nv), records
            )
            mic[i, "vp"] = self._eval_micro(
                bundle, i, self._micro_points_shifted(t_i, x_i, self.v_plus),
                (P, nv), records
            )
            mic[i, "vm"] = self._eval_micro(
                bundle, i, self._micro_points_shifted(t_i, x_i, self.v_minus),
                (P, nv), records
            )
            mic[i, "ini"] = self._eval_micro(
                bundle, i, self._micro_points(np.zeros(Q), batch.initial_x),
                (Q, nv), records
            )
            mic[i, "bl"] = self._eval_micro(
                bundle, i,
                self._micro_points(batch.boundary_t, np.full(R, np.pi)),
                (R, nv), records
            )
            mic[i, "br"] = self._eval_micro(
                bundle, i,
                self._micro_points(batch.boundary_t, np.full(R, -np.pi)),
                (R, nv), records
            )

        # ---------------- post-processed micro fields (orthogonal part)
        B = self.B
        tl = {}  # (mode, tag, quantity) -> array
        for i in range(1, K + 1):
            for tag in ("base", "xp", "xm", "ini", "bl", "br"):
                e = mic[i, tag]
                tl[i, tag, "g"] = e.g @ B
                tl[i, tag, "g_t"] = e.g_t @ B
                tl[i, tag, "g_x"] = e.g_x @ B
            tl[i, "ini", "g_v"] = (
                mic[i, "ini"].g_v - (mic[i, "ini"].g @ self.coef) @ self.dPhi.T
            )
            for tag in ("bl", "br"):
                tl[i, tag, "g_v"] = (
                    mic[i, tag].g_v - (mic[i, tag].g @ self.coef) @ self.dPhi.T
                )
            # shifted-velocity fields subtract the base-grid fluid moments
            for tag, Phi_s in (("vp", self.Phi_p), ("vm", self.Phi_m)):
                e = mic[i, tag]
                base = mic[i, "base"]
                tl[i, tag, "g"] = e.g - (base.g @ self.coef) @ Phi_s.T
                tl[i, tag, "g_t"] = e.g_t - (base.g_t @ self.coef) @ Phi_s.T
                tl[i, tag, "g_x"] = e.g_x - (base.g_x @ self.coef) @ Phi_s.T

        # ---------------- residuals
        def d1_at(tag):
            out = []
            for i in range(1, K + 1):
                e = mac[i, tag]
                r = e.m_t + e.m_x @ self.A.T
                if eps != 0.0:
                    r = r + eps * (tl[i, tag, "g_x"] @ self.Mv)
                out.append(r)
            return np.stack(out)

        def d2_at(tag):
            g_stack = np.stack([tl[i, tag, "g"] for i in range(1, K + 1)])
            coll = self.coupling.apply(g_stack)
            out = []
            for i in range(1, K + 1):
                e = mac[i, tag]
                r = e.m_x @ self.Psi.T - coll[i - 1]
                if eps != 0.0:
                    gx = tl[i, tag, "g_x"]
                    r = r + eps * (
                        tl[i, tag, "g_t"]
                        + self.v_nodes[None, :] * gx
                        - (gx @ self.Mv) @ self.Phi.T
                    )
                out.append(r)
            return np.stack(out)

        def d2_at_shifted(tag, v_s, Phi_s, Psi_s):
            g_stack = np.stack([tl[i, tag, "g"] for i in range(1, K + 1)])
            if self.zmat is not None:
                coll = -np.einsum("ik,kpj->ipj", self.zmat, g_stack)
            else:
                interp = (self.off_grid_interp[0] if tag == "vp"
                          else self.off_grid_interp[1])
                base_stack = np.stack(
                    [tl[i, "base", "g"] for i in range(1, K + 1)]
                )
                coll = self.coupling.apply(base_stack) @ interp.T
            out = []
            for i in range(1, K + 1):
                e = mac[i, "base"]
                r = e.m_x @ Psi_s.T - coll[i - 1]
                if eps != 0.0:
                    gx = tl[i, tag, "g_x"]
                    gx_base = tl[i, "base", "g_x"]
                    r = r + eps * (
                        tl[i, tag, "g_t"]
                        + v_s[None, :] * gx
                        - (gx_base @ self.Mv) @ Phi_s.T
                    )
                out.append(r)
            return np.stack(out)

        d1 = d1_at("base")
        d1_p, d1_m = d1_at("xp"), d1_at("xm")
        d1_dx = (d1_p - d1_m) / (2.0 * delta)
        d2 = d2_at("base")
        d2_p, d2_m = d2_at("xp"), d2_at("xm")
        d2_dx = (d2_p - d2_m) / (2.0 * delta)
        d2_vp = d2_at_shifted("vp", self.v_plus, self.Phi_p, self.Psi_p)
        d2_vm = d2_at_shifted("vm", self.v_minus, self.Phi_m, self.Psi_m)
        d2_dv = (d2_vp - d2_vm) / (2.0 * delta)

        # initial mismatches: value, d/dx, d/dv
        xq = batch.initial_x
        xv_x = np.repeat(xq, nv)
        xv_v = np.tile(self.v_nodes, Q)
        d_ini, d_ini_dx, d_ini_dv = [], [], []
        for i in range(1, K + 1):
            e = mac[i, "ini"]
            h = e.m @ self.Phi.T + eps * tl[i, "ini", "g"]
            h_x = e.m_x @ self.Phi.T + eps * tl[i, "ini", "g_x"]
            h_v = e.m @ self.dPhi.T + eps * tl[i, "ini", "g_v"]
            hi, _, hi_x, hi_v = initial_provider.h_value(i, 0.0, xv_x, xv_v)
            d_ini.append(h - hi.reshape(Q, nv))
            d_ini_dx.append(h_x - hi_x.reshape(Q, nv))
            d_ini_dv.append(h_v - hi_v.reshape(Q, nv))
        d_ini = np.stack(d_ini)
        d_ini_dx = np.stack(d_ini_dx)
        d_ini_dv = np.stack(d_ini_dv)

        # boundary mismatches of h and its gradients across the identified faces
        mis, mis_dx, mis_dv = [], [], []
        for i in range(1, K + 1):
            parts = {}
            for tag in ("bl", "br"):
                e = mac[i, tag]
                parts[tag, "h"] = e.m @ self.Phi.T + eps * tl[i, tag, "g"]
                parts[tag, "h_x"] = e.m_x @ self.Phi.T + eps * tl[i, tag, "g_x"]
                parts[tag, "h_v"] = e.m @ self.dPhi.T + eps * tl[i, tag, "g_v"]
            mis.append(parts["bl", "h"] - parts["br", "h"])
            mis_dx.append(parts["bl", "h_x"] - parts["br", "h_x"])
            mis_dv.append(parts["bl", "h_v"] - parts["br", "h_v"])
        mis = np.stack(mis)
        mis_dx = np.stack(mis_dx)
        mis_dv = np.stack(mis_dv)

        # ---------------- quadrature
        w_int, w_ini, w_b = (
            batch.interior_weight,
            batch.initial_weight,
            batch.boundary_weight,
        )
        per_mode = {
            "interior_macro": w_int * np.sum(d1**2, axis=(1, 2)),
            "interior_micro": w_int * np.einsum("kpj,j->k", d2**2, self.w_v),
            "initial": w_ini * np.einsum("kqj,j->k", d_ini**2, self.w_v),
            "boundary": w_b * np.einsum("krj,j->k", mis**2, self.w_v),
            "interior_macro_dx": w_int * np.sum(d1_dx**2, axis=(1, 2)),
            "interior_micro_dx": w_int * np.einsum(
                "kpj,j->k", d2_dx**2, self.w_v
            ),
            "initial_dx": w_ini * np.einsum("kqj,j->k", d_ini_dx**2, self.w_v),
            "boundary_dx": w_b * np.einsum("krj,j->k", mis_dx**2, self.w_v),
            "interior_macro_dv": np.zeros(K),
            "interior_micro_dv": w_int * np.einsum(
                "kpj,j->k", d2_dv**2, self.w_v
            ),
            "initial_dv": w_ini * np.einsum("kqj,j->k", d_ini_dv**2, self.w_v),
            "boundary_dv": w_b * np.einsum("krj,j->k", mis_dv**2, self.w_v),
        }
        weighted = {
            k: cfg.weight_of(k) * self.q_weights * v for k, v in per_mode.items()
        }
        total = float(sum(np.sum(v) for v in weighted.values()))
        breakdown = LossBreakdown(
            per_mode=per_mode, weighted=weighted, total=total, eps=eps, q=cfg.q
        )
        if not np.isfinite(total):
            raise NonFiniteOutput("loss evaluated to a non-finite value")
        if not want_grad:
            return breakdown, None

        # ---------------- adjoint sweep (mirrors the forward formulas)
        qw = self.q_weights
        wv = self.w_v[None, None, :]
        pw = cfg.weight_of
        d1_bar = pw("interior_macro") * 2.0 * w_int * qw[:, None, None] * d1
        d1dx_bar = (
            pw("interior_macro_dx") * 2.0 * w_int * qw[:, None, None] * d1_dx
        )
        d2_bar = pw("interior_micro") * 2.0 * w_int * qw[:, None, None] * d2 * wv
        d2dx_bar = (
            pw("interior_micro_dx") * 2.0 * w_int * qw[:, None, None] * d2_dx * wv
        )
        d2dv_bar = (
            pw("interior_micro_dv") * 2.0 * w_int * qw[:, None, None] * d2_dv * wv
        )
        dini_bar = pw("initial") * 2.0 * w_ini * qw[:, None, None] * d_ini * wv
        dinidx_bar = (
            pw("initial_dx") * 2.0 * w_ini * qw[:, None, None] * d_ini_dx * wv
        )
        dinidv_bar = (
            pw("initial_dv") * 2.0 * w_ini * qw[:, None, None] * d_ini_dv * wv
        )
        mis_bar = pw("boundary") * 2.0 * w_b * qw[:, None, None] * mis * wv
        misdx_bar = (
            pw("boundary_dx") * 2.0 * w_b * qw[:, None, None] * mis_dx * wv
        )
        misdv_bar = (
            pw("boundary_dv") * 2.0 * w_b * qw[:, None, None] * mis_dv * wv
        )

        tl_bar = {}

        def tl_add(i, tag, name, val):
            key = (i, tag, name)
            if key in tl_bar:
                tl_bar[key] = tl_bar[key] + val
            else:
                tl_bar[key] = val

        def adj_d1(tag, bar):
            for i in range(1, K + 1):
                e = mac[i, tag]
                e.add_bar(m_t=bar[i - 1], m_x=bar[i - 1] @ self.A)
                if eps != 0.0:
                    tl_add(i, tag, "g_x", eps * (bar[i - 1] @ self.Mv.T))

        def adj_d2(tag, bar):
            coll_bar = self.coupling.apply_transpose(-bar)
            for i in range(1, K + 1):
                b = bar[i - 1]
                mac[i, tag].add_bar(m_x=b @ self.Psi)
                tl_add(i, tag, "g", coll_bar[i - 1])
                if eps != 0.0:
                    tl_add(i, tag, "g_t", eps * b)
                    tl_add(
                        i, tag, "g_x",
                        eps * (
                            self.v_nodes[None, :] * b
                            - (b @ self.Phi) @ self.Mv.T
                        ),
                    )

        def adj_d2_shifted(tag, bar, v_s, Phi_s, Psi_s):
            if self.zmat is not None:
                # coll enters as r = ... - coll with coll = -zmat g, so the
                # cotangent of g is +zmat bar
                collbar = np.einsum("ik,ipj->kpj", self.zmat, bar)
                for k in range(1, K + 1):
                    tl_add(k, tag, "g", collbar[k - 1])
            else:
                interp = (self.off_grid_interp[0] if tag == "vp"
                          else self.off_grid_interp[1])
                back = self.coupling.apply_transpose(-(bar @ interp))
                for k in range(1, K + 1):
                    tl_add(k, "base", "g", back[k - 1])
            for i in range(1, K + 1):
                b = bar[i - 1]
                mac[i, "base"].add_bar(m_x=b @ Psi_s)
                if eps != 0.0:
                    tl_add(i, tag, "g_t", eps * b)
                    tl_add(i, tag, "g_x", eps * (v_s[None, :] * b))
                    tl_add(i, "base", "g_x", -eps * ((b @ Phi_s) @ self.Mv.T))

        adj_d1("base", d1_bar)
        adj_d1("xp", d1dx_bar / (2.0 * delta))
        adj_d1("xm", -d1dx_bar / (2.0 * delta))
        adj_d2("base", d2_bar)
        adj_d2("xp", d2dx_bar / (2.0 * delta))
        adj_d2("xm", -d2dx_bar / (2.0 * delta))
        adj_d2_shifted("vp", d2dv_bar / (2.0 * delta), self.v_plus,
                       self.Phi_p, self.Psi_p)
        adj_d2_shifted("vm", -d2dv_bar / (2.0 * delta), self.v_minus,
                       self.Phi_m, self.Psi_m)

        for i in range(1, K + 1):
            e = mac[i, "ini"]
            e.add_bar(
                m=dini_bar[i - 1] @ self.Phi + dinidv_bar[i - 1] @ self.dPhi,
                m_x=dinidx_bar[i - 1] @ self.Phi,
            )
            if eps != 0.0:
                tl_add(i, "ini", "g", eps * dini_bar[i - 1])
                tl_add(i, "ini", "g_x", eps * dinidx_bar[i - 1])
                tl_add(i, "ini", "g_v", eps * dinidv_bar[i - 1])
            for tag, sign in (("bl", 1.0), ("br", -1.0)):
                e = mac[i, tag]
                e.add_bar(
                    m=sign * (
                        mis_bar[i - 1] @ self.Phi
                        + misdv_bar[i - 1] @ self.dPhi
                    ),
                    m_x=sign * (misdx_bar[i - 1] @ self.Phi),
                )
                if eps != 0.0:
                    tl_add(i, tag, "g", sign * eps * mis_bar[i - 1])
                    tl_add(i, tag, "g_x", sign * eps * misdx_bar[i - 1])
                    tl_add(i, tag, "g_v", sign * eps * misdv_bar[i - 1])

        # push post-processing adjoints into the raw evaluations
        for (i, tag, name), bar in tl_bar.items():
            e = mic[i, tag]
            if tag in ("vp", "vm"):
                Phi_s = self.Phi_p if tag == "vp" else self.Phi_m
                base = mic[i, "base"]
                # g_tilde(v_s) = g(v_s) - (g_base @ coef) @ Phi_s^T
                back = -(bar @ Phi_s) @ self.coef.T
                if name == "g":
                    e.add_bar(g=bar)
                    base.add_bar(g=back)
                elif name == "g_t":
                    e.add_bar(g_t=bar)
                    base.add_bar(g_t=back)
                elif name == "g_x":
                    e.add_bar(g_x=bar)
                    base.add_bar(g_x=back)
            elif name == "g_v":
                # g_tilde_v = g_v - (g @ coef) @ dPhi^T
                e.add_bar(g_v=bar, g=-(bar @ self.dPhi) @ self.coef.T)
            else:
                mapped = bar @ self.B.T
                if name == "g":
                    e.add_bar(g=mapped)
                elif name == "g_t":
                    e.add_bar(g_t=mapped)
                elif name == "g_x":
                    e.add_bar(g_x=mapped)

        grad = np.zeros(bundle.parameter_count())
        slices = {id(net): sl for net, sl in bundle.param_slices()}
        for rec in records:
            vec = rec.net.backprop(rec.cache, rec.U_bar, rec.D_bar)
            grad[slices[id(rec.net)]] += vec
        return breakdown, grad


def assemble_loss(
    bundle: NetworkBundle,
    batch: CollocationBatch,
    coupling: SgCoupling,
    basis: FluidBasis,
    config: LossConfig,
    initial_provider,
    want_grad: bool = False,
):
    """One-shot convenience wrapper around ``LossAssembler``."""
    return LossAssembler(basis, coupling, config).assemble(
        bundle, batch, initial_provider, want_grad=want_grad
    )
