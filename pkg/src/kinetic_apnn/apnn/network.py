"""Smooth feed-forward approximators with input-derivative backpropagation.

The residual losses consume both network values and their first derivatives
with respect to the inputs, so each forward pass carries the input Jacobian
alongside the activations (forward accumulation), and the reverse pass
propagates cotangents of both the values and the Jacobian back to the
weights.  Everything is plain vectorized numpy with tanh hidden layers, which
keeps runs bit-reproducible under a fixed seed.

A periodic spatial embedding (sin x, cos x) is the default input map: the
networks are then periodic by construction and the boundary mismatch terms
vanish identically, while the loss still evaluates them.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np


def _left_matmul(W: np.ndarray, T: np.ndarray) -> np.ndarray:
    """W @ T over the middle axis of T (N, h, i) -> (N, o, i), one GEMM."""
    N, h, i = T.shape
    out = W @ T.transpose(1, 0, 2).reshape(h, N * i)
    return out.reshape(W.shape[0], N, i).transpose(1, 0, 2)


class NonFiniteOutput(Exception):
    """A network produced non-finite values; the training step must abort."""


class Mlp:
    """Tanh multilayer perceptron with value-and-Jacobian evaluation.

    ``sizes`` lists layer widths from input features to outputs.  The output
    layer is linear.  ``backprop`` consumes cotangents of both the outputs and
    the output Jacobian, covering losses built from first derivatives.
    """

    def __init__(self, sizes: Sequence[int], rng: np.random.Generator):
        self.sizes = tuple(int(s) for s in sizes)
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            scale = np.sqrt(2.0 / (fan_in + fan_out))
            self.weights.append(scale * rng.standard_normal((fan_out, fan_in)))
            self.biases.append(np.zeros(fan_out))

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def parameter_count(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def get_params(self) -> np.ndarray:
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.ravel())
            parts.append(b.ravel())
        return np.concatenate(parts)

    def set_params(self, vec: np.ndarray) -> None:
        pos = 0
        for idx, (w, b) in enumerate(zip(self.weights, self.biases)):
            self.weights[idx] = vec[pos : pos + w.size].reshape(w.shape).copy()
            pos += w.size
            self.biases[idx] = vec[pos : pos + b.size].copy()
            pos += b.size
        if pos != vec.size:
            raise ValueError("parameter vector length mismatch")

    def forward_with_jacobian(self, feats: np.ndarray,
                              feat_jac: Optional[np.ndarray] = None):
        """Values, Jacobians and the cache needed for the reverse pass.

        ``feats`` has shape (N, n_feat); ``feat_jac`` (N, n_feat, n_raw) is
        the Jacobian of the feature map (identity when omitted).  Returns
        (U (N, n_out), J (N, n_out, n_raw), cache).
        """
        N, n_feat = feats.shape
        if feat_jac is None:
            feat_jac = np.broadcast_to(
                np.eye(n_feat)[None], (N, n_feat, n_feat)
            )
        a = feats
        D = feat_jac
        acts = [a]
        slopes = []
        jacs = [D]
        pres = []
        L = self.n_layers
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            z = a @ W.T + b
            P = _left_matmul(W, D)
            pres.append(P)
            if l < L - 1:
                a = np.tanh(z)
                s = 1.0 - a * a
                D = s[:, :, None] * P
                acts.append(a)
                slopes.append(s)
                jacs.append(D)
            else:
                U, J = z, P
        cache = (acts, slopes, jacs, pres)
        return U, J, cache

    def backprop(self, cache, U_bar: np.ndarray, J_bar: np.ndarray):
        """Weight-space gradients of a scalar that depends on (U, J).

        Returns (grad_weights, grad_biases) aligned with the layer lists.
        """
        acts, slopes, jacs, pres = cache
        L = self.n_layers
        gW = [None] * L
        gb = [None] * L
        W_L = self.weights[-1]
        n_in = J_bar.shape[2]
        flat = lambda T: T.transpose(0, 2, 1).reshape(-1, T.shape[1])
        gW[L - 1] = U_bar.T @ acts[L - 1] + flat(J_bar).T @ flat(jacs[L - 1])
        gb[L - 1] = U_bar.sum(axis=0)
        a_bar = U_bar @ W_L
        D_bar = _left_matmul(W_L.T, J_bar)
        for l in range(L - 2, -1, -1):
            a_l = acts[l + 1]
            s_l = slopes[l]
            P_l = pres[l]
            # activation curvature couples the Jacobian cotangent back into z
            z_bar = s_l * a_bar + (-2.0 * a_l * s_l) * np.sum(
                D_bar * P_l, axis=2
            )
            P_bar = s_l[:, :, None] * D_bar
            gW[l] = z_bar.T @ acts[l] + flat(P_bar).T @ flat(jacs[l])
            gb[l] = z_bar.sum(axis=0)
            W_l = self.weights[l]
            a_bar = z_bar @ W_l
            D_bar = _left_matmul(W_l.T, P_bar)
        return gW, gb

    def grads_to_vector(self, gW, gb) -> np.ndarray:
        parts = []
        for w, b in zip(gW, gb):
            parts.append(w.ravel())
            parts.append(b.ravel())
        return np.concatenate(parts)


@dataclass(frozen=True)
class InputMap:
    """Feature map from raw coordinates (t[, x, v]) to network inputs.

    Periodic mode embeds x as (sin x, cos x); time and velocity are linearly
    rescaled to order one.
    """

    names: tuple  # e.g. ("t", "x") or ("t", "x", "v")
    periodic_x: bool = True
    t_scale: float = 1.0
    v_scale: float = 1.0

    @property
    def n_raw(self) -> int:
        return len(self.names)

    @property
    def n_features(self) -> int:
        n = 0
        for name in self.names:
            n += 2 if (name == "x" and self.periodic_x) else 1
        return n

    def apply(self, pts: np.ndarray):
        """Features and their Jacobian, shapes (N, n_feat), (N, n_feat, n_raw)."""
        pts = np.atleast_2d(pts)
        N = pts.shape[0]
        feats = np.empty((N, self.n_features))
        jac = np.zeros((N, self.n_features, self.n_raw))
        col = 0
        for raw, name in enumerate(self.names):
            p = pts[:, raw]
            if name == "x" and self.periodic_x:
                feats[:, col] = np.sin(p)
                feats[:, col + 1] = np.cos(p)
                jac[:, col, raw] = np.cos(p)
                jac[:, col + 1, raw] = -np.sin(p)
                col += 2
            elif name == "t":
                feats[:, col] = p / self.t_scale
                jac[:, col, raw] = 1.0 / self.t_scale
                col += 1
            elif name == "v":
                feats[:, col] = p / self.v_scale
                jac[:, col, raw] = 1.0 / self.v_scale
                col += 1
            else:
                feats[:, col] = p
                jac[:, col, raw] = 1.0
                col += 1
        return feats, jac


class FieldNet:
    """A network field over raw coordinates with derivative evaluation.

    With ``maxwellian_envelope`` the raw output is multiplied by the square
    root of the global equilibrium in v, so the network only has to learn the
    slowly varying prefactor; the velocity decay and its derivative come out
    analytically.  This is what makes the microscopic fields trainable.
    """

    def __init__(self, input_map: InputMap, hidden: Sequence[int], n_out: int,
                 rng: np.random.Generator, maxwellian_envelope: bool = False):
        self.input_map = input_map
        self.mlp = Mlp(
            (input_map.n_features, *hidden, n_out), rng
        )
        self.n_out = n_out
        self.maxwellian_envelope = maxwellian_envelope
        self._v_index = (
            input_map.names.index("v") if "v" in input_map.names else None
        )
        if maxwellian_envelope and self._v_index is None:
            raise ValueError("envelope weighting needs a velocity coordinate")

    def _envelope(self, pts: np.ndarray):
        v = pts[:, self._v_index]
        M = (2.0 * np.pi) ** (-0.25) * np.exp(-0.25 * v * v)
        return v, M

    def evaluate(self, pts: np.ndarray, with_cache: bool = False):
        """Values and raw-coordinate derivatives at points (N, n_raw).

        Returns (U (N, n_out), D (N, n_out, n_raw)[, cache]).
        """
        pts = np.atleast_2d(pts)
        feats, fjac = self.input_map.apply(pts)
        U, J, cache = self.mlp.forward_with_jacobian(feats, fjac)
        if self.maxwellian_envelope:
            v, M = self._envelope(pts)
            iv = self._v_index
            J = J * M[:, None, None]
            J[:, :, iv] -= 0.5 * (v * M)[:, None] * U
            U = U * M[:, None]
            cache = (cache, v, M)
        if not np.all(np.isfinite(U)):
            raise NonFiniteOutput("network produced non-finite values")
        if with_cache:
            return U, J, cache
        return U, J

    def backprop(self, cache, U_bar: np.ndarray, J_bar: np.ndarray) -> np.ndarray:
        if self.maxwellian_envelope:
            cache, v, M = cache
            iv = self._v_index
            U_bar = U_bar * M[:, None] - 0.5 * (v * M)[:, None] * J_bar[:, :, iv]
            J_bar = J_bar * M[:, None, None]
        gW, gb = self.mlp.backprop(cache, U_bar, J_bar)
        return self.mlp.grads_to_vector(gW, gb)

    def get_params(self) -> np.ndarray:
        return self.mlp.get_params()

    def set_params(self, vec: np.ndarray) -> None:
        self.mlp.set_params(vec)

    def parameter_count(self) -> int:
        return self.mlp.parameter_count()


@dataclass
class BundleConfig:
    """Architecture and embedding choices shared by all mode networks."""

    n_modes: int = 1
    dim: int = 1
    hidden: tuple = (24, 24)
    periodic_x: bool = True
    t_scale: float = 1.0
    v_scale: float = 3.0
    micro_envelope: bool = True
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "n_modes": self.n_modes,
            "dim": self.dim,
            "hidden": list(self.hidden),
            "periodic_x": self.periodic_x,
            "t_scale": self.t_scale,
            "v_scale": self.v_scale,
            "micro_envelope": self.micro_envelope,
            "seed": self.seed,
        }

    def hash(self) -> str:
        import hashlib

        payload = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()[:16]


class NetworkBundle:
    """Per-mode macro and micro networks for the chaos-coupled system.

    Mode i gets one macro net (t, x) -> fluid moments and one micro net
    (t, x, v) -> microscopic value.  Parameters concatenate across all nets in
    a fixed order, so optimizers and checkpoints treat the bundle as a single
    flat vector.
    """

    def __init__(self, config: BundleConfig):
        if config.dim != 1:
            raise ValueError("network bundles are one-dimensional for now")
        self.config = config
        rng = np.random.default_rng(config.seed)
        n_mom = config.dim + 2
        self.macro_nets = []
        self.micro_nets = []
        macro_map = InputMap(("t", "x"), periodic_x=config.periodic_x,
                             t_scale=config.t_scale)
        micro_map = InputMap(("t", "x", "v"), periodic_x=config.periodic_x,
                             t_scale=config.t_scale, v_scale=config.v_scale)
        for _ in range(config.n_modes):
            self.macro_nets.append(
                FieldNet(macro_map, config.hidden, n_mom, rng)
            )
            self.micro_nets.append(
                FieldNet(micro_map, config.hidden, 1, rng,
                         maxwellian_envelope=config.micro_envelope)
            )

    @property
    def n_modes(self) -> int:
        return self.config.n_modes

    def nets(self):
        for i in range(self.n_modes):
            yield self.macro_nets[i]
            yield self.micro_nets[i]

    def parameter_count(self) -> int:
        return sum(net.parameter_count() for net in self.nets())

    def get_params(self) -> np.ndarray:
        return np.concatenate([net.get_params() for net in self.nets()])

    def set_params(self, vec: np.ndarray) -> None:
        pos = 0
        for net in self.nets():
            n = net.parameter_count()
            net.set_params(vec[pos : pos + n])
            pos += n
        if pos != vec.size:
            raise ValueError("parameter vector length mismatch")

    def param_slices(self):
        """(net, slice) pairs in flat-vector order."""
        pos = 0
        out = []
        for net in self.nets():
            n = net.parameter_count()
            out.append((net, slice(pos, pos + n)))
            pos += n
        return out


def forward(bundle: NetworkBundle, mode: int, kind: str, pts: np.ndarray):
    """Field values plus first derivatives for one mode's network.

    ``kind`` is "macro" (points (t, x)) or "micro" (points (t, x, v)).
    Returns (values, derivatives) with derivatives indexed by the raw
    coordinates.  Raises NonFiniteOutput on overflow.
    """
    net = (bundle.macro_nets if kind == "macro" else bundle.micro_nets)[mode - 1]
    return net.evaluate(pts)


def postprocess_micro(g_grid: np.ndarray, basis) -> np.ndarray:
    """Remove the fluid component of velocity-grid samples of a micro field.

    Idempotent; the output's fluid moments vanish to roundoff.
    """
    return g_grid - basis.moments(g_grid) @ basis.values.T
