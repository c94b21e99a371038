"""Config-driven experiment runner: one subcommand per study mode.

Every run validates its JSON configuration up front (exit code 2 with a
machine-readable error record naming the offending key), seeds all
randomness explicitly, and writes a manifest plus CSV/JSON artifacts whose
bytes are reproducible for identical configuration and seed.  Numerical
failures exit with code 1 and an error record.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import pathlib
import sys

import numpy as np

from . import __version__
from .collision import (
    GapNonPositive,
    KernelSpec,
    assemble_bgk_surrogate,
    assemble_boltzmann_matrix,
    verify_hypocoercivity,
)
from .gpc import assemble_sg_coupling, build_gpc_basis
from .micromacro import flux_jacobian
from .phase_space import SpatialGrid, VelocityGrid, build_fluid_basis
from .reference import (
    SolverConfig,
    error_energy_series,
    fit_decay_rate,
    kinetic_plane_wave,
    lyapunov_series,
    solve_acoustic,
    solve_acoustic_discrete,
    solve_sg_micromacro,
    tail_report,
)


class ConfigError(Exception):
    def __init__(self, key: str, message: str):
        super().__init__(message)
        self.key = key
        self.message = message


MODES = ("train", "solve", "verify-hypo", "ap-study", "theorem2-study", "tails")

DEFAULT_CONFIG = {
    "mode": "verify-hypo",
    "seed": 0,
    "grid": {"dim": 1, "n_x": 64, "n_v": 32, "v_max": 8.0, "tol_gram": 1e-7},
    "kernel": {"gamma": 0.0, "C": 1.0, "b1_strength": 0.02, "C_z": 1.0,
               "q_weight": 3},
    "chaos": {"n_modes": 2},
    "collision": {"backend": "bgk-surrogate", "n_angle": 32},
    "physics": {"eps": 1.0, "t_end": 0.5, "q": 3},
    "solver": {"dt": 1e-3, "cfl": 0.9, "transport_scheme": "upwind3",
               "n_store": 11},
    "network": {"hidden": [24, 24], "v_scale": 3.0, "micro_envelope": True,
                "periodic_x": True, "t_scale": 0.5},
    "sampling": {"n_interior": 96, "n_initial": 48, "n_boundary": 12,
                 "v_proposal": "uniform"},
    "training": {"n_steps": 2000, "learning_rate": 3e-3,
                 "checkpoint_every": 250, "target_loss": None,
                 "lr_decay_steps": 1200, "fd_step": 1e-4},
    "wave": {"wavenumber": 1, "amplitudes": [0.3, 0.15]},
    "ap_study": {"eps_list": [1.0, 1e-2, 1e-4, 1e-6], "n_x": 128,
                 "dt": 2.5e-4},
    "tails": {"cuts": [0.0, 2.0, 4.0, 6.0]},
}


def _merge(base: dict, override: dict, path="") -> dict:
    out = dict(base)
    for key, val in override.items():
        full = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(full, f"unknown configuration key '{full}'")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(full, f"'{full}' must be a table")
            out[key] = _merge(base[key], val, full)
        else:
            out[key] = val
    return out


def _require_number(cfg, section, key, low=None, high=None, integer=False):
    val = cfg[section][key]
    full = f"{section}.{key}"
    if isinstance(val, bool) or not isinstance(val, (int, float)):
        raise ConfigError(full, f"'{full}' must be a number, got {val!r}")
    if integer and int(val) != val:
        raise ConfigError(full, f"'{full}' must be an integer, got {val!r}")
    if low is not None and val < low:
        raise ConfigError(full, f"'{full}' = {val} below minimum {low}")
    if high is not None and val > high:
        raise ConfigError(full, f"'{full}' = {val} above maximum {high}")
    return val


def validate_config(cfg: dict) -> dict:
    """Cross-field validation; raises ConfigError naming the offending key."""
    if cfg["mode"] not in MODES:
        raise ConfigError("mode", f"mode must be one of {MODES}")
    _require_number(cfg, "grid", "dim", 1, 3, integer=True)
    _require_number(cfg, "grid", "n_x", 4, integer=True)
    _require_number(cfg, "grid", "n_v", 8, integer=True)
    _require_number(cfg, "grid", "v_max", 0.0)
    _require_number(cfg, "kernel", "gamma", 0.0, 1.0)
    _require_number(cfg, "kernel", "C", 0.0)
    _require_number(cfg, "chaos", "n_modes", 1, integer=True)
    _require_number(cfg, "physics", "eps", 0.0)
    _require_number(cfg, "physics", "t_end", 0.0)
    _require_number(cfg, "physics", "q", 1, integer=True)
    _require_number(cfg, "solver", "dt", 0.0)
    if cfg["collision"]["backend"] not in ("bgk-surrogate",
                                           "boltzmann-quadrature"):
        raise ConfigError("collision.backend",
                          "backend must be bgk-surrogate or "
                          "boltzmann-quadrature")
    K = int(cfg["chaos"]["n_modes"])
    amps = cfg["wave"]["amplitudes"]
    if not isinstance(amps, list) or len(amps) != K:
        raise ConfigError(
            "wave.amplitudes",
            f"need exactly chaos.n_modes = {K} amplitudes, got {amps!r}",
        )
    q = int(cfg["physics"]["q"])
    if q < 3:
        raise ConfigError(
            "physics.q",
            "mode-weight exponent must exceed the chaos sup-norm growth "
            "plus two (q >= 3 for the uniform basis)",
        )
    return cfg


def config_hash(cfg: dict) -> str:
    payload = json.dumps(cfg, sort_keys=True).encode()
    return hashlib.sha256(payload).hexdigest()


def apply_overrides(cfg: dict, overrides: list[str]) -> dict:
    out = json.loads(json.dumps(cfg))
    for item in overrides:
        if "=" not in item:
            raise ConfigError("override", f"override '{item}' is not key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = out
        parts = key.split(".")
        for part in parts[:-1]:
            if part not in node or not isinstance(node[part], dict):
                raise ConfigError(key, f"unknown configuration key '{key}'")
            node = node[part]
        if parts[-1] not in node:
            raise ConfigError(key, f"unknown configuration key '{key}'")
        node[parts[-1]] = value
    return out


# --- shared builders ---------------------------------------------------------


class Experiment:
    """Operators and reference objects shared by the run modes."""

    def __init__(self, cfg: dict):
        self.cfg = cfg
        g = cfg["grid"]
        self.vgrid = VelocityGrid(dim=int(g["dim"]), n=int(g["n_v"]),
                                  v_max=float(g["v_max"]))
        self.sgrid = SpatialGrid(dim=int(g["dim"]), n=int(g["n_x"]))
        self.basis = build_fluid_basis(self.vgrid,
                                       tol_gram=float(g["tol_gram"]))
        k = cfg["kernel"]
        measure = {1: 2 * np.pi, 2: 2 * np.pi, 3: 4 * np.pi}[int(g["dim"])]
        self.spec = KernelSpec(
            gamma=float(k["gamma"]), C=float(k["C"]),
            b0=1.0 / measure,
            b1=float(k["b1_strength"]) / measure,
            C_z=float(k["C_z"]), q_weight=int(k["q_weight"]),
        )
        self.gpc = build_gpc_basis(int(cfg["chaos"]["n_modes"]),
                                   C_z=float(k["C_z"]))
        self.coupling = assemble_sg_coupling(
            self.spec, self.gpc, self.vgrid, self.basis,
            backend=cfg["collision"]["backend"],
            n_angle=int(cfg["collision"]["n_angle"]),
        )

    def wave(self):
        w = self.cfg["wave"]
        return kinetic_plane_wave(
            self.basis, self.coupling, float(self.cfg["physics"]["eps"]),
            wavenumber=int(w["wavenumber"]),
            amplitudes=[complex(a) for a in w["amplitudes"]],
        )

    def solver_config(self, eps=None, dt=None, t_end=None):
        s = self.cfg["solver"]
        p = self.cfg["physics"]
        return SolverConfig(
            eps=float(p["eps"] if eps is None else eps),
            dt=float(s["dt"] if dt is None else dt),
            t_end=float(p["t_end"] if t_end is None else t_end),
            cfl=float(s["cfl"]),
            transport_scheme=s["transport_scheme"],
            n_store=int(s["n_store"]),
        )


def write_manifest(out_dir: pathlib.Path, cfg: dict, extra=None) -> None:
    manifest = {
        "config": cfg,
        "config_hash": config_hash(cfg),
        "seed": cfg["seed"],
        "package_version": __version__,
        "numpy_version": np.__version__,
    }
    if extra:
        manifest.update(extra)
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    )


def _error_record(out_dir, kind: str, key: str, message: str) -> dict:
    record = {"error": {"kind": kind, "key": key, "message": message}}
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "error.json").write_text(
            json.dumps(record, indent=2, sort_keys=True) + "\n"
        )
    return record


# --- run modes ----------------------------------------------------------------


def _run_verify_hypo(exp: Experiment, out_dir: pathlib.Path) -> int:
    cfg = exp.cfg
    backend = cfg["collision"]["backend"]
    if backend == "bgk-surrogate":
        cm = assemble_bgk_surrogate(exp.basis)
    else:
        cm = assemble_boltzmann_matrix(
            exp.spec, exp.vgrid, n_angle=int(cfg["collision"]["n_angle"]),
            basis=exp.basis,
        )
    report = verify_hypocoercivity(cm, exp.basis, seed=int(cfg["seed"]))
    report.save(out_dir / "hypo_report.json")
    cm.save_binary(out_dir / "collision_matrix.npz")
    return 0


def _run_solve(exp: Experiment, out_dir: pathlib.Path) -> int:
    wave = exp.wave()
    m0, g0 = wave.initial_data(exp.sgrid)
    traj = solve_sg_micromacro(
        m0, g0, exp.solver_config(), exp.coupling, exp.basis, exp.sgrid
    )
    traj.save_csv(out_dir / "trajectory")
    q = int(exp.cfg["physics"]["q"])
    ly = lyapunov_series(traj, exp.basis, q)
    table = np.column_stack([traj.times, ly])
    np.savetxt(out_dir / "lyapunov_vs_t.csv", table, delimiter=",",
               fmt="%.17e", header="time,lyapunov", comments="")
    report = {
        "lyapunov_nonincreasing": bool(np.all(np.diff(ly) <= 1e-12 + 0.0)),
        "fitted_decay_rate": fit_decay_rate(traj.times, ly),
    }
    (out_dir / "solve_report.json").write_text(
        json.dumps(report, indent=2, sort_keys=True) + "\n"
    )
    return 0


def _build_training(exp: Experiment):
    from .apnn import (
        BundleConfig,
        LossAssembler,
        LossConfig,
        NetworkBundle,
        SamplingConfig,
        TrainConfig,
        sample_collocation,
    )

    cfg = exp.cfg
    n = cfg["network"]
    t = cfg["training"]
    p = cfg["physics"]
    bundle = NetworkBundle(
        BundleConfig(
            n_modes=int(cfg["chaos"]["n_modes"]),
            hidden=tuple(int(h) for h in n["hidden"]),
            periodic_x=bool(n["periodic_x"]),
            t_scale=float(n["t_scale"]),
            v_scale=float(n["v_scale"]),
            micro_envelope=bool(n["micro_envelope"]),
            seed=int(cfg["seed"]),
        )
    )
    scfg = SamplingConfig(
        t_end=float(p["t_end"]),
        n_interior=int(cfg["sampling"]["n_interior"]),
        n_initial=int(cfg["sampling"]["n_initial"]),
        n_boundary=int(cfg["sampling"]["n_boundary"]),
        v_max=float(cfg["grid"]["v_max"]),
        v_proposal=cfg["sampling"]["v_proposal"],
    )
    assembler = LossAssembler(
        exp.basis, exp.coupling,
        LossConfig(eps=float(p["eps"]), q=int(p["q"]),
                   fd_step=float(t["fd_step"])),
    )
    tcfg = TrainConfig(
        n_steps=int(t["n_steps"]),
        learning_rate=float(t["learning_rate"]),
        checkpoint_every=int(t["checkpoint_every"]),
        target_loss=(None if t["target_loss"] is None
                     else float(t["target_loss"])),
        lr_decay_steps=int(t["lr_decay_steps"]),
        seed=int(exp.cfg["seed"]),
    )
    return bundle, scfg, assembler, tcfg


def _run_train(exp: Experiment, out_dir: pathlib.Path) -> int:
    from .apnn import train

    bundle, scfg, assembler, tcfg = _build_training(exp)
    tcfg.log_path = str(out_dir / "training_log.jsonl")
    wave = exp.wave()
    state, checkpoints = train(bundle, assembler, scfg, wave, tcfg)
    rows = np.array(
        [[h["step"], h["total"]] for h in state.loss_history]
    )
    np.savetxt(out_dir / "loss_vs_step.csv", rows, delimiter=",",
               fmt=["%d", "%.17e"], header="step,total_loss", comments="")
    ck_dir = out_dir / "checkpoints"
    ck_dir.mkdir(exist_ok=True)
    chash = config_hash(exp.cfg)
    for ck in checkpoints:
        ck.save(ck_dir / f"step{ck.step:06d}.npz", chash)
    (out_dir / "train_report.json").write_text(
        json.dumps(
            {"final_loss": state.loss_history[-1]["total"],
             "steps_run": state.step,
             "n_checkpoints": len(checkpoints)},
            indent=2, sort_keys=True,
        ) + "\n"
    )
    return 0


def _run_ap_study(exp: Experiment, out_dir: pathlib.Path) -> int:
    cfg = exp.cfg
    study = cfg["ap_study"]
    n_x = int(study["n_x"])
    dt = float(study["dt"])
    t_end = float(cfg["physics"]["t_end"])
    sgrid = SpatialGrid(dim=1, n=n_x)
    x = sgrid.nodes()[:, 0]
    K = exp.coupling.K
    m0 = np.zeros((K, n_x, exp.basis.n_fields))
    m0[0, :, 0] = 0.5 * np.sin(x)
    m0[0, :, 1] = 0.2 * np.cos(x)
    g0 = np.zeros((K, n_x, exp.vgrid.n_total))
    A = flux_jacobian(exp.basis)
    exact = solve_acoustic(m0[0], A, sgrid, t_end=t_end, n_store=2)
    limit = solve_acoustic_discrete(m0[0], A, sgrid, dt, t_end, n_store=2)
    rows = []
    for eps in study["eps_list"]:
        sc = exp.solver_config(eps=float(eps), dt=dt, t_end=t_end)
        traj = solve_sg_micromacro(m0, g0, sc, exp.coupling, exp.basis, sgrid)
        err_limit = float(
            np.linalg.norm(traj.m[-1, 0] - limit.m[-1, 0])
            / np.linalg.norm(limit.m[-1, 0])
        )
        err_exact = float(
            np.linalg.norm(traj.m[-1, 0] - exact.m[-1, 0])
            / np.linalg.norm(exact.m[-1, 0])
        )
        rows.append([float(eps), err_limit, err_exact])
    table = np.asarray(rows)
    np.savetxt(out_dir / "error_vs_eps.csv", table, delimiter=",",
               fmt="%.17e", header="eps,error_vs_limit_scheme,error_vs_acoustic",
               comments="")
    monotone = bool(np.all(np.diff(table[:, 1]) < 0))
    (out_dir / "ap_report.json").write_text(
        json.dumps({"monotone_vs_limit_scheme": monotone,
                    "final_error_vs_acoustic": table[-1, 2]},
                   indent=2, sort_keys=True) + "\n"
    )
    return 0 if monotone else 1


def _run_theorem2_study(exp: Experiment, out_dir: pathlib.Path) -> int:
    from scipy.stats import spearmanr

    from .apnn import train
    from .apnn.loss import ProviderBundle

    bundle, scfg, assembler, tcfg = _build_training(exp)
    wave = exp.wave()
    state, checkpoints = train(bundle, assembler, scfg, wave, tcfg)
    m0, g0 = wave.initial_data(exp.sgrid)
    traj = solve_sg_micromacro(
        m0, g0, exp.solver_config(), exp.coupling, exp.basis, exp.sgrid
    )
    q = int(exp.cfg["physics"]["q"])

    losses, energies, series = [], [], []
    for ck in checkpoints:
        bundle.set_params(ck.params)
        s = error_energy_series(_BundleField(bundle, exp), traj, exp.basis, q)
        losses.append(ck.loss)
        energies.append(float(np.mean(s)))
        series.append(s)
    rho = float(spearmanr(losses, energies).statistic) if len(losses) > 2 else 1.0
    table = np.column_stack([traj.times] + [np.asarray(s) for s in series])
    np.savetxt(out_dir / "ek_vs_t.csv", table, delimiter=",", fmt="%.17e",
               header="time," + ",".join(
                   f"checkpoint_{ck.step}" for ck in checkpoints),
               comments="")
    decay = fit_decay_rate(traj.times, series[-1])
    (out_dir / "theorem2_report.json").write_text(
        json.dumps(
            {"spearman_loss_vs_error": rho,
             "n_checkpoints": len(checkpoints),
             "final_loss": losses[-1],
             "final_mean_error_energy": energies[-1],
             "fitted_error_decay_rate": decay},
            indent=2, sort_keys=True,
        ) + "\n"
    )
    return 0 if rho >= 0.9 else 1


class _BundleField:
    """Bundle adapter exposing the provider interface for error evaluation."""

    def __init__(self, bundle, exp: Experiment):
        self.bundle = bundle
        self.basis = exp.basis

    def macro_value(self, mode, t, x):
        pts = np.stack([np.broadcast_to(t, np.shape(x)).ravel(),
                        np.asarray(x).ravel()], axis=1)
        U, D = self.bundle.macro_nets[mode - 1].evaluate(pts)
        return U, D[:, :, 0], D[:, :, 1]

    def micro_value(self, mode, t, x, v):
        x = np.asarray(x).ravel()
        pts = np.stack([np.broadcast_to(t, x.shape).ravel(), x,
                        np.asarray(v).ravel()], axis=1)
        U, D = self.bundle.micro_nets[mode - 1].evaluate(pts)
        g = U[:, 0]
        # projection applied per unique (t, x) row over the velocity grid
        nv = self.basis.vgrid.n_total
        g_grid = g.reshape(-1, nv)
        g_grid = g_grid - self.basis.moments(g_grid) @ self.basis.values.T
        return (g_grid.ravel(), D[:, 0, 0], D[:, 0, 1], D[:, 0, 2])


def _run_tails(exp: Experiment, out_dir: pathlib.Path) -> int:
    wave = exp.wave()
    m0, g0 = wave.initial_data(exp.sgrid)
    traj = solve_sg_micromacro(
        m0, g0, exp.solver_config(), exp.coupling, exp.basis, exp.sgrid
    )
    cuts = [float(c) for c in exp.cfg["tails"]["cuts"]]
    report = tail_report(traj, cuts, coupling=exp.coupling, spec=exp.spec)
    report.save(out_dir / "tails.json")
    totals = [report.totals[c] for c in report.cuts]
    np.savetxt(out_dir / "tails_vs_cut.csv",
               np.column_stack([report.cuts, totals]), delimiter=",",
               fmt="%.17e", header="cut,total_tail", comments="")
    return 0


RUNNERS = {
    "verify-hypo": _run_verify_hypo,
    "solve": _run_solve,
    "train": _run_train,
    "ap-study": _run_ap_study,
    "theorem2-study": _run_theorem2_study,
    "tails": _run_tails,
}


def run(cfg: dict, out_dir) -> int:
    """Validate, execute, and write artifacts; returns the exit code."""
    out_path = pathlib.Path(out_dir)
    try:
        cfg = validate_config(cfg)
    except ConfigError as exc:
        record = _error_record(out_path, "config", exc.key, exc.message)
        print(json.dumps(record))
        return 2
    out_path.mkdir(parents=True, exist_ok=True)
    try:
        exp = Experiment(cfg)
        code = RUNNERS[cfg["mode"]](exp, out_path)
    except ConfigError as exc:
        record = _error_record(out_path, "config", exc.key, exc.message)
        print(json.dumps(record))
        return 2
    except (GapNonPositive, FloatingPointError, np.linalg.LinAlgError) as exc:
        record = _error_record(out_path, "numerical", cfg["mode"], str(exc))
        print(json.dumps(record))
        return 1
    write_manifest(out_path, cfg)
    return code


def load_config(path) -> dict:
    try:
        with open(path) as f:
            user = json.load(f)
    except json.JSONDecodeError as exc:
        raise ConfigError("<file>", f"configuration is not valid JSON: {exc}")
    return _merge(DEFAULT_CONFIG, user)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="kinetic-apnn",
        description="Experiment runner for the stiff kinetic residual-network "
                    "library",
    )
    sub = parser.add_subparsers(dest="mode", required=True)
    for mode in MODES:
        p = sub.add_parser(mode)
        p.add_argument("--config", type=str, default=None,
                       help="JSON configuration file")
        p.add_argument("--out", type=str, required=True,
                       help="artifact directory")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--override", action="append", default=[],
                       metavar="KEY=VALUE")
    args = parser.parse_args(argv)
    try:
        cfg = (load_config(args.config) if args.config
               else json.loads(json.dumps(DEFAULT_CONFIG)))
        cfg["mode"] = args.mode
        if args.seed is not None:
            cfg["seed"] = args.seed
        cfg = apply_overrides(cfg, args.override)
    except ConfigError as exc:
        record = _error_record(pathlib.Path(args.out), "config", exc.key,
                               exc.message)
        print(json.dumps(record))
        return 2
    return run(cfg, args.out)


if __name__ == "__main__":
    sys.exit(main())
