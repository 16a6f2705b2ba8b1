"""Command line: ``contraction-kit <subcommand> --config <path>``.

Subcommands: ``train``, ``certify``, ``simulate``, ``cvstem``, ``selftest``.
The config is a single JSON document; ``--seed``, ``--out`` and ``--threads``
override the matching top-level scalars.  Unknown config keys are rejected
before anything is written.  Exit codes: 0 success, 1 certificate failure,
2 config error.

Every run writes ``manifest.json`` echoing the fully resolved config, the
global seed, the named stream ids, and the kernel backend, so a run can be
reproduced byte for byte.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import __version__
from ._backend import BACKEND_NAME
from .numerics import STREAM_IDS, RngStream, named_stream


class ConfigError(ValueError):
    pass


_TOP_KEYS = {"seed", "out", "threads", "system", "train", "cvstem", "certify", "simulate"}
_SYSTEM_KEYS = {"name", "a", "a_mat", "b_mat", "d_bar", "g_bar"}
_TRAIN_KEYS = {
    "n_samples", "epochs", "batch_size", "learning_rate", "lr_decay", "alpha",
    "k_points", "width", "feature_dim", "m_bar", "m_under", "time_input",
    "margin", "holdout_fraction", "paper_scale",
}
_CVSTEM_KEYS = {
    "alpha", "alpha_s", "alpha_d", "alpha_g", "grid_points_per_dim", "grid_cap",
    "chi_max", "chi_resolution", "nu_max", "feas_tol", "inner_iters", "r_weight",
}
_CERTIFY_KEYS = {
    "mode", "n_traj", "n_targets", "horizon", "dt", "tolerance", "alpha",
    "alpha_d", "alpha_g", "source", "checkpoint", "metric", "points_per_dim",
    "n_margin_samples", "disturbance", "path_segments",
}
_SIMULATE_KEYS = {"n_traj", "horizon", "dt", "source", "checkpoint"}


def _check_keys(section, allowed, name):
    if not isinstance(section, dict):
        raise ConfigError(f"config section {name!r} must be an object")
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown config key(s) in {name!r}: {sorted(unknown)}")


def load_config(path, overrides=None):
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    _check_keys(cfg, _TOP_KEYS, "<top level>")
    for key, allowed in (
        ("system", _SYSTEM_KEYS),
        ("train", _TRAIN_KEYS),
        ("cvstem", _CVSTEM_KEYS),
        ("certify", _CERTIFY_KEYS),
        ("simulate", _SIMULATE_KEYS),
    ):
        if key in cfg:
            _check_keys(cfg[key], allowed, key)
    for key, val in (overrides or {}).items():
        if val is not None:
            cfg[key] = val
    cfg.setdefault("seed", 0)
    cfg.setdefault("out", "out")
    cfg.setdefault("threads", 1)
    if "system" not in cfg or "name" not in cfg["system"]:
        raise ConfigError("config must name a system: {\"system\": {\"name\": ...}}")
    return cfg


def _build_system(cfg):
    from .systems import get_system

    kwargs = {k: v for k, v in cfg["system"].items() if k != "name"}
    if "a_mat" in kwargs:
        kwargs["a_mat"] = np.asarray(kwargs["a_mat"], dtype=np.float64)
    if "b_mat" in kwargs:
        kwargs["b_mat"] = np.asarray(kwargs["b_mat"], dtype=np.float64)
    try:
        return get_system(cfg["system"]["name"], **kwargs)
    except (KeyError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


def _write_json(path, doc):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)
        fh.write("\n")


def _start_run(cfg, subcommand):
    """Create the output directory and write the manifest; returns outdir.

    Called only after a subcommand has finished validating its config, so a
    malformed config never leaves files behind.
    """
    outdir = cfg["out"]
    os.makedirs(outdir, exist_ok=True)
    _write_manifest(outdir, subcommand, cfg)
    return outdir


def _write_manifest(outdir, subcommand, cfg):
    doc = {
        "subcommand": subcommand,
        "config": cfg,
        "seed": cfg["seed"],
        "streams": STREAM_IDS,
        "backend": BACKEND_NAME,
        "version": __version__,
    }
    _write_json(os.path.join(outdir, "manifest.json"), doc)


def parallel_map(fn, items, threads):
    if threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _cmd_train(cfg):
    from .netmetric import save_checkpoint
    from .training import TrainConfig, history_csv_rows, train

    system = _build_system(cfg)
    try:
        tc = TrainConfig(seed=cfg["seed"], **cfg.get("train", {}))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad train config: {exc}") from exc
    outdir = _start_run(cfg, "train")
    result = train(system, tc)
    save_checkpoint(
        os.path.join(outdir, "checkpoint.json"),
        result.metric,
        result.controller,
        alpha=tc.alpha,
        seed=tc.seed,
        extra={"system": system.name, "epochs": tc.epochs},
    )
    with open(os.path.join(outdir, "loss_history.csv"), "w", newline="", encoding="utf-8") as fh:
        csv.writer(fh).writerows(history_csv_rows(result.history))
    final = result.history[-1].total if result.history else float("nan")
    print(f"train: {tc.epochs} epochs, final loss {final:.6g}, "
          f"wall-clock {result.wall_clock:.1f} s")
    return 0


def _cmd_cvstem(cfg):
    from .certify import state_lattice
    from .cvstem import CvstemProblem, InfeasibleError, solve_cvstem

    system = _build_system(cfg)
    sec = dict(cfg.get("cvstem", {}))
    ppd = sec.pop("grid_points_per_dim", 3)
    cap = sec.pop("grid_cap", 729)
    if sec.get("r_weight") is not None:
        sec["r_weight"] = np.asarray(sec["r_weight"], dtype=np.float64)
    try:
        problem = CvstemProblem(system=system, grid=state_lattice(system, ppd, cap), **sec)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad cvstem config: {exc}") from exc
    outdir = _start_run(cfg, "cvstem")
    try:
        sol = solve_cvstem(problem)
    except InfeasibleError as exc:
        _write_json(os.path.join(outdir, "cvstem_solution.json"),
                    {"feasible": False, "reason": str(exc)})
        print(f"cvstem: infeasible ({exc})")
        return 1
    doc = {
        "feasible": True,
        "chi": sol.chi,
        "nu": sol.nu,
        "w_bar": sol.w_bar.tolist(),
        "objective": sol.objective,
        "margins": sol.margins,
        "m_under": sol.m_under,
        "m_over": sol.m_over,
        "alpha": sol.alpha,
        "alpha_s": sol.alpha_s,
    }
    _write_json(os.path.join(outdir, "cvstem_solution.json"), doc)
    print(f"cvstem: chi*={sol.chi:.6g} nu={sol.nu:.6g} objective={sol.objective:.6g}")
    return 0


def _load_source(cfg, sec, system):
    """(metric_source, controller) per the certify/simulate source config."""
    from .cvstem import geodesic_control
    from .netmetric import load_checkpoint

    source = sec.get("source", "checkpoint")
    if source == "checkpoint":
        path = sec.get("checkpoint")
        if not path:
            raise ConfigError("source=checkpoint needs a checkpoint path")
        try:
            metric, controller, _ = load_checkpoint(path)
        except OSError as exc:
            raise ConfigError(f"cannot read checkpoint: {exc}") from exc
        return metric, controller
    if source == "constant":
        mat = sec.get("metric")
        metric = (
            np.eye(system.n)
            if mat is None
            else np.asarray(mat, dtype=np.float64)
        )

        def controller(x, x_d, u_d, t):
            x = np.atleast_2d(x)
            x_d = np.atleast_2d(x_d)
            u_d = np.atleast_2d(u_d)
            out = np.stack(
                [
                    geodesic_control(metric, system, x[i], x_d[i], u_d[i], t)
                    for i in range(x.shape[0])
                ]
            )
            return out

        return metric, controller
    raise ConfigError(f"unknown source {source!r}")


def _cmd_certify(cfg):
    from .certify import estimate_constants, state_lattice, verify_tracking, write_certificate

    system = _build_system(cfg)
    sec = cfg.get("certify", {})
    if "alpha" not in sec:
        raise ConfigError("certify config needs alpha")
    metric_source, controller = _load_source(cfg, sec, system)
    outdir = _start_run(cfg, "certify")
    seed = cfg["seed"]
    grid = state_lattice(system, sec.get("points_per_dim", 5))
    constants = estimate_constants(
        metric_source, controller, system, grid,
        alpha=sec["alpha"],
        mode=sec.get("mode", "deterministic"),
        alpha_d=sec.get("alpha_d"),
        alpha_g=sec.get("alpha_g", 1.0),
        rng=named_stream(seed, "certify"),
    )
    if not constants.valid:
        _write_json(os.path.join(outdir, "certificate.json"),
                    {"passed": False, "reason": "alpha_ell <= 0"})
        print(f"certify: refused (alpha_ell = {constants.alpha_ell:.4g} <= 0)")
        return 1
    margin_samples = None
    from .netmetric import ControllerNet

    if isinstance(controller, ControllerNet):
        from .training import sample_dataset

        margin_samples = sample_dataset(
            system, sec.get("n_margin_samples", 2000),
            named_stream(seed, "certify").child(3),
        )
    report = verify_tracking(
        metric_source, controller, system, constants,
        n_traj=sec.get("n_traj", 100),
        mode=sec.get("mode", "deterministic"),
        rng=RngStream(seed, STREAM_IDS["certify"]),
        horizon=sec.get("horizon", 5.0),
        dt=sec.get("dt", 1e-3),
        tolerance=sec.get("tolerance", 0.05),
        n_targets=sec.get("n_targets"),
        margin_samples=margin_samples,
        disturbance=sec.get("disturbance", True),
        path_segments=sec.get("path_segments", 16),
    )
    write_certificate(report, outdir)
    status = "pass" if report.passed else "FAIL"
    print(f"certify: {status} (max violation {report.max_violation:+.3e}, "
          f"contraction margin {report.contraction_margin:+.3e})")
    return 0 if report.passed else 1


def _cmd_simulate(cfg):
    from .certify import rollout_closed_loop
    from .systems import generate_target

    system = _build_system(cfg)
    sec = cfg.get("simulate", {})
    metric_source, controller = _load_source(cfg, sec, system)
    outdir = _start_run(cfg, "simulate")
    seed = cfg["seed"]
    n_traj = sec.get("n_traj", 10)
    horizon = sec.get("horizon", 5.0)
    dt = sec.get("dt", 1e-3)
    targets = [
        generate_target(system, horizon, seed=seed + 1000 + i, dt=dt)
        for i in range(n_traj)
    ]
    e0 = RngStream(seed, STREAM_IDS["certify"]).child(1).generator().uniform(
        system.error_box[0], system.error_box[1], (n_traj, system.n)
    )
    x0 = np.stack([tr.xs[0] for tr in targets]) + e0
    ts, xs, xds = rollout_closed_loop(
        system, controller, targets, x0, horizon, dt, mode="deterministic"
    )
    err = np.linalg.norm(xs - xds, axis=2)
    for i in range(n_traj):
        path = os.path.join(outdir, f"trajectory{i:03d}.csv")
        with open(path, "w", newline="", encoding="utf-8") as fh:
            wr = csv.writer(fh)
            header = (
                ["t"]
                + [f"x{j}" for j in range(system.n)]
                + [f"xd{j}" for j in range(system.n)]
                + ["tracking_error", "x_e"]
            )
            wr.writerow(header)
            for k, t in enumerate(ts):
                row = (
                    [repr(float(t))]
                    + [repr(float(v)) for v in xs[k, i]]
                    + [repr(float(v)) for v in xds[k, i]]
                    + [repr(float(err[k, i])), repr(float(err[k, i] / max(err[0, i], 1e-300)))]
                )
                wr.writerow(row)
    print(f"simulate: wrote {n_traj} trajectories to {outdir}")
    return 0


def _cmd_selftest(cfg):
    """Fast oracle battery: eigensolver, integrators, CV-STEM, envelope."""
    from . import certify, cvstem, systems
    from ._backend import kernels

    outdir = _start_run(cfg, "selftest")
    checks = []

    a = np.array([[-2.0, 1.0], [1.0, -1.0]])
    w, v = kernels.eigh_sym(a)
    checks.append(("jacobi_eigensolver", abs(w[0] - (-3 - np.sqrt(5)) / 2) < 1e-12))

    from .numerics import integrate_ode

    _, xs = integrate_ode(lambda x, t: -x, np.array([1.0]), 0.0, 1.0, 1e-3)
    checks.append(("rk4_exponential", abs(xs[-1][0] - np.exp(-1)) < 1e-8))

    sysm = systems.make_scalar_test(1.0)
    sol = cvstem.solve_cvstem(
        cvstem.CvstemProblem(system=sysm, grid=np.array([[0.0]]), alpha=1.0)
    )
    checks.append(("cvstem_scalar_oracle", abs(sol.chi - 1.0) < 1e-3 and sol.nu < 4.1))

    sysd = systems.make_scalar_test(-1.0, d_bar=0.3)
    mconst = np.array([[1.0]])
    ctrl = lambda x, xd, ud, t: ud - (x - xd) @ mconst  # noqa: E731
    const = certify.estimate_constants(
        mconst, None, sysd, np.linspace(-2, 2, 9)[:, None], alpha=2.0
    )
    rep = certify.verify_tracking(
        mconst, ctrl, sysd, const, n_traj=3, mode="deterministic",
        rng=RngStream(cfg["seed"], STREAM_IDS["certify"]), horizon=4.0,
    )
    checks.append(("deterministic_envelope", rep.passed))

    ok = True
    for name, passed in checks:
        print(f"selftest: {name}: {'pass' if passed else 'FAIL'}")
        ok = ok and passed
    _write_json(
        os.path.join(outdir, "selftest.json"),
        {"checks": {n: bool(p) for n, p in checks}, "passed": bool(ok)},
    )
    return 0 if ok else 1


_COMMANDS = {
    "train": _cmd_train,
    "certify": _cmd_certify,
    "simulate": _cmd_simulate,
    "cvstem": _cmd_cvstem,
    "selftest": _cmd_selftest,
}


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="contraction-kit",
        description="learn, synthesize, and certify contraction metrics",
    )
    parser.add_argument("subcommand", choices=sorted(_COMMANDS))
    parser.add_argument("--config", required=True, help="path to the JSON config")
    parser.add_argument("--seed", type=int, default=None, help="override config seed")
    parser.add_argument("--out", default=None, help="override output directory")
    parser.add_argument("--threads", type=int, default=None, help="worker cap")
    args = parser.parse_args(argv)

    try:
        cfg = load_config(
            args.config,
            overrides={"seed": args.seed, "out": args.out, "threads": args.threads},
        )
        return _COMMANDS[args.subcommand](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
