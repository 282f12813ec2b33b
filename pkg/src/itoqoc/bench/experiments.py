"""Experiment definitions: sweep cells, per-cell computations and aggregation.

Every experiment is an :class:`Experiment` with

* ``cells(cfg)`` listing the sweep cells as plain dicts,
* ``shared(cfg)`` computing data used by all cells (e.g. a reference run),
* ``run(cfg, cell, seed, shared)`` returning one result row,
* ``finish(cfg, rows)`` turning the cell rows into output tables.

Cell functions take the config as a plain dict so they can be shipped to
worker processes; they depend on nothing but their arguments.
"""
from dataclasses import dataclass
import itertools
import math
import time
from typing import Callable, Optional
import warnings

import numpy as np
import scipy.linalg

from .. import gates as G
from ..krotov import (
    ControlProblem,
    GateFunctional,
    KrotovConfig,
    ShapeFunction,
    StateToState,
    optimize,
)
from ..models import (
    TWO_PI,
    DrivenHoModel,
    FreqHoModel,
    QuditModel,
    driven_ho_analytic,
    ideal_hamiltonian,
    interaction_generator,
    population_mismatch,
    qudit_hamiltonian,
)
from ..propagators import Observer, propagate
from ..quantum import ket, vectorize
from .config import ExperimentConfig

__all__ = ["Experiment", "REGISTRY", "qudit_model", "map_cell", "qsl_target"]


@dataclass
class Experiment:
    columns: tuple
    cells: Callable
    run: Callable
    shared: Optional[Callable] = None
    finish: Optional[Callable] = None


def _cfg(data):
    return data if isinstance(data, ExperimentConfig) else ExperimentConfig.from_dict(data)


# ---------------------------------------------------------------------------
# model helpers

_QUDIT_KEYS = ("n_levels", "omega0", "beta", "t1", "t2_star", "omega_rabi", "p", "q")


def qudit_model(params, **override):
    """:class:`QuditModel` from a config mapping.

    Frequencies may be given in GHz with a ``_ghz`` suffix (``omega0_ghz``,
    ``beta_ghz``, ``omega_rabi_ghz``); they are converted to rad/ns.
    """
    params = {**params, **override}
    kwargs = {}
    for key in _QUDIT_KEYS:
        if key in params:
            kwargs[key] = float(params[key]) if key != "n_levels" else int(params[key])
        elif f"{key}_ghz" in params:
            kwargs[key] = TWO_PI * float(params[f"{key}_ghz"])
    return QuditModel(**kwargs)


def _population_observers(n_levels, every):
    return [Observer(np.diag(np.eye(n_levels)[k]).astype(complex), every, f"P{k}")
            for k in range(n_levels)]


def _populations(traj, n_levels):
    return np.array([traj.observables[f"P{k}"].real for k in range(n_levels)]).T


def _every(n_steps, samples):
    if n_steps % samples:
        raise ValueError(f"n_steps={n_steps} is not a multiple of samples={samples}")
    return n_steps // samples


def _quiet_propagate(*args, **kwargs):
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", RuntimeWarning)
        traj = propagate(*args, **kwargs)
    return traj, len(caught)


# ---------------------------------------------------------------------------
# ito-bench: driven oscillator against the closed form


def _bench_cells(cfg):
    cells = []
    for n, m in itertools.product(cfg.sweep.get("n_steps", []), cfg.sweep.get("m_order", [])):
        cells.append({"method": "ito", "n_steps": int(n), "m_order": int(m)})
    for n in cfg.sweep.get("pwc_n_steps", []):
        cells.append({"method": "pwc", "n_steps": int(n), "m_order": 0})
    return cells


def _bench_run(data, cell, seed, shared):
    cfg = _cfg(data)
    model = DrivenHoModel(**cfg.model)
    samples = int(cfg.options.get("samples", 100))
    n = cell["n_steps"]
    every = max(1, n // samples)
    x, p, _ = model.operators()
    obs = [Observer(x, every, "x"), Observer(p, every, "p")]
    method = cfg.propagator.build(method=cell["method"], m_order=max(cell["m_order"], 2))
    t0 = time.perf_counter()
    traj, _ = _quiet_propagate(model.generator(), 0.0, model.horizon, n, method,
                               model.initial_state(), obs)
    wall = time.perf_counter() - t0
    t = traj.times[traj.sample_steps["x"]]
    xa, pa = driven_ho_analytic(model, t)
    err = max(np.max(np.abs(traj.observables["x"].real - xa)),
              np.max(np.abs(traj.observables["p"].real - pa)))
    return {
        "method": cell["method"],
        "n_steps": n,
        "m_order": cell["m_order"],
        "mean_n_iter": traj.mean_iterations if cell["method"] == "ito" else 1.0,
        "matvecs": traj.matvecs,
        "error": float(err),
        "all_converged": traj.all_converged,
        "wall_time": wall,
    }


# ---------------------------------------------------------------------------
# compare: PWC against one ITO reference on the dissipative qudit


def _qudit_run(cfg, model, method, n_steps, samples, dissipative, frame="lab"):
    n_lev = model.n_levels
    if frame == "lab":
        gen = qudit_hamiltonian(model, dissipative=dissipative)
    elif frame in ("rwa", "interaction"):
        if dissipative:
            raise ValueError("dissipative dynamics is propagated in the lab frame only")
        gen = interaction_generator(model, rwa=frame == "rwa")
    else:
        raise ValueError(f"unknown frame {frame!r}")
    psi0 = ket(0, n_lev)
    state0 = vectorize(np.outer(psi0, psi0.conj())) if dissipative else psi0
    horizon = float(cfg.model.get("horizon", 150.0))
    traj, n_warn = _quiet_propagate(gen, 0.0, horizon, n_steps, method, state0,
                                    _population_observers(n_lev, _every(n_steps, samples)))
    return traj, _populations(traj, n_lev), n_warn


def _compare_shared(cfg):
    cfg = _cfg(cfg)
    model = qudit_model(cfg.model)
    samples = int(cfg.options.get("samples", 200))
    t0 = time.perf_counter()
    traj, pops, n_warn = _qudit_run(cfg, model, cfg.propagator.build(method="ito"),
                                    cfg.propagator.n_steps, samples,
                                    bool(cfg.model.get("dissipative", True)))
    return {"pops": pops, "wall_time": time.perf_counter() - t0,
            "mean_n_iter": traj.mean_iterations, "warnings": n_warn}


def _compare_cells(cfg):
    return [{"pwc_n_steps": int(n)} for n in cfg.sweep.get("pwc_n_steps", [])]


def _compare_run(data, cell, seed, shared):
    cfg = _cfg(data)
    model = qudit_model(cfg.model)
    samples = int(cfg.options.get("samples", 200))
    t0 = time.perf_counter()
    _, pops, _ = _qudit_run(cfg, model, cfg.propagator.build(method="pwc"),
                            cell["pwc_n_steps"], samples,
                            bool(cfg.model.get("dissipative", True)))
    wall = time.perf_counter() - t0
    mis, mean = population_mismatch(pops, shared["pops"])
    return {"pwc_n_steps": cell["pwc_n_steps"], "mean_mismatch": mean,
            "max_mismatch": float(mis.max()), "wall_time": wall}


# ---------------------------------------------------------------------------
# dynamics: population traces in several frames


def _dynamics_cells(cfg):
    steps = cfg.options.get("frame_steps", {})
    return [{"frame": f, "n_steps": int(steps.get(f, cfg.propagator.n_steps))}
            for f in cfg.sweep.get("frames", ["lab"])]


def _dynamics_run(data, cell, seed, shared):
    cfg = _cfg(data)
    model = qudit_model(cfg.model)
    samples = int(cfg.options.get("samples", 300))
    t0 = time.perf_counter()
    traj, pops, n_warn = _qudit_run(cfg, model, cfg.propagator.build(), cell["n_steps"],
                                    samples, bool(cfg.model.get("dissipative", False)),
                                    cell["frame"])
    times = traj.times[traj.sample_steps["P0"]]
    return {"frame": cell["frame"], "n_steps": cell["n_steps"],
            "mean_n_iter": traj.mean_iterations, "warnings": n_warn,
            "wall_time": time.perf_counter() - t0, "_times": times, "_pops": pops}


def _dynamics_finish(cfg, rows):
    ref = rows[0]
    table, extra = [], {}
    for row in rows:
        mis, mean = population_mismatch(row["_pops"], ref["_pops"])
        out = {k: v for k, v in row.items() if not k.startswith("_")}
        out.update(mean_mismatch_vs_first=mean, max_mismatch_vs_first=float(mis.max()))
        table.append(out)
        n_lev = row["_pops"].shape[1]
        cols = ("t",) + tuple(f"P{k}" for k in range(n_lev))
        data = [dict(zip(cols, (t, *p))) for t, p in zip(row["_times"], row["_pops"])]
        extra[f"populations_{row['frame']}"] = (cols, data)
    return table, extra


# ---------------------------------------------------------------------------
# pop-map / gate-map


def map_cell(model, horizon, variant, method, n_steps):
    """Final-time quantities of the Pythagorean drive for one (p, q) cell.

    ``variant``: ``"ideal"`` (``exp(-i H_inf T)``), ``"full"`` (lab-frame
    propagation of the four lowest levels) or ``"full+dissipation"``
    (Liouville propagation of ``|0><0|``, populations only).
    """
    n_lev = model.n_levels
    out = {"status": "ok"}
    if variant == "full+dissipation":
        psi0 = ket(0, n_lev)
        traj, n_warn = _quiet_propagate(qudit_hamiltonian(model, dissipative=True), 0.0,
                                        horizon, n_steps, method,
                                        vectorize(np.outer(psi0, psi0.conj())))
        rho = traj.final.reshape(n_lev, n_lev, order="F")
        pops = np.real(np.diag(rho))
        out.update({f"P{k}": float(pops[k]) for k in range(4)})
        out["leakage"] = float(1.0 - np.sum(pops[:4]))
        out["leakage_mean"] = np.nan
        out.update(S=np.nan, C=np.nan, g1=np.nan, g2=np.nan, g3=np.nan, gate_class="")
        out["status"] = "ok" if not n_warn else f"unconverged steps: {n_warn}"
        return out
    if variant == "ideal":
        finals = scipy.linalg.expm(-1j * horizon * ideal_hamiltonian(model))[:, :4]
        phases = None
        n_warn = 0
    elif variant == "full":
        traj, n_warn = _quiet_propagate(qudit_hamiltonian(model), 0.0, horizon, n_steps,
                                        method, np.eye(n_lev, dtype=complex)[:, :4])
        finals = traj.final
        phases = model.frame_phases(horizon)
    else:
        raise ValueError(f"unknown variant {variant!r}")
    leak = G.leakage(finals)
    psi = finals[:, 0] if phases is None else phases * finals[:, 0]
    pops = np.abs(psi[:4]) ** 2
    out.update({f"P{k}": float(pops[k]) for k in range(4)})
    out["leakage"] = float(leak[0])
    out["leakage_mean"] = float(np.mean(leak))
    norm = np.linalg.norm(psi[:4])
    out["S"] = G.von_neumann_entropy(psi[:4] / norm) if norm > 1e-6 else np.nan
    try:
        gate = G.levels_to_qubits(G.closest_unitary(G.extract_gate(finals, phases=phases)))
        inv = G.makhlin_invariants(gate, atol=1e-8)
        out.update(C=G.gate_concurrence(gate, atol=1e-8), g1=inv.g1, g2=inv.g2, g3=inv.g3,
                   gate_class=G.classify(inv) or "")
    except G.RankDeficient as exc:
        out.update(C=np.nan, g1=np.nan, g2=np.nan, g3=np.nan, gate_class="")
        out["status"] = f"rank deficient: {exc}"
    if n_warn:
        out["status"] = f"unconverged steps: {n_warn}"
    return out


def _map_cells(cfg):
    return [{"p": float(p), "q": float(q)}
            for p, q in itertools.product(cfg.sweep.get("p", []), cfg.sweep.get("q", []))]


def _map_run(data, cell, seed, shared):
    cfg = _cfg(data)
    model = qudit_model(cfg.model, p=cell["p"], q=cell["q"])
    t0 = time.perf_counter()
    variant = cfg.options.get("variant", "full")
    try:
        res = map_cell(model, float(cfg.model.get("horizon", 60.0)), variant,
                       cfg.propagator.build(), cfg.propagator.n_steps)
    except Exception as exc:  # recorded per cell, the sweep goes on
        res = {"status": f"error: {type(exc).__name__}: {exc}"}
    return {"p": cell["p"], "q": cell["q"], "variant": variant, **res,
            "wall_time": time.perf_counter() - t0}


_MAP_POP_COLUMNS = ("p", "q", "variant", "P0", "P1", "P2", "P3", "leakage", "S", "status",
                    "wall_time")
_MAP_GATE_COLUMNS = ("p", "q", "variant", "C", "g1", "g2", "g3", "gate_class", "leakage_mean",
                     "status", "wall_time")


# ---------------------------------------------------------------------------
# optimize


def _shape(opt, horizon):
    return ShapeFunction(horizon, opt.shape, opt.rise)


def gate_in_levels(name):
    """Catalog gate re-expressed on the qudit levels."""
    gate = G.catalog_gates()[name]
    return G.LEVEL_TO_QUBITS.conj().T @ gate @ G.LEVEL_TO_QUBITS


def lab_gate_problem(model, gate_levels, horizon, n_steps, guess):
    """Gate problem in the lab frame with a rotating-frame target ``O``.

    The lab-frame target is ``exp(-i H0 T) O`` on the lowest four levels, so
    that the gate read in the rotating frame equals ``O``.
    """
    phases = np.exp(-1j * model.energies[:4] * horizon)
    target = phases[:, None] * np.asarray(gate_levels, dtype=complex)
    init = np.eye(model.n_levels, dtype=complex)[:, :4]
    return ControlProblem(model.h0(), model.h1(), init,
                          GateFunctional(target, model.n_levels), horizon, n_steps, guess)


def build_problem(cfg):
    """:class:`ControlProblem` for the configured optimizer problem."""
    opt, par = cfg.optimizer, cfg.model
    if opt.problem == "ho_freq":
        m = FreqHoModel(n_ho=int(par.get("n_ho", 60)), target_eps=float(par.get("target_eps", 0.25)))
        kin, pot = m.operators()
        e_guess = float(par.get("guess_value", 1.0))
        return ControlProblem(kin, pot, m.initial_state(), StateToState(m.target_state()),
                              float(par.get("horizon", 2.0)), int(cfg.propagator.n_steps),
                              guess=lambda t: np.full_like(t, e_guess))
    horizon = float(par.get("horizon", 150.0))
    model = qudit_model(par)
    shape = ShapeFunction(horizon, par.get("guess_shape", "flat"), float(par.get("guess_rise", 0.1)))
    drive = model.drive()
    guess = lambda t: shape(t) * drive(t)  # noqa: E731
    if opt.problem == "qudit_state":
        init = ket(int(par.get("initial_level", 0)), model.n_levels)
        target = ket(int(par.get("target_level", 2)), model.n_levels)
        return ControlProblem(model.h0(), model.h1(), init, StateToState(target), horizon,
                              int(cfg.propagator.n_steps), guess)
    return lab_gate_problem(model, gate_in_levels(opt.target), horizon,
                            int(cfg.propagator.n_steps), guess)


def krotov_config(cfg, horizon):
    opt = cfg.optimizer
    prop = "pwc" if opt.method == "pwc" else cfg.propagator.build(method="ito")
    return KrotovConfig(lambda_a=opt.lambda_a, shape=_shape(opt, horizon), max_iter=opt.max_iter,
                        stop_tol=opt.stop_tol, propagator=prop,
                        pwc_backend=cfg.propagator.pwc_backend,
                        one_shot_field=opt.one_shot_field)


def _optimize_cells(cfg):
    return [{"problem": cfg.optimizer.problem, "method": cfg.optimizer.method}]


def _optimize_run(data, cell, seed, shared):
    cfg = _cfg(data)
    problem = build_problem(cfg)
    kcfg = krotov_config(cfg, problem.horizon)
    last = {}

    def keep(record, fld):
        last["field"] = fld

    status = "ok"
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", RuntimeWarning)
        try:
            res = optimize(problem, kcfg, callback=keep)
            records, fld = res.records, res.field
        except Exception as exc:
            status = f"error: {type(exc).__name__}: {exc}"
            records, fld = [], last.get("field")
    if caught and status == "ok":
        status = f"warnings: {len(caught)}"
    return {"status": status, "_records": records, "_field": fld}


def _optimize_finish(cfg, rows):
    row = rows[0]
    table = [{"iteration": r.i, "j_t": r.j_t, "j_total": r.j_total,
              "field_change_norm": r.field_change_norm, "matvecs": r.matvec_count,
              "wall_time": r.wall_time, "status": row["status"]} for r in row["_records"]]
    extra = {}
    if row["_field"] is not None:
        fld = row["_field"]
        extra["field"] = (("t", "E"), [{"t": t, "E": e} for t, e in zip(fld.times, fld.grid_values)])
    if not table:
        table = [{"iteration": -1, "j_t": np.nan, "j_total": np.nan, "field_change_norm": np.nan,
                  "matvecs": 0, "wall_time": 0.0, "status": row["status"]}]
    return table, extra


# ---------------------------------------------------------------------------
# qsl-map


def qsl_target(model, horizon, n_steps, seed, cfg_opt, guess_pq=(2.0, 2.0),
               guess_shape="flattop", guess_rise=0.1, pwc_backend="eigh"):
    """Optimize towards one Haar-random gate; returns ``(success, iterations, j_t)``."""
    gate = G.haar_random(4, seed)
    guess_model = model.with_drive(*guess_pq)
    drive = guess_model.drive()
    shape = ShapeFunction(horizon, guess_shape, guess_rise)
    problem = lab_gate_problem(model, gate, horizon, n_steps, lambda t: shape(t) * drive(t))
    kcfg = KrotovConfig(lambda_a=cfg_opt.lambda_a, shape=_shape(cfg_opt, horizon),
                        max_iter=cfg_opt.max_iter, stop_tol=cfg_opt.stop_tol, propagator="pwc",
                        pwc_backend=pwc_backend)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        res = optimize(problem, kcfg)
    j = res.j_t
    success = bool(j[-1] < cfg_opt.stop_tol)
    return success, len(j) - 1, float(j[-1])


def _qsl_cells(cfg):
    n_random = int(cfg.options.get("n_random", 5))
    cells = []
    axes = itertools.product(cfg.sweep.get("horizon", []), cfg.sweep.get("beta_ghz", []))
    for index, (horizon, beta) in enumerate(axes):
        for k in range(n_random):
            cells.append({"cell": index, "target": k, "horizon": float(horizon),
                          "beta_ghz": float(beta)})
    return cells


def _qsl_run(data, cell, seed, shared):
    cfg = _cfg(data)
    model = qudit_model(cfg.model, beta=TWO_PI * cell["beta_ghz"])
    dt = float(cfg.options.get("dt", 0.005))
    n_steps = max(1, int(math.ceil(cell["horizon"] / dt - 1e-9)))
    pq = tuple(cfg.options.get("guess_pq", (2.0, 2.0)))
    t0 = time.perf_counter()
    try:
        success, iters, j_t = qsl_target(model, cell["horizon"], n_steps, seed, cfg.optimizer,
                                         pq, cfg.options.get("guess_shape", "flattop"),
                                         float(cfg.options.get("guess_rise", 0.1)),
                                         cfg.propagator.pwc_backend)
        status = "ok"
    except Exception as exc:  # an unsuccessful target, not a failed sweep
        success, iters, j_t, status = False, cfg.optimizer.max_iter, np.nan, f"error: {exc}"
    return {**cell, "seed": seed, "success": success, "iterations": iters, "j_t": j_t,
            "status": status, "wall_time": time.perf_counter() - t0}


def _qsl_finish(cfg, rows):
    groups = {}
    for row in rows:
        groups.setdefault(row["cell"], []).append(row)
    table = []
    for index in sorted(groups):
        grp = groups[index]
        wins = [r["iterations"] for r in grp if r["success"]]
        table.append({
            "horizon": grp[0]["horizon"],
            "beta_ghz": grp[0]["beta_ghz"],
            "n_random": len(grp),
            "success_fraction": len(wins) / len(grp),
            "mean_iterations": float(np.mean(wins)) if wins else np.nan,
            "median_j_t": float(np.median([r["j_t"] for r in grp])),
            "wall_time": float(sum(r["wall_time"] for r in grp)),
        })
    cols = ("cell", "target", "horizon", "beta_ghz", "seed", "success", "iterations", "j_t",
            "status", "wall_time")
    return table, {"targets": (cols, rows)}


REGISTRY = {
    "ito-bench": Experiment(
        ("method", "n_steps", "m_order", "mean_n_iter", "matvecs", "error", "all_converged",
         "wall_time"), _bench_cells, _bench_run),
    "compare": Experiment(
        ("pwc_n_steps", "mean_mismatch", "max_mismatch", "wall_time"),
        _compare_cells, _compare_run, shared=_compare_shared),
    "dynamics": Experiment(
        ("frame", "n_steps", "mean_n_iter", "warnings", "mean_mismatch_vs_first",
         "max_mismatch_vs_first", "wall_time"),
        _dynamics_cells, _dynamics_run, finish=_dynamics_finish),
    "pop-map": Experiment(_MAP_POP_COLUMNS, _map_cells, _map_run),
    "gate-map": Experiment(_MAP_GATE_COLUMNS, _map_cells, _map_run),
    "optimize": Experiment(
        ("iteration", "j_t", "j_total", "field_change_norm", "matvecs", "wall_time", "status"),
        _optimize_cells, _optimize_run, finish=_optimize_finish),
    "qsl-map": Experiment(
        ("horizon", "beta_ghz", "n_random", "success_fraction", "mean_iterations", "median_j_t",
         "wall_time"), _qsl_cells, _qsl_run, finish=_qsl_finish),
}
