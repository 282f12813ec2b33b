"""Krotov's method with piecewise-constant or ITO propagation.

The control enters linearly, ``H(t) = H0 + E(t) H1``. One control iteration
propagates the costate backward under the old field and then sweeps forward,
updating the field from the new state as it goes,

    E_new(t) = E_ref(t) + S(t) / lambda_a * Im sum_k <chi_k(t)| H1 |psi_k(t)>,

with ``E_ref`` the old field. The PWC variant evaluates the update at grid
points using the state one step behind (time lag). The ITO variant resolves
the field at the collocation offsets of each step together with the state, in
one self-consistent loop.
"""
from dataclasses import dataclass, field, replace
import time
from typing import Callable, Optional, Union
import warnings

import numpy as np

from .interp import divided_differences
from .propagators import (
    ItoConfig,
    ItoWorkspace,
    _PwcStepper,
    _guess,
    _step_grid,
    hermitian_step_unitaries,
    ito_solve,
    make_kernel,
)

__all__ = [
    "ShapeFunction",
    "ControlField",
    "StateToState",
    "GateFunctional",
    "ControlProblem",
    "KrotovConfig",
    "IterationRecord",
    "OptimizationResult",
    "JointLoopDiverged",
    "functional_value",
    "costate_terminal",
    "forward",
    "backward_costate",
    "pwc_update",
    "ito_update",
    "gradient",
    "optimize",
]


class JointLoopDiverged(RuntimeError):
    """The interleaved field/state loop of one step did not converge."""

    def __init__(self, interval, n_iter, eps_state, eps_field):
        super().__init__(
            f"joint field/state loop failed on interval {interval} after {n_iter} "
            f"iterations (state residual {eps_state:.2e}, field residual {eps_field:.2e}); "
            "try a larger lambda_a, a smaller time step or a lower order M"
        )
        self.interval = interval
        self.n_iter = n_iter
        self.eps_state = eps_state
        self.eps_field = eps_field


# ---------------------------------------------------------------------------
# shape and field


@dataclass(frozen=True)
class ShapeFunction:
    """Update shape ``S(t)`` in ``[0, 1]``.

    ``kind="sin2"`` is ``sin^2(pi t / T)``; ``kind="flattop"`` rises and falls
    linearly over ``rise * T`` at either end; ``kind="flat"`` is 1 throughout
    (edges not pinned).
    """

    horizon: float
    kind: str = "sin2"
    rise: float = 0.1

    def __post_init__(self):
        if self.kind not in ("sin2", "flattop", "flat"):
            raise ValueError(f"unknown shape {self.kind!r}")
        if self.kind == "flattop" and not 0 < self.rise <= 0.5:
            raise ValueError("rise must lie in (0, 0.5]")

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        if self.kind == "sin2":
            out = np.sin(np.pi * t / self.horizon) ** 2
        elif self.kind == "flattop":
            ramp = self.rise * self.horizon
            out = np.minimum(np.minimum(t, self.horizon - t) / ramp, 1.0)
        else:
            out = np.ones_like(t)
        return np.clip(out, 0.0, 1.0)

    def samples(self, times):
        return self(times)


@dataclass
class ControlField:
    """Field samples on the global grid and, optionally, at ITO offsets.

    ``grid_values[n]`` is ``E(t_n)``. The PWC propagator holds the midpoint
    value ``(E(t_n) + E(t_{n+1})) / 2`` on ``[t_n, t_{n+1}]``. ``sub_values[n, j]`` is
    ``E(t_n + tau_j)`` and is what the ITO propagator uses; its first column
    coincides with ``grid_values[:-1]``.
    """

    times: np.ndarray
    grid_values: np.ndarray
    sub_values: Optional[np.ndarray] = None
    iteration: int = 0

    @classmethod
    def from_function(cls, func, horizon, n_steps, m_order=None):
        times = np.linspace(0.0, horizon, n_steps + 1)
        values = np.asarray(np.broadcast_to(func(times), times.shape), dtype=float).copy()
        sub = None
        if m_order is not None:
            grid, _ = _step_grid(m_order, times[1] - times[0])
            t_sub = times[:-1, None] + grid.nodes[None, :]
            sub = np.asarray(np.broadcast_to(func(t_sub), t_sub.shape), dtype=float).copy()
            sub[:, 0] = values[:-1]
        return cls(times, values, sub)

    @property
    def dt(self):
        return self.times[1] - self.times[0]

    @property
    def n_steps(self):
        return len(self.times) - 1

    def __call__(self, t):
        return np.interp(t, self.times, self.grid_values)

    def midpoints(self):
        """Interval values used by the PWC propagator (linear midpoints)."""
        return 0.5 * (self.grid_values[:-1] + self.grid_values[1:])

    def copy(self):
        sub = None if self.sub_values is None else self.sub_values.copy()
        return ControlField(self.times.copy(), self.grid_values.copy(), sub, self.iteration)


# ---------------------------------------------------------------------------
# functionals


@dataclass
class StateToState:
    """``J_T = 1 - |<psi_tgt|psi(T)>|^2``."""

    target: np.ndarray
    n_states: int = 1

    def value(self, finals):
        finals = _finals(finals, self.n_states)
        return float(1.0 - abs(np.vdot(self.target, finals[:, 0])) ** 2)

    def costate(self, finals):
        finals = _finals(finals, self.n_states)
        tgt = np.asarray(self.target, dtype=complex)
        return (np.vdot(tgt, finals[:, 0]) * tgt)[:, None]


@dataclass
class GateFunctional:
    """``J_T = 1 - Re sum_n <n|O^+|Psi_n(T)> / 4`` on the lowest four levels.

    Phase sensitive. ``gate`` is given in the level basis.
    """

    gate: np.ndarray
    dim: int
    n_states: int = 4

    def __post_init__(self):
        self.gate = np.asarray(self.gate, dtype=complex)
        if self.gate.shape != (4, 4):
            raise ValueError("gate must be 4x4")

    def targets(self):
        out = np.zeros((self.dim, 4), dtype=complex)
        out[:4] = self.gate
        return out

    def value(self, finals):
        finals = _finals(finals, self.n_states)
        tau = np.sum(np.conj(self.targets()) * finals)
        return float(1.0 - 0.25 * tau.real)

    def costate(self, finals):
        _finals(finals, self.n_states)
        return 0.25 * self.targets()


def _finals(finals, n):
    finals = np.asarray(finals, dtype=complex)
    finals = finals[:, None] if finals.ndim == 1 else finals
    if finals.shape[1] != n:
        raise ValueError(f"expected {n} final state(s), got {finals.shape[1]}")
    return finals


def functional_value(func, finals):
    return func.value(finals)


def costate_terminal(func, finals):
    return func.costate(finals)


# ---------------------------------------------------------------------------
# problem and configuration


@dataclass
class ControlProblem:
    """``H(t) = h0 + E(t) h1`` steering ``initial`` (columns) under ``functional``."""

    h0: np.ndarray
    h1: np.ndarray
    initial: np.ndarray
    functional: Union[StateToState, GateFunctional]
    horizon: float
    n_steps: int
    guess: Callable = None

    def __post_init__(self):
        self.h0 = np.asarray(self.h0, dtype=complex)
        self.h1 = np.asarray(self.h1, dtype=complex)
        init = np.asarray(self.initial, dtype=complex)
        self.initial = init[:, None] if init.ndim == 1 else init
        if self.initial.shape[1] != self.functional.n_states:
            raise ValueError("number of initial states does not match the functional")

    @property
    def dt(self):
        return self.horizon / self.n_steps

    def guess_field(self, m_order=None):
        guess = self.guess if self.guess is not None else (lambda t: np.zeros_like(t))
        return ControlField.from_function(guess, self.horizon, self.n_steps, m_order)


@dataclass
class KrotovConfig:
    """Settings of the control loop.

    ``propagator`` is ``"pwc"`` or an :class:`ItoConfig`. ``one_shot_field``
    freezes the field estimate at the first pass of the ITO loop (a debug
    option; it does not converge to the right solution).
    """

    lambda_a: float
    shape: Optional[ShapeFunction] = None
    max_iter: int = 100
    stop_tol: float = 0.0
    propagator: Union[str, ItoConfig] = "pwc"
    pwc_backend: str = "chebyshev"
    one_shot_field: bool = False
    on_joint_failure: str = "warn"

    def __post_init__(self):
        if not self.lambda_a > 0:
            raise ValueError("lambda_a must be positive")
        if self.on_joint_failure not in ("warn", "raise", "ignore"):
            raise ValueError("on_joint_failure must be 'warn', 'raise' or 'ignore'")
        if not (self.propagator == "pwc" or isinstance(self.propagator, ItoConfig)):
            raise ValueError("propagator must be 'pwc' or an ItoConfig")

    @property
    def uses_ito(self):
        return isinstance(self.propagator, ItoConfig)


@dataclass
class IterationRecord:
    i: int
    j_total: float
    j_t: float
    field_change_norm: float
    matvec_count: int
    wall_time: float


@dataclass
class OptimizationResult:
    records: list
    field: ControlField
    finals: np.ndarray

    @property
    def j_t(self):
        return np.array([r.j_t for r in self.records])


@dataclass
class _Sweep:
    """Outcome of one propagation sweep."""

    field: ControlField
    finals: np.ndarray
    matvecs: int
    stored: Optional[np.ndarray] = None
    iterations: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# PWC propagation and update


def _pwc_generator(problem, value):
    return -1j * (problem.h0 + value * problem.h1)


def _step_unitaries(problem, fld):
    """All interval propagators of ``fld`` at once (``"eigh"`` backend)."""
    hams = problem.h0[None] + fld.midpoints()[:, None, None] * problem.h1[None]
    return hermitian_step_unitaries(hams, fld.dt)


def _pwc_forward(problem, fld, backend, store=False):
    stepper = _PwcStepper(fld.dt, backend)
    mids = fld.midpoints()
    psi = problem.initial.copy()
    stored = np.empty((fld.n_steps + 1,) + psi.shape, dtype=complex) if store else None
    if store:
        stored[0] = psi
    units = _step_unitaries(problem, fld) if backend == "eigh" else None
    for n in range(fld.n_steps):
        if units is None:
            psi = stepper(_pwc_generator(problem, mids[n]), psi)
        else:
            psi = units[n] @ psi
            stepper.matvecs += 1
        if store:
            stored[n + 1] = psi
    return _Sweep(fld, psi, stepper.matvecs, stored)


def _pwc_backward(problem, fld, chi_t, backend):
    stepper = _PwcStepper(fld.dt, backend)
    mids = fld.midpoints()
    chis = np.empty((fld.n_steps + 1,) + chi_t.shape, dtype=complex)
    chis[-1] = chi_t
    units = _step_unitaries(problem, fld) if backend == "eigh" else None
    for n in range(fld.n_steps - 1, -1, -1):
        if units is None:
            chis[n] = stepper(_pwc_generator(problem, mids[n]).conj().T, chis[n + 1])
        else:
            chis[n] = units[n].conj().T @ chis[n + 1]
            stepper.matvecs += 1
    return chis, stepper.matvecs


def pwc_update(problem, fld, chis, cfg):
    """Sequential update with the time-lag approximation.

    ``E_new(t_n)`` follows from the old costate and the new state at ``t_n``.
    The step to ``t_{n+1}`` needs the midpoint value, which involves the
    still unknown ``E_new(t_{n+1})``; it is replaced by
    ``E_old(t_{n+1}) + Delta E(t_n)``, i.e. the update is held constant over
    one step. The final states of the returned sweep come from a clean
    forward propagation under the completed new field.
    """
    shape = cfg.shape or ShapeFunction(problem.horizon)
    s = shape(fld.times) / cfg.lambda_a
    stepper = _PwcStepper(fld.dt, cfg.pwc_backend)
    new = fld.copy()
    old = fld.grid_values
    psi = problem.initial.copy()
    h1 = problem.h1
    for n in range(fld.n_steps + 1):
        w = np.sum(np.conj(chis[n]) * (h1 @ psi))
        new.grid_values[n] = old[n] + s[n] * w.imag
        if n == fld.n_steps:
            break
        lagged = old[n + 1] + (new.grid_values[n] - old[n])
        psi = stepper(_pwc_generator(problem, 0.5 * (new.grid_values[n] + lagged)), psi)
        if not np.all(np.isfinite(psi)):
            raise FloatingPointError(f"non-finite state after step {n}")
    new.iteration = fld.iteration + 1
    clean = _pwc_forward(problem, new, cfg.pwc_backend)
    matvecs = stepper.matvecs + (fld.n_steps + 1) * psi.shape[1] + clean.matvecs
    return _Sweep(new, clean.finals, matvecs)


# ---------------------------------------------------------------------------
# ITO propagation and update


def _mid_value(values, grid):
    if grid.m_order % 2:
        return float(values[grid.m_order // 2])
    interp = divided_differences(np.asarray(values, dtype=float), grid)
    return float(interp(0.5 * grid.dt))


def _ito_sweep(problem, fld, cfg, u0, backward=False, store=False):
    """Propagate ``u0`` across the grid under the node-sampled field.

    ``backward=True`` integrates the adjoint equation from ``T`` down to 0;
    the collocation offsets are mirror symmetric, so the backward node states
    are the forward ones in reverse order.
    """
    ito = replace(cfg.propagator, dt=fld.dt, error_estimates=False)
    grid, taus = _step_grid(ito.m_order, fld.dt)
    n_steps = fld.n_steps
    ws = ItoWorkspace()
    u = u0.copy()
    stored = np.empty((n_steps, ito.m_order) + u.shape, dtype=complex) if store else None
    matvecs = 0
    order = range(n_steps - 1, -1, -1) if backward else range(n_steps)
    for n in order:
        eps = fld.sub_values[n][::-1] if backward else fld.sub_values[n]
        e0 = _mid_value(eps, grid)
        h = problem.h0 + e0 * problem.h1
        g0 = 1j * h if backward else -1j * h
        coupling = (1j if backward else -1j) * problem.h1
        de = eps - e0
        kernel = make_kernel(g0, taus, ito.kernel, anti_hermitian=True)

        def source(states, de=de, coupling=coupling):
            return de[:, None, None] * np.matmul(coupling, states)

        guess = _guess(ito, grid, kernel, u, ws, fld.dt)
        states, v, report = ito_solve(g0, kernel, grid, u, source, guess, ito,
                                      zero_source=not np.any(de))
        matvecs += report.matvecs + report.n_iter * grid.m_order * u.shape[1]
        ws.v_vectors, ws.fm_cache, ws.dt = v, kernel, fld.dt
        if store:
            stored[n] = states[::-1] if backward else states
        u = states[-1]
    return _Sweep(fld, u, matvecs, stored)


def backward_costate(problem, fld, cfg, finals):
    """Costate trajectory of the old field from ``chi(T) = -grad J_T``.

    PWC: array ``(n_steps + 1, D, P)`` at grid points. ITO: array
    ``(n_steps, M, D, P)`` at the collocation nodes of each step.
    Returns ``(chis, matvecs)``.
    """
    chi_t = costate_terminal(problem.functional, finals)
    if cfg.uses_ito:
        sweep = _ito_sweep(problem, fld, cfg, chi_t, backward=True, store=True)
        return sweep.stored, sweep.matvecs
    return _pwc_backward(problem, fld, chi_t, cfg.pwc_backend)


def ito_update(problem, fld, chis, cfg):
    """Forward sweep resolving field and state jointly on every step.

    On each interval the field at the collocation nodes is recomputed from
    the current state iterate, and the state from the field, until both the
    relative state change and the relative field change are below
    ``tol_iter``.
    """
    ito = replace(cfg.propagator, dt=fld.dt, error_estimates=False)
    grid, taus = _step_grid(ito.m_order, fld.dt)
    shape = cfg.shape or ShapeFunction(problem.horizon)
    new = fld.copy()
    h1 = problem.h1
    ws = ItoWorkspace()
    u = problem.initial.copy()
    matvecs = 0
    iterations = []
    for n in range(fld.n_steps):
        ref = fld.sub_values[n]
        weight = shape(fld.times[n] + grid.nodes) / cfg.lambda_a
        chi = chis[n]
        e0 = _mid_value(ref, grid)
        g0 = -1j * (problem.h0 + e0 * h1)
        kernel = make_kernel(g0, taus, ito.kernel, anti_hermitian=True)
        loop = {"eps": None, "change": np.inf, "calls": 0}

        def source(states, ref=ref, weight=weight, chi=chi, e0=e0, loop=loop):
            h1_states = np.matmul(h1, states)
            if loop["eps"] is None or not cfg.one_shot_field:
                w = np.sum(np.conj(chi) * h1_states, axis=(1, 2)).imag
                eps = ref + weight * w
                if loop["eps"] is not None:
                    scale = max(np.max(np.abs(eps)), 1e-300)
                    loop["change"] = float(np.max(np.abs(eps - loop["eps"]))) / scale
                loop["eps"] = eps
            elif cfg.one_shot_field:
                loop["change"] = 0.0
            loop["calls"] += 1
            return -1j * (loop["eps"] - e0)[:, None, None] * h1_states

        guess = _guess(ito, grid, kernel, u, ws, fld.dt)
        states, v, report = ito_solve(g0, kernel, grid, u, source, guess, ito,
                                      residual=lambda loop=loop: loop["change"])
        matvecs += report.matvecs + 2 * report.n_iter * grid.m_order * u.shape[1]
        iterations.append(report.n_iter)
        if not report.converged:
            err = JointLoopDiverged(n, report.n_iter, report.eps_iter, loop["change"])
            if cfg.on_joint_failure == "raise":
                raise err
            if cfg.on_joint_failure == "warn":
                warnings.warn(str(err), RuntimeWarning, stacklevel=2)
        if not np.all(np.isfinite(states)):
            raise FloatingPointError(f"non-finite state on interval {n}")
        new.sub_values[n] = loop["eps"]
        new.grid_values[n] = loop["eps"][0]
        ws.v_vectors, ws.fm_cache, ws.dt = v, kernel, fld.dt
        u = states[-1]
    new.grid_values[-1] = new.sub_values[-1, -1]
    new.iteration = fld.iteration + 1
    return _Sweep(new, u, matvecs, iterations=iterations)


def forward(problem, fld, cfg):
    """Final states under ``fld`` with the configured propagator."""
    if cfg.uses_ito:
        return _ito_sweep(problem, fld, cfg, problem.initial)
    return _pwc_forward(problem, fld, cfg.pwc_backend)


def gradient(problem, fld, cfg):
    """``-2 Im sum_k <chi_k(t_n)|H1|psi_k(t_n)>`` on the global grid.

    The functional derivative of ``J_T`` with respect to ``E(t)`` sampled at
    the grid points, i.e. ``-(2 lambda_a / S)`` times the first-order update.
    PWC propagation only.
    """
    if cfg.uses_ito:
        raise NotImplementedError("gradient is provided for PWC propagation")
    sweep = _pwc_forward(problem, fld, cfg.pwc_backend, store=True)
    chi_t = costate_terminal(problem.functional, sweep.finals)
    chis, _ = _pwc_backward(problem, fld, chi_t, cfg.pwc_backend)
    w = np.einsum("nij,nij->n", np.conj(chis), np.matmul(problem.h1, sweep.stored))
    return -2.0 * w.imag


# ---------------------------------------------------------------------------
# outer loop


def _running_cost(old, new, shape, lambda_a):
    s = shape(old.times)
    de = new.grid_values - old.grid_values
    mask = s > 0
    dt = old.dt
    cost = float(np.sum(lambda_a / s[mask] * de[mask] ** 2) * dt)
    return cost, float(np.sqrt(np.sum(de ** 2) * dt))


def optimize(problem, cfg, guess=None, callback=None):
    """Run Krotov iterations until ``J_T <= stop_tol`` or ``max_iter``.

    Returns an :class:`OptimizationResult` whose ``records[0]`` describes the
    guess field.
    """
    m_order = cfg.propagator.m_order if cfg.uses_ito else None
    fld = guess.copy() if guess is not None else problem.guess_field(m_order)
    if cfg.uses_ito and fld.sub_values is None:
        raise ValueError("ITO optimization needs sub_values on the guess field")
    shape = cfg.shape or ShapeFunction(problem.horizon)
    t0 = time.perf_counter()
    sweep = forward(problem, fld, cfg)
    matvecs = sweep.matvecs
    j_t = problem.functional.value(sweep.finals)
    records = [IterationRecord(0, j_t, j_t, 0.0, matvecs, time.perf_counter() - t0)]
    finals = sweep.finals
    if callback is not None:
        callback(records[-1], fld)
    for i in range(1, cfg.max_iter + 1):
        if j_t <= cfg.stop_tol:
            break
        chis, mv_back = backward_costate(problem, fld, cfg, finals)
        update = ito_update if cfg.uses_ito else pwc_update
        sweep = update(problem, fld, chis, cfg)
        matvecs += mv_back + sweep.matvecs
        j_t = problem.functional.value(sweep.finals)
        g_a, change = _running_cost(fld, sweep.field, shape, cfg.lambda_a)
        fld, finals = sweep.field, sweep.finals
        records.append(IterationRecord(i, j_t + g_a, j_t, change, matvecs,
                                       time.perf_counter() - t0))
        if callback is not None:
            callback(records[-1], fld)
    return OptimizationResult(records, fld, finals)
