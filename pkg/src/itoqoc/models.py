"""Physical systems: driven and frequency-controlled oscillators, and a qudit.

Units: the oscillators use ``hbar = 1`` with dimensionless mass and frequency.
The qudit uses nanoseconds and angular frequencies in rad/ns, so the tabulated
GHz values enter multiplied by ``2 pi``.
"""
from dataclasses import dataclass

import numpy as np

from .propagators import f_m_scalar
from .quantum import hilbert_generator, ket, liouville_generator

__all__ = [
    "ho_operators",
    "DrivenHoModel",
    "driven_ho_analytic",
    "FreqHoModel",
    "QuditModel",
    "PythagoreanDrive",
    "pythagorean_field",
    "qudit_hamiltonian",
    "interaction_hamiltonian",
    "ideal_hamiltonian",
    "interaction_generator",
    "lindblad_ops",
    "population_mismatch",
    "TWO_PI",
]

TWO_PI = 2.0 * np.pi


def _ladder(n):
    """Annihilation operator on ``n`` levels."""
    return np.diag(np.sqrt(np.arange(1, n, dtype=float)), 1).astype(complex)


def ho_operators(n_trunc, mass=1.0, omega=1.0):
    """Position, momentum and undriven Hamiltonian in the number basis.

    Convention: ``x = (a + a^+) / sqrt(2 m w)`` and
    ``p = i sqrt(m w / 2) (a^+ - a)``, so that ``<0|x|1> = 1/sqrt(2)`` and
    ``<0|p|1> = -i/sqrt(2)`` for ``m = w = 1``. ``h0`` is the exact diagonal
    ``w (n + 1/2)``.
    """
    if n_trunc < 2:
        raise ValueError("need at least two levels")
    a = _ladder(n_trunc)
    x = (a + a.conj().T) / np.sqrt(2.0 * mass * omega)
    p = 1j * np.sqrt(mass * omega / 2.0) * (a.conj().T - a)
    h0 = np.diag(omega * (np.arange(n_trunc) + 0.5)).astype(complex)
    return x, p, h0


@dataclass(frozen=True)
class DrivenHoModel:
    """``H = p^2/2m + m w^2 x^2/2 + E(t) x`` with
    ``E(t) = E0 sin^2(pi t/T) cos(wL t)``."""

    mass: float = 1.0
    omega: float = 1.0
    e0: float = 1e-3
    omega_l: float = 5.0
    horizon: float = 100.0
    n_ho: int = 20

    def field(self, t):
        t = np.asarray(t, dtype=float)
        return self.e0 * np.sin(np.pi * t / self.horizon) ** 2 * np.cos(self.omega_l * t)

    def operators(self):
        return ho_operators(self.n_ho, self.mass, self.omega)

    def generator(self):
        x, _, h0 = self.operators()
        return hilbert_generator(h0, [(x, self.field)])

    def initial_state(self):
        return ket(0, self.n_ho)


def driven_ho_analytic(model, t):
    """Closed-form ``(<x>(t), <p>(t))`` starting from the oscillator ground state.

    With ``z = <p> + i m w <x>`` the Heisenberg equations give
    ``dz/dt = i w z - E(t)``, so ``z(t) = -exp(i w t) int_0^t E(s) exp(-i w s) ds``.
    The pulse is a sum of six exponentials ``exp(i k s)``; each integral is
    ``t * phi_1(i (k - w) t)``, evaluated without cancellation near resonance.
    """
    t = np.asarray(t, dtype=float)
    w, wl, big = model.omega, model.omega_l, 2.0 * np.pi / model.horizon
    # sin^2(pi t/T) cos(wL t) = cos(wL t)/2 - [cos((wL+2W)t) + cos((wL-2W)t)]/4
    terms = [(0.25, wl), (0.25, -wl)]
    for k in (wl + big, wl - big):
        terms += [(-0.125, k), (-0.125, -k)]
    integral = np.zeros(t.shape, dtype=complex)
    for amp, k in terms:
        integral += amp * f_m_scalar(1j * (k - w), 1, t)
    z = -model.e0 * np.exp(1j * w * t) * integral
    return z.imag / (model.mass * w), z.real


@dataclass(frozen=True)
class FreqHoModel:
    """``H = p^2/2 + E(t) x^2/2`` with ``m = w = 1``.

    ``x^2`` and ``p^2`` use exact ladder matrix elements (computed on two
    extra levels, then cut), so ``E = 1`` gives exactly ``n + 1/2``.
    """

    n_ho: int = 60
    target_eps: float = 0.25

    def operators(self):
        x, p, _ = ho_operators(self.n_ho + 2)
        n = self.n_ho
        kin = (p @ p)[:n, :n].real / 2.0
        pot = (x @ x)[:n, :n].real / 2.0
        return kin.astype(complex), pot.astype(complex)

    def hamiltonian(self, eps):
        kin, pot = self.operators()
        return kin + eps * pot

    def generator(self, field):
        kin, pot = self.operators()
        return hilbert_generator(kin, [(pot, field)])

    def ground_state(self, eps):
        _, vecs = np.linalg.eigh(self.hamiltonian(eps))
        psi = vecs[:, 0].astype(complex)
        # fix the sign so the largest component is real positive
        k = np.argmax(np.abs(psi))
        return psi * (abs(psi[k]) / psi[k])

    def initial_state(self):
        return ket(0, self.n_ho)

    def target_state(self):
        return self.ground_state(self.target_eps)


@dataclass(frozen=True)
class QuditModel:
    """Anharmonic ladder ``eps_n = n w0 - beta n (n-1) / 2`` with linear drive.

    Defaults are the experimental parameters (rad/ns, ns). ``t2_star`` is
    the pure dephasing time entering the dephasing operator.
    """

    n_levels: int = 10
    omega0: float = TWO_PI * 6.73
    beta: float = TWO_PI * 0.12
    t1: float = 230.0
    t2_star: float = 120.0
    omega_rabi: float = TWO_PI * 0.0476
    p: float = 0.86
    q: float = 0.86

    def __post_init__(self):
        if self.n_levels < 2:
            raise ValueError("need at least two levels")

    @property
    def energies(self):
        n = np.arange(self.n_levels)
        return n * self.omega0 - 0.5 * self.beta * n * (n - 1)

    def transition(self, n):
        """``w_{n,n+1} = eps_{n+1} - eps_n = w0 - n beta``."""
        return self.omega0 - n * self.beta

    def h0(self):
        return np.diag(self.energies).astype(complex)

    def h1(self):
        a = _ladder(self.n_levels)
        return a + a.conj().T

    def drive(self):
        return PythagoreanDrive.from_model(self)

    def with_drive(self, p, q):
        return QuditModel(self.n_levels, self.omega0, self.beta, self.t1,
                          self.t2_star, self.omega_rabi, p, q)

    def frame_phases(self, t):
        """Diagonal of ``exp(i H0 t)``, the map to the interaction picture."""
        return np.exp(1j * self.energies * t)


@dataclass(frozen=True)
class PythagoreanDrive:
    """Three-tone field ``sum_k V_k / sqrt(k) cos(w_k t)``, k = 1, 2, 3."""

    v01: float
    v12: float
    v23: float
    w01: float
    w12: float
    w23: float

    @classmethod
    def from_model(cls, model):
        p, q, om = model.p, model.q, model.omega_rabi
        return cls(
            om * (p * p + q * q) / 2.0,
            om * p * q,
            om * (p * p - q * q) / 2.0,
            model.transition(0),
            model.transition(1),
            model.transition(2),
        )

    @property
    def amplitudes(self):
        return np.array([self.v01, self.v12, self.v23])

    @property
    def carriers(self):
        return np.array([self.w01, self.w12, self.w23])

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        out = np.zeros(t.shape)
        for k, (v, w) in enumerate(zip(self.amplitudes, self.carriers), start=1):
            out = out + v / np.sqrt(k) * np.cos(w * t)
        return out


def pythagorean_field(model):
    return PythagoreanDrive.from_model(model)


def lindblad_ops(model):
    """``[(L1, 1), (L2, 1)]``: relaxation and pure dephasing, rates folded in."""
    if model.t1 <= 0 or model.t2_star <= 0:
        raise ValueError("relaxation and dephasing times must be positive")
    n = np.arange(model.n_levels)
    l1 = np.diag(np.sqrt((n[1:]) / model.t1), 1).astype(complex)
    l2 = np.diag(np.sqrt(2.0 * n ** 2 / model.t2_star)).astype(complex)
    return [(l1, 1.0), (l2, 1.0)]


def qudit_hamiltonian(model, field=None, dissipative=False):
    """Lab-frame generator ``H0 + E(t) H1``, Hilbert or Liouville space."""
    field = model.drive() if field is None else field
    controls = [(model.h1(), field)]
    if dissipative:
        return liouville_generator(model.h0(), controls, lindblad_ops(model))
    return hilbert_generator(model.h0(), controls)


def _coupling_ops(n_levels):
    """Upper-diagonal elementary couplings ``sqrt(n+1) |n><n+1|``."""
    ops = []
    for n in range(n_levels - 1):
        op = np.zeros((n_levels, n_levels), dtype=complex)
        op[n, n + 1] = np.sqrt(n + 1.0)
        ops.append(op)
    return ops


def _interaction_coeffs(model, drive, rwa):
    """Time functions multiplying ``sqrt(n+1)|n><n+1|`` in the interaction frame."""
    coeffs = []
    for n in range(model.n_levels - 1):
        wn = model.transition(n)

        def c(t, wn=wn):
            t = np.asarray(t, dtype=float)
            out = np.zeros(t.shape, dtype=complex)
            for k, (v, w) in enumerate(zip(drive.amplitudes, drive.carriers), start=1):
                amp = 0.5 * v / np.sqrt(k)
                out = out + amp * np.exp(1j * (w - wn) * t)
                if not rwa:
                    out = out + amp * np.exp(-1j * (w + wn) * t)
            return out

        coeffs.append(c)
    return coeffs


def interaction_hamiltonian(model, drive, t, rwa=False):
    """Interaction-picture Hamiltonian at time ``t``.

    ``rwa=False`` keeps co- and counter-rotating exponentials (exactly
    ``exp(i H0 t) H1(t) exp(-i H0 t)``); ``rwa=True`` drops the terms
    oscillating at ``w_k + w_{n,n+1}``.
    """
    h = np.zeros((model.n_levels, model.n_levels), dtype=complex)
    for op, c in zip(_coupling_ops(model.n_levels), _interaction_coeffs(model, drive, rwa)):
        h += c(t) * op
    return h + h.conj().T


def ideal_hamiltonian(model, drive=None):
    """``H_inf``: tridiagonal ``V_ij / 2`` on the lowest four levels."""
    drive = model.drive() if drive is None else drive
    h = np.zeros((model.n_levels, model.n_levels), dtype=complex)
    for n, v in enumerate(drive.amplitudes[: model.n_levels - 1]):
        h[n, n + 1] = h[n + 1, n] = 0.5 * v
    return h


def interaction_generator(model, drive=None, rwa=False):
    """Hilbert-space generator of the interaction-picture dynamics.

    Dissipative runs stay in the lab frame: the frame change dresses ``L1``
    with level-dependent phases, so the dissipator is not frame invariant.
    """
    drive = model.drive() if drive is None else drive
    ops = _coupling_ops(model.n_levels)
    coeffs = _interaction_coeffs(model, drive, rwa)
    zero = np.zeros((model.n_levels, model.n_levels), dtype=complex)
    controls = []
    for op, c in zip(ops, coeffs):
        controls.append((op, c))
        controls.append((op.conj().T, _conj(c)))
    return hilbert_generator(zero, controls)


def _conj(c):
    return lambda t: np.conj(c(t))


def population_mismatch(pops_a, pops_b):
    """Pointwise ``max_n |P_n^a - P_n^b|`` and its time average.

    Both inputs have shape ``(n_samples, n_levels)`` on the same grid.
    """
    pops_a = np.asarray(pops_a, dtype=float)
    pops_b = np.asarray(pops_b, dtype=float)
    if pops_a.shape != pops_b.shape:
        raise ValueError(f"grid mismatch: {pops_a.shape} vs {pops_b.shape}")
    mis = np.max(np.abs(pops_a - pops_b), axis=1)
    return mis, float(np.mean(mis))
