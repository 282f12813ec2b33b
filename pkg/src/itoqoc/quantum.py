"""Dense linear-algebra substrate: states, operators, Liouville space.

States are plain complex numpy arrays. A Hilbert-space state of dimension N is
a length-N vector; a density matrix is carried in Liouville space as its
column-stacked vectorization of length N**2, i.e. ``vec(rho)[i + N*j] ==
rho[i, j]``. With this convention ``vec(A @ X @ B) == kron(B.T, A) @ vec(X)``.

All prefactors (``-i`` for the Schroedinger equation, hbar = 1) are absorbed
into :class:`Generator`, so every propagator in the package solves
``du/dt = G(t) u``.
"""
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "DimensionError",
    "Generator",
    "LindbladSpec",
    "vectorize",
    "devectorize",
    "is_hermitian",
    "commutator_superop",
    "dissipator_superop",
    "build_liouvillian",
    "hilbert_generator",
    "liouville_generator",
    "expectation",
    "ket",
    "projector",
    "populations",
]


class DimensionError(ValueError):
    """Operand shapes are inconsistent."""


def ket(n, dim):
    """Basis vector ``|n>`` of a ``dim``-dimensional Hilbert space."""
    psi = np.zeros(dim, dtype=complex)
    psi[n] = 1.0
    return psi


def projector(psi):
    psi = np.asarray(psi)
    return np.outer(psi, psi.conj())


def is_hermitian(a, atol=1e-13):
    a = np.asarray(a)
    return a.shape[0] == a.shape[1] and np.max(np.abs(a - a.conj().T), initial=0.0) <= atol


def vectorize(rho):
    """Column-stack an N x N matrix into a length-N**2 vector."""
    rho = np.asarray(rho)
    if rho.ndim != 2 or rho.shape[0] != rho.shape[1]:
        raise DimensionError(f"expected a square matrix, got shape {rho.shape}")
    return rho.reshape(-1, order="F").astype(complex)


def devectorize(vec):
    """Inverse of :func:`vectorize`."""
    vec = np.asarray(vec)
    n = int(round(np.sqrt(vec.shape[0])))
    if vec.ndim != 1 or n * n != vec.shape[0]:
        raise DimensionError(f"length {vec.shape} is not a perfect square")
    return vec.reshape((n, n), order="F")


def commutator_superop(h):
    """Superoperator of ``rho -> -i [h, rho]``."""
    h = np.asarray(h, dtype=complex)
    eye = np.eye(h.shape[0])
    return -1j * (np.kron(eye, h) - np.kron(h.T, eye))


def dissipator_superop(lop, rate=1.0):
    """Superoperator of ``rate * (L rho L^+ - 1/2 {L^+ L, rho})``."""
    lop = np.asarray(lop, dtype=complex)
    eye = np.eye(lop.shape[0])
    ldl = lop.conj().T @ lop
    return rate * (
        np.kron(lop.conj(), lop) - 0.5 * (np.kron(eye, ldl) + np.kron(ldl.T, eye))
    )


@dataclass(frozen=True)
class LindbladSpec:
    """Lindblad master equation ``d rho/dt = -i[H(t), rho] + sum_k D[L_k] rho``.

    ``hamiltonian`` maps a time to an N x N Hermitian matrix (energy units,
    hbar = 1); ``lindblad_ops`` is a sequence of ``(L_k, gamma_k)`` pairs.
    """

    hamiltonian: Callable[[float], np.ndarray]
    lindblad_ops: Sequence = ()

    def __post_init__(self):
        for _, rate in self.lindblad_ops:
            if rate < 0:
                raise ValueError(f"negative Lindblad rate {rate}")


def build_liouvillian(spec, t):
    """Liouvillian matrix of ``spec`` at time ``t`` (column-stacking)."""
    h = np.asarray(spec.hamiltonian(t), dtype=complex)
    n = h.shape[0]
    superop = commutator_superop(h)
    for lop, rate in spec.lindblad_ops:
        lop = np.asarray(lop)
        if lop.shape != (n, n):
            raise DimensionError(
                f"Lindblad operator shape {lop.shape} vs Hamiltonian {h.shape}"
            )
        superop = superop + dissipator_superop(lop, rate)
    return superop


@dataclass
class Generator:
    """Affine generator ``G(t) = drift + sum_k c_k(t) * ops[k]``.

    The splitting used by the semi-global propagator anchors the
    time-independent part at an interval midpoint: ``g0 = G(t_mid)`` and the
    remaining correction ``G(t) - g0`` acts on the state as the
    inhomogeneity. Subclasses may override :meth:`inhomogeneity` to add
    state-dependent (nonlinear) terms.

    Parameters
    ----------
    drift : (D, D) array
        Time-independent part, prefactors included.
    ops : list of (D, D) arrays
        Control operators, prefactors included.
    coeffs : list of callables
        Scalar time functions multiplying ``ops``; must accept numpy arrays.
    """

    drift: np.ndarray
    ops: list = field(default_factory=list)
    coeffs: list = field(default_factory=list)
    #: True if every ``G(t)`` is anti-Hermitian (closed-system dynamics).
    anti_hermitian: bool = False

    def __post_init__(self):
        self.drift = np.asarray(self.drift, dtype=complex)
        self.ops = [np.asarray(op, dtype=complex) for op in self.ops]
        if len(self.ops) != len(self.coeffs):
            raise ValueError("ops and coeffs must have equal length")
        for op in self.ops:
            if op.shape != self.drift.shape:
                raise DimensionError(f"operator shape {op.shape} vs {self.drift.shape}")

    @property
    def dim(self):
        return self.drift.shape[0]

    def coefficients(self, t):
        """Control coefficients at time(s) ``t``, shape ``(n_ops,) + shape(t)``."""
        t = np.asarray(t, dtype=float)
        return np.array([np.broadcast_to(c(t), t.shape) for c in self.coeffs])

    def at(self, t):
        g = self.drift.copy()
        for c, op in zip(self.coefficients(t), self.ops):
            g += c * op
        return g

    def split(self, t_mid):
        """Return ``(g0, g_td)`` with ``g_td(t_mid)`` exactly zero."""
        g0 = self.at(t_mid)
        c_mid = self.coefficients(t_mid)

        def g_td(t):
            out = np.zeros_like(self.drift)
            for c, cm, op in zip(self.coefficients(t), c_mid, self.ops):
                out += (c - cm) * op
            return out

        return g0, g_td

    def inhomogeneity(self, times, states, t_mid):
        """``(G(t_j) - G(t_mid)) u_j`` for stacked states ``(M, D, P)``."""
        out = np.zeros_like(states)
        if not self.ops:
            return out
        dc = self.coefficients(times) - self.coefficients(t_mid)[:, None]
        for row, op in zip(dc, self.ops):
            out += row[:, None, None] * np.matmul(op, states)
        return out

    def backward(self, t_end):
        """Generator of the adjoint equation run in reversed time.

        ``d chi/dt = -G(t)^+ chi`` integrated from ``t_end`` down to 0 is
        ``d chi/ds = G(t_end - s)^+ chi`` in ``s = t_end - t``.
        """
        return Generator(
            self.drift.conj().T,
            [op.conj().T for op in self.ops],
            [_reversed(c, t_end) for c in self.coeffs],
            anti_hermitian=self.anti_hermitian,
        )


def _reversed(c, t_end):
    return lambda s: c(t_end - np.asarray(s, dtype=float))


def hilbert_generator(h0, controls=()):
    """Generator ``-i (h0 + sum_k f_k(t) h_k)`` for ``controls = [(h_k, f_k)]``."""
    return Generator(
        -1j * np.asarray(h0, dtype=complex),
        [-1j * np.asarray(h, dtype=complex) for h, _ in controls],
        [f for _, f in controls],
        anti_hermitian=True,
    )


def liouville_generator(h0, controls=(), lindblad_ops=()):
    """Liouville-space generator of a Lindblad equation with linear controls."""
    drift = build_liouvillian(LindbladSpec(lambda t: h0, lindblad_ops), 0.0)
    return Generator(
        drift,
        [commutator_superop(h) for h, _ in controls],
        [f for _, f in controls],
        anti_hermitian=not any(rate > 0 for _, rate in lindblad_ops),
    )


def expectation(op, state):
    """``<psi|A|psi>`` for a Hilbert state, ``tr(A rho)`` for a Liouville state."""
    op = np.asarray(op)
    state = np.asarray(state)
    n = op.shape[0]
    if state.shape[0] == n:
        return np.vdot(state, op @ state)
    if state.shape[0] == n * n:
        # tr(A rho) = sum_ij A_ji rho_ij = vec(A^T) . vec(rho)
        return np.dot(op.T.reshape(-1, order="F"), state)
    raise DimensionError(f"operator dim {n} vs state length {state.shape[0]}")


def populations(state, liouville=False):
    """Level populations of a Hilbert vector or a vectorized density matrix."""
    state = np.asarray(state)
    if liouville:
        return devectorize(state).diagonal().real.copy()
    return np.abs(state) ** 2
