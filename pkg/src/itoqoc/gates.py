"""Two-qubit gates realized on the lowest four qudit levels.

The four levels are read as Bell states of two virtual qubits. Level ``n``
maps to the ``n``-th column of :data:`LEVEL_TO_QUBITS`,

    |0> -> Phi+,  |1> -> Phi-,  |2> -> i Psi+,  |3> -> i Psi-,

with ``Phi+- = (|00> +- |11>)/sqrt2`` and ``Psi+- = (|01> +- |10>)/sqrt2``.
The phases make every real tridiagonal coupling of neighbouring levels
(such as the ideal Pythagorean Hamiltonian) generate a real orthogonal
matrix in the magic basis, i.e. a local two-qubit gate.

Local invariants follow Makhlin's trace formulas evaluated in the magic
basis :data:`MAGIC`; the gate concurrence is computed from the Weyl-chamber
coordinates of Childs et al. and Kraus & Cirac.
"""
from dataclasses import dataclass
from importlib import resources
import json

import numpy as np

__all__ = [
    "GateMatrix",
    "LocalInvariants",
    "RankDeficient",
    "MAGIC",
    "LEVEL_TO_QUBITS",
    "extract_gate",
    "closest_unitary",
    "to_bell_basis",
    "from_bell_basis",
    "levels_to_qubits",
    "makhlin_invariants",
    "weyl_coordinates",
    "gate_concurrence",
    "state_concurrence",
    "von_neumann_entropy",
    "load_catalog",
    "classify",
    "haar_random",
    "leakage",
]

_S2 = 1.0 / np.sqrt(2.0)
_PHI_P = _S2 * np.array([1, 0, 0, 1], dtype=complex)
_PHI_M = _S2 * np.array([1, 0, 0, -1], dtype=complex)
_PSI_P = _S2 * np.array([0, 1, 1, 0], dtype=complex)
_PSI_M = _S2 * np.array([0, 1, -1, 0], dtype=complex)

#: Magic basis (columns): Phi+, i Phi-, i Psi+, Psi-.
MAGIC = np.column_stack([_PHI_P, 1j * _PHI_M, 1j * _PSI_P, _PSI_M])

#: Qudit level -> two-qubit state (columns).
LEVEL_TO_QUBITS = np.column_stack([_PHI_P, _PHI_M, 1j * _PSI_P, 1j * _PSI_M])

_SYSY = np.fliplr(np.diag([-1.0, 1.0, 1.0, -1.0])).astype(complex)


class RankDeficient(np.linalg.LinAlgError):
    """A singular value is too small for a meaningful unitary projection."""


@dataclass
class GateMatrix:
    """4x4 operator with a basis tag (``"levels"``, ``"computational"``, ``"bell"``)."""

    entries: np.ndarray
    basis: str = "computational"

    def __post_init__(self):
        self.entries = np.asarray(self.entries, dtype=complex)
        if self.entries.shape != (4, 4):
            raise ValueError(f"expected a 4x4 matrix, got {self.entries.shape}")

    def __array__(self, dtype=None, copy=None):
        return self.entries if dtype is None else self.entries.astype(dtype)

    @property
    def unitarity_defect(self):
        u = self.entries
        return float(np.max(np.abs(u.conj().T @ u - np.eye(4))))


@dataclass(frozen=True)
class LocalInvariants:
    g1: float
    g2: float
    g3: float

    def as_array(self):
        return np.array([self.g1, self.g2, self.g3])

    def distance(self, other):
        return float(np.linalg.norm(self.as_array() - np.asarray(other, dtype=float)))


def leakage(finals, levels=4):
    """Population outside the lowest ``levels`` states, per column."""
    finals = np.asarray(finals)
    finals = finals[:, None] if finals.ndim == 1 else finals
    return 1.0 - np.sum(np.abs(finals[:levels]) ** 2, axis=0)


def extract_gate(finals, levels=4, phases=None):
    """Matrix ``<m|Psi_n(T)>`` for ``m, n < levels``.

    ``finals`` has the propagated basis states as columns, shape ``(N, levels)``.
    ``phases`` (length ``N``) multiplies row ``m`` first, e.g. the diagonal of
    ``exp(i H0 T)`` to read the gate in the rotating frame.
    """
    finals = np.asarray(finals, dtype=complex)
    if phases is not None:
        finals = np.asarray(phases)[:, None] * finals
    return GateMatrix(finals[:levels, :levels], basis="levels")


def closest_unitary(g, min_sv=1e-10):
    """Unitary polar factor ``W = U V^+`` of ``g = U S V^+``."""
    tag = g.basis if isinstance(g, GateMatrix) else None
    a = np.asarray(g, dtype=complex)
    u, s, vh = np.linalg.svd(a)
    if np.min(s) < min_sv:
        raise RankDeficient(f"smallest singular value {np.min(s):.3e} below {min_sv:g}")
    w = u @ vh
    return GateMatrix(w, tag) if tag else w


def levels_to_qubits(g):
    """Re-express a level-basis gate in the computational two-qubit basis."""
    a = np.asarray(g, dtype=complex)
    out = LEVEL_TO_QUBITS @ a @ LEVEL_TO_QUBITS.conj().T
    return GateMatrix(out, "computational") if isinstance(g, GateMatrix) else out


def to_bell_basis(g):
    """``Q^+ g Q`` with ``Q`` = :data:`MAGIC`."""
    a = np.asarray(g, dtype=complex)
    out = MAGIC.conj().T @ a @ MAGIC
    return GateMatrix(out, "bell") if isinstance(g, GateMatrix) else out


def from_bell_basis(g):
    a = np.asarray(g, dtype=complex)
    out = MAGIC @ a @ MAGIC.conj().T
    return GateMatrix(out, "computational") if isinstance(g, GateMatrix) else out


def _check_unitary(u, atol):
    defect = np.max(np.abs(u.conj().T @ u - np.eye(4)))
    if defect > atol:
        raise ValueError(f"gate is not unitary (defect {defect:.2e})")


def _special(u):
    # principal fourth root of the determinant
    return u / np.linalg.det(u) ** 0.25


def makhlin_invariants(g, atol=1e-10):
    """Local invariants of a unitary given in the computational basis.

    ``m = U_B^T U_B`` with ``U_B`` the gate in the magic basis, then
    ``g1 + i g2 = tr(m)^2 / (16 det U)`` and
    ``g3 = (tr(m)^2 - tr(m^2)) / (4 det U)``.
    """
    u = np.asarray(g, dtype=complex)
    _check_unitary(u, atol)
    ub = to_bell_basis(_special(u))
    det = np.linalg.det(ub)
    m = ub.T @ ub
    tr = np.trace(m)
    g12 = tr ** 2 / (16.0 * det)
    g3 = (tr ** 2 - np.trace(m @ m)) / (4.0 * det)
    return LocalInvariants(float(g12.real), float(g12.imag), float(g3.real))


def weyl_coordinates(g, atol=1e-10):
    """Weyl-chamber coordinates ``(c1, c2, c3)`` in units of pi."""
    u = np.asarray(g, dtype=complex)
    _check_unitary(u, atol)
    u = _special(u)
    u_tilde = _SYSY @ u.T @ _SYSY
    two_s = np.angle(np.linalg.eigvals(u @ u_tilde)) / np.pi
    # phases on the branch cut at -1/2 belong to the upper end
    two_s = np.where(two_s <= -0.5 + 1e-10, two_s + 2.0, two_s)
    s = np.sort(two_s / 2.0)[::-1]
    n = int(round(np.sum(s)))
    s = s - np.r_[np.ones(n), np.zeros(4 - n)]
    s = np.roll(s, -n)
    c1, c2, c3 = s[0] + s[1], s[0] + s[2], s[1] + s[2]
    if c3 < 0:
        c1, c3 = 1.0 - c1, -c3
    return float(c1), float(c2), float(c3)


def gate_concurrence(g, atol=1e-10):
    """Maximal concurrence the gate can create from a product state."""
    c = np.array(weyl_coordinates(g, atol))
    c1, c2, c3 = c
    if c1 + c2 >= 0.5 and c1 - c2 <= 0.5 and c2 + c3 <= 0.5:
        return 1.0
    shifted = np.roll(c, 1)
    return float(np.max(np.abs(np.sin(np.pi * np.concatenate([c - shifted, c + shifted])))))


def state_concurrence(psi):
    """Concurrence ``2 |ad - bc|`` of a normalized two-qubit pure state."""
    a, b, c, d = np.asarray(psi, dtype=complex)
    return float(2.0 * abs(a * d - b * c))


def von_neumann_entropy(state, mapping=LEVEL_TO_QUBITS, atol=1e-8):
    """Entanglement entropy (base 2) of a four-level state read as two qubits."""
    psi = np.asarray(state, dtype=complex)[:4]
    norm = np.linalg.norm(psi)
    if abs(norm - 1.0) > atol:
        raise ValueError(f"state norm {norm:.10f} deviates from 1")
    psi = (mapping @ psi).reshape(2, 2)
    rho_a = psi @ psi.conj().T
    w = np.linalg.eigvalsh(rho_a)
    w = w[w > 1e-300]
    return float(max(0.0, -np.sum(w * np.log2(w))))


def load_catalog(path=None):
    """Equivalence classes ``[(name, LocalInvariants), ...]`` from JSON."""
    if path is None:
        text = resources.files("itoqoc.data").joinpath("gate_classes.json").read_text()
    else:
        with open(path) as fh:
            text = fh.read()
    data = json.loads(text)
    out = []
    for entry in data["classes"]:
        out.append((entry["name"], LocalInvariants(*entry["g"])))
    return out


def catalog_gates(path=None):
    """Defining matrices of the catalog classes, keyed by name."""
    if path is None:
        text = resources.files("itoqoc.data").joinpath("gate_classes.json").read_text()
    else:
        with open(path) as fh:
            text = fh.read()
    gates = {}
    for entry in json.loads(text)["classes"]:
        re, im = np.asarray(entry["gate"]["re"]), np.asarray(entry["gate"]["im"])
        gates[entry["name"]] = re + 1j * im
    return gates


def classify(inv, catalog=None, radius=0.1):
    """Name of the nearest catalog class within ``radius``, else ``None``."""
    catalog = load_catalog() if catalog is None else catalog
    target = inv.as_array() if isinstance(inv, LocalInvariants) else np.asarray(inv, float)
    best, best_d = None, np.inf
    for name, ref in catalog:
        d = ref.distance(target)
        if d <= radius and d < best_d:
            best, best_d = name, d
    return best


def haar_random(dim=4, seed=None):
    """Haar-distributed unitary (QR of a complex Ginibre matrix, phase fixed)."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    z = (rng.standard_normal((dim, dim)) + 1j * rng.standard_normal((dim, dim))) / np.sqrt(2.0)
    q, r = np.linalg.qr(z)
    d = np.diag(r)
    return q * (d / np.abs(d))[None, :]
