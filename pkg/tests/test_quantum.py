import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, strategies as st

from itoqoc.quantum import (
    DimensionError,
    LindbladSpec,
    build_liouvillian,
    commutator_superop,
    devectorize,
    dissipator_superop,
    expectation,
    hilbert_generator,
    is_hermitian,
    ket,
    liouville_generator,
    populations,
    projector,
    vectorize,
)


def _herm(rng, n):
    a = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
    return a + a.conj().T


def _density(rng, n):
    a = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
    rho = a @ a.conj().T
    return rho / np.trace(rho)


@given(st.integers(1, 16), st.integers(0, 2 ** 32 - 1))
def test_vectorize_round_trip_exact(n, seed):
    rho = _density(np.random.default_rng(seed), n)
    assert np.array_equal(devectorize(vectorize(rho)), rho)


def test_vectorize_is_column_stacking():
    a = np.arange(9.0).reshape(3, 3)
    assert np.array_equal(vectorize(a), a.T.ravel())


@given(st.integers(2, 6), st.integers(0, 2 ** 32 - 1))
def test_kron_identity_matches_column_stacking(n, seed):
    rng = np.random.default_rng(seed)
    a, x, b = (rng.standard_normal((n, n)) for _ in range(3))
    assert np.allclose(vectorize(a @ x @ b), np.kron(b.T, a) @ vectorize(x), atol=1e-12)


def test_vectorize_rejects_non_square():
    with pytest.raises(DimensionError):
        vectorize(np.zeros((2, 3)))
    with pytest.raises(DimensionError):
        devectorize(np.zeros(5))


def test_commutator_superop_matches_direct():
    rng = np.random.default_rng(0)
    h, rho = _herm(rng, 4), _density(rng, 4)
    direct = -1j * (h @ rho - rho @ h)
    assert np.allclose(commutator_superop(h) @ vectorize(rho), vectorize(direct), atol=1e-12)


def test_dissipator_matches_direct():
    rng = np.random.default_rng(1)
    lop = rng.standard_normal((4, 4)) + 1j * rng.standard_normal((4, 4))
    rho = _density(rng, 4)
    ldl = lop.conj().T @ lop
    direct = 0.3 * (lop @ rho @ lop.conj().T - 0.5 * (ldl @ rho + rho @ ldl))
    assert np.allclose(dissipator_superop(lop, 0.3) @ vectorize(rho), vectorize(direct),
                       atol=1e-12)


def test_liouvillian_preserves_trace_and_hermiticity():
    rng = np.random.default_rng(2)
    n = 5
    lops = [(rng.standard_normal((n, n)) + 0j, 0.2), (np.diag(np.arange(n)) + 0j, 0.1)]
    liou = build_liouvillian(LindbladSpec(lambda t: _herm(rng, n), lops), 0.0)
    rho = _density(rng, n)
    out = scipy.linalg.expm(liou * 0.7) @ vectorize(rho)
    rho_t = devectorize(out)
    assert abs(np.trace(rho_t) - 1.0) < 1e-12
    assert is_hermitian(rho_t, 1e-12)
    assert np.min(np.linalg.eigvalsh(0.5 * (rho_t + rho_t.conj().T))) > -1e-12


def test_negative_rate_rejected():
    with pytest.raises(ValueError):
        LindbladSpec(lambda t: np.eye(2), [(np.eye(2), -0.1)])


def test_lindblad_dimension_mismatch():
    with pytest.raises(DimensionError):
        build_liouvillian(LindbladSpec(lambda t: np.eye(2), [(np.eye(3), 0.1)]), 0.0)


def test_hilbert_generator_is_anti_hermitian():
    rng = np.random.default_rng(3)
    gen = hilbert_generator(_herm(rng, 4), [(_herm(rng, 4), np.sin)])
    g = gen.at(0.3)
    assert gen.anti_hermitian
    assert np.allclose(g, -g.conj().T, atol=1e-14)


def test_generator_split_zero_at_midpoint():
    rng = np.random.default_rng(4)
    gen = hilbert_generator(_herm(rng, 3), [(_herm(rng, 3), np.cos)])
    g0, g_td = gen.split(0.4)
    assert np.array_equal(g_td(0.4), np.zeros((3, 3)))
    assert np.allclose(g0 + g_td(1.1), gen.at(1.1), atol=1e-14)


def test_generator_inhomogeneity_matches_split():
    rng = np.random.default_rng(5)
    gen = hilbert_generator(_herm(rng, 3), [(_herm(rng, 3), np.cos)])
    times = np.array([0.0, 0.2, 0.5])
    states = rng.standard_normal((3, 3, 2)) + 0j
    _, g_td = gen.split(0.25)
    ref = np.array([g_td(t) @ s for t, s in zip(times, states)])
    assert np.allclose(gen.inhomogeneity(times, states, 0.25), ref, atol=1e-14)


def test_liouville_generator_flags():
    h = np.diag([0.0, 1.0]) + 0j
    assert liouville_generator(h).anti_hermitian
    assert not liouville_generator(h, lindblad_ops=[(np.eye(2), 0.1)]).anti_hermitian


def test_expectation_hilbert_and_liouville_agree():
    rng = np.random.default_rng(6)
    op = _herm(rng, 4)
    psi = rng.standard_normal(4) + 1j * rng.standard_normal(4)
    psi /= np.linalg.norm(psi)
    a = expectation(op, psi)
    b = expectation(op, vectorize(projector(psi)))
    assert abs(a - b) < 1e-12


def test_expectation_dimension_mismatch():
    with pytest.raises(DimensionError):
        expectation(np.eye(3), np.ones(5))


def test_populations():
    psi = (ket(0, 3) + 1j * ket(2, 3)) / np.sqrt(2)
    assert np.allclose(populations(psi), [0.5, 0, 0.5])
    assert np.allclose(populations(vectorize(projector(psi)), liouville=True), [0.5, 0, 0.5])
