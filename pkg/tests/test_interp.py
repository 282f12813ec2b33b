import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from itoqoc.interp import (
    DOMAIN,
    capacity,
    cgl_nodes,
    conversion_matrix,
    divided_differences,
    interp_error_estimate,
    newton_to_monomial,
    test_point as off_node_point,
)

orders = st.integers(2, 16)
steps = st.floats(1e-3, 50.0)


def test_cgl_small_cases():
    assert np.array_equal(cgl_nodes(3, 2.0).nodes, [0.0, 1.0, 2.0])
    assert np.array_equal(cgl_nodes(2, 1.0).nodes, [0.0, 1.0])


def test_cgl_fig1_grid():
    dt = 100.0 / 900
    nodes = cgl_nodes(8, dt).nodes
    assert nodes[0] == 0.0 and nodes[-1] == dt
    gaps = np.diff(nodes)
    assert np.allclose(gaps, gaps[::-1], rtol=1e-12)
    assert gaps[0] < gaps[len(gaps) // 2]


@given(orders, steps)
def test_cgl_formula_and_order(m, dt):
    grid = cgl_nodes(m, dt)
    j = np.arange(m)
    ref = 0.5 * dt * (1 - np.cos(j * np.pi / (m - 1)))
    assert np.max(np.abs(grid.nodes - ref)) <= 4e-16 * dt
    assert grid.nodes[0] == 0.0 and grid.nodes[-1] == dt
    assert np.all(np.diff(grid.nodes) > 0)


def test_cgl_rejects_bad_input():
    with pytest.raises(ValueError):
        cgl_nodes(1, 1.0)
    with pytest.raises(ValueError):
        cgl_nodes(4, 0.0)


def test_scaled_domain_has_length_four():
    grid = cgl_nodes(7, 0.3)
    interp = divided_differences(np.zeros(7), grid)
    assert interp.scaled_nodes[-1] - interp.scaled_nodes[0] == pytest.approx(DOMAIN)
    assert interp.scaled_nodes[0] == pytest.approx(-2.0)
    # capacity of the CGL points on an interval of length 4 approaches 1
    assert 0.8 < capacity(cgl_nodes(16, DOMAIN).nodes) < 1.3


def test_constant_samples():
    grid = cgl_nodes(6, 0.5)
    c = np.array([1.0 - 2.0j, 3.0])
    interp = divided_differences(np.tile(c, (6, 1)), grid)
    assert np.allclose(interp.coeffs[0], c)
    assert np.all(interp.coeffs[1:] == 0)
    assert interp_error_estimate(interp, grid.dt) == 0.0


def test_line_reproduced_off_node():
    grid = cgl_nodes(5, 0.8)
    interp = divided_differences(grid.nodes.copy(), grid)
    tau = np.random.default_rng(0).uniform(0, 0.8, 50)
    assert np.allclose(interp(tau), tau, atol=1e-15)


@given(orders, steps, st.integers(0, 2 ** 32 - 1))
def test_polynomials_reproduced(m, dt, seed):
    rng = np.random.default_rng(seed)
    coeffs = rng.standard_normal(m)
    u = lambda tau: np.polynomial.polynomial.polyval(np.asarray(tau) / dt, coeffs)  # noqa: E731
    grid = cgl_nodes(m, dt)
    interp = divided_differences(u(grid.nodes), grid)
    tau = rng.uniform(0, dt, 40)
    scale = np.sum(np.abs(coeffs))
    assert np.max(np.abs(interp(tau) - u(tau))) <= 1e-12 * scale * 4 ** max(m - 8, 0)


def test_random_degree5_horner_oracle():
    rng = np.random.default_rng(7)
    coeffs = rng.standard_normal(6)
    grid = cgl_nodes(6, 1.3)
    f = lambda t: np.polyval(coeffs, t)  # noqa: E731
    interp = divided_differences(f(grid.nodes), grid)
    tau = rng.uniform(0, 1.3, 30)
    assert np.max(np.abs(interp(tau) - f(tau))) <= 1e-12 * np.max(np.abs(f(tau)))


def test_vector_samples_componentwise():
    rng = np.random.default_rng(8)
    grid = cgl_nodes(5, 0.4)
    samples = rng.standard_normal((5, 3, 2)) + 1j * rng.standard_normal((5, 3, 2))
    joint = divided_differences(samples, grid)
    single = divided_differences(samples[:, 1, 0], grid)
    assert np.allclose(joint.coeffs[:, 1, 0], single.coeffs, atol=0)
    assert np.allclose(joint(grid.nodes), samples, rtol=1e-12, atol=1e-12)


def test_sample_count_mismatch():
    with pytest.raises(ValueError):
        divided_differences(np.zeros(4), cgl_nodes(5, 1.0))


def test_recursion_first_steps():
    grid = cgl_nodes(2, 1.0)
    conv = conversion_matrix(grid)
    x0 = grid.scale * grid.nodes[0]
    # q_{0,0} = 1 and R_1 = x - x_0 back-scaled to original time
    assert conv[0, 0] == 1.0
    assert conv[0, 1] == pytest.approx(-x0)
    assert conv[1, 1] == pytest.approx(grid.scale)


def _node_roundtrip(m, dt, rng):
    grid = cgl_nodes(m, dt)
    s = rng.standard_normal(m) + 1j * rng.standard_normal(m)
    poly = newton_to_monomial(divided_differences(s, grid))
    return float(np.max(np.abs(poly(grid.nodes) - s)) / np.max(np.abs(s))), poly, s


@pytest.mark.parametrize("m", range(4, 9))
def test_monomial_node_roundtrip(m):
    rng = np.random.default_rng(m)
    for dt in (0.003, 0.1, 1.0, 10.0):
        for _ in range(10):
            err, _, _ = _node_roundtrip(m, dt, rng)
            assert err <= 1e-11


@pytest.mark.parametrize("m", range(9, 13))
def test_monomial_roundtrip_at_rounding_floor(m):
    """For M >= 9 random data sits at the double-precision floor of the monomial form."""
    rng = np.random.default_rng(m)
    for dt in (0.003, 1.0):
        for _ in range(10):
            err, poly, s = _node_roundtrip(m, dt, rng)
            fact = np.array([math.factorial(k) for k in range(m)], float)
            floor = np.finfo(float).eps * np.sum(np.abs(poly.coeffs) * dt ** np.arange(m) / fact)
            assert err <= 10 * floor / np.max(np.abs(s))


def test_monomial_smooth_data_accurate_at_high_order():
    grid = cgl_nodes(12, 0.2)
    f = lambda t: np.exp(1j * 3.0 * t)  # noqa: E731
    poly = newton_to_monomial(divided_differences(f(grid.nodes), grid))
    tau = np.linspace(0, 0.2, 41)
    assert np.max(np.abs(poly(tau) - f(tau))) <= 1e-13
    # Taylor-like coefficients approach the derivatives (3i)^m at tau = 0
    assert np.allclose(poly.coeffs[:5], (3j) ** np.arange(5), rtol=1e-8)


@given(st.integers(2, 10), st.integers(0, 2 ** 32 - 1))
def test_newton_to_monomial_linear(m, seed):
    rng = np.random.default_rng(seed)
    grid = cgl_nodes(m, 0.7)
    a, b = rng.standard_normal(m), rng.standard_normal(m)
    ca = newton_to_monomial(divided_differences(a, grid)).coeffs
    cb = newton_to_monomial(divided_differences(b, grid)).coeffs
    cab = newton_to_monomial(divided_differences(2 * a - b, grid)).coeffs
    assert np.allclose(cab, 2 * ca - cb, rtol=1e-9, atol=1e-9 * np.max(np.abs(ca) + np.abs(cb)))


def test_translation_invariance():
    """Divided differences on shifted nodes agree with the unshifted ones."""
    grid = cgl_nodes(7, 0.5)
    f = lambda t: np.cos(2.0 * t) + 0.3 * t ** 2  # noqa: E731
    t0 = 12.3
    here = divided_differences(f(t0 + grid.nodes), grid)
    poly = newton_to_monomial(here)
    tau = np.linspace(0, 0.5, 11)
    assert np.max(np.abs(poly(tau) - f(t0 + tau))) <= 1e-6


def test_error_estimate_decreases_with_order():
    dt, w = 1.0, 2.0
    est = {}
    for m in (4, 8):
        grid = cgl_nodes(m, dt)
        s_t = np.sin(w * off_node_point(grid))
        interp = divided_differences(np.sin(w * grid.nodes), grid, test_sample=s_t)
        est[m] = interp_error_estimate(interp, dt)
        # compare against the dense-grid maximum error
        tau = np.linspace(0, dt, 2001)
        true = np.max(np.abs(interp(tau) - np.sin(w * tau))) * dt
        assert est[m] <= 10 * true + 1e-16
    assert est[8] < est[4] / 10


def test_error_estimate_exact_for_polynomials():
    grid = cgl_nodes(6, 0.9)
    f = lambda t: 1 + t - 2 * t ** 3 + t ** 5  # noqa: E731
    interp = divided_differences(f(grid.nodes), grid, test_sample=f(off_node_point(grid)))
    assert interp_error_estimate(interp, grid.dt) <= 1e-12 * np.linalg.norm(f(grid.nodes))
