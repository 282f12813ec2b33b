"""Local time grids and Newton interpolation of vector-valued samples.

Within one time step ``[t_n, t_n + dt]`` the inhomogeneity is sampled at
Chebyshev-Gauss-Lobatto offsets, interpolated by Newton divided differences
on a domain of length 4 (capacity 1, which keeps the divided-difference
denominators of order one), and finally re-expanded in the Taylor-like basis
``sum_m s_m tau**m / m!`` that the Duhamel solution consumes.
"""
from dataclasses import dataclass
import functools
from typing import Optional

import numpy as np

__all__ = [
    "LocalGrid",
    "NewtonInterpolant",
    "MonomialPoly",
    "cgl_nodes",
    "divided_differences",
    "newton_to_monomial",
    "conversion_matrix",
    "interp_error_estimate",
    "capacity",
    "test_point",
]

#: Length of the scaled interpolation domain.
DOMAIN = 4.0


@dataclass(frozen=True)
class LocalGrid:
    m_order: int
    dt: float
    nodes: np.ndarray

    @property
    def scale(self):
        return DOMAIN / self.dt


def cgl_nodes(m_order, dt):
    """Chebyshev-Gauss-Lobatto offsets ``tau_j`` in ``[0, dt]``.

    >>> cgl_nodes(3, 2.0).nodes
    array([0., 1., 2.])
    """
    if m_order < 2:
        raise ValueError(f"need at least two nodes, got M={m_order}")
    if not dt > 0:
        raise ValueError(f"time step must be positive, got {dt}")
    j = np.arange(m_order)
    nodes = 0.5 * dt * (1.0 - np.cos(j * np.pi / (m_order - 1)))
    # exact endpoints and mirror symmetry tau_j + tau_{M+1-j} = dt
    nodes[0], nodes[-1] = 0.0, dt
    half = m_order // 2
    nodes[m_order - half:] = dt - nodes[:half][::-1]
    if m_order % 2:
        nodes[half] = 0.5 * dt
    return LocalGrid(m_order, float(dt), nodes)


def capacity(points):
    """Geometric mean distance of ``points`` from their center."""
    points = np.asarray(points, dtype=float)
    center = 0.5 * (points.min() + points.max())
    return float(np.exp(np.mean(np.log(np.abs(points - center)))))


def test_point(grid):
    """Off-node point (midpoint of a central gap) for error estimation."""
    k = (grid.m_order - 1) // 2
    return 0.5 * (grid.nodes[k] + grid.nodes[k + 1])


@dataclass
class NewtonInterpolant:
    """Newton form ``sum_n a_n prod_{i<n} (x - x_i)`` on the scaled domain.

    ``x = scale * (tau - dt/2)`` maps the step onto ``[-2, 2]``. ``coeffs``
    has shape ``(M,) + value_shape``. If an extra sample at an off-node point
    was supplied, it is kept for the interpolation-error estimate.
    """

    grid: LocalGrid
    scaled_nodes: np.ndarray
    coeffs: np.ndarray
    test_tau: Optional[float] = None
    test_value: Optional[np.ndarray] = None

    @property
    def scale(self):
        return self.grid.scale

    def __call__(self, tau):
        x = self.scale * (np.asarray(tau, dtype=float) - 0.5 * self.grid.dt)
        # Horner scheme in the Newton basis
        out = np.multiply.outer(np.ones_like(x), self.coeffs[-1])
        for n in range(len(self.coeffs) - 2, -1, -1):
            out = out * _expand(x - self.scaled_nodes[n], out.ndim) + self.coeffs[n]
        return out


def _expand(x, ndim):
    x = np.asarray(x)
    return x.reshape(x.shape + (1,) * (ndim - x.ndim))


def divided_differences(samples, grid, test_sample=None):
    """Newton coefficients of the interpolant through ``samples`` at ``grid``.

    Parameters
    ----------
    samples : array, shape (M, ...)
        One (possibly vector-valued) sample per node.
    grid : LocalGrid
    test_sample : array, optional
        Value at :func:`test_point`, stored for :func:`interp_error_estimate`.
    """
    samples = np.asarray(samples)
    if samples.shape[0] != grid.m_order:
        raise ValueError(
            f"expected {grid.m_order} samples, got {samples.shape[0]}"
        )
    x = grid.scale * (grid.nodes - 0.5 * grid.dt)
    if not np.all(np.diff(x) > 0):
        raise ValueError("interpolation nodes must be distinct and increasing")
    a = samples.astype(np.result_type(samples, float), copy=True)
    m = grid.m_order
    for level in range(1, m):
        denom = x[level:] - x[:-level]
        a[level:] = (a[level:] - a[level - 1:-1]) / _expand(denom, a.ndim)
    test_tau = None if test_sample is None else test_point(grid)
    return NewtonInterpolant(grid, x, a, test_tau, test_sample)


@dataclass
class MonomialPoly:
    """Taylor-like polynomial ``sum_m coeffs[m] tau**m / m!`` in unscaled time."""

    coeffs: np.ndarray

    def __call__(self, tau):
        tau = np.asarray(tau, dtype=float)
        out = np.multiply.outer(np.zeros_like(tau), self.coeffs[0]).astype(self.coeffs.dtype)
        for m in range(len(self.coeffs) - 1, -1, -1):
            out = out * _expand(tau, out.ndim) / (m + 1) + self.coeffs[m]
        return out


def conversion_matrix(grid):
    """Matrix ``C`` with ``s_m = sum_n C[m, n] a_n`` (Newton to Taylor-like).

    Built from the recursion for ``q_{n,m}``, the monomial expansion of the
    Newton basis polynomials, in the start-anchored scaled variable
    ``x' = scale * tau`` (the Duhamel solution expands around ``tau = 0``),
    followed by the back-scaling ``scale**m``. Divided differences are
    translation invariant, so they may be computed on the centered domain.
    """
    return _conversion(grid.m_order, grid.scale, tuple(grid.nodes))


@functools.lru_cache(maxsize=256)
def _conversion(m_order, scale, nodes):
    x = scale * np.asarray(nodes)
    q = np.zeros((m_order, m_order))
    q[0, 0] = 1.0
    for n in range(m_order - 1):
        q[n + 1, 0] = -x[n] * q[n, 0]
        for m in range(1, n + 1):
            q[n + 1, m] = m * q[n, m - 1] - x[n] * q[n, m]
        q[n + 1, n + 1] = (n + 1) * q[n, n]
    out = q.T * (scale ** np.arange(m_order))[:, None]
    out.setflags(write=False)
    return out


def newton_to_monomial(interp):
    conv = conversion_matrix(interp.grid)
    coeffs = np.tensordot(conv, interp.coeffs, axes=(1, 0))
    return MonomialPoly(coeffs)


def interp_error_estimate(interp, dt):
    """Estimated interpolation error ``eps_M = ||Delta s|| * dt``.

    With an off-node test sample, ``||Delta s||`` is the observed deviation of
    the interpolant there. Without one, the size of the highest Newton term
    ``|a_{M-1}| * max |prod_i (x - x_i)|`` over the domain is used.
    """
    if interp.test_value is not None:
        delta = interp(interp.test_tau) - interp.test_value
        return float(np.max(np.abs(delta), initial=0.0)) * dt
    x = np.linspace(-DOMAIN / 2, DOMAIN / 2, 257)
    basis = np.prod(x[:, None] - interp.scaled_nodes[None, :-1], axis=1)
    top = np.max(np.abs(interp.coeffs[-1]), initial=0.0)
    return float(top * np.max(np.abs(basis))) * dt
