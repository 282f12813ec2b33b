"""Piecewise-constant and iteratively time-ordered (semi-global) propagators.

Both propagators solve ``du/dt = G(t) u`` on a uniform global grid. The
semi-global step splits ``G = G0 + G_td`` with ``G0 = G(t_mid)``, treats
``s(t) = G_td(t) u(t)`` as an inhomogeneity, and iterates the Duhamel
solution

    u(tau) = f_M(G0, tau) v_M + sum_{m<M} tau**m / m! v_m,
    v_0 = u(t_n),  v_m = G0 v_{m-1} + s_{m-1},

until the end-of-step state stops changing. ``s_m`` are the Taylor-like
coefficients of the polynomial interpolant of ``s`` on CGL nodes.

Functions of ``G0`` are applied through small kernel objects. The default
``"chebyshev"`` kernel expands ``f_M(-i lambda, tau)`` in Chebyshev
polynomials of ``i G0`` on a real interval bounding its spectrum; it works
for anti-Hermitian generators and for weakly dissipative Liouvillians, whose
spectra sit close to that interval. ``"eig"`` diagonalizes ``G0``;
``"dense"`` uses augmented matrix exponentials and serves as an oracle.
"""
from dataclasses import dataclass, field, replace
from enum import Enum
from functools import lru_cache
import math
import warnings

import numpy as np
import scipy.fft
import scipy.linalg

from .interp import (
    LocalGrid,
    cgl_nodes,
    conversion_matrix,
    divided_differences,
    interp_error_estimate,
    test_point,
)
from .quantum import expectation

__all__ = [
    "Guess",
    "ItoConfig",
    "PwcConfig",
    "ItoWorkspace",
    "StepReport",
    "Trajectory",
    "Observer",
    "MaxIterExceeded",
    "NonFiniteError",
    "f_m_scalar",
    "f_m_apply",
    "expm_apply",
    "make_kernel",
    "pwc_step",
    "hermitian_step_unitaries",
    "ito_step",
    "ito_solve",
    "propagate",
]

MAX_ORDER = 16


class MaxIterExceeded(RuntimeError):
    """Self-consistent iteration did not reach ``tol_iter``.

    Carries the last iterate and its report so callers can continue.
    """

    def __init__(self, message, state=None, report=None):
        super().__init__(message)
        self.state = state
        self.report = report


class NonFiniteError(FloatingPointError):
    pass


def _check_finite(a, what):
    if not np.all(np.isfinite(a)):
        raise NonFiniteError(f"non-finite entries in {what}")


# ---------------------------------------------------------------------------
# scalar f_M

_N_SERIES = 64


def f_m_scalar(z, m_order, tau):
    """``f_M(z, tau) = (exp(z tau) - sum_{j<M} (z tau)**j / j!) / z**M``.

    Uses ``tau**M * sum_j (z tau)**j / (j+M)!`` for ``|z tau| < max(M, 1)``,
    where the subtraction would cancel, and the closed form elsewhere.
    Broadcasts over ``z`` and ``tau``.
    """
    z, tau = np.broadcast_arrays(np.asarray(z, dtype=complex), np.asarray(tau, dtype=float))
    x = z * tau
    if m_order == 0:
        return np.exp(x)
    out = np.empty(x.shape, dtype=complex)
    small = np.abs(x) < max(m_order, 1)
    if np.any(small):
        xs = x[small]
        acc = np.zeros_like(xs)
        for j in range(_N_SERIES - 1, -1, -1):
            acc = acc * xs + 1.0 / math.factorial(j + m_order)
        out[small] = acc * tau[small] ** m_order
    big = ~small
    if np.any(big):
        xb, zb = x[big], z[big]
        head = np.zeros_like(xb)
        term = np.ones_like(xb)
        for j in range(m_order):
            head += term
            term = term * xb / (j + 1)
        out[big] = (np.exp(xb) - head) / zb ** m_order
    return out


# ---------------------------------------------------------------------------
# kernels applying f_M(G0, tau) to vectors


def _as_batch(v):
    v = np.asarray(v, dtype=complex)
    return v[:, None] if v.ndim == 1 else v


class _Kernel:
    """Applies ``f_m(G0, taus[i]) v`` for a fixed ``G0`` and offsets ``taus``."""

    def __init__(self, g0, taus):
        self.g0 = g0
        self.taus = np.asarray(taus, dtype=float)
        self.matvecs = 0

    def apply(self, v, m_order, idx):  # pragma: no cover - interface
        raise NotImplementedError

    def residual(self, m_order, idx):
        """Relative truncation estimate of the last :meth:`apply`."""
        return 0.0


class DenseKernel(_Kernel):
    """Augmented matrix exponential; reference quality, expensive."""

    def apply(self, v, m_order, idx):
        v = _as_batch(v)
        d, p = v.shape
        out = np.empty((len(idx), d, p), dtype=complex)
        for i, k in enumerate(idx):
            tau = self.taus[k]
            if m_order == 0:
                out[i] = scipy.linalg.expm(self.g0 * tau) @ v
                continue
            for col in range(p):
                aug = np.zeros((d + m_order, d + m_order), dtype=complex)
                aug[:d, :d] = self.g0 * tau
                aug[:d, d] = v[:, col]
                aug[d:, d:] = np.eye(m_order, k=1)
                out[i, :, col] = scipy.linalg.expm(aug)[:d, -1] * tau ** m_order
        return out


class EigKernel(_Kernel):
    """Spectral decomposition of ``G0`` (``eigh`` when anti-Hermitian)."""

    def __init__(self, g0, taus, anti_hermitian=False):
        super().__init__(g0, taus)
        if anti_hermitian:
            w, vecs = np.linalg.eigh(1j * g0)
            self.evals = -1j * w
            self.vecs = vecs
            self._inv = vecs.conj().T
        else:
            self.evals, self.vecs = np.linalg.eig(g0)
            self._inv = np.linalg.inv(self.vecs)
        self._fcache = {}

    def _fvals(self, m_order, idx):
        key = (m_order, tuple(idx))
        if key not in self._fcache:
            self._fcache[key] = f_m_scalar(
                self.evals[None, :], m_order, self.taus[list(idx)][:, None]
            )
        return self._fcache[key]

    def apply(self, v, m_order, idx):
        v = _as_batch(v)
        coef = self._inv @ v
        f = self._fvals(m_order, idx)
        return np.einsum("ij,tj,jp->tip", self.vecs, f, coef)


class SeriesKernel(_Kernel):
    """Power series in ``G0 tau``; valid when ``||G0|| tau < 1``."""

    def __init__(self, g0, taus, norm=None):
        super().__init__(g0, taus)
        self.norm = np.max(np.sum(np.abs(g0), axis=1)) if norm is None else norm
        self._n_terms = {}
        self._last = None

    def apply(self, v, m_order, idx):
        v = _as_batch(v)
        taus = self.taus[list(idx)]
        x = self.norm * np.max(taus, initial=0.0)
        n = 1
        while x ** n / math.factorial(n + m_order) > 1e-17 / math.factorial(m_order) and n < 60:
            n += 1
        powers = [v]
        for _ in range(n):
            powers.append(self.g0 @ powers[-1])
        self.matvecs += n
        w = np.array(powers)
        j = np.arange(n + 1)
        fact = np.array([math.factorial(k + m_order) for k in j], dtype=float)
        weights = taus[:, None] ** (j + m_order)[None, :] / fact[None, :]
        return np.tensordot(weights, w, axes=(1, 0))


def gershgorin_interval(h):
    """Real interval containing the real parts of the spectrum of ``h``."""
    d = np.diag(h)
    radius = np.sum(np.abs(h), axis=1) - np.abs(d)
    return float(np.min(d.real - radius)), float(np.max(d.real + radius))


def _snap(lo, hi):
    # outward rounding so nearby generators share cached coefficients
    q = 2.0 ** (math.floor(math.log2(max(hi - lo, 1e-3))) - 3)
    lo_s = math.floor(lo / q) * q
    hi_s = math.ceil(hi / q) * q
    if hi_s <= lo_s:
        hi_s = lo_s + q
    return lo_s, hi_s


def _cutoff(coeffs, scale, rtol):
    """Number of leading columns needed before every row sinks below ``rtol``.

    ``scale`` holds the sup norm of each expanded function; rounding noise in
    the coefficients sits at about ``eps * scale``.
    """
    mag = np.abs(coeffs)
    scale = np.asarray(scale)[:, None]
    rel = np.max(mag / np.where(scale > 0, scale, 1.0), axis=0)
    tail = np.maximum.accumulate(rel[::-1])[::-1]
    below = np.nonzero(tail < rtol)[0]
    return int(below[0]) if below.size else None


#: Relative coefficient size treated as converged (the DCT noise floor).
CHEB_RTOL = 5e-16


@lru_cache(maxsize=512)
def chebyshev_coefficients(lo, hi, m_order, taus, rtol=CHEB_RTOL):
    """Chebyshev coefficients of ``lambda -> f_M(-i lambda, tau)`` on ``[lo, hi]``.

    Returns a read-only array of shape ``(len(taus), K)``, truncated where all
    rows have decayed below ``rtol`` relative to the sup norm of the function,
    and the sup norms themselves.
    """
    taus = np.asarray(taus, dtype=float)
    c, r = 0.5 * (hi + lo), 0.5 * (hi - lo)
    n = 2 * int(r * np.max(taus, initial=0.0)) + 64
    while True:
        x = np.cos(np.pi * (np.arange(n) + 0.5) / n)
        vals = f_m_scalar(-1j * (c + r * x)[None, :], m_order, taus[:, None])
        coeffs = (scipy.fft.dct(vals.real, type=2, axis=1)
                  + 1j * scipy.fft.dct(vals.imag, type=2, axis=1)) / n
        coeffs[:, 0] *= 0.5
        scale = np.max(np.abs(vals), axis=1)
        k = _cutoff(coeffs, scale, rtol)
        if k is not None and k < n - 16:
            break
        if n > 1 << 16:
            raise RuntimeError("Chebyshev expansion failed to converge")
        n *= 2
    out = coeffs[:, : max(k, 1)].copy()
    out.setflags(write=False)
    scale.setflags(write=False)
    return out, scale


@lru_cache(maxsize=512)
def _trimmed(lo, hi, m_order, taus, idx):
    """Rows ``idx`` of the expansion, cut at :data:`CHEB_RTOL`, and their tail."""
    coeffs, scale = chebyshev_coefficients(lo, hi, m_order, taus)
    idx = list(idx)
    coeffs, scale = coeffs[idx], scale[idx]
    n = max(_cutoff(coeffs, scale, CHEB_RTOL) or coeffs.shape[1], 1)
    tail = float(np.max(np.abs(coeffs[:, n - 1]) / np.where(scale > 0, scale, 1.0)))
    out = np.ascontiguousarray(coeffs[:, :n])
    out.setflags(write=False)
    return out, tail


def _same_buffer(a, b):
    # views of one array are distinct objects; compare their memory instead
    return (a is not None and a.shape == b.shape and a.strides == b.strides
            and a.__array_interface__["data"][0] == b.__array_interface__["data"][0])


class ChebyshevKernel(_Kernel):
    """Chebyshev expansion in ``H = i G0`` over a Gershgorin bound.

    The recursion vectors ``T_k(H') v`` of the most recently used vector are
    kept, so later requests for other offsets only extend the recursion.
    """

    def __init__(self, g0, taus, bounds=None):
        super().__init__(g0, taus)
        lo, hi = gershgorin_interval(1j * g0) if bounds is None else bounds
        self.bounds = _snap(lo, hi)
        self.center = 0.5 * (self.bounds[0] + self.bounds[1])
        self.radius = 0.5 * (self.bounds[1] - self.bounds[0])
        # h2 = 2 (i G0 - center) / radius, so T_{k+1} = h2 T_k - T_{k-1}
        self._h2 = self.g0 * (2j / self.radius)
        self._h2.flat[:: self._h2.shape[0] + 1] -= 2.0 * self.center / self.radius
        self._taus_key = tuple(float(t) for t in self.taus)
        self._vec = None
        self._buf = None
        self._len = 0
        self._last_tail = 0.0

    def coefficients(self, m_order):
        return chebyshev_coefficients(*self.bounds, m_order, self._taus_key)

    def _extend(self, v, n):
        if not _same_buffer(self._vec, v):
            self._vec = v
            self._buf = np.empty((max(n, 16),) + v.shape, dtype=complex)
            self._buf[0] = v
            self._len = 1
        if n > self._buf.shape[0]:
            grown = np.empty((2 * n,) + v.shape, dtype=complex)
            grown[: self._len] = self._buf[: self._len]
            self._buf = grown
        buf = self._buf
        while self._len < n:
            k = self._len
            if k == 1:
                np.matmul(self._h2, buf[0], out=buf[1])
                buf[1] *= 0.5
            else:
                np.matmul(self._h2, buf[k - 1], out=buf[k])
                buf[k] -= buf[k - 2]
            self.matvecs += 1
            self._len += 1
        return buf[:n]

    def apply(self, v, m_order, idx):
        v = _as_batch(v)
        coeffs, tail = _trimmed(*self.bounds, m_order, self._taus_key, tuple(idx))
        n = coeffs.shape[1]
        tk = self._extend(v, n)
        self._last_tail = tail
        out = coeffs @ tk.reshape(n, -1)
        return out.reshape((len(coeffs),) + v.shape)

    def residual(self, m_order, idx):
        return self._last_tail


def make_kernel(g0, taus, kind="chebyshev", anti_hermitian=False):
    """Kernel applying functions of ``g0`` at the offsets ``taus``.

    ``kind`` is one of ``"chebyshev"``, ``"eig"``, ``"dense"``, ``"series"``
    or ``"auto"``. ``"auto"`` picks the power series when
    ``max_row_sum(g0) * max(taus) < 1`` and the Chebyshev kernel otherwise.
    """
    g0 = np.asarray(g0, dtype=complex)
    if kind == "auto":
        norm = np.max(np.sum(np.abs(g0), axis=1))
        kind = "series" if norm * np.max(taus, initial=0.0) < 1.0 else "chebyshev"
    if kind == "chebyshev":
        return ChebyshevKernel(g0, taus)
    if kind == "eig":
        return EigKernel(g0, taus, anti_hermitian)
    if kind == "dense":
        return DenseKernel(g0, taus)
    if kind == "series":
        return SeriesKernel(g0, taus)
    raise ValueError(f"unknown kernel {kind!r}")


def expm_apply(g0, dt, v, backend="dense"):
    """``exp(G0 dt) v``.

    ``backend="dense"`` uses scaling and squaring on ``G0 dt``; the other
    kernel names of :func:`make_kernel` are accepted as well.
    """
    g0 = np.asarray(g0, dtype=complex)
    _check_finite(g0, "generator")
    v = np.asarray(v, dtype=complex)
    if backend == "dense":
        return scipy.linalg.expm(g0 * dt) @ v
    kern = make_kernel(g0, (dt,), backend)
    out = kern.apply(v, 0, [0])[0]
    return out[:, 0] if v.ndim == 1 else out


def f_m_apply(g0, m_order, tau, v, method="auto"):
    """``f_M(G0, tau) v``.

    ``method="auto"`` uses the power series when ``||G0|| tau < 1`` (max row
    sum) and the dense augmented exponential otherwise.
    """
    if m_order < 0:
        raise ValueError("m_order must be non-negative")
    g0 = np.asarray(g0, dtype=complex)
    v = np.asarray(v, dtype=complex)
    if method == "auto":
        norm = np.max(np.sum(np.abs(g0), axis=1), initial=0.0)
        method = "series" if norm * tau < 1.0 else "dense"
    kern = make_kernel(g0, (tau,), method)
    out = kern.apply(v, m_order, [0])[0]
    return out[:, 0] if v.ndim == 1 else out


# ---------------------------------------------------------------------------
# configuration and bookkeeping


class Guess(str, Enum):
    CONSTANT = "constant"
    HOMOGENEOUS = "homogeneous"
    EXTRAPOLATE = "extrapolate"


@dataclass(frozen=True)
class ItoConfig:
    """Settings of the semi-global propagator.

    ``dt`` may be left ``None``; :func:`propagate` fills it in from the grid.
    """

    m_order: int = 8
    dt: float = None
    tol_iter: float = 1e-12
    max_iter: int = 20
    guess: Guess = Guess.EXTRAPOLATE
    kernel: str = "chebyshev"
    error_estimates: bool = True

    def __post_init__(self):
        if not 2 <= self.m_order <= MAX_ORDER:
            raise ValueError(f"m_order must lie in [2, {MAX_ORDER}], got {self.m_order}")
        if self.dt is not None and not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        object.__setattr__(self, "guess", Guess(self.guess))


@dataclass(frozen=True)
class PwcConfig:
    """Midpoint piecewise-constant stepping.

    ``backend``: ``"chebyshev"`` (default), ``"dense"`` (scaling and
    squaring), ``"eigh"`` (exact, Hermitian Hamiltonians only) or any
    :func:`make_kernel` kind.
    """

    backend: str = "chebyshev"


@dataclass
class StepReport:
    n_iter: int
    eps_iter: float
    eps_m: float = 0.0
    eps_fm: float = 0.0
    converged: bool = True
    matvecs: int = 0
    norm: str = "euclidean"
    history: list = field(default_factory=list)


@dataclass
class ItoWorkspace:
    """Per-propagation cache of the previous step, owned by one propagation."""

    v_vectors: np.ndarray = None
    s_monomial: object = None
    fm_cache: object = None
    last_report: StepReport = None
    dt: float = None


_GRID_CACHE = {}


def _step_grid(m_order, dt):
    key = (m_order, dt)
    if key not in _GRID_CACHE:
        grid = cgl_nodes(m_order, dt)
        taus = np.concatenate([grid.nodes, [test_point(grid)], dt + grid.nodes])
        _GRID_CACHE[key] = (grid, taus)
    return _GRID_CACHE[key]


@lru_cache(maxsize=256)
def _taylor_weights(taus, m_order):
    m = np.arange(m_order)
    fact = np.array([math.factorial(k) for k in m], dtype=float)
    w = np.asarray(taus, dtype=float)[:, None] ** m[None, :] / fact[None, :]
    w.setflags(write=False)
    return w


def _taylor_head(v, taus, m_order):
    """``sum_{m<M} tau**m / m! v_m`` for each offset; ``v`` has shape (M+1, D, P)."""
    w = _taylor_weights(tuple(float(t) for t in taus), m_order)
    return (w @ v[:m_order].reshape(m_order, -1)).reshape((len(w),) + v.shape[1:])


def _sample_to_monomial(grid):
    return _sample_to_monomial_cached(grid.m_order, grid.dt, tuple(grid.nodes))


@lru_cache(maxsize=256)
def _sample_to_monomial_cached(m_order, dt, nodes):
    """Matrix taking node samples to Taylor-like coefficients ``s_m``.

    Equal to divided differences followed by :func:`conversion_matrix`; both
    steps are linear, so one product serves the inner loop.
    """
    grid = LocalGrid(m_order, dt, np.asarray(nodes))
    eye = np.eye(m_order)
    newton = divided_differences(eye, grid).coeffs
    out = conversion_matrix(grid) @ newton
    out.setflags(write=False)
    return out


def _rel_change(new, old):
    num = np.linalg.norm(new - old, axis=0)
    den = np.linalg.norm(new, axis=0)
    return float(np.max(num / np.where(den > 0, den, 1.0)))


def ito_solve(g0, kernel, grid, u_n, source, guess_states, cfg,
              residual=None, zero_source=False, test_source=None):
    """Self-consistent Duhamel iteration on one interval.

    Parameters
    ----------
    g0 : (D, D) array
    kernel : kernel built for the offsets of :func:`_step_grid`
    grid : LocalGrid
    u_n : (D, P) array, state at the interval start
    source : callable
        ``source(states)`` maps node states ``(M, D, P)`` to inhomogeneity
        samples of the same shape. It may carry internal state (fields
        updated alongside the states).
    guess_states : (M, D, P) array, iterate ``k = 0`` at the nodes
    residual : callable, optional
        Extra convergence measure evaluated after each source call; the
        iteration stops only once it is also ``<= tol_iter``.
    zero_source : bool
        Declares the inhomogeneity identically zero, so one pass is exact.
    test_source : callable, optional
        ``test_source(tau, state)`` evaluates the inhomogeneity at an off-node
        offset, used for the interpolation-error estimate.

    Returns
    -------
    states : (M, D, P) node states of the final iterate
    v : (M+1, D, P) Taylor-like vectors
    report : StepReport
    """
    m_order = grid.m_order
    nodes = range(m_order)
    to_mono = _sample_to_monomial(grid)
    states = guess_states
    eps = np.inf
    extra = 0.0
    matvecs0 = kernel.matvecs
    converged = False
    history = []
    k = 0
    for k in range(1, cfg.max_iter + 1):
        s = source(states)
        extra = residual() if residual is not None else 0.0
        s_mono = (to_mono @ s.reshape(m_order, -1)).reshape(s.shape)
        v = np.empty((m_order + 1,) + u_n.shape, dtype=complex)
        v[0] = u_n
        for m in range(1, m_order + 1):
            v[m] = g0 @ v[m - 1] + s_mono[m - 1]
        new = kernel.apply(v[m_order], m_order, nodes)
        new += _taylor_head(v, grid.nodes, m_order)
        new[0] = u_n
        _check_finite(new[-1], "ITO iterate")
        eps = _rel_change(new[-1], states[-1])
        history.append(eps)
        states = new
        if zero_source or (eps <= cfg.tol_iter and extra <= cfg.tol_iter):
            converged = True
            break
    report = StepReport(
        n_iter=k,
        eps_iter=0.0 if zero_source else eps,
        converged=converged,
        matvecs=kernel.matvecs - matvecs0 + k * m_order,
        history=history,
    )
    if cfg.error_estimates and test_source is not None:
        tp = grid.m_order  # index of the test offset
        tau = kernel.taus[tp]
        u_t = kernel.apply(v[m_order], m_order, [tp])[0]
        u_t += _taylor_head(v, [tau], m_order)[0]
        s_t = test_source(tau, u_t)
        with_test = divided_differences(s, grid, test_sample=s_t)
        scale = max(np.max(np.linalg.norm(states[-1], axis=0)), 1e-300)
        report.eps_m = interp_error_estimate(with_test, grid.dt) / scale
        report.eps_fm = kernel.residual(m_order, nodes)
        report.matvecs = kernel.matvecs - matvecs0 + k * m_order + m_order
    return states, v, report


def _guess(cfg, grid, kernel, u_n, ws, dt):
    m_order = grid.m_order
    if cfg.guess is Guess.EXTRAPOLATE and ws is not None and ws.v_vectors is not None \
            and ws.dt == dt and ws.v_vectors.shape[1:] == u_n.shape:
        prev_kernel, v_prev = ws.fm_cache, ws.v_vectors
        idx = range(m_order + 1, 2 * m_order + 1)
        g = prev_kernel.apply(v_prev[m_order], m_order, idx)
        g += _taylor_head(v_prev, prev_kernel.taus[list(idx)], m_order)
        g[0] = u_n
        return g
    if cfg.guess is Guess.CONSTANT:
        return np.broadcast_to(u_n, (m_order,) + u_n.shape).copy()
    # homogeneous solution; also the first step of the extrapolating scheme
    g = kernel.apply(u_n, 0, range(m_order))
    g[0] = u_n
    return g


def ito_step(gen, t_n, cfg, state, ws=None):
    """Advance ``state`` from ``t_n`` to ``t_n + cfg.dt``.

    Returns ``(state, report)``. If the iteration hits ``max_iter`` the last
    iterate is returned with ``report.converged = False``.
    """
    if cfg.dt is None:
        raise ValueError("ItoConfig.dt must be set for a single step")
    dt = cfg.dt
    grid, taus = _step_grid(cfg.m_order, dt)
    t_mid = t_n + 0.5 * dt
    g0 = gen.at(t_mid)
    _check_finite(g0, "generator")
    squeeze = np.ndim(state) == 1
    u_n = _as_batch(state)
    kernel = make_kernel(g0, taus, cfg.kernel, gen.anti_hermitian)

    times = t_n + grid.nodes
    c_mid = gen.coefficients(t_mid)
    dc = gen.coefficients(times) - c_mid[:, None] if gen.ops else np.zeros((0, len(times)))
    zero = not np.any(dc)

    def source(states):
        out = np.zeros_like(states)
        for row, op in zip(dc, gen.ops):
            out += row[:, None, None] * np.matmul(op, states)
        return out

    def test_source(tau, u):
        d = gen.coefficients(t_n + tau) - c_mid
        out = np.zeros_like(u)
        for c, op in zip(d, gen.ops):
            out += c * (op @ u)
        return out

    guess = _guess(cfg, grid, kernel, u_n, ws, dt)
    states, v, report = ito_solve(
        g0, kernel, grid, u_n, source, guess, cfg,
        zero_source=zero, test_source=test_source,
    )
    report.matvecs += len(gen.ops) * grid.m_order * report.n_iter
    if ws is not None:
        ws.v_vectors = v
        ws.fm_cache = kernel
        ws.last_report = report
        ws.dt = dt
    out = states[-1]
    return (out[:, 0] if squeeze else out), report


def pwc_step(gen, t_mid, dt, state, backend="dense"):
    """``exp(G(t_mid) dt) state``."""
    return expm_apply(gen.at(t_mid), dt, state, backend)


def hermitian_step_unitaries(hams, dt, chunk=4096):
    """``exp(-i H_n dt)`` for a stack of Hermitian matrices, by batched ``eigh``."""
    hams = np.asarray(hams)
    out = np.empty(hams.shape, dtype=complex)
    for start in range(0, len(hams), chunk):
        w, v = np.linalg.eigh(hams[start:start + chunk])
        out[start:start + chunk] = (v * np.exp(-1j * dt * w)[:, None, :]) @ np.conj(
            np.swapaxes(v, 1, 2))
    return out


# ---------------------------------------------------------------------------
# global loop


def _global_bounds(gen, coeffs):
    """Gershgorin enclosure of ``i G(t)`` valid for every sampled coefficient set."""
    if not coeffs.size:
        return gershgorin_interval(1j * gen.drift)
    amp = np.max(np.abs(coeffs), axis=1)
    h0 = 1j * gen.drift
    d0 = np.diag(h0).real
    spread = np.sum(np.abs(h0), axis=1) - np.abs(np.diag(h0))
    for a, op in zip(amp, gen.ops):
        spread = spread + a * np.sum(np.abs(op), axis=1)
    return float(np.min(d0 - spread)), float(np.max(d0 + spread))


class _PwcStepper:
    """``exp(G0 dt) u`` for a stream of generators sharing ``dt``.

    The Chebyshev branch keeps one truncated coefficient vector per snapped
    spectral interval, so a step costs a Gershgorin bound plus the recursion.
    The ``"eigh"`` branch diagonalizes ``i G0`` and needs it Hermitian.
    """

    def __init__(self, dt, backend="chebyshev", bounds=None):
        self.dt = dt
        self.backend = backend
        self.matvecs = 0
        self.bounds = None if bounds is None else _snap(*bounds)
        self._table = {}

    def _coeffs(self, bounds):
        if bounds not in self._table:
            coeffs, scale = chebyshev_coefficients(*bounds, 0, (self.dt,))
            n = max(_cutoff(coeffs, scale, CHEB_RTOL) or coeffs.shape[1], 1)
            self._table[bounds] = coeffs[0, :n]
        return self._table[bounds]

    def __call__(self, g0, u):
        if self.backend == "dense":
            return scipy.linalg.expm(g0 * self.dt) @ u
        if self.backend == "eigh":
            # anti-Hermitian generators only: g0 = -i H
            w, v = np.linalg.eigh(1j * g0)
            coef = np.exp(-1j * self.dt * w)
            vu = v.conj().T @ u
            self.matvecs += 1
            return v @ (coef[:, None] * vu if u.ndim > 1 else coef * vu)
        if self.backend != "chebyshev":
            kern = make_kernel(g0, (self.dt,), self.backend)
            out = kern.apply(u, 0, [0])[0]
            self.matvecs += kern.matvecs
            return out[:, 0] if u.ndim == 1 else out
        if self.bounds is None:
            bounds = _snap(*gershgorin_interval(1j * g0))
        else:
            bounds = self.bounds
        a = self._coeffs(bounds)
        center = 0.5 * (bounds[0] + bounds[1])
        radius = 0.5 * (bounds[1] - bounds[0])
        # h2 = 2 (i G0 - center) / radius, so T_{k+1} = h2 T_k - T_{k-1}
        h2 = g0 * (2j / radius)
        h2.flat[:: h2.shape[0] + 1] -= 2.0 * center / radius
        out = a[0] * u
        if len(a) > 1:
            t_prev = u
            t_cur = 0.5 * (h2 @ u)
            out += a[1] * t_cur
            for ak in a[2:]:
                t_prev, t_cur = t_cur, h2 @ t_cur - t_prev
                out += ak * t_cur
        self.matvecs += len(a) - 1
        return out


@dataclass
class Observer:
    """Expectation value of ``op`` recorded every ``every`` grid steps."""

    op: np.ndarray
    every: int = 1
    name: str = ""


@dataclass
class Trajectory:
    times: np.ndarray
    final: np.ndarray
    observables: dict = field(default_factory=dict)
    sample_steps: dict = field(default_factory=dict)
    states: dict = field(default_factory=dict)
    reports: list = field(default_factory=list)
    matvecs: int = 0

    @property
    def mean_iterations(self):
        if not self.reports:
            return float("nan")
        return float(np.mean([r.n_iter for r in self.reports]))

    @property
    def all_converged(self):
        return all(r.converged for r in self.reports)


def _record(traj, observers, step, state, store_every):
    for k, obs in enumerate(observers):
        if step % obs.every == 0:
            name = obs.name or f"obs{k}"
            traj.observables.setdefault(name, []).append(expectation(obs.op, state))
            traj.sample_steps.setdefault(name, []).append(step)
    if store_every and step % store_every == 0:
        traj.states[step] = np.array(state, copy=True)


def propagate(gen, t0, t_end, n_steps, method, state0, observers=(),
              store_every=None, on_max_iter="warn"):
    """Propagate ``state0`` over ``n_steps`` uniform steps.

    Parameters
    ----------
    method : "pwc", PwcConfig or ItoConfig
    observers : sequence of Observer
        Observables are sampled at grid indices divisible by ``every``.
    store_every : int, optional
        Keep full states on every ``store_every``-th grid point.
    on_max_iter : {"warn", "raise", "ignore"}
    """
    if n_steps < 1:
        raise ValueError("n_steps must be at least 1")
    dt = (t_end - t0) / n_steps
    times = t0 + dt * np.arange(n_steps + 1)
    if isinstance(method, str):
        if method.lower() != "pwc":
            raise ValueError(f"unknown method {method!r}")
        method = PwcConfig()
    state = np.asarray(state0, dtype=complex).copy()
    traj = Trajectory(times=times, final=state)
    _record(traj, observers, 0, state, store_every)
    if isinstance(method, PwcConfig):
        mids = times[:-1] + 0.5 * dt
        coeffs = gen.coefficients(mids) if gen.ops else np.zeros((0, n_steps))
        stepper = _PwcStepper(dt, method.backend, _global_bounds(gen, coeffs))
        for n in range(n_steps):
            g0 = gen.drift.copy()
            for c, op in zip(coeffs[:, n], gen.ops):
                g0 += c * op
            state = stepper(g0, state)
            _record(traj, observers, n + 1, state, store_every)
        traj.matvecs += stepper.matvecs
    elif isinstance(method, ItoConfig):
        cfg = replace(method, dt=dt)
        ws = ItoWorkspace()
        for n in range(n_steps):
            state, report = ito_step(gen, times[n], cfg, state, ws)
            traj.reports.append(report)
            traj.matvecs += report.matvecs
            if not report.converged:
                msg = f"step {n}: eps_iter={report.eps_iter:.3e} after {report.n_iter} iterations"
                if on_max_iter == "raise":
                    raise MaxIterExceeded(msg, state, report)
                if on_max_iter == "warn":
                    warnings.warn(msg, RuntimeWarning, stacklevel=2)
            _record(traj, observers, n + 1, state, store_every)
    else:
        raise TypeError(f"unsupported method {method!r}")
    traj.final = state
    for name in traj.observables:
        traj.observables[name] = np.array(traj.observables[name])
        traj.sample_steps[name] = np.array(traj.sample_steps[name])
    return traj
