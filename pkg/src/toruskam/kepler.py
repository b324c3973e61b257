"""Kepler's equation and the planar Delaunay map.

Per body the map sends ``(ell, g, L, G)`` (mean anomaly, argument of
pericentre and their actions) to heliocentric ``(x1, x2, y1, y2)`` through

    e = sqrt(1 - (G/L)^2),  a = L^2/m^2,  b = m^2/L,  E = K(ell, e)
    q = a (cos E - e, (G/L) sin E),   p = b/(1 - e cos E) (-sin E, (G/L) cos E)
    x = R(g) q,  y = R(g) p.

First and second derivatives are exact: the (ell, L, G) part is obtained by
symbolic differentiation with the eccentric anomaly eliminated through
dE/dell = 1/(1 - e cos E) and dE/de = sin E/(1 - e cos E); the g part is the
rotation generator.  All array functions broadcast over leading axes and
accept complex inputs (complexified angles) where noted.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import DomainError

TWO_PI = 2 * np.pi


def _wrap(ell):
    """Reduce real angles to [-pi, pi); complex angles are reduced by their real part."""
    if np.iscomplexobj(ell):
        re = ell.real
        return ell - TWO_PI * np.floor((re + np.pi) / TWO_PI)
    return ell - TWO_PI * np.floor((ell + np.pi) / TWO_PI)


def _bisect(ell, e, iters=200):
    # E - e sin E - ell is increasing; root lies in [ell - e, ell + e]
    lo = ell - e
    hi = ell + e
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        f = mid - e * np.sin(mid) - ell
        lo = np.where(f < 0, mid, lo)
        hi = np.where(f < 0, hi, mid)
        if np.all(hi - lo <= 4 * np.finfo(float).eps * np.maximum(1.0, np.abs(mid))):
            break
    return 0.5 * (lo + hi)


def solve_kepler(ell, e, maxiter=50):
    """Eccentric anomaly E with E - e sin E = ell.

    Newton from E0 = ell + e sin ell on the reduced mean anomaly; entries that
    fail to converge in ``maxiter`` steps fall back to bisection (real input
    only).  E - ell is 2*pi-periodic in ell.
    """
    ell = np.asarray(ell)
    e = np.asarray(e)
    if np.any(np.abs(e) >= 1) or np.any(np.real(e) < 0):
        raise DomainError("eccentricity must lie in [0, 1)")
    complex_input = np.iscomplexobj(ell) or np.iscomplexobj(e)
    red = _wrap(ell)
    shift = ell - red
    # solve for d = E - ell_red so the returned E keeps full relative accuracy
    d = e * np.sin(red)
    tol = 2 * np.finfo(float).eps
    converged = np.zeros(np.broadcast(red, e).shape, dtype=bool)
    for _ in range(maxiter):
        E = red + d
        f = d - e * np.sin(E)
        fp = 1.0 - e * np.cos(E)
        step = f / fp
        d = d - step
        converged = np.abs(step) <= tol * np.maximum(1.0, np.abs(red + d))
        if np.all(converged):
            break
    # one polishing step once converged
    E = red + d
    d = d - (d - e * np.sin(E)) / (1.0 - e * np.cos(E))
    if not complex_input and not np.all(converged):
        bad = ~converged
        Eb = _bisect(np.broadcast_to(red, bad.shape)[bad], np.broadcast_to(e, bad.shape)[bad])
        d = np.array(d, copy=True)
        d[bad] = Eb - np.broadcast_to(red, bad.shape)[bad]
    return shift + red + d


# ---------------------------------------------------------------------------
# symbolic jets of the orbital-frame map (ell, L, G) -> (q1, q2, p1, p2)
# ---------------------------------------------------------------------------


@lru_cache(maxsize=None)
def _jet_functions():
    import sympy as sp

    ell, L, G, m, E = sp.symbols("ell L G m E")
    # e computed as sqrt((L-G)(L+G))/L to avoid cancellation for nearly circular orbits
    e = sp.sqrt((L - G) * (L + G)) / L
    c = G / L
    a = L**2 / m**2
    b = m**2 / L
    den = 1 - e * sp.cos(E)
    outs = [
        a * (sp.cos(E) - e),
        a * c * sp.sin(E),
        -b * sp.sin(E) / den,
        b * c * sp.cos(E) / den,
    ]
    # dE/dv for v in (ell, L, G), expressed in the symbols
    dE_de = sp.sin(E) / den
    dE = {
        ell: 1 / den,
        L: dE_de * sp.diff(e, L),
        G: dE_de * sp.diff(e, G),
    }
    vars3 = (ell, L, G)

    def total(expr, v):
        return sp.diff(expr, v) + sp.diff(expr, E) * dE[v]

    first = [[total(f, v) for v in vars3] for f in outs]
    second = [
        [[total(first[k][i], vars3[j]) for j in range(3)] for i in range(3)]
        for k in range(4)
    ]
    args = (ell, L, G, m, E)
    f0 = sp.lambdify(args, outs, modules="numpy", cse=True)
    flat1 = [first[k][i] for k in range(4) for i in range(3)]
    f1 = sp.lambdify(args, outs + flat1, modules="numpy", cse=True)
    flat2 = [second[k][i][j] for k in range(4) for i in range(3) for j in range(i, 3)]
    f2 = sp.lambdify(args, outs + flat1 + flat2, modules="numpy", cse=True)
    return f0, f1, f2


def _broadcast_stack(items, shape):
    return np.stack([np.broadcast_to(np.asarray(it), shape) for it in items], axis=-1)


def _eccentricity(L, G):
    return np.sqrt((L - G) * (L + G)) / L


def _check_domain(L, G, m, strict):
    if np.any(np.real(m) <= 0):
        raise DomainError("masses must be positive")
    if np.any(np.real(L) <= 0):
        raise DomainError("L must be positive")
    bad = np.abs(np.real(G)) > np.real(L) if not strict else np.abs(np.real(G)) >= np.real(L)
    if np.any(bad):
        raise DomainError("need |G| < L (elliptic, nondegenerate orbit)")


def orbital_jets(ell, L, G, m, order=0, strict=False):
    """Orbital-frame (q1, q2, p1, p2) and derivatives w.r.t. (ell, L, G).

    Returns ``(val, d1, d2)`` with shapes ``(..., 4)``, ``(..., 4, 3)``,
    ``(..., 4, 3, 3)``; higher orders are ``None`` when not requested.
    """
    ell, L, G, m = np.broadcast_arrays(*(np.asarray(v) for v in (ell, L, G, m)))
    _check_domain(L, G, m, strict)
    e = _eccentricity(L, G)
    E = solve_kepler(ell, e)
    shape = E.shape
    f0, f1, f2 = _jet_functions()
    if order == 0:
        return _broadcast_stack(f0(ell, L, G, m, E), shape), None, None
    if order == 1:
        out = f1(ell, L, G, m, E)
        val = _broadcast_stack(out[:4], shape)
        d1 = _broadcast_stack(out[4:], shape).reshape(shape + (4, 3))
        return val, d1, None
    out = f2(ell, L, G, m, E)
    val = _broadcast_stack(out[:4], shape)
    d1 = _broadcast_stack(out[4:16], shape).reshape(shape + (4, 3))
    upper = _broadcast_stack(out[16:], shape).reshape(shape + (4, 6))
    dtype = upper.dtype
    d2 = np.empty(shape + (4, 3, 3), dtype=dtype)
    idx = 0
    for i in range(3):
        for j in range(i, 3):
            d2[..., i, j] = upper[..., idx]
            d2[..., j, i] = upper[..., idx]
            idx += 1
    return val, d1, d2


def delaunay_jets(ell, g, L, G, m, order=1, strict=False):
    """Cartesian (x1, x2, y1, y2) of one body and derivatives w.r.t. (ell, g, L, G).

    Returns ``(val, jac, hess)`` with shapes ``(..., 4)``, ``(..., 4, 4)`` and
    ``(..., 4, 4, 4)`` (``hess[..., k, i, j]``); unrequested orders are ``None``.
    """
    qp, d1, d2 = orbital_jets(ell, L, G, m, order=order, strict=strict)
    g = np.broadcast_to(np.asarray(g), qp.shape[:-1])
    c, s = np.cos(g), np.sin(g)
    # S applied to orbital-frame vectors: (u1, u2) -> (-u2, u1) per pair
    def gen(v):
        w = np.empty_like(v)
        w[..., 0] = -v[..., 1]
        w[..., 1] = v[..., 0]
        w[..., 2] = -v[..., 3]
        w[..., 3] = v[..., 2]
        return w

    def rot(v):
        # v shape (..., 4) ; rotate pairs
        w = np.empty_like(v)
        w[..., 0] = c * v[..., 0] - s * v[..., 1]
        w[..., 1] = s * v[..., 0] + c * v[..., 1]
        w[..., 2] = c * v[..., 2] - s * v[..., 3]
        w[..., 3] = s * v[..., 2] + c * v[..., 3]
        return w

    val = rot(qp)
    if order == 0:
        return val, None, None
    dtype = np.result_type(val, d1)
    jac = np.empty(val.shape + (4,), dtype=dtype)
    # input order (ell, g, L, G); orbital jets are w.r.t. (ell, L, G)
    cols = {0: 0, 2: 1, 3: 2}
    for ci, oi in cols.items():
        jac[..., :, ci] = rot(d1[..., :, oi])
    jac[..., :, 1] = rot(gen(qp))
    if order == 1:
        return val, jac, None
    hess = np.empty(val.shape + (4, 4), dtype=np.result_type(dtype, d2))
    for ci, oi in cols.items():
        for cj, oj in cols.items():
            hess[..., :, ci, cj] = rot(d2[..., :, oi, oj])
        mixed = rot(gen(d1[..., :, oi]))
        hess[..., :, ci, 1] = mixed
        hess[..., :, 1, ci] = mixed
    hess[..., :, 1, 1] = -val
    return val, jac, hess


# ---------------------------------------------------------------------------
# point-level API
# ---------------------------------------------------------------------------


@dataclass
class DelaunayPoint:
    """Delaunay elements of n bodies; every field has shape ``(..., n)``."""

    ell: np.ndarray
    g: np.ndarray
    L: np.ndarray
    G: np.ndarray
    m: np.ndarray

    @property
    def eccentricity(self):
        return _eccentricity(np.asarray(self.L), np.asarray(self.G))

    @property
    def semimajor_axis(self):
        return np.asarray(self.L) ** 2 / np.asarray(self.m) ** 2


@dataclass
class CartesianPoint:
    """Heliocentric positions and momenta, shapes ``(..., n, 2)``."""

    x: np.ndarray
    y: np.ndarray


def delaunay_to_cartesian(d, strict=False):
    val, _, _ = delaunay_jets(d.ell, d.g, d.L, d.G, d.m, order=0, strict=strict)
    return CartesianPoint(x=val[..., 0:2], y=val[..., 2:4])


def delaunay_jacobian(d, strict=False):
    """Jacobian of the Delaunay map, ``(..., 4n, 4n)``.

    Rows are ordered body by body as (x1, x2, y1, y2); columns body by body as
    (ell, g, L, G).  The matrix is block diagonal.
    """
    _, jac, _ = delaunay_jets(d.ell, d.g, d.L, d.G, d.m, order=1, strict=strict)
    n = jac.shape[-3]
    lead = jac.shape[:-3]
    out = np.zeros(lead + (4 * n, 4 * n), dtype=jac.dtype)
    for i in range(n):
        out[..., 4 * i : 4 * i + 4, 4 * i : 4 * i + 4] = jac[..., i, :, :]
    return out


def cartesian_to_orbital(x, y, m):
    """Semi-major axis, eccentricity and Delaunay actions of one heliocentric orbit.

    Uses the same normalisation as the Delaunay map (Sun mass 1, body
    momentum y with Keplerian energy |y|^2/(2m) - m/|x|).
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    m = np.asarray(m, dtype=float)
    r = np.linalg.norm(x, axis=-1)
    energy = (y**2).sum(axis=-1) / (2 * m) - m / r
    if np.any(energy >= 0):
        raise DomainError("orbit is not bound")
    # vis-viva: energy = -m^3 / (2 L^2) = -m / (2 a)
    a = -m / (2 * energy)
    L = m * np.sqrt(a)
    G = x[..., 0] * y[..., 1] - x[..., 1] * y[..., 0]
    e = _eccentricity(L, np.minimum(np.abs(G), L))
    return a, e, L, G


def kepler_frequency(L, m):
    """Mean motion dH0/dL = m^3 / L^3."""
    return np.asarray(m) ** 3 / np.asarray(L) ** 3


def action_from_frequency(omega_ell, m):
    """Third Kepler law inverted: L = m * omega^(-1/3)."""
    omega_ell = np.asarray(omega_ell, dtype=float)
    return np.asarray(m, dtype=float) * omega_ell ** (-1.0 / 3.0)
