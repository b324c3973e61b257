"""Planar (1+n)-body Hamiltonian in cartesian, Delaunay and reduced coordinates.

Reduced phase-space points are stacked as ``z = (ell, ghat, L, Ghat)`` with
``ell, L`` of length n and ``ghat, Ghat`` of length n-1, so ``d = 2(2n-1)``
and ``z[..., :m]`` are the angles (m = 2n-1).  Lifting to Delaunay variables
uses the gauge ``g_n = 0``:

    g_i = ghat_i + ... + ghat_{n-1},   G_i = Ghat_i - Ghat_{i-1},
    G_n = Gtot - Ghat_{n-1}.

The symplectic matrix is ``Omega = [[0, -I], [I, 0]]`` and the Hamiltonian
vector field is ``X_H = Omega^{-1} grad H = (dH/dI, -dH/dphi)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import kepler
from .errors import ConfigurationError, DomainError, SingularityError

COLLISION_FLOOR = 1e-8
CHUNK = 1 << 15

# Sun-Jupiter-Saturn defaults
SJS_MASSES = (0.9546, 0.2856)
SJS_MU0 = 1e-3
SJS_OMEGA = (
    8.39549288702546301204e-2,
    3.38240117059304358259e-2,
    -1.85007988077595000000e-5,
)
SJS_GTOT = 3.05839852910896096675


@dataclass(frozen=True)
class SystemParams:
    """Masses (scaled by mu), coupling, total angular momentum and frequencies."""

    masses: tuple = SJS_MASSES
    mu: float = 0.0
    mu0: float = SJS_MU0
    Gtot: float = SJS_GTOT
    omega: tuple = SJS_OMEGA

    def __post_init__(self):
        object.__setattr__(self, "masses", tuple(float(v) for v in np.atleast_1d(self.masses)))
        object.__setattr__(self, "omega", tuple(float(v) for v in np.atleast_1d(self.omega)))
        if any(v <= 0 for v in self.masses):
            raise ConfigurationError("masses must be positive")
        if self.mu < 0 or self.mu0 < 0:
            raise ConfigurationError("mu must be nonnegative")
        if len(self.omega) != 2 * self.n - 1:
            raise ConfigurationError(
                f"omega needs {2 * self.n - 1} entries for {self.n} planets"
            )

    @property
    def n(self):
        return len(self.masses)

    @property
    def m(self):
        """Torus dimension 2n - 1."""
        return 2 * self.n - 1

    @property
    def dim(self):
        return 2 * self.m

    @property
    def omega_ell(self):
        return np.array(self.omega[: self.n])

    @property
    def omega_ghat(self):
        return np.array(self.omega[self.n :])

    def with_mu(self, mu):
        return replace(self, mu=float(mu))

    @classmethod
    def sun_jupiter_saturn(cls, mu=0.0):
        return cls(mu=mu)


@dataclass
class ReducedPoint:
    """Reduced coordinates; each field has shape ``(..., n)`` or ``(..., n-1)``."""

    ell: np.ndarray
    ghat: np.ndarray
    L: np.ndarray
    Ghat: np.ndarray

    def stack(self):
        return np.concatenate(
            [np.asarray(self.ell), np.asarray(self.ghat), np.asarray(self.L), np.asarray(self.Ghat)],
            axis=-1,
        )

    @classmethod
    def from_array(cls, z, n):
        z = np.asarray(z)
        return cls(z[..., :n], z[..., n : 2 * n - 1], z[..., 2 * n - 1 : 3 * n - 1], z[..., 3 * n - 1 :])


def omega_matrix(m):
    o = np.zeros((2 * m, 2 * m))
    o[:m, m:] = -np.eye(m)
    o[m:, :m] = np.eye(m)
    return o


def _as_z(point, n):
    if isinstance(point, ReducedPoint):
        return point.stack()
    return np.asarray(point)


def lift_matrix(n):
    """Linear part A of z -> Delaunay u = (ell, g, L, G) (each block length n)."""
    m = 2 * n - 1
    A = np.zeros((4 * n, 2 * m))
    A[:n, :n] = np.eye(n)
    for i in range(n - 1):
        for k in range(i, n - 1):
            A[n + i, n + k] = 1.0
    A[2 * n : 3 * n, m : m + n] = np.eye(n)
    for i in range(n - 1):
        A[3 * n + i, m + n + i] = 1.0
        if i > 0:
            A[3 * n + i, m + n + i - 1] = -1.0
    if n > 1:
        A[4 * n - 1, m + 2 * n - 2] = -1.0
    return A


def lift_offset(n, Gtot):
    u0 = np.zeros(4 * n)
    u0[4 * n - 1] = Gtot
    return u0


def reduced_to_delaunay(z, params):
    """Delaunay arrays (ell, g, L, G), each ``(..., n)``."""
    n = params.n
    u = z @ lift_matrix(n).T + lift_offset(n, params.Gtot)
    return u[..., :n], u[..., n : 2 * n], u[..., 2 * n : 3 * n], u[..., 3 * n :]


# ---------------------------------------------------------------------------
# cartesian Hamiltonian
# ---------------------------------------------------------------------------


def _check_distances(x, floor):
    r = np.sqrt((x**2).sum(axis=-1))
    if np.any(np.abs(r) < floor):
        raise SingularityError("body closer to the Sun than the collision floor")
    n = x.shape[-2]
    for i in range(n):
        for j in range(i + 1, n):
            d = x[..., i, :] - x[..., j, :]
            if np.any(np.abs(np.sqrt((d**2).sum(axis=-1))) < floor):
                raise SingularityError(f"bodies {i} and {j} closer than the collision floor")


def h_cartesian(x, y, masses, floor=COLLISION_FLOOR):
    """Keplerian part H0 and coupling H1 at heliocentric ``x, y`` of shape ``(..., n, 2)``."""
    x = np.asarray(x)
    y = np.asarray(y)
    m = np.asarray(masses)
    _check_distances(x, floor)
    r = np.sqrt((x**2).sum(axis=-1))
    y2 = (y**2).sum(axis=-1)
    h0 = (y2 / (2 * m) - m / r).sum(axis=-1)
    h1 = 0.5 * y2.sum(axis=-1)
    n = x.shape[-2]
    for i in range(n):
        for j in range(i + 1, n):
            d = x[..., i, :] - x[..., j, :]
            rij = np.sqrt((d**2).sum(axis=-1))
            h1 = h1 + (y[..., i, :] * y[..., j, :]).sum(axis=-1) - m[i] * m[j] / rij
    return h0, h1


def _h1_derivatives(c, masses, order):
    """H1, gradient (..., n, 4) and Hessian (..., n, 4, n, 4) in cartesian ``c``."""
    n = c.shape[-2]
    x = c[..., :2]
    y = c[..., 2:]
    lead = c.shape[:-2]
    grad = np.zeros(c.shape, dtype=c.dtype)
    ysum = y.sum(axis=-2)
    # d/dy_i of sum |y|^2/2 + sum_{i<j} y_i.y_j = sum_j y_j
    grad[..., 2:] = ysum[..., None, :]
    val = 0.5 * (ysum**2).sum(axis=-1)
    hess = None
    if order >= 2:
        hess = np.zeros(lead + (n, 4, n, 4), dtype=c.dtype)
        for i in range(n):
            for j in range(n):
                hess[..., i, 2, j, 2] = 1.0
                hess[..., i, 3, j, 3] = 1.0
    for i in range(n):
        for j in range(i + 1, n):
            d = x[..., i, :] - x[..., j, :]
            r2 = (d**2).sum(axis=-1)
            r = np.sqrt(r2)
            k = masses[i] * masses[j]
            val = val - k / r
            g = (k / (r2 * r))[..., None] * d
            grad[..., i, :2] += g
            grad[..., j, :2] -= g
            if hess is not None:
                blk = (k / (r2 * r))[..., None, None] * (
                    np.eye(2) - 3.0 * d[..., :, None] * d[..., None, :] / r2[..., None, None]
                )
                hess[..., i, :2, i, :2] += blk
                hess[..., j, :2, j, :2] += blk
                hess[..., i, :2, j, :2] -= blk
                hess[..., j, :2, i, :2] -= blk
    return val, grad, hess


# ---------------------------------------------------------------------------
# reduced Hamiltonian and its derivatives
# ---------------------------------------------------------------------------


def _check_reduced_domain(L, G, strict=True):
    bad = np.abs(np.real(G)) >= np.real(L) if strict else np.abs(np.real(G)) > np.real(L)
    if np.any(bad):
        raise DomainError("reconstructed |G_i| >= L_i")


def _jets(z, params, order, floor):
    """H1 and its z-derivatives up to ``order`` at reduced points z (..., d)."""
    n = params.n
    masses = np.array(params.masses)
    ell, g, L, G = reduced_to_delaunay(z, params)
    _check_reduced_domain(L, G)
    val, jac, hess = kepler.delaunay_jets(ell, g, L, G, masses, order=max(order, 0))
    # val (..., n, 4); jac (..., n, 4, 4); hess (..., n, 4, 4, 4)
    _check_distances(val[..., :2], floor)
    h1, gc, hc = _h1_derivatives(val, masses, order)
    if order == 0:
        return h1, None, None
    A = lift_matrix(n)
    # Delaunay u ordering (ell, g, L, G) blocks; body i variable v sits at v*n + i
    gu_body = np.einsum("...ik,...ikv->...iv", gc, jac)  # (..., n, 4)
    gu = np.swapaxes(gu_body, -1, -2).reshape(gu_body.shape[:-2] + (4 * n,))
    gz = gu @ A
    if order == 1:
        return h1, gz, None
    # Hessian in u
    lead = z.shape[:-1]
    t = np.einsum("...ikjl,...ikv->...ivjl", hc, jac)
    hu_body = np.einsum("...ivjl,...jlw->...ivjw", t, jac)
    second = np.einsum("...ik,...ikvw->...ivw", gc, hess)
    for i in range(n):
        hu_body[..., i, :, i, :] += second[..., i, :, :]
    # reorder (i, v) -> v*n + i
    hu = np.transpose(hu_body, tuple(range(len(lead))) + tuple(len(lead) + a for a in (1, 0, 3, 2)))
    hu = hu.reshape(lead + (4 * n, 4 * n))
    hz = A.T @ hu @ A
    return h1, gz, hz


def _h0_parts(z, params):
    n = params.n
    m = params.m
    masses = np.array(params.masses)
    L = z[..., m : m + n]
    h0 = (-(masses**3) / (2 * L**2)).sum(axis=-1)
    g0 = np.zeros(z.shape, dtype=z.dtype)
    g0[..., m : m + n] = masses**3 / L**3
    return h0, g0


def _chunked(func, z, chunk=CHUNK):
    """Apply ``func`` over the flattened leading axes of ``z`` in chunks."""
    lead = z.shape[:-1]
    flat = z.reshape(-1, z.shape[-1])
    if flat.shape[0] <= chunk:
        res = func(flat)
        return tuple(None if r is None else r.reshape(lead + r.shape[1:]) for r in res)
    parts = [func(flat[i : i + chunk]) for i in range(0, flat.shape[0], chunk)]
    out = []
    for k in range(len(parts[0])):
        if parts[0][k] is None:
            out.append(None)
        else:
            arr = np.concatenate([p[k] for p in parts], axis=0)
            out.append(arr.reshape(lead + arr.shape[1:]))
    return tuple(out)


def reduced_hamiltonian(point, params, floor=COLLISION_FLOOR):
    """H0(L) + mu * H1 evaluated through the Delaunay map."""
    z = _as_z(point, params.n)
    h0, _ = _h0_parts(z, params)
    if params.mu == 0:
        ell, g, L, G = reduced_to_delaunay(z, params)
        _check_reduced_domain(L, G)
        return h0
    h1, _, _ = _jets(z, params, 0, floor)
    return h0 + params.mu * h1


def hamiltonian_gradient(point, params, floor=COLLISION_FLOOR):
    z = _as_z(point, params.n)

    def f(zz):
        _, g0 = _h0_parts(zz, params)
        if params.mu == 0:
            ell, g, L, G = reduced_to_delaunay(zz, params)
            _check_reduced_domain(L, G)
            return (g0,)
        _, g1, _ = _jets(zz, params, 1, floor)
        return (g0 + params.mu * g1,)

    return _chunked(f, z)[0]


def hamiltonian_hessian(point, params, floor=COLLISION_FLOOR):
    z = _as_z(point, params.n)
    n, m = params.n, params.m
    masses = np.array(params.masses)

    def f(zz):
        L = zz[..., m : m + n]
        h = np.zeros(zz.shape + (zz.shape[-1],), dtype=zz.dtype)
        for i in range(n):
            h[..., m + i, m + i] = -3 * masses[i] ** 3 / L[..., i] ** 4
        if params.mu == 0:
            ell, g, Ld, G = reduced_to_delaunay(zz, params)
            _check_reduced_domain(Ld, G)
            return (h,)
        _, _, h1 = _jets(zz, params, 2, floor)
        return (h + params.mu * h1,)

    return _chunked(f, z)[0]


def _omega_inv_apply(v, m):
    """Omega^{-1} v = (v_I, -v_phi) along the last axis."""
    out = np.empty_like(v)
    out[..., :m] = v[..., m:]
    out[..., m:] = -v[..., :m]
    return out


def vector_field(point, params, floor=COLLISION_FLOOR):
    """X_H = Omega^{-1} grad H at reduced points, shape ``(..., d)``."""
    return _omega_inv_apply(hamiltonian_gradient(point, params, floor), params.m)


def vector_field_jacobian(point, params, floor=COLLISION_FLOOR):
    """DX_H = Omega^{-1} Hess H, shape ``(..., d, d)``."""
    h = hamiltonian_hessian(point, params, floor)
    m = params.m
    out = np.empty_like(h)
    out[..., :m, :] = h[..., m:, :]
    out[..., m:, :] = -h[..., :m, :]
    return out


def vector_field_and_jacobian(point, params, floor=COLLISION_FLOOR):
    z = _as_z(point, params.n)
    n, m = params.n, params.m
    masses = np.array(params.masses)

    def f(zz):
        _, g0 = _h0_parts(zz, params)
        L = zz[..., m : m + n]
        h = np.zeros(zz.shape + (zz.shape[-1],), dtype=zz.dtype)
        for i in range(n):
            h[..., m + i, m + i] = -3 * masses[i] ** 3 / L[..., i] ** 4
        if params.mu != 0:
            _, g1, h1 = _jets(zz, params, 2, floor)
            g0 = g0 + params.mu * g1
            h = h + params.mu * h1
        else:
            ell, g, Ld, G = reduced_to_delaunay(zz, params)
            _check_reduced_domain(Ld, G)
        return g0, h

    g, h = _chunked(f, z)
    X = _omega_inv_apply(g, m)
    DX = np.empty_like(h)
    DX[..., :m, :] = h[..., m:, :]
    DX[..., m:, :] = -h[..., :m, :]
    return X, DX


def h1_vector_field(point, params, floor=COLLISION_FLOOR):
    """X_{H1}: the coupling's vector field alone (independent of mu)."""
    z = _as_z(point, params.n)

    def f(zz):
        _, g1, _ = _jets(zz, params, 1, floor)
        return (g1,)

    return _omega_inv_apply(_chunked(f, z)[0], params.m)


def counterterm_field(params):
    """X_Ghat = Omega^{-1} grad Pi_Ghat: one constant column per Ghat_i, ``(d, n-1)``.

    Unit entries sit in the ghat-velocity slots.
    """
    n, m = params.n, params.m
    X = np.zeros((2 * m, n - 1))
    for i in range(n - 1):
        X[n + i, i] = 1.0
    return X


def g_hat_n_frequency(K_values, params, floor=COLLISION_FLOOR):
    """Grid average of dH/dGhat_n (= dH/dG_n in the g_n = 0 gauge) over a torus.

    ``K_values`` are reduced points on the torus grid, shape ``(..., d)``.
    """
    z = np.asarray(K_values)
    n = params.n
    if params.mu == 0:
        return 0.0

    def f(zz):
        ell, g, L, G = reduced_to_delaunay(zz, params)
        _check_reduced_domain(L, G)
        masses = np.array(params.masses)
        val, jac, _ = kepler.delaunay_jets(ell, g, L, G, masses, order=1)
        _check_distances(val[..., :2], floor)
        _, gc, _ = _h1_derivatives(val, masses, 1)
        # d/dG_n of H1: body n-1, Delaunay variable G (column 3)
        dG = np.einsum("...k,...k->...", gc[..., n - 1, :], jac[..., n - 1, :, 3])
        return (params.mu * dG,)

    vals = _chunked(f, z.reshape(-1, z.shape[-1]))[0]
    return float(np.mean(vals))


def cartesian_from_reduced(point, params):
    """Heliocentric (x, y), each ``(..., n, 2)``, in the g_n = 0 gauge."""
    z = _as_z(point, params.n)
    ell, g, L, G = reduced_to_delaunay(z, params)
    val, _, _ = kepler.delaunay_jets(ell, g, L, G, np.array(params.masses), order=0)
    return val[..., :2], val[..., 2:]
