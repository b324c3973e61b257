"""Geometry attached to a parameterised torus.

Fields here live on the base grid in *grid-first* layout, ``(*sizes, ...)``,
so that nodewise small-matrix algebra is plain ``@``.  The torus is stored as
its periodic part ``Kp(theta) = K(theta) - (theta, 0)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import scipy.fft as sfft

from . import fourier, nbody
from .errors import DegeneracyError, DegenerateFrameError, DomainError, TorsionDegeneracyError
from .fourier import FourierMap, GridSpec

COND_MAX = 1e12


# ---------------------------------------------------------------------------
# grid-first spectral helpers
# ---------------------------------------------------------------------------


def _axes(m):
    return tuple(range(m))


def _expand(mult, extra):
    return mult.reshape(mult.shape + (1,) * extra)


def gf_coeffs(values, m):
    n = int(np.prod(values.shape[:m]))
    return sfft.fftn(values, axes=_axes(m), workers=fourier._workers()) / n


def gf_values(coeffs, m):
    n = int(np.prod(coeffs.shape[:m]))
    return sfft.ifftn(coeffs * n, axes=_axes(m), workers=fourier._workers()).real


def gf_mean(values, m):
    return values.mean(axis=_axes(m))


def gf_R(values, omega, m, floor=fourier.SMALL_DIVISOR_FLOOR):
    """Small-divisor operator R on a grid-first field of any trailing shape."""
    sizes = values.shape[:m]
    mult = fourier._inverse_lie_multiplier(tuple(sizes), tuple(np.asarray(omega, float)), floor)
    c = gf_coeffs(values, m) * _expand(mult, values.ndim - m)
    return gf_values(c, m)


def gf_lie(values, omega, m):
    sizes = values.shape[:m]
    mult = -1j * fourier.k_dot(sizes, omega)
    mult = np.where(fourier.nyquist_mask(sizes), 0.0, mult)
    return gf_values(gf_coeffs(values, m) * _expand(mult, values.ndim - m), m)


def gf_derivatives(values, m):
    """All first derivatives: ``(*sizes, ..., m)`` from ``(*sizes, ...)``."""
    sizes = values.shape[:m]
    c = gf_coeffs(values, m)
    k = fourier.wavenumbers(sizes)
    ny = fourier.nyquist_mask(sizes)
    extra = values.ndim - m
    out = np.empty(values.shape + (m,))
    for j in range(m):
        mult = np.where(ny, 0.0, 1j * k[j])
        out[..., j] = gf_values(c * _expand(mult, extra), m)
    return out


# ---------------------------------------------------------------------------
# torus state
# ---------------------------------------------------------------------------


@dataclass
class TorusState:
    """Candidate (translated) torus: periodic part of K, counterterm, target momentum."""

    K: FourierMap
    lam: np.ndarray
    G0: np.ndarray
    params: nbody.SystemParams
    invariance_error: float = float("nan")

    def __post_init__(self):
        self.lam = np.atleast_1d(np.asarray(self.lam, dtype=float))
        self.G0 = np.atleast_1d(np.asarray(self.G0, dtype=float))

    @property
    def spec(self):
        return self.K.spec

    @property
    def mu(self):
        return self.params.mu

    @property
    def omega(self):
        return np.array(self.params.omega)

    def replace(self, **kw):
        return replace(self, **kw)

    def periodic_values(self):
        """Grid-first periodic part ``(*sizes, d)``."""
        return np.moveaxis(self.K.values, 0, -1)

    def node_points(self, spec=None):
        """Reduced phase-space points K(theta) on a grid, ``(*sizes, d)``.

        With ``spec`` finer than the state's grid the series is zero-padded.
        """
        m = self.spec.m
        if spec is None or spec.sizes == self.spec.sizes:
            spec = self.spec
            kp = self.K.values
        else:
            kp = self.K.resample(spec).values
        z = np.moveaxis(kp, 0, -1).copy()
        z[..., :m] += np.moveaxis(fourier.angles(spec.sizes), 0, -1)
        return z

    def ghat_average(self):
        """<Pi_Ghat K> (length n-1)."""
        n, m = self.params.n, self.params.m
        return fourier.average(self.K)[m + n :]

    def moment_error(self):
        return self.ghat_average() - self.G0


def flat_state(params, spec, G0, lam=None):
    """Kepler-limit torus K(theta) = (theta, L0, G0); lam defaults to omega_ghat."""
    from . import kepler

    if np.any(params.omega_ell <= 0):
        raise DomainError("fast frequencies must be positive")
    n, m = params.n, params.m
    L0 = kepler.action_from_frequency(params.omega_ell, np.array(params.masses))
    G0 = np.atleast_1d(np.asarray(G0, dtype=float))
    vals = np.zeros((2 * m,) + spec.sizes)
    vals[m : m + n] = L0.reshape((n,) + (1,) * m)
    vals[m + n :] = G0.reshape((n - 1,) + (1,) * m)
    if lam is None:
        lam = params.omega_ghat.copy()
    return TorusState(FourierMap(spec, values=vals), lam, G0, params)


# ---------------------------------------------------------------------------
# frames
# ---------------------------------------------------------------------------


@dataclass
class Frames:
    """Nodewise geometric objects on the base grid (grid-first layout)."""

    DK: np.ndarray  # (*sizes, d, m)
    B: np.ndarray  # (*sizes, m, m)
    N: np.ndarray  # (*sizes, d, m)
    T: np.ndarray  # (*sizes, m, m)
    bL: np.ndarray  # (*sizes, m, n-1)
    bN: np.ndarray  # (*sizes, m, n-1)
    DX: np.ndarray = field(repr=False, default=None)
    m: int = 3
    n: int = 2

    @property
    def avg_T(self):
        return gf_mean(self.T, self.m)

    @property
    def P(self):
        return np.concatenate([self.DK, self.N], axis=-1)

    def symplectic_defect(self):
        """max over nodes of |P^T Omega P - Omega| (entrywise)."""
        om = nbody.omega_matrix(self.m)
        P = self.P
        return float(np.abs(np.swapaxes(P, -1, -2) @ om @ P - om).max())

    def torsion_symmetry_defect(self):
        return float(np.abs(self.T - np.swapaxes(self.T, -1, -2)).max())


def tangent_frame(state):
    """DK = (I; 0) + D Kp on the base grid, ``(*sizes, d, m)``."""
    m = state.spec.m
    DK = gf_derivatives(state.periodic_values(), m)
    for j in range(m):
        DK[..., j, j] += 1.0
    return DK


def build_frames(state, need_torsion=True):
    """Tangent/normal frames, torsion and counterterm projections."""
    params = state.params
    m, n = params.m, params.n
    om = nbody.omega_matrix(m)
    DK = tangent_frame(state)
    G = np.swapaxes(DK, -1, -2) @ DK
    cond = np.linalg.cond(G)
    if not np.all(np.isfinite(cond)) or cond.max() > COND_MAX:
        raise DegenerateFrameError(f"DK^T DK condition number {np.nanmax(cond):.3e}")
    B = np.linalg.inv(G)
    N = om @ DK @ B
    T = None
    DX = None
    if need_torsion:
        z = state.node_points()
        DX = nbody.vector_field_jacobian(z, params)
        S = DX + om @ DX @ om
        T = np.swapaxes(N, -1, -2) @ om @ S @ N
    OXg = om @ nbody.counterterm_field(params)  # (d, n-1)
    bL = np.swapaxes(N, -1, -2) @ OXg
    bN = -(np.swapaxes(DK, -1, -2) @ OXg)
    return Frames(DK=DK, B=B, N=N, T=T, bL=bL, bN=bN, DX=DX, m=m, n=n)


def invariance_error_field(state, translated=True):
    """E = L_omega K + X_H(K) (+ X_Ghat lam) on the base grid, and its fine-grid sup.

    X_H o K is evaluated on the oversampled grid and truncated back, so the
    base-grid field is free of aliasing from the nonlinear composition.
    """
    params = state.params
    spec = state.spec
    m = spec.m
    omega = np.array(params.omega)
    fine = spec.fine()
    z_fine = state.node_points(fine)
    X_fine = nbody.vector_field(z_fine, params)
    # -DK omega on the fine grid: omega plus the Lie derivative of the periodic part
    kp_fine_c = fourier.resample_coeffs(state.K.coeffs, fine.sizes, m)
    lie_fine = np.moveaxis(fourier.to_values(fourier.lie_coeffs(kp_fine_c, omega, m), m), 0, -1)
    E_fine = X_fine + lie_fine
    E_fine[..., :m] -= omega
    if translated:
        E_fine = E_fine + nbody.counterterm_field(params) @ state.lam
    sup = float(np.abs(E_fine).max())
    if fine.sizes == spec.sizes:
        return E_fine, sup
    Ec = fourier.resample_coeffs(fourier.to_coeffs(np.moveaxis(E_fine, -1, 0), m), spec.sizes, m)
    E = np.moveaxis(fourier.to_values(Ec, m), 0, -1)
    return E, sup


def project_error(state, frames, translated=True, E=None):
    """Tangent/normal components (etaL, etaN) of the invariance error and eta^{G0}.

    Returns ``(etaL, etaN, etaG0, sup_error)`` with etaL/etaN of shape
    ``(*sizes, m)``.
    """
    if E is None:
        E, sup = invariance_error_field(state, translated)
    else:
        sup = float(np.abs(E).max())
    om = nbody.omega_matrix(state.spec.m)
    OE = E @ om.T
    etaL = -np.einsum("...di,...d->...i", frames.N, OE)
    etaN = np.einsum("...di,...d->...i", frames.DK, OE)
    etaG0 = state.G0 - state.ghat_average()
    return etaL, etaN, etaG0, sup


# ---------------------------------------------------------------------------
# supertorsion
# ---------------------------------------------------------------------------


@dataclass
class Supertorsion:
    """Bordered averaged system for (xiN0, dlam) plus the fields reused afterwards."""

    matrix: np.ndarray
    RT: np.ndarray  # R(T), (*sizes, m, m)
    RbN: np.ndarray  # R(bN), (*sizes, m, n-1)
    btL: np.ndarray  # bL - T R(bN)
    RbtL: np.ndarray  # R(btL)
    frames: Frames
    omega: np.ndarray

    def rhs(self, etaL, etaN, etaG0):
        """Right-hand side and the intermediate fields of the back substitution."""
        fr = self.frames
        m, n = fr.m, fr.n
        gh = slice(m + n, 2 * m)
        RetaN = gf_R(etaN, self.omega, m)
        etatL = etaL - np.einsum("...ij,...j->...i", fr.T, RetaN)
        RetatL = gf_R(etatL, self.omega, m)
        top = gf_mean(etatL, m)
        corr = gf_mean(
            np.einsum("...gi,...i->...g", fr.DK[..., gh, :], RetatL)
            + np.einsum("...gi,...i->...g", fr.N[..., gh, :], RetaN),
            m,
        )
        bottom = etaG0 - corr
        return np.concatenate([top, bottom]), (etatL, RetaN, RetatL)

    def inverse_norms(self):
        inv = np.linalg.inv(self.matrix)
        return {
            "inf": float(np.abs(inv).sum(axis=1).max()),
            "two": float(np.linalg.norm(inv, 2)),
        }


def assemble_supertorsion(frames, omega, check=True):
    """The (m + n-1)-square supertorsion matrix.

    Rows: [<T>, <btL>] and [<Pi_Ghat(N - DK R T)>, -<Pi_Ghat(DK R btL + N R bN)>].
    """
    m, n = frames.m, frames.n
    gh = slice(m + n, 2 * m)
    T = frames.T
    RT = gf_R(T, omega, m)
    RbN = gf_R(frames.bN, omega, m)
    btL = frames.bL - T @ RbN
    RbtL = gf_R(btL, omega, m)
    top = np.concatenate([gf_mean(T, m), gf_mean(btL, m)], axis=1)
    low_left = gf_mean(frames.N[..., gh, :] - frames.DK[..., gh, :] @ RT, m)
    low_right = -gf_mean(frames.DK[..., gh, :] @ RbtL + frames.N[..., gh, :] @ RbN, m)
    bottom = np.concatenate([low_left, low_right], axis=1)
    M = np.concatenate([top, bottom], axis=0)
    if check:
        c = np.linalg.cond(M)
        if not np.isfinite(c) or c > COND_MAX:
            raise DegeneracyError(f"supertorsion condition number {c:.3e}")
    return Supertorsion(M, RT, RbN, btL, RbtL, frames, np.asarray(omega, float))


def averaged_torsion_inverse(frames, check=True):
    T = frames.avg_T
    c = np.linalg.cond(T)
    if check and (not np.isfinite(c) or c > COND_MAX):
        raise TorsionDegeneracyError(f"averaged torsion condition number {c:.3e}")
    return np.linalg.inv(T)


def matrix_norm(M, kind="inf"):
    if kind == "inf":
        return float(np.abs(M).sum(axis=-1).max())
    if kind == "one":
        return float(np.abs(M).sum(axis=-2).max())
    if kind == "two":
        return float(np.linalg.norm(M, 2))
    raise ValueError(kind)
