"""Numerical estimates of the constants entering the KAM hypotheses.

These are estimates from sampling and truncated Fourier series, not
rigorous enclosures.  The theorem constants themselves (C_E, C_DeltaK and
the iterative-lemma family) are inputs: the checks here are conditional on
whatever values the user supplies.
"""

from __future__ import annotations

import itertools
import logging
import math
import warnings
from dataclasses import dataclass, field, fields, replace

import numpy as np
from scipy.special import ndtri
from scipy.stats import qmc

from . import fourier, geometry, nbody
from .errors import (
    DomainError,
    InfeasibleSchemeError,
    NeighborhoodError,
    ResonanceError,
    SingularityError,
)

log = logging.getLogger(__name__)

SIGMA_INFLATION = 1.0 + 1e-10
SAMPLE_INFLATION = 1.05

THEOREM_CONSTANT_NAMES = (
    "C_E",
    "C_DeltaK",
    "C_sym",
    "C_xiL",
    "C_DeltaKn",
    "C_DeltaDKn",
    "C_DeltaDKnT",
    "C_DeltaBn",
    "C_DeltaNn",
    "C_DeltaNnT",
    "C_DeltaiTn",
    "C_hatDelta",
    "Q_etaL",
    "Q_etaN",
)

# norms of the geometric objects tracked by the iterative lemma, and the
# constant bounding each one's change per step
_SIGMA_DRIFT = {
    "sigma_DK": "C_DeltaDKn",
    "sigma_DKT": "C_DeltaDKnT",
    "sigma_B": "C_DeltaBn",
    "sigma_N": "C_DeltaNn",
    "sigma_NT": "C_DeltaNnT",
    "sigma_Tinv": "C_DeltaiTn",
}


@dataclass
class KamConstants:
    c_XH: float
    c_DXH: float
    c_DXHT: float
    c_DDXH: float
    sigma_DK: float
    sigma_DKT: float
    sigma_B: float
    sigma_N: float
    sigma_NT: float
    sigma_Tinv: float
    gamma: float
    tau: float
    rho: float
    delta: float
    m: int = 3
    theorem_constants: dict = field(default_factory=dict)
    # weights applied to (|etaL|, |etaN|) inside the combined error norm
    eta_weights: tuple = (1.0, 1.0)

    def __post_init__(self):
        for f in fields(self):
            if f.name in ("theorem_constants", "eta_weights", "m"):
                continue
            v = getattr(self, f.name)
            if not (np.isfinite(v) and v > 0):
                raise ValueError(f"{f.name} must be positive, got {v}")
        if not self.delta <= self.rho / 6:
            raise ValueError("delta must lie in (0, rho/6]")
        if self.tau < self.m - 1:
            raise ValueError("tau must be >= m - 1")
        missing = [k for k in THEOREM_CONSTANT_NAMES if k not in self.theorem_constants]
        if missing:
            warnings.warn(
                "theorem constants default to 1.0 for: " + ", ".join(missing)
                + "; the verdict is only as good as these inputs",
                stacklevel=2,
            )
        self.theorem_constants = {
            **{k: 1.0 for k in THEOREM_CONSTANT_NAMES}, **dict(self.theorem_constants)
        }
        if any(not v > 0 for v in self.theorem_constants.values()):
            raise ValueError("theorem constants must be positive")

    def const(self, name):
        return self.theorem_constants[name]

    def sigmas(self):
        return {k: getattr(self, k) for k in _SIGMA_DRIFT}

    def with_theorem_constants(self, **kw):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            return replace(self, theorem_constants={**self.theorem_constants, **kw})


@dataclass
class Neighborhood:
    """Tubular neighbourhood proxy: complex angle strip of width rho, action ball of radius r."""

    state: geometry.TorusState
    rho: float = 0.1
    r: float = 1e-4

    def __post_init__(self):
        if not self.r > 0 or self.rho < 0:
            raise ValueError("need r > 0 and rho >= 0")


# ---------------------------------------------------------------------------
# H1: vector-field bounds
# ---------------------------------------------------------------------------


def _shifted_torus(state, shift):
    """K(theta + i shift) on the base grid, ``(*sizes, d)`` complex."""
    m = state.spec.m
    k = fourier.wavenumbers(state.spec.sizes)
    damp = np.exp(-np.tensordot(np.asarray(shift, float), k, axes=1))
    c = np.where(fourier.nyquist_mask(state.spec.sizes), 0.0, state.K.coeffs * damp)
    z = np.moveaxis(fourier.to_values(c, m), 0, -1).astype(complex)
    th = np.moveaxis(fourier.angles(state.spec.sizes), 0, -1)
    z[..., :m] += th + 1j * np.asarray(shift, float)
    return z


def _boundary_shifts(rho, m):
    """Imaginary shifts with every coordinate in {-rho, 0, rho}; the real one first."""
    out = [np.zeros(m)]
    for s in itertools.product((-1.0, 0.0, 1.0), repeat=m):
        if any(s):
            out.append(rho * np.array(s))
    return out


def _hessian_of_field(z, params, h):
    """Central differences of the Jacobian: D^2 X_H as (P, d, d, d)."""
    d = z.shape[-1]
    out = np.empty(z.shape[:-1] + (d, d, d), dtype=complex)
    for k in range(d):
        e = np.zeros(d)
        e[k] = h
        out[..., k] = (
            nbody.vector_field_jacobian(z + e, params) - nbody.vector_field_jacobian(z - e, params)
        ) / (2 * h)
    return out


def estimate_H1(nbhd, params=None, samples=100_000, seed=0, inflation=SAMPLE_INFLATION,
                fd_step=1e-5, complex_rays=True):
    """Sampled sup norms ``(c_XH, c_DXH, c_DXHT, c_DDXH)`` near the torus.

    Samples are torus nodes on the real strip and on the boundary shifts of
    the complex strip (chosen through a scrambled Sobol sequence), displaced
    by a point of the action ball of radius ``r``.  Matrix norms are max row
    sums; D^2 X_H uses the sum over the last two indices.
    """
    state = nbhd.state
    params = params or state.params
    m, d = params.m, params.dim
    shifts = _boundary_shifts(nbhd.rho, m) if (complex_rays and nbhd.rho > 0) else [np.zeros(m)]
    npts = state.spec.npoints
    sob = qmc.Sobol(d=2 + m, scramble=True, seed=seed)
    u = sob.random_base2(max(0, math.ceil(math.log2(samples))))[:samples]
    which = np.minimum((u[:, 0] * len(shifts)).astype(int), len(shifts) - 1)
    node = np.minimum((u[:, 1] * npts).astype(int), npts - 1)
    # point in the action ball: normal direction, radius r * U^(1/m)
    g = ndtri(np.clip(u[:, 2:], 1e-12, 1 - 1e-12))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    rad = nbhd.r * np.random.default_rng(seed).random(samples) ** (1.0 / m)
    ball = g * rad[:, None]
    z = np.empty((samples, d), dtype=complex)
    for s_idx, shift in enumerate(shifts):
        sel = which == s_idx
        if not sel.any():
            continue
        grid = _shifted_torus(state, shift).reshape(-1, d)
        z[sel] = grid[node[sel]]
    z[:, m:] += ball
    try:
        X = nbody.vector_field(z, params)
        J = nbody.vector_field_jacobian(z, params)
        D2 = _hessian_of_field(z, params, fd_step)
    except (SingularityError, DomainError) as exc:
        raise NeighborhoodError(f"neighbourhood sampling left the domain: {exc}") from exc
    aJ = np.abs(J)
    c_XH = np.abs(X).max()
    c_DXH = aJ.sum(axis=-1).max()
    c_DXHT = aJ.sum(axis=-2).max()
    c_DDXH = np.abs(D2).sum(axis=(-1, -2)).max()
    return tuple(float(inflation * c) for c in (c_XH, c_DXH, c_DXHT, c_DDXH))


# ---------------------------------------------------------------------------
# H2: condition numbers of the torus
# ---------------------------------------------------------------------------


def matrix_strip_norm(M, rho, m):
    """Analytic norm of a grid-first matrix field: max row sum of entry strip norms."""
    c = fourier.to_coeffs(np.moveaxis(M, (-2, -1), (0, 1)), m)
    entry = fourier.strip_norms(c, rho, m)
    return float(entry.sum(axis=1).max())


def matrix_sup_norm(M):
    return float(np.abs(M).sum(axis=-1).max())


@dataclass
class H2Estimate:
    rho: float
    strip: dict
    sup: dict

    def sigmas(self, inflation=SIGMA_INFLATION):
        return {k: v * inflation for k, v in self.strip.items()}


def estimate_H2(state, frames=None, rho=0.1):
    """Norms of DK, DK^T, B, N, N^T on the strip and |<T>^-1| (max row sum).

    Both the strip norms and grid sup norms are returned; ``sigmas()`` gives
    the inflated strip values.
    """
    if frames is None:
        frames = geometry.build_frames(state)
    m = frames.m
    Tinv = geometry.averaged_torsion_inverse(frames)
    objs = {
        "sigma_DK": frames.DK,
        "sigma_DKT": np.swapaxes(frames.DK, -1, -2),
        "sigma_B": frames.B,
        "sigma_N": frames.N,
        "sigma_NT": np.swapaxes(frames.N, -1, -2),
    }
    strip = {k: matrix_strip_norm(v, rho, m) for k, v in objs.items()}
    sup = {k: matrix_sup_norm(v) for k, v in objs.items()}
    tinv = geometry.matrix_norm(Tinv, "inf")
    strip["sigma_Tinv"] = tinv
    sup["sigma_Tinv"] = tinv
    return H2Estimate(rho=rho, strip=strip, sup=sup)


# ---------------------------------------------------------------------------
# Diophantine constants
# ---------------------------------------------------------------------------


def _ball(m, radius):
    """All integer vectors of length ``m`` with |k|_1 <= radius."""
    if m == 0:
        return np.zeros((1, 0), dtype=np.int64)
    rng = np.arange(-radius, radius + 1, dtype=np.int64)
    grids = np.meshgrid(*([rng] * m), indexing="ij")
    k = np.stack([g.ravel() for g in grids], axis=1)
    return k[np.abs(k).sum(axis=1) <= radius]


def estimate_diophantine(omega, tau, kmax):
    """min over 0 < |k|_1 <= kmax of |k . omega| |k|_1^tau, by exhaustive search.

    An upper bound on admissible gamma at this truncation.  Only one of each
    pair +-k is visited (first coordinate >= 0).  Returns
    ``(gamma, k_argmin)``; raises :class:`ResonanceError` on an exact
    resonance.
    """
    omega = np.asarray(omega, dtype=float)
    m = omega.size
    if kmax < 1:
        raise ValueError("kmax must be >= 1")
    best, best_k = math.inf, None
    for k0 in range(0, kmax + 1):
        rest = _ball(m - 1, kmax - k0)
        if k0 == 0:
            rest = rest[np.abs(rest).sum(axis=1) > 0]
        if rest.size == 0 and m > 1:
            continue
        vals = np.abs(k0 * omega[0] + rest @ omega[1:])
        k1 = (k0 + np.abs(rest).sum(axis=1)).astype(float)
        if np.any(vals == 0.0):
            kk = (k0,) + tuple(int(v) for v in rest[np.argmax(vals == 0.0)])
            raise ResonanceError(kk, 0.0)
        g = vals * k1**tau
        i = int(np.argmin(g))
        if g[i] < best:
            best, best_k = float(g[i]), (k0,) + tuple(int(v) for v in rest[i])
    return best, best_k


# ---------------------------------------------------------------------------
# iterative lemma and KAM inequality
# ---------------------------------------------------------------------------


def weighted_error(k, etaL, etaN):
    wL, wN = k.eta_weights
    return max(wL * abs(etaL), wN * abs(etaN))


@dataclass
class KamCheck:
    passed: bool
    lhs: float
    margin: float
    delta: float


def check_kam_inequality(k, etaL, etaN, delta=None):
    """Evaluate C_E / (gamma delta^(tau+1)) <eta> < 1.

    ``margin`` is ``1 - lhs``; the left side is linear in the errors.
    """
    if delta is None:
        delta = min(k.delta, k.rho / 6 * (1 - 1e-12))
    if not 0 < delta < k.rho / 6:
        raise ValueError("delta must lie in (0, rho/6)")
    lhs = k.const("C_E") / (k.gamma * delta ** (k.tau + 1)) * weighted_error(k, etaL, etaN)
    return KamCheck(passed=bool(lhs < 1), lhs=float(lhs), margin=float(1 - lhs), delta=delta)


@dataclass
class LemmaStep:
    step: int
    rho: float
    delta: float
    etaL: float
    etaN: float
    hypothesis: float
    dK: float
    sigmas: dict


@dataclass
class LemmaLedger:
    steps: list
    h2_ok: bool
    feasible: bool
    final: KamCheck | None
    reason: str = ""

    @property
    def passed(self):
        return self.feasible and self.h2_ok and self.final is not None and self.final.passed


def run_iterative_lemma(k, etaL0, etaN0, steps=10, norms=None):
    """Propagate the iterative-lemma bounds for ``steps`` steps.

    Step j uses strip rho_j and delta_j = delta_0 / 2^j, with
    rho_{j+1} = rho_j - 3 delta_j.  ``norms`` are the current sizes of the
    geometric objects (default: sigma / (1 + 1e-10)); they drift by the
    displayed increments and must stay below the sigma's.  The final
    errors are checked against the KAM inequality on the remaining strip.
    """
    sig = k.sigmas()
    cur = dict(norms) if norms is not None else {n: v / SIGMA_INFLATION for n, v in sig.items()}
    rho, delta = k.rho, k.delta
    eL, eN = float(etaL0), float(etaN0)
    ledger, h2_ok = [], True
    gd = lambda p: k.gamma * delta**p  # noqa: E731
    for j in range(steps):
        if rho - 3 * delta <= 0:
            return LemmaLedger(ledger, h2_ok, False, None, f"strip exhausted at step {j}")
        w = weighted_error(k, eL, eN)
        hyp = k.const("C_hatDelta") / gd(k.tau + 1) * w
        if hyp >= 1:
            return LemmaLedger(ledger, h2_ok, False, None,
                               f"iterative lemma hypothesis fails at step {j} ({hyp:.3e} >= 1)")
        dK = k.const("C_DeltaKn") / gd(k.tau) * w
        for name, cname in _SIGMA_DRIFT.items():
            cur[name] = cur[name] + k.const(cname) / gd(k.tau + 1) * w
            if cur[name] >= sig[name]:
                h2_ok = False
        eN_new = k.const("Q_etaN") / delta * w * w
        eL_new = k.const("Q_etaL") / gd(k.tau + 1) * w * w
        ledger.append(LemmaStep(j, rho, delta, eL, eN, hyp, dK, dict(cur)))
        eL, eN = eL_new, eN_new
        rho = rho - 3 * delta
        delta = delta / 2
    d_final = min(k.delta, rho / 6 * (1 - 1e-12))
    if not d_final > 0:
        return LemmaLedger(ledger, h2_ok, False, None, "no strip left for the final check")
    final = check_kam_inequality(replace_rho(k, rho, d_final), eL, eN, d_final)
    ledger.append(LemmaStep(steps, rho, d_final, eL, eN, final.lhs, 0.0, dict(cur)))
    return LemmaLedger(ledger, h2_ok, True, final)


def replace_rho(k, rho, delta):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return replace(k, rho=rho, delta=delta)


def error_threshold(k, steps=10, ratio=1e-6, lo=1e-300, hi=1.0, iters=200):
    """Largest etaL (with etaN = ratio * etaL) for which the scheme succeeds.

    Bisection on log10 of the initial error.
    """
    ok = lambda e: run_iterative_lemma(k, e, ratio * e, steps).passed  # noqa: E731
    if not ok(lo):
        raise InfeasibleSchemeError("scheme fails even for the smallest initial error")
    if ok(hi):
        return hi
    a, b = math.log10(lo), math.log10(hi)
    for _ in range(iters):
        mid = 0.5 * (a + b)
        if ok(10**mid):
            a = mid
        else:
            b = mid
        if b - a < 1e-12:
            break
    return 10**a
