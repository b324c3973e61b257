"""Quasi-Newton schemes for translated and invariant tori, and the drivers around them."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import fourier, geometry, kepler, nbody
from .errors import (
    ContinuationError,
    DivergenceError,
    EstimateError,
    ToruskamError,
)
from .geometry import TorusState, flat_state, gf_R, gf_mean

log = logging.getLogger(__name__)

# Kepler-limit starting torus
flat_torus = flat_state


@dataclass
class StepRecord:
    mu: float
    error: float
    lam: list
    dlam: list
    etaG0: list
    step_norm: float
    cond: float
    seconds: float
    kind: str = "translated"


@dataclass
class NewtonReport:
    """Per-iteration diagnostics of a Newton solve at fixed mu."""

    records: list = field(default_factory=list)
    initial_error: float = float("nan")
    final_error: float = float("nan")
    converged: bool = False
    saturated: bool = False

    @property
    def errors(self):
        return [r.error for r in self.records] + [self.final_error]

    def to_dicts(self):
        return [asdict(r) for r in self.records]


@dataclass
class ContinuationPlan:
    """Adaptive mu schedule and per-step Newton controls."""

    mu_end: float = nbody.SJS_MU0
    step: float = 1e-4
    min_step: float = 1e-8
    max_step: float = 2.5e-4
    grow: float = 1.5
    shrink: float = 0.5
    tol: float = 1e-12
    maxiter: int = 8
    fast_iters: int = 3
    divergence: float = 1e3
    saturation: float = 0.5
    # a saturated step is accepted below max(accept, accept_growth * previous error) and
    # never above accept_max; it must improve on the predictor, and above accept by at
    # least the factor accept_reduction
    accept: float = 1e-5
    accept_growth: float = 10.0
    accept_max: float = 1e-5
    accept_reduction: float = 10.0

    def __post_init__(self):
        if self.mu_end < 0 or self.step <= 0 or self.min_step <= 0:
            raise ValueError("continuation steps must be positive and mu_end >= 0")


# ---------------------------------------------------------------------------
# single steps
# ---------------------------------------------------------------------------


def _apply_correction(state, frames, xiL, xiN, dlam=None):
    dK = np.einsum("...di,...i->...d", frames.DK, xiL) + np.einsum(
        "...di,...i->...d", frames.N, xiN
    )
    vals = state.K.values + np.moveaxis(dK, -1, 0)
    new = state.replace(K=fourier.FourierMap(state.spec, values=vals))
    if dlam is not None:
        new.lam = state.lam + dlam
    new.invariance_error = float("nan")
    return new


def translated_newton_step(state, return_parts=False):
    """One quasi-Newton correction of the translated-torus system.

    Returns ``(new_state, record)``; with ``return_parts`` also a dict with
    the linear-system pieces (used by the closure test).
    """
    t0 = time.perf_counter()
    params = state.params
    m = params.m
    omega = np.array(params.omega)
    frames = geometry.build_frames(state)
    etaL, etaN, etaG0, err = geometry.project_error(state, frames, translated=True)
    st = geometry.assemble_supertorsion(frames, omega)
    rhs, (etatL, RetaN, RetatL) = st.rhs(etaL, etaN, etaG0)
    sol = np.linalg.solve(st.matrix, rhs)
    xiN0, dlam = sol[:m], sol[m:]
    xiN = xiN0 + RetaN - st.RbN @ dlam
    xiL = RetatL - st.RT @ xiN0 - st.RbtL @ dlam
    new = _apply_correction(state, frames, xiL, xiN, dlam)
    record = StepRecord(
        mu=params.mu,
        error=err,
        lam=state.lam.tolist(),
        dlam=dlam.tolist(),
        etaG0=np.atleast_1d(etaG0).tolist(),
        step_norm=float(max(np.abs(xiL).max(), np.abs(xiN).max())),
        cond=float(np.linalg.cond(st.matrix)),
        seconds=time.perf_counter() - t0,
    )
    state.invariance_error = err
    if return_parts:
        parts = dict(
            frames=frames, etaL=etaL, etaN=etaN, etaG0=etaG0, xiL=xiL, xiN=xiN,
            xiN0=xiN0, dlam=dlam, supertorsion=st,
        )
        return new, record, parts
    return new, record


def invariant_newton_step(state, return_parts=False):
    """One Newton correction of the invariance equation (no counterterm)."""
    t0 = time.perf_counter()
    params = state.params
    m = params.m
    omega = np.array(params.omega)
    frames = geometry.build_frames(state)
    Tinv = geometry.averaged_torsion_inverse(frames)
    etaL, etaN, etaG0, err = geometry.project_error(state, frames, translated=False)
    RetaN = gf_R(etaN, omega, m)
    xiN0 = Tinv @ gf_mean(etaL - np.einsum("...ij,...j->...i", frames.T, RetaN), m)
    xiN = xiN0 + RetaN
    xiL = gf_R(etaL - np.einsum("...ij,...j->...i", frames.T, xiN), omega, m)
    new = _apply_correction(state, frames, xiL, xiN)
    record = StepRecord(
        mu=params.mu,
        error=err,
        lam=state.lam.tolist(),
        dlam=[0.0] * len(state.lam),
        etaG0=np.atleast_1d(etaG0).tolist(),
        step_norm=float(max(np.abs(xiL).max(), np.abs(xiN).max())),
        cond=float(np.linalg.cond(frames.avg_T)),
        seconds=time.perf_counter() - t0,
        kind="invariant",
    )
    state.invariance_error = err
    if return_parts:
        return new, record, dict(frames=frames, etaL=etaL, etaN=etaN, xiL=xiL, xiN=xiN, xiN0=xiN0)
    return new, record


def invariance_error(state, translated=True):
    _, sup = geometry.invariance_error_field(state, translated)
    return sup


def _newton_error(state, translated):
    """Invariance error, and for translated tori also the moment condition."""
    err = invariance_error(state, translated)
    state.invariance_error = err
    if translated:
        return max(err, float(np.abs(state.moment_error()).max()))
    return err


def newton_solve(state, step=translated_newton_step, tol=1e-12, maxiter=8,
                 divergence=1e3, saturation=0.5, translated=True):
    """Iterate ``step`` until the error is below ``tol`` or stops contracting.

    The error is the sup invariance error, maxed with the moment error
    |<Pi_Ghat K> - G0| for translated tori.  Stops at the first error that
    fails to drop by the factor ``saturation`` and returns the best state
    seen.  Raises :class:`DivergenceError` when the error grows by more than
    ``divergence`` over the initial one.
    """
    report = NewtonReport()
    err0 = _newton_error(state, translated)
    report.initial_error = err0
    best, best_err = state, err0
    current, err = state, err0
    if err0 < tol:
        report.final_error = err0
        report.converged = True
        return best, report
    for _ in range(maxiter):
        new, rec = step(current)
        report.records.append(rec)
        new_err = _newton_error(new, translated)
        if not np.isfinite(new_err) or new_err > divergence * err0:
            raise DivergenceError(f"invariance error grew from {err0:.3e} to {new_err:.3e}")
        if new_err < best_err:
            best, best_err = new, new_err
        if new_err < tol:
            report.converged = True
            break
        if new_err > saturation * err:
            report.saturated = True
            break
        current, err = new, new_err
    report.final_error = best_err
    return best, report


# ---------------------------------------------------------------------------
# first-order estimate of G0
# ---------------------------------------------------------------------------


def secular_average(params, spec, G):
    """<Pi_ghat X_{H1} o K_G> over the flat torus with Ghat = G (n = 2)."""
    st = flat_state(params.with_mu(0.0), spec, G)
    z = st.node_points().reshape(-1, params.dim)
    X1 = nbody.h1_vector_field(z, params)
    n = params.n
    return X1[:, n : 2 * n - 1].mean(axis=0)


def admissible_G_window(params, margin=1e-9):
    """Open interval of Ghat (n = 2) keeping both |G_i| < L_i on the flat torus."""
    L0 = kepler.action_from_frequency(params.omega_ell, np.array(params.masses))
    lo = max(-L0[0], params.Gtot - L0[1])
    hi = min(L0[0], params.Gtot + L0[1])
    if not lo < hi:
        raise EstimateError("no admissible Ghat for these parameters")
    pad = margin * (hi - lo)
    return lo + pad, hi - pad


def estimate_G0_first_order(params, spec, G_init=None, tol=1e-14, maxiter=50, scan=24):
    """Solve <Pi_ghat X_{H1} o K_G> = omega_ghat / mu0 for scalar Ghat (n = 2).

    The admissible window is scanned on ``scan`` points for sign changes of
    the residual; the bracket nearest ``G_init`` (default: window centre) is
    refined by secant steps safeguarded with bisection.  Raises
    :class:`EstimateError` when the residual has no sign change, which
    happens when the averaged field never reaches the target frequency.
    """
    if params.mu0 <= 0:
        raise EstimateError("mu0 must be positive")
    if params.n != 2:
        raise EstimateError("first-order estimate implemented for two planets")
    target = params.omega_ghat[0] / params.mu0
    lo, hi = admissible_G_window(params)
    if G_init is None:
        G_init = 0.5 * (lo + hi)
    f = lambda G: float(secular_average(params, spec, G)[0]) - target  # noqa: E731
    xs = np.linspace(lo, hi, scan)
    fs = np.array([f(x) for x in xs])
    brackets = [i for i in range(scan - 1) if np.sign(fs[i]) != np.sign(fs[i + 1])]
    if not brackets:
        raise EstimateError(
            f"<Pi_ghat X_H1> ranges over [{fs.min() + target:.6g}, {fs.max() + target:.6g}] "
            f"on Ghat in [{lo:.8g}, {hi:.8g}], never reaching omega_ghat/mu0 = {target:.6g}"
        )
    i = min(brackets, key=lambda j: abs(0.5 * (xs[j] + xs[j + 1]) - G_init))
    a, b, fa, fb = xs[i], xs[i + 1], fs[i], fs[i + 1]
    if fa == 0.0:
        return float(a)
    x0, f0, x1, f1 = a, fa, b, fb
    for _ in range(maxiter):
        x2 = x1 - f1 * (x1 - x0) / (f1 - f0) if f1 != f0 else 0.5 * (a + b)
        if not a < x2 < b:
            x2 = 0.5 * (a + b)
        f2 = f(x2)
        if f2 == 0.0:
            return float(x2)
        if np.sign(f2) == np.sign(fa):
            a, fa = x2, f2
        else:
            b, fb = x2, f2
        x0, f0, x1, f1 = x1, f1, x2, f2
        if abs(x1 - x0) <= tol * max(1.0, abs(x1)) or (b - a) <= tol * max(1.0, abs(b)):
            return float(x2)
    raise EstimateError("secant iteration for G0 did not converge")


# ---------------------------------------------------------------------------
# continuation and G0 tuning
# ---------------------------------------------------------------------------


def continue_to_mu0(plan, params, spec, G0, start=None, callback=None, step=None):
    """March mu from the start state (default: flat torus at mu = 0) to plan.mu_end.

    ``callback(state, report, next_step)`` is invoked after every accepted mu
    step; passing ``start`` and ``step`` from such a call resumes the run
    exactly.  Returns ``(state, reports)``.
    """
    state = start if start is not None else flat_state(params.with_mu(0.0), spec, G0)
    if not np.isfinite(state.invariance_error):
        state.invariance_error = invariance_error(state)
    reports = []
    mu = state.mu
    h = plan.step if step is None else step
    while mu < plan.mu_end:
        target = min(mu + h, plan.mu_end)
        trial = state.replace(params=state.params.with_mu(target))
        limit = max(1e3 * plan.tol, plan.accept, plan.accept_growth * state.invariance_error)
        limit = max(1e3 * plan.tol, min(limit, plan.accept_max))
        try:
            new, rep = newton_solve(
                trial, tol=plan.tol, maxiter=plan.maxiter,
                divergence=plan.divergence, saturation=plan.saturation,
            )
            if not (rep.converged or rep.saturated):
                raise DivergenceError("Newton did not settle")
            if rep.final_error > limit:
                raise DivergenceError(f"saturated at {rep.final_error:.3e} (limit {limit:.3e})")
            if not rep.converged and rep.final_error >= rep.initial_error:
                raise DivergenceError(f"Newton made no progress from {rep.initial_error:.3e}")
            if (rep.final_error > max(1e3 * plan.tol, plan.accept)
                    and rep.final_error * plan.accept_reduction > rep.initial_error):
                raise DivergenceError(
                    f"saturated at {rep.final_error:.3e} from {rep.initial_error:.3e} without progress"
                )
        except ToruskamError as exc:
            h *= plan.shrink
            log.info("mu=%.6g step failed (%s); step -> %.3g", target, exc, h)
            if h < plan.min_step:
                raise ContinuationError(f"step underflow at mu={mu:.6g}", last_state=state) from exc
            continue
        state, mu = new, target
        reports.append(rep)
        if len(rep.records) <= plan.fast_iters:
            h = min(h * plan.grow, plan.max_step)
        log.info("mu=%.6g err=%.3e lam=%s iters=%d", mu, rep.final_error, state.lam, len(rep.records))
        if callback is not None:
            callback(state, rep, h)
    return state, reports


def tune_G0_for_zero_lambda(params, plan, spec, G0_init, lam_tol=1e-12, max_outer=6,
                            warm_start=True, start=None, callback=None, on_solve=None):
    """Secant iteration on G0 -> lambda(G0) at mu0.

    The first evaluation runs a full continuation (unless ``start``, a torus
    at mu0, is given); later ones restart Newton from the previous mu0 torus
    (``warm_start``) or rerun the continuation.  ``on_solve(G0, state)`` is
    called after each solve.  Returns ``(G0, state, history)`` where history
    lists ``(G0, lambda)`` pairs; ``len(history) - 1`` is the number of outer
    iterations used.
    """
    history = []

    def solve_at(G0, warm):
        if warm is not None and warm_start:
            st = warm.replace(G0=np.atleast_1d(G0))
            st, _ = newton_solve(st, tol=plan.tol, maxiter=plan.maxiter + 4,
                                 divergence=plan.divergence, saturation=plan.saturation)
        else:
            st, _ = continue_to_mu0(plan, params, spec, G0, callback=callback)
        if on_solve is not None:
            on_solve(G0, st)
        return st

    state = start if start is not None else solve_at(G0_init, None)
    g_prev, lam_prev = float(state.G0[0]), float(state.lam[0])
    history.append((g_prev, lam_prev))
    if abs(lam_prev) <= lam_tol:
        return g_prev, state, history
    # slope from a nearby second solve
    g_cur = g_prev * (1 + 1e-6)
    state_cur = solve_at(g_cur, state)
    lam_cur = float(state_cur.lam[0])
    history.append((g_cur, lam_cur))
    best = min([(abs(lam_prev), g_prev, state), (abs(lam_cur), g_cur, state_cur)],
               key=lambda t: t[0])
    while len(history) - 1 < max_outer and abs(lam_cur) > lam_tol:
        if lam_cur == lam_prev:
            break
        slope = (lam_cur - lam_prev) / (g_cur - g_prev)
        g_new = g_cur - lam_cur / slope
        st_new = solve_at(g_new, state_cur if warm_start else None)
        lam_new = float(st_new.lam[0])
        history.append((g_new, lam_new))
        g_prev, lam_prev = g_cur, lam_cur
        g_cur, lam_cur, state_cur = g_new, lam_new, st_new
        if abs(lam_new) < best[0]:
            best = (abs(lam_new), g_new, st_new)
    if best[0] > lam_tol:
        log.warning("G0 tuning stopped with |lambda| = %.3e", best[0])
    return best[1], best[2], history
