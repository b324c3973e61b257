"""Command-line driver: configuration, torus files, reports and plot data."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import fourier, geometry, kamcheck, nbody, oracle, solver
from .errors import ConfigurationError, EstimateError, ToruskamError
from .fourier import GridSpec

log = logging.getLogger("toruskam")

# published first-order estimate, used when the estimator finds no root
DEFAULT_G0_FALLBACK = 2.17647359010273488684

PUBLISHED_H2 = {
    "sigma_DK": 4.7811815833,
    "sigma_DKT": 6.8755882886,
    "sigma_B": 7.35806411265,
    "sigma_N": 3.5704498717,
    "sigma_NT": 2.8621242724,
    "sigma_Tinv": 354.07743243,
}
PUBLISHED_H1 = {"c_XH": 0.09, "c_DXH": 129.0, "c_DXHT": 129.0, "c_DDXH": 5e10}
PUBLISHED_GAMMA, PUBLISHED_TAU = 1.69e-6, 2.4


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass
class RunConfig:
    masses: tuple = nbody.SJS_MASSES
    mu0: float = nbody.SJS_MU0
    Gtot: float = nbody.SJS_GTOT
    omega: tuple = nbody.SJS_OMEGA
    grid: str = "64x64x64"
    oversample: int = 2
    precision: str = "double"
    G0: float | None = None
    G0_fallback: float = DEFAULT_G0_FALLBACK
    estimate_grid: str | None = None
    # continuation
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
    accept: float = 1e-5
    accept_growth: float = 10.0
    accept_max: float = 1e-5
    accept_reduction: float = 10.0
    # G0 tuning
    lam_tol: float = 1e-10
    max_outer: int = 6
    warm_start: bool = True
    # refinement
    refine_double: bool = False
    refine_maxiter: int = 6
    # flow verification
    t_end: float = 1e3
    verify_samples: int = 20
    verify_checkpoints: int = 11
    verify_tol: float = 1e-13
    verify_bound: float = 1e-8
    seed: int = 0
    # kamcheck
    rho: float = 0.1
    tube_radius: float = 1e-4
    h1_samples: int = 100_000
    tau: float = PUBLISHED_TAU
    gamma: float = PUBLISHED_GAMMA
    kmax: int = 200
    lemma_steps: int = 10
    # run control
    out: str = "toruskam-out"
    checkpoint_every: int = 1
    keep_checkpoints: bool = False
    threads: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self):
        self.masses = tuple(float(v) for v in np.atleast_1d(self.masses))
        self.omega = tuple(float(v) for v in np.atleast_1d(self.omega))
        if self.precision not in ("double", "extended-double"):
            raise ConfigurationError(f"unknown precision mode {self.precision!r}")
        if self.precision != "double":
            raise ConfigurationError(
                "extended-double is not supported: the linear algebra and the "
                "Hamiltonian evaluation run in binary64 only"
            )
        self.grid_spec()
        if self.estimate_grid is not None:
            GridSpec.parse(self.estimate_grid)
        self.params()
        self.plan()
        if self.threads < 1 or self.checkpoint_every < 1:
            raise ConfigurationError("threads and checkpoint_every must be >= 1")
        if self.t_end <= 0 or self.verify_samples < 1 or self.verify_checkpoints < 2:
            raise ConfigurationError("bad flow-verification settings")
        if self.rho < 0 or self.tube_radius <= 0 or self.kmax < 1:
            raise ConfigurationError("bad kamcheck settings")

    def grid_spec(self):
        try:
            return GridSpec.parse(self.grid, oversample=self.oversample)
        except ValueError as exc:
            raise ConfigurationError(str(exc)) from exc

    def params(self, mu=0.0):
        return nbody.SystemParams(masses=self.masses, mu=mu, mu0=self.mu0, Gtot=self.Gtot,
                                  omega=self.omega)

    def plan(self):
        try:
            return solver.ContinuationPlan(
                mu_end=self.mu0, step=self.step, min_step=self.min_step, max_step=self.max_step,
                grow=self.grow, shrink=self.shrink, tol=self.tol, maxiter=self.maxiter,
                fast_iters=self.fast_iters, divergence=self.divergence,
                saturation=self.saturation, accept=self.accept,
                accept_growth=self.accept_growth, accept_max=self.accept_max,
                accept_reduction=self.accept_reduction,
            )
        except ValueError as exc:
            raise ConfigurationError(str(exc)) from exc

    def to_text(self):
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if v is None:
                continue
            if isinstance(v, tuple):
                v = " ".join(repr(x) for x in v)
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


def _coerce(f, text):
    text = text.strip()
    tp = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
    if text.lower() in ("none", "auto", ""):
        if "None" in tp:
            return None
        raise ConfigurationError(f"{f.name} needs a value")
    try:
        if tp.startswith("tuple"):
            return tuple(float(x) for x in text.replace(",", " ").split())
        if tp.startswith("bool"):
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if tp.startswith("int"):
            return int(float(text))
        if tp.startswith("float"):
            return float.fromhex(text) if "0x" in text.lower() else float(text)
        return text
    except ValueError as exc:
        raise ConfigurationError(f"bad value for {f.name}: {text!r}") from exc


def parse_config_text(text, base=None):
    """Flat ``key = value`` text (``#`` comments) on top of ``base``."""
    known = {f.name: f for f in fields(RunConfig)}
    values = {} if base is None else {f: getattr(base, f) for f in known}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected key = value")
        key, _, val = line.partition("=")
        key = key.strip()
        if key not in known:
            raise ConfigurationError(f"line {lineno}: unknown key {key!r}")
        values[key] = _coerce(known[key], val)
    return RunConfig(**values)


def load_config(path=None, overrides=None):
    text = ""
    if path is not None:
        with open(path) as fh:
            text = fh.read()
    cfg = parse_config_text(text)
    if overrides:
        cfg = parse_config_text("\n".join(f"{k} = {v}" for k, v in overrides.items()), cfg)
    return cfg


# ---------------------------------------------------------------------------
# torus files and reports
# ---------------------------------------------------------------------------


def save_state(path, state, **extra):
    p = state.params
    meta = {
        "mu": p.mu,
        "omega": list(p.omega),
        "G0": state.G0,
        "lambda": state.lam,
        "masses": list(p.masses),
        "Gtot": p.Gtot,
        "mu0": p.mu0,
        "invariance_error": float(state.invariance_error),
    }
    meta.update(extra)
    fourier.write_map(path, state.K, meta)


def load_state(path):
    """Returns ``(TorusState, extra_meta)``."""
    K, meta = fourier.read_map(path)
    lst = lambda v: list(np.atleast_1d(v).astype(float))  # noqa: E731
    try:
        params = nbody.SystemParams(
            masses=lst(meta.pop("masses", nbody.SJS_MASSES)),
            mu=float(meta.pop("mu")),
            mu0=float(meta.pop("mu0", nbody.SJS_MU0)),
            Gtot=float(meta.pop("Gtot", nbody.SJS_GTOT)),
            omega=lst(meta.pop("omega")),
        )
        state = geometry.TorusState(
            K, lst(meta.pop("lambda")), lst(meta.pop("G0")), params,
            float(meta.pop("invariance_error", float("nan"))),
        )
    except KeyError as exc:
        raise ConfigurationError(f"{path}: missing key {exc}") from exc
    if K.ncomp != params.dim:
        raise ConfigurationError(f"{path}: {K.ncomp} components for a {params.dim}-dim system")
    return state, meta


class Reporter:
    """Appends JSON-lines records to a file (and optionally echoes them)."""

    def __init__(self, path, echo=False):
        self.path = path
        self.echo = echo
        if path is not None:
            os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)

    def __call__(self, record, /, **rec):
        rec = {"record": record, **rec}
        line = json.dumps(rec, default=_json_default, sort_keys=False)
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(line + "\n")
        if self.echo:
            print(line)
        return rec


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(type(o))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _out(cfg, name):
    os.makedirs(cfg.out, exist_ok=True)
    return os.path.join(cfg.out, name)


def _write_effective_config(cfg):
    fourier._atomic_write(_out(cfg, "config.effective"), cfg.to_text())


def cmd_continue(cfg, resume=None):
    """First-order G0, continuation to mu0, then G0 tuning for lambda = 0."""
    _write_effective_config(cfg)
    report = Reporter(_out(cfg, "report.jsonl"))
    spec = cfg.grid_spec()
    params = cfg.params()
    plan = cfg.plan()
    if cfg.mu0 == 0:
        G0 = cfg.G0 if cfg.G0 is not None else cfg.G0_fallback
        st = geometry.flat_state(params, spec, G0)
        st.invariance_error = solver.invariance_error(st)
        save_state(_out(cfg, "torus.tk"), st, stage="final")
        report("final", G0=G0, lam=st.lam, error=st.invariance_error)
        return 0

    start, step, G0 = None, None, cfg.G0
    if resume is not None:
        start, meta = load_state(resume)
        if start.spec.sizes != spec.sizes:
            start = start.replace(K=start.K.resample(spec))
        step = meta.get("next_step")
        G0 = float(start.G0[0])
        report("resume", path=resume, mu=start.mu, stage=meta.get("stage"))
    elif G0 is None:
        est_spec = GridSpec.parse(cfg.estimate_grid) if cfg.estimate_grid else spec
        try:
            G0 = solver.estimate_G0_first_order(params, est_spec)
            report("G0_estimate", G0=G0, grid=str(est_spec))
        except EstimateError as exc:
            G0 = cfg.G0_fallback
            log.warning("first-order estimate failed (%s); using G0 = %r", exc, G0)
            report("G0_estimate", G0=None, fallback=G0, reason=str(exc))

    count = {"n": 0}

    def on_step(state, rep, next_step):
        for r in rep.to_dicts():
            report("newton", stage="continue", **r)
        report("mu_step", mu=state.mu, error=rep.final_error, lam=state.lam, next_step=next_step)
        count["n"] += 1
        if count["n"] % cfg.checkpoint_every == 0 or state.mu >= plan.mu_end:
            save_state(_out(cfg, "checkpoint.tk"), state, stage="continue", next_step=next_step)
            if cfg.keep_checkpoints:
                save_state(_out(cfg, f"checkpoint-{count['n']:04d}.tk"), state, stage="continue",
                           next_step=next_step)

    if start is None or start.mu < plan.mu_end:
        state, _ = solver.continue_to_mu0(plan, params, spec, G0, start=start,
                                          callback=on_step, step=step)
    else:
        state = start
    report("continued", mu=state.mu, G0=state.G0, lam=state.lam, error=state.invariance_error)

    def on_solve(g, st):
        report("tune", G0=g, lam=st.lam, error=st.invariance_error)
        save_state(_out(cfg, "checkpoint.tk"), st, stage="tune")

    G0, state, hist = solver.tune_G0_for_zero_lambda(
        params, plan, spec, float(state.G0[0]), lam_tol=cfg.lam_tol, max_outer=cfg.max_outer,
        warm_start=cfg.warm_start, start=state, callback=on_step, on_solve=on_solve,
    )
    save_state(_out(cfg, "torus.tk"), state, stage="final")
    report("final", G0=G0, lam=state.lam, error=state.invariance_error,
           moment_error=state.moment_error(), outer_iterations=len(hist) - 1, history=hist)
    return 0 if abs(state.lam).max() <= cfg.lam_tol else 3


def refine_state(state, maxiter=6, double=False):
    """Invariant-torus Newton to saturation; returns ``(state, report)``."""
    if double:
        state = state.replace(K=state.K.resample(state.spec.refined()))
    st = state.replace(lam=np.zeros_like(state.lam))
    return solver.newton_solve(st, step=solver.invariant_newton_step, tol=0.0,
                               maxiter=maxiter, translated=False)


def cmd_refine(cfg, torus_path):
    report = Reporter(_out(cfg, "report.jsonl"))
    state, _ = load_state(torus_path)
    new, rep = refine_state(state, cfg.refine_maxiter, cfg.refine_double)
    for r in rep.to_dicts():
        report("newton", stage="refine", **r)
    report("refined", grid=str(new.spec), error=rep.final_error, errors=rep.errors)
    save_state(_out(cfg, "refined.tk"), new, stage="refined")
    return 0


def torus_error_norms(state, rho):
    """Strip norms of the tangent/normal invariance errors (invariant form)."""
    frames = geometry.build_frames(state, need_torsion=False)
    etaL, etaN, _, sup = geometry.project_error(state, frames, translated=False)
    m = state.spec.m
    nL = kamcheck.matrix_strip_norm(etaL[..., None], rho, m)
    nN = kamcheck.matrix_strip_norm(etaN[..., None], rho, m)
    return nL, nN, sup


def read_constants(path):
    """Key-value constants file: theorem constants plus optional overrides."""
    out = {}
    if path is None:
        return out
    with open(path) as fh:
        for raw in fh:
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            k, _, v = line.partition("=")
            out[k.strip()] = float(v)
    return out


def cmd_kamcheck(cfg, torus_path, constants_path=None, emit=print):
    consts = read_constants(constants_path)
    rep = Reporter(_out(cfg, "kamcheck.jsonl"))

    def rec(record, **kw):
        r = rep(record, **kw)
        if emit is not None:
            emit(json.dumps(r, default=_json_default))

    state, _ = load_state(torus_path)
    rho = consts.pop("rho", cfg.rho)
    tau = consts.pop("tau", cfg.tau)
    gamma = consts.pop("gamma", cfg.gamma)
    delta = consts.pop("delta", rho / 6)
    h1 = kamcheck.estimate_H1(kamcheck.Neighborhood(state, rho, cfg.tube_radius),
                              samples=cfg.h1_samples, seed=cfg.seed)
    for name, v in zip(("c_XH", "c_DXH", "c_DXHT", "c_DDXH"), h1):
        rec("H1", name=name, value=v, reference=PUBLISHED_H1[name])
    frames = geometry.build_frames(state)
    h2 = kamcheck.estimate_H2(state, frames, rho)
    for name, v in h2.strip.items():
        rec("H2", name=name, strip=v, sup=h2.sup[name], reference=PUBLISHED_H2[name])
    g_est, k_arg = kamcheck.estimate_diophantine(state.omega, tau, cfg.kmax)
    rec("diophantine", tau=tau, kmax=cfg.kmax, gamma_estimate=g_est, k=k_arg,
        gamma_used=gamma, consistent=bool(gamma <= g_est))
    nL, nN, sup = torus_error_norms(state, rho)
    rec("errors", etaL=nL, etaN=nN, grid_sup=sup)
    overrides = {k: consts.pop(k) for k in list(consts) if k in ("etaL", "etaN")}
    theorem = {k: v for k, v in consts.items() if k in kamcheck.THEOREM_CONSTANT_NAMES}
    unknown = set(consts) - set(theorem)
    if unknown:
        raise ConfigurationError(f"unknown constants: {sorted(unknown)}")
    sig = h2.sigmas()
    k = kamcheck.KamConstants(*h1, **sig, gamma=gamma, tau=tau, rho=rho, delta=delta,
                              m=state.spec.m, theorem_constants=theorem)
    eL, eN = overrides.get("etaL", nL), overrides.get("etaN", nN)
    ledger = kamcheck.run_iterative_lemma(k, eL, eN, cfg.lemma_steps)
    for s in ledger.steps:
        rec("lemma", **asdict(s))
    final = ledger.final
    rec("verdict", passed=ledger.passed, feasible=ledger.feasible, h2_ok=ledger.h2_ok,
        reason=ledger.reason, lhs=None if final is None else final.lhs,
        margin=None if final is None else final.margin)
    return 0 if ledger.passed else 2


def _write_columns(path, header, cols):
    arr = np.column_stack(cols)
    lines = ["# " + header] + [" ".join(repr(float(x)) for x in row) for row in arr]
    fourier._atomic_write(path, "\n".join(lines) + "\n")


def cmd_export(cfg, torus_path, projection, stride=1):
    state, _ = load_state(torus_path)
    p = state.params
    n, m = p.n, p.m
    z = state.node_points().reshape(-1, p.dim)[::stride]
    files = []
    if projection == "delaunay":
        for i in range(n):
            path = _out(cfg, f"delaunay_planet{i + 1}.dat")
            _write_columns(path, f"ell{i + 1} L{i + 1}", [z[:, i] % (2 * np.pi), z[:, m + i]])
            files.append(path)
        for i in range(n - 1):
            path = _out(cfg, f"delaunay_ghat{i + 1}.dat")
            _write_columns(path, f"ghat{i + 1} Ghat{i + 1}",
                           [z[:, n + i] % (2 * np.pi), z[:, m + n + i]])
            files.append(path)
    elif projection == "cartesian":
        # g_n advances at the mean rate; spread nodes over its circle
        nu = nbody.g_hat_n_frequency(state.node_points(), p)
        rng = np.random.default_rng(cfg.seed)
        phi = rng.uniform(0, 2 * np.pi, z.shape[0])
        x, _ = nbody.cartesian_from_reduced(z, p)
        c, s = np.cos(phi), np.sin(phi)
        for i in range(n):
            xi, yi = x[:, i, 0], x[:, i, 1]
            path = _out(cfg, f"cartesian_planet{i + 1}.dat")
            _write_columns(path, f"x{i + 1} y{i + 1}  (g_n rate {nu!r})",
                           [c * xi - s * yi, s * xi + c * yi])
            files.append(path)
    elif projection == "fourier-decay":
        for comp in range(p.dim):
            for j in range(m):
                k, mags = fourier.collapsed_magnitudes(state.K.coeffs[comp], j, m)
                try:
                    rho = fourier.fit_strip_coeffs(state.K.coeffs[comp], j, m)
                except ToruskamError:
                    rho = float("nan")
                path = _out(cfg, f"decay_c{comp}_a{j}.dat")
                _write_columns(path, f"k |f_k| component={comp} angle={j} fitted_rho={rho!r}",
                               [k, mags])
                files.append(path)
    else:
        raise ConfigurationError(f"unknown projection {projection!r}")
    for f in files:
        print(f)
    return 0


def complex_components(state):
    """Complexified fields ell_i + i L_i and ghat + i Ghat, as coefficient arrays."""
    p = state.params
    m = p.m
    c = state.K.coeffs
    return {f"z{j}": c[j] + 1j * c[m + j] for j in range(m)}


def fit_strips(state):
    """Fitted strip widths per complexified component and angle."""
    out = {}
    for name, coeffs in complex_components(state).items():
        row = []
        for j in range(state.spec.m):
            try:
                row.append(fourier.fit_strip(coeffs, j))
            except ToruskamError:
                row.append(float("nan"))
        out[name] = row
    return out


def cmd_fit_strips(cfg, torus_path):
    state, _ = load_state(torus_path)
    for name, row in fit_strips(state).items():
        print(json.dumps({"record": "strip", "component": name, "rho": row}))
    return 0


def cmd_verify(cfg, torus_path):
    state, _ = load_state(torus_path)
    worst, per = oracle.verify_torus_by_flow(
        state, t_end=cfg.t_end, sample_thetas=cfg.verify_samples,
        checkpoints=cfg.verify_checkpoints, tol=cfg.verify_tol, seed=cfg.seed,
    )
    print(f"max_deviation = {worst!r}")
    print(f"median_deviation = {float(np.median(per))!r}")
    print(f"samples = {len(per)}")
    print(f"t_end = {cfg.t_end!r}")
    print(f"bound = {cfg.verify_bound!r}")
    print(f"pass = {str(worst <= cfg.verify_bound).lower()}")
    return 0 if worst <= cfg.verify_bound else 1


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser():
    ap = argparse.ArgumentParser(prog="toruskam", description=__doc__)
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, torus=False):
        p.add_argument("--config", help="key = value configuration file")
        p.add_argument("--out", help="output directory")
        p.add_argument("--grid", help="grid such as 64x64x64")
        p.add_argument("--mu0", type=float, help="final coupling")
        p.add_argument("--threads", type=int, help="FFT worker threads")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override any configuration key")
        if torus:
            p.add_argument("--torus", required=True, help="TORUSKAM v1 torus file")

    p = sub.add_parser("continue", help="continuation from the Kepler torus and G0 tuning")
    common(p)
    p.add_argument("--resume", help="checkpoint to resume from")
    p = sub.add_parser("refine", help="invariant-torus Newton refinement")
    common(p, torus=True)
    p = sub.add_parser("kamcheck", help="estimate KAM constants and check the inequality")
    common(p, torus=True)
    p.add_argument("--constants", help="key = value file with theorem constants")
    p = sub.add_parser("export", help="columnar plot data")
    common(p, torus=True)
    p.add_argument("--projection", choices=("delaunay", "cartesian", "fourier-decay"),
                   default="delaunay")
    p.add_argument("--stride", type=int, default=1)
    p = sub.add_parser("verify", help="compare the torus with direct integration")
    common(p, torus=True)
    p = sub.add_parser("fit-strips", help="fitted analyticity strips")
    common(p, torus=True)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(asctime)s %(levelname)s %(message)s",
    )
    overrides = {}
    for item in args.set:
        k, _, v = item.partition("=")
        overrides[k.strip()] = v
    for key in ("out", "grid", "mu0", "threads"):
        v = getattr(args, key, None)
        if v is not None:
            overrides[key] = v
    try:
        cfg = load_config(args.config, overrides)
        os.environ["TORUSKAM_THREADS"] = str(cfg.threads)
        t0 = time.perf_counter()
        if args.command == "continue":
            rc = cmd_continue(cfg, args.resume)
        elif args.command == "refine":
            rc = cmd_refine(cfg, args.torus)
        elif args.command == "kamcheck":
            rc = cmd_kamcheck(cfg, args.torus, args.constants)
        elif args.command == "export":
            rc = cmd_export(cfg, args.torus, args.projection, args.stride)
        elif args.command == "verify":
            rc = cmd_verify(cfg, args.torus)
        else:
            rc = cmd_fit_strips(cfg, args.torus)
        log.info("%s finished in %.1f s", args.command, time.perf_counter() - t0)
        return rc
    except (ToruskamError, OSError) as exc:
        print(f"toruskam {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
