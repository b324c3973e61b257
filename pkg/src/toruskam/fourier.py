"""Real Fourier series on the m-torus.

Fields are arrays whose trailing ``m`` axes are the uniform product grid
``theta_j = 2*pi*i / N_j``.  Coefficients use the FFT ordering and the
normalisation ``f(theta) = sum_k f_k exp(i k.theta)``, so ``f_0`` is the
average.  Nyquist modes (any ``|k_j| = N_j/2``) carry no well-defined real
derivative; every spectral operator here zeroes them.

:class:`FourierMap` wraps a stack of scalar fields with lazily filled dual
storage (grid values and coefficients).  The module-level array helpers are
what the solver uses directly on stacks of matrix-valued fields.
"""

from __future__ import annotations

import itertools
import os
import tempfile
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.fft as sfft

from .errors import ConfigurationError, InsufficientDecayError, ResonanceError

SMALL_DIVISOR_FLOOR = 1e-300


def _workers():
    return int(os.environ.get("TORUSKAM_THREADS", "1"))


def _is_pow2(n):
    return n >= 1 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class GridSpec:
    """Discretisation of the m-torus: node counts per angle and oversampling."""

    sizes: tuple
    oversample: int = 2

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.sizes)
        object.__setattr__(self, "sizes", sizes)
        if len(sizes) < 1:
            raise ConfigurationError("grid needs at least one angle")
        for s in sizes:
            if s < 4 or not _is_pow2(s):
                raise ConfigurationError(f"grid size {s} is not a power of two >= 4")
        if int(self.oversample) < 1:
            raise ConfigurationError("oversample must be >= 1")

    @property
    def m(self):
        return len(self.sizes)

    @property
    def npoints(self):
        return int(np.prod(self.sizes))

    @classmethod
    def cube(cls, m, n, oversample=2):
        return cls((n,) * m, oversample)

    @classmethod
    def parse(cls, text, oversample=2):
        """Parse ``"64x64x64"`` (or ``"64"`` with m given separately)."""
        return cls(tuple(int(t) for t in text.lower().split("x")), oversample)

    def refined(self, factor=2):
        return GridSpec(tuple(s * factor for s in self.sizes), self.oversample)

    def fine(self):
        return GridSpec(tuple(s * self.oversample for s in self.sizes), 1)

    def __str__(self):
        return "x".join(str(s) for s in self.sizes)


# ---------------------------------------------------------------------------
# array-level helpers (grid axes last)
# ---------------------------------------------------------------------------


def angles(sizes, dtype=float):
    """Meshgrid of node angles, shape ``(m, *sizes)``."""
    axes = [np.arange(n, dtype=dtype) * (2 * np.pi / n) for n in sizes]
    return np.stack(np.meshgrid(*axes, indexing="ij"))


@lru_cache(maxsize=32)
def _wavenumbers(sizes):
    ks = [np.fft.fftfreq(n, 1.0 / n).round().astype(np.int64) for n in sizes]
    out = np.stack(np.meshgrid(*ks, indexing="ij"))
    out.setflags(write=False)
    return out


def wavenumbers(sizes):
    """Integer wavenumbers in FFT order, shape ``(m, *sizes)`` (read-only)."""
    return _wavenumbers(tuple(sizes))


@lru_cache(maxsize=32)
def _nyquist_mask(sizes):
    k = _wavenumbers(sizes)
    mask = np.zeros(sizes, dtype=bool)
    for j, n in enumerate(sizes):
        mask |= np.abs(k[j]) == n // 2
    mask.setflags(write=False)
    return mask


def nyquist_mask(sizes):
    return _nyquist_mask(tuple(sizes))


def to_coeffs(values, m):
    axes = tuple(range(-m, 0))
    n = int(np.prod(values.shape[-m:]))
    return sfft.fftn(values, axes=axes, workers=_workers()) / n


def to_values(coeffs, m):
    axes = tuple(range(-m, 0))
    n = int(np.prod(coeffs.shape[-m:]))
    return sfft.ifftn(coeffs * n, axes=axes, workers=_workers()).real


def k_dot(sizes, omega):
    k = wavenumbers(sizes)
    return np.tensordot(np.asarray(omega, dtype=float), k, axes=(0, 0))


def derivative_coeffs(coeffs, j, m):
    """Coefficients of d/dtheta_j."""
    sizes = coeffs.shape[-m:]
    mult = 1j * wavenumbers(sizes)[j]
    mult = np.where(nyquist_mask(sizes), 0.0, mult)
    return coeffs * mult


def lie_coeffs(coeffs, omega, m):
    """Coefficients of L_omega f = -Df omega."""
    sizes = coeffs.shape[-m:]
    mult = -1j * k_dot(sizes, omega)
    mult = np.where(nyquist_mask(sizes), 0.0, mult)
    return coeffs * mult


def _inverse_lie_multiplier(sizes, omega, floor):
    kw = k_dot(sizes, omega)
    mask = nyquist_mask(sizes).copy()
    mask.flat[0] = True
    small = (np.abs(kw) <= floor) & ~mask
    if small.any():
        idx = np.unravel_index(np.flatnonzero(small)[0], sizes)
        k = tuple(int(wavenumbers(sizes)[j][idx]) for j in range(len(sizes)))
        raise ResonanceError(k, float(kw[idx]))
    with np.errstate(divide="ignore", invalid="ignore"):
        mult = np.where(mask, 0.0, 1j / np.where(mask, 1.0, kw))
    return mult


def solve_cohomological_coeffs(coeffs, omega, m, floor=SMALL_DIVISOR_FLOOR):
    """Zero-average solution of L_omega f = s - <s> on the retained modes."""
    sizes = coeffs.shape[-m:]
    return coeffs * _inverse_lie_multiplier(tuple(sizes), tuple(np.asarray(omega, float)), floor)


def apply_R(values, omega, m, floor=SMALL_DIVISOR_FLOOR):
    """Grid-to-grid version of the small-divisor operator R."""
    return to_values(solve_cohomological_coeffs(to_coeffs(values, m), omega, m, floor), m)


def grid_mean(values, m):
    return values.mean(axis=tuple(range(-m, 0)))


def resample_coeffs(coeffs, new_sizes, m):
    """Zero-pad or truncate a coefficient array to another grid.

    Nyquist modes of the source are dropped so the result stays real.
    """
    old = coeffs.shape[-m:]
    new_sizes = tuple(new_sizes)
    lead = coeffs.shape[:-m]
    out = np.zeros(lead + new_sizes, dtype=complex)
    src = np.where(nyquist_mask(old), 0.0, coeffs)
    sl_src, sl_dst = [], []
    for n_old, n_new in zip(old, new_sizes):
        h = min(n_old, n_new) // 2
        # keep k in (-h, h)
        sl_src.append((slice(0, h), slice(n_old - h + 1, n_old)))
        sl_dst.append((slice(0, h), slice(n_new - h + 1, n_new)))
    for choice in itertools.product((0, 1), repeat=m):
        s = tuple(sl_src[j][c] for j, c in enumerate(choice))
        d = tuple(sl_dst[j][c] for j, c in enumerate(choice))
        out[(Ellipsis,) + d] = src[(Ellipsis,) + s]
    return out


def evaluate_at(coeffs, theta, m):
    """Evaluate a coefficient stack at arbitrary (possibly complex) angles.

    ``theta`` has shape ``(P, m)``; returns ``(*lead, P)``.  The sum is
    contracted one axis at a time, so each point costs O(prod(N)).
    """
    sizes = coeffs.shape[-m:]
    c = np.where(nyquist_mask(sizes), 0.0, coeffs)
    theta = np.atleast_2d(theta)
    freqs = [np.fft.fftfreq(n, 1.0 / n) for n in sizes]
    out = []
    for th in theta:
        acc = c
        for j in range(m - 1, -1, -1):
            acc = acc @ np.exp(1j * freqs[j] * th[j])
        out.append(acc)
    res = np.stack(out, axis=-1)
    if np.isrealobj(theta):
        return res.real
    return res


# ---------------------------------------------------------------------------
# FourierMap
# ---------------------------------------------------------------------------


class FourierMap:
    """A stack of ``c`` real scalar fields on the torus.

    Built from either grid values ``(c, *sizes)`` or coefficients; the other
    representation is computed on first access and cached.  Instances are
    treated as immutable.
    """

    def __init__(self, spec, values=None, coeffs=None):
        if (values is None) == (coeffs is None):
            raise ValueError("pass exactly one of values or coeffs")
        self.spec = spec
        arr = values if values is not None else coeffs
        arr = np.asarray(arr)
        if arr.ndim == spec.m:
            arr = arr[None]
        if tuple(arr.shape[-spec.m:]) != spec.sizes:
            raise ConfigurationError(
                f"array shape {arr.shape} does not match grid {spec.sizes}"
            )
        self._values = np.asarray(arr, dtype=float) if values is not None else None
        self._coeffs = np.asarray(arr, dtype=complex) if coeffs is not None else None

    @classmethod
    def from_function(cls, spec, func):
        """Sample ``func(theta)`` where ``theta`` has shape ``(m, *sizes)``."""
        return cls(spec, values=np.asarray(func(angles(spec.sizes))))

    @property
    def ncomp(self):
        arr = self._values if self._values is not None else self._coeffs
        return arr.shape[0]

    @property
    def values(self):
        if self._values is None:
            self._values = to_values(self._coeffs, self.spec.m)
        return self._values

    @property
    def coeffs(self):
        if self._coeffs is None:
            self._coeffs = to_coeffs(self._values, self.spec.m)
        return self._coeffs

    def __getitem__(self, idx):
        if self._values is not None:
            return FourierMap(self.spec, values=self._values[idx])
        return FourierMap(self.spec, coeffs=self._coeffs[idx])

    def __add__(self, other):
        return FourierMap(self.spec, coeffs=self.coeffs + other.coeffs)

    def __sub__(self, other):
        return FourierMap(self.spec, coeffs=self.coeffs - other.coeffs)

    def scale(self, a):
        return FourierMap(self.spec, coeffs=self.coeffs * a)

    def derivative(self, j):
        return FourierMap(self.spec, coeffs=derivative_coeffs(self.coeffs, j, self.spec.m))

    def resample(self, spec):
        return FourierMap(spec, coeffs=resample_coeffs(self.coeffs, spec.sizes, self.spec.m))

    def __call__(self, theta):
        return evaluate_at(self.coeffs, theta, self.spec.m)

    def __repr__(self):
        return f"FourierMap(components={self.ncomp}, grid={self.spec})"


def transform(fmap, direction):
    """Populate the requested representation of ``fmap``.

    ``direction`` is ``"grid->coeff"`` or ``"coeff->grid"``.  Returns the same
    map for chaining.
    """
    if direction in ("grid->coeff", "coeff"):
        fmap.coeffs
    elif direction in ("coeff->grid", "grid"):
        fmap.values
    else:
        raise ValueError(f"unknown direction {direction!r}")
    return fmap


def lie_derivative(f, omega):
    return FourierMap(f.spec, coeffs=lie_coeffs(f.coeffs, omega, f.spec.m))


def solve_cohomological(s, omega, floor=SMALL_DIVISOR_FLOOR):
    return FourierMap(
        s.spec, coeffs=solve_cohomological_coeffs(s.coeffs, omega, s.spec.m, floor)
    )


def average(f):
    """Per-component average (the zero mode)."""
    return f.coeffs[(Ellipsis,) + (0,) * f.spec.m].real.copy()


def strip_norms(coeffs, rho, m):
    """Weighted l1 norms sum |f_k| exp(rho |k|_1), one per leading index."""
    sizes = coeffs.shape[-m:]
    k1 = np.abs(wavenumbers(sizes)).sum(axis=0)
    w = np.exp(rho * k1)
    return (np.abs(coeffs) * w).sum(axis=tuple(range(-m, 0)))


def strip_norm(f, rho):
    """Analytic norm on the strip of half-width ``rho`` (max over components)."""
    if rho < 0:
        raise ValueError("rho must be nonnegative")
    return float(np.max(strip_norms(f.coeffs, rho, f.spec.m)))


def collapsed_magnitudes(coeffs, j, m):
    """Sum of |f_k| over all indices except k_j: the univariate majorant series.

    Returns ``(k_j, magnitude)`` sorted by k_j.
    """
    sizes = coeffs.shape[-m:]
    other = tuple(ax for ax in range(-m, 0) if ax != j - m)
    mags = np.abs(coeffs).sum(axis=other)
    while mags.ndim > 1:
        mags = mags.sum(axis=0)
    k = np.fft.fftfreq(sizes[j], 1.0 / sizes[j]).round().astype(int)
    order = np.argsort(k)
    return k[order], mags[order]


def fit_strip_coeffs(coeffs, j, m, kmin=2, kmax=None, floor_factor=1e3):
    """Least-squares decay rate of the collapsed magnitudes along angle ``j``."""
    sizes = coeffs.shape[-m:]
    if kmax is None:
        kmax = sizes[j] // 4
    k, mags = collapsed_magnitudes(coeffs, j, m)
    noise = floor_factor * np.finfo(float).eps * mags.max()
    use = (np.abs(k) >= kmin) & (np.abs(k) <= kmax) & (mags > noise)
    if use.sum() < 8:
        raise InsufficientDecayError(
            f"only {int(use.sum())} usable magnitudes along angle {j} (need 8)"
        )
    slope, _ = np.polyfit(np.abs(k[use]), np.log(mags[use]), 1)
    return -slope


def fit_strip(f, angle_index, kmin=2, kmax=None):
    """Estimate the analyticity strip of ``f`` along one angle.

    ``f`` may be a real :class:`FourierMap` (one component is used, the first)
    or a raw coefficient array, e.g. of a complexified component such as
    ``K_ell + i K_L``.
    """
    if isinstance(f, FourierMap):
        return fit_strip_coeffs(f.coeffs[0], angle_index, f.spec.m, kmin, kmax)
    coeffs = np.asarray(f)
    return fit_strip_coeffs(coeffs, angle_index, coeffs.ndim, kmin, kmax)


# ---------------------------------------------------------------------------
# TORUSKAM v1 files
# ---------------------------------------------------------------------------

MAGIC = "TORUSKAM v1"


def _fmt(v):
    if isinstance(v, (list, tuple, np.ndarray)):
        return " ".join(_fmt(x) for x in np.ravel(v))
    if isinstance(v, (float, np.floating)):
        return float(v).hex()
    return str(v)


def _atomic_write(path, text):
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_map(path, fmap, meta=None):
    """Write grid values of ``fmap`` plus ``meta`` key-values as TORUSKAM v1.

    Floats are stored as hexadecimal text, so a round trip is bit-exact.
    The write is atomic (temporary file, then rename).
    """
    meta = dict(meta or {})
    head = [
        MAGIC,
        f"dim = {fmap.spec.m}",
        f"sizes = {' '.join(str(n) for n in fmap.spec.sizes)}",
        f"components = {fmap.ncomp}",
        f"precision_bits = {np.finfo(float).nmant + 1}",
        f"oversample = {fmap.spec.oversample}",
    ]
    for k, v in meta.items():
        if v is None:
            continue
        head.append(f"{k} = {_fmt(v)}")
    head.append("data = values")
    body = "\n".join(map(float.hex, np.ascontiguousarray(fmap.values, dtype=float).ravel()))
    _atomic_write(path, "\n".join(head) + "\n" + body + "\n")


def _parse_scalar(text):
    text = text.strip()
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float.fromhex(text) if ("0x" in text or "inf" in text or "nan" in text) else float(text)
    except ValueError:
        return text


def parse_meta_value(text):
    parts = text.split()
    vals = [_parse_scalar(p) for p in parts]
    return vals[0] if len(vals) == 1 else vals


def read_map(path):
    """Read a TORUSKAM v1 file; returns ``(FourierMap, meta)``."""
    with open(path) as fh:
        first = fh.readline().strip()
        if first != MAGIC:
            raise ConfigurationError(f"{path}: not a {MAGIC} file")
        meta = {}
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, val = line.partition("=")
            key = key.strip()
            if key == "data":
                if val.strip() != "values":
                    raise ConfigurationError(f"{path}: unsupported data layout {val.strip()!r}")
                break
            meta[key] = parse_meta_value(val)
        else:
            raise ConfigurationError(f"{path}: missing data section")
        raw = fh.read().split()
    sizes = tuple(np.atleast_1d(meta.pop("sizes")).astype(int).tolist())
    ncomp = int(meta.pop("components"))
    dim = int(meta.pop("dim"))
    meta.pop("precision_bits", None)
    over = int(meta.pop("oversample", 2))
    if len(sizes) != dim:
        raise ConfigurationError(f"{path}: dim/sizes mismatch")
    expect = ncomp * int(np.prod(sizes))
    if len(raw) != expect:
        raise ConfigurationError(f"{path}: expected {expect} values, found {len(raw)}")
    vals = np.fromiter((float.fromhex(t) for t in raw), dtype=float, count=expect)
    spec = GridSpec(sizes, oversample=over)
    return FourierMap(spec, values=vals.reshape((ncomp,) + sizes)), meta
