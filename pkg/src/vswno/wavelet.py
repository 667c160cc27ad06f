"""Multilevel 1D/2D discrete wavelet transforms (Daubechies family).

Each decomposition level is realized as a pair of dense analysis matrices
(low/high band) acting on the last axis, with matching synthesis matrices
that invert the level exactly.  That keeps the arithmetic auditable (the
round-trip identity ``S_lo @ A_lo + S_hi @ A_hi == I`` holds per level to
machine precision) and gives the autodiff layer exact adjoints for free.

Boundary handling:

* ``periodic`` - circular convolution; odd lengths are padded by repeating
  the last sample before the level (the pad is folded into the matrices, and
  the recorded length restores the exact shape on inversion).  For even
  lengths the stacked analysis matrix is orthogonal, so energy is preserved.
* ``symmetric`` - half-sample reflection, repeated for very short signals;
  per-level output length is ``(n + taps - 1) // 2``.

Filter coefficients are embedded constants from the standard Daubechies
tables ("dbN" uses 2N taps); :func:`get_filter` checks orthonormality, the
quadrature-mirror relation and the zeroth vanishing moment before handing a
filter out, so a corrupted table fails fast rather than corrupting results.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

__all__ = [
    "WaveletError",
    "WaveletFilter",
    "WaveletCoefficients",
    "get_filter",
    "available_filters",
    "level_matrices",
    "max_periodic_levels",
    "dwt1d",
    "idwt1d",
    "dwt2d",
    "idwt2d",
]

MODES = ("periodic", "symmetric")

# Daubechies scaling (low-pass decomposition) filters, minimum phase,
# normalized to unit energy.  dbN has 2N coefficients.
_DEC_LO = {
    "db2": (
        0.48296291314453414337,
        0.83651630373780790558,
        0.22414386804201338103,
        -0.12940952255126038117,
    ),
    "db3": (
        0.332670552950082616,
        0.80689150931109257649,
        0.4598775021184915701,
        -0.1350110200102545887,
        -0.085441273882026661693,
        0.035226291885709536603,
    ),
    "db4": (
        0.23037781330889650086,
        0.71484657055291564709,
        0.63088076792985890788,
        -0.027983769416859854211,
        -0.18703481171909308408,
        0.030841381835560763627,
        0.032883011666885199735,
        -0.010597401785069032105,
    ),
    "db5": (
        0.16010239797419291448,
        0.60382926979718967054,
        0.72430852843777292773,
        0.13842814590132073151,
        -0.24229488706638203186,
        -0.032244869584638374648,
        0.077571493840045713523,
        -0.0062414902127982742742,
        -0.012580751999081999469,
        0.003335725285473771278,
    ),
    "db6": (
        0.11154074335010946362,
        0.49462389039845308568,
        0.75113390802109535068,
        0.31525035170919762909,
        -0.22626469396543982008,
        -0.12976686756726193556,
        0.097501605587323049102,
        0.027522865530305728626,
        -0.031582039317486029565,
        0.00055384220116149613925,
        0.0047772575109455106396,
        -0.0010773010853084795649,
    ),
}


class WaveletError(ValueError):
    """Raised for invalid decomposition requests or inconsistent coefficients."""


@dataclass(frozen=True)
class WaveletFilter:
    name: str
    dec_lo: tuple
    dec_hi: tuple
    rec_lo: tuple
    rec_hi: tuple
    taps: int

    def validate(self):
        lo = np.asarray(self.dec_lo)
        hi = np.asarray(self.dec_hi)
        if abs(np.sum(lo * lo) - 1.0) > 1e-12:
            raise WaveletError(f"{self.name}: low-pass taps are not orthonormal")
        qmf = np.array([(-1.0) ** k * self.dec_lo[self.taps - 1 - k] for k in range(self.taps)])
        if np.max(np.abs(hi - qmf)) > 1e-12:
            raise WaveletError(f"{self.name}: quadrature-mirror relation violated")
        if abs(np.sum(hi)) > 1e-12:
            raise WaveletError(f"{self.name}: high-pass taps do not sum to zero")
        if self.rec_lo != self.dec_lo[::-1] or self.rec_hi != self.dec_hi[::-1]:
            raise WaveletError(f"{self.name}: reconstruction taps are not time-reversed")


@lru_cache(maxsize=None)
def get_filter(name):
    """Look up a validated filter by name ('db2' .. 'db6')."""
    if name not in _DEC_LO:
        raise WaveletError(f"unknown wavelet {name!r}; available: {sorted(_DEC_LO)}")
    dec_lo = _DEC_LO[name]
    taps = len(dec_lo)
    dec_hi = tuple((-1.0) ** k * dec_lo[taps - 1 - k] for k in range(taps))
    filt = WaveletFilter(
        name=name,
        dec_lo=dec_lo,
        dec_hi=dec_hi,
        rec_lo=dec_lo[::-1],
        rec_hi=dec_hi[::-1],
        taps=taps,
    )
    filt.validate()
    return filt


def available_filters():
    return sorted(_DEC_LO)


def _fold_symmetric(j, n):
    # half-sample symmetric index fold, repeating for |j| beyond one period
    q = j % (2 * n)
    return q if q < n else 2 * n - 1 - q


def _build_periodic(n_eff, f):
    taps = len(f)
    t_out = n_eff // 2
    a = np.zeros((t_out, n_eff))
    for t in range(t_out):
        for k in range(taps):
            a[t, (2 * t + k) % n_eff] += f[k]
    return a


def _build_symmetric_analysis(n, f):
    taps = len(f)
    e = taps - 1
    t_out = (n + taps - 1) // 2
    a = np.zeros((t_out, n))
    for t in range(t_out):
        for k in range(taps):
            a[t, _fold_symmetric(2 * t + 1 + k - e, n)] += f[k]
    return a


def _build_symmetric_synthesis(n, f):
    taps = len(f)
    t_out = (n + taps - 1) // 2
    s = np.zeros((n, t_out))
    for j in range(n):
        for t in range(t_out):
            k = j + taps - 2 - 2 * t
            if 0 <= k < taps:
                s[j, t] = f[k]
    return s


@dataclass(frozen=True)
class LevelMatrices:
    """Analysis/synthesis operators for one decomposition level of length n."""

    n: int
    out_len: int
    a_lo: np.ndarray = field(repr=False)
    a_hi: np.ndarray = field(repr=False)
    s_lo: np.ndarray = field(repr=False)
    s_hi: np.ndarray = field(repr=False)


@lru_cache(maxsize=None)
def level_matrices(n, filter_name, mode):
    """Matrices for one level on signals of length n (cached per config)."""
    if mode not in MODES:
        raise WaveletError(f"unknown extension mode {mode!r}; choose from {MODES}")
    if n < 2:
        raise WaveletError(f"signal length {n} too short to decompose")
    filt = get_filter(filter_name)
    if mode == "periodic":
        n_eff = n + (n % 2)
        mats = []
        for f in (filt.dec_lo, filt.dec_hi):
            a_full = _build_periodic(n_eff, f)
            s_full = a_full.T.copy()
            if n_eff != n:
                # replicate-pad folded into the analysis; synthesis crops the pad
                a = a_full[:, :n].copy()
                a[:, n - 1] += a_full[:, n]
                s = s_full[:n, :].copy()
            else:
                a, s = a_full, s_full
            mats.append((a, s))
        (a_lo, s_lo), (a_hi, s_hi) = mats
        return LevelMatrices(n=n, out_len=n_eff // 2, a_lo=a_lo, a_hi=a_hi, s_lo=s_lo, s_hi=s_hi)
    a_lo = _build_symmetric_analysis(n, filt.dec_lo)
    a_hi = _build_symmetric_analysis(n, filt.dec_hi)
    s_lo = _build_symmetric_synthesis(n, filt.dec_lo)
    s_hi = _build_symmetric_synthesis(n, filt.dec_hi)
    return LevelMatrices(n=n, out_len=a_lo.shape[0], a_lo=a_lo, a_hi=a_hi, s_lo=s_lo, s_hi=s_hi)


def max_periodic_levels(n):
    """Number of levels available in periodic mode before length 1 is hit."""
    levels = 0
    while n >= 2:
        n = (n + 1) // 2
        levels += 1
    return levels



@dataclass
class WaveletCoefficients:
    """Multilevel decomposition record.

    ``details`` is coarse-first: entry 0 belongs to the deepest level m.  For
    2D fields each entry is an (LH, HL, HH) triple, where the first letter
    names the filter applied along axis 0.  ``length_ledger`` stores each
    level's input extent, which the inverse uses to restore exact shapes.
    """

    levels: int
    approx: np.ndarray
    details: list
    length_ledger: list
    mode: str
    filter_name: str
    ndim: int = 1


def dwt1d(signal, filter_name, m, mode="symmetric"):
    """Cascade analysis of the last axis down to level m."""
    if m < 1:
        raise WaveletError(f"decomposition depth must be >= 1, got {m}")
    cur = np.asarray(signal, dtype=np.float64)
    ledger, details = [], []
    for level in range(1, m + 1):
        n = cur.shape[-1]
        if n < 2:
            raise WaveletError(
                f"level {level}: approximation length {n} too short for another decomposition"
            )
        lm = level_matrices(n, filter_name, mode)
        ledger.append(n)
        details.append(cur @ lm.a_hi.T)
        cur = cur @ lm.a_lo.T
    details.reverse()
    return WaveletCoefficients(
        levels=m,
        approx=cur,
        details=details,
        length_ledger=ledger,
        mode=mode,
        filter_name=filter_name,
        ndim=1,
    )


def idwt1d(coeffs, filter_name=None):
    """Exact-length inverse of :func:`dwt1d` using the recorded ledger."""
    filter_name = filter_name or coeffs.filter_name
    if filter_name != coeffs.filter_name:
        raise WaveletError(
            f"filter mismatch: coefficients carry {coeffs.filter_name!r}, got {filter_name!r}"
        )
    if len(coeffs.details) != coeffs.levels or len(coeffs.length_ledger) != coeffs.levels:
        raise WaveletError(
            f"inconsistent record: {coeffs.levels} levels but "
            f"{len(coeffs.details)} detail bands / {len(coeffs.length_ledger)} ledger entries"
        )
    cur = np.asarray(coeffs.approx, dtype=np.float64)
    for i, level in enumerate(range(coeffs.levels, 0, -1)):
        n = coeffs.length_ledger[level - 1]
        lm = level_matrices(n, filter_name, coeffs.mode)
        det = np.asarray(coeffs.details[i], dtype=np.float64)
        if cur.shape[-1] != lm.out_len or det.shape[-1] != lm.out_len:
            raise WaveletError(
                f"level {level}: band length {cur.shape[-1]}/{det.shape[-1]} "
                f"does not match ledger extent {n} (expected {lm.out_len})"
            )
        cur = cur @ lm.s_lo.T + det @ lm.s_hi.T
    return cur


def _split2d(cur, lm0, lm1):
    lo0 = np.tensordot(lm0.a_lo, cur, axes=(1, 0))
    hi0 = np.tensordot(lm0.a_hi, cur, axes=(1, 0))
    return (
        lo0 @ lm1.a_lo.T,  # LL
        lo0 @ lm1.a_hi.T,  # LH
        hi0 @ lm1.a_lo.T,  # HL
        hi0 @ lm1.a_hi.T,  # HH
    )


def dwt2d(field, filter_name, m, mode="symmetric"):
    """Separable 2D analysis (axis 0 then axis 1) down to level m."""
    if m < 1:
        raise WaveletError(f"decomposition depth must be >= 1, got {m}")
    cur = np.asarray(field, dtype=np.float64)
    if cur.ndim != 2:
        raise WaveletError(f"dwt2d expects a 2-d field, got shape {cur.shape}")
    ledger, details = [], []
    for level in range(1, m + 1):
        h, w = cur.shape
        if h < 2 or w < 2:
            raise WaveletError(f"level {level}: field extent {h}x{w} too small to decompose")
        lm0 = level_matrices(h, filter_name, mode)
        lm1 = level_matrices(w, filter_name, mode)
        ledger.append((h, w))
        ll, lh, hl, hh = _split2d(cur, lm0, lm1)
        details.append((lh, hl, hh))
        cur = ll
    details.reverse()
    return WaveletCoefficients(
        levels=m,
        approx=cur,
        details=details,
        length_ledger=ledger,
        mode=mode,
        filter_name=filter_name,
        ndim=2,
    )


def idwt2d(coeffs, filter_name=None):
    filter_name = filter_name or coeffs.filter_name
    if filter_name != coeffs.filter_name:
        raise WaveletError(
            f"filter mismatch: coefficients carry {coeffs.filter_name!r}, got {filter_name!r}"
        )
    if len(coeffs.details) != coeffs.levels or len(coeffs.length_ledger) != coeffs.levels:
        raise WaveletError(
            f"inconsistent record: {coeffs.levels} levels but "
            f"{len(coeffs.details)} detail bands / {len(coeffs.length_ledger)} ledger entries"
        )
    cur = np.asarray(coeffs.approx, dtype=np.float64)
    for i, level in enumerate(range(coeffs.levels, 0, -1)):
        h, w = coeffs.length_ledger[level - 1]
        lm0 = level_matrices(h, filter_name, coeffs.mode)
        lm1 = level_matrices(w, filter_name, coeffs.mode)
        lh, hl, hh = (np.asarray(b, dtype=np.float64) for b in coeffs.details[i])
        expect = (lm0.out_len, lm1.out_len)
        for band in (cur, lh, hl, hh):
            if band.shape != expect:
                raise WaveletError(
                    f"level {level}: band shape {band.shape} does not match "
                    f"ledger extents {(h, w)} (expected {expect})"
                )
        lo0 = cur @ lm1.s_lo.T + lh @ lm1.s_hi.T
        hi0 = hl @ lm1.s_lo.T + hh @ lm1.s_hi.T
        cur = np.tensordot(lm0.s_lo, lo0, axes=(1, 0)) + np.tensordot(lm0.s_hi, hi0, axes=(1, 0))
    return cur
