"""Exact eigenfunction families, L^p quadrature and growth-exponent fits."""

from __future__ import annotations

from dataclasses import dataclass
from math import lgamma
from typing import Callable, Sequence

import numpy as np

from .manifold import ModelManifold, flat_torus, sphere
from .tolerances import DomainError

__all__ = [
    "EigenFamily",
    "critical_exponent",
    "delta_exponent",
    "zonal",
    "highest_weight",
    "torus_mode",
    "lattice_cluster",
    "lattice_points",
    "lp_norm",
    "exponent_fit",
    "FitResult",
    "ClusterGrowth",
    "cluster_linf_growth",
    "normalized_legendre",
]


def critical_exponent(n: int) -> float:
    if n < 2:
        raise DomainError("n >= 2 required")
    return 2.0 * (n + 1) / (n - 1)


def delta_exponent(p: float, n: int) -> float:
    """Sup-norm growth exponent: ||phi||_p <= C lambda^delta(p)."""
    if n < 2:
        raise DomainError("n >= 2 required")
    if not p >= 2:
        raise DomainError(f"p >= 2 required, got {p!r}")
    pc = critical_exponent(n)
    if p >= pc:
        return (n - 1) / 2 - (0.0 if np.isinf(p) else n / p)
    return (n - 1) / 4 - (n - 1) / (2 * p)


@dataclass(frozen=True)
class EigenFamily:
    """One L^2-normalized eigenfunction with eigenvalue lam**2."""

    manifold: ModelManifold
    kind: str
    index: object
    lam: float
    evaluator: Callable

    @property
    def h(self) -> float:
        return 1.0 / self.lam

    def __call__(self, *coords):
        return self.evaluator(*coords)


# --- sphere families ---------------------------------------------------------------


def normalized_legendre(ell: int, x) -> np.ndarray:
    """sqrt((2l+1)/2) P_l(x) by the three-term recurrence in normalized form."""
    x = np.asarray(x, dtype=float)
    p_prev = np.full_like(x, np.sqrt(0.5))
    if ell == 0:
        return p_prev
    p = np.sqrt(1.5) * x
    for l in range(1, ell):
        a = np.sqrt((2 * l + 1) * (2 * l + 3)) / (l + 1)
        b = l / (l + 1) * np.sqrt((2 * l + 3) / (2 * l - 1))
        p_prev, p = p, a * x * p - b * p_prev
    return p


def zonal(ell: int) -> EigenFamily:
    """Zonal harmonic on S^2, L^2-normalized for the round area measure."""
    if ell < 0:
        raise DomainError("ell >= 0 required")

    def ev(theta, phi=None):
        return normalized_legendre(ell, np.cos(theta)) / np.sqrt(2 * np.pi)

    return EigenFamily(sphere(2), "zonal", ell, float(np.sqrt(ell * (ell + 1))), ev)


def highest_weight(ell: int) -> EigenFamily:
    """c_l sin^l(theta) e^{i l phi} on S^2."""
    if ell < 0:
        raise DomainError("ell >= 0 required")
    # |c_l|^2 = (2l+1)! / (4 pi 4^l (l!)^2)
    logc = 0.5 * (lgamma(2 * ell + 2) - np.log(4 * np.pi) - ell * np.log(4.0) - 2 * lgamma(ell + 1))

    def ev(theta, phi):
        s = np.sin(theta)
        with np.errstate(divide="ignore"):
            mag = np.exp(logc + ell * np.log(np.abs(s))) if ell else np.exp(logc) * np.ones_like(s)
        return mag * np.exp(1j * ell * np.asarray(phi))

    return EigenFamily(sphere(2), "highest_weight", ell, float(np.sqrt(ell * (ell + 1))), ev)


# --- torus families ----------------------------------------------------------------


def torus_mode(k: Sequence[int]) -> EigenFamily:
    """e^{2 pi i <k, x>} on the unit torus of dimension len(k)."""
    k = np.asarray(k, dtype=int)

    def ev(*xs):
        phase = sum(2 * np.pi * ki * np.asarray(xi) for ki, xi in zip(k, xs))
        return np.exp(1j * phase)

    return EigenFamily(flat_torus(k.size), "torus_mode", tuple(int(v) for v in k), float(2 * np.pi * np.linalg.norm(k)), ev)


def lattice_points(m: int) -> np.ndarray:
    """All k in Z^2 with |k|^2 = m, by direct enumeration."""
    if m < 0:
        raise DomainError("m >= 0 required")
    r = int(np.floor(np.sqrt(m))) + 1
    a = np.arange(-r, r + 1)
    A, B = np.meshgrid(a, a, indexing="ij")
    sel = A * A + B * B == m
    return np.stack([A[sel], B[sel]], axis=1)


def lattice_cluster(m: int, coeffs=None) -> EigenFamily:
    """sum over |k|^2 = m of c_k e^{2 pi i <k,x>}, L^2-normalized on the unit 2-torus."""
    ks = lattice_points(m)
    if ks.shape[0] == 0:
        raise DomainError(f"{m} is not a sum of two squares")
    c = np.ones(ks.shape[0], dtype=complex) if coeffs is None else np.asarray(coeffs, dtype=complex)
    c = c / np.linalg.norm(c)

    def ev(x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        out = np.zeros(np.broadcast(x, y).shape, dtype=complex)
        for ck, (a, b) in zip(c, ks):
            out += ck * np.exp(2j * np.pi * (a * x + b * y))
        return out

    fam = EigenFamily(flat_torus(2), "torus_lattice_cluster", int(m), float(2 * np.pi * np.sqrt(m)), ev)
    object.__setattr__(fam, "_ks", ks)
    object.__setattr__(fam, "_c", c)
    return fam


# --- L^p norms ---------------------------------------------------------------------


def _golden_max(f, a, b, iters=60):
    g = (np.sqrt(5) - 1) / 2
    c, d = b - g * (b - a), a + g * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(iters):
        if fc > fd:
            b, d, fd = d, c, fc
            c = b - g * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + g * (b - a)
            fd = f(d)
    x = 0.5 * (a + b)
    return x, f(x)


def _sphere_lp(fam: EigenFamily, p: float, order: int, nphi: int) -> float:
    u, w = np.polynomial.legendre.leggauss(order)
    theta = np.arccos(u)
    phi = 2 * np.pi * np.arange(nphi) / nphi
    TH, PH = np.meshgrid(theta, phi, indexing="ij")
    vals = np.abs(fam(TH, PH)) ** p
    integral = float(w @ vals.mean(axis=1)) * 2 * np.pi
    return integral ** (1 / p)


def _sphere_linf(fam: EigenFamily, nodes: int) -> float:
    theta = np.linspace(0, np.pi, nodes + 1)
    phi = 2 * np.pi * np.arange(nodes) / nodes
    TH, PH = np.meshgrid(theta, phi, indexing="ij")
    vals = np.abs(fam(TH, PH))
    i, j = np.unravel_index(np.argmax(vals), vals.shape)
    dth = np.pi / nodes
    dph = 2 * np.pi / nodes
    t0, p0 = theta[i], phi[j]
    # coordinate-wise golden-section refinement
    t1, _ = _golden_max(lambda t: float(np.abs(fam(t, p0))), max(0.0, t0 - dth), min(np.pi, t0 + dth))
    p1, v = _golden_max(lambda s: float(np.abs(fam(t1, s))), p0 - dph, p0 + dph)
    return float(max(v, vals[i, j]))


def _torus_lp(fam: EigenFamily, p: float, nodes: int) -> float:
    g = np.arange(nodes) / nodes
    X, Y = np.meshgrid(g, g, indexing="ij")
    vals = np.abs(fam(X, Y))
    if np.isinf(p):
        i, j = np.unravel_index(np.argmax(vals), vals.shape)
        x1, _ = _golden_max(lambda s: float(np.abs(fam(s, g[j]))), g[i] - 1 / nodes, g[i] + 1 / nodes)
        _, v = _golden_max(lambda s: float(np.abs(fam(x1, s))), g[j] - 1 / nodes, g[j] + 1 / nodes)
        return float(max(v, vals[i, j]))
    return float(np.mean(vals**p)) ** (1 / p)


def lp_norm(fam: EigenFamily, p: float, order: int | None = None, probability: bool = False,
            check: bool = True) -> float:
    """||phi||_{L^p}: Gauss-Legendre x trapezoid on S^2, trapezoid on tori.

    With ``probability`` the measure is normalized to unit volume. The
    quadrature is repeated at doubled order and a relative change above
    1e-4 raises.
    """
    if p < 1:
        raise DomainError("p >= 1 required")
    lam = max(fam.lam, 1.0)
    M = fam.manifold
    if M.kind == "sphere":
        ell = int(fam.index)
        base = int(np.ceil(4 * lam))
        if np.isinf(p):
            order = max(order or 0, base, 16)
            val = _sphere_linf(fam, order)
            if check:
                val2 = _sphere_linf(fam, 2 * order)
                _check_resolution(val, val2, p)
                val = max(val, val2)
        else:
            order = max(order or 0, base, int(np.ceil(p * ell / 2)) + 2, 16)
            nphi = max(8, base, int(np.ceil(p * ell)) + 1)
            val = _sphere_lp(fam, p, order, nphi)
            if check:
                _check_resolution(val, _sphere_lp(fam, p, 2 * order, 2 * nphi), p)
        vol = 4 * np.pi
    elif M.kind == "flat_torus":
        kmax = lam / (2 * np.pi)
        base = int(np.ceil(max(4 * kmax, 8)))
        nodes = max(order or 0, base)
        if not np.isinf(p):
            nodes = max(nodes, int(np.ceil(p * kmax)) + 2)
        val = _torus_lp(fam, p, nodes)
        if check:
            _check_resolution(val, _torus_lp(fam, p, 2 * nodes), p)
        vol = 1.0
    else:
        raise DomainError("lp_norm supports sphere(2) and flat_torus(2) families")
    if probability and not np.isinf(p):
        val = val * vol ** (-1 / p)
    return float(val)


def _check_resolution(a, b, p):
    if abs(a - b) > 1e-4 * max(abs(a), abs(b), 1e-300):
        raise DomainError(f"quadrature under-resolved for p={p}: {a!r} vs {b!r} at doubled order")


@dataclass
class FitResult:
    slope: float
    width: float
    lams: np.ndarray
    norms: np.ndarray
    intercept: float


def _fit(lams, norms) -> FitResult:
    X = np.log(lams)
    Y = np.log(norms)
    A = np.stack([X, np.ones_like(X)], axis=1)
    coef, res, *_ = np.linalg.lstsq(A, Y, rcond=None)
    dof = max(len(X) - 2, 1)
    sigma2 = float(np.sum((Y - A @ coef) ** 2)) / dof
    cov = sigma2 * np.linalg.inv(A.T @ A)
    return FitResult(float(coef[0]), float(2 * np.sqrt(cov[0, 0])), np.asarray(lams), np.asarray(norms), float(coef[1]))


_FAMILIES = {"zonal": zonal, "highest_weight": highest_weight}


def exponent_fit(family: str | Callable, p: float, ells: Sequence[int]) -> FitResult:
    """Least-squares slope of log ||phi_lam||_p against log lam.

    ``family`` is "zonal", "highest_weight" or a callable index -> EigenFamily.
    """
    make = _FAMILIES[family] if isinstance(family, str) else family
    members = [make(e) for e in ells]
    lams = np.array([m.lam for m in members])
    if len(members) < 5:
        raise DomainError("need at least 5 family members")
    if lams.max() / max(lams.min(), 1e-300) < 4 - 1e-9 and not np.allclose(lams, lams[0]):
        raise DomainError("family members must span at least two octaves of lambda")
    norms = np.array([lp_norm(m, p) for m in members])
    if np.allclose(lams, lams[0]):
        return FitResult(0.0, 0.0, lams, norms, float(np.log(norms[0])))
    return _fit(lams, norms)


@dataclass
class ClusterGrowth:
    m_values: np.ndarray
    ratios: np.ndarray
    slope: float
    width: float
    envelope_slope: float


def cluster_linf_growth(m_max: int = 10_000, m_min: int = 1) -> ClusterGrowth:
    """Sup-norm growth of equal-weight lattice clusters on the 2-torus.

    The ratio ||sum e^{2 pi i k.x}||_inf / ||.||_2 over |k|^2 = m equals the
    value at x = 0 divided by the L^2 norm. The fit regresses log ratio on
    log lambda over every admissible m; the envelope slope uses running
    record holders only.
    """
    ms, ratios = [], []
    r = int(np.floor(np.sqrt(m_max)))
    a = np.arange(-r, r + 1)
    sq = (a[:, None] ** 2 + a[None, :] ** 2).ravel()
    counts = np.bincount(sq[sq <= m_max], minlength=m_max + 1)
    for m in range(max(m_min, 1), m_max + 1):
        c = counts[m]
        if c == 0:
            continue
        ms.append(m)
        # value at x = 0 is c, L^2 norm is sqrt(c)
        ratios.append(c / np.sqrt(c))
    if not ms:
        raise DomainError("no admissible lattice shell in range")
    ms = np.array(ms)
    ratios = np.array(ratios)
    lams = 2 * np.pi * np.sqrt(ms)
    fit = _fit(lams, ratios)
    rec = np.maximum.accumulate(ratios)
    keep = np.concatenate([[True], rec[1:] > rec[:-1]])
    env = _fit(lams[keep], ratios[keep]) if keep.sum() >= 2 else fit
    return ClusterGrowth(ms, ratios, fit.slope, fit.width, env.slope)
