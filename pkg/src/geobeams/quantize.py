"""Semiclassical quantization on the unit flat torus and geodesic-beam bookkeeping.

Functions live on the grid (Z/N)^n / N with frequencies xi = 2 pi k. A symbol
a(x, xi) is quantized as (Op_h a) u(x) = sum_k a(x, h xi_k) u_hat(k) e^{i x.xi_k}.

Tube cutoffs are separable, chi_j(x, xi) = b_j(x) a_j(xi):
  * b_j localizes to a strip of half-width r_perp about the central line of
    tube j, truncated at distance r_par along it;
  * a_j localizes the direction of xi to an arc of half-width r_ang about
    the tube direction, times a shell cutoff in |xi|.
The wider cutoff chi_j equals 1 on the support of the narrower chi~_j.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.interpolate import CubicSpline

from .cover import GoodCover, build_good_cover, maximal_separated_set
from .manifold import flat_torus
from .opnorm import NormEstimate, power_norm
from .tolerances import DEFAULT, DomainError

__all__ = [
    "GridField",
    "ModeSum",
    "SeparableSymbol",
    "SymbolSum",
    "smooth_step",
    "plateau",
    "op_apply",
    "P_apply",
    "cover_radius",
    "quantize_cover",
    "TubeCutoffs",
    "BeamSet",
    "beam_decompose",
    "MassProfile",
    "K_OVERFLOW",
    "M_UNDERFLOW",
    "dyadic_k",
    "dyadic_m",
    "mass_values",
    "mass_filter",
    "ball_centers",
    "ball_sup",
    "ball_filter",
    "split_good_bad",
    "lattice_cluster_quasimode",
    "single_mode",
    "beam_quasimode",
    "random_shell_function",
    "overlap_norm",
    "ShellMassKernel",
    "grid_points",
]

K_OVERFLOW = 10**6  # bucket of tubes carrying no mass
M_UNDERFLOW = -(10**6)  # ball class of balls with zero sup


# --- fields -----------------------------------------------------------------------


def _freq_axes(N: int, n: int):
    k = np.fft.fftfreq(N, d=1.0 / N)
    return np.meshgrid(*([k] * n), indexing="ij")


@dataclass
class GridField:
    """Samples of a function on the unit torus (Z/N)^n / N with semiclassical parameter h."""

    values: np.ndarray
    h: float

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=complex)
        n = self.values.ndim
        if n not in (1, 2):
            raise DomainError("grids have dimension 1 or 2")
        if len(set(self.values.shape)) != 1:
            raise DomainError("grids are square")
        if not 0 < self.h < 1:
            raise DomainError(f"need 0 < h < 1, got {self.h}")
        if self.h * np.pi * self.N < 2:
            raise DomainError(f"h * max|xi| = {self.h * np.pi * self.N:.3g} < 2: frequency shell not resolved")

    @property
    def n(self) -> int:
        return self.values.ndim

    @property
    def N(self) -> int:
        return self.values.shape[0]

    @property
    def lam(self) -> float:
        return 1.0 / self.h

    @classmethod
    def zeros(cls, N: int, h: float, n: int = 2) -> "GridField":
        return cls(np.zeros((N,) * n, dtype=complex), h)

    @classmethod
    def from_function(cls, f, N: int, h: float, n: int = 2) -> "GridField":
        return cls(f(*grid_points(N, n)), h)

    @classmethod
    def from_hat(cls, uhat, h: float) -> "GridField":
        """From coefficients uhat(k) with u = sum uhat(k) e^{2 pi i k.x}."""
        uhat = np.asarray(uhat, dtype=complex)
        return cls(np.fft.ifftn(uhat) * uhat.size, h)

    def hat(self) -> np.ndarray:
        return np.fft.fftn(self.values) / self.values.size

    def frequencies(self):
        """Angular frequencies xi = 2 pi k on the FFT layout, one array per axis."""
        return [2 * np.pi * k for k in _freq_axes(self.N, self.n)]

    def norm(self, p: float = 2) -> float:
        a = np.abs(self.values)
        if np.isinf(p):
            return float(a.max())
        return float(np.mean(a**p) ** (1 / p))

    def with_values(self, v) -> "GridField":
        return GridField(v, self.h)

    def __add__(self, other):
        return self.with_values(self.values + other.values)

    def __sub__(self, other):
        return self.with_values(self.values - other.values)

    def __mul__(self, c):
        return self.with_values(self.values * c)

    __rmul__ = __mul__


def grid_points(N: int, n: int = 2):
    x = np.arange(N) / N
    return np.meshgrid(*([x] * n), indexing="ij")


@dataclass
class ModeSum:
    """u(x) = sum_i c_i e^{2 pi i k_i . x}: a trigonometric polynomial with few modes."""

    ks: np.ndarray
    coeffs: np.ndarray
    h: float

    def __post_init__(self):
        self.ks = np.atleast_2d(np.asarray(self.ks, dtype=int))
        self.coeffs = np.asarray(self.coeffs, dtype=complex)

    @property
    def n(self) -> int:
        return self.ks.shape[1]

    @property
    def xi(self) -> np.ndarray:
        return 2 * np.pi * self.ks

    def norm(self) -> float:
        return float(np.linalg.norm(self.coeffs))

    def P(self) -> "ModeSum":
        return ModeSum(self.ks, _p_mult(self.h, self.xi) * self.coeffs, self.h)

    def scaled(self, c) -> "ModeSum":
        return ModeSum(self.ks, self.coeffs * c, self.h)

    def to_grid(self, N: int) -> GridField:
        if np.any(np.abs(self.ks) >= N // 2):
            raise DomainError("mode outside the grid band")
        uhat = np.zeros((N,) * self.n, dtype=complex)
        idx = tuple(np.mod(self.ks, N).T)
        np.add.at(uhat, idx, self.coeffs)
        return GridField.from_hat(uhat, self.h)


def _p_mult(h, xi):
    return h * h * np.sum(np.asarray(xi) ** 2, axis=-1) - 1


def _as_grid(u, N=None) -> GridField:
    if isinstance(u, GridField):
        return u
    if isinstance(u, ModeSum):
        if N is None:
            N = 4 * int(round(1 / u.h))
        return u.to_grid(N)
    raise TypeError("expected GridField or ModeSum")


# --- profiles and symbols ---------------------------------------------------------------------


def smooth_step(s):
    """C-infinity step: 0 for s <= 0, 1 for s >= 1, built from exp(-1/s)."""
    s = np.asarray(s, dtype=float)
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        a = np.where(s > 0, np.exp(-1 / np.where(s > 0, s, 1)), 0.0)
        b = np.where(s < 1, np.exp(-1 / np.where(s < 1, 1 - s, 1)), 0.0)
    return a / (a + b)


def plateau(d, inner: float, outer: float):
    """1 for |d| <= inner, 0 for |d| >= outer, smooth in between."""
    d = np.abs(np.asarray(d, dtype=float))
    return 1 - smooth_step((d - inner) / (outer - inner))


@dataclass
class SeparableSymbol:
    """a(x, xi) = x_part(x) * xi_part(xi); None means the factor 1."""

    x_part: object = None
    xi_part: object = None

    def __call__(self, X, XI):
        out = 1.0
        if self.x_part is not None:
            out = out * self.x_part(*X)
        if self.xi_part is not None:
            out = out * self.xi_part(*XI)
        return out


@dataclass
class SymbolSum:
    terms: list

    def __call__(self, X, XI):
        return sum(t(X, XI) for t in self.terms)


def _apply_separable(a: SeparableSymbol, u: GridField) -> GridField:
    v = u.values
    if a.xi_part is not None:
        XI = [u.h * f for f in u.frequencies()]
        m = np.asarray(a.xi_part(*XI), dtype=complex)
        if not np.all(np.isfinite(m)):
            raise DomainError("symbol is not finite at a grid frequency")
        v = np.fft.ifftn(np.fft.fftn(v) * m)
    if a.x_part is not None:
        g = np.asarray(a.x_part(*grid_points(u.N, u.n)), dtype=complex)
        if not np.all(np.isfinite(g)):
            raise DomainError("symbol is not finite at a grid node")
        v = g * v
    return u.with_values(v)


def _apply_dense(a, u: GridField, chunk: int = 256) -> GridField:
    """Direct summation sum_k a(x, h xi_k) uhat(k) e^{i x.xi_k}; O(N^{2n})."""
    X = [x.ravel() for x in grid_points(u.N, u.n)]
    F = [f.ravel() for f in u.frequencies()]
    uhat = u.hat().ravel()
    out = np.empty(len(X[0]), dtype=complex)
    for s in range(0, len(X[0]), chunk):
        xs = [x[s : s + chunk, None] for x in X]
        sym = np.asarray(a(xs, [u.h * f[None, :] for f in F]), dtype=complex)
        sym = np.broadcast_to(sym, (len(xs[0]), len(F[0])))
        if not np.all(np.isfinite(sym)):
            raise DomainError("symbol is not finite at a grid node")
        phase = np.exp(1j * sum(x * f[None, :] for x, f in zip(xs, F)))
        out[s : s + chunk] = (sym * phase) @ uhat
    return u.with_values(out.reshape(u.values.shape))


def op_apply(a, u) -> GridField:
    """Op_h(a) u for a SeparableSymbol, SymbolSum, or generic callable a([x...], [xi...])."""
    u = _as_grid(u)
    if isinstance(a, SeparableSymbol):
        return _apply_separable(a, u)
    if isinstance(a, SymbolSum) and all(isinstance(t, SeparableSymbol) for t in a.terms):
        out = np.zeros_like(u.values)
        for t in a.terms:
            out += _apply_separable(t, u).values
        return u.with_values(out)
    return _apply_dense(a, u)


def P_apply(u):
    """(-h^2 Laplacian - 1) u as the exact multiplier h^2 |xi|^2 - 1."""
    if isinstance(u, ModeSum):
        return u.P()
    XI = np.stack(u.frequencies(), axis=-1)
    return u.with_values(np.fft.ifftn(np.fft.fftn(u.values) * _p_mult(u.h, XI)))


# --- covers at semiclassical scale ------------------------------------------------------------


def cover_radius(h: float, exponent: float = 0.3, delta1: float | None = None, delta2: float | None = None) -> float:
    """R(h) = h^exponent, required to lie in [h^delta2, h^delta1]."""
    d1 = DEFAULT.delta1 if delta1 is None else delta1
    d2 = DEFAULT.delta2 if delta2 is None else delta2
    if not 0 < d1 < d2 < 0.5:
        raise DomainError(f"need 0 < delta1 < delta2 < 1/2, got {d1}, {d2}")
    R = h**exponent
    _check_regime(R, h, d1, d2)
    return R


def _check_regime(R, h, d1=None, d2=None):
    d1 = DEFAULT.delta1 if d1 is None else d1
    d2 = DEFAULT.delta2 if d2 is None else d2
    if not h**d2 * (1 - 1e-12) <= R <= h**d1 * (1 + 1e-12):
        raise DomainError(f"need h^{d2} = {h**d2:.4g} <= R <= h^{d1} = {h**d1:.4g}, got R = {R:.4g}")


def quantize_cover(h: float, tau: float = 0.2, R: float | None = None, exponent: float = 0.3) -> GoodCover:
    R = cover_radius(h, exponent) if R is None else R
    _check_regime(R, h)
    return build_good_cover(flat_torus(2, (1.0, 1.0)), tau, R)


# --- tube cutoffs ----------------------------------------------------------------------------

# plateau fractions (inner, outer) of each radius for the two cutoff families
_FRACTIONS = {"chi": (0.8, 1.0), "tilde": (0.5, 0.8)}
# shells in | |xi| - 1 |
_SHELL = {"chi": (0.3, 0.45), "tilde": (0.2, 0.3), "psi": (0.25, 0.5)}
# edge factor: support in |xi.N| > e0 |xi|, equal to 1 above e0 + _EDGE_WIDTH
_EDGE = {"chi": 0.5, "tilde": 0.5 + 0.05}
_EDGE_WIDTH = 0.05


def _wrap_unit(d):
    return d - np.round(d)


def _angle_to(XI0, XI1, w):
    """Angle between (XI0, XI1) and unit vector w."""
    r = np.hypot(XI0, XI1)
    c = (XI0 * w[0] + XI1 * w[1]) / np.where(r > 0, r, 1)
    s = (XI1 * w[0] - XI0 * w[1]) / np.where(r > 0, r, 1)
    return np.abs(np.arctan2(s, c))


def _transition_table(wmax: float, step: float = 0.02):
    """Phi(w) = int_0^1 (1 - S(s))^2 e^{i w s} ds on a grid, as splines for Re and Im."""
    nodes, weights = np.polynomial.legendre.leggauss(96)
    s = 0.5 * (nodes + 1)
    wts = 0.5 * weights * (1 - smooth_step(s)) ** 2
    w = np.arange(0, wmax + 2 * step, step)
    vals = np.exp(1j * np.outer(w, s)) @ wts
    return CubicSpline(w, vals.real), CubicSpline(w, vals.imag)


def _profile_sq_transform(kappa, inner, outer, table):
    """int_R plateau(p; inner, outer)^2 e^{-i kappa p} dp (real, even in kappa)."""
    k = np.abs(np.asarray(kappa, dtype=float))
    width = outer - inner
    with np.errstate(invalid="ignore", divide="ignore"):
        core = np.where(k > 1e-12, np.sin(k * inner) / np.where(k > 1e-12, k, 1), inner)
    w = k * width
    re, im = table[0](w), table[1](w)
    # int_inner^outer f^2 cos(k p) dp = width * Re(e^{i k inner} Phi(k width))
    trans = width * (np.cos(k * inner) * re - np.sin(k * inner) * im)
    return 2 * (core + trans)


@dataclass
class TubeCutoffs:
    """Separable tube cutoffs chi_j, chi~_j and the shell cutoff psi for a torus cover."""

    cover: GoodCover
    h: float
    perp_frac: float = 0.25
    ang_frac: float = 0.5
    check_regime: bool = True

    def __post_init__(self):
        M = self.cover.manifold
        if M.kind != "flat_torus" or M.dim != 2 or tuple(M.periods) != (1.0, 1.0):
            raise DomainError("tube cutoffs are built on the unit flat 2-torus")
        if self.check_regime:
            _check_regime(self.cover.R, self.h)
        if self.r_par + self.r_perp >= 0.5:
            raise DomainError("tube cutoff wider than half a period")

    @property
    def R(self) -> float:
        return self.cover.R

    @property
    def r_perp(self) -> float:
        return self.perp_frac * self.R

    @property
    def r_ang(self) -> float:
        return self.ang_frac * self.R

    @property
    def r_par(self) -> float:
        return self.cover.tau

    @property
    def n_tubes(self) -> int:
        return self.cover.n_tubes

    @cached_property
    def geometry(self):
        """(x_j, omega_j, nu_j): center, unit direction and unit normal of every tube."""
        X, XI, *_ = self.cover.center_arrays
        w = XI / np.linalg.norm(XI, axis=1, keepdims=True)
        nu = np.stack([-w[:, 1], w[:, 0]], axis=1)
        return X, w, nu

    @cached_property
    def transversal_normals(self) -> np.ndarray:
        TID = self.cover.center_arrays[4]
        normals = np.array([t.normal for t in self.cover.transversals], dtype=float)
        return normals[TID]

    @cached_property
    def direction_groups(self):
        """Tubes grouped by identical (direction, transversal normal): (w, N, index array)."""
        _, w, _ = self.geometry
        key = np.round(np.concatenate([w, self.transversal_normals], axis=1), 12)
        uniq, inv = np.unique(key, axis=0, return_inverse=True)
        inv = inv.ravel()
        out = []
        for g in range(len(uniq)):
            members = np.nonzero(inv == g)[0]
            out.append((w[members[0]], self.transversal_normals[members[0]], members))
        return out

    # factors
    def x_factor(self, j: int, which: str = "chi"):
        X, w, nu = self.geometry
        fi, fo = _FRACTIONS[which]
        xj, wj, nj = X[j], w[j], nu[j]
        rp, rl = self.r_perp, self.r_par

        def f(x0, x1):
            d0 = _wrap_unit(x0 - xj[0])
            d1 = _wrap_unit(x1 - xj[1])
            q = d0 * nj[0] + d1 * nj[1]
            p = d0 * wj[0] + d1 * wj[1]
            return plateau(q, fi * rp, fo * rp) * plateau(p, fi * rl, fo * rl)

        return f

    def xi_factor_dir(self, w, N, which: str = "chi"):
        """Angular cutoff about w, times the shell cutoff, times an edge factor keeping |xi.N| > 1/2 |xi|."""
        fi, fo = _FRACTIONS[which]
        si, so = _SHELL[which]
        e0 = _EDGE[which]
        ra = self.r_ang

        def f(xi0, xi1):
            r = np.hypot(xi0, xi1)
            cn = np.abs(xi0 * N[0] + xi1 * N[1]) / np.where(r > 0, r, 1)
            edge = smooth_step((cn - e0) / _EDGE_WIDTH)
            return plateau(_angle_to(xi0, xi1, w), fi * ra, fo * ra) * plateau(r - 1, si, so) * edge

        return f

    def xi_factor(self, j: int, which: str = "chi"):
        return self.xi_factor_dir(self.geometry[1][j], self.transversal_normals[j], which)

    def psi(self, xi0, xi1):
        si, so = _SHELL["psi"]
        return plateau(np.hypot(xi0, xi1) - 1, si, so)

    def symbol(self, j: int, which: str = "chi") -> SeparableSymbol:
        return SeparableSymbol(self.x_factor(j, which), self.xi_factor(j, which))

    # Fourier coefficients of b_j^2
    @cached_property
    def _table(self):
        # |k' - k| <= 2 * 1.5 / (2 pi h) for shell modes, so |kappa| <= 3 / h
        kmax = 3.2 / self.h + 10
        wmax = kmax * max(self.r_perp, self.r_par)
        return _transition_table(wmax)

    def G_hat(self, tubes, m, which: str = "chi", summed: bool = False):
        """Fourier coefficients of b_j(x)^2 at integer vectors m; shape (len(tubes),) + m.shape[:-1].

        With ``summed`` the tubes must share one direction and the sum over
        them is returned; the profile transforms are then evaluated once.
        """
        X, w, nu = self.geometry
        tubes = np.asarray(tubes, dtype=int)
        m = np.asarray(m, dtype=float)
        fi, fo = _FRACTIONS[which]
        if summed:
            sel = tubes[:1]
            if np.any(np.abs(w[tubes] - w[sel]) > 1e-12):
                raise DomainError("summed kernels need a common direction")
        else:
            sel = tubes
        kp = 2 * np.pi * np.tensordot(nu[sel], m, axes=([1], [-1]))
        kl = 2 * np.pi * np.tensordot(w[sel], m, axes=([1], [-1]))
        F = _profile_sq_transform(kp, fi * self.r_perp, fo * self.r_perp, self._table)
        F = F * _profile_sq_transform(kl, fi * self.r_par, fo * self.r_par, self._table)
        if summed:
            ph = np.zeros(m.shape[:-1], dtype=complex)
            for c0 in range(0, len(tubes), 64):
                ph += np.exp(-2j * np.pi * np.tensordot(X[tubes[c0 : c0 + 64]], m, axes=([1], [-1]))).sum(axis=0)
            return F[0] * ph
        ph = np.exp(-2j * np.pi * np.tensordot(X[tubes], m, axes=([1], [-1])))
        return ph * F

    def support_in_tubes(self, samples: int = 7, which: str = "chi", tubes=None, slack: float = 0.0):
        """Fraction of sampled support points of chi_j lying in T_j (should be 1)."""
        X, w, nu = self.geometry
        tubes = np.arange(self.n_tubes) if tubes is None else np.asarray(tubes, dtype=int)
        g = np.linspace(-1, 1, samples)
        fo = _FRACTIONS[which][1]
        P, Q, A = np.meshgrid(g * fo * self.r_par, g * fo * self.r_perp, g * fo * self.r_ang, indexing="ij")
        P, Q, A = P.ravel(), Q.ravel(), A.ravel()
        ok = 0
        total = 0
        for j in tubes:
            x = X[j] + P[:, None] * w[j] + Q[:, None] * nu[j]
            ca, sa = np.cos(A)[:, None], np.sin(A)[:, None]
            xi = ca * w[j] + sa * nu[j]
            # drop directions outside the edge factor's support
            on = np.abs(xi @ self.transversal_normals[j]) > _EDGE[which]
            x, xi = x[on], xi[on]
            pts, tb = self.cover.members(np.mod(x, 1.0), xi, min_normal=0.5 - slack)
            inside = np.zeros(len(x), dtype=bool)
            inside[pts[tb == j]] = True
            ok += inside.sum()
            total += len(x)
        return ok / total


# --- beams ---------------------------------------------------------------------------------


@dataclass
class BeamSet:
    """Geodesic beams u_j = Op(chi~_j) Op(psi) u, evaluated lazily."""

    u: GridField
    cutoffs: TubeCutoffs
    psi_zero: bool = False
    _cache: dict = field(default_factory=dict, repr=False)

    @cached_property
    def _psi_u_hat(self):
        uh = np.fft.fftn(self.u.values)
        if self.psi_zero:
            return np.zeros_like(uh)
        XI = [self.u.h * f for f in self.u.frequencies()]
        return uh * self.cutoffs.psi(*XI)

    def _dir_field(self, w, N):
        key = tuple(np.round(np.concatenate([w, N]), 12))
        if key not in self._cache:
            XI = [self.u.h * f for f in self.u.frequencies()]
            self._cache[key] = np.fft.ifftn(self._psi_u_hat * self.cutoffs.xi_factor_dir(w, N, "tilde")(*XI))
        return self._cache[key]

    def __len__(self):
        return self.cutoffs.n_tubes

    def beam(self, j: int) -> GridField:
        w = self.cutoffs.geometry[1][j]
        N = self.cutoffs.transversal_normals[j]
        b = self.cutoffs.x_factor(j, "tilde")(*grid_points(self.u.N, 2))
        return self.u.with_values(b * self._dir_field(w, N))

    def sum(self, indices=None) -> GridField:
        idx = np.arange(len(self)) if indices is None else np.asarray(indices, dtype=int)
        out = np.zeros_like(self.u.values)
        if idx.size == 0:
            return self.u.with_values(out)
        pts = grid_points(self.u.N, 2)
        chosen = np.zeros(len(self), dtype=bool)
        chosen[idx] = True
        for w, N, members in self.cutoffs.direction_groups:
            sel = members[chosen[members]]
            if sel.size == 0:
                continue
            bsum = sum(self.cutoffs.x_factor(int(j), "tilde")(*pts) for j in sel)
            out += bsum * self._dir_field(w, N)
        return self.u.with_values(out)

    def residual(self) -> GridField:
        return self.u - self.sum()

    def total_symbol(self):
        """The symbol sum_j chi~_j(x, xi) psi(xi) as a generic callable."""
        cut = self.cutoffs

        def a(X, XI):
            out = 0.0
            for j in range(len(self)):
                out = out + cut.x_factor(j, "tilde")(*X) * cut.xi_factor(j, "tilde")(*XI)
            return out * cut.psi(*XI) * (0.0 if self.psi_zero else 1.0)

        return a


def beam_decompose(u, cover: GoodCover, h: float, psi_zero: bool = False, **cutoff_kw) -> BeamSet:
    """Beams Op(chi~_j) Op(psi) u of u over the tubes of ``cover``; R must lie in [h^0.4, h^0.2]."""
    u = _as_grid(u)
    if abs(u.h - h) > 1e-15:
        raise DomainError("field and cover use different h")
    cut = TubeCutoffs(cover, h, **cutoff_kw)
    return BeamSet(u, cut, psi_zero)


# --- dyadic mass buckets ---------------------------------------------------------------------


def dyadic_k(ratio):
    """k with ratio in [2^{-k-1}, 2^{-k}), clamped at k >= -1; zero maps to K_OVERFLOW."""
    r = np.asarray(ratio, dtype=float)
    mant, e = np.frexp(r)  # r = mant 2^e, mant in [1/2, 1)
    k = np.maximum(-e, -1)
    return np.where(r > 0, k, K_OVERFLOW).astype(np.int64)


def dyadic_m(q):
    """m with q in (2^{m-1}, 2^m]; zero maps to M_UNDERFLOW."""
    q = np.asarray(q, dtype=float)
    mant, e = np.frexp(q)
    m = np.where(mant == 0.5, e - 1, e)
    return np.where(q > 0, m, M_UNDERFLOW).astype(np.int64)


@dataclass
class MassProfile:
    buckets: dict
    norm_PT: float
    T: float
    values: np.ndarray
    k_of: np.ndarray

    def A(self, k: int) -> np.ndarray:
        return self.buckets.get(k, np.zeros(0, dtype=int))


def _mass_grid(u: GridField, cut: TubeCutoffs, tubes):
    Pu = P_apply(u)
    out = np.empty((len(tubes), 2))
    pts = grid_points(u.N, 2)
    XI = [u.h * f for f in u.frequencies()]
    uh, Puh = np.fft.fftn(u.values), np.fft.fftn(Pu.values)
    cache = {}
    for i, j in enumerate(tubes):
        w, N = cut.geometry[1][j], cut.transversal_normals[j]
        key = tuple(np.round(np.concatenate([w, N]), 12))
        if key not in cache:
            a = cut.xi_factor_dir(w, N, "chi")(*XI)
            cache[key] = (np.fft.ifftn(uh * a), np.fft.ifftn(Puh * a))
        b = cut.x_factor(j, "chi")(*pts)
        v, pv = cache[key]
        out[i, 0] = np.sqrt(np.mean(np.abs(b * v) ** 2))
        out[i, 1] = np.sqrt(np.mean(np.abs(b * pv) ** 2))
    return out


class ShellMassKernel:
    """Per-tube quadratic forms for ||Op(chi_j) v|| when v lives on a fixed mode set.

    The kernel G_j(k' - k) of b_j^2 and the symbol values a_j(h xi_k) are
    computed once per mode set and reused for every coefficient vector.
    """

    def __init__(self, cut: TubeCutoffs, ks, chunk: int = 256):
        self.cut = cut
        self.ks = np.asarray(ks, dtype=int)
        h = cut.h
        xi = h * 2 * np.pi * self.ks
        self.a = np.zeros((cut.n_tubes, len(self.ks)))  # a_j(h xi_k)
        for wd, Nd, members in cut.direction_groups:
            self.a[members] = cut.xi_factor_dir(wd, Nd, "chi")(xi[:, 0], xi[:, 1])
        self.active = [np.nonzero(row)[0] for row in self.a]
        self.blocks = []
        for j, act in enumerate(self.active):
            if act.size == 0:
                self.blocks.append(None)
                continue
            kk = self.ks[act]
            m = kk[None, :, :] - kk[:, None, :]  # k' - k
            self.blocks.append(cut.G_hat([j], m)[0])

    def masses(self, coeffs) -> np.ndarray:
        """||Op(chi_j) v|| for v = sum coeffs_i e^{2 pi i k_i x}."""
        c = np.asarray(coeffs, dtype=complex)
        out = np.zeros(len(self.blocks))
        for j, (act, B) in enumerate(zip(self.active, self.blocks)):
            if B is None:
                continue
            v = self.a[j, act] * c[act]
            out[j] = np.sqrt(max(0.0, float(np.real(v @ B @ np.conj(v)))))
        return out


def mass_values(u, cut: TubeCutoffs, kernel: ShellMassKernel | None = None):
    """Per-tube (||Op(chi_j) u||, ||Op(chi_j) P u||)."""
    if isinstance(u, ModeSum):
        ker = kernel if kernel is not None else ShellMassKernel(cut, u.ks)
        if ker.ks.shape != u.ks.shape or np.any(ker.ks != u.ks):
            raise DomainError("kernel built for a different mode set")
        return np.stack([ker.masses(u.coeffs), ker.masses(u.P().coeffs)], axis=1)
    return _mass_grid(u, cut, np.arange(cut.n_tubes))


def _norm_PT(u, T):
    if isinstance(u, ModeSum):
        return u.norm() + (T / u.h) * u.P().norm()
    return u.norm() + (T / u.h) * P_apply(u).norm()


def mass_filter(u, cut: TubeCutoffs, T: float, kernel: ShellMassKernel | None = None) -> MassProfile:
    """Buckets A_k of tubes by (||Op(chi_j)u|| + ||Op(chi_j)Pu||/h) / ||u||_{P,T}."""
    if T < 1:
        raise DomainError(f"need T >= 1, got T = {T}")
    mv = mass_values(u, cut, kernel)
    npt = _norm_PT(u, T)
    vals = mv[:, 0] + mv[:, 1] / cut.h
    ratio = vals / npt if npt > 0 else np.zeros_like(vals)
    ks = dyadic_k(ratio)
    buckets = {int(k): np.nonzero(ks == k)[0] for k in np.unique(ks)}
    return MassProfile(buckets, float(npt), T, vals, ks)


# --- balls ------------------------------------------------------------------------------------


def ball_centers(R: float) -> np.ndarray:
    """Maximal R-separated set of the unit 2-torus."""
    return maximal_separated_set(flat_torus(2, (1.0, 1.0)), R, R0=np.inf)


def ball_sup(w: GridField, centers, R: float) -> np.ndarray:
    """sup over grid nodes in B(x_alpha, R) of |w|."""
    X = np.stack([g.ravel() for g in grid_points(w.N, w.n)], axis=1)
    a = np.abs(w.values).ravel()
    out = np.empty(len(centers))
    for i, c in enumerate(np.atleast_2d(centers)):
        d = X - c
        d = d - np.round(d)
        inside = np.sum(d * d, axis=1) <= R * R
        out[i] = a[inside].max() if np.any(inside) else 0.0
    return out


def ball_filter(w: GridField, centers, R: float, h: float, norm_PT: float, k: int, n: int = 2) -> dict:
    """Classes I_{k,m} of balls by h^{(n-1)/2} R^{(1-n)/2} 2^k ||w||_{L^inf(B)} / ||u||_{P,T}."""
    sup = ball_sup(w, centers, R)
    q = h ** ((n - 1) / 2) * R ** ((1 - n) / 2) * 2.0**k * sup / norm_PT
    ms = dyadic_m(q)
    return {int(m): np.nonzero(ms == m)[0] for m in np.unique(ms)}


def split_good_bad(beams: BeamSet, indices, bad) -> tuple:
    """(w^G, w^B): sums of beams over indices outside / inside the bad set."""
    idx = np.asarray(indices, dtype=int)
    badmask = np.isin(idx, np.asarray(bad, dtype=int))
    return beams.sum(idx[~badmask]), beams.sum(idx[badmask])


# --- quasimodes ---------------------------------------------------------------------------------


def _shell_modes(lam: float, lo: float, hi: float) -> np.ndarray:
    kmax = int(np.ceil(hi / (2 * np.pi))) + 1
    g = np.arange(-kmax, kmax + 1)
    K = np.stack(np.meshgrid(g, g, indexing="ij"), axis=-1).reshape(-1, 2)
    r = 2 * np.pi * np.linalg.norm(K, axis=1)
    return K[(r >= lo) & (r <= hi)]


def lattice_cluster_quasimode(lam: int, seed: int | None = 0, coeffs=None) -> ModeSum:
    """sum of e^{2 pi i k.x} over 2 pi |k| in [lam, lam + 1] with seeded Gaussian weights."""
    ks = _shell_modes(lam, lam, lam + 1)
    if len(ks) == 0:
        raise DomainError(f"no lattice points with 2 pi |k| in [{lam}, {lam + 1}]")
    if coeffs is None:
        rng = np.random.default_rng(seed)
        coeffs = rng.standard_normal(len(ks)) + 1j * rng.standard_normal(len(ks))
    c = np.asarray(coeffs, dtype=complex)
    return ModeSum(ks, c / np.linalg.norm(c), 1.0 / lam)


def single_mode(k, h: float) -> ModeSum:
    return ModeSum(np.atleast_2d(k), [1.0], h)


def beam_quasimode(lam: int, angle: float, x0=(0.0, 0.0), angular_width: float | None = None,
                   radial_width: float = 1.0) -> ModeSum:
    """Wave packet travelling along direction ``angle`` through x0.

    Coefficients exp(-(2 pi |k| - lam)^2 / (2 w_r^2)) exp(-theta^2 / (2 w_a^2)) e^{-2 pi i k.x0},
    theta the angle between k and the direction; default w_a = lam^{-1/2}.
    """
    wa = lam**-0.5 if angular_width is None else angular_width
    ks = _shell_modes(lam, lam - 6 * radial_width, lam + 6 * radial_width)
    w = np.array([np.cos(angle), np.sin(angle)])
    th = _angle_to(ks[:, 0].astype(float), ks[:, 1].astype(float), w)
    r = 2 * np.pi * np.linalg.norm(ks, axis=1)
    c = np.exp(-((r - lam) ** 2) / (2 * radial_width**2)) * np.exp(-(th**2) / (2 * wa**2))
    c = c * np.exp(-2j * np.pi * ks @ np.asarray(x0, dtype=float))
    keep = c != 0
    keep &= np.abs(c) > 1e-14 * np.abs(c).max()
    c = c[keep]
    return ModeSum(ks[keep], c / np.linalg.norm(c), 1.0 / lam)


def random_shell_function(lam: int, N: int, seed: int = 0, width: float = 0.1, n: int = 2) -> GridField:
    """Seeded random function with frequencies in | h|xi| - 1 | <= width."""
    h = 1.0 / lam
    rng = np.random.default_rng(seed)
    shape = (N,) * n
    uh = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    r = h * np.sqrt(sum(f**2 for f in [2 * np.pi * k for k in _freq_axes(N, n)]))
    uh = uh * (np.abs(r - 1) <= width)
    u = GridField.from_hat(uh, h)
    return u * (1 / u.norm()) if u.norm() > 0 else u


# --- bounded overlap -----------------------------------------------------------------------------


def overlap_norm(cut: TubeCutoffs, which: str = "chi", rtol: float | None = None, seed: int = 0) -> NormEstimate:
    """|| sum_j Op(chi_j)^* Op(chi_j) || on L^2, by power iteration on the shell modes.

    Op(chi_j) = b_j a_j(hD); the operator vanishes off the modes where some
    a_j is nonzero, so it suffices to iterate there. Since the operator is
    self-adjoint and nonnegative, ||A|| = ||B||^2 with B the stacked map
    v -> (Op(chi_j) v)_j, and power iteration on B*B = A returns sqrt(||A||).
    """
    fi, fo = _FRACTIONS[which]
    shell_out = _SHELL[which][1]
    ks = _shell_modes(1 / cut.h, (1 - shell_out) / cut.h, (1 + shell_out) / cut.h)
    xi = cut.h * 2 * np.pi * ks
    groups = cut.direction_groups
    a_dir = [cut.xi_factor_dir(wd, Nd, which)(xi[:, 0], xi[:, 1]) for wd, Nd, _ in groups]
    act_dir = [np.nonzero(a)[0] for a in a_dir]
    blocks = []
    for (wd, Nd, members), a, act in zip(groups, a_dir, act_dir):
        if act.size == 0:
            continue
        kk = ks[act]
        m = kk[None, :, :] - kk[:, None, :]
        # tubes sharing a direction share a_j, so their b_j^2 kernels add up
        G = cut.G_hat(members, m, which, summed=True)
        blocks.append((act, a[act], np.conj(G)))

    def A(v):
        out = np.zeros_like(v)
        for act, a, B in blocks:
            out[act] += a * (B @ (a * v[act]))
        return out

    est = power_norm(lambda v: v, A, (len(ks),), rtol=rtol, seed=seed)
    # power_norm returns sqrt of the top eigenvalue of A (apply = identity, adj = A)
    return NormEstimate(est.value**2, est.iterations, est.rel_change)
