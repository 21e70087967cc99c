"""Quantization at the scale h^rho about a co-isotropic submanifold, on the flat unit torus.

Model case. Gamma = {x' = 0}, x' being the first r coordinates (wrapped to
[-1/2, 1/2)). A symbol a(x, xi, lam) is quantized with lam = h^{-rho} x':

    (Op2 a) u(x) = sum_k a(x, h xi_k, h^{-rho} x') u_hat(k) e^{i x.xi_k}.

Flow-out cutoffs. For y on the torus, Gamma_y is the union of straight lines
through y with direction in the frequency shell. X_y has symbol

    kappa(h^{-rho} d_perp) * kappa((2/delta)(1 - |xi|)) * psi(s),

with d_perp the distance from x to the line through y in direction xi,
s the signed position along it, kappa = 1 on [-1, 1] and 0 outside (-2, 2),
psi = 1 for |s| <= 1/4 and 0 for |s| >= 3/8. It is exactly invariant under
the straight-line flow where psi = 1. X_y only reads the shell coefficients of
its input, so it is stored as a sparse (grid x shell-mode) matrix.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .opnorm import NormEstimate, power_norm
from .quantize import GridField, _freq_axes, grid_points, plateau, op_apply
from .tolerances import DEFAULT, DomainError

__all__ = [
    "RESOLUTION_FACTOR",
    "Symbol2M",
    "transverse",
    "min_grid",
    "op2_apply",
    "op2_apply_dense",
    "op2_adjoint",
    "ScaledField",
    "rescale",
    "SlopeResult",
    "loglog_slope",
    "composition_residual",
    "commutator_norms",
    "dense_residual_norm",
    "bump_symbol_pair",
    "CoisoCutoff",
    "build_coiso_cutoff",
    "shell_modes",
    "commutator_decay",
    "UncertaintyResult",
    "uncertainty_norm",
    "uncertainty_h_sweep",
    "uncertainty_dense_norm",
    "orthogonality_bracket",
    "OrthogonalityResult",
    "almost_orthogonality",
    "separated_points",
]

RESOLUTION_FACTOR = 8  # grid points per length h^rho
ALONG_IN, ALONG_OUT = 0.25, 0.375  # flow-invariance strip of X_y, in units of the period


# --- second-microlocal symbols -------------------------------------------------------


def transverse(x, r: int):
    """The model coordinates x' = (x_1..x_r), wrapped to [-1/2, 1/2)."""
    return [((xi + 0.5) % 1.0) - 0.5 for xi in list(x)[:r]]


@dataclass
class Symbol2M:
    """a(x, xi, lam): x and xi lists of n arrays, lam a list of r arrays.

    ``terms`` optionally gives the same symbol as sum_i f_i(x, lam) g_i(xi),
    which op2_apply uses as a fast path. ``xi_box``: a vanishes when some
    |xi_j| > xi_box.
    """

    evaluator: object
    n: int = 1
    r: int = 1
    order: float = 0.0
    rho: float = 0.5
    xi_box: float = 2.0
    terms: tuple | None = None

    def __post_init__(self):
        if not 0 <= self.rho < 1:
            raise DomainError(f"need 0 <= rho < 1, got {self.rho}")
        if not 0 <= self.r <= self.n:
            raise DomainError("codimension r must satisfy 0 <= r <= n")

    def __call__(self, x, xi, lam):
        return self.evaluator(x, xi, lam)

    @classmethod
    def separable(cls, terms, n: int = 1, r: int = 1, order: float = 0.0, rho: float = 0.5,
                  xi_box: float = 2.0) -> "Symbol2M":
        """From pairs (f(x, lam), g(xi)); either entry may be None for the factor 1."""
        terms = tuple((f, g) for f, g in terms)

        def ev(x, xi, lam):
            out = 0.0
            for f, g in terms:
                fx = 1.0 if f is None else f(x, lam)
                gx = 1.0 if g is None else g(xi)
                out = out + fx * gx
            return out

        return cls(ev, n, r, order, rho, xi_box, terms)

    @property
    def lam_independent(self) -> bool:
        return self.r == 0

    def __mul__(self, other: "Symbol2M") -> "Symbol2M":
        if (self.n, self.r) != (other.n, other.r):
            raise DomainError("symbols live on different model spaces")
        box = min(self.xi_box, other.xi_box)
        rho = self.rho
        if self.terms is not None and other.terms is not None:
            terms = []
            for f1, g1 in self.terms:
                for f2, g2 in other.terms:
                    terms.append((_mul_fn(f1, f2), _mul_fn(g1, g2)))
            return Symbol2M.separable(terms, self.n, self.r, self.order + other.order, rho, box)
        return Symbol2M(lambda x, xi, lam: self(x, xi, lam) * other(x, xi, lam),
                        self.n, self.r, self.order + other.order, rho, box)

    def check_support(self, samples: int = 2000, seed: int = 0, lam_range: float = 10.0) -> bool:
        """Spot check that a vanishes outside the declared frequency box."""
        rng = np.random.default_rng(seed)
        x = [rng.random(samples) for _ in range(self.n)]
        xi = [rng.uniform(-3 * self.xi_box, 3 * self.xi_box, samples) for _ in range(self.n)]
        lam = [rng.uniform(-lam_range, lam_range, samples) for _ in range(self.r)]
        out = np.max(np.abs(np.stack(xi)), axis=0) > self.xi_box
        vals = np.broadcast_to(np.asarray(self(x, xi, lam)), (samples,))
        return bool(np.all(vals[out] == 0))

    def check_estimates(self, samples: int = 500, seed: int = 0, C: float | None = None,
                        lam_range: float = 50.0, step: float = 1e-3):
        """Finite-difference check of |d_lam^g a| <= C <lam>^{order - |g|} for |g| <= 2.

        Returns (ok, worst) where worst is the largest observed ratio
        |d^g a| / <lam>^{order - |g|}; with C None the check only asks it to be finite.
        """
        rng = np.random.default_rng(seed)
        x = [rng.random(samples) for _ in range(self.n)]
        xi = [rng.uniform(-self.xi_box, self.xi_box, samples) for _ in range(self.n)]
        lam = [rng.uniform(-lam_range, lam_range, samples) for _ in range(self.r)]
        jb = np.sqrt(1 + sum(l * l for l in lam))

        def a(l):
            return np.broadcast_to(np.asarray(self(x, xi, l), dtype=complex), (samples,))

        worst = float(np.max(np.abs(a(lam)) / jb**self.order))
        for i in range(self.r):
            e = [step * (j == i) for j in range(self.r)]
            plus = a([l + d for l, d in zip(lam, e)])
            minus = a([l - d for l, d in zip(lam, e)])
            d1 = (plus - minus) / (2 * step)
            d2 = (plus - 2 * a(lam) + minus) / step**2
            worst = max(worst, float(np.max(np.abs(d1) / jb ** (self.order - 1))))
            worst = max(worst, float(np.max(np.abs(d2) / jb ** (self.order - 2))))
        ok = np.isfinite(worst) and (C is None or worst <= C)
        return bool(ok), worst


def _mul_fn(f, g):
    if f is None:
        return g
    if g is None:
        return f
    return lambda *args: f(*args) * g(*args)


def min_grid(h: float, rho: float) -> int:
    """Smallest N with N >= 8 h^{-rho}."""
    return int(np.ceil(RESOLUTION_FACTOR * h**-rho - 1e-9))


def _check_resolution(N: int, h: float, rho: float):
    if N < RESOLUTION_FACTOR * h**-rho - 1e-9:
        raise DomainError(f"grid does not resolve h^rho: need N >= 8 h^-rho = {RESOLUTION_FACTOR * h**-rho:.1f}, got N = {N}")


def _lam_of(a: Symbol2M, X, h: float, rho: float):
    s = h**-rho
    return [s * xp for xp in transverse(X, a.r)]


def op2_apply(a: Symbol2M, u: GridField, h: float | None = None, rho: float | None = None) -> GridField:
    """Op2(a) u; uses the separable form when ``a.terms`` is set."""
    h = u.h if h is None else h
    rho = a.rho if rho is None else rho
    _check_resolution(u.N, h, rho)
    if a.terms is None:
        return op2_apply_dense(a, u, h, rho)
    X = grid_points(u.N, u.n)
    lam = _lam_of(a, X, h, rho)
    XI = [h * f for f in u.frequencies()]
    uh = np.fft.fftn(u.values)
    out = np.zeros_like(u.values)
    for f, g in a.terms:
        v = u.values if g is None else np.fft.ifftn(uh * np.asarray(g(XI), dtype=complex))
        if f is not None:
            v = np.asarray(f(X, lam), dtype=complex) * v
        out += v
    return u.with_values(out)


def op2_adjoint(a: Symbol2M, v: GridField, h: float | None = None, rho: float | None = None) -> GridField:
    """Op2(a)^* v, separable form (the adjoint of f g(hD) is conj(g)(hD) conj(f))."""
    h = v.h if h is None else h
    rho = a.rho if rho is None else rho
    _check_resolution(v.N, h, rho)
    if a.terms is None:
        return _dense_adjoint(a, v, h, rho)
    X = grid_points(v.N, v.n)
    lam = _lam_of(a, X, h, rho)
    XI = [h * f for f in v.frequencies()]
    out = np.zeros_like(v.values)
    for f, g in a.terms:
        w = v.values if f is None else np.conj(np.asarray(f(X, lam), dtype=complex)) * v.values
        if g is not None:
            w = np.fft.ifftn(np.fft.fftn(w) * np.conj(np.asarray(g(XI), dtype=complex)))
        out += w
    return v.with_values(out)


def op2_apply_dense(a: Symbol2M, u: GridField, h: float | None = None, rho: float | None = None,
                    chunk: int = 256) -> GridField:
    """Direct summation of the defining formula, O(N^{2n}); the reference route."""
    h = u.h if h is None else h
    rho = a.rho if rho is None else rho
    _check_resolution(u.N, h, rho)
    X = [x.ravel() for x in grid_points(u.N, u.n)]
    F = [f.ravel() for f in u.frequencies()]
    uhat = u.hat().ravel()
    out = np.empty(len(X[0]), dtype=complex)
    for s in range(0, len(X[0]), chunk):
        xs = [x[s : s + chunk, None] for x in X]
        sym = np.asarray(a(xs, [h * f[None, :] for f in F], _lam_of(a, xs, h, rho)), dtype=complex)
        sym = np.broadcast_to(sym, (len(xs[0]), len(F[0])))
        phase = np.exp(1j * sum(x * f[None, :] for x, f in zip(xs, F)))
        out[s : s + chunk] = (sym * phase) @ uhat
    return u.with_values(out.reshape(u.values.shape))


def _dense_adjoint(a: Symbol2M, v: GridField, h: float, rho: float, chunk: int = 256) -> GridField:
    X = [x.ravel() for x in grid_points(v.N, v.n)]
    F = [f.ravel() for f in v.frequencies()]
    vv = v.values.ravel()
    acc = np.zeros(len(F[0]), dtype=complex)
    for s in range(0, len(X[0]), chunk):
        xs = [x[s : s + chunk, None] for x in X]
        sym = np.asarray(a(xs, [h * f[None, :] for f in F], _lam_of(a, xs, h, rho)), dtype=complex)
        sym = np.broadcast_to(sym, (len(xs[0]), len(F[0])))
        phase = np.exp(-1j * sum(x * f[None, :] for x, f in zip(xs, F)))
        acc += (np.conj(sym) * phase).T @ vv[s : s + chunk]
    # (1/N^n) sum_k e^{i y.xi_k} acc_k is exactly the inverse FFT
    return v.with_values(np.fft.ifftn(acc.reshape(v.values.shape)))


# --- rescaling -------------------------------------------------------------------------


@dataclass
class ScaledField:
    """Grid samples of a function on the torus of side ``side`` (sample j at j side / N)."""

    values: np.ndarray
    h: float
    side: float = 1.0
    factor: int = 1
    rounding: float = 0.0

    @property
    def n(self) -> int:
        return self.values.ndim

    def norm(self) -> float:
        return float(np.sqrt(self.side**self.n * np.mean(np.abs(self.values) ** 2)))

    def to_grid(self) -> GridField:
        if abs(self.side - 1) > 1e-12:
            raise DomainError("only fields on the unit torus convert to GridField")
        return GridField(self.values, self.h)


def rescale(u, delta: float, max_rounding: float = 0.25) -> ScaledField:
    """T_delta u(x) = h^{n delta/2} u(h^delta x) as an index dilation.

    The dilation factor h^{-delta} is rounded to an integer m; the samples keep
    their indices while the period becomes m times larger (m times smaller for
    delta < 0), and the values are scaled by m^{-n/2} (m^{n/2}). The rounding
    m - h^{-|delta|} is recorded; a relative rounding above ``max_rounding``
    is rejected.
    """
    if isinstance(u, GridField):
        u = ScaledField(u.values, u.h)
    exact = u.h ** -abs(delta)
    m = int(round(exact))
    if m < 1 or abs(m - exact) > max_rounding * exact:
        raise DomainError(f"dilation h^-|delta| = {exact:.4g} is not representable by an integer factor")
    n = u.n
    if delta >= 0:
        vals, side = u.values * m ** (-n / 2), u.side * m
    else:
        vals, side = u.values * m ** (n / 2), u.side / m
    return ScaledField(np.array(vals, dtype=complex), u.h, side, m, m - exact)


# --- slopes and residuals ---------------------------------------------------------------


@dataclass
class SlopeResult:
    x: np.ndarray
    values: np.ndarray
    slope: float
    intercept: float
    iterations: list = field(default_factory=list)


def loglog_slope(x, y) -> tuple:
    """Least-squares (slope, intercept) of log y against log x."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if np.any(y <= 0):
        return float("nan"), float("nan")
    A = np.stack([np.log(x), np.ones_like(x)], axis=1)
    coef = np.linalg.lstsq(A, np.log(y), rcond=None)[0]
    return float(coef[0]), float(coef[1])


def _pow2_at_least(x: float) -> int:
    return int(2 ** np.ceil(np.log2(max(x, 2))))


def residual_grid(h: float, rho: float, xi_box: float) -> int:
    """Power-of-two grid resolving h^rho and the frequency box with room for products."""
    return _pow2_at_least(max(RESOLUTION_FACTOR * h**-rho, 2 * xi_box / (np.pi * h), 2 / (np.pi * h)))


def _residual_ops(a: Symbol2M, b: Symbol2M, h: float, rho: float, N: int, kind: str):
    n = a.n
    ab = a * b
    shape = (N,) * n

    def G(v):
        return GridField(v, h)

    def fwd(v):
        g = G(v)
        if kind == "composition":
            return (op2_apply(a, op2_apply(b, g, h, rho), h, rho) - op2_apply(ab, g, h, rho)).values
        return (op2_apply(a, op2_apply(b, g, h, rho), h, rho) - op2_apply(b, op2_apply(a, g, h, rho), h, rho)).values

    def adj(v):
        g = G(v)
        if kind == "composition":
            return (op2_adjoint(b, op2_adjoint(a, g, h, rho), h, rho) - op2_adjoint(ab, g, h, rho)).values
        return (op2_adjoint(b, op2_adjoint(a, g, h, rho), h, rho) - op2_adjoint(a, op2_adjoint(b, g, h, rho), h, rho)).values

    return fwd, adj, shape


def _residual_scan(a, b, h_list, rho, kind, N, rtol, seed, block) -> SlopeResult:
    rho = a.rho if rho is None else rho
    hs, vals, its = [], [], []
    for h in h_list:
        NN = residual_grid(h, rho, min(a.xi_box, b.xi_box)) if N is None else N
        fwd, adj, shape = _residual_ops(a, b, h, rho, NN, kind)
        est = power_norm(fwd, adj, shape, rtol=rtol, seed=seed, block=block, atol=1e-13)
        hs.append(h)
        vals.append(est.value)
        its.append(est.iterations)
    slope, icpt = loglog_slope(hs, vals)
    return SlopeResult(np.array(hs), np.array(vals), slope, icpt, its)


def composition_residual(a: Symbol2M, b: Symbol2M, h_list, rho: float | None = None, N: int | None = None,
                         rtol: float | None = None, seed: int = 0, block: int = 4) -> SlopeResult:
    """||Op2(a) Op2(b) - Op2(ab)|| for each h, with the fitted slope in log h."""
    return _residual_scan(a, b, h_list, rho, "composition", N, rtol, seed, block)


def commutator_norms(a: Symbol2M, b: Symbol2M, h_list, rho: float | None = None, N: int | None = None,
                     rtol: float | None = None, seed: int = 0, block: int = 4) -> SlopeResult:
    """||[Op2(a), Op2(b)]|| for each h, with the fitted slope in log h."""
    return _residual_scan(a, b, h_list, rho, "commutator", N, rtol, seed, block)


def dense_residual_norm(a: Symbol2M, b: Symbol2M, h: float, rho: float | None = None, N: int | None = None,
                        kind: str = "composition") -> float:
    """Largest singular value of the residual built column by column by direct summation."""
    rho = a.rho if rho is None else rho
    N = residual_grid(h, rho, min(a.xi_box, b.xi_box)) if N is None else N
    n = a.n
    ab = a * b
    size = N**n
    cols = []
    for j in range(size):
        e = np.zeros(size, dtype=complex)
        e[j] = 1
        g = GridField(e.reshape((N,) * n), h)
        if kind == "composition":
            c = op2_apply_dense(a, op2_apply_dense(b, g, h, rho), h, rho) - op2_apply_dense(ab, g, h, rho)
        else:
            c = op2_apply_dense(a, op2_apply_dense(b, g, h, rho), h, rho) - op2_apply_dense(b, op2_apply_dense(a, g, h, rho), h, rho)
        cols.append(c.values.ravel())
    return float(np.linalg.norm(np.stack(cols, axis=1), 2))


def bump_symbol_pair(rho: float = 0.6, scale: float = 3.0) -> tuple:
    """Two order-0 symbols on the circle (n = r = 1), each a sum of two separable terms.

    Both are compactly supported in x (|x'| < 0.4) and in xi (|xi| < 2). The
    lam-profiles vary on the scale ``scale`` and the xi-profiles have unit-width
    transitions, so that h^{1-rho} times the lam-bandwidth is small against the
    xi-transitions already at h = 2^-6.
    """
    s = scale

    def cx(x):
        return plateau(transverse(x, 1)[0], 0.15, 0.4)

    def sx(x):
        return plateau(transverse(x, 1)[0] - 0.05, 0.1, 0.3)

    a = Symbol2M.separable(
        [
            (lambda x, lam: cx(x) * (1 + 0.5 * np.tanh(lam[0] / s + 0.3)), lambda xi: plateau(xi[0] - 0.5, 0.2, 1.2)),
            (lambda x, lam: sx(x) * np.exp(-0.5 * ((lam[0] - 1) / s) ** 2), lambda xi: plateau(xi[0] + 0.3, 0.1, 1.1)),
        ],
        n=1, r=1, order=0, rho=rho, xi_box=2.0,
    )
    b = Symbol2M.separable(
        [
            (lambda x, lam: cx(x) * np.exp(-0.5 * ((lam[0] + 0.5) / s) ** 2), lambda xi: plateau(xi[0] - 0.7, 0.1, 1.1)),
            (lambda x, lam: sx(x) * np.cos(lam[0] / s) / (1 + (lam[0] / s) ** 2), lambda xi: plateau(xi[0] + 0.2, 0.2, 1.2)),
        ],
        n=1, r=1, order=0, rho=rho, xi_box=2.0,
    )
    return a, b


# --- flow-out cutoffs ---------------------------------------------------------------------


def shell_modes(N: int, h: float, delta: float, n: int = 2) -> np.ndarray:
    """Integer frequencies k (|k_i| < N/2) with | h |2 pi k| - 1 | < delta."""
    k = np.fft.fftfreq(N, d=1.0 / N).astype(int)
    K = np.stack(np.meshgrid(*([k] * n), indexing="ij"), axis=-1).reshape(-1, n)
    K = K[np.all(np.abs(K) < N // 2, axis=1)]
    r = h * 2 * np.pi * np.linalg.norm(K, axis=1)
    return K[np.abs(r - 1) < delta]


def _wrap(d):
    return d - np.round(d)


def _kappa(s):
    """1 on [-1, 1], 0 outside (-2, 2)."""
    return plateau(s, 1.0, 2.0)


def _chi_tilde(s):
    """Supported in (-1, 1), 1 on [-1/2, 1/2]."""
    return plateau(s, 0.5, 1.0)


@dataclass
class CoisoCutoff:
    """chi_hy or X_y on the unit torus of dimension n in {1, 2}."""

    y: np.ndarray
    eps: float
    rho: float
    delta: float
    h: float
    kind: str
    N: int
    n: int = 2

    @property
    def hr(self) -> float:
        return self.h**self.rho

    def symbol(self, x, xi) -> np.ndarray:
        """The symbol at points x (list of n arrays) and semiclassical xi (list of n arrays)."""
        D = [_wrap(xj - yj) for xj, yj in zip(x, self.y)]
        rxi = np.sqrt(sum(f * f for f in xi))
        if self.kind == "chi_hy":
            d = np.sqrt(sum(e * e for e in D))
            return _chi_tilde(d / (self.eps * self.hr)) * _chi_tilde((rxi - 1) / self.eps)
        shell = _kappa(2 / self.delta * (1 - rxi))
        with np.errstate(invalid="ignore", divide="ignore"):
            th = [np.where(rxi > 0, f / np.where(rxi > 0, rxi, 1), 0) for f in xi]
        s = sum(e * t for e, t in zip(D, th))
        if self.n == 1:
            return shell * plateau(s, ALONG_IN, ALONG_OUT)
        dperp = -D[0] * th[1] + D[1] * th[0]
        return shell * _kappa(dperp / self.hr) * plateau(s, ALONG_IN, ALONG_OUT)

    def spatial(self) -> np.ndarray:
        """chi_hy only: the factor chi~(h^{-rho} d(x, y) / eps) on the grid."""
        D = [_wrap(xj - yj) for xj, yj in zip(grid_points(self.N, self.n), self.y)]
        return _chi_tilde(np.sqrt(sum(e * e for e in D)) / (self.eps * self.hr))

    @cached_property
    def modes(self) -> np.ndarray:
        width = self.eps if self.kind == "chi_hy" else self.delta
        return shell_modes(self.N, self.h, width, self.n)

    @cached_property
    def _mode_index(self):
        return tuple(np.mod(self.modes, self.N).T)

    @cached_property
    def matrix(self) -> sp.csc_matrix:
        """X_y as a sparse map from shell coefficients to grid values (columns = modes)."""
        if self.kind != "X_y":
            raise DomainError("only X_y has a mode matrix")
        X = [g.ravel() for g in grid_points(self.N, self.n)]
        xi = 2 * np.pi * self.modes
        data, rows, ptr = [], [], [0]
        for j in range(len(xi)):
            p = self.symbol(X, [self.h * xi[j, i] for i in range(self.n)])
            idx = np.nonzero(p)[0]
            ph = np.exp(1j * sum(X[i][idx] * xi[j, i] for i in range(self.n)))
            data.append(p[idx] * ph)
            rows.append(idx.astype(np.int32))
            ptr.append(ptr[-1] + len(idx))
        return sp.csc_matrix((np.concatenate(data), np.concatenate(rows), np.array(ptr)),
                             shape=(self.N**self.n, len(xi)))

    def coefficients(self, u: GridField) -> np.ndarray:
        """Fourier coefficients of u on the shell modes (u = sum c_k e^{2 pi i k.x})."""
        return u.hat()[self._mode_index]

    def synthesize(self, c) -> np.ndarray:
        """Adjoint of ``coefficients`` for the Euclidean pairings."""
        a = np.zeros((self.N,) * self.n, dtype=complex)
        a[self._mode_index] = c
        return np.fft.ifftn(a)

    def apply(self, u: GridField) -> GridField:
        if u.N != self.N or u.n != self.n:
            raise DomainError("field grid does not match the cutoff grid")
        if self.kind == "chi_hy":
            XI = [self.h * f for f in u.frequencies()]
            rxi = np.sqrt(sum(f * f for f in XI))
            v = np.fft.ifftn(np.fft.fftn(u.values) * _chi_tilde((rxi - 1) / self.eps))
            return u.with_values(self.spatial() * v)
        c = self.coefficients(u)
        return u.with_values((self.matrix @ c).reshape(u.values.shape))

    def apply_dense(self, u: GridField) -> GridField:
        """Direct summation over all grid frequencies; the reference route."""
        X = [g.ravel() for g in grid_points(self.N, self.n)]
        F = [f.ravel() for f in u.frequencies()]
        uh = u.hat().ravel()
        keep = np.nonzero(uh != 0)[0]
        out = np.zeros(len(X[0]), dtype=complex)
        if self.kind == "chi_hy":
            # spatial factor times the frequency multiplier, both evaluated pointwise
            rxi = np.sqrt(sum((self.h * f[keep]) ** 2 for f in F))
            m = _chi_tilde((rxi - 1) / self.eps)
            for s in range(0, len(X[0]), 512):
                xs = [x[s : s + 512, None] for x in X]
                ph = np.exp(1j * sum(x * f[None, keep] for x, f in zip(xs, F)))
                out[s : s + 512] = ph @ (m * uh[keep])
            return u.with_values((self.spatial().ravel() * out).reshape(u.values.shape))
        for s in range(0, len(X[0]), 512):
            xs = [x[s : s + 512, None] for x in X]
            sym = self.symbol(xs, [self.h * f[None, keep] for f in F])
            ph = np.exp(1j * sum(x * f[None, keep] for x, f in zip(xs, F)))
            out[s : s + 512] = (sym * ph) @ uh[keep]
        return u.with_values(out.reshape(u.values.shape))


def build_coiso_cutoff(y, eps: float | None = None, rho: float = 0.7, delta: float | None = None, h: float = 1 / 128,
                       kind: str = "X_y", N: int | None = None, n: int = 2) -> CoisoCutoff:
    """chi_hy (ball of radius eps h^rho times an eps-shell) or the flow-out cutoff X_y."""
    eps = DEFAULT.micro_eps if eps is None else eps
    delta = DEFAULT.micro_delta if delta is None else delta
    if kind not in ("chi_hy", "X_y"):
        raise DomainError(f"unknown cutoff kind {kind!r}")
    if not 0 < eps < delta:
        raise DomainError(f"need 0 < eps < delta, got eps = {eps}, delta = {delta}")
    if not 0 < rho < 1:
        raise DomainError(f"need 0 < rho < 1, got {rho}")
    if N is None:
        N = _even_at_least(max(min_grid(h, rho), 2 / (np.pi * h) * (1 + delta) * 1.05))
    _check_resolution(N, h, rho)
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if y.shape != (n,):
        raise DomainError(f"base point must have {n} coordinates")
    if (1 + delta) / h > np.pi * N:
        raise DomainError("grid does not contain the frequency shell")
    return CoisoCutoff(y, eps, rho, delta, h, kind, int(N), n)


def _even_at_least(x: float) -> int:
    N = int(np.ceil(x - 1e-9))
    return N + (N % 2)


def commutator_decay(lams, rho: float = 0.7, y=(0.5, 0.5), delta: float | None = None, seed: int = 0,
                     width: float = 0.1) -> SlopeResult:
    """||[P, X_y] u|| / ||u|| for u a shell function localized in B(y, 1/8).

    The fitted slope is against log lam (lam = 1/h), negative when the ratio decays.
    """
    from .quantize import P_apply

    vals = []
    for lam in lams:
        h = 1.0 / lam
        X = build_coiso_cutoff(y, None, rho, delta, h, "X_y")
        rng = np.random.default_rng(seed)
        uh = rng.standard_normal((X.N, X.N)) + 1j * rng.standard_normal((X.N, X.N))
        r = h * np.sqrt(sum(f**2 for f in [2 * np.pi * k for k in _freq_axes(X.N, 2)]))
        g = GridField.from_hat(uh * (np.abs(r - 1) <= width), h)
        D = [_wrap(a - b) for a, b in zip(grid_points(X.N, 2), X.y)]
        g = g.with_values(g.values * plateau(np.sqrt(D[0] ** 2 + D[1] ** 2), 1 / 16, 1 / 8))
        u = GridField.from_hat(g.hat() * (np.abs(r - 1) <= 2 * width), h)
        comm = P_apply(X.apply(u)) - X.apply(P_apply(u))
        vals.append(comm.norm() / u.norm())
    slope, icpt = loglog_slope(lams, vals)
    return SlopeResult(np.asarray(lams, dtype=float), np.array(vals), slope, icpt)


# --- uncertainty ------------------------------------------------------------------------------


@dataclass
class UncertaintyResult:
    t: np.ndarray
    t_grid: np.ndarray
    norms: np.ndarray
    slope: float
    h: float
    rho: float
    iterations: list = field(default_factory=list)


def _check_window(t: float, h: float, rho: float, eps_q: float, eps0: float):
    if abs(t) < h ** (rho - eps_q):
        raise DomainError(f"|t| = {abs(t):.4g} violates h^(rho - eps_q) <= |t| (= {h ** (rho - eps_q):.4g})")
    if abs(t) >= eps0:
        raise DomainError(f"|t| = {abs(t):.4g} violates |t| < eps0 = {eps0}")


class _PairNorm:
    """||X(0) X(t)|| with X(t) the translate of X(0) by t e along a grid axis.

    On the shell coefficients, translation by t e_1 is the phase e^{-i t xi_1};
    so with M the mode matrix of X(0) and Pi the shell restriction,
    ||X(0) X(t)|| = ||M D_t Pi M|| as a map from l^2(shell) to L^2.
    """

    def __init__(self, X: CoisoCutoff):
        self.X = X
        self.M = X.matrix
        self.MH = self.M.conj().T.tocsc()
        self.xi1 = 2 * np.pi * X.modes[:, 0]
        self.scale = 1.0 / np.sqrt(X.N**X.n)

    def norm(self, t: float, rtol=None, seed: int = 0, block: int = 8) -> NormEstimate:
        X = self.X
        Dt = np.exp(-1j * t * self.xi1)
        shape = (X.N,) * X.n

        idx = X._mode_index

        def coeffs(G):
            # columns of G are flattened grid fields; returns their shell coefficients
            F = np.fft.fftn(G.T.reshape((-1,) + shape), axes=tuple(range(1, X.n + 1))) / X.N**X.n
            return F[(slice(None),) + idx].T

        def synth(C):
            A = np.zeros((C.shape[1],) + shape, dtype=complex)
            A[(slice(None),) + idx] = C.T
            return np.fft.ifftn(A, axes=tuple(range(1, X.n + 1))).reshape(C.shape[1], -1).T

        def fwd(V):
            return self.scale * (self.M @ (Dt[:, None] * coeffs(self.M @ V)))

        def adj(W):
            return self.scale * (self.MH @ synth(np.conj(Dt)[:, None] * (self.MH @ W)))

        return power_norm(fwd, adj, (len(self.xi1),), rtol=rtol, seed=seed, block=block,
                          x0=_reflection_even_start(X.modes, seed), batched=True)


def _reflection_even_start(modes, seed):
    """A start vector invariant under k_1 -> -k_1, so that t and -t run mirrored iterations."""
    rng = np.random.default_rng(seed + 7919)
    v = rng.standard_normal(len(modes)) + 1j * rng.standard_normal(len(modes))
    key = {tuple(k): i for i, k in enumerate(modes.tolist())}
    mirror = np.array([key[(-k[0],) + tuple(k[1:])] for k in modes.tolist()])
    return v + v[mirror]


def uncertainty_norm(t_list, h: float, rho: float = 0.7, n: int = 2, eps_q: float = 0.02, eps0: float = 0.45,
                     delta: float | None = None, N: int | None = None, rtol=None, seed: int = 0,
                     block: int = 8, cutoff: CoisoCutoff | None = None) -> UncertaintyResult:
    """||X(0) X(t)|| along the unit-speed geodesic gamma(t) = (t, 0, ...).

    Each t is snapped to the grid (t N an integer) so that X(t) is an exact
    translate of X(0); the snapped values are returned in ``t_grid``.
    """
    X = cutoff or build_coiso_cutoff(np.zeros(n), None, rho, delta, h, "X_y", N=N, n=n)
    for t in t_list:
        _check_window(t, h, rho, eps_q, eps0)
    pair = _PairNorm(X)
    tq = np.array([np.round(t * X.N) / X.N for t in t_list])
    ests = [pair.norm(t, rtol, seed, block) for t in tq]
    norms = np.array([e.value for e in ests])
    slope = loglog_slope(np.abs(tq), norms)[0] if len(tq) > 1 else float("nan")
    return UncertaintyResult(np.asarray(t_list, dtype=float), tq, norms, slope, h, rho, [e.iterations for e in ests])


def uncertainty_h_sweep(t: float, lams, rho: float = 0.7, n: int = 2, eps_q: float = 0.02, eps0: float = 0.45,
                        delta: float | None = None, rtol=None, seed: int = 0, block: int = 8) -> SlopeResult:
    """||X(0) X(t)|| at fixed t over several h = 1/lam; slope in log h."""
    hs, vals, its = [], [], []
    for lam in lams:
        h = 1.0 / lam
        res = uncertainty_norm([t], h, rho, n, eps_q, eps0, delta, rtol=rtol, seed=seed, block=block)
        hs.append(h)
        vals.append(res.norms[0])
        its.append(res.iterations[0])
    slope, icpt = loglog_slope(hs, vals)
    return SlopeResult(np.array(hs), np.array(vals), slope, icpt, its)


def _dense_mode_matrix(X: CoisoCutoff) -> np.ndarray:
    """Grid values of X applied to each shell mode, by direct symbol evaluation."""
    pts = [g.ravel() for g in grid_points(X.N, X.n)]
    xi = 2 * np.pi * X.modes
    sym = X.symbol([p[:, None] for p in pts], [X.h * xi[None, :, i] for i in range(X.n)])
    phase = np.exp(1j * sum(p[:, None] * xi[None, :, i] for i, p in enumerate(pts)))
    return sym * phase


def uncertainty_dense_norm(t: float, h: float, rho: float = 0.7, n: int = 2, delta: float | None = None,
                           N: int | None = None) -> float:
    """||X(0) X(t)|| from the SVD of explicitly assembled matrices (X(t) built at gamma(t) directly)."""
    X0 = build_coiso_cutoff(np.zeros(n), None, rho, delta, h, "X_y", N=N, n=n)
    tq = np.round(t * X0.N) / X0.N
    yt = np.zeros(n)
    yt[0] = tq
    Xt = build_coiso_cutoff(yt, None, rho, delta, h, "X_y", N=X0.N, n=n)
    A0 = _dense_mode_matrix(X0)
    At = _dense_mode_matrix(Xt)
    pts = [g.ravel() for g in grid_points(X0.N, n)]
    xi = 2 * np.pi * X0.modes
    # explicit restriction to the shell coefficients: c_k = mean_x g(x) e^{-i x.xi_k}
    R = np.exp(-1j * sum(xi[:, None, i] * p[None, :] for i, p in enumerate(pts))) / len(pts[0])
    A = A0 @ (R @ At)
    return float(np.linalg.norm(A, 2) / np.sqrt(len(pts[0])))


# --- almost orthogonality ------------------------------------------------------------------------


def orthogonality_bracket(h: float, rho: float, R: float, J: int, n: int = 2) -> float:
    """1 + (h^{2rho-1}/R)^{(n-1)/2} |J|^{(3n+1)/(2n)} (1 + (h^{2rho-1}/R)^{(n-1)/4})."""
    q = h ** (2 * rho - 1) / R
    return 1 + q ** ((n - 1) / 2) * J ** ((3 * n + 1) / (2 * n)) * (1 + q ** ((n - 1) / 4))


@dataclass
class OrthogonalityResult:
    ratios: np.ndarray
    sums: np.ndarray
    bracket: float
    ratio: float
    passed: bool
    points: np.ndarray
    separation: float


def separated_points(R: float, count: int, N: int | None = None) -> np.ndarray:
    """``count`` points of a maximal R-separated set of the unit 2-torus, snapped to the grid if N is given."""
    from .quantize import ball_centers

    pts = np.asarray(ball_centers(R))
    if len(pts) < count:
        raise DomainError(f"only {len(pts)} R-separated points available, need {count}")
    pts = pts[:count]
    if N is not None:
        pts = np.round(pts * N) / N
    return pts


def _min_separation(pts) -> float:
    if len(pts) < 2:
        return np.inf
    d = _wrap(pts[:, None, :] - pts[None, :, :])
    dist = np.sqrt(np.sum(d * d, axis=-1))
    return float(dist[~np.eye(len(pts), dtype=bool)].min())


def almost_orthogonality(points, rho: float, h: float, u_samples, R: float, C_max: float = 10.0,
                         delta: float | None = None, N: int | None = None) -> OrthogonalityResult:
    """max_u sum_j ||X_{x_j} u||^2 / ||u||^2, divided by the bracket.

    Points must lie on the grid; X_{x_j} is then the exact translate of X_0,
    which on shell coefficients is the phase e^{-i x_j.xi}.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    q = h ** (2 * rho - 1) / R
    if not q < 1:
        raise DomainError(f"need h^(2 rho - 1) / R < 1, got {q:.3g}")
    X = build_coiso_cutoff(np.zeros(2), None, rho, delta, h, "X_y", N=N)
    sep = _min_separation(points)
    # snapping to the grid may move each point by up to sqrt(2) / (2N)
    if sep < R - np.sqrt(2) / X.N:
        raise DomainError(f"points are not R-separated: min distance {sep:.4g} < R = {R:.4g}")
    if np.any(np.abs(points * X.N - np.round(points * X.N)) > 1e-9):
        raise DomainError("points must lie on the grid")
    xi = 2 * np.pi * X.modes
    phases = np.exp(-1j * points @ xi.T)  # (J, K)
    M = X.matrix
    sums = []
    for u in u_samples:
        if u.N != X.N:
            raise DomainError("sample grid does not match the cutoff grid")
        c = X.coefficients(u)
        tot = 0.0
        for j in range(len(points)):
            w = M @ (phases[j] * c)
            tot += float(np.mean(np.abs(w) ** 2))
        nu = u.norm() ** 2
        sums.append(tot / nu if nu > 0 else 0.0)
    sums = np.array(sums)
    bracket = orthogonality_bracket(h, rho, R, len(points))
    ratios = sums / bracket
    ratio = float(ratios.max()) if len(ratios) else 0.0
    return OrthogonalityResult(ratios, sums, bracket, ratio, ratio <= C_max, points, sep)
