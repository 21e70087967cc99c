"""Model Riemannian manifolds: spheres, flat tori, products, surfaces of revolution.

Points are handled in two encodings:

* chart coordinates (length ``dim``): hyperspherical angles on spheres,
  periodic coordinates on tori, ``(z, phi)`` on surfaces of revolution;
* the internal representation (length ``rep_dim``): identical to the chart
  except on sphere factors, which use the ambient embedding in R^{n+1}
  with covectors identified with ambient tangent vectors.

Flow, distances and covers work in the internal representation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tolerances import DEFAULT, DomainError

__all__ = [
    "Profile",
    "ModelManifold",
    "CotangentPoint",
    "sphere",
    "flat_torus",
    "product",
    "surface_of_revolution",
    "metric_at",
    "conorm",
    "base_distance",
    "phase_distance",
    "sphere_chart_to_ambient",
    "sphere_ambient_to_chart",
    "to_internal",
    "to_chart",
    "stereographic",
    "inverse_stereographic",
    "check_metric_positive",
]


@dataclass(frozen=True)
class Profile:
    """Radius function of a surface of revolution.

    f(z) = c0 + sum_k c_k cos(k w z) + s_k sin(k w z),  w = 2 pi / period.
    """

    cos_coeffs: tuple[float, ...]
    sin_coeffs: tuple[float, ...] = ()
    period: float = 2 * np.pi

    def _terms(self, z, order):
        z = np.asarray(z, dtype=float)
        w = 2 * np.pi / self.period
        out = np.zeros_like(z) + (self.cos_coeffs[0] if order == 0 else 0.0)
        for k, c in enumerate(self.cos_coeffs[1:], start=1):
            a = k * w
            # derivatives of cos cycle through -sin, -cos, sin
            out = out + c * a**order * np.cos(a * z + order * np.pi / 2)
        for k, s in enumerate(self.sin_coeffs, start=1):
            a = k * w
            out = out + s * a**order * np.sin(a * z + order * np.pi / 2)
        return out

    def __call__(self, z):
        return self._terms(z, 0)

    def d1(self, z):
        return self._terms(z, 1)

    def d2(self, z):
        return self._terms(z, 2)


@dataclass(frozen=True)
class ModelManifold:
    kind: str
    dim: int
    periods: tuple[float, ...] | None = None
    factors: tuple["ModelManifold", ...] = ()
    profile: Profile | None = None

    def __post_init__(self):
        if self.dim < 1:
            raise DomainError("dim must be a positive integer")
        if self.kind == "product" and self.dim != sum(f.dim for f in self.factors):
            raise DomainError("dim(product) must equal the sum of factor dims")
        if self.kind == "flat_torus" and any(p <= 0 for p in self.periods):
            raise DomainError("torus periods must be positive")

    @property
    def rep_dim(self) -> int:
        if self.kind == "sphere":
            return self.dim + 1
        if self.kind == "product":
            return sum(f.rep_dim for f in self.factors)
        return self.dim

    @property
    def has_sphere(self) -> bool:
        if self.kind == "sphere":
            return True
        return any(f.has_sphere for f in self.factors)

    @property
    def injectivity_radius(self) -> float:
        if self.kind == "sphere":
            return float(np.pi)
        if self.kind == "flat_torus":
            return 0.5 * min(self.periods)
        if self.kind == "product":
            return min(f.injectivity_radius for f in self.factors)
        return _revolution_inj_lower_bound(self.profile)

    @property
    def volume(self) -> float:
        if self.kind == "sphere":
            from scipy.special import gamma

            n = self.dim
            return float(2 * np.pi ** ((n + 1) / 2) / gamma((n + 1) / 2))
        if self.kind == "flat_torus":
            return float(np.prod(self.periods))
        if self.kind == "product":
            return float(np.prod([f.volume for f in self.factors]))
        z = np.linspace(0, self.profile.period, 4096, endpoint=False)
        return float(2 * np.pi * self.profile(z).mean() * self.profile.period)

    def label(self) -> str:
        if self.kind == "product":
            return "product(" + ",".join(f.label() for f in self.factors) + ")"
        if self.kind == "flat_torus":
            return f"flat_torus({self.dim})"
        return f"{self.kind}({self.dim})"


@dataclass
class CotangentPoint:
    x: np.ndarray
    xi: np.ndarray
    chart_id: str = "internal"

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.xi = np.asarray(self.xi, dtype=float)


def sphere(n: int = 2) -> ModelManifold:
    return ModelManifold("sphere", int(n))


def flat_torus(n: int = 2, periods: Sequence[float] | None = None) -> ModelManifold:
    if periods is None:
        periods = (1.0,) * n
    periods = tuple(float(p) for p in periods)
    if len(periods) != n:
        raise DomainError("flat_torus needs one period per dimension")
    return ModelManifold("flat_torus", int(n), periods=periods)


def product(m1: ModelManifold, m2: ModelManifold) -> ModelManifold:
    return ModelManifold("product", m1.dim + m2.dim, factors=(m1, m2))


def surface_of_revolution(profile: Profile | Sequence[float], period: float = 2 * np.pi) -> ModelManifold:
    if not isinstance(profile, Profile):
        profile = Profile(tuple(float(c) for c in profile), period=period)
    z = np.linspace(0, profile.period, 2048, endpoint=False)
    if profile(z).min() <= 0:
        raise DomainError("profile must be positive")
    return ModelManifold("surface_of_revolution", 2, profile=profile)


def _revolution_inj_lower_bound(profile: Profile) -> float:
    # Klingenberg-type bound: min(pi / sqrt(K_max), half the shortest closed geodesic)
    z = np.linspace(0, profile.period, 4096, endpoint=False)
    f, f2 = profile(z), profile.d2(z)
    kmax = max(float(np.max(-f2 / f)), 0.0)
    conj = np.pi / np.sqrt(kmax) if kmax > 0 else np.inf
    # meridians have length = period; parallels at critical points of f
    f1 = profile.d1(z)
    crit = np.nonzero(np.sign(f1) != np.sign(np.roll(f1, -1)))[0]
    parallels = [2 * np.pi * f[i] for i in crit] or [np.inf]
    loop = min(profile.period, min(parallels))
    return float(min(conj, loop / 2))


# --- sphere charts -----------------------------------------------------------


def _sphere_embed(angles: np.ndarray):
    """Ambient point and Jacobian (n+1, n) for hyperspherical angles."""
    angles = np.asarray(angles, dtype=float)
    n = angles.shape[0]
    thetas, phi = angles[:-1], angles[-1]
    X = np.zeros(n + 1)
    J = np.zeros((n + 1, n))
    prod = 1.0
    dprod = np.zeros(n)  # derivative of prod wrt each angle
    for i, th in enumerate(thetas):
        X[i] = prod * np.cos(th)
        J[i] = dprod * np.cos(th)
        J[i, i] += -prod * np.sin(th)
        dprod = dprod * np.sin(th)
        dprod[i] += prod * np.cos(th)
        prod = prod * np.sin(th)
    X[n - 1] = prod * np.cos(phi)
    X[n] = prod * np.sin(phi)
    J[n - 1] = dprod * np.cos(phi)
    J[n - 1, n - 1] += -prod * np.sin(phi)
    J[n] = dprod * np.sin(phi)
    J[n, n - 1] += prod * np.cos(phi)
    return X, J


def _sphere_chart_check(angles):
    th = np.asarray(angles, dtype=float)[:-1]
    if np.any(th <= 0) or np.any(th >= np.pi):
        raise DomainError("sphere chart needs colatitude angles strictly inside (0, pi)")


def sphere_chart_to_ambient(angles, xi=None):
    """Map chart angles (and optionally a chart covector) to the ambient encoding."""
    _sphere_chart_check(angles)
    X, J = _sphere_embed(angles)
    if xi is None:
        return X
    g = J.T @ J
    v = np.linalg.solve(g, np.asarray(xi, dtype=float))
    return X, J @ v


def sphere_ambient_to_chart(X, V=None):
    X = np.asarray(X, dtype=float)
    X = X / np.linalg.norm(X)
    n = X.shape[0] - 1
    angles = np.zeros(n)
    for i in range(n - 1):
        angles[i] = np.arctan2(np.linalg.norm(X[i + 1 :]), X[i])
    angles[-1] = np.arctan2(X[n], X[n - 1])
    if V is None:
        return angles
    _, J = _sphere_embed(angles)
    return angles, J.T @ np.asarray(V, dtype=float)


def stereographic(X, north: bool = True):
    """Stereographic chart from the pole -e_0 (north=True) or +e_0."""
    X = np.asarray(X, dtype=float)
    s = 1.0 if north else -1.0
    return X[1:] / (1.0 + s * X[0])


def inverse_stereographic(y, north: bool = True):
    y = np.asarray(y, dtype=float)
    r2 = float(y @ y)
    s = 1.0 if north else -1.0
    X = np.empty(y.shape[0] + 1)
    X[0] = s * (1 - r2) / (1 + r2)
    X[1:] = 2 * y / (1 + r2)
    return X


# --- splitting helpers ---------------------------------------------------------


def _split(M: ModelManifold, v: np.ndarray, rep: bool):
    out, i = [], 0
    for f in M.factors:
        k = f.rep_dim if rep else f.dim
        out.append(v[..., i : i + k])
        i += k
    return out


def _is_chart(M: ModelManifold, x: np.ndarray) -> bool:
    n = x.shape[-1]
    if n == M.dim and (n != M.rep_dim or not M.has_sphere):
        return True
    if n == M.rep_dim:
        return False
    raise DomainError(f"point has {n} coordinates; expected {M.dim} (chart) or {M.rep_dim} (internal)")


def to_internal(M: ModelManifold, x, xi=None):
    """Convert chart coordinates to the internal representation."""
    x = np.asarray(x, dtype=float)
    if M.kind == "sphere":
        return sphere_chart_to_ambient(x, xi)
    if M.kind == "product":
        xs = _split(M, x, rep=False)
        if xi is None:
            return np.concatenate([to_internal(f, a) for f, a in zip(M.factors, xs)])
        xis = _split(M, np.asarray(xi, dtype=float), rep=False)
        parts = [to_internal(f, a, b) for f, a, b in zip(M.factors, xs, xis)]
        return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])
    if xi is None:
        return x.copy()
    return x.copy(), np.asarray(xi, dtype=float).copy()


def to_chart(M: ModelManifold, x, xi=None):
    x = np.asarray(x, dtype=float)
    if M.kind == "sphere":
        return sphere_ambient_to_chart(x, xi)
    if M.kind == "product":
        xs = _split(M, x, rep=True)
        if xi is None:
            return np.concatenate([to_chart(f, a) for f, a in zip(M.factors, xs)])
        xis = _split(M, np.asarray(xi, dtype=float), rep=True)
        parts = [to_chart(f, a, b) for f, a, b in zip(M.factors, xs, xis)]
        return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])
    if xi is None:
        return x.copy()
    return x.copy(), np.asarray(xi, dtype=float).copy()


# --- metric --------------------------------------------------------------------


def metric_at(M: ModelManifold, x) -> np.ndarray:
    """Metric tensor g(x) in chart coordinates."""
    x = np.asarray(x, dtype=float)
    if x.shape != (M.dim,):
        raise DomainError(f"chart point must have {M.dim} coordinates")
    if not np.all(np.isfinite(x)):
        raise DomainError("chart point is not finite")
    if M.kind == "flat_torus":
        return np.eye(M.dim)
    if M.kind == "sphere":
        _sphere_chart_check(x)
        d = np.ones(M.dim)
        s = 1.0
        for i, th in enumerate(x[:-1]):
            s = s * np.sin(th) ** 2
            d[i + 1] = s
        return np.diag(d)
    if M.kind == "product":
        blocks = [metric_at(f, a) for f, a in zip(M.factors, _split(M, x, rep=False))]
        g = np.zeros((M.dim, M.dim))
        i = 0
        for b in blocks:
            k = b.shape[0]
            g[i : i + k, i : i + k] = b
            i += k
        return g
    f = float(M.profile(x[0]))
    return np.diag([1.0, f * f])


def check_metric_positive(M: ModelManifold, points) -> float:
    """Smallest metric eigenvalue over the given chart points."""
    lo = np.inf
    for x in points:
        g = metric_at(M, x)
        if not np.allclose(g, g.T):
            raise DomainError("metric is not symmetric")
        lo = min(lo, float(np.linalg.eigvalsh(g).min()))
    return lo


def _conorm_internal(M: ModelManifold, x, xi):
    if M.kind == "sphere":
        # tangential part of the ambient vector
        xn = x / np.linalg.norm(x, axis=-1, keepdims=True)
        t = xi - np.sum(xi * xn, axis=-1, keepdims=True) * xn
        return np.linalg.norm(t, axis=-1)
    if M.kind == "flat_torus":
        return np.linalg.norm(xi, axis=-1)
    if M.kind == "product":
        parts = [
            _conorm_internal(f, a, b) ** 2
            for f, a, b in zip(M.factors, _split(M, x, True), _split(M, xi, True))
        ]
        return np.sqrt(sum(parts))
    f = M.profile(x[..., 0])
    return np.sqrt(xi[..., 0] ** 2 + (xi[..., 1] / f) ** 2)


def conorm(M: ModelManifold, x, xi):
    """|xi|_g, accepting chart or internal coordinates."""
    x = np.asarray(x, dtype=float)
    xi = np.asarray(xi, dtype=float)
    if _is_chart(M, x):
        if M.has_sphere:
            g = metric_at(M, x)
            return float(np.sqrt(xi @ np.linalg.solve(g, xi)))
        return _conorm_internal(M, x, xi)
    return _conorm_internal(M, x, xi)


# --- distances -----------------------------------------------------------------


def _wrap(d, periods):
    p = np.asarray(periods, dtype=float)
    return d - p * np.round(d / p)


def base_distance(M: ModelManifold, x, y):
    """Geodesic distance between base points (internal representation).

    Exact on spheres, tori and their products. On surfaces of revolution
    the local metric at the midpoint is used, which is accurate at the
    small separations where it is needed.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if M.kind == "flat_torus":
        return np.linalg.norm(_wrap(x - y, M.periods), axis=-1)
    if M.kind == "sphere":
        c = np.linalg.norm(x - y, axis=-1)
        return 2 * np.arcsin(np.clip(c / 2, 0, 1))
    if M.kind == "product":
        parts = [base_distance(f, a, b) ** 2 for f, a, b in zip(M.factors, _split(M, x, True), _split(M, y, True))]
        return np.sqrt(sum(parts))
    prof = M.profile
    d = _wrap(x - y, (prof.period, 2 * np.pi))
    mid = y[..., 0] + 0.5 * d[..., 0]
    f = prof(mid)
    return np.sqrt(d[..., 0] ** 2 + (f * d[..., 1]) ** 2)


def _sphere_transport(eta, y, x):
    """Parallel transport of eta in T_y S^n to T_x along the minimizing arc."""
    c = np.sum(x * y, axis=-1, keepdims=True)
    denom = 1.0 + c
    safe = denom > 1e-12
    coef = np.where(safe, np.sum(eta * x, axis=-1, keepdims=True) / np.where(safe, denom, 1.0), 0.0)
    out = eta - coef * (x + y)
    # antipodal points: transport along the great circle tangent to eta
    return np.where(safe, out, -eta)


def phase_distance(M: ModelManifold, p: CotangentPoint, q: CotangentPoint):
    """Sasaki-type distance sqrt(d(x,y)^2 + |xi - P eta|^2), P = parallel transport."""
    px, pxi = _as_internal(M, p)
    qx, qxi = _as_internal(M, q)
    return _phase_distance_arrays(M, px, pxi, qx, qxi)


def _as_internal(M, p: CotangentPoint):
    if p.chart_id == "chart":
        return to_internal(M, p.x, p.xi)
    return p.x, p.xi


def _fiber_gap2(M, x, xi, y, eta):
    if M.kind == "flat_torus":
        return np.sum((xi - eta) ** 2, axis=-1)
    if M.kind == "sphere":
        return np.sum((xi - _sphere_transport(eta, y, x)) ** 2, axis=-1)
    if M.kind == "product":
        s = 0.0
        for f, a, b, c, d in zip(
            M.factors, _split(M, x, True), _split(M, xi, True), _split(M, y, True), _split(M, eta, True)
        ):
            s = s + _fiber_gap2(f, a, b, c, d)
        return s
    prof = M.profile
    dz = _wrap(x[..., 0] - y[..., 0], prof.period)
    f = prof(y[..., 0] + 0.5 * dz)
    return (xi[..., 0] - eta[..., 0]) ** 2 + ((xi[..., 1] - eta[..., 1]) / f) ** 2


def _phase_distance_arrays(M, x, xi, y, eta):
    d = base_distance(M, x, y)
    return np.sqrt(d**2 + _fiber_gap2(M, x, xi, y, eta))


def normalize_covector(M: ModelManifold, x, xi):
    """Rescale xi to unit length (internal representation)."""
    x = np.asarray(x, dtype=float)
    xi = np.asarray(xi, dtype=float)
    if M.kind == "sphere":
        xi = xi - np.sum(xi * x, axis=-1, keepdims=True) * x
    elif M.kind == "product":
        parts = []
        for f, a, b in zip(M.factors, _split(M, x, True), _split(M, xi, True)):
            if f.kind == "sphere":
                b = b - np.sum(b * a, axis=-1, keepdims=True) * a
            parts.append(b)
        xi = np.concatenate(parts, axis=-1)
    return xi / _conorm_internal(M, x, xi)[..., None]


def random_cosphere(M: ModelManifold, count: int, rng: np.random.Generator):
    """Uniform-ish random points of S*M in the internal representation."""
    if M.kind == "sphere":
        x = rng.normal(size=(count, M.dim + 1))
        x /= np.linalg.norm(x, axis=1, keepdims=True)
        v = rng.normal(size=(count, M.dim + 1))
        return x, normalize_covector(M, x, v)
    if M.kind == "flat_torus":
        x = rng.random((count, M.dim)) * np.asarray(M.periods)
        v = rng.normal(size=(count, M.dim))
        return x, normalize_covector(M, x, v)
    if M.kind == "product":
        xs, vs = [], []
        for f in M.factors:
            a, b = random_cosphere(f, count, rng)
            xs.append(a)
            vs.append(b * rng.random((count, 1)) + 0.0)
        x = np.concatenate(xs, axis=1)
        return x, normalize_covector(M, x, np.concatenate(vs, axis=1))
    z = rng.random(count) * M.profile.period
    phi = rng.random(count) * 2 * np.pi
    x = np.stack([z, phi], axis=1)
    v = rng.normal(size=(count, 2))
    return x, normalize_covector(M, x, v)


__all__ += ["normalize_covector", "random_cosphere"]
