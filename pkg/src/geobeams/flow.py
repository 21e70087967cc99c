"""Geodesic flow, linearized flow, conjugate points and expansion rates.

The flow is generated by H = |xi|^2 / 2, which agrees with the flow of
|xi|_g - 1 on the unit cosphere bundle. Its linearization has no trivial
radial kernel, so the covector-to-base block of d(phi_t) is invertible
away from conjugate times.

Linearizations are written in orthonormal frames: on spheres the frame is
adapted to the velocity and parallel along the geodesic, on tori it is the
coordinate frame, on surfaces of revolution it is the normalized chart
frame (d/dz, f^{-1} d/dphi).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .manifold import (
    CotangentPoint,
    ModelManifold,
    _as_internal,
    _conorm_internal,
    _split,
    _wrap,
    base_distance,
)
from .tolerances import DEFAULT, ConvergenceError, DomainError

__all__ = [
    "Trajectory",
    "ConjugateEvent",
    "ConjugateSet",
    "HypothesisReport",
    "ExpansionEstimate",
    "geodesic_flow",
    "flow_points",
    "flow_jacobian",
    "jacobi_block",
    "tangent_frame",
    "direction_sample",
    "conjugate_points",
    "maximally_conjugate_set",
    "check_noconj_hypothesis",
    "max_expansion_rate",
    "ehrenfest_time",
    "r_schedule",
]


@dataclass
class Trajectory:
    base: ModelManifold
    times: np.ndarray
    x: np.ndarray
    xi: np.ndarray
    jacobi: np.ndarray | None = None
    integrator_meta: dict = field(default_factory=dict)

    @property
    def samples(self):
        return [(float(t), CotangentPoint(a, b)) for t, a, b in zip(self.times, self.x, self.xi)]

    def energy_drift(self) -> float:
        e = _conorm_internal(self.base, self.x, self.xi)
        return float(np.max(np.abs(e - e[0])))


@dataclass
class ConjugateEvent:
    t: float
    multiplicity: int
    witness: np.ndarray
    flagged: bool = False


@dataclass
class ConjugateSet:
    points: np.ndarray
    directions: np.ndarray
    multiplicities: np.ndarray
    dispersion: float
    boundary_flags: np.ndarray


@dataclass
class HypothesisReport:
    holds: bool
    margin: float
    worst: tuple | None
    rows: list
    inconclusive: bool
    multiplicity_max: int


@dataclass
class ExpansionEstimate:
    value: float
    raw: float
    drift: float
    floored: bool


# --- frames --------------------------------------------------------------------


def _complete_basis(vectors: np.ndarray, dim: int) -> np.ndarray:
    """Orthonormal rows spanning R^dim whose leading rows span ``vectors``."""
    cand = np.vstack([vectors, np.eye(dim)])
    # Gram-Schmidt, keeping only directions that increase rank
    rows = []
    for v in cand:
        w = v - sum((v @ u) * u for u in rows) if rows else v.copy()
        nw = np.linalg.norm(w)
        if nw > 1e-8:
            rows.append(w / nw)
        if len(rows) == dim:
            break
    return np.array(rows)


def _factor_frame(M: ModelManifold, x, xi):
    """Orthonormal frame (rows) of T_xM in internal covector coordinates.

    The first row is xi/|xi| when xi is nonzero (velocity-adapted).
    """
    if M.kind == "sphere":
        x = x / np.linalg.norm(x)
        c = float(np.linalg.norm(xi))
        lead = [x] + ([xi / c] if c > 1e-14 else [])
        basis = _complete_basis(np.array(lead), M.dim + 1)
        return basis[1:]
    if M.kind == "flat_torus":
        c = float(np.linalg.norm(xi))
        if c > 1e-14:
            return _complete_basis((xi / c)[None], M.dim)
        return np.eye(M.dim)
    if M.kind == "surface_of_revolution":
        f = float(M.profile(x[0]))
        return np.array([[1.0, 0.0], [0.0, f]])
    raise DomainError("frame requested for a composite manifold")


def tangent_frame(M: ModelManifold, x, xi=None) -> np.ndarray:
    """Block-diagonal orthonormal frame, shape (dim, rep_dim)."""
    x = np.asarray(x, dtype=float)
    xi = np.zeros(M.rep_dim) if xi is None else np.asarray(xi, dtype=float)
    if M.kind != "product":
        return _factor_frame(M, x, xi)
    F = np.zeros((M.dim, M.rep_dim))
    i = j = 0
    for f, a, b in zip(M.factors, _split(M, x, True), _split(M, xi, True)):
        Ff = tangent_frame(f, a, b)
        F[i : i + f.dim, j : j + f.rep_dim] = Ff
        i += f.dim
        j += f.rep_dim
    return F


def direction_sample(M: ModelManifold, x, count: int):
    """Deterministic low-discrepancy unit covectors at x.

    Returns (covectors (count, rep_dim), angular covering radius).
    """
    n = M.dim
    if n == 1:
        u = np.array([[1.0], [-1.0]])
        disp = 0.0
    elif n == 2:
        ang = 2 * np.pi * (np.arange(count) + 0.5) / count
        u = np.stack([np.cos(ang), np.sin(ang)], axis=1)
        disp = np.pi / count
    elif n == 3:
        # Fibonacci lattice on S^2
        k = np.arange(count) + 0.5
        z = 1 - 2 * k / count
        phi = np.pi * (1 + 5**0.5) * k
        s = np.sqrt(1 - z * z)
        u = np.stack([s * np.cos(phi), s * np.sin(phi), z], axis=1)
        disp = float(np.sqrt(4 * np.pi / count))
    else:
        from scipy.special import ndtri

        alpha = _kronecker_alpha(n)
        pts = np.mod(np.outer(np.arange(1, count + 1), alpha), 1.0)
        u = ndtri(np.clip(pts, 1e-12, 1 - 1e-12))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        disp = float((2 * np.pi ** (n / 2) / _gamma(n / 2) / count) ** (1 / (n - 1)))
    F = tangent_frame(M, x)
    return u @ F, float(disp)


def _gamma(z):
    from scipy.special import gamma

    return float(gamma(z))


def _kronecker_alpha(d):
    # generalized golden ratio: positive root of x^{d+1} = x + 1
    g = 2.0
    for _ in range(60):
        g = (1 + g) ** (1 / (d + 1))
    return np.mod(1 / g ** np.arange(1, d + 1), 1.0)


# --- closed-form flows ---------------------------------------------------------


def _closed_points(M: ModelManifold, x, xi, t):
    t = np.asarray(t, dtype=float)[..., None]
    if M.kind == "flat_torus":
        return np.mod(x + t * xi, np.asarray(M.periods)), np.broadcast_to(xi, t.shape[:-1] + xi.shape).copy()
    if M.kind == "sphere":
        c = np.linalg.norm(xi)
        if c < 1e-300:
            return np.broadcast_to(x, t.shape[:-1] + x.shape).copy(), np.zeros(t.shape[:-1] + x.shape)
        ct = c * t
        pos = x * np.cos(ct) + (xi / c) * np.sin(ct)
        vel = -x * c * np.sin(ct) + xi * np.cos(ct)
        return pos, vel
    if M.kind == "product":
        ps, vs = [], []
        for f, a, b in zip(M.factors, _split(M, x, True), _split(M, xi, True)):
            p, v = _closed_points(f, a, b, t[..., 0])
            ps.append(p)
            vs.append(v)
        return np.concatenate(ps, axis=-1), np.concatenate(vs, axis=-1)
    raise DomainError("no closed form for this manifold")


def _closed_jacobian(M: ModelManifold, xi_speed: float, t) -> np.ndarray:
    """d(phi_t) in the velocity-adapted frame, shape (len(t), 2n, 2n)."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    n = M.dim
    J = np.zeros((t.size, 2 * n, 2 * n))
    if M.kind == "flat_torus":
        for i in range(n):
            J[:, i, i] = 1
            J[:, n + i, n + i] = 1
            J[:, i, n + i] = t
        return J
    if M.kind == "sphere":
        c = float(xi_speed)
        start = 0
        if c > 1e-14:
            J[:, 0, 0] = 1
            J[:, n, n] = 1
            J[:, 0, n] = t
            start = 1
            cs, sn = np.cos(c * t), np.sin(c * t)
            s_over_c = sn / c
        else:
            cs, sn, s_over_c = np.ones_like(t), np.zeros_like(t), t
        for i in range(start, n):
            J[:, i, i] = cs
            J[:, i, n + i] = s_over_c
            J[:, n + i, i] = -c * sn
            J[:, n + i, n + i] = cs
        return J
    raise DomainError("no closed-form linearization for this manifold")


def _has_closed_form(M: ModelManifold) -> bool:
    if M.kind == "product":
        return all(_has_closed_form(f) for f in M.factors)
    return M.kind in ("sphere", "flat_torus")


def _closed_jacobian_full(M: ModelManifold, x, xi, t):
    if M.kind != "product":
        return _closed_jacobian(M, np.linalg.norm(xi), t)
    t = np.atleast_1d(np.asarray(t, dtype=float))
    n = M.dim
    J = np.zeros((t.size, 2 * n, 2 * n))
    i = 0
    for f, a, b in zip(M.factors, _split(M, x, True), _split(M, xi, True)):
        Jf = _closed_jacobian_full(f, a, b, t)
        k = f.dim
        J[:, i : i + k, i : i + k] = Jf[:, :k, :k]
        J[:, i : i + k, n + i : n + i + k] = Jf[:, :k, k:]
        J[:, n + i : n + i + k, i : i + k] = Jf[:, k:, :k]
        J[:, n + i : n + i + k, n + i : n + i + k] = Jf[:, k:, k:]
        i += k
    return J


# --- surface of revolution: adaptive RK4 -----------------------------------------


def _rev_rhs(profile, y):
    z, _, pz, pphi = y[:4]
    f = profile(z)
    f1 = profile.d1(z)
    f2 = profile.d2(z)
    dy = np.empty_like(y)
    dy[0] = pz
    dy[1] = pphi / f**2
    dy[2] = pphi**2 * f1 / f**3
    dy[3] = 0.0
    if y.shape[0] > 4:
        A = np.zeros((4, 4))
        A[0, 2] = 1.0
        A[1, 0] = -2 * pphi * f1 / f**3
        A[1, 3] = 1 / f**2
        A[2, 0] = pphi**2 * (f2 / f**3 - 3 * f1**2 / f**4)
        A[2, 3] = 2 * pphi * f1 / f**3
        Y = y[4:].reshape(4, 4)
        dy[4:] = (A @ Y).ravel()
    return dy


def _rk4_step(profile, y, h):
    k1 = _rev_rhs(profile, y)
    k2 = _rev_rhs(profile, y + 0.5 * h * k1)
    k3 = _rev_rhs(profile, y + 0.5 * h * k2)
    k4 = _rev_rhs(profile, y + h * k3)
    return y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)


def _rk4_adaptive(profile, y0, t_end, tol, out_times=None, h0=1e-2, h_max=0.1):
    """Step-doubling RK4 with local error per unit time below ``tol``.

    Returns (times, states, meta). If ``out_times`` is given the integration
    also stops exactly at those times.
    """
    stops = np.array([t_end]) if out_times is None else np.asarray(out_times, dtype=float)
    t = 0.0
    y = np.array(y0, dtype=float)
    h = min(h0, h_max)
    times, states = [0.0], [y.copy()]
    hs, errs = [], []
    direction = 1.0 if t_end >= 0 else -1.0
    for stop in stops:
        while direction * (stop - t) > 1e-15:
            h = min(h, abs(stop - t))
            full = _rk4_step(profile, y, direction * h)
            half = _rk4_step(profile, _rk4_step(profile, y, direction * h / 2), direction * h / 2)
            err = float(np.max(np.abs(half - full))) / 15.0
            # differences at rounding level carry no truncation information
            floor = 64 * np.finfo(float).eps * max(1.0, float(np.max(np.abs(y))))
            if err <= max(tol * h, floor) or h < 1e-14:
                if h < 1e-14 and err > max(tol * h, floor):
                    raise ConvergenceError("step size underflow in RK4", achieved=err / h)
                t += direction * h
                y = half + (half - full) / 15.0
                hs.append(h)
                errs.append(min(err, tol * h))
                if out_times is None:
                    times.append(t)
                    states.append(y.copy())
            fac = 0.9 * (tol * h / max(err, 1e-300)) ** 0.25
            h = min(h_max, h * min(2.0, max(0.2, fac)))
        if out_times is not None:
            t = float(stop)
            times.append(t)
            states.append(y.copy())
    meta = {
        "method": "rk4-step-doubling",
        "min_step": float(min(hs)) if hs else 0.0,
        "max_step": float(max(hs)) if hs else 0.0,
        "steps": len(hs),
        "max_local_error_per_time": float(max(e / h for e, h in zip(errs, hs))) if hs else 0.0,
    }
    return np.array(times), np.array(states), meta


def _rev_frame_jac(profile, z0, states):
    # conjugate chart linearization into the normalized frame
    f0 = float(profile(z0))
    out = []
    for y in states:
        Y = y[4:].reshape(4, 4)
        ft = float(profile(y[0]))
        L = np.diag([1.0, ft, 1.0, 1.0 / ft])
        R = np.diag([1.0, 1.0 / f0, 1.0, f0])
        out.append(L @ Y @ R)
    return np.array(out)


# --- public flow API -------------------------------------------------------------


def flow_points(M: ModelManifold, x, xi, t, tol: float | None = None):
    """phi_t(x, xi) for an array of times (internal representation)."""
    x = np.asarray(x, dtype=float)
    xi = np.asarray(xi, dtype=float)
    t = np.asarray(t, dtype=float)
    if _has_closed_form(M):
        return _closed_points(M, x, xi, t)
    tol = DEFAULT.ode_tol if tol is None else tol
    flat = np.atleast_1d(t)
    order = np.argsort(flat)
    ts = flat[order]
    pos_out = np.empty((flat.size, 2))
    vel_out = np.empty((flat.size, 2))
    y0 = np.concatenate([x, xi])
    for sign in (1.0, -1.0):
        sel = ts >= 0 if sign > 0 else ts < 0
        if not np.any(sel):
            continue
        tt = ts[sel] if sign > 0 else ts[sel][::-1]
        _, st, _ = _rk4_adaptive(M.profile, y0, tt[-1], tol, out_times=tt)
        st = st[1:]
        if sign < 0:
            st = st[::-1]
        idx = order[sel]
        pos_out[idx] = st[:, :2]
        vel_out[idx] = st[:, 2:4]
    pos_out[:, 0] = np.mod(pos_out[:, 0], M.profile.period)
    pos_out[:, 1] = np.mod(pos_out[:, 1], 2 * np.pi)
    return pos_out.reshape(t.shape + (2,)), vel_out.reshape(t.shape + (2,))


def flow_jacobian(M: ModelManifold, x, xi, t, tol: float | None = None) -> np.ndarray:
    """d(phi_t) in orthonormal frames, shape (len(t), 2n, 2n)."""
    x = np.asarray(x, dtype=float)
    xi = np.asarray(xi, dtype=float)
    t = np.atleast_1d(np.asarray(t, dtype=float))
    if _has_closed_form(M):
        return _closed_jacobian_full(M, x, xi, t)
    tol = DEFAULT.ode_tol if tol is None else tol
    if np.any(np.diff(t) < 0) or t[0] < 0:
        raise DomainError("flow_jacobian expects nondecreasing nonnegative times")
    y0 = np.concatenate([x, xi, np.eye(4).ravel()])
    _, st, _ = _rk4_adaptive(M.profile, y0, t[-1], tol, out_times=t)
    return _rev_frame_jac(M.profile, x[0], st[1:])


def jacobi_block(M: ModelManifold, x, xi, t) -> np.ndarray:
    """The n x n block of d(phi_t) mapping covector perturbations to base displacement."""
    J = flow_jacobian(M, x, xi, t)
    n = M.dim
    return J[:, :n, n:]


def geodesic_flow(M: ModelManifold, rho0: CotangentPoint, t_final: float, tolerance: float = 1e-6,
                  with_jacobi: bool = True, tol: "object" = DEFAULT) -> Trajectory:
    """Sample the unit-speed geodesic flow from rho0 up to time t_final.

    ``tolerance`` bounds the error of linear interpolation between samples.
    """
    x, xi = _as_internal(M, rho0)
    e = float(_conorm_internal(M, x, xi))
    if abs(e - 1) > max(tol.cosphere, 1e-10):
        raise DomainError(f"initial covector must be unit length, got |xi|_g = {e!r}")
    if _has_closed_form(M):
        # chord error of a unit-speed curve with curvature <= 1 is dt^2 / 8
        dt = float(np.sqrt(8 * tolerance)) if M.has_sphere else max(abs(t_final), 1e-12)
        if M.kind == "flat_torus" or (M.kind == "product" and not M.has_sphere):
            dt = min(dt, 0.25 * min(_periods(M)))
        count = int(np.ceil(abs(t_final) / dt)) + 1
        times = np.linspace(0.0, t_final, max(count, 2))
        px, pv = _closed_points(M, x, xi, times)
        jac = _closed_jacobian_full(M, x, xi, times) if with_jacobi else None
        meta = {"method": "closed-form", "sample_step": float(times[1] - times[0]), "error_bound": 0.0}
        return Trajectory(M, times, px, pv, jac, meta)
    y0 = np.concatenate([x, xi, np.eye(4).ravel()])
    times, st, meta = _rk4_adaptive(M.profile, y0, t_final, tol.ode_tol, h_max=min(0.05, np.sqrt(8 * tolerance)))
    if meta["max_local_error_per_time"] > tol.ode_tol * 1.0001:
        raise ConvergenceError("integrator missed tolerance", achieved=meta["max_local_error_per_time"])
    jac = _rev_frame_jac(M.profile, x[0], st) if with_jacobi else None
    traj = Trajectory(M, times, st[:, :2].copy(), st[:, 2:4].copy(), jac, meta)
    drift = traj.energy_drift()
    if drift > tol.energy:
        raise ConvergenceError(f"energy drift {drift:.3e} exceeds tolerance", achieved=drift)
    return traj


def _periods(M):
    if M.kind == "flat_torus":
        return list(M.periods)
    out = []
    for f in M.factors:
        out += _periods(f)
    return out


# --- conjugate points --------------------------------------------------------------


def _rel_singular(blocks: np.ndarray):
    s = np.linalg.svd(blocks, compute_uv=False)
    norm = s[..., 0]
    return s, norm


def _golden_min(fun, lo, hi, iters=80):
    """Vectorized golden-section minimization of fun over [lo, hi]."""
    g = (np.sqrt(5) - 1) / 2
    a, b = lo.copy(), hi.copy()
    c = b - g * (b - a)
    d = a + g * (b - a)
    fc, fd = fun(c), fun(d)
    for _ in range(iters):
        left = fc < fd
        # left: minimum in [a, d]; otherwise in [c, b]
        a, b = np.where(left, a, c), np.where(left, d, b)
        keep = np.where(left, c, d)
        fkeep = np.where(left, fc, fd)
        new = np.where(left, b - g * (b - a), a + g * (b - a))
        fnew = fun(new)
        c, fc = np.where(left, new, keep), np.where(left, fnew, fkeep)
        d, fd = np.where(left, keep, new), np.where(left, fkeep, fnew)
    return 0.5 * (a + b)


def _events_for_directions(M, x, dirs, T, threshold, dt=None):
    """Conjugate events along each direction. Returns list of event lists."""
    n = M.dim
    dt = 0.02 if dt is None else dt
    grid = np.arange(dt, T + dt, dt)
    results = []
    for xi in dirs:

        def smin(ts, xi=xi):
            B = jacobi_block(M, x, xi, np.sort(ts)) if not _has_closed_form(M) else _closed_jacobian_full(M, x, xi, ts)[:, :n, n:]
            s = np.linalg.svd(B, compute_uv=False)
            return s[:, -1] / s[:, 0]

        if _has_closed_form(M):
            B = _closed_jacobian_full(M, x, xi, grid)[:, :n, n:]
        else:
            B = jacobi_block(M, x, xi, grid)
        s = np.linalg.svd(B, compute_uv=False)
        rel = s[:, -1] / s[:, 0]
        # candidate local minima of the smallest relative singular value
        interior = (rel[1:-1] <= rel[:-2]) & (rel[1:-1] <= rel[2:]) & (rel[1:-1] < 0.05)
        idx = np.nonzero(interior)[0] + 1
        if rel.size >= 2 and rel[-1] < rel[-2] and rel[-1] < 0.05:
            idx = np.append(idx, rel.size - 1)
        events = []
        if idx.size:
            lo = grid[np.maximum(idx - 1, 0)]
            hi = np.minimum(grid[np.minimum(idx + 1, grid.size - 1)], T)
            if _has_closed_form(M):
                tstar = _golden_min(smin, lo.astype(float), hi.astype(float))
            else:
                tstar = np.array([_scalar_min(smin, a, b) for a, b in zip(lo, hi)])
            for ts in tstar:
                if ts > T + 1e-12 or ts <= 0:
                    continue
                Bt = (_closed_jacobian_full(M, x, xi, [ts]) if _has_closed_form(M) else flow_jacobian(M, x, xi, [ts]))[0, :n, n:]
                sv = np.linalg.svd(Bt, compute_uv=False)
                thr = threshold * sv[0]
                mult = int(np.sum(sv < thr))
                band = np.any((sv > thr / DEFAULT.conj_flag_factor) & (sv < thr * DEFAULT.conj_flag_factor))
                if mult == 0:
                    if band:
                        warnings.warn(f"near-conjugate point at t={ts:.6g} within the ambiguity band", stacklevel=3)
                    continue
                events.append(ConjugateEvent(float(ts), mult, sv, bool(band)))
        if len(events) > 1:
            merged = [events[0]]
            for ev in events[1:]:
                if abs(ev.t - merged[-1].t) < 1e-8:
                    continue
                merged.append(ev)
            events = merged
        for ev in events:
            if ev.flagged:
                warnings.warn(f"conjugate event at t={ev.t:.6g} has a singular value near the threshold", stacklevel=3)
        results.append(events)
    return results


def _scalar_min(fun, a, b):
    from scipy.optimize import minimize_scalar

    res = minimize_scalar(lambda s: float(fun(np.array([s]))[0]), bounds=(a, b), method="bounded",
                          options={"xatol": 1e-11})
    return float(res.x)


def conjugate_points(M: ModelManifold, x, direction, T: float, threshold: float | None = None,
                     dt: float | None = None) -> list[ConjugateEvent]:
    """Conjugate times along the geodesic from x with initial covector ``direction``."""
    if T <= 0:
        raise DomainError("T > 0 required")
    threshold = DEFAULT.conj_rel if threshold is None else threshold
    x = np.asarray(x, dtype=float)
    xi = np.asarray(direction, dtype=float)
    return _events_for_directions(M, x, [xi], T, threshold, dt)[0]


def _window_mult(events, lo, hi):
    """Sum of multiplicities in [lo, hi] and whether an event sits on the boundary."""
    total, boundary = 0, False
    for ev in events:
        if lo - 1e-12 <= ev.t <= hi + 1e-12:
            total += ev.multiplicity
            if abs(ev.t - lo) < 1e-9 or abs(ev.t - hi) < 1e-9:
                boundary = True
    return total, boundary


def maximally_conjugate_set(M: ModelManifold, x, m: int, r: float, t: float,
                            n_directions: int | None = None, threshold: float | None = None) -> ConjugateSet:
    """Endpoints gamma(t) of directions with >= m conjugate points in [t - r, t + r].

    The window is closed: events on its boundary are included and flagged.
    """
    n = M.dim
    if m > n - 1 or m < 1:
        raise DomainError("need 1 <= m <= n - 1")
    if r <= 0:
        raise DomainError("r > 0 required")
    x = np.asarray(x, dtype=float)
    if n_directions is None:
        n_directions = _directions_for(n, r)
    dirs, disp = direction_sample(M, x, n_directions)
    if disp > r:
        raise DomainError(
            f"direction sample covering radius {disp:.3g} exceeds r = {r:.3g}; use at least "
            f"{_directions_for(n, r)} directions"
        )
    threshold = DEFAULT.conj_rel if threshold is None else threshold
    events = _events_for_directions(M, x, dirs, t + r, threshold)
    pts, keep, mults, flags = [], [], [], []
    for xi, evs in zip(dirs, events):
        mult, boundary = _window_mult(evs, t - r, t + r)
        if mult >= m:
            p, _ = flow_points(M, x, xi, np.array([t]))
            pts.append(p[0])
            keep.append(xi)
            mults.append(mult)
            flags.append(boundary)
    rep = M.rep_dim
    return ConjugateSet(
        np.array(pts).reshape(-1, rep),
        np.array(keep).reshape(-1, rep),
        np.array(mults, dtype=int),
        disp,
        np.array(flags, dtype=bool),
    )


def _directions_for(n, r):
    if n <= 1:
        return 2
    if n == 2:
        return int(np.ceil(np.pi / r))
    if n == 3:
        return int(np.ceil(4 * np.pi / r**2))
    return int(np.ceil(2 * np.pi ** (n / 2) / _gamma(n / 2) / r ** (n - 1)))


def r_schedule(t, a: float):
    """r_t = a^{-1} e^{-a t}."""
    return np.exp(-a * np.asarray(t, dtype=float)) / a


def check_noconj_hypothesis(M: ModelManifold, U, a: float, t0: float, T: float,
                            n_directions: int = 64, pairs=None, threshold: float | None = None) -> HypothesisReport:
    """Check d(x1, C_{x2}^{n-1, r_t, t}) >= r_t over sampled pairs and times in [t0, T].

    Times are stepped by r_t / 2 so that every window [t - r_t, t + r_t]
    overlaps its neighbours. The margin is +inf when every C set is empty.
    """
    if a <= 0 or t0 <= 0:
        raise DomainError("a > 0 and t0 > 0 required")
    U = np.asarray(U, dtype=float)
    threshold = DEFAULT.conj_rel if threshold is None else threshold
    m = M.dim - 1
    if pairs is None:
        pairs = [(i, j) for i in range(len(U)) for j in range(len(U))]
    times = [t0]
    while times[-1] < T:
        times.append(min(T, times[-1] + 0.5 * float(r_schedule(times[-1], a))))
    times = np.array(times)
    rts = r_schedule(times, a)
    horizon = T + float(rts[0])
    cache = {}
    rows = []
    best = np.inf
    worst = None
    inconclusive = False
    mult_max = 0
    for i1, i2 in pairs:
        x1, x2 = U[i1], U[i2]
        if i2 not in cache:
            dirs, disp = direction_sample(M, x2, n_directions)
            evs = _events_for_directions(M, x2, dirs, horizon, threshold)
            tot = np.zeros((len(dirs), times.size), dtype=int)
            for d, ev in enumerate(evs):
                if not ev:
                    continue
                tt = np.array([e.t for e in ev])
                cm = np.concatenate([[0], np.cumsum([e.multiplicity for e in ev])])
                lo = np.searchsorted(tt, times - rts - 1e-12, side="left")
                hi = np.searchsorted(tt, times + rts + 1e-12, side="right")
                tot[d] = cm[hi] - cm[lo]
            hits = {}
            for k in np.nonzero(np.any(tot >= m, axis=0))[0]:
                chosen = np.nonzero(tot[:, k] >= m)[0]
                pts = np.array([flow_points(M, x2, dirs[d], np.array([times[k]]))[0][0] for d in chosen])
                hits[int(k)] = (pts, int(tot[chosen, k].max()))
            cache[i2] = (disp, hits, int(tot.max()) if tot.size else 0)
        disp, hits, mm = cache[i2]
        mult_max = max(mult_max, mm)
        for k, (pts, tk) in hits.items():
            t, rt = float(times[k]), float(rts[k])
            dist = float(np.min(base_distance(M, pts, x1[None, :])))
            margin = dist - rt
            if disp > rt:
                inconclusive = True
            rows.append((i1, i2, t, rt, dist, margin, tk))
            if margin < best:
                best = margin
                worst = (i1, i2, t)
    return HypothesisReport(bool(best > 0), float(best), worst, rows, inconclusive, int(mult_max))


# --- expansion rate ---------------------------------------------------------------


def max_expansion_rate(M: ModelManifold, sample_size: int = 32, T: float = 200.0, seed: int = 0,
                       floor: float | None = None) -> ExpansionEstimate:
    """max over sampled (x, xi) of (1/T) log ||d phi_T||, floored at eps_Lambda."""
    from .manifold import random_cosphere

    floor = DEFAULT.lambda_floor if floor is None else floor
    rng = np.random.default_rng(seed)
    xs, xis = random_cosphere(M, sample_size, rng)
    best_T = best_half = -np.inf
    for x, xi in zip(xs, xis):
        J = flow_jacobian(M, x, xi, np.array([T / 2, T]))
        nrm = np.linalg.norm(J, ord=2, axis=(1, 2))
        best_half = max(best_half, np.log(nrm[0]) / (T / 2))
        best_T = max(best_T, np.log(nrm[1]) / T)
    raw = float(best_T)
    value = max(raw, floor)
    return ExpansionEstimate(value, raw, float(abs(best_T - best_half)), raw < floor)


def ehrenfest_time(h: float, lam: float) -> float:
    """T_e(h) = log(1/h) / (2 Lambda)."""
    if not 0 < h < 1:
        raise DomainError("h must lie in (0, 1)")
    if lam <= 0:
        raise DomainError("Lambda must be positive")
    return float(np.log(1 / h) / (2 * lam))
