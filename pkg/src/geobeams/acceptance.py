"""The twelve acceptance checks, shared by the test suite and the ``accept`` subcommand.

Each check returns a CriterionResult; results are memoized per parameter
set so that the CLI and the tests can share one computation in a process.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.stats import kendalltau

from .tolerances import DomainError

__all__ = ["CriterionResult", "CRITERIA", "run_criterion", "run_all", "format_line", "DEFAULTS"]


@dataclass
class CriterionResult:
    number: int
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0
    data: dict = field(default_factory=dict)


# parameters of every check; the shipped config mirrors these values
DEFAULTS = {
    1: {"dims": (2, 3, 4, 5, 6)},
    2: {"p": 10.0, "ells": (8, 12, 16, 24, 32, 48, 64), "target": 0.3, "tol": 0.05},
    3: {"p": 4.0, "ells": (8, 12, 16, 24, 32, 48, 64), "target": 0.125, "tol": 0.05},
    4: {"kmax": 3, "tol": 1e-6, "torus_T": 20.0},
    5: {"a": 1.0, "t0": 1.0, "T": 10.0, "points": 5, "seed": 0, "n_directions": 64},
    6: {"tau": 0.2, "radii": (0.1, 0.05), "samples": 10_000},
    7: {"lams": (64, 128, 256), "seeds": 50, "T": 1.0},
    8: {"lams": (64, 128), "Ts": (4.0, 8.0, 16.0), "t0": 1.0, "bound": 8.0, "x0": (0.3, 0.2)},
    9: {"rho": 0.6, "hexp": (6, 7, 8, 9, 10), "min_slope": 0.3},
    10: {"rho": 0.7, "lam_t": 256, "t_range": (0.044, 0.44), "t_count": 5, "t_fixed": 0.2474,
         "lams_h": (128, 192, 256), "slope_t": -0.5, "tol_t": 0.15, "slope_h": 0.2, "tol_h": 0.1,
         "oracle_lam": 48, "oracle_N": 128, "oracle_t": 0.25},
    11: {"rho": 0.7, "lam": 128, "points": 16, "R": 0.25, "samples": 20, "C_max": 10.0},
    12: {"m_max": 10_000, "max_slope": 0.2},
}

NAMES = {
    1: "growth exponent formula",
    2: "zonal saturation p > p_c",
    3: "highest-weight saturation p < p_c",
    4: "conjugate points on spheres and tori",
    5: "no-conjugacy hypothesis on S^2 x T^1",
    6: "good-cover invariants",
    7: "dyadic bucket bound",
    8: "non-self-looping mass decay",
    9: "composition residual slope",
    10: "uncertainty slopes and oracle",
    11: "almost orthogonality",
    12: "lattice-cluster sup-norm exponent",
}


def _params(n: int, overrides) -> dict:
    p = dict(DEFAULTS[n])
    if overrides:
        p.update(dict(overrides))
    return p


def _freeze(d):
    return tuple(sorted((k, tuple(v) if isinstance(v, list) else v) for k, v in d.items()))


# --- individual checks -------------------------------------------------------------------------


def _c1(p):
    from fractions import Fraction

    from .spectral import critical_exponent, delta_exponent

    worst, branch_gap = 0.0, 0.0
    for n in p["dims"]:
        pc = critical_exponent(n)
        pcf = Fraction(2 * (n + 1), n - 1)
        for q in [pc, 8.0, 12.0, np.inf]:
            if np.isinf(q):
                exact = Fraction(n - 1, 2)
            else:
                qf = pcf if q == pc else Fraction(int(q))
                exact = Fraction(n - 1, 2) - n / qf if qf >= pcf else Fraction(n - 1, 4) - Fraction(n - 1, 2) / qf
            worst = max(worst, abs(delta_exponent(q, n) - float(exact)))
        upper = (n - 1) / 2 - n / pc
        lower = (n - 1) / 4 - (n - 1) / (2 * pc)
        branch_gap = max(branch_gap, abs(upper - lower))
    ok = worst < 1e-12 and branch_gap < 1e-14
    return ok, f"max error {worst:.2e}, branch gap at p_c {branch_gap:.2e}", {"error": worst, "gap": branch_gap}


def _fit_check(p, family):
    from .spectral import exponent_fit

    fit = exponent_fit(family, p["p"], list(p["ells"]))
    ok = abs(fit.slope - p["target"]) <= p["tol"]
    return ok, f"slope {fit.slope:.4f} (target {p['target']} +- {p['tol']})", {"slope": fit.slope}


def _c2(p):
    return _fit_check(p, "zonal")


def _c3(p):
    return _fit_check(p, "highest_weight")


def _c4(p):
    from .flow import conjugate_points
    from .manifold import flat_torus, sphere

    worst, mult_ok = 0.0, True
    for n in (2, 3):
        x = np.zeros(n + 1)
        x[-1] = 1.0
        xi = np.zeros(n + 1)
        xi[0] = 1.0
        ev = conjugate_points(sphere(n), x, xi, (p["kmax"] + 0.5) * np.pi)
        if len(ev) != p["kmax"]:
            return False, f"sphere({n}): {len(ev)} events for k <= {p['kmax']}", {}
        for k, e in enumerate(ev, start=1):
            worst = max(worst, abs(e.t - k * np.pi))
            mult_ok &= e.multiplicity == n - 1
    T = flat_torus(2, (1.0, 1.0))
    tor = conjugate_points(T, np.zeros(2), np.array([0.6, 0.8]), p["torus_T"])
    ok = worst < p["tol"] and mult_ok and len(tor) == 0
    return ok, f"max |t - k pi| {worst:.2e}, multiplicities n-1: {mult_ok}, torus events {len(tor)}", {"error": worst}


def _c5(p):
    from .flow import check_noconj_hypothesis
    from .manifold import flat_torus, product, random_cosphere, sphere

    P = product(sphere(2), flat_torus(1, (1.0,)))
    rng = np.random.default_rng(p["seed"])
    U = random_cosphere(P, p["points"], rng)[0]
    m = p["points"]
    pairs = [(i, j) for i in range(m) for j in range(m) if i != j]
    rep = check_noconj_hypothesis(P, U, p["a"], p["t0"], p["T"], n_directions=p["n_directions"], pairs=pairs)
    S2 = sphere(2)
    V = random_cosphere(S2, 2, rng)[0]
    V = np.vstack([V, -V])
    rs = check_noconj_hypothesis(S2, V, p["a"], p["t0"], 4.0, n_directions=p["n_directions"])
    fails_at_pi = (not rs.holds) and rs.margin < 0 and rs.worst is not None and abs(rs.worst[2] - np.pi) < 0.5
    ok = rep.holds and rep.margin > 0 and fails_at_pi
    return ok, (f"product: {len(pairs)} pairs, margin {rep.margin:.3g}; S^2: margin {rs.margin:.3g} "
                f"at t = {rs.worst[2] if rs.worst else float('nan'):.4f}"), {"margin": rep.margin, "sphere_margin": rs.margin}


def _c6(p):
    from .cover import build_good_cover, check_cover_property, check_disjointness, volume_ratio_bound
    from .manifold import flat_torus, sphere

    rows, ok = [], True
    for M in (flat_torus(2, (1.0, 1.0)), sphere(2)):
        for R in p["radii"]:
            c = build_good_cover(M, p["tau"], R)
            cp = check_cover_property(c, p["samples"])
            dj = check_disjointness(c)
            bound = volume_ratio_bound(3)
            good = cp.passed and dj.passed and c.D <= bound
            ok &= good
            rows.append(f"{M.kind} R={R}: tubes {c.n_tubes}, D {c.D} <= {bound:.0f}, cover {cp.fraction:.4f}, disjoint {dj.passed}")
    return ok, "; ".join(rows), {}


def _c7(p):
    from .quantize import ShellMassKernel, TubeCutoffs, lattice_cluster_quasimode, mass_filter, overlap_norm, quantize_cover

    worst, sharp, rows = 0.0, 0.0, []
    ok = True
    for lam in p["lams"]:
        h = 1.0 / lam
        c = quantize_cover(h)
        cut = TubeCutoffs(c, h)
        ker = None
        for s in range(p["seeds"]):
            u = lattice_cluster_quasimode(lam, s)
            if ker is None:
                ker = ShellMassKernel(cut, u.ks)
            prof = mass_filter(u, cut, p["T"], ker)
            for k, idx in prof.buckets.items():
                if k >= 10**5:
                    continue
                r = len(idx) / (4 * c.D * 4.0**k)
                worst = max(worst, r)
                ok &= r <= 1
        rows.append(f"lam {lam}: tubes {c.n_tubes}, D {c.D}")
    return ok, f"max |A_k| / (4 D 2^(2k)) = {worst:.3g}; " + "; ".join(rows), {"ratio": worst}


def _c8(p):
    from .cover import tubes_over_ball
    from .looping import tube_hits
    from .quantize import K_OVERFLOW, TubeCutoffs, ball_centers, beam_quasimode, mass_filter, quantize_cover

    angle = np.pi * (np.sqrt(5) - 1) / 4
    Ts = list(p["Ts"])
    best = {T: 0.0 for T in Ts}
    counts = {T: 0 for T in Ts}
    for lam in p["lams"]:
        h = 1.0 / lam
        c = quantize_cover(h)
        cut = TubeCutoffs(c, h)
        u = beam_quasimode(lam, angle, x0=p["x0"])
        profs = {T: mass_filter(u, cut, T) for T in Ts}
        carrying = np.nonzero(np.min([profs[T].k_of for T in Ts], axis=0) < K_OVERFLOW)[0]
        for x in ball_centers(c.R):
            J = np.intersect1d(tubes_over_ball(c, x, c.R), carrying)
            if J.size == 0:
                continue
            hits = tube_hits(c, J, x, p["t0"], max(Ts))
            for T in Ts:
                good = J[hits.first_hit > T]
                counts[T] += len(good)
                ks = profs[T].k_of[good]
                for k in np.unique(ks[ks < K_OVERFLOW]):
                    r = np.sum(ks == k) * T / (p["t0"] * 4.0**k)
                    best[T] = max(best[T], float(r))
    vals = [best[T] for T in Ts]
    bounded = max(vals) <= p["bound"]
    if np.ptp(vals) == 0:
        tau_k, trend = float("nan"), "constant (no trend)"
        no_growth = True
    else:
        tau_k = float(kendalltau(Ts, vals).statistic)
        no_growth = tau_k <= 0
        trend = f"Kendall tau {tau_k:.3f}"
    detail = f"max ratio per T {dict(zip(Ts, vals))}, good tubes per T {counts}, {trend}"
    return bounded and no_growth, detail, {"ratios": vals, "good": counts, "kendall": tau_k}


def _c9(p):
    from .microlocal2 import bump_symbol_pair, composition_residual

    a, b = bump_symbol_pair(p["rho"])
    hs = [2.0**-k for k in p["hexp"]]
    r = composition_residual(a, b, hs, rho=p["rho"])
    ok = r.slope >= p["min_slope"]
    return ok, f"slope {r.slope:.4f} (need >= {p['min_slope']}), norms {np.round(r.values, 5).tolist()}", {"slope": r.slope}


def _c10(p):
    from .microlocal2 import build_coiso_cutoff, loglog_slope, uncertainty_dense_norm, uncertainty_norm

    rho = p["rho"]
    ts = list(np.geomspace(p["t_range"][0], p["t_range"][1], p["t_count"]))
    # reuse a decade point when t_fixed is one (up to rounding)
    near = [t for t in ts if abs(t - p["t_fixed"]) <= 1e-3 * p["t_fixed"]]
    if near:
        t_fixed = near[0]
    else:
        t_fixed = p["t_fixed"]
        ts.append(t_fixed)
    # one cutoff at the finest h serves both the t-decade and the last point of the h sweep
    X = build_coiso_cutoff(np.zeros(2), None, rho, None, 1.0 / p["lam_t"], "X_y")
    rt = uncertainty_norm(ts, X.h, rho, cutoff=X)
    del X
    in_decade = np.array([p["t_range"][0] - 1e-12 <= t <= p["t_range"][1] + 1e-12 for t in ts])
    slope_t = loglog_slope(rt.t_grid[in_decade], rt.norms[in_decade])[0]
    at_fixed = {p["lam_t"]: float(rt.norms[ts.index(t_fixed)])}
    for lam in p["lams_h"]:
        if lam not in at_fixed:
            at_fixed[lam] = float(uncertainty_norm([t_fixed], 1.0 / lam, rho).norms[0])
    lams = list(p["lams_h"])
    hv = [at_fixed[lam] for lam in lams]
    slope_h = loglog_slope([1.0 / lam for lam in lams], hv)[0]
    pw = uncertainty_norm([p["oracle_t"]], 1.0 / p["oracle_lam"], rho, N=p["oracle_N"], rtol=1e-9)
    dn = uncertainty_dense_norm(p["oracle_t"], 1.0 / p["oracle_lam"], rho, N=p["oracle_N"])
    rel = abs(pw.norms[0] - dn) / dn
    ok_t = abs(slope_t - p["slope_t"]) <= p["tol_t"]
    ok_h = abs(slope_h - p["slope_h"]) <= p["tol_h"]
    ok_o = rel < 1e-6
    detail = (f"t-slope {slope_t:.4f} (target {p['slope_t']} +- {p['tol_t']}) "
              f"norms {np.round(rt.norms[in_decade], 4).tolist()}; "
              f"h-slope {slope_h:.4f} (target {p['slope_h']} +- {p['tol_h']}) norms {np.round(hv, 4).tolist()}; "
              f"oracle rel. error {rel:.2e}")
    return ok_t and ok_h and ok_o, detail, {"slope_t": slope_t, "slope_h": slope_h, "oracle": rel,
                                            "t": rt.t_grid[in_decade].tolist(), "norms_t": rt.norms[in_decade].tolist(),
                                            "norms_h": hv}


def _c11(p):
    from .microlocal2 import almost_orthogonality, build_coiso_cutoff, separated_points
    from .quantize import random_shell_function

    h = 1.0 / p["lam"]
    N = build_coiso_cutoff(np.zeros(2), None, p["rho"], None, h, "X_y").N
    pts = separated_points(p["R"], p["points"], N)
    us = [random_shell_function(p["lam"], N, seed=s) for s in range(p["samples"])]
    r = almost_orthogonality(pts, p["rho"], h, us, p["R"], p["C_max"], N=N)
    return r.passed, f"max ratio {r.ratio:.4g} <= {p['C_max']} (bracket {r.bracket:.4g}, max sum {r.sums.max():.4g})", {"ratio": r.ratio}


def _c12(p):
    from .spectral import cluster_linf_growth

    g = cluster_linf_growth(p["m_max"])
    ok = g.slope <= p["max_slope"] and g.slope < 0.5
    return ok, f"fitted exponent {g.slope:.4f} (need <= {p['max_slope']}; unimproved 0.5)", {"slope": g.slope}


CRITERIA = {1: _c1, 2: _c2, 3: _c3, 4: _c4, 5: _c5, 6: _c6, 7: _c7, 8: _c8, 9: _c9, 10: _c10, 11: _c11, 12: _c12}


@lru_cache(maxsize=None)
def _cached(n: int, frozen) -> CriterionResult:
    p = dict(frozen)
    t = time.perf_counter()
    try:
        ok, detail, data = CRITERIA[n](p)
    except DomainError as e:
        ok, detail, data = False, f"domain error: {e}", {}
    return CriterionResult(n, NAMES[n], bool(ok), detail, time.perf_counter() - t, data)


def run_criterion(n: int, overrides=None) -> CriterionResult:
    if n not in CRITERIA:
        raise DomainError(f"unknown criterion {n}")
    return _cached(n, _freeze(_params(n, overrides)))


def run_all(numbers=None, overrides=None) -> list:
    overrides = overrides or {}
    return [run_criterion(n, overrides.get(n)) for n in (numbers or sorted(CRITERIA))]


def format_line(r: CriterionResult) -> str:
    return f"criterion {r.number:2d} [{'PASS' if r.passed else 'FAIL'}] {r.name}: {r.detail} ({r.seconds:.1f} s)"
