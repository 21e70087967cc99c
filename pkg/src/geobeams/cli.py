"""Command-line runner: config parsing, subcommands, CSV emission and the acceptance suite.

Exit codes: 0 success, 1 a check failed (the failing criterion is named),
2 invalid configuration or arguments.
"""

from __future__ import annotations

import argparse
import configparser
import json
import os
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .tolerances import DomainError

__all__ = ["ConfigError", "ExperimentConfig", "load_config", "parse_config", "run", "main",
           "parallel_map", "split_seeds", "write_csv", "default_config_path"]

WORKERS_ENV = "GEOBEAMS_WORKERS"
KINDS = ("sphere", "flat_torus", "product", "surface_of_revolution")


class ConfigError(ValueError):
    """Invalid configuration; ``key`` names the offending entry."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


# --- config ---------------------------------------------------------------------------------


@dataclass
class ManifoldBlock:
    kind: str
    dim: int = 2
    periods: tuple | None = None
    profile: tuple | None = None
    factors: tuple = ()


@dataclass
class CoverBlock:
    tau: float = 0.2
    R: float | None = 0.1
    R_exponent: float = 0.3
    delta1: float = 0.2
    delta2: float = 0.4
    R0: float = 1.0


@dataclass
class DynamicsBlock:
    a: float = 1.0
    t0: float = 1.0
    T: float | None = 10.0
    b: float | None = None
    points: int = 5
    directions: int = 64
    x1: tuple = (0.0, 0.0)
    x2: tuple = (0.0, 0.0)
    badfrac: float = 0.1
    T_list: tuple = (4.0, 8.0, 16.0)


@dataclass
class QuantizeBlock:
    lambdas: tuple = (64,)
    grid_factor: int = 4
    quasimode: str = "lattice_cluster"
    mode: tuple = (3, 4)
    width: float = 0.1
    T: float = 1.0


@dataclass
class MicroBlock:
    rho: float = 0.7
    eps: float = 0.02
    eps0: float = 0.45
    delta: float = 0.25
    t_grid: tuple = (0.1, 0.2, 0.4)
    grid: int = 0
    lambdas: tuple = (64, 128)
    points: int = 16
    R: float = 0.25
    samples: int = 20
    C_max: float = 10.0


@dataclass
class SpectralBlock:
    family: str = "zonal"
    ells: tuple = (8, 12, 16, 24, 32, 48, 64)
    p_list: tuple = (4.0, 10.0)
    tol: float = 0.05


@dataclass
class ExperimentConfig:
    manifold: ManifoldBlock
    cover: CoverBlock = field(default_factory=CoverBlock)
    dynamics: DynamicsBlock = field(default_factory=DynamicsBlock)
    quantize: QuantizeBlock = field(default_factory=QuantizeBlock)
    micro: MicroBlock = field(default_factory=MicroBlock)
    spectral: SpectralBlock = field(default_factory=SpectralBlock)
    output: str = "geobeams-out"
    seed: int = 0
    accept: tuple = ()

    def T_for(self, h: float | None = None) -> float:
        d = self.dynamics
        if d.b is not None:
            if h is None:
                raise ConfigError("dynamics.b", "T = b log(1/h) needs a value of h")
            return d.b * np.log(1 / h)
        return d.T


def default_config_path() -> Path:
    return Path(str(resources.files("geobeams") / "data" / "default.ini"))


def _flatten(raw: dict) -> dict:
    out = {}
    for k, v in raw.items():
        if isinstance(v, dict):
            for k2, v2 in v.items():
                out[f"{k}.{k2}"] = v2
        else:
            out[k] = v
    return out


def _read_raw(path) -> dict:
    text = Path(path).read_text()
    if str(path).endswith(".json") or text.lstrip().startswith("{"):
        try:
            return _flatten(json.loads(text))
        except json.JSONDecodeError as e:
            raise ConfigError("<file>", f"invalid JSON: {e}") from e
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError("<file>", f"unparsable config: {e}") from e
    return {f"{s}.{k}": v for s in cp.sections() for k, v in cp.items(s)}


def _num_list(key, v, cast=float) -> tuple:
    if isinstance(v, (list, tuple)):
        items = list(v)
    else:
        items = [s for s in str(v).replace(";", ",").split(",") if s.strip()]
    try:
        return tuple(cast(float(x)) if cast is int else cast(x) for x in items)
    except ValueError as e:
        raise ConfigError(key, f"expected a list of numbers, got {v!r}") from e


def _num(key, v, cast=float):
    if isinstance(v, str) and v.strip().lower() in ("", "none", "auto"):
        return None
    try:
        x = float(v)
    except (TypeError, ValueError) as e:
        raise ConfigError(key, f"expected a number, got {v!r}") from e
    if cast is int:
        if x != int(x):
            raise ConfigError(key, f"expected an integer, got {v!r}")
        return int(x)
    return x


def _require(key, cond: bool, inequality: str, value):
    if not cond:
        raise ConfigError(key, f"need {inequality}, got {value}")


_SCHEMA = {
    "manifold": (ManifoldBlock, {"dim": int, "periods": "list", "profile": "list", "factors": "str_list"}),
    "cover": (CoverBlock, {"tau": float, "R": float, "R_exponent": float, "delta1": float, "delta2": float, "R0": float}),
    "dynamics": (DynamicsBlock, {"a": float, "t0": float, "T": float, "b": float, "points": int, "directions": int,
                                 "x1": "list", "x2": "list", "badfrac": float, "T_list": "list"}),
    "quantize": (QuantizeBlock, {"lambdas": "int_list", "grid_factor": int, "mode": "int_list", "width": float,
                                 "T": float}),
    "micro": (MicroBlock, {"rho": float, "eps": float, "eps0": float, "delta": float, "t_grid": "list", "grid": int,
                           "lambdas": "int_list", "points": int, "R": float, "samples": int, "C_max": float}),
    "spectral": (SpectralBlock, {"ells": "int_list", "p_list": "list", "tol": float}),
}


def parse_config(raw: dict) -> ExperimentConfig:
    """Build and validate an ExperimentConfig from flat ``section.key`` entries."""
    raw = _flatten(raw)
    if "manifold.kind" not in raw or not str(raw["manifold.kind"]).strip():
        raise ConfigError("manifold.kind", "missing required key")
    known = {f"{s}.{f}" for s, (cls, _) in _SCHEMA.items() for f in cls.__dataclass_fields__}
    known |= {"run.seed", "output.dir", "accept.only"}
    for k in raw:
        if k not in known:
            raise ConfigError(k, "unknown key")
    blocks = {}
    for sec, (cls, types) in _SCHEMA.items():
        kw = {}
        for name in cls.__dataclass_fields__:
            key = f"{sec}.{name}"
            if key not in raw:
                continue
            v, t = raw[key], types.get(name, str)
            if t == "list":
                kw[name] = _num_list(key, v)
            elif t == "int_list":
                kw[name] = _num_list(key, v, int)
            elif t == "str_list":
                kw[name] = tuple(s.strip() for s in (v if isinstance(v, list) else str(v).split(",")) if s.strip())
            elif t in (int, float):
                kw[name] = _num(key, v, t)
            else:
                kw[name] = str(v).strip()
        blocks[sec] = cls(**kw)
    seed = _num("run.seed", raw.get("run.seed", 0), int) or 0
    accept = _num_list("accept.only", raw["accept.only"], int) if raw.get("accept.only") else ()
    cfg = ExperimentConfig(output=str(raw.get("output.dir", "geobeams-out")), seed=seed, accept=accept, **blocks)
    _validate(cfg)
    return cfg


def _validate(cfg: ExperimentConfig):
    m = cfg.manifold
    _require("manifold.kind", m.kind in KINDS, "one of " + ", ".join(KINDS), m.kind)
    _require("manifold.dim", m.dim is not None and m.dim >= 1, "dim >= 1", m.dim)
    if m.kind == "flat_torus" and m.periods is not None:
        _require("manifold.periods", len(m.periods) == m.dim, "one period per dimension", m.periods)
        _require("manifold.periods", min(m.periods) > 0, "periods > 0", m.periods)
    if m.kind == "surface_of_revolution":
        _require("manifold.profile", bool(m.profile), "a coefficient list", m.profile)
    if m.kind == "product":
        _require("manifold.factors", len(m.factors) == 2, "two factors such as sphere:2, flat_torus:1", m.factors)
    c = cfg.cover
    _require("cover.R0", c.R0 is not None and c.R0 > 0, "R0 > 0", c.R0)
    if c.R is not None:
        _require("cover.R", 0 < c.R < c.R0, "0 < R < R0", c.R)
    _require("cover.tau", c.tau is not None and c.tau > 0, "tau > 0", c.tau)
    if m.kind in ("sphere", "flat_torus"):
        from .cover import _tau_max

        tm = _tau_max(build_manifold(m))
        _require("cover.tau", c.tau < tm, f"tau < tau_M = {tm:.4g}", c.tau)
    _require("cover.delta1", 0 < c.delta1 < c.delta2 < 0.5, "0 < delta1 < delta2 < 1/2", (c.delta1, c.delta2))
    _require("cover.R_exponent", c.delta1 <= c.R_exponent <= c.delta2, "delta1 <= R_exponent <= delta2", c.R_exponent)
    d = cfg.dynamics
    _require("dynamics.a", d.a > 0, "a > 0", d.a)
    _require("dynamics.t0", d.t0 > 0, "t0 > 0", d.t0)
    if d.b is None:
        _require("dynamics.T", d.T is not None and d.T > d.t0, "T > t0", d.T)
    else:
        _require("dynamics.b", d.b > 0, "b > 0", d.b)
    _require("dynamics.points", d.points >= 1, "points >= 1", d.points)
    _require("dynamics.directions", d.directions >= 1, "directions >= 1", d.directions)
    _require("dynamics.badfrac", 0 <= d.badfrac <= 1, "0 <= badfrac <= 1", d.badfrac)
    _require("dynamics.T_list", len(d.T_list) > 0 and min(d.T_list) > d.t0, "every T > t0", d.T_list)
    q = cfg.quantize
    _require("quantize.lambdas", len(q.lambdas) > 0 and min(q.lambdas) >= 8, "lambda >= 8", q.lambdas)
    _require("quantize.grid_factor", q.grid_factor >= 2, "grid_factor >= 2", q.grid_factor)
    _require("quantize.quasimode", q.quasimode in ("lattice_cluster", "single_mode", "random_shell"),
             "one of lattice_cluster, single_mode, random_shell", q.quasimode)
    _require("quantize.width", 0 < q.width < 1, "0 < width < 1", q.width)
    _require("quantize.T", q.T >= 1, "T >= 1", q.T)
    u = cfg.micro
    _require("micro.rho", 0.5 < u.rho < 1, "1/2 < rho < 1", u.rho)
    _require("micro.eps", 0 < u.eps < u.rho, "0 < eps < rho", u.eps)
    _require("micro.delta", 0 < u.delta < 1, "0 < delta < 1", u.delta)
    _require("micro.eps0", 0 < u.eps0 <= 0.5, "0 < eps0 <= 1/2", u.eps0)
    _require("micro.t_grid", len(u.t_grid) > 0 and max(abs(t) for t in u.t_grid) < u.eps0, "|t| < eps0", u.t_grid)
    for lam in u.lambdas:
        h = 1.0 / lam
        _require("micro.t_grid", min(abs(t) for t in u.t_grid) >= h ** (u.rho - u.eps),
                 f"h^(rho - eps) <= |t| at lambda = {lam}", u.t_grid)
    _require("micro.grid", u.grid >= 0, "grid >= 0 (0 chooses automatically)", u.grid)
    _require("micro.points", u.points >= 1, "points >= 1", u.points)
    _require("micro.R", 0 < u.R < 0.5, "0 < R < 1/2", u.R)
    _require("micro.samples", u.samples >= 1, "samples >= 1", u.samples)
    _require("micro.C_max", u.C_max > 0, "C_max > 0", u.C_max)
    s = cfg.spectral
    _require("spectral.family", s.family in ("zonal", "highest_weight"), "zonal or highest_weight", s.family)
    _require("spectral.ells", len(s.ells) >= 5 and min(s.ells) >= 1, "at least 5 degrees >= 1", s.ells)
    _require("spectral.p_list", len(s.p_list) > 0 and min(s.p_list) >= 2, "p >= 2", s.p_list)


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError("<file>", f"config file not found: {path}")
    return parse_config(_read_raw(p))


def build_manifold(m: ManifoldBlock):
    from .manifold import flat_torus, product, sphere, surface_of_revolution

    def one(kind, dim, periods=None):
        if kind == "sphere":
            return sphere(dim)
        if kind in ("flat_torus", "torus"):
            return flat_torus(dim, periods)
        raise ConfigError("manifold.factors", f"unsupported factor {kind!r}")

    try:
        if m.kind == "product":
            parts = []
            for f in m.factors:
                kind, _, dim = f.partition(":")
                parts.append(one(kind.strip(), int(dim or 1)))
            return product(*parts)
        if m.kind == "surface_of_revolution":
            return surface_of_revolution(m.profile)
        return one(m.kind, m.dim, m.periods)
    except (DomainError, ValueError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError("manifold", str(e)) from e


# --- seeds, workers, output ------------------------------------------------------------------


def split_seeds(seed: int, count: int) -> list:
    """Independent child generators, fixed by (seed, index) regardless of scheduling."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(count)]


def _workers() -> int:
    v = os.environ.get(WORKERS_ENV, "")
    try:
        return max(1, int(v)) if v else 1
    except ValueError:
        return 1


def parallel_map(fn, items) -> list:
    """Ordered map over a process pool of ``GEOBEAMS_WORKERS`` workers (serial when unset)."""
    items = list(items)
    n = _workers()
    if n == 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=n) as ex:
        return list(ex.map(fn, items))


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v)) if np.isfinite(v) else ("inf" if v > 0 else ("-inf" if v < 0 else "nan"))
    if isinstance(v, (np.ndarray, list, tuple)):
        return " ".join(_fmt(x) for x in np.ravel(v))
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    return str(v)


def _atomic_write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_csv(path, columns, rows, notes=()) -> Path:
    """Write '#' header lines (one per column: name, unit, meaning), then the CSV body.

    ``columns`` is a list of (name, unit, meaning).
    """
    path = Path(path)
    lines = ["# geobeams output"]
    lines += [f"# {n} [{u}]: {m}" for n, u, m in columns]
    lines += [f"# {s}" for s in notes]
    lines.append(",".join(n for n, _, _ in columns))
    for r in rows:
        lines.append(",".join(_fmt(v) for v in r))
    _atomic_write(path, "\n".join(lines) + "\n")
    return path


def _plot_data(path, curves: dict) -> Path:
    """Two columns per curve, blank-line separated blocks with a '#' title each."""
    out = []
    for name, (x, y) in curves.items():
        out.append(f"# {name}")
        out += [f"{_fmt(float(a))} {_fmt(float(b))}" for a, b in zip(x, y)]
        out.append("")
    _atomic_write(Path(path), "\n".join(out))
    return Path(path)


# --- subcommands ---------------------------------------------------------------------------


def _out(cfg, args, name) -> Path:
    base = Path(args.output or cfg.output)
    return base / name


def _cover_for(cfg, h=None):
    from .cover import build_good_cover
    from .quantize import cover_radius

    M = build_manifold(cfg.manifold)
    c = cfg.cover
    R = c.R
    if R is None:
        if h is None:
            raise ConfigError("cover.R", "R(h) rule needs a value of h; set cover.R")
        R = cover_radius(h, c.R_exponent, c.delta1, c.delta2)
    return build_good_cover(M, c.tau, R, R0=c.R0)


def cmd_cover(cfg, args) -> int:
    from .cover import GoodCover, check_cover_property, check_disjointness, volume_ratio_bound

    path = Path(args.cover) if args.cover else _out(cfg, args, "cover.json")
    if args.action == "build":
        cover = _cover_for(cfg)
        _atomic_write(path, cover.to_json())
        print(f"cover: {cover.n_tubes} tubes, D = {cover.D}, written to {path}")
        return 0
    if not path.is_file():
        raise ConfigError("--cover", f"cover file not found: {path}")
    cover = GoodCover.from_json(path.read_text())
    cp = check_cover_property(cover, args.samples, seed=cfg.seed)
    dj = check_disjointness(cover)
    bound = volume_ratio_bound(cover.manifold.dim + 1)
    rows = [("cover_property", cp.fraction, cp.passed), ("class_disjointness", dj.fraction, dj.passed),
            ("class_count", cover.D / bound, cover.D <= bound)]
    write_csv(_out(cfg, args, "cover_check.csv"),
              [("check", "-", "invariant checked"),
               ("value", "1", "fraction of samples covered / pairs disjoint, or D over the volume-ratio bound"),
               ("passed", "bool", "whether the invariant holds")], rows)
    failed = [r[0] for r in rows if not r[2]]
    for r in rows:
        print(f"{r[0]}: {'pass' if r[2] else 'FAIL'} ({r[1]:.6g})")
    return 1 if failed else 0


_PAIR_COLUMNS = [
    ("x1", "internal coords", "observation point"),
    ("x2", "internal coords", "geodesic start point / conjugate point"),
    ("t", "time", "flow time"),
    ("r_t", "length", "radius a^-1 e^(-a t)"),
    ("distance", "length", "base distance from x1 to the maximally conjugate set"),
    ("margin", "length", "distance - r_t; positive means the hypothesis holds"),
    ("multiplicity_max", "count", "largest conjugate multiplicity in the time window"),
]


def _sample_points(cfg, M):
    from .manifold import random_cosphere

    rng = split_seeds(cfg.seed, 1)[0]
    return random_cosphere(M, cfg.dynamics.points, rng)


def cmd_conjugate(cfg, args) -> int:
    from .flow import conjugate_points, flow_points, r_schedule
    from .manifold import base_distance

    M = build_manifold(cfg.manifold)
    X, XI = _sample_points(cfg, M)
    T = cfg.T_for()
    rows = []
    for x, xi in zip(X, XI):
        for e in conjugate_points(M, x, xi, T):
            y = flow_points(M, x, xi, np.array([e.t]))[0][0]
            rt = float(r_schedule(e.t, cfg.dynamics.a))
            d = float(np.ravel(base_distance(M, y[None, :], x[None, :]))[0])
            rows.append((x, y, e.t, rt, d, d - rt, e.multiplicity))
    write_csv(_out(cfg, args, "conjugate.csv"), _PAIR_COLUMNS, rows,
              [f"manifold {M.label()}; T = {T}; conjugate events along sampled geodesics"])
    print(f"{len(rows)} conjugate events over {len(X)} geodesics")
    return 0


def cmd_hypothesis(cfg, args) -> int:
    from .flow import check_noconj_hypothesis

    M = build_manifold(cfg.manifold)
    X, _ = _sample_points(cfg, M)
    d = cfg.dynamics
    rep = check_noconj_hypothesis(M, X, d.a, d.t0, cfg.T_for(), n_directions=d.directions)
    rows = [(X[i1], X[i2], t, rt, dist, mg, tk) for i1, i2, t, rt, dist, mg, tk in rep.rows]
    write_csv(_out(cfg, args, "hypothesis.csv"), _PAIR_COLUMNS, rows,
              [f"manifold {M.label()}; holds = {rep.holds}; margin = {_fmt(rep.margin)}; inconclusive = {rep.inconclusive}"])
    print(f"hypothesis holds: {rep.holds}, margin {rep.margin:.6g}")
    return 0


def cmd_nonlooping(cfg, args) -> int:
    from .cover import GoodCover
    from .looping import classify_tubes

    cover = GoodCover.from_json(Path(args.cover).read_text()) if args.cover else _cover_for(cfg)
    d = cfg.dynamics
    x1, x2 = np.asarray(d.x1, float), np.asarray(d.x2, float)
    if len(x1) != cover.manifold.rep_dim or len(x2) != cover.manifold.rep_dim:
        raise ConfigError("dynamics.x1", f"need {cover.manifold.rep_dim} coordinates")
    T = cfg.T_for()
    rep = classify_tubes(cover, x1, x2, d.t0, T)
    bad = set(int(j) for j in rep.bad)
    rows = [(x1, x2, int(j), int(cover.labels[j]), "bad" if int(j) in bad else "good", rep.first_hit[int(j)])
            for j in rep.J]
    write_csv(_out(cfg, args, "nonlooping.csv"),
              [("x1", "internal coords", "ball center of the tube set"),
               ("x2", "internal coords", "target ball center"),
               ("tube_id", "index", "global tube index"),
               ("class", "index", "partition class of the tube"),
               ("status", "-", "bad when the flow-out reaches the 2R-ball about x2 in [t0, T]"),
               ("first_hit_t", "time", "first hitting time, inf when never")], rows,
              [f"t0 = {d.t0}; T = {T}; |J| = {len(rep.J)}; |bad| = {len(rep.bad)}"])
    print(f"|J| = {len(rep.J)}, bad = {len(rep.bad)}, good = {len(rep.good)}")
    return 0


def cmd_predict(cfg, args) -> int:
    from .looping import critical_p, predicted_improvement

    n = build_manifold(cfg.manifold).dim
    pc = critical_p(n) if n > 1 else np.inf
    for p in cfg.spectral.p_list:
        _require("spectral.p_list", p > pc, f"p > p_c = {pc:g}", p)
    d = cfg.dynamics
    rows = [(p, T, d.badfrac, predicted_improvement(p, n, d.t0, T, d.badfrac)) for p in cfg.spectral.p_list
            for T in d.T_list]
    write_csv(_out(cfg, args, "predict.csv"),
              [("p", "1", "Lebesgue exponent"), ("T", "time", "non-looping horizon"),
               ("badfrac", "1", "fraction of looping tubes"),
               ("factor", "1", "predicted improvement factor sqrt(t0/T) + badfrac^((1 - p_c/p)/6)")], rows)
    for r in rows:
        print(f"p = {r[0]:g}  T = {r[1]:g}  factor = {r[3]:.6g}")
    return 0


def _quasimode(cfg, lam, N, seed):
    from .quantize import lattice_cluster_quasimode, random_shell_function, single_mode

    q = cfg.quantize
    if q.quasimode == "lattice_cluster":
        return lattice_cluster_quasimode(lam, seed).to_grid(N)
    if q.quasimode == "single_mode":
        return single_mode(q.mode, 1.0 / lam).to_grid(N)
    return random_shell_function(lam, N, seed=seed, width=q.width)


def cmd_beams(cfg, args) -> int:
    from .cover import GoodCover
    from .looping import tube_hits
    from .quantize import (K_OVERFLOW, P_apply, ball_centers, ball_filter, beam_decompose, mass_filter,
                           quantize_cover)

    q = cfg.quantize
    lam = q.lambdas[0]
    h = 1.0 / lam
    cover = GoodCover.from_json(Path(args.cover).read_text()) if args.cover else quantize_cover(
        h, cfg.cover.tau, exponent=cfg.cover.R_exponent)
    seed = int(np.random.SeedSequence(cfg.seed).generate_state(1)[0])
    u = _quasimode(cfg, lam, q.grid_factor * lam, seed)
    beams = beam_decompose(u, cover, h)
    cut = beams.cutoffs
    prof = mass_filter(u, cut, q.T)
    centers = ball_centers(cover.R)
    X = cut.geometry[0]
    rows = []
    for k in sorted(prof.buckets):
        if k >= K_OVERFLOW:
            continue
        idx = prof.buckets[k]
        classes = ball_filter(beams.sum(idx), centers, cover.R, h, prof.norm_PT, k)
        m_of = np.zeros(len(centers), dtype=int)
        for m, balls in classes.items():
            m_of[balls] = m
        d = X[idx][:, None, :] - centers[None, :, :]
        d -= np.round(d)
        home = np.argmin(np.sum(d * d, axis=2), axis=1)
        for j, b in zip(idx, home):
            hits = tube_hits(cover, np.array([j]), centers[b], cfg.dynamics.t0, q.T + cfg.dynamics.t0)
            status = "bad" if hits.first_hit[0] <= q.T + cfg.dynamics.t0 else "good"
            bj = beams.beam(int(j))
            rows.append((int(j), int(k), int(b), int(m_of[b]), status, bj.norm(), P_apply(bj).norm()))
    write_csv(_out(cfg, args, "beams.csv"),
              [("tube_id", "index", "global tube index"),
               ("k", "index", "dyadic mass bucket A_k of the tube"),
               ("ball_id", "index", "R-ball containing the tube center"),
               ("m", "index", "dyadic sup class of that ball for bucket k"),
               ("status", "-", "good/bad: whether the tube returns to its ball during [t0, t0 + T]"),
               ("beam_l2", "RMS", "L2 norm of the beam"),
               ("beam_P", "RMS", "L2 norm of P applied to the beam")], rows,
              [f"lambda = {lam}; quasimode = {q.quasimode}; seed = {cfg.seed}; tubes = {cover.n_tubes}"])
    print(f"{len(rows)} beams carrying mass out of {cover.n_tubes} tubes")
    return 0


def _unc_task(args):
    from .microlocal2 import uncertainty_norm

    lam, ts, rho, eps, eps0, delta, N = args
    r = uncertainty_norm(ts, 1.0 / lam, rho, eps_q=eps, eps0=eps0, delta=delta, N=N or None)
    return r.t_grid, r.norms, r.slope


def cmd_uncertainty(cfg, args) -> int:
    from .microlocal2 import loglog_slope

    u = cfg.micro
    lams = list(u.lambdas)
    tasks = [(lam, list(u.t_grid), u.rho, u.eps, u.eps0, u.delta, u.grid) for lam in lams]
    res = parallel_map(_unc_task, tasks)
    rows, curves = [], {}
    for lam, (tg, norms, st) in zip(lams, res):
        curves[f"lambda={lam} log t vs log norm"] = (np.log(tg), np.log(norms))
        for t, v in zip(tg, norms):
            rows.append([1.0 / lam, u.rho, t, v, st, np.nan])
    if len(lams) >= 2:
        for i, t in enumerate(res[0][0]):
            sh = loglog_slope([1.0 / lam for lam in lams], [r[1][i] for r in res])[0]
            for r in rows:
                if r[2] == t:
                    r[5] = sh
    cols = [("h", "1", "semiclassical parameter 1/lambda"), ("rho", "1", "localization exponent"),
            ("t", "time", "shift along the geodesic (snapped to the grid)"),
            ("norm", "1", "operator norm of X(0) X(t) on the shell"),
            ("fitted_slope_t", "1", "log-log slope of norm against t at this h"),
            ("fitted_slope_h", "1", "log-log slope of norm against h at this t")]
    write_csv(_out(cfg, args, "uncertainty.csv"), cols, rows)
    _plot_data(_out(cfg, args, "uncertainty.dat"), curves)
    for r in rows:
        print(f"h = {r[0]:.6g}  t = {r[2]:.6g}  norm = {r[3]:.6g}")
    return 0


def cmd_orthogonality(cfg, args) -> int:
    from .microlocal2 import almost_orthogonality, build_coiso_cutoff, separated_points
    from .quantize import random_shell_function

    u = cfg.micro
    rows = []
    failed = False
    for lam in u.lambdas:
        h = 1.0 / lam
        N = u.grid or build_coiso_cutoff(np.zeros(2), None, u.rho, u.delta, h, "X_y").N
        pts = separated_points(u.R, u.points, N)
        seeds = np.random.SeedSequence(cfg.seed).generate_state(u.samples)
        samples = [random_shell_function(lam, N, seed=int(s)) for s in seeds]
        r = almost_orthogonality(pts, u.rho, h, samples, u.R, u.C_max, delta=u.delta, N=N)
        failed |= not r.passed
        for i, (ratio, total) in enumerate(zip(r.ratios, r.sums)):
            rows.append((h, u.rho, i, total, ratio, r.bracket, u.C_max, ratio <= u.C_max))
    write_csv(_out(cfg, args, "orthogonality.csv"),
              [("h", "1", "semiclassical parameter 1/lambda"), ("rho", "1", "localization exponent"),
               ("sample", "index", "random shell function"),
               ("sum", "1", "sum over points of ||X_j u||^2 / ||u||^2"),
               ("ratio", "1", "sum divided by the orthogonality bracket"),
               ("bracket", "1", "bracket 1 + (h^(2 rho - 1)/R)^((n-1)/2) |J| with its nested factor"),
               ("C_max", "1", "accepted ratio"), ("passed", "bool", "ratio <= C_max")], rows,
              [f"points = {u.points}; R = {u.R}; samples = {u.samples}"])
    print(f"max ratio {max(r[4] for r in rows):.6g} (C_max {u.C_max})")
    return 1 if failed else 0


def _lp_task(args):
    from .spectral import exponent_fit

    family, p, ells = args
    return exponent_fit(family, p, ells)


def cmd_lp_scan(cfg, args) -> int:
    from .spectral import delta_exponent

    s = cfg.spectral
    tasks = [(s.family, p, list(s.ells)) for p in s.p_list]
    fits = parallel_map(_lp_task, tasks)
    rows, curves = [], {}
    failed = []
    for p, fit in zip(s.p_list, fits):
        if s.family == "zonal":
            target = delta_exponent(p, 2) if p >= 6 else max(0.5 - 2 / p, 0.0)
        else:
            target = 0.25 - 0.5 / p
        ok = abs(fit.slope - target) <= s.tol
        if not ok:
            failed.append(p)
        curves[f"{s.family} p={p} log lambda vs log norm"] = (np.log(fit.lams), np.log(fit.norms))
        for ell, lam, nrm in zip(s.ells, fit.lams, fit.norms):
            rows.append((s.family, ell, lam, p, nrm, fit.slope, target, "pass" if ok else "fail"))
    write_csv(_out(cfg, args, "lp_scan.csv"),
              [("family", "-", "eigenfunction family on S^2"), ("ell", "index", "spherical degree"),
               ("lambda", "1/length", "sqrt(ell (ell + 1))"), ("p", "1", "Lebesgue exponent"),
               ("norm", "1", "L^p norm of the L^2-normalized eigenfunction"),
               ("fitted_slope", "1", "log-log slope of norm against lambda"),
               ("target_delta", "1", "expected growth exponent for this family"),
               ("status", "-", "pass/fail within the configured tolerance")], rows)
    _plot_data(_out(cfg, args, "lp_scan.dat"), curves)
    for p, fit in zip(s.p_list, fits):
        print(f"{s.family} p = {p:g}: slope {fit.slope:.4f}")
    return 1 if failed else 0


def cmd_accept(cfg, args) -> int:
    from .acceptance import format_line, run_criterion

    only = args.only or list(cfg.accept) or list(range(1, 13))
    results = []
    for n in only:
        r = run_criterion(int(n))
        results.append(r)
        print(format_line(r), flush=True)
    write_csv(_out(cfg, args, "acceptance.csv"),
              [("criterion", "index", "acceptance criterion number"), ("name", "-", "what is checked"),
               ("passed", "bool", "outcome"), ("detail", "-", "measured values")],
              [(r.number, r.name, r.passed, r.detail.replace(",", ";")) for r in results])
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} criteria passed")
    if failed:
        print("failed: " + ", ".join(f"criterion {r.number} ({r.name})" for r in failed), file=sys.stderr)
        return 1
    return 0


COMMANDS = {
    "cover": cmd_cover,
    "conjugate": cmd_conjugate,
    "hypothesis": cmd_hypothesis,
    "nonlooping": cmd_nonlooping,
    "predict": cmd_predict,
    "beams": cmd_beams,
    "uncertainty": cmd_uncertainty,
    "orthogonality": cmd_orthogonality,
    "lp-scan": cmd_lp_scan,
    "accept": cmd_accept,
}


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="geobeams", description="Geodesic-beam experiments on model manifolds.")
    ap.add_argument("--config", "-c", help="config file (INI or JSON); defaults to the shipped config")
    ap.add_argument("--output", "-o", help="output directory (overrides output.dir)")
    sub = ap.add_subparsers(dest="command", required=True)
    pc = sub.add_parser("cover", help="build or check a good cover")
    pc.add_argument("action", choices=["build", "check"])
    pc.add_argument("--cover", help="cover JSON path")
    pc.add_argument("--samples", type=int, default=10_000)
    for name in ("conjugate", "hypothesis", "predict", "uncertainty", "orthogonality", "lp-scan"):
        sub.add_parser(name)
    for name in ("nonlooping", "beams"):
        sub.add_parser(name).add_argument("--cover", help="cover JSON path")
    pa = sub.add_parser("accept", help="run the acceptance suite")
    pa.add_argument("--only", type=int, nargs="*", help="criterion numbers to run")
    return ap


def run(command: str, config_path=None, argv_rest=()) -> int:
    return main([*(["--config", str(config_path)] if config_path else []), command, *argv_rest])


def main(argv=None) -> int:
    ap = _parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0) and 2
    try:
        cfg = load_config(args.config or default_config_path())
        return COMMANDS[args.command](cfg, args)
    except ConfigError as e:
        print(f"invalid config: {e}", file=sys.stderr)
        return 2
    except DomainError as e:
        print(f"invalid input: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
