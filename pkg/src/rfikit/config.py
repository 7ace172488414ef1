"""Experiment configuration: TOML grammar, validation and object building.

A config is a TOML document.  Top-level keys::

    name, seed, dimension, particles, iterations        (required)
    thinning = 1, threads = 1, snapshot_every, keep
    output_dir, output_formats = ["csv", "json"]
    time_budget_seconds, description

Tables: ``[problem]`` (with ``kind``), ``[initial]`` (with ``kind``) and
one ``[diagnostics.<name>]`` table per requested diagnostic.  Errors are
reported as :class:`ConfigError` with the offending line when it can be
located in the source text.
"""

from __future__ import annotations

import hashlib
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

import numpy as np

from .engine import FiniteFamily, GaussianLaw, PointMass, UniformBox
from .measures import EmpiricalMeasure
from .operators import (Ball, GradStep, Halfspace, Hyperplane, LinearMap, ProxIndicator,
                        ProxL1)
from .problems import (AffineFeasibilityProblem, BallNoise, ConstantNoise, GaussianNoise,
                       NoisyHyperplaneFamily, NoisySgdProblem, NoNoise, UniformNoise,
                       stochastic_douglas_rachford, stochastic_forward_backward)

PROBLEM_KINDS = ("linear", "noisy_hyperplane", "affine_feasibility", "sgd",
                 "douglas_rachford", "forward_backward")
INITIAL_KINDS = ("point", "gaussian", "uniform_box", "row_space")
DIAGNOSTICS = ("cesaro", "rate_fit", "bounded_expectation", "second_moment",
               "residual_histogram", "asymptotic_regularity", "noise_constants",
               "sampling_error")
OUTPUT_FORMATS = ("csv", "json")


class ConfigError(ValueError):
    """Invalid configuration; ``line`` is 1-based when known."""

    def __init__(self, message: str, field: str | None = None, line: int | None = None,
                 source: str = "<config>"):
        self.field, self.line, self.source = field, line, source
        where = f"{source}:{line}" if line else source
        what = f" [{field}]" if field else ""
        super().__init__(f"{where}:{what} {message}")


@dataclass
class ExperimentConfig:
    name: str
    seed: int
    dimension: int
    particles: int
    iterations: int
    problem: dict
    initial: dict
    thinning: int = 1
    threads: int = 1
    snapshot_every: int | None = None
    keep: int | None = None
    diagnostics: dict = field(default_factory=dict)
    output_dir: str | None = None
    output_formats: tuple = OUTPUT_FORMATS
    time_budget_seconds: float | None = None
    description: str = ""
    text: str = field(default="", repr=False)
    source: str = "<config>"

    @property
    def sha256(self) -> str:
        return hashlib.sha256(self.text.encode()).hexdigest()


# --------------------------------------------------------------- locating

_HEADER = re.compile(r"^\s*\[+\s*([^\]]+?)\s*\]+")
_KEY = re.compile(r"^\s*([A-Za-z0-9_\-\"']+)\s*=")


def locate(text: str, dotted: str) -> int | None:
    """Line of ``a.b.key`` in ``text``, else the line of its table, else None."""
    parts = dotted.split(".")
    table, key = ".".join(parts[:-1]), parts[-1]
    current, table_line = "", None
    for no, line in enumerate(text.splitlines(), 1):
        h = _HEADER.match(line)
        if h:
            current = h.group(1).replace(" ", "")
            if current == table:
                table_line = no
            continue
        m = _KEY.match(line)
        if m and current == table and m.group(1).strip("\"'") == key:
            return no
    if table_line is None and table:
        return locate(text, table) if "." in table else _table_line(text, table)
    return table_line if table else 1


def _table_line(text, table):
    for no, line in enumerate(text.splitlines(), 1):
        h = _HEADER.match(line)
        if h and h.group(1).replace(" ", "") == table:
            return no
    return None


class _Reader:
    """Typed access to one table, raising anchored errors."""

    def __init__(self, data: dict, prefix: str, text: str, source: str):
        self.data, self.prefix, self.text, self.source = data, prefix, text, source

    def _path(self, key):
        return f"{self.prefix}.{key}" if self.prefix else key

    def fail(self, key, message):
        path = self._path(key)
        raise ConfigError(message, path, locate(self.text, path), self.source)

    def sub(self, key, required=True) -> "_Reader | None":
        val = self.data.get(key)
        if val is None:
            if required:
                self.fail(key, "missing table")
            return None
        if not isinstance(val, dict):
            self.fail(key, "must be a table")
        return _Reader(val, self._path(key), self.text, self.source)

    def get(self, key, kind, default=..., check=None, why=""):
        if key not in self.data:
            if default is ...:
                self.fail(key, "required field is missing")
            return default
        val = self.data[key]
        try:
            val = kind(val)
        except (TypeError, ValueError) as exc:
            self.fail(key, f"bad value {self.data[key]!r}: {exc}")
        if check is not None and not check(val):
            self.fail(key, f"value {self.data[key]!r} {why}".rstrip())
        return val


def _int(v):
    if isinstance(v, bool) or not isinstance(v, int):
        raise TypeError("expected an integer")
    return v


def _num(v):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise TypeError("expected a number")
    if not math.isfinite(v):
        raise ValueError("must be finite")
    return float(v)


def _str(v):
    if not isinstance(v, str):
        raise TypeError("expected a string")
    return v


def _vec(v):
    a = np.asarray(v, dtype=float)
    if a.ndim != 1 or a.size == 0 or not np.all(np.isfinite(a)):
        raise ValueError("expected a nonempty list of finite numbers")
    return a


def _mat(v):
    a = np.asarray(v, dtype=float)
    if a.ndim != 2 or a.size == 0 or not np.all(np.isfinite(a)):
        raise ValueError("expected a nonempty list of equal-length rows")
    return a


def _positive(x):
    return x > 0


# ---------------------------------------------------------------- parsing

def parse(text: str, source: str = "<config>") -> ExperimentConfig:
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        m = re.search(r"line (\d+)", str(exc))
        raise ConfigError(f"not valid TOML: {exc}", None,
                          int(m.group(1)) if m else None, source) from None
    r = _Reader(data, "", text, source)
    known = {"name", "seed", "dimension", "particles", "iterations", "thinning", "threads",
             "snapshot_every", "keep", "output_dir", "output_formats",
             "time_budget_seconds", "description", "problem", "initial", "diagnostics"}
    for key in data:
        if key not in known:
            r.fail(key, "unknown field")

    seed = r.get("seed", _int, check=lambda s: 0 <= s < 2 ** 63, why="must be in [0, 2^63)")
    K = r.get("iterations", _int, check=_positive, why="must be positive")
    thin = r.get("thinning", _int, 1, _positive, "must be positive")
    formats = r.get("output_formats", lambda v: tuple(_str(x) for x in v), OUTPUT_FORMATS,
                    lambda f: set(f) <= set(OUTPUT_FORMATS) and len(f) > 0,
                    f"must be a nonempty subset of {list(OUTPUT_FORMATS)}")
    cfg = ExperimentConfig(
        name=r.get("name", _str),
        seed=seed,
        dimension=r.get("dimension", _int, check=_positive, why="must be positive"),
        particles=r.get("particles", _int, check=_positive, why="must be positive"),
        iterations=K,
        problem=r.sub("problem").data,
        initial=r.sub("initial").data,
        thinning=thin,
        threads=r.get("threads", _int, 1, _positive, "must be positive"),
        snapshot_every=r.get("snapshot_every", _int, None,
                             lambda s: s > 0 and s % thin == 0,
                             "must be a positive multiple of thinning"),
        keep=r.get("keep", _int, None, _positive, "must be positive"),
        diagnostics=(r.sub("diagnostics", required=False).data
                     if "diagnostics" in data else {}),
        output_dir=r.get("output_dir", _str, None),
        output_formats=formats,
        time_budget_seconds=r.get("time_budget_seconds", _num, None, _positive,
                                  "must be positive"),
        description=r.get("description", _str, ""),
        text=text,
        source=source,
    )
    for name in cfg.diagnostics:
        if name not in DIAGNOSTICS:
            r.sub("diagnostics").fail(name, f"unknown diagnostic; choose from {list(DIAGNOSTICS)}")
        if not isinstance(cfg.diagnostics[name], dict):
            r.sub("diagnostics").fail(name, "must be a table")
    # build once so every problem-level error surfaces before running
    build(cfg)
    return cfg


def load(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", source=str(path)) from None
    return parse(text, str(path))


# ---------------------------------------------------------------- building

@dataclass
class Built:
    """Objects derived from a config."""

    family: object
    init: object
    operator: object = None           # single-operator problems
    hyperplane: NoisyHyperplaneFamily | None = None
    sgd: NoisySgdProblem | None = None
    affine: AffineFeasibilityProblem | None = None
    center: np.ndarray | None = None  # natural center for moment diagnostics


def _noise(r: _Reader | None):
    if r is None:
        return NoNoise()
    kind = r.get("kind", _str, check=lambda k: k in ("none", "constant", "gaussian",
                                                     "uniform", "ball"),
                 why="must be none, constant, gaussian, uniform or ball")
    if kind == "none":
        return NoNoise()
    if kind == "constant":
        return ConstantNoise(r.get("value", _num))
    scale = r.get("scale", _num, check=_positive, why="must be positive")
    return {"gaussian": GaussianNoise, "uniform": UniformNoise, "ball": BallNoise}[kind](scale)


def _set_projector(r: _Reader, n: int):
    kind = r.get("kind", _str, check=lambda k: k in ("hyperplane", "halfspace", "ball", "l1"),
                 why="must be hyperplane, halfspace, ball or l1")
    if kind == "ball":
        return Ball(r.get("center", _vec, check=lambda v: v.size == n, why=f"needs {n} entries"),
                    r.get("radius", _num, check=_positive, why="must be positive"))
    if kind == "l1":
        r.fail("kind", "l1 is a prox, not a set; use it only in forward_backward.prox")
    normal = r.get("normal", _vec, check=lambda v: v.size == n and np.any(v != 0),
                   why=f"needs {n} entries, not all zero")
    offset = r.get("offset", _num)
    return (Hyperplane if kind == "hyperplane" else Halfspace)(normal, offset)


def _table_list(r: _Reader, key: str) -> list[_Reader]:
    items = r.data.get(key)
    if not isinstance(items, list) or not items or not all(isinstance(i, dict) for i in items):
        r.fail(key, "must be a nonempty array of tables")
    return [_Reader(it, f"{r.prefix}.{key}", r.text, r.source) for it in items]


def _weights(r: _Reader, key: str, count: int):
    return r.get(key, _vec, None, lambda w: w.size == count and np.all(w >= 0) and w.sum() > 0,
                 f"needs {count} nonnegative entries with positive sum")


def _build_problem(cfg: ExperimentConfig, r: _Reader) -> Built:
    n = cfg.dimension
    kind = r.get("kind", _str, check=lambda k: k in PROBLEM_KINDS,
                 why=f"must be one of {list(PROBLEM_KINDS)}")
    square = lambda M: M.shape == (n, n)  # noqa: E731
    if kind == "linear":
        if "matrices" in r.data:
            mats = r.get("matrices", lambda v: [_mat(m) for m in v],
                         check=lambda ms: ms and all(square(M) for M in ms),
                         why=f"must be a nonempty list of {n}x{n} matrices")
        else:
            mats = [r.get("matrix", _mat, check=square, why=f"must be {n}x{n}")]
        shifts = r.get("shifts", lambda v: [_vec(s) for s in v], [None] * len(mats),
                       lambda ss: len(ss) == len(mats) and all(s is None or s.size == n
                                                              for s in ss),
                       f"needs one length-{n} shift per matrix")
        ops = [LinearMap(M, s) for M, s in zip(mats, shifts)]
        fam = FiniteFamily(ops, _weights(r, "weights", len(ops)))
        return Built(fam, None, operator=ops[0] if len(ops) == 1 else None)
    if kind == "noisy_hyperplane":
        fam = NoisyHyperplaneFamily(
            r.get("normal", _vec, check=lambda v: v.size == n and np.any(v != 0),
                  why=f"needs {n} entries, not all zero"),
            r.get("anchor", _vec, check=lambda v: v.size == n, why=f"needs {n} entries"),
            _noise(r.sub("xi", required=False)), _noise(r.sub("zeta", required=False)))
        return Built(fam, None, hyperplane=fam, center=fam.xbar)
    if kind == "affine_feasibility":
        rows = r.get("rows", _int, check=_positive, why="must be positive")
        prob = AffineFeasibilityProblem.random(
            rows, n, r.get("system_seed", _int, check=lambda s: s >= 0, why="must be >= 0"),
            xi=_noise(r.sub("xi", required=False)), zeta=_noise(r.sub("zeta", required=False)),
            order=r.get("order", _str, "cyclic", lambda o: o in ("cyclic", "random"),
                        "must be cyclic or random"))
        return Built(prob.family(), None, affine=prob, center=prob.shared_point)
    if kind == "sgd":
        Q = r.get("Q", _mat, check=square, why=f"must be {n}x{n}")
        eta = _noise(r.sub("eta", required=False))
        try:
            prob = NoisySgdProblem(Q, eta, r.get("step", _num, check=_positive,
                                                 why="must be positive"),
                                   r.get("allow_outside_theory", bool, False))
        except ValueError as exc:
            r.fail("step" if "step" in str(exc) else "Q", str(exc))
        return Built(prob.family(), None, sgd=prob, center=prob.minimizer)
    if kind == "douglas_rachford":
        f_sets = [ProxIndicator(_set_projector(s, n)) for s in _table_list(r, "f_sets")]
        g_sets = [ProxIndicator(_set_projector(s, n)) for s in _table_list(r, "g_sets")]
        fam = stochastic_douglas_rachford(f_sets, g_sets, _weights(r, "f_weights", len(f_sets)),
                                          _weights(r, "g_weights", len(g_sets)))
        return Built(fam, None)
    # forward_backward
    t = r.get("step", _num, check=_positive, why="must be positive")
    grads = []
    for q in _table_list(r, "quadratics"):
        Q = q.get("Q", _mat, check=square, why=f"must be {n}x{n}")
        c = q.get("c", _vec, None, lambda v: v.size == n, f"needs {n} entries")
        grads.append(GradStep.quadratic(Q, c, t))
    proxes = []
    for p in _table_list(r, "prox"):
        if p.data.get("kind") == "l1":
            proxes.append(ProxL1(n, t))
        else:
            proxes.append(ProxIndicator(_set_projector(p, n)))
    for i, g in enumerate(grads):
        if t * g.L > 2.0:
            r.fail("step", f"t*L = {t * g.L:.6g} > 2 for quadratic {i}; the map is not averaged")
    fam = stochastic_forward_backward(proxes, grads, _weights(r, "prox_weights", len(proxes)),
                                      _weights(r, "grad_weights", len(grads)))
    return Built(fam, None)


def _build_initial(cfg: ExperimentConfig, r: _Reader, built: Built):
    n = cfg.dimension
    kind = r.get("kind", _str, check=lambda k: k in INITIAL_KINDS,
                 why=f"must be one of {list(INITIAL_KINDS)}")
    nvec = lambda v: v.size == n  # noqa: E731
    if kind == "point":
        return PointMass(r.get("point", _vec, check=nvec, why=f"needs {n} entries"))
    if kind == "gaussian":
        return GaussianLaw(r.get("mean", _vec, check=nvec, why=f"needs {n} entries"),
                           r.get("std", _num, 1.0, _positive, "must be positive"))
    if kind == "uniform_box":
        low = r.get("low", _vec, check=nvec, why=f"needs {n} entries")
        high = r.get("high", _vec, check=lambda v: nvec(v) and np.all(v > low),
                     why=f"needs {n} entries above low")
        return UniformBox(low, high)
    if built.affine is None:
        r.fail("kind", "row_space start needs an affine_feasibility problem")
    return PointMass(built.affine.row_space_point(
        r.get("scale", _num, check=_positive, why="must be positive"),
        r.get("seed", _int, check=lambda s: s >= 0, why="must be >= 0")))


def _check_diagnostics(cfg: ExperimentConfig, built: Built, d: _Reader):
    K, thin = cfg.iterations, cfg.thinning
    for name in cfg.diagnostics:
        r = d.sub(name)
        if name == "cesaro":
            cps = r.get("checkpoints", lambda v: [_int(x) for x in v],
                        check=lambda c: c and all(k > 0 and k % thin == 0 for k in c),
                        why="must be positive multiples of thinning")
            ref = r.sub("reference", required=False)
            top = max(cps) if ref is not None else 2 * max(cps)
            if top > K:
                r.fail("checkpoints", f"needs iteration {top} but the run stops at {K}")
            if cfg.keep is not None:
                r.fail("checkpoints", "Cesaro pooling needs every snapshot; drop 'keep'")
            r.get("p", _num, 1.0, lambda p: p >= 1, "must be >= 1")
            if ref is not None:
                try:
                    measure_from_table(ref, cfg.dimension)
                except ValueError as exc:
                    ref.fail("atoms", str(exc))
        elif name == "rate_fit":
            r.get("p", _num, 2.0, lambda p: p >= 1, "must be >= 1")
            r.get("reference_factor", _int, 10, lambda f: f >= 2, "must be at least 2")
            r.get("reference_seed", _int, cfg.seed + 1, lambda s: s >= 0, "must be >= 0")
            r.get("transient", _num, 0.1, lambda t: 0 <= t < 1, "must lie in [0, 1)")
            if cfg.keep is not None and cfg.keep * thin < K:
                r.fail("p", "rate fitting needs the snapshots of the whole run; drop 'keep'")
        elif name == "bounded_expectation":
            r.get("cap", _num, check=_positive, why="must be positive")
        elif name == "second_moment":
            r.get("center", _vec, None, lambda v: v.size == cfg.dimension,
                  f"needs {cfg.dimension} entries")
        elif name == "residual_histogram":
            wins = r.get("windows", lambda v: [tuple(_int(x) for x in w) for w in v],
                         check=lambda ws: ws and all(len(w) == 2 and 0 <= w[0] < w[1] <= K
                                                     for w in ws),
                         why=f"must be [start, end) pairs inside [0, {K}]")
            del wins
            r.get("rule", _str, "fd", lambda s: s in ("fd", "width", "count"),
                  "must be fd, width or count")
            if r.data.get("rule", "fd") != "fd":
                r.get("value", _num, check=_positive, why="must be positive")
        elif name == "asymptotic_regularity":
            if built.operator is None:
                r.fail("lam", "needs a linear problem with a single matrix")
            r.get("lam", _num, check=lambda v: 0 < v < 1, why="must lie in (0, 1)")
            r.get("iterations", _int, check=_positive, why="must be positive")
            r.get("diam", _num, check=_positive, why="must be positive")
            r.get("x0", _vec, check=lambda v: v.size == cfg.dimension,
                  why=f"needs {cfg.dimension} entries")
        elif name == "noise_constants":
            if built.hyperplane is None:
                r.fail("noise_samples", "needs a noisy_hyperplane problem")
            r.get("sphere_samples", _int, 360, _positive, "must be positive")
            r.get("noise_samples", _int, 100_000, _positive, "must be positive")
            r.get("seed", _int, cfg.seed, lambda s: s >= 0, "must be >= 0")
        elif name == "sampling_error":
            if cfg.particles < 2:
                r.fail("p", "needs at least two particles")
            r.get("p", _num, 2.0, lambda p: p >= 1, "must be >= 1")


def measure_from_table(r: _Reader, dim: int) -> EmpiricalMeasure:
    atoms = np.asarray(r.data.get("atoms"), dtype=float)
    if atoms.ndim == 1:
        atoms = atoms[:, None]
    if atoms.ndim != 2 or atoms.shape[1] != dim:
        raise ValueError(f"atoms must be points of dimension {dim}")
    return EmpiricalMeasure(atoms, r.data.get("weights"))


def build(cfg: ExperimentConfig) -> Built:
    root = _Reader({"problem": cfg.problem, "initial": cfg.initial,
                    "diagnostics": cfg.diagnostics}, "", cfg.text, cfg.source)
    try:
        built = _build_problem(cfg, root.sub("problem"))
        built.init = _build_initial(cfg, root.sub("initial"), built)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc), "problem", locate(cfg.text, "problem"), cfg.source) from None
    if built.family.dim != cfg.dimension:
        root.fail("dimension", f"problem has dimension {built.family.dim}")
    _check_diagnostics(cfg, built, root.sub("diagnostics", required=False)
                       or _Reader({}, "diagnostics", cfg.text, cfg.source))
    return built


def reader(cfg: ExperimentConfig, *path: str) -> _Reader:
    """Reader over a nested config table, e.g. ``reader(cfg, "diagnostics", "cesaro")``."""
    r = _Reader({"problem": cfg.problem, "initial": cfg.initial,
                 "diagnostics": cfg.diagnostics}, "", cfg.text, cfg.source)
    for p in path:
        r = r.sub(p)
    return r
