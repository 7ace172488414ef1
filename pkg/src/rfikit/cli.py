"""Command line entry point: ``rfikit run | compare | list-examples``.

Exit codes: 0 success, 2 configuration or input error, 3 runtime failure.

Outputs of ``run`` (schema version ``SCHEMA_VERSION``):

``trajectory.csv``
    ``k,residual,mean_norm`` for ``k = 0..K``.  ``residual`` at ``k`` is the
    particle mean of ``||X_{k+1} - X_k||`` and is empty on the last row.
``snapshots.csv``
    ``k,particle,x0,...,x{n-1}`` for every ``snapshot_every``-th iteration
    and the final one.
``trajectory.json`` / ``snapshots.json``
    The same content as JSON (when ``"json"`` is among the output formats).
``diagnostics.json``
    One entry per requested diagnostic.
``manifest.json``
    Config hash, library version, per-file sha256, wall clock and status.

CSV floats use 17 significant digits; JSON floats use the shortest
representation that round-trips, which is never longer.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import sys
import time
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, ExperimentConfig, build, measure_from_table, parse, reader
from .diagnostics import (HistogramSpec, OrbitEscape, pooled_distance, asymptotic_regularity_check,
                          bounded_expectation_check, cesaro_convergence_check,
                          geometric_rate_fit, histogram_wasserstein, residual_histogram,
                          second_moment_trace, split_half_error)
from .engine import IndexSampler, cesaro_pool, run_ensemble
from .measures import EmpiricalMeasure, prokhorov, wasserstein
from .problems import estimate_c, estimate_d

SCHEMA_VERSION = 1
EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


def _fmt(x: float) -> str:
    return "%.17g" % x


# ---------------------------------------------------------------- bundled

def bundled_configs() -> dict[str, str]:
    """Name -> TOML text of the configs shipped with the package."""
    root = resources.files("rfikit") / "configs"
    return {p.name: p.read_text() for p in sorted(root.iterdir(), key=lambda p: p.name)
            if p.name.endswith(".toml")}


def _resolve(path: str) -> tuple[str, str]:
    """Return (source label, text) for a file path or a bundled config name."""
    p = Path(path)
    if p.exists():
        return str(p), p.read_text()
    name = p.name if p.name.endswith(".toml") else p.name + ".toml"
    bundled = bundled_configs()
    if name in bundled and p.parent == Path("."):
        return name, bundled[name]
    raise ConfigError("no such config file or bundled example", source=path)


# -------------------------------------------------------------- diagnostics

def _diagnostics(cfg: ExperimentConfig, built, hist, sampler) -> dict:
    out = {}
    for name in cfg.diagnostics:
        r = reader(cfg, "diagnostics", name)
        out[name] = _DIAG[name](cfg, built, hist, sampler, r)
    return out


def _cesaro(cfg, built, hist, sampler, r):
    cps = r.get("checkpoints", list)
    p = r.get("p", float, 1.0)
    ref = r.sub("reference", required=False)
    if ref is None:
        rows = [{"k": k, "distance": d} for k, d in cesaro_convergence_check(hist, cps, p)]
        return {"p": p, "compared_with": "nu_2k", "checkpoints": rows}
    target = measure_from_table(ref, cfg.dimension)
    rows = []
    for k in cps:
        rows.append({"k": k, "distance": pooled_distance(cesaro_pool(hist, k), target, p)})
    return {"p": p, "compared_with": "reference", "checkpoints": rows}


def _rate_fit(cfg, built, hist, sampler, r):
    p = r.get("p", float, 2.0)
    factor = r.get("reference_factor", int, 10)
    ref_seed = r.get("reference_seed", int, cfg.seed + 1)
    K_ref = factor * cfg.iterations
    ref_hist = run_ensemble(built.init, cfg.particles, K_ref, IndexSampler(ref_seed),
                            built.family, thin=K_ref, threads=cfg.threads)
    reference = ref_hist[-1]
    fit = geometric_rate_fit(hist, reference, p=p, transient=r.get("transient", float, 0.1))
    res = {"p": p, "fitted_rate": fit.fitted_rate, "r_squared": fit.r_squared,
           "window": list(fit.window), "reference_iterations": K_ref,
           "reference_seed": ref_seed, "note": fit.note}
    if built.hyperplane is not None:
        c = estimate_c(built.hyperplane, 360, 100_000, cfg.seed)
        res.update(c_hat=c, rate_bound=math.sqrt(max(0.0, 1.0 - c)))
    return res


def _bounded(cfg, built, hist, sampler, r):
    return bounded_expectation_check(hist, r.get("cap", float))


def _second_moment(cfg, built, hist, sampler, r):
    center = r.get("center", np.asarray, None)
    if center is None:
        center = built.center if built.center is not None else np.zeros(cfg.dimension)
    ks, m, se = second_moment_trace(hist, center)
    res = {"center": np.asarray(center, float).tolist(), "initial": float(m[0]),
           "max": float(m.max()), "argmax_k": int(ks[int(np.argmax(m))]), "final": float(m[-1])}
    if built.sgd is not None:
        bound = m[0] + 2.0 * built.sgd.pbar / built.sgd.tau
        excess = m - (bound + 3.0 * se)
        res.update(bound=float(bound), worst_excess_over_3se=float(excess.max()),
                   within_bound=bool(np.all(excess <= 0)))
    return res


def _residual_hist(cfg, built, hist, sampler, r):
    wins = [tuple(w) for w in r.get("windows", list)]
    res = hist.log.residuals
    pooled = np.concatenate([res[a:b] for a, b in wins])
    rule = r.get("rule", str, "fd")
    spec = HistogramSpec(rule, r.get("value", float, None),
                         (float(pooled.min()), float(pooled.max())))
    hists = [residual_histogram(hist.log, w, spec) for w in wins]
    median = float(np.median(pooled))
    pairs = []
    for i in range(len(hists) - 1):
        d = histogram_wasserstein(hists[i], hists[i + 1])
        pairs.append({"windows": [list(wins[i]), list(wins[i + 1])], "w1": d,
                      "w1_over_median": d / median if median > 0 else None})
    return {"rule": rule, "median_residual": median,
            "histograms": [dict(window=list(w), **h.to_dict()) for w, h in zip(wins, hists)],
            "consecutive_w1": pairs}


def _asym_reg(cfg, built, hist, sampler, r):
    lam, diam = r.get("lam", float), r.get("diam", float)
    try:
        recs = asymptotic_regularity_check(built.operator, lam, r.get("x0", np.asarray),
                                           r.get("iterations", int), diam)
        escaped = False
    except OrbitEscape as exc:
        recs, escaped = exc.records, True
    ratios = [res / b for _, res, b in recs]
    return {"lam": lam, "diam": diam, "iterations": len(recs), "orbit_escaped": escaped,
            "max_ratio": max(ratios) if ratios else None,
            "all_below_bound": (not escaped) and all(q < 1 for q in ratios),
            "final_residual": recs[-1][1] if recs else None}


def _noise_constants(cfg, built, hist, sampler, r):
    seed = r.get("seed", int, cfg.seed)
    ns = r.get("noise_samples", int, 100_000)
    c = estimate_c(built.hyperplane, r.get("sphere_samples", int, 360), ns, seed)
    return {"c_hat": c, "d_hat": estimate_d(built.hyperplane, ns, seed),
            "contraction_bound": math.sqrt(max(0.0, 1.0 - c))}


def _sampling_error(cfg, built, hist, sampler, r):
    p = r.get("p", float, 2.0)
    return {"p": p, "k": hist.last_k, "split_half_distance": split_half_error(hist[-1], p)}


_DIAG = {"cesaro": _cesaro, "rate_fit": _rate_fit, "bounded_expectation": _bounded,
         "second_moment": _second_moment, "residual_histogram": _residual_hist,
         "asymptotic_regularity": _asym_reg, "noise_constants": _noise_constants,
         "sampling_error": _sampling_error}


# ------------------------------------------------------------------ output

def _trajectory_csv(log) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["k", "residual", "mean_norm"])
    K = log.iterations
    for k in range(K + 1):
        w.writerow([k, _fmt(log.residuals[k]) if k < K else "", _fmt(log.mean_norms[k])])
    return buf.getvalue()


def _snapshot_rows(cfg, hist):
    every = cfg.snapshot_every or max(cfg.thinning,
                                      cfg.thinning * (cfg.iterations // (10 * cfg.thinning)))
    last = hist.last_k
    for k, m in zip(hist.ks, hist):
        if k % every == 0 or k == last:
            yield k, m


def _snapshots_csv(cfg, hist) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["k", "particle"] + [f"x{i}" for i in range(cfg.dimension)])
    for k, m in _snapshot_rows(cfg, hist):
        for cid, x in zip(hist.chain_ids, m.atoms):
            w.writerow([k, int(cid)] + [_fmt(v) for v in x])
    return buf.getvalue()


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n"


class _Writer:
    def __init__(self, out: Path):
        self.out = out
        self.files: dict[str, str] = {}

    def write(self, name: str, text: str):
        data = text.encode()
        (self.out / name).write_bytes(data)
        self.files[name] = hashlib.sha256(data).hexdigest()


def run(cfg: ExperimentConfig, out: Path, threads: int | None = None) -> dict:
    """Run an experiment and write its artifacts; returns the manifest."""
    out.mkdir(parents=True, exist_ok=True)
    threads = threads or cfg.threads
    cfg.threads = threads
    wr = _Writer(out)
    manifest = {"schema_version": SCHEMA_VERSION, "library_version": __version__,
                "config": cfg.source, "config_sha256": cfg.sha256, "seed": cfg.seed,
                "threads": threads, "time_budget_seconds": cfg.time_budget_seconds}
    t0 = time.perf_counter()
    try:
        built = build(cfg)
        sampler = IndexSampler(cfg.seed)
        hist = run_ensemble(built.init, cfg.particles, cfg.iterations, sampler, built.family,
                            thin=cfg.thinning, keep=cfg.keep, threads=threads)
        if "csv" in cfg.output_formats:
            wr.write("trajectory.csv", _trajectory_csv(hist.log))
            wr.write("snapshots.csv", _snapshots_csv(cfg, hist))
        if "json" in cfg.output_formats:
            log = hist.log
            wr.write("trajectory.json", _dump({
                "k": list(range(log.iterations + 1)), "residual": log.residuals.tolist(),
                "mean_norm": log.mean_norms.tolist()}))
            wr.write("snapshots.json", _dump({
                "chain_ids": hist.chain_ids.tolist(),
                "snapshots": [{"k": k, "atoms": m.atoms.tolist()}
                              for k, m in _snapshot_rows(cfg, hist)]}))
        wr.write("diagnostics.json", _dump(_diagnostics(cfg, built, hist, sampler)))
        status, error = "complete", None
    except Exception as exc:  # noqa: BLE001 - reported in the manifest
        status, error = "failed", f"{type(exc).__name__}: {exc}"
    wall = time.perf_counter() - t0
    manifest.update(
        status=status, error=error, partial=status != "complete", files=wr.files,
        wall_clock_seconds=wall,
        within_budget=None if cfg.time_budget_seconds is None
        else wall <= cfg.time_budget_seconds)
    (out / "manifest.json").write_text(_dump(manifest))
    return manifest


# --------------------------------------------------------------- measures

def read_measure(path: str) -> EmpiricalMeasure:
    """Load a measure from JSON ``{"atoms", "weights"?}`` or CSV.

    CSV files have a header; a column named ``weight`` holds weights and
    every other column is a coordinate.
    """
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ValueError(f"{path}: {exc.strerror}") from None
    try:
        if p.suffix.lower() == ".json":
            data = json.loads(text)
            return EmpiricalMeasure(data["atoms"], data.get("weights"))
        rows = list(csv.reader(io.StringIO(text)))
        header, body = rows[0], [r for r in rows[1:] if r]
        wcol = header.index("weight") if "weight" in header else None
        cols = [i for i in range(len(header)) if i != wcol]
        atoms = [[float(r[i]) for i in cols] for r in body]
        weights = None if wcol is None else [float(r[wcol]) for r in body]
        return EmpiricalMeasure(atoms, weights)
    except (KeyError, IndexError, ValueError, json.JSONDecodeError) as exc:
        raise ValueError(f"{path}: not a measure file ({exc})") from None


def compare(a: str, b: str, p: float | None, use_prokhorov: bool) -> dict:
    mu, nu = read_measure(a), read_measure(b)
    if mu.dim != nu.dim:
        raise ValueError(f"dimension mismatch: {a} has {mu.dim}, {b} has {nu.dim}")
    report = {}
    if p is not None or not use_prokhorov:
        report["wasserstein"] = wasserstein(mu, nu, 2.0 if p is None else p,
                                            coupling=False).to_dict()
    if use_prokhorov:
        report["prokhorov"] = prokhorov(mu, nu).to_dict()
    return report


# -------------------------------------------------------------------- main

def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rfikit", description="Random function iteration runner.")
    ap.add_argument("--version", action="version", version=f"rfikit {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run an experiment config (file or bundled name)")
    r.add_argument("config")
    r.add_argument("--out", help="output directory")
    r.add_argument("--threads", type=int, help="worker threads (results do not depend on it)")
    c = sub.add_parser("compare", help="distance between two measure files")
    c.add_argument("file_a")
    c.add_argument("file_b")
    c.add_argument("--wasserstein", type=float, metavar="P", help="Wasserstein order")
    c.add_argument("--prokhorov", action="store_true", help="Prokhorov-Levy distance")
    sub.add_parser("list-examples", help="list bundled configs")
    return ap


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    if args.command == "list-examples":
        for name, text in bundled_configs().items():
            first = text.splitlines()[0] if text else ""
            print(f"{name:28s} {first.lstrip('# ').strip()}")
        return EXIT_OK
    if args.command == "compare":
        if args.wasserstein is not None and args.wasserstein < 1:
            print("error: --wasserstein needs p >= 1", file=sys.stderr)
            return EXIT_CONFIG
        try:
            report = compare(args.file_a, args.file_b, args.wasserstein, args.prokhorov)
        except ValueError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        print(json.dumps(report, indent=2, sort_keys=True))
        return EXIT_OK
    # run
    if args.threads is not None and args.threads < 1:
        print("error: --threads must be positive", file=sys.stderr)
        return EXIT_CONFIG
    try:
        source, text = _resolve(args.config)
        cfg = parse(text, source)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out or cfg.output_dir or Path("rfikit-out") / cfg.name)
    manifest = run(cfg, out, args.threads)
    if manifest["status"] != "complete":
        print(f"runtime error: {manifest['error']} (partial outputs in {out})", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"{cfg.name}: {len(manifest['files'])} files in {out} "
          f"({manifest['wall_clock_seconds']:.2f} s)")
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
