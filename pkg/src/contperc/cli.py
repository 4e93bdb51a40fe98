"""Command-line experiment harness: TOML config in, CSV/JSON/PGM artifacts plus a manifest out."""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from dataclasses import dataclass, field
from importlib import metadata

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:     # Python < 3.11
    import tomli as tomllib

from .clusters import TailEstimate, decompose, fit_decay, merge_tails, typical_cluster_tail
from .cluster_geometry import (build_cutoff, disjoint, fatten_decomposition, max_gradient,
                               verify_ball_conditions)
from .connectivity import (CertifierInput, ConnectivityEstimate, InclusionCrossing, buckling_certify,
                           covering_check, merge_connectivity, theta_estimate)
from .effective import assemble_field, bounds_check, contrast_sweep, energy, trial_field
from .geometry import Window, rasterize, write_pgm
from .inclusions import ModelSpec, RadiusLaw
from .point_processes import ProcessConfig
from .radii import action_radius, agree_outside
from .rng import SeedKey

STAGES = ("generate", "clusters", "tail", "connectivity", "certify", "radii", "fatten", "effcoef")
EXIT_OK, EXIT_USAGE, EXIT_INVARIANT = 0, 1, 2


class ConfigError(ValueError):
    """Invalid configuration; ``field`` names the offending entry."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


def code_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0+unknown"


# --------------------------------------------------------------------------
# configuration


def _num(cfg, key, kind=float, default=None, required=False, positive=False, where=""):
    name = f"{where}.{key}" if where else key
    if key not in cfg:
        if required:
            raise ConfigError(name, "missing")
        return default
    try:
        v = kind(cfg[key])
    except (TypeError, ValueError):
        raise ConfigError(name, f"expected {kind.__name__}, got {cfg[key]!r}") from None
    if positive and not v > 0:
        raise ConfigError(name, "must be positive")
    return v


@dataclass
class ExperimentConfig:
    model: ModelSpec
    window: Window
    seed: int = 0
    replicates: int = 100
    first: int = 0
    workers: int = 1
    stages: list = field(default_factory=lambda: ["generate"])
    out: str = "results"
    rho: float | None = None
    thresholds: list | None = None
    sections: dict = field(default_factory=dict)
    raw: dict = field(default_factory=dict)

    def section(self, name) -> dict:
        return self.sections.get(name, {})


def parse_config(raw: dict, overrides: dict | None = None) -> ExperimentConfig:
    """Validate every referenced parameter before any sampling."""
    raw = dict(raw)
    for k, v in (overrides or {}).items():
        if v is not None:
            raw[k] = v
    m = raw.get("model")
    if not isinstance(m, dict):
        raise ConfigError("model", "missing [model] table")
    try:
        proc = ProcessConfig(_num(m, "intensity", required=True, positive=True, where="model"),
                             _num(m, "hardcore", default=1.0, positive=True, where="model"),
                             str(m.get("process", "poisson")))
    except ValueError as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError("model.process", str(e)) from None
    law = None
    if "law" in m:
        lw = m["law"]
        try:
            law = RadiusLaw(str(lw.get("variant", "dirac")), _num(lw, "scale", required=True, positive=True,
                                                                    where="model.law"),
                            _num(lw, "exponent", default=0.0, where="model.law"))
        except ValueError as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError("model.law", str(e)) from None
    try:
        spec = ModelSpec(proc, str(m.get("inclusion", "boolean")), law,
                         _num(m, "radius", default=0.5, positive=True, where="model"),
                         _num(m, "q", default=0.5, where="model"),
                         _num(m, "threshold", default=1.0, where="model"))
    except ValueError as e:
        raise ConfigError("model.inclusion", str(e)) from None
    w = raw.get("window")
    if not isinstance(w, dict):
        raise ConfigError("window", "missing [window] table")
    try:
        window = Window(_num(w, "size", required=True, positive=True, where="window"),
                        _num(w, "dim", int, default=2, where="window"), str(w.get("boundary", "free")),
                        _num(w, "guard", default=0.0, where="window"))
    except ValueError as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError("window", str(e)) from None
    if law is not None:
        try:
            law.check_dim(window.dim)
        except ValueError as e:
            raise ConfigError("model.law.exponent", str(e)) from None
    stages = raw.get("stages", ["generate"])
    if isinstance(stages, str):
        stages = [stages]
    for s in stages:
        if s not in STAGES:
            raise ConfigError("stages", f"unknown stage {s!r}")
    seed = _num(raw, "seed", int, default=0)
    if not 0 <= seed < 2 ** 64:
        raise ConfigError("seed", "must be a 64-bit unsigned integer")
    cfg = ExperimentConfig(
        spec, window, seed,
        _num(raw, "replicates", int, default=100, positive=True),
        _num(raw, "first", int, default=0),
        _num(raw, "workers", int, default=1, positive=True),
        list(stages), str(raw.get("out", "results")),
        _num(raw, "rho", default=None, positive=True),
        [float(t) for t in raw["thresholds"]] if "thresholds" in raw else None,
        {k: v for k, v in raw.items() if isinstance(v, dict) and k not in ("model", "window")},
        raw,
    )
    needs_rho = {"clusters", "tail", "connectivity", "radii", "fatten"}
    for s in stages:
        if s in needs_rho and cfg.rho is None:
            if s == "radii" and cfg.section("radii").get("target", "inclusions") == "inclusions":
                continue
            raise ConfigError("rho", f"stage {s!r} needs rho")
        if s == "tail":
            if not cfg.thresholds:
                raise ConfigError("thresholds", "stage 'tail' needs thresholds")
            if window.guard < max(cfg.thresholds):
                raise ConfigError("window.guard", "guard must be at least the largest threshold")
        if s == "connectivity":
            c = cfg.section("connectivity")
            if "radii" not in c:
                raise ConfigError("connectivity.radii", "missing")
            a = _num(c, "alpha", default=0.25, where="connectivity")
            if not 0 < a < 0.5:
                raise ConfigError("connectivity.alpha", "must lie in (0, 1/2)")
            if window.size < 2 * max(c["radii"]) + window.guard:
                raise ConfigError("window.size", "need size >= 2 * max radius + guard")
        if s == "certify":
            c = cfg.section("certify")
            _num(c, "alpha", required=True, where="certify")
            _num(c, "r0", required=True, positive=True, where="certify")
        if s == "effcoef":
            c = cfg.section("effcoef")
            if _num(c, "n", int, default=64, where="effcoef") < 32:
                raise ConfigError("effcoef.n", "grid needs n >= 32")
            geo = c.get("geometry", "inclusions")
            if geo not in ("inclusions", "laminate", "checkerboard", "stripe"):
                raise ConfigError("effcoef.geometry", f"unknown geometry {geo!r}")
    return cfg


def load_config(path: str) -> dict:
    """TOML config, or a manifest JSON whose config echo is reused."""
    if path.endswith(".json"):
        with open(path) as fh:
            d = json.load(fh)
        return d["config"] if "config" in d else d
    with open(path, "rb") as fh:
        return tomllib.load(fh)


# --------------------------------------------------------------------------
# artifacts


def _dump_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, sort_keys=True, indent=1, default=_jsonable)
        fh.write("\n")


def _jsonable(x):
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (set, frozenset, tuple)):
        return list(x)
    raise TypeError(f"not serializable: {type(x)}")


def _write_csv(path, header, rows):
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for r in rows:
            fh.write(",".join(repr(float(v)) if isinstance(v, (float, np.floating)) else str(v) for v in r) + "\n")


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


class Stage:
    def __init__(self, cfg: ExperimentConfig, name: str):
        self.cfg, self.name = cfg, name
        self.files: list = []
        self.checks: dict = {}

    def path(self, fname):
        p = os.path.join(self.cfg.out, f"{self.name}_{fname}")
        self.files.append(p)
        return p

    def check(self, name, ok):
        self.checks[name] = bool(ok)


def _root(cfg) -> SeedKey:
    return SeedKey(cfg.seed)


def _realize(cfg):
    return cfg.model.realize(cfg.window, _root(cfg).child("realization", 0))


def stage_generate(st: Stage):
    cfg = st.cfg
    key = _root(cfg).child("realization", 0)
    pts = cfg.model.points(cfg.window, key)
    pts.to_csv(st.path("points.csv"))
    incl = cfg.model.realize(cfg.window, key)
    incl.to_json(st.path("inclusions.json"))
    if cfg.window.dim == 2 and len(incl):
        pitch = float(st.cfg.section("generate").get("pitch", cfg.window.size / 256))
        write_pgm(st.path("inclusions.pgm"), rasterize(incl.shapes, pitch, cfg.window).mask)
    return {"points": len(pts), "inclusions": len(incl)}


def stage_clusters(st: Stage):
    cfg = st.cfg
    incl = _realize(cfg)
    dec = decompose(incl, cfg.rho)
    rows = [(c, len(m), float(dec.diameters[c]), int(dec.censored[c])) for c, m in enumerate(dec.clusters)]
    _write_csv(st.path("clusters.csv"), ["cluster", "size", "diameter", "censored"], rows)
    _dump_json(st.path("clusters.json"), {"rho": cfg.rho, "labels": dec.labels})
    st.check("partition", sorted(i for m in dec.clusters for i in m) == list(range(len(incl))))
    return {"clusters": len(dec)}


def stage_tail(st: Stage):
    cfg = st.cfg
    tail = typical_cluster_tail(cfg.model, cfg.window, cfg.rho, cfg.thresholds, cfg.replicates,
                                _root(cfg).child("tail"), cfg.workers, cfg.first)
    tail.to_csv(st.path("tail.csv"))
    _dump_json(st.path("estimate.json"), tail.to_dict())
    res = {"n": tail.n, "censored_fraction": tail.censored_fraction}
    model = st.cfg.section("tail").get("fit", "algebraic")
    try:
        fit = fit_decay(tail, model)
        res["fit"] = {"model": fit.model, "exponent": fit.exponent, "ci": list(fit.ci)}
    except ValueError as e:
        res["fit"] = {"error": str(e)}
    _dump_json(st.path("fit.json"), res)
    return res


def stage_connectivity(st: Stage):
    cfg = st.cfg
    c = cfg.section("connectivity")
    alpha = float(c.get("alpha", 0.25))
    sampler = InclusionCrossing(cfg.model, cfg.window, cfg.rho, str(c.get("adjacency", "face")))
    est = theta_estimate(sampler, alpha, [float(r) for r in c["radii"]], cfg.replicates,
                         _root(cfg).child("connectivity"), cfg.workers, cfg.first)
    est.meta = {"model": cfg.model.to_dict(), "rho": cfg.rho, "window": cfg.window.to_dict(),
                "adjacency": sampler.adjacency}
    est.to_csv(st.path("theta.csv"))
    _dump_json(st.path("estimate.json"), est.to_dict())
    cov = covering_check(est, d=cfg.window.dim)
    _dump_json(st.path("covering.json"), cov)
    return {"theta": est.theta.tolist()}


def stage_certify(st: Stage):
    c = st.cfg.section("certify")
    keys = ("alpha", "r0", "d", "beta", "ell", "c_d", "pi_model", "C0", "exponent", "theta_r0", "steps")
    inp = CertifierInput(**{k: c[k] for k in keys if k in c})
    cb = buckling_certify(inp)
    _write_csv(st.path("bound.csv"), ["k", "r", "bound"], [(k, r, b) for k, (r, b) in enumerate(zip(cb.radii, cb.bound))])
    res = {"valid": cb.valid, "K": inp.K, "eps": inp.eps}
    if cb.fit is not None:
        res["fit"] = {"model": cb.fit.model, "exponent": cb.fit.exponent}
    _dump_json(st.path("certificate.json"), res)
    st.check("certified", cb.valid)
    return res


def stage_radii(st: Stage):
    cfg = st.cfg
    c = cfg.section("radii")
    target = str(c.get("target", "inclusions"))
    cells = c.get("cells")
    if cells is None:
        mid = int(cfg.window.size // 2)
        cells = [[mid] * cfg.window.dim]
    root = _root(cfg).child("realization", 0)
    rows, ok = [], True
    for i, z in enumerate(cells):
        seed2 = SeedKey(cfg.seed).child("resample", i).key
        s = action_radius(cfg.model, cfg.window, tuple(int(v) for v in z), root, seed2, target, cfg.rho)
        good = agree_outside(cfg.model, cfg.window, s, root, cfg.rho)
        ok &= good
        rows.append((*s.z, s.R, int(s.censored), s.changed, int(good)))
    hdr = [f"z{a}" for a in range(cfg.window.dim)] + ["R", "censored", "changed", "agree_outside"]
    _write_csv(st.path("radii.csv"), hdr, rows)
    st.check("agree_outside", ok)
    return {"cells": len(rows)}


def stage_fatten(st: Stage):
    cfg = st.cfg
    c = cfg.section("fatten")
    incl = _realize(cfg)
    dec = decompose(incl, cfg.rho)
    rf = cfg.rho / 2
    pitch = float(c.get("pitch", rf / 10))
    box = float(c.get("box", cfg.window.size))
    ctr = cfg.window.center
    sel = [k for k, m in enumerate(dec.clusters)
           if np.all(np.abs(incl.centers[m] - ctr) <= box / 2, axis=1).any()]
    fcs = fatten_decomposition(incl, dec, rf, pitch, sel)
    rows, ok = [], True
    for k, fc in fcs:
        rep = verify_ball_conditions(fc)
        grad = max_gradient(build_cutoff(fc), pitch)
        good = rep["all"] and grad <= 4 / rf
        ok &= good
        rows.append((k, len(dec.clusters[k]), int(rep["all"]), grad, int(good)))
    dj = disjoint(fcs, tol_cells=1)
    _write_csv(st.path("clusters.csv"), ["cluster", "size", "ball_conditions", "max_gradient", "ok"], rows)
    if fcs and cfg.window.dim == 2:
        fc = fcs[0][1]
        write_pgm(st.path("first_cluster.pgm"), fc.J.astype(np.uint8) + fc.J1 + fc.J2)
    st.check("ball_conditions", ok)
    st.check("disjoint", dj["disjoint"])
    return {"clusters": len(fcs), "overlaps": len(dj["overlaps"])}


def _synthetic(geo, n, contrast):
    x = (np.arange(n) + 0.5) / n
    if geo == "laminate":
        lab = np.broadcast_to((x < 0.5)[:, None], (n, n))
    elif geo == "checkerboard":
        lab = (x < 0.5)[:, None] ^ (x < 0.5)[None, :]
    else:   # stripe spanning the cell along the first axis
        lab = np.broadcast_to((np.abs(x - 0.5) < 0.125)[None, :], (n, n))
    return assemble_field(np.ascontiguousarray(lab), contrast, n)


def stage_effcoef(st: Stage):
    cfg = st.cfg
    c = cfg.section("effcoef")
    n = int(c.get("n", 64))
    geo = c.get("geometry", "inclusions")
    tol = float(c.get("tol", 1e-10))
    contrasts = [float(v) for v in c.get("contrasts", [c.get("contrast", 100.0)])]
    if geo == "inclusions":
        incl = _realize(cfg)
        make = lambda lam: assemble_field(incl, lam, n, c.get("truncation"))   # noqa: E731
    else:
        incl = None
        make = lambda lam: _synthetic(geo, n, lam)                               # noqa: E731
    sweep = contrast_sweep(make, contrasts, tol)
    bounds = []
    d = cfg.window.dim if incl is not None else 2
    trial_phis = None
    if incl is not None and cfg.rho is not None:
        trial_phis = [trial_field(incl, n, cfg.rho, np.eye(d)[k])[0] for k in range(d)]
    for lam, M in zip(contrasts, sweep["tensors"]):
        f = make(lam)
        tb = None
        if trial_phis is not None and all(p is not None for p in trial_phis):
            tb = [energy(f, p, np.eye(d)[k]) for k, p in enumerate(trial_phis)]
        bounds.append(bounds_check(f, M, tb))
    _dump_json(st.path("sweep.json"), sweep | {"bounds": bounds, "geometry": geo, "n": n})
    _write_csv(st.path("sweep.csv"), ["contrast", "largest_eigenvalue"], list(zip(contrasts, sweep["largest"])))
    st.check("bounds", all(b["ok"] for b in bounds))
    return {"largest": sweep["largest"]}


RUNNERS = {"generate": stage_generate, "clusters": stage_clusters, "tail": stage_tail,
           "connectivity": stage_connectivity, "certify": stage_certify, "radii": stage_radii,
           "fatten": stage_fatten, "effcoef": stage_effcoef}


def run_experiment(cfg: ExperimentConfig) -> dict:
    """Run the configured stages; write artifacts and ``manifest.json``.  Returns the manifest."""
    os.makedirs(cfg.out, exist_ok=True)
    manifest = {"config": cfg.raw | {"seed": cfg.seed, "replicates": cfg.replicates, "workers": cfg.workers,
                                     "stages": cfg.stages},
                "code_version": code_version(), "stages": [], "seeds": {"root": cfg.seed,
                                                                      "replicates": [cfg.first,
                                                                                     cfg.first + cfg.replicates]},
                "status": "ok"}
    manifest["config"].pop("out", None)
    manifest["config"].pop("workers", None)
    for name in cfg.stages:
        st = Stage(cfg, name)
        t0 = time.perf_counter()
        rec = {"stage": name}
        try:
            rec["summary"] = RUNNERS[name](st)
            rec["checks"] = st.checks
            if not all(st.checks.values()):
                rec["status"] = "invariant_failure"
                manifest["status"] = "invariant_failure"
            else:
                rec["status"] = "ok"
        except Exception as e:   # recorded in the partial manifest
            rec["status"] = "failed"
            rec["error"] = f"{type(e).__name__}: {e}"
            manifest["status"] = "failed"
        rec["wall_clock"] = time.perf_counter() - t0
        rec["files"] = [{"path": os.path.basename(p), "sha256": sha256(p)} for p in st.files if os.path.exists(p)]
        manifest["stages"].append(rec)
        if rec["status"] == "failed":
            break
    _dump_json(os.path.join(cfg.out, "manifest.json"), manifest)
    return manifest


# --------------------------------------------------------------------------
# merging


def _load_estimate(manifest_path: str):
    with open(manifest_path) as fh:
        man = json.load(fh)
    base = os.path.dirname(manifest_path)
    out = []
    for rec in man["stages"]:
        for f in rec.get("files", []):
            if f["path"].endswith("_estimate.json"):
                with open(os.path.join(base, f["path"])) as fh:
                    d = json.load(fh)
                out.append(TailEstimate.from_dict(d) if d["kind"] == "tail" else ConnectivityEstimate.from_dict(d))
    if len(out) != 1:
        raise ValueError(f"{manifest_path}: expected exactly one tail or connectivity estimate, found {len(out)}")
    return out[0]


def merge_results(manifests: list):
    """Pool tail or connectivity estimates from manifests with disjoint seed ranges."""
    ests = [m if isinstance(m, (TailEstimate, ConnectivityEstimate)) else _load_estimate(m) for m in manifests]
    if not ests:
        raise ValueError("nothing to merge")
    kinds = {type(e) for e in ests}
    if len(kinds) != 1:
        raise ValueError("cannot merge estimates of different kinds")
    fn = merge_tails if isinstance(ests[0], TailEstimate) else merge_connectivity
    acc = ests[0]
    for e in ests[1:]:
        acc = fn(acc, e)
    return acc


# --------------------------------------------------------------------------
# entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="contperc", description="Continuum percolation and stiff-inclusion experiments.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in STAGES + ("run",):
        s = sub.add_parser(name, help=f"run the {name} stage" if name != "run" else "run the configured stage list")
        s.add_argument("--config", required=True, help="TOML config or a manifest.json to replay")
        s.add_argument("--seed", type=int)
        s.add_argument("--replicates", type=int)
        s.add_argument("--workers", type=int)
        s.add_argument("--out")
    m = sub.add_parser("merge", help="pool estimates from several manifests")
    m.add_argument("manifests", nargs="+")
    m.add_argument("--out", required=True)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "merge":
        try:
            est = merge_results(args.manifests)
        except (ValueError, OSError, KeyError) as e:
            print(f"merge refused: {e}", file=sys.stderr)
            return EXIT_USAGE
        os.makedirs(args.out, exist_ok=True)
        est.to_csv(os.path.join(args.out, "merged.csv"))
        _dump_json(os.path.join(args.out, "merged_estimate.json"), est.to_dict())
        return EXIT_OK
    try:
        raw = load_config(args.config)
        over = {"seed": args.seed, "replicates": args.replicates, "workers": args.workers, "out": args.out}
        if args.command != "run":
            over["stages"] = [args.command]
        cfg = parse_config(raw, over)
    except ConfigError as e:
        print(f"invalid config: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, tomllib.TOMLDecodeError, json.JSONDecodeError) as e:
        print(f"cannot read config: {e}", file=sys.stderr)
        return EXIT_USAGE
    man = run_experiment(cfg)
    for rec in man["stages"]:
        print(f"{rec['stage']}: {rec['status']}")
    return EXIT_OK if man["status"] == "ok" else EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
