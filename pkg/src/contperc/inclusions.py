"""Inclusion sets built from point samples: Boolean, hardcore balls, Voronoi models."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import shapely
from scipy.spatial import QhullError, Voronoi

from .geometry import Ball, Compound, Polytope, RasterShape, Shape, Window, set_diameter
from .point_processes import PointSample, ProcessConfig, min_pair_distance, sample_process
from .rng import SeedKey, counter_uniforms, mix64


@dataclass(frozen=True)
class RadiusLaw:
    """Radius distribution: dirac(r0), pareto(exponent, scale) or weibull(shape, scale)."""

    variant: str
    scale: float = 1.0
    exponent: float = 0.0

    def __post_init__(self):
        if self.variant not in ("dirac", "pareto", "weibull"):
            raise ValueError(f"unknown radius law {self.variant!r}")
        if not self.scale > 0:
            raise ValueError("radius scale must be positive")
        if self.variant != "dirac" and not self.exponent > 0:
            raise ValueError("exponent must be positive")

    @classmethod
    def dirac(cls, r0):
        return cls("dirac", r0)

    @classmethod
    def pareto(cls, exponent, scale=1.0):
        return cls("pareto", scale, exponent)

    @classmethod
    def weibull(cls, shape, scale=1.0):
        return cls("weibull", scale, shape)

    def check_dim(self, d: int):
        if self.variant == "pareto" and not self.exponent > d:
            raise ValueError(f"pareto exponent must exceed the dimension {d}")

    def quantile(self, u) -> np.ndarray:
        """Radius as a function of a uniform in (0, 1), decreasing in u for the tails."""
        u = np.asarray(u, dtype=float)
        if self.variant == "dirac":
            return np.full(u.shape, self.scale)
        if self.variant == "pareto":
            return self.scale * u ** (-1.0 / self.exponent)
        return self.scale * (-np.log(u)) ** (1.0 / self.exponent)

    def survival(self, r) -> np.ndarray:
        r = np.asarray(r, dtype=float)
        if self.variant == "dirac":
            return (r < self.scale).astype(float)
        if self.variant == "pareto":
            return np.where(r < self.scale, 1.0, (np.maximum(r, self.scale) / self.scale) ** -self.exponent)
        return np.exp(-(np.maximum(r, 0) / self.scale) ** self.exponent)

    def to_dict(self):
        return {"variant": self.variant, "scale": self.scale, "exponent": self.exponent}


@dataclass(eq=False)
class InclusionSet:
    shapes: list
    window: Window
    generator: dict = field(default_factory=dict)
    seed: SeedKey = None
    boundary: np.ndarray = None
    report: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.boundary is None:
            self.boundary = np.zeros(len(self.shapes), dtype=bool)
        self.boundary = np.asarray(self.boundary, dtype=bool)

    def __len__(self):
        return len(self.shapes)

    @cached_property
    def all_balls(self) -> bool:
        return all(isinstance(s, Ball) for s in self.shapes)

    @cached_property
    def centers(self) -> np.ndarray:
        return np.array([s.anchor for s in self.shapes]).reshape(-1, self.window.dim)

    @cached_property
    def radii(self) -> np.ndarray:
        return np.array([s.radius for s in self.shapes if isinstance(s, Ball)])

    @cached_property
    def diameters(self) -> np.ndarray:
        if self.all_balls:
            return 2.0 * self.radii
        return np.array([s.diameter() for s in self.shapes])

    def to_dict(self) -> dict:
        return {"window": self.window.to_dict(), "generator": self.generator,
                "seed": self.seed.to_dict() if self.seed else None,
                "boundary": self.boundary.tolist(),
                "shapes": [shape_to_dict(s) for s in self.shapes]}

    @classmethod
    def from_dict(cls, d) -> "InclusionSet":
        return cls([shape_from_dict(s) for s in d["shapes"]], Window.from_dict(d["window"]),
                   d.get("generator", {}), SeedKey.from_dict(d["seed"]) if d.get("seed") else None,
                   np.array(d.get("boundary", []), dtype=bool) if d.get("boundary") else None)

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True)


def shape_to_dict(s: Shape) -> dict:
    if isinstance(s, Ball):
        return {"type": "ball", "center": s.center.tolist(), "radius": s.radius}
    if isinstance(s, Polytope):
        return {"type": "polytope", "vertices": s.vertices.tolist()}
    if isinstance(s, Compound):
        return {"type": "compound", "parts": [shape_to_dict(p) for p in s.parts]}
    if isinstance(s, RasterShape):
        return {"type": "raster", "cells": s.cells.tolist(), "pitch": s.pitch, "origin": s.origin.tolist()}
    raise TypeError(type(s))


def shape_from_dict(d) -> Shape:
    t = d["type"]
    if t == "ball":
        return Ball(d["center"], d["radius"])
    if t == "polytope":
        return Polytope(d["vertices"])
    if t == "compound":
        return Compound([shape_from_dict(p) for p in d["parts"]])
    if t == "raster":
        return RasterShape(d["cells"], d["pitch"], d["origin"])
    raise ValueError(f"unknown shape type {t!r}")


def point_uniforms(points: PointSample, column: int, seed: SeedKey | None) -> np.ndarray:
    """Per-point uniforms derived from the point's own stream (and optionally a seed)."""
    u = points.aux[:, column]
    if seed is None:
        return u
    bits = (u * 2.0 ** 53).astype(np.uint64)
    return counter_uniforms(mix64(np.uint64(seed.key) ^ bits), np.full(len(u), column, dtype=np.uint64))


def _ball_boundary(centers, radii, window: Window):
    if window.periodic or len(centers) == 0:
        return np.zeros(len(centers), dtype=bool)
    return window.boundary_distance(centers) < radii


# --------------------------------------------------------------------------
# ball models


def boolean_model(points: PointSample, law: RadiusLaw, seed: SeedKey | None = None) -> InclusionSet:
    """One ball per point, iid radii from ``law``; overlaps allowed."""
    law.check_dim(points.window.dim)
    r = law.quantile(point_uniforms(points, 0, seed))
    shapes = [Ball(c, ri) for c, ri in zip(points.points, r)]
    return InclusionSet(shapes, points.window, {"model": "boolean", "law": law.to_dict()}, seed or points.seed,
                        _ball_boundary(points.points, r, points.window))


def hardcore_balls(points: PointSample, radius: float) -> InclusionSet:
    """Balls of a fixed radius on points that are pairwise >= 2*radius apart."""
    if not radius > 0:
        raise ValueError("radius must be positive")
    P = points.points
    if len(P) > 1 and min_pair_distance(P, points.window) < 2 * radius * (1 - 1e-12):
        from scipy.spatial import cKDTree
        i, j = next(iter(sorted(cKDTree(P).query_pairs(np.nextafter(2 * radius, 0)))))
        raise ValueError(f"points {i} and {j} are closer than {2 * radius}: {P[i].tolist()}, {P[j].tolist()}")
    shapes = [Ball(c, radius) for c in P]
    return InclusionSet(shapes, points.window, {"model": "hardcore_balls", "radius": radius}, points.seed,
                        _ball_boundary(P, np.full(len(P), radius), points.window))


# --------------------------------------------------------------------------
# Voronoi models (d = 2)


@dataclass
class VoronoiCells:
    polygons: list          # clipped cell polygons (shapely), one per site
    adjacency: np.ndarray   # (m, 2) site pairs sharing an edge of positive length
    touches: np.ndarray     # cell meets the window boundary
    report: dict


def voronoi_cells(points: PointSample, window: Window) -> VoronoiCells:
    if window.dim != 2:
        raise ValueError("Voronoi models are restricted to d = 2")
    P = points.points
    n = len(P)
    if n == 0:
        raise ValueError("Voronoi model needs at least one point")
    c, L = window.center, 4.0 * window.size * np.sqrt(2)
    dummies = c + L * np.array([[1, 0], [-1, 0], [0, 1], [0, -1]])
    sites = np.vstack([P, dummies])
    report = {"joggled": False}
    try:
        vor = Voronoi(sites)
    except QhullError:
        vor = Voronoi(sites, qhull_options="Qbb Qc Qz QJ")
        report["joggled"] = True
    box = shapely.box(0, 0, window.size, window.size)
    polys = []
    for i in range(n):
        reg = vor.regions[vor.point_region[i]]
        if -1 in reg or len(reg) < 3:
            raise RuntimeError("unbounded Voronoi region for an interior site")
        polys.append(shapely.Polygon(vor.vertices[reg]).convex_hull.intersection(box))
    # vertices shared by more than three ridges come from cocircular sites
    deg = np.bincount(np.concatenate([np.asarray(r) for r in vor.ridge_vertices if -1 not in r]),
                      minlength=len(vor.vertices))
    report["cocircular_vertices"] = int((deg > 3).sum())
    rp = vor.ridge_points
    rp = rp[(rp < n).all(axis=1)]
    adj = [(i, j) for i, j in rp if polys[i].intersection(polys[j]).length > 1e-12]
    boundary = box.exterior
    touches = np.array([p.intersection(boundary).length > 1e-12 for p in polys])
    return VoronoiCells(polys, np.array(adj, dtype=np.int64).reshape(-1, 2), touches, report)


def _components(n, pairs, selected):
    parent = np.arange(n)

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for i, j in pairs:
        if selected[i] and selected[j]:
            a, b = find(i), find(j)
            if a != b:
                parent[max(a, b)] = min(a, b)
    groups: dict = {}
    for i in np.flatnonzero(selected):
        groups.setdefault(find(i), []).append(i)
    return [groups[k] for k in sorted(groups)]


def _select_cells(cells: VoronoiCells, selected, window, generator, seed) -> InclusionSet:
    shapes, flags = [], []
    for members in _components(len(cells.polygons), cells.adjacency, selected):
        parts = [Polytope(np.asarray(cells.polygons[i].exterior.coords)[:-1]) for i in members]
        shapes.append(parts[0] if len(parts) == 1 else Compound(parts))
        flags.append(bool(cells.touches[members].any()))
    inc = InclusionSet(shapes, window, generator, seed, np.array(flags, dtype=bool))
    inc.report = dict(cells.report, selected_cells=int(np.sum(selected)), inclusions=len(shapes))
    return inc


def voronoi_marked(points: PointSample, q: float, window: Window, seed: SeedKey | None = None) -> InclusionSet:
    """Bernoulli(q)-marked Voronoi cells; adjacent marked cells merge into one inclusion."""
    if not 0 <= q <= 1:
        raise ValueError("q must be a probability")
    cells = voronoi_cells(points, window)
    selected = point_uniforms(points, 1, seed) < q
    return _select_cells(cells, selected, window, {"model": "voronoi_marked", "q": q}, seed or points.seed)


def cell_diameters(cells: VoronoiCells) -> np.ndarray:
    return np.array([set_diameter([Polytope(np.asarray(p.exterior.coords)[:-1])]) for p in cells.polygons])


def voronoi_threshold(points: PointSample, lam_plus: float, lam_minus: float, window: Window):
    """Unions of cells with diameter > lam_plus and with diameter < lam_minus."""
    cells = voronoi_cells(points, window)
    diam = cell_diameters(cells)
    plus = _select_cells(cells, diam > lam_plus, window,
                         {"model": "voronoi_plus", "threshold": lam_plus}, points.seed)
    minus = _select_cells(cells, diam < lam_minus, window,
                          {"model": "voronoi_minus", "threshold": lam_minus}, points.seed)
    return plus, minus


# --------------------------------------------------------------------------
# diagnostics


def diagnostics(incl: InclusionSet, thresholds=(1.0, 2.0, 4.0, 8.0), probes: int = 256,
                seed: SeedKey | None = None) -> dict:
    """Empirical local finiteness (inclusions hitting unit balls) and diameter tail."""
    from .geometry import point_shape_distance
    W = incl.window
    g = (seed or SeedKey(0)).generator()
    lo, hi = W.guard, W.size - W.guard
    X = g.uniform(lo, hi, size=(probes, W.dim))
    if len(incl) == 0:
        counts = np.zeros(probes, dtype=int)
        tail = [0.0] * len(thresholds)
    else:
        if incl.all_balls:
            dist = np.linalg.norm(X[:, None, :] - incl.centers[None], axis=-1) - incl.radii[None]
            counts = (dist < 1.0).sum(axis=1)
        else:
            counts = np.array([sum(point_shape_distance(x, s) < 1.0 for s in incl.shapes) for x in X])
        tail = [float(np.mean(incl.diameters > t)) for t in thresholds]
    return {"hits_unit_ball_mean": float(counts.mean()), "hits_unit_ball_max": int(counts.max()),
            "diameter_thresholds": list(thresholds), "diameter_survival": tail, "count": len(incl)}


# --------------------------------------------------------------------------
# model specs


@dataclass(frozen=True)
class ModelSpec:
    """Point process plus inclusion rule; ``realize`` builds one inclusion set."""

    process: ProcessConfig
    inclusion: str = "boolean"
    law: RadiusLaw = None
    radius: float = 0.5
    q: float = 0.5
    threshold: float = 1.0

    def __post_init__(self):
        kinds = ("boolean", "hardcore_balls", "voronoi_marked", "voronoi_plus", "voronoi_minus")
        if self.inclusion not in kinds:
            raise ValueError(f"unknown inclusion model {self.inclusion!r}")
        if self.inclusion == "boolean" and self.law is None:
            raise ValueError("boolean model needs a radius law")

    def points(self, window: Window, seed: SeedKey, overrides=None) -> PointSample:
        return sample_process(self.process, window, seed.child("points"), overrides)

    def realize(self, window: Window, seed: SeedKey, overrides=None) -> InclusionSet:
        pts = self.points(window, seed, overrides)
        mseed = seed.child("marks")
        if self.inclusion == "boolean":
            out = boolean_model(pts, self.law, mseed)
        elif self.inclusion == "hardcore_balls":
            out = hardcore_balls(pts, self.radius)
        elif self.inclusion == "voronoi_marked":
            out = voronoi_marked(pts, self.q, window, mseed)
        elif self.inclusion == "voronoi_plus":
            out = voronoi_threshold(pts, self.threshold, np.inf, window)[0]
        else:
            out = voronoi_threshold(pts, -np.inf, self.threshold, window)[1]
        out.seed = seed
        return out

    def to_dict(self) -> dict:
        return {"process": {"intensity": self.process.intensity, "hardcore": self.process.hardcore,
                            "variant": self.process.variant},
                "inclusion": self.inclusion, "law": self.law.to_dict() if self.law else None,
                "radius": self.radius, "q": self.q, "threshold": self.threshold}

    @classmethod
    def from_dict(cls, d) -> "ModelSpec":
        p = d["process"]
        law = d.get("law")
        return cls(ProcessConfig(float(p["intensity"]), float(p.get("hardcore", 1.0)), p.get("variant", "poisson")),
                   d.get("inclusion", "boolean"),
                   RadiusLaw(law["variant"], float(law.get("scale", 1.0)), float(law.get("exponent", 0.0))) if law else None,
                   float(d.get("radius", 0.5)), float(d.get("q", 0.5)), float(d.get("threshold", 1.0)))
