"""Seeded point processes: Poisson, Matérn I/II/III thinnings, random parking.

Poisson points are generated cube by cube: the unit lattice cube
``Q(z) = z + [-1/2, 1/2)^d`` (clipped to the window) owns its own counter
stream, so resampling one cube leaves every other cube's raw points intact.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree
from scipy.stats import poisson

from .geometry import Window
from .rng import SeedKey, counter_uniforms, lattice_keys

N_AUX = 2  # extra per-point uniforms (radius draw, Bernoulli mark, ...)
VARIANTS = ("poisson", "matern1", "matern2", "matern3", "parking")


class ParkingError(RuntimeError):
    """Random parking hit its iteration cap before saturation."""


@dataclass(frozen=True)
class ProcessConfig:
    intensity: float
    hardcore: float = 1.0
    variant: str = "poisson"

    def __post_init__(self):
        if not self.intensity > 0:
            raise ValueError("intensity must be positive")
        if not self.hardcore > 0:
            raise ValueError("hardcore distance must be positive")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown process variant {self.variant!r}")


@dataclass(eq=False)
class PointSample:
    points: np.ndarray
    marks: np.ndarray
    window: Window
    seed: SeedKey
    aux: np.ndarray = None
    cubes: np.ndarray = None
    config: ProcessConfig = None
    overrides: dict = field(default_factory=dict)
    raw: "PointSample" = None
    report: dict = field(default_factory=dict)

    def __post_init__(self):
        d = self.window.dim
        self.points = np.asarray(self.points, dtype=float).reshape(-1, d)
        self.marks = np.asarray(self.marks, dtype=float).reshape(-1)
        n = len(self.points)
        if self.aux is None:
            self.aux = np.full((n, N_AUX), 0.5)
        if self.cubes is None:
            self.cubes = np.floor(self.points + 0.5).astype(np.int64)

    def __len__(self):
        return len(self.points)

    def subset(self, keep) -> "PointSample":
        keep = np.asarray(keep)
        return replace(self, points=self.points[keep], marks=self.marks[keep], aux=self.aux[keep],
                       cubes=self.cubes[keep], report=dict(self.report))

    def to_csv(self, path) -> None:
        cols = ["x", "y", "z"][: self.window.dim] + ["mark"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for p, m in zip(self.points, self.marks):
                w.writerow([repr(float(c)) for c in p] + [repr(float(m))])


# --------------------------------------------------------------------------
# cube-localized Poisson


def lattice_range(window: Window) -> np.ndarray:
    """Integer sites z whose cube Q(z) meets the window."""
    m = int(np.ceil(window.size + 0.5))
    ax = np.arange(m)
    grids = np.meshgrid(*([ax] * window.dim), indexing="ij")
    return np.stack([g.ravel() for g in grids], axis=1)


def cube_keys(seed: SeedKey, z: np.ndarray, overrides: dict) -> np.ndarray:
    keys = lattice_keys(seed.key, z)
    for site, s2 in overrides.items():
        hit = np.all(z == np.asarray(site), axis=1)
        if hit.any():
            keys[hit] = lattice_keys(SeedKey(s2, seed.path).key, np.asarray(site)[None])[0]
    return keys


def poisson_in_boxes(keys, lo, hi, intensity):
    """Poisson points in boxes [lo, hi) from per-box keys; returns points, marks, aux, box index."""
    d = lo.shape[1]
    vol = np.prod(hi - lo, axis=1)
    u0 = counter_uniforms(keys, np.zeros(len(keys), dtype=np.uint64))
    counts = poisson.ppf(u0, intensity * vol).astype(np.int64)
    counts[vol <= 0] = 0
    box = np.repeat(np.arange(len(keys)), counts)
    j = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
    stride = d + 1 + N_AUX
    base = 1 + j.astype(np.uint64) * np.uint64(stride)
    u = np.stack([counter_uniforms(keys[box], base + np.uint64(k)) for k in range(stride)], axis=1)
    u = u.reshape(-1, stride)
    pts = lo[box] + u[:, :d] * (hi - lo)[box]
    return pts, u[:, d], u[:, d + 1:], box


def sample_poisson(cfg: ProcessConfig, window: Window, seed: SeedKey, overrides=None) -> PointSample:
    """Cube-localized homogeneous Poisson process on the window."""
    overrides = dict(overrides or {})
    z = lattice_range(window)
    lo = np.clip(z - 0.5, 0.0, window.size)
    hi = np.clip(z + 0.5, 0.0, window.size)
    keys = cube_keys(seed, z, overrides)
    pts, marks, aux, box = poisson_in_boxes(keys, lo, hi, cfg.intensity)
    pcfg = ProcessConfig(cfg.intensity, cfg.hardcore, "poisson")
    return PointSample(pts, marks, window, seed, aux, z[box], pcfg, overrides)


# --------------------------------------------------------------------------
# Matérn thinnings


def _order(points, marks):
    """Rank of each point in the total order (mark, then lexicographic location)."""
    keys = [points[:, a] for a in range(points.shape[1] - 1, -1, -1)] + [marks]
    order = np.lexsort(keys)
    rank = np.empty(len(marks), dtype=np.int64)
    rank[order] = np.arange(len(marks))
    return order, rank


def _close_pairs(points, hardcore, window: Window) -> np.ndarray:
    """Pairs (i, j), i < j, at distance strictly below ``hardcore``."""
    if len(points) < 2:
        return np.zeros((0, 2), dtype=np.int64)
    r = np.nextafter(hardcore, 0.0)
    if window.periodic:
        tree = cKDTree(np.mod(points, window.size), boxsize=window.size)
    else:
        tree = cKDTree(points)
    return tree.query_pairs(r, output_type="ndarray")


def thin_matern(base: PointSample, variant: int, hardcore: float) -> PointSample:
    """Matérn hardcore thinning of a marked sample (variants 1, 2, 3)."""
    if variant not in (1, 2, 3):
        raise ValueError("Matérn variant must be 1, 2 or 3")
    if not hardcore > 0:
        raise ValueError("hardcore distance must be positive")
    n = len(base)
    ties = n - len(np.unique(base.marks))
    pairs = _close_pairs(base.points, hardcore, base.window)
    order, rank = _order(base.points, base.marks)
    keep = np.ones(n, dtype=bool)
    if variant == 1:
        keep[pairs.ravel()] = False
    elif variant == 2:
        later = np.where(rank[pairs[:, 0]] > rank[pairs[:, 1]], pairs[:, 0], pairs[:, 1])
        keep[later] = False
    else:
        nbrs = [[] for _ in range(n)]
        for i, j in pairs:
            nbrs[i].append(j)
            nbrs[j].append(i)
        keep[:] = False
        for i in order:
            if not any(keep[j] for j in nbrs[i]):
                keep[i] = True
    out = base.subset(keep)
    out.raw = base.raw if base.raw is not None else base
    out.config = ProcessConfig(base.config.intensity if base.config else 1.0, hardcore, f"matern{variant}")
    out.report = {"variant": variant, "hardcore": hardcore, "raw_count": n, "mark_ties": ties}
    if ties:
        out.report["tie_break"] = "lexicographic location"
    return out


# --------------------------------------------------------------------------
# random parking


def _probe_grid(window: Window, pitch: float):
    m = int(np.ceil(window.size / pitch - 1e-9))
    ax = (np.arange(m) + 0.5) * (window.size / m)
    grids = np.meshgrid(*([ax] * window.dim), indexing="ij")
    return np.stack([g.ravel() for g in grids], axis=1), window.size / m


def admissible_probes(points, window: Window, hardcore: float, pitch: float):
    """Probe centers (grid of the given pitch) at distance >= hardcore from every point."""
    probes, h = _probe_grid(window, pitch)
    if len(points) == 0:
        return probes, h
    if window.periodic:
        tree = cKDTree(np.mod(points, window.size), boxsize=window.size)
    else:
        tree = cKDTree(points)
    dist, _ = tree.query(probes, distance_upper_bound=hardcore)
    return probes[dist >= hardcore], h


class _HashGrid:
    def __init__(self, window: Window, cell: float):
        self.window = window
        self.m = max(1, int(window.size // cell))
        self.cell = window.size / self.m
        self.buckets: dict = {}

    def _cell(self, p):
        return tuple(np.minimum((p // self.cell).astype(int), self.m - 1))

    def near(self, p, r) -> bool:
        c = np.array(self._cell(p))
        S = self.window.size
        for off in np.ndindex(*([3] * len(c))):
            q = c + np.array(off) - 1
            if self.window.periodic:
                q = np.mod(q, self.m)
            for x in self.buckets.get(tuple(q), ()):
                v = x - p
                if self.window.periodic:
                    v -= S * np.round(v / S)
                if v @ v < r * r:
                    return True
        return False

    def add(self, p):
        self.buckets.setdefault(self._cell(p), []).append(p)


def random_parking(window: Window, hardcore: float, seed: SeedKey, intensity: float = 1.0,
                   overrides=None, max_epochs: int = 500) -> PointSample:
    """Random sequential parking to saturation (Matérn III run over arrival epochs).

    Epoch 0 is a Poisson batch on the whole window; epoch e > 0 draws fresh
    arrivals, one per probe cell on average, in the probe cells whose center is
    still admissible.  Marks are offset by the epoch index so the global
    processing order is the arrival order.  Saturation means the probe scan
    (pitch hardcore/8) finds no admissible center.
    """
    if not hardcore > 0:
        raise ValueError("hardcore distance must be positive")
    overrides = dict(overrides or {})
    pitch = hardcore / 8.0
    grid = _HashGrid(window, hardcore)
    acc_pts, acc_marks, acc_aux = [], [], []
    arrivals = 0
    for epoch in range(max_epochs):
        ekey = seed.child("epoch", epoch)
        if epoch == 0:
            z = lattice_range(window)
            lo = np.clip(z - 0.5, 0.0, window.size)
            hi = np.clip(z + 0.5, 0.0, window.size)
            keys = cube_keys(ekey, z, overrides)
            lam = intensity
        else:
            probes, h = admissible_probes(np.array(acc_pts).reshape(-1, window.dim), window, hardcore, pitch)
            if len(probes) == 0:
                break
            cells = np.floor(probes / h).astype(np.int64)
            lo, hi = cells * h, (cells + 1) * h
            keys = lattice_keys(ekey.key, cells)
            owner = np.floor(probes + 0.5).astype(np.int64)
            for site, s2 in overrides.items():
                hit = np.all(owner == np.asarray(site), axis=1)
                if hit.any():
                    keys[hit] = lattice_keys(SeedKey(s2, ekey.path).key, cells[hit])
            lam = 1.0 / h ** window.dim
        pts, marks, aux, _ = poisson_in_boxes(keys, lo, hi, lam)
        arrivals += len(pts)
        order, _ = _order(pts, marks)
        for i in order:
            p = pts[i]
            if not grid.near(p, hardcore):
                grid.add(p)
                acc_pts.append(p)
                acc_marks.append(marks[i] + epoch)
                acc_aux.append(aux[i])
    else:
        probes, _ = admissible_probes(np.array(acc_pts).reshape(-1, window.dim), window, hardcore, pitch)
        if len(probes):
            raise ParkingError(f"random parking not saturated after {max_epochs} epochs "
                               f"({len(probes)} admissible probes left)")
    pts = np.array(acc_pts).reshape(-1, window.dim)
    out = PointSample(pts, np.array(acc_marks), window, seed,
                      np.array(acc_aux).reshape(-1, N_AUX), None,
                      ProcessConfig(intensity, hardcore, "parking"), overrides)
    out.report = {"epochs": epoch + 1, "arrivals": arrivals, "saturated": True,
                  "probe_pitch": pitch}
    return out


# --------------------------------------------------------------------------
# dispatch and resampling


def sample_process(cfg: ProcessConfig, window: Window, seed: SeedKey, overrides=None) -> PointSample:
    if cfg.variant == "parking":
        return random_parking(window, cfg.hardcore, seed, cfg.intensity, overrides)
    base = sample_poisson(cfg, window, seed, overrides)
    if cfg.variant == "poisson":
        return base
    out = thin_matern(base, int(cfg.variant[-1]), cfg.hardcore)
    out.config = cfg
    return out


def resample_cell(sample: PointSample, z, seed2: SeedKey | int) -> PointSample:
    """Regenerate the sample with cube Q(z)'s stream replaced by ``seed2``'s."""
    z = tuple(int(c) for c in np.atleast_1d(z))
    if len(z) != sample.window.dim:
        raise ValueError("lattice point has wrong dimension")
    sites = {tuple(s) for s in lattice_range(sample.window)}
    if z not in sites:
        raise ValueError(f"lattice point {z} outside window")
    s2 = seed2.seed if isinstance(seed2, SeedKey) else int(seed2)
    overrides = dict(sample.overrides)
    if s2 == sample.seed.seed:
        overrides.pop(z, None)
    else:
        overrides[z] = s2
    cfg = sample.config or ProcessConfig(1.0)
    return sample_process(cfg, sample.window, sample.seed, overrides)


def min_pair_distance(points, window: Window | None = None) -> float:
    points = np.atleast_2d(points)
    if len(points) < 2:
        return np.inf
    if window is not None and window.periodic:
        tree = cKDTree(np.mod(points, window.size), boxsize=window.size)
    else:
        tree = cKDTree(points)
    d, _ = tree.query(points, k=2)
    return float(d[:, 1].min())
