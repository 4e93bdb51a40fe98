"""Action radii by single-cube resampling, dependence radii, and their tail bound."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import quad
from scipy.spatial import cKDTree

from .clusters import close_pairs
from .connectivity import discretize, site_pitch
from .geometry import Window, mark_shapes
from .inclusions import InclusionSet, ModelSpec, boolean_model, shape_to_dict
from .point_processes import lattice_range
from .rng import SeedKey


@dataclass
class ActionRadiusSample:
    z: tuple
    R: float
    censored: bool
    seeds: tuple
    method: str = "closed"
    target: str = "inclusions"
    changed: int = 0


def _far(incl: InclusionSet, idx, z) -> np.ndarray:
    """Farthest distance from z to each listed inclusion."""
    out = np.empty(len(idx))
    for k, i in enumerate(idx):
        P, R = incl.shapes[i].extreme_points()
        out[k] = float((np.linalg.norm(P - z, axis=1) + R).max())
    return out


def _near_boundary(incl: InclusionSet, idx, guard) -> bool:
    W = incl.window
    for i in idx:
        P, R = incl.shapes[i].extreme_points()
        if np.any(W.boundary_distance(P) - R < guard):
            return True
    return False


def _shape_keys(incl: InclusionSet):
    return [json.dumps(shape_to_dict(s), sort_keys=True) for s in incl.shapes]


def _changed(a: InclusionSet, b: InclusionSet):
    ka, kb = _shape_keys(a), _shape_keys(b)
    sa, sb = set(ka), set(kb)
    return ([i for i, k in enumerate(ka) if k not in sb], [i for i, k in enumerate(kb) if k not in sa])


def _eta_extra(inc: InclusionSet, changed_idx, rho):
    """Unchanged inclusions within rho of a changed one (their contribution status may flip)."""
    if not changed_idx:
        return []
    pairs, _ = close_pairs(inc, rho)
    ch = set(changed_idx)
    out = set()
    for i, j in pairs:
        if i in ch and j not in ch:
            out.add(int(j))
        elif j in ch and i not in ch:
            out.add(int(i))
    return sorted(out)


def action_radius(spec: ModelSpec, window: Window, z, seed: SeedKey, seed2: SeedKey | int,
                  target: str = "inclusions", rho: float | None = None, method: str = "closed",
                  pitch: float | None = None) -> ActionRadiusSample:
    """Radius outside which resampling cube Q(z) leaves the configuration unchanged.

    ``target`` is ``inclusions`` (the inclusion set) or ``eta`` (the site field,
    needs ``rho``).  ``method``: ``closed`` uses changed shapes directly (the
    farthest point of every changed ball), ``raster`` measures the farthest
    differing raster cell.
    """
    if target not in ("inclusions", "eta"):
        raise ValueError("target must be 'inclusions' or 'eta'")
    if target == "eta" and rho is None:
        raise ValueError("the eta target needs rho")
    z = tuple(int(c) for c in z)
    s2 = seed2.seed if isinstance(seed2, SeedKey) else int(seed2)
    a = spec.realize(window, seed)
    b = spec.realize(window, seed, {z: s2})
    zc = np.asarray(z, dtype=float)
    ca, cb = _changed(a, b)
    if method == "raster":
        R, cens = _raster_radius(a, b, zc, target, rho, pitch, window)
        return ActionRadiusSample(z, R, cens, (seed.seed, s2), method, target, len(ca) + len(cb))
    if method != "closed":
        raise ValueError("method must be 'closed' or 'raster'")
    ia, ib = list(ca), list(cb)
    slack = 0.0
    if target == "eta":
        ia += _eta_extra(a, ca, rho)
        ib += _eta_extra(b, cb, rho)
        slack = site_pitch(rho, window.dim) * math.sqrt(window.dim)
    R = 0.0
    if ia or ib:
        R = float(max(_far(a, ia, zc).max(initial=0.0), _far(b, ib, zc).max(initial=0.0))) + slack
    cens = _near_boundary(a, ia, window.guard + slack) or _near_boundary(b, ib, window.guard + slack)
    return ActionRadiusSample(z, R, bool(cens), (seed.seed, s2), method, target, len(ca) + len(cb))


def _fields(a: InclusionSet, b: InclusionSet, target, rho, pitch, window):
    if target == "eta":
        fa, fb = discretize(a, rho), discretize(b, rho)
        return fa.values, fb.values, fa.pitch, fa.origin
    h = pitch or 0.05
    d = window.dim
    n = (int(math.ceil(window.size / h - 1e-9)),) * d
    ma = mark_shapes(np.zeros(n, dtype=bool), a.shapes, h)
    mb = mark_shapes(np.zeros(n, dtype=bool), b.shapes, h)
    return ma, mb, h, np.zeros(d)


def _cell_far(idx, h, origin, zc):
    lo = origin + h * idx - zc
    hi = lo + h
    return np.sqrt((np.maximum(np.abs(lo), np.abs(hi)) ** 2).sum(axis=1))


def _cell_near(idx, h, origin, zc):
    lo = origin + h * idx - zc
    hi = lo + h
    gap = np.maximum(0.0, np.maximum(lo, -hi))
    return np.sqrt((gap ** 2).sum(axis=1))


def _raster_radius(a, b, zc, target, rho, pitch, window):
    ma, mb, h, origin = _fields(a, b, target, rho, pitch, window)
    diff = np.argwhere(ma != mb)
    if len(diff) == 0:
        return 0.0, False
    R = float(_cell_far(diff, h, origin, zc).max())
    pts_lo = origin + h * diff
    bd = np.minimum(pts_lo, window.size - (pts_lo + h)).min(axis=1)
    return R, bool(np.any(bd < window.guard))


def agree_outside(spec: ModelSpec, window: Window, sample: ActionRadiusSample, seed: SeedKey,
                  rho: float | None = None, pitch: float | None = None) -> bool:
    """Raster check that both configurations agree on every cell lying outside B_R(z)."""
    a = spec.realize(window, seed)
    b = spec.realize(window, seed, {sample.z: sample.seeds[1]})
    ma, mb, h, origin = _fields(a, b, sample.target, rho, pitch, window)
    diff = np.argwhere(ma != mb)
    if len(diff) == 0:
        return True
    outside = _cell_near(diff, h, origin, np.asarray(sample.z, dtype=float)) > sample.R
    return not bool(outside.any())


# --------------------------------------------------------------------------
# action-radius maps for the Boolean model


def boolean_radius_map(spec: ModelSpec, window: Window, seed: SeedKey, seed2: SeedKey | int,
                       target: str = "inclusions", rho: float | None = None):
    """R^y for every lattice site y at once (Boolean model, closed form).

    Resampling Q(y) swaps the balls of Q(y) in the first configuration for
    those of Q(y) in the second; all other balls stay.  Returns sites and R.
    """
    if spec.inclusion != "boolean" or spec.process.variant != "poisson":
        raise ValueError("closed-form radius maps need a Poisson Boolean model")
    s2 = seed2.seed if isinstance(seed2, SeedKey) else int(seed2)
    sites = lattice_range(window)
    a = spec.realize(window, seed)
    # every cube resampled at once; radii keep the original marks stream, as a
    # single-cube override does
    b = boolean_model(spec.points(window, SeedKey(s2, seed.path)), spec.law, seed.child("marks"))
    m = int(np.ceil(window.size + 0.5))
    d = window.dim
    R = np.zeros(m ** d)

    def flat(c):
        return np.ravel_multi_index(tuple(c.T), (m,) * d)

    def contrib(inc):
        if len(inc) == 0:
            return
        cube = np.floor(inc.centers + 0.5).astype(np.int64)
        far = np.linalg.norm(inc.centers - cube, axis=1) + inc.radii
        np.maximum.at(R, flat(cube), far)

    contrib(a)
    contrib(b)
    if target == "eta":
        slack = site_pitch(rho, d) * math.sqrt(d)
        # unchanged balls of ``a`` within rho of a changed ball (of a or b) in cube y
        if len(a):
            ca = np.floor(a.centers + 0.5).astype(np.int64)
            pairs, _ = close_pairs(a, rho)
            for i, j in pairs:
                if flat(ca[i][None])[0] != flat(ca[j][None])[0]:
                    y_i, y_j = flat(ca[i][None])[0], flat(ca[j][None])[0]
                    R[y_i] = max(R[y_i], np.linalg.norm(a.centers[j] - ca[i]) + a.radii[j])
                    R[y_j] = max(R[y_j], np.linalg.norm(a.centers[i] - ca[j]) + a.radii[i])
            if len(b):
                cb = np.floor(b.centers + 0.5).astype(np.int64)
                tree = cKDTree(a.centers)
                reach = rho + a.radii.max() + b.radii
                for k in range(len(b)):
                    for j in tree.query_ball_point(b.centers[k], reach[k]):
                        gap = np.linalg.norm(a.centers[j] - b.centers[k]) - a.radii[j] - b.radii[k]
                        if gap < rho and flat(ca[j][None])[0] != flat(cb[k][None])[0]:
                            y = flat(cb[k][None])[0]
                            R[y] = max(R[y], np.linalg.norm(a.centers[j] - cb[k]) + a.radii[j])
        R = np.where(R > 0, R + slack, 0.0)
    return sites, R


# --------------------------------------------------------------------------
# dependence radius


@dataclass
class DependenceRadius:
    z: tuple
    r: float
    R: float
    sites: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    assumption: str = "sites outside the map have R = 0"


def dependence_radius(sites, R, z, r: float) -> DependenceRadius:
    """Smallest l >= 0 with R^y <= max(|z-y| - r, r + l - |z-y|) for every site y."""
    sites = np.atleast_2d(np.asarray(sites, dtype=float))
    R = np.asarray(R, dtype=float)
    zc = np.asarray(z, dtype=float)
    dist = np.linalg.norm(sites - zc, axis=1) if len(sites) else np.zeros(0)
    viol = R > dist - r
    need = R[viol] + dist[viol] - r
    val = float(max(0.0, need.max(initial=0.0)))
    # step past round-off so the defining constraint holds at the returned value
    while val > 0 and not np.all(R <= np.maximum(dist - r, r + val - dist)):
        val = float(np.nextafter(val, np.inf))
    contrib = sites[viol][need >= val] if val > 0 else np.zeros((0, sites.shape[1]))
    return DependenceRadius(tuple(np.asarray(z).tolist()), float(r), val, contrib)


def dependence_constraint_ok(sites, R, z, r, ell) -> bool:
    """Direct evaluation of the defining constraint at a given l."""
    sites = np.atleast_2d(np.asarray(sites, dtype=float))
    dist = np.linalg.norm(sites - np.asarray(z, dtype=float), axis=1)
    return bool(np.all(np.asarray(R) <= np.maximum(dist - r, r + ell - dist)))


# --------------------------------------------------------------------------
# tail bound via lattice shells


def action_tail(C0: float, exponent: float, d: int, model: str):
    """Tail function t -> min(1, P[R > t]) for the assumed action-radius law."""
    if model == "algebraic":
        p = exponent + d

        def T(t):
            t = np.asarray(t, dtype=float)
            with np.errstate(divide="ignore"):
                return np.where(t > 0, np.minimum(1.0, C0 * np.maximum(t, 1e-300) ** (-p)), 1.0)
    elif model == "stretched":
        def T(t):
            t = np.asarray(t, dtype=float)
            return np.where(t > 0, np.minimum(1.0, C0 * np.exp(-(np.maximum(t, 0) ** exponent) / C0)), 1.0)
    else:
        raise ValueError("model must be 'algebraic' or 'stretched'")
    return T


def _shells(Rcut: float, d: int):
    """Distinct squared norms |y|^2 <= Rcut^2 of lattice points and their multiplicities."""
    m = int(math.floor(Rcut))
    ax = np.arange(-m, m + 1)
    sq = ax ** 2
    tot = sq
    for _ in range(d - 1):
        tot = np.add.outer(tot, sq)
    tot = tot.ravel()
    tot = tot[tot <= Rcut * Rcut]
    vals, counts = np.unique(tot, return_counts=True)
    return np.sqrt(vals), counts


def radius_tail_bound(C0: float, exponent: float, d: int, r: float, ell: float,
                      model: str = "algebraic", cutoff: float | None = None) -> dict:
    """Union bound  sum_y min(1, P[R^y > max(|y| - r, r + l - |y|)]).

    Sites with |y| <= cutoff are summed shell by shell; the rest is bounded by
    the integral of the tail over the complement ball (each unit cube around y
    lies within |y| +- sqrt(d)/2).  Also returns C1 with
    value = C1 (1 + r/l)^(d-1) l^(-kappa) at the given (r, l).
    """
    if min(C0, exponent, r, ell) <= 0:
        raise ValueError("parameters must be positive")
    T = action_tail(C0, exponent, d, model)
    if cutoff is None:
        cutoff = r + ell + (60.0 if d == 2 else 25.0)
    rad, mult = _shells(cutoff, d)
    shell_terms = mult * T(np.maximum(rad - r, r + ell - rad))
    head = float(shell_terms.sum())
    h = math.sqrt(d) / 2
    lo = cutoff - h
    area = 2 * math.pi ** (d / 2) / math.gamma(d / 2)
    tail, _ = quad(lambda s: area * s ** (d - 1) * float(T(s - h - r)), lo, np.inf, limit=200)
    value = head + tail
    kappa = exponent
    scale = (1 + r / ell) ** (d - 1) * (ell ** (-kappa) if model == "algebraic" else 1.0)
    return {"value": value, "head": head, "remainder": tail, "C1": value / scale,
            "shells": len(rad), "cutoff": cutoff}
