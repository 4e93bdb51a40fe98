"""Envelopes, fattened cluster sets and their ball / disjointness checks on rasters.

All sets live on local grids aligned to the global lattice ``pitch * Z^d``.
Distances are Euclidean distance transforms between cell centers, so every
statement holds up to one pitch.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .geometry import RasterSet, Window, mark_shapes


def _face(d):
    return ndimage.generate_binary_structure(d, 1)


def envelope(mask: np.ndarray, window: Window | None = None) -> np.ndarray:
    """Fill the bounded holes of a raster set (complement components not reaching the border)."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return mask.copy()
    border = np.zeros_like(mask)
    for a in range(mask.ndim):
        sl = [slice(None)] * mask.ndim
        sl[a] = 0
        border[tuple(sl)] = True
        sl[a] = -1
        border[tuple(sl)] = True
    if (mask & border).any():
        raise ValueError("set touches the grid boundary; the unbounded component is ambiguous")
    return ndimage.binary_fill_holes(mask, structure=_face(mask.ndim))


def _depth(mask, h):
    """Distance from each cell center to the nearest cell center outside the set."""
    if not mask.any():
        return np.zeros(mask.shape)
    return ndimage.distance_transform_edt(mask) * h


def _reach(mask, h):
    """Distance from each cell center to the nearest cell center of the set."""
    if not mask.any():
        return np.full(mask.shape, np.inf)
    return ndimage.distance_transform_edt(~mask) * h


@dataclass(eq=False)
class FattenedCluster:
    J: np.ndarray
    K: np.ndarray           # J + rho B
    K_env: np.ndarray       # envelope of K
    J_tilde: np.ndarray     # points of K_env deeper than rho
    J1: np.ndarray          # depth > 3 rho / 2 inside J_tilde + 2 rho B
    J2: np.ndarray          # depth > rho inside J_tilde + 2 rho B
    rho: float
    pitch: float
    origin: np.ndarray
    depth: np.ndarray = field(default=None, repr=False)   # depth inside J_tilde + 2 rho B

    @property
    def sets(self) -> dict:
        return {"J": self.J, "K": self.K, "K_env": self.K_env, "J_tilde": self.J_tilde, "J1": self.J1, "J2": self.J2}

    def index_offset(self) -> np.ndarray:
        return np.round(self.origin / self.pitch).astype(np.int64)


def pad_cells(rho: float, pitch: float) -> int:
    """Margin holding J + 3 rho B plus room for the exterior checks."""
    return int(math.ceil(3.5 * rho / pitch)) + 3


def fatten(J: np.ndarray, rho: float, pitch: float, origin=None, refill: bool = False) -> FattenedCluster:
    """Fattened sets of a cluster raster; J must leave a margin of ``pad_cells`` cells.

    ``refill`` also fills the bounded holes of J_tilde + 2 rho B.  Dilating
    J_tilde can close small gaps between inclusions and create holes that the
    first envelope never saw; the default keeps them.
    """
    if not pitch > 0 or not rho > 0:
        raise ValueError("rho and pitch must be positive")
    if pitch > rho / 10 * (1 + 1e-12):
        raise ValueError(f"pitch {pitch} too coarse: need pitch <= rho/10 = {rho / 10}")
    J = np.asarray(J, dtype=bool)
    origin = np.zeros(J.ndim) if origin is None else np.asarray(origin, dtype=float)
    if not J.any():
        z = np.zeros_like(J)
        return FattenedCluster(J.copy(), z, z, z, z, z, rho, pitch, origin, np.zeros(J.shape))
    h = pitch
    K = _reach(J, h) <= rho
    K_env = envelope(K)
    J_t = _depth(K_env, h) > rho
    D = _reach(J_t, h) <= 2 * rho
    if refill:
        D = envelope(D)
    dep = _depth(D, h)
    J1 = dep > 1.5 * rho
    J2 = dep > rho
    return FattenedCluster(J, K, K_env, J_t, J1, J2, rho, pitch, origin, dep)


def cluster_raster(shapes, rho: float, pitch: float, d: int):
    """Rasterize shapes on a padded local grid aligned to pitch * Z^d."""
    lo = np.min([s.bbox()[0] for s in shapes], axis=0)
    hi = np.max([s.bbox()[1] for s in shapes], axis=0)
    pad = pad_cells(rho, pitch)
    k0 = np.floor(lo / pitch).astype(np.int64) - pad
    k1 = np.ceil(hi / pitch).astype(np.int64) + pad
    origin = k0 * pitch
    mask = np.zeros(tuple(int(x) for x in (k1 - k0)), dtype=bool)
    mark_shapes(mask, shapes, pitch, origin)
    return mask, origin


def fatten_shapes(shapes, rho: float, pitch: float, refill: bool = False) -> FattenedCluster:
    d = shapes[0].dim
    mask, origin = cluster_raster(shapes, rho, pitch, d)
    return fatten(mask, rho, pitch, origin, refill)


# --------------------------------------------------------------------------
# verification


def ball_condition(mask: np.ndarray, t: float, h: float, tol: float | None = None) -> dict:
    """Interior ball condition of radius t: every cell lies within ``tol`` (default one
    cell diagonal) of the opening of the set by a ball of radius t."""
    mask = np.asarray(mask, dtype=bool)
    tol = h * math.sqrt(mask.ndim) if tol is None else tol
    if not mask.any():
        return {"holds": True, "violations": 0, "radius": t, "max_excess": 0.0}
    core = _depth(mask, h) > t
    opened = _reach(core, h) <= t
    miss = mask & ~opened
    if not miss.any():
        return {"holds": True, "violations": 0, "radius": t, "max_excess": 0.0}
    excess = np.where(miss, _reach(opened, h), 0.0)
    bad = excess > tol * (1 + 1e-9)
    return {"holds": not bool(bad.any()), "violations": int(bad.sum()), "radius": t,
            "max_excess": float(excess.max()) if np.isfinite(excess.max()) else np.inf}


def exterior_ball_condition(mask: np.ndarray, t: float, h: float) -> dict:
    pad = int(math.ceil(t / h)) + 2
    comp = ~np.pad(np.asarray(mask, dtype=bool), pad)
    out = ball_condition(comp, t, h)
    return out


def connected(mask: np.ndarray) -> bool:
    if not mask.any():
        return True
    _, n = ndimage.label(mask, structure=_face(mask.ndim))
    return n == 1


def verify_ball_conditions(fc: FattenedCluster, annulus_radius: float | None = None) -> dict:
    """Interior/exterior ball conditions of J1 and J2, and shape of J2 minus J1.

    The layer J2 \\ J1 has width rho/2, so its interior ball radius is checked
    at rho/4 unless ``annulus_radius`` is given.
    """
    rho, h = fc.rho, fc.pitch
    layer = fc.J2 & ~fc.J1
    ar = rho / 4 if annulus_radius is None else annulus_radius
    rep = {
        "nested": bool(np.all(fc.J <= fc.J_tilde) and np.all(fc.J_tilde <= fc.J1) and np.all(fc.J1 <= fc.J2)),
        "J1_interior": ball_condition(fc.J1, 1.5 * rho, h),
        "J1_exterior": exterior_ball_condition(fc.J1, 0.5 * rho, h),
        "J2_interior": ball_condition(fc.J2, rho, h),
        "J2_exterior": exterior_ball_condition(fc.J2, rho, h),
        "layer_interior": ball_condition(layer, ar, h),
        "layer_connected": connected(layer),
    }
    rep["all"] = rep["nested"] and rep["layer_connected"] and all(
        rep[k]["holds"] for k in ("J1_interior", "J1_exterior", "J2_interior", "J2_exterior", "layer_interior"))
    return rep


def build_cutoff(fc: FattenedCluster) -> np.ndarray:
    """Cutoff equal to 1 on J1, 0 outside J2, linear in depth in between (slope 2/rho)."""
    rho, h = fc.rho, fc.pitch
    if rho / 2 < 2 * h:
        raise ValueError("layer between J1 and J2 thinner than two cells")
    chi = np.clip((fc.depth - rho) / (rho / 2), 0.0, 1.0)
    chi[fc.J1] = 1.0
    chi[~fc.J2] = 0.0
    return chi


def max_gradient(chi: np.ndarray, h: float) -> float:
    """Largest forward-difference gradient norm."""
    g2 = np.zeros(chi.shape)
    for a in range(chi.ndim):
        diff = np.diff(chi, axis=a, append=np.take(chi, [-1], axis=a)) / h
        g2 += diff ** 2
    return float(np.sqrt(g2.max()))


def raster_diameter(mask: np.ndarray, h: float) -> float:
    from .geometry import RasterShape
    idx = np.argwhere(mask)
    if len(idx) == 0:
        return 0.0
    return RasterShape(idx, h).diameter()


# --------------------------------------------------------------------------
# decompositions


def fatten_decomposition(incl, dec, rho: float, pitch: float, clusters=None, refill: bool = False) -> list:
    """Fattened sets for the selected clusters (default: all) of a decomposition."""
    which = range(len(dec)) if clusters is None else clusters
    return [(c, fatten_shapes([incl.shapes[i] for i in dec.clusters[c]], rho, pitch, refill)) for c in which]


def disjoint(fcs: list, tol_cells: int = 0) -> dict:
    """Pairwise disjointness of the J2 sets (compared on their overlapping grid blocks).

    With ``tol_cells`` > 0 each J2 is first eroded by that many cells, so sets
    touching within that many pitches count as disjoint.
    """
    overlaps = []
    sets = [fc.J2 if not tol_cells else ndimage.binary_erosion(fc.J2, _face(fc.J2.ndim), tol_cells)
            for _, fc in fcs]
    boxes = [(fc.index_offset(), fc.index_offset() + np.array(fc.J2.shape)) for _, fc in fcs]
    for a in range(len(fcs)):
        for b in range(a + 1, len(fcs)):
            lo = np.maximum(boxes[a][0], boxes[b][0])
            hi = np.minimum(boxes[a][1], boxes[b][1])
            if np.any(hi <= lo):
                continue
            sa = tuple(slice(l - o, u - o) for l, u, o in zip(lo, hi, boxes[a][0]))
            sb = tuple(slice(l - o, u - o) for l, u, o in zip(lo, hi, boxes[b][0]))
            n = int((sets[a][sa] & sets[b][sb]).sum())
            if n:
                overlaps.append((fcs[a][0], fcs[b][0], n))
    return {"disjoint": not overlaps, "overlaps": overlaps}


def to_raster_set(fc: FattenedCluster, name: str) -> RasterSet:
    return RasterSet(fc.sets[name], fc.pitch, fc.origin)
