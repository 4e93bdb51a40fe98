"""Shapes, windows, set distances, diameters and rasterization."""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import shapely
from scipy.spatial import ConvexHull, QhullError

# --------------------------------------------------------------------------
# shapes


class Shape:
    """Base class; concrete shapes are Ball, Polytope, Compound and RasterShape."""

    dim: int

    def bbox(self) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    @property
    def anchor(self) -> np.ndarray:
        lo, hi = self.bbox()
        return 0.5 * (lo + hi)

    def extreme_points(self) -> tuple[np.ndarray, np.ndarray]:
        """Points and radii whose ball-union has the same diameter as the shape."""
        raise NotImplementedError

    def diameter(self) -> float:
        return set_diameter([self])


@dataclass(eq=False)
class Ball(Shape):
    center: np.ndarray
    radius: float

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float)
        self.radius = float(self.radius)
        if not self.radius > 0:
            raise ValueError("ball radius must be positive")
        if not np.all(np.isfinite(self.center)):
            raise ValueError("ball center must be finite")

    @property
    def dim(self):
        return self.center.shape[0]

    @property
    def anchor(self):
        return self.center

    def bbox(self):
        return self.center - self.radius, self.center + self.radius

    def extreme_points(self):
        return self.center[None, :], np.array([self.radius])

    def diameter(self):
        return 2.0 * self.radius


@dataclass(eq=False)
class Polytope(Shape):
    """Convex polytope given by (a superset of) its vertices."""

    vertices: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=float)
        if v.ndim != 2 or v.shape[0] < v.shape[1] + 1:
            raise ValueError("polytope needs at least d+1 vertices")
        try:
            hull = ConvexHull(v)
        except QhullError as exc:
            raise ValueError("polytope has empty interior") from exc
        self.vertices = v[hull.vertices]
        self._equations = hull.equations

    @property
    def dim(self):
        return self.vertices.shape[1]

    def bbox(self):
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def extreme_points(self):
        return self.vertices, np.zeros(len(self.vertices))

    def contains(self, pts) -> np.ndarray:
        pts = np.atleast_2d(pts)
        return np.all(pts @ self._equations[:, :-1].T + self._equations[:, -1] <= 1e-12, axis=1)

    @cached_property
    def geom(self):
        if self.dim != 2:
            raise ValueError("shapely geometry only for d = 2")
        return shapely.Polygon(self.vertices)


@dataclass(eq=False)
class Compound(Shape):
    """Connected union of convex parts (merged Voronoi cells)."""

    parts: list

    def __post_init__(self):
        if not self.parts:
            raise ValueError("compound shape needs at least one part")
        dims = {p.dim for p in self.parts}
        if len(dims) != 1:
            raise ValueError("mixed dimensions in compound")

    @property
    def dim(self):
        return self.parts[0].dim

    def bbox(self):
        lo = np.min([p.bbox()[0] for p in self.parts], axis=0)
        hi = np.max([p.bbox()[1] for p in self.parts], axis=0)
        return lo, hi

    def extreme_points(self):
        pts, rad = zip(*(p.extreme_points() for p in self.parts))
        return np.vstack(pts), np.concatenate(rad)

    @cached_property
    def geom(self):
        return shapely.union_all([_geom2d(p) for p in self.parts])


@dataclass(eq=False)
class RasterShape(Shape):
    """Union of closed grid cells ``origin + pitch * (idx + [0, 1]^d)``."""

    cells: np.ndarray
    pitch: float
    origin: np.ndarray = None

    def __post_init__(self):
        self.cells = np.atleast_2d(np.asarray(self.cells, dtype=np.int64))
        if self.cells.size == 0:
            raise ValueError("raster shape needs at least one cell")
        if not self.pitch > 0:
            raise ValueError("pitch must be positive")
        if self.origin is None:
            self.origin = np.zeros(self.cells.shape[1])
        self.origin = np.asarray(self.origin, dtype=float)

    @property
    def dim(self):
        return self.cells.shape[1]

    def bbox(self):
        lo = self.origin + self.pitch * self.cells.min(axis=0)
        hi = self.origin + self.pitch * (self.cells.max(axis=0) + 1)
        return lo, hi

    def box_lo(self):
        return self.origin + self.pitch * self.cells

    def extreme_points(self):
        corners = np.array(list(itertools.product([0, 1], repeat=self.dim)))
        pts = (self.cells[:, None, :] + corners[None]).reshape(-1, self.dim)
        pts = np.unique(pts, axis=0)
        return self.origin + self.pitch * pts, np.zeros(len(pts))


def _geom2d(s):
    if isinstance(s, Ball):
        return shapely.Point(s.center).buffer(s.radius, 64)
    return s.geom


# --------------------------------------------------------------------------
# windows


@dataclass(frozen=True)
class Window:
    """Axis-aligned box ``[0, size]^dim``."""

    size: float
    dim: int = 2
    boundary: str = "free"
    guard: float = 0.0

    def __post_init__(self):
        if self.dim not in (2, 3):
            raise ValueError("dimension must be 2 or 3")
        if not self.size > 0:
            raise ValueError("window size must be positive")
        if self.boundary not in ("free", "periodic"):
            raise ValueError("boundary must be 'free' or 'periodic'")
        if not 0 <= self.guard < self.size / 2:
            raise ValueError("guard must satisfy 0 <= guard < size/2")

    @property
    def volume(self) -> float:
        return float(self.size) ** self.dim

    @property
    def center(self) -> np.ndarray:
        return np.full(self.dim, self.size / 2.0)

    @property
    def periodic(self) -> bool:
        return self.boundary == "periodic"

    def contains(self, pts) -> np.ndarray:
        pts = np.atleast_2d(pts)
        return np.all((pts >= 0) & (pts <= self.size), axis=1)

    def boundary_distance(self, pts) -> np.ndarray:
        pts = np.atleast_2d(pts)
        return np.minimum(pts, self.size - pts).min(axis=1)

    def in_interior(self, pts) -> np.ndarray:
        """Points in the guarded interior (minus-sampling region)."""
        return self.boundary_distance(pts) >= self.guard

    def to_dict(self) -> dict:
        return {"size": self.size, "dim": self.dim, "boundary": self.boundary, "guard": self.guard}

    @classmethod
    def from_dict(cls, d) -> "Window":
        return cls(float(d["size"]), int(d.get("dim", 2)), d.get("boundary", "free"), float(d.get("guard", 0.0)))


# --------------------------------------------------------------------------
# distances


def _closest_on_simplex(S: np.ndarray):
    """Closest point to the origin of conv(S), |S| <= d+1; returns point and support."""
    best, best_idx = None, None
    n = len(S)
    for k in range(1, n + 1):
        for idx in itertools.combinations(range(n), k):
            P = S[list(idx)]
            if k == 1:
                x, lam = P[0], np.ones(1)
            else:
                M = (P[1:] - P[0]).T
                mu, _, rank, _ = np.linalg.lstsq(M, -P[0], rcond=None)
                if rank < k - 1:
                    continue
                lam = np.concatenate([[1 - mu.sum()], mu])
                if np.any(lam < -1e-12):
                    continue
                x = P[0] + M @ mu
            nx = x @ x
            if best is None or nx < best @ best - 1e-18:
                best, best_idx = x, idx
    return best, S[list(best_idx)]


def gjk_distance(A: np.ndarray, B: np.ndarray, maxiter: int = 200) -> float:
    """Euclidean distance between conv(A) and conv(B) (0 when they meet).

    Gilbert-Johnson-Keerthi iteration on the Minkowski difference, driven by
    support functions only.
    """
    A = np.atleast_2d(A)
    B = np.atleast_2d(B)

    def support(v):
        return A[np.argmax(A @ v)] - B[np.argmin(B @ v)]

    v = A[0] - B[0]
    simplex = v[None, :]
    for _ in range(maxiter):
        vv = v @ v
        if vv < 1e-26:
            return 0.0
        w = support(-v)
        if vv - v @ w <= 1e-12 * vv + 1e-26:
            break
        if any(np.array_equal(w, s) for s in simplex):
            break
        v, simplex = _closest_on_simplex(np.vstack([simplex, w]))
        if len(simplex) == A.shape[1] + 1:
            return 0.0
    return float(np.sqrt(max(v @ v, 0.0)))


def _core(s):
    """Convex core and margin: shape = conv(core) + margin * B."""
    if isinstance(s, Ball):
        return s.center[None, :], s.radius
    return s.vertices, 0.0


def _box_gap(lo1, hi1, lo2, hi2):
    gap = np.maximum(0.0, np.maximum(lo1 - hi2, lo2 - hi1))
    return np.sqrt((gap ** 2).sum(axis=-1))


def _raster_to_point(r: RasterShape, p) -> np.ndarray:
    lo = r.box_lo()
    gap = np.maximum(0.0, np.maximum(lo - p, p - (lo + r.pitch)))
    return np.sqrt((gap ** 2).sum(axis=1))


def _raster_raster(a: RasterShape, b: RasterShape) -> float:
    la, lb = a.box_lo(), b.box_lo()
    best = np.inf
    for i in range(0, len(la), 512):
        blk = la[i:i + 512]
        d = _box_gap(blk[:, None, :], blk[:, None, :] + a.pitch, lb[None], lb[None] + b.pitch)
        best = min(best, float(d.min()))
        if best == 0.0:
            break
    return best


def _convex_distance(a, b) -> float:
    if isinstance(a, Ball) and isinstance(b, Ball):
        return max(0.0, float(np.linalg.norm(a.center - b.center)) - (a.radius + b.radius))
    if a.dim == 2:
        if isinstance(a, Ball):
            return max(0.0, shapely.distance(shapely.Point(a.center), b.geom) - a.radius)
        if isinstance(b, Ball):
            return max(0.0, shapely.distance(a.geom, shapely.Point(b.center)) - b.radius)
        return float(shapely.distance(a.geom, b.geom))
    ca, ma = _core(a)
    cb, mb = _core(b)
    return max(0.0, gjk_distance(ca, cb) - (ma + mb))


def _raster_convex(r: RasterShape, s) -> float:
    if isinstance(s, Ball):
        return max(0.0, float(_raster_to_point(r, s.center).min()) - s.radius)
    lo = r.box_lo()
    if r.dim == 2:
        boxes = shapely.box(lo[:, 0], lo[:, 1], lo[:, 0] + r.pitch, lo[:, 1] + r.pitch)
        return float(shapely.distance(boxes, s.geom).min())
    corners = np.array(list(itertools.product([0, 1], repeat=r.dim))) * r.pitch
    return min(gjk_distance(c + corners, s.vertices) for c in lo)


def shape_distance(a: Shape, b: Shape) -> float:
    """Euclidean set distance between two shapes, 0 on overlap or contact."""
    if a.dim != b.dim:
        raise ValueError(f"dimension mismatch: {a.dim} vs {b.dim}")
    if isinstance(a, Compound):
        if a.dim == 2 and not isinstance(b, RasterShape):
            return float(shapely.distance(a.geom, _geom2d(b))) if not isinstance(b, Ball) else \
                max(0.0, float(shapely.distance(a.geom, shapely.Point(b.center))) - b.radius)
        return min(shape_distance(p, b) for p in a.parts)
    if isinstance(b, Compound):
        return shape_distance(b, a)
    if isinstance(a, RasterShape) and isinstance(b, RasterShape):
        return _raster_raster(a, b)
    if isinstance(a, RasterShape):
        return _raster_convex(a, b)
    if isinstance(b, RasterShape):
        return _raster_convex(b, a)
    return _convex_distance(a, b)


def point_shape_distance(p, s: Shape) -> float:
    p = np.asarray(p, dtype=float)
    if isinstance(s, Ball):
        return max(0.0, float(np.linalg.norm(p - s.center)) - s.radius)
    if isinstance(s, RasterShape):
        return float(_raster_to_point(s, p).min())
    if isinstance(s, Compound):
        return min(point_shape_distance(p, q) for q in s.parts)
    if s.dim == 2:
        return float(shapely.distance(shapely.Point(p), s.geom))
    return gjk_distance(p[None, :], s.vertices)


# --------------------------------------------------------------------------
# diameters


def _max_pair(P: np.ndarray, R: np.ndarray) -> float:
    best = 0.0
    for i in range(0, len(P), 1024):
        d = np.linalg.norm(P[i:i + 1024, None, :] - P[None], axis=-1) + R[i:i + 1024, None] + R[None]
        best = max(best, float(d.max()))
    return best


def points_radii_diameter(P: np.ndarray, R: np.ndarray) -> float:
    """Diameter of a union of balls B_R(P) (radius 0 allowed)."""
    P = np.atleast_2d(P)
    R = np.asarray(R, dtype=float)
    if len(P) == 0:
        raise ValueError("empty collection")
    zero = R == 0
    if zero.sum() > 4 * P.shape[1] and zero.sum() > 64:
        # points without radius: only hull vertices matter
        Z = P[zero]
        try:
            Z = Z[ConvexHull(Z).vertices]
        except QhullError:
            pass
        P = np.vstack([Z, P[~zero]])
        R = np.concatenate([np.zeros(len(Z)), R[~zero]])
    return _max_pair(P, R)


def set_diameter(shapes) -> float:
    """sup of pairwise point distances over the union of the shapes."""
    shapes = list(shapes)
    if not shapes:
        raise ValueError("set_diameter of an empty collection")
    pts, rad = zip(*(s.extreme_points() for s in shapes))
    return points_radii_diameter(np.vstack(pts), np.concatenate(rad))


# --------------------------------------------------------------------------
# rasters


@dataclass(eq=False)
class RasterSet:
    """Boolean grid of closed cells ``origin + pitch * (idx + [0,1]^d)``."""

    mask: np.ndarray
    pitch: float
    origin: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.origin is None:
            self.origin = np.zeros(self.mask.ndim)
        self.origin = np.asarray(self.origin, dtype=float)

    @property
    def area(self) -> float:
        return float(self.mask.sum()) * self.pitch ** self.mask.ndim

    def cell_centers(self, idx=None) -> np.ndarray:
        if idx is None:
            idx = np.argwhere(self.mask)
        return self.origin + self.pitch * (np.asarray(idx) + 0.5)

    def to_shape(self) -> RasterShape:
        return RasterShape(np.argwhere(self.mask), self.pitch, self.origin)


def grid_shape(window: Window, pitch: float) -> tuple:
    return (int(np.ceil(window.size / pitch - 1e-9)),) * window.dim


def _axis_gaps(c, r, lo_idx, hi_idx, pitch, origin):
    """Per-axis gaps between c and the cells lo_idx..hi_idx-1."""
    idx = np.arange(lo_idx, hi_idx)
    lo = origin + pitch * idx
    return idx, np.maximum(0.0, np.maximum(lo - c, c - (lo + pitch)))


def mark_balls(mask: np.ndarray, centers, radii, pitch: float, origin=None, periodic=False, closed=True):
    """Mark cells whose closure meets some ball (in place)."""
    d = mask.ndim
    origin = np.zeros(d) if origin is None else np.asarray(origin, dtype=float)
    shape = np.array(mask.shape)
    centers = np.atleast_2d(centers)
    radii = np.broadcast_to(np.asarray(radii, dtype=float), (len(centers),))
    for c, r in zip(centers, radii):
        lo = np.floor((c - r - origin) / pitch).astype(np.int64) - 1
        hi = np.floor((c + r - origin) / pitch).astype(np.int64) + 2
        if not periodic:
            lo = np.maximum(lo, 0)
            hi = np.minimum(hi, shape)
            if np.any(hi <= lo):
                continue
        sq = None
        idxs = []
        for a in range(d):
            idx, gap = _axis_gaps(c[a], r, lo[a], hi[a], pitch, origin[a])
            g2 = gap ** 2
            sq = g2 if sq is None else np.add.outer(sq, g2)
            idxs.append(np.mod(idx, shape[a]) if periodic else idx)
        hit = sq <= r * r if closed else sq < r * r
        if periodic:
            mask[np.ix_(*idxs)] |= hit
        else:
            sl = tuple(slice(lo[a], hi[a]) for a in range(d))
            mask[sl] |= hit
    return mask


def _mark_polytope(mask, s, pitch, origin):
    d = mask.ndim
    lo, hi = s.bbox()
    ilo = np.maximum(np.floor((lo - origin) / pitch).astype(int) - 1, 0)
    ihi = np.minimum(np.floor((hi - origin) / pitch).astype(int) + 2, mask.shape)
    if np.any(ihi <= ilo):
        return
    grids = np.meshgrid(*[np.arange(ilo[a], ihi[a]) for a in range(d)], indexing="ij")
    idx = np.stack([g.ravel() for g in grids], axis=1)
    blo = origin + pitch * idx
    if d == 2:
        boxes = shapely.box(blo[:, 0], blo[:, 1], blo[:, 0] + pitch, blo[:, 1] + pitch)
        hit = shapely.intersects(boxes, _geom2d(s))
    else:
        if isinstance(s, Compound):
            for p in s.parts:
                _mark_polytope(mask, p, pitch, origin)
            return
        eq = s._equations
        n, off = eq[:, :-1], eq[:, -1]
        # half-extent of a cell along each facet normal is reach / 2
        reach = np.abs(n) @ np.full(d, pitch)
        ctr = (blo + pitch / 2) @ n.T + off
        outside = np.any(ctr - reach / 2 > 1e-12, axis=1)
        inside = np.all(ctr + reach / 2 <= 0, axis=1)
        hit = inside.copy()
        corners = np.array(list(itertools.product([0, 1], repeat=d))) * pitch
        for k in np.flatnonzero(~outside & ~inside):
            hit[k] = gjk_distance(blo[k] + corners, s.vertices) <= 1e-12
    mask[tuple(idx[hit].T)] = True


def mark_shapes(mask: np.ndarray, shapes, pitch: float, origin=None, periodic: bool = False) -> np.ndarray:
    """Mark (in place) every cell of ``mask`` whose closure meets one of the shapes."""
    origin = np.zeros(mask.ndim) if origin is None else np.asarray(origin, dtype=float)
    balls_c, balls_r = [], []
    for s in shapes:
        parts = s.parts if isinstance(s, Compound) and s.dim == 3 else [s]
        for p in parts:
            if isinstance(p, Ball):
                balls_c.append(p.center)
                balls_r.append(p.radius)
            elif isinstance(p, RasterShape):
                _mark_raster(mask, p, pitch, origin)
            else:
                if periodic:
                    raise NotImplementedError("periodic rasterization only for balls")
                _mark_polytope(mask, p, pitch, origin)
    if balls_c:
        mark_balls(mask, np.array(balls_c), np.array(balls_r), pitch, origin, periodic=periodic)
    return mask


def rasterize(shapes, pitch: float, window: Window) -> RasterSet:
    """Mark every window cell whose closure meets one of the shapes."""
    if not pitch > 0:
        raise ValueError("pitch must be positive")
    mask = np.zeros(grid_shape(window, pitch), dtype=bool)
    mark_shapes(mask, shapes, pitch, np.zeros(window.dim), window.periodic)
    return RasterSet(mask, pitch, np.zeros(window.dim))


def _mark_raster(mask, s: RasterShape, pitch, origin):
    lo = s.box_lo()
    ilo = np.floor((lo - origin) / pitch - 1e-9).astype(np.int64)
    ihi = np.floor((lo + s.pitch - origin) / pitch + 1e-9).astype(np.int64)
    shape = np.array(mask.shape)
    for a, b in zip(ilo, ihi):
        a = np.clip(a, 0, shape)
        b = np.clip(b + 1, 0, shape)
        if np.all(b > a):
            mask[tuple(slice(i, j) for i, j in zip(a, b))] = True


# --------------------------------------------------------------------------
# PGM output


def write_pgm(path, arr) -> None:
    """Binary 8-bit PGM (magic P5); 3D arrays are written as stacked z-slices."""
    a = np.asarray(arr)
    if a.ndim == 3:
        a = np.concatenate([a[:, :, k] for k in range(a.shape[2])], axis=1)
    if a.ndim != 2:
        raise ValueError("PGM output needs a 2D or 3D array")
    if a.dtype == bool:
        img = np.where(a, 255, 0).astype(np.uint8)
    else:
        a = np.asarray(a, dtype=float)
        lo, hi = float(a.min()), float(a.max())
        img = np.zeros(a.shape, np.uint8) if hi <= lo else np.round(255 * (a - lo) / (hi - lo)).astype(np.uint8)
    # rows top-to-bottom = decreasing second coordinate
    img = img.T[::-1]
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (img.shape[1], img.shape[0]))
        fh.write(np.ascontiguousarray(img).tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM file")
    w, h = int(parts[1]), int(parts[2])
    img = np.frombuffer(parts[4][: w * h], dtype=np.uint8).reshape(h, w)
    return img[::-1].T
