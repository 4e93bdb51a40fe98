"""Site fields on a fine cube lattice, crossing probabilities and the buckling certifier.

The site field marks the cubes of side ``rho / (3 sqrt(d))`` that meet an
inclusion having another inclusion closer than ``rho``.  Crossing events ask
for a chain of adjacent marked cubes from a small ball to a large sphere.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .clusters import _run, close_pairs, decompose, wilson_interval
from .geometry import Window, mark_shapes
from .inclusions import InclusionSet, ModelSpec
from .rng import SeedKey, counter_uniforms, lattice_keys


def site_pitch(rho: float, d: int) -> float:
    return rho / (3.0 * math.sqrt(d))


@dataclass(eq=False)
class SiteField:
    """Binary values on cubes ``origin + pitch * (k + [0, 1]^d)``."""

    values: np.ndarray
    pitch: float
    origin: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=bool)
        self.origin = np.asarray(self.origin, dtype=float)

    @property
    def dim(self):
        return self.values.ndim

    def cube_distances(self, center):
        """Min and max distance from ``center`` to each cube."""
        lo2 = hi2 = 0.0
        for a, n in enumerate(self.values.shape):
            lo = self.origin[a] + self.pitch * np.arange(n) - center[a]
            hi = lo + self.pitch
            gap = np.maximum(0.0, np.maximum(lo, -hi))
            far = np.maximum(np.abs(lo), np.abs(hi))
            shape = [1] * self.dim
            shape[a] = n
            lo2 = lo2 + (gap ** 2).reshape(shape)
            hi2 = hi2 + (far ** 2).reshape(shape)
        return np.sqrt(lo2), np.sqrt(hi2)


@dataclass(frozen=True)
class Region:
    """Ball (closed), sphere, or explicit cube mask."""

    kind: str
    center: tuple = ()
    radius: float = 0.0
    mask: object = None

    @classmethod
    def ball(cls, center, radius):
        return cls("ball", tuple(float(c) for c in center), float(radius))

    @classmethod
    def sphere(cls, center, radius):
        return cls("sphere", tuple(float(c) for c in center), float(radius))

    @classmethod
    def cubes(cls, mask):
        return cls("mask", mask=np.asarray(mask, dtype=bool))

    def cubes_of(self, f: SiteField) -> np.ndarray:
        if self.kind == "mask":
            return np.broadcast_to(self.mask, f.values.shape)
        dmin, dmax = f.cube_distances(np.asarray(self.center))
        if self.kind == "ball":
            return dmin <= self.radius
        return (dmin <= self.radius) & (self.radius <= dmax)


def _structure(d, adjacency):
    if adjacency not in ("face", "vertex"):
        raise ValueError("adjacency must be 'face' or 'vertex'")
    return ndimage.generate_binary_structure(d, 1 if adjacency == "face" else d)


def connects(f: SiteField, A: Region, B: Region, adjacency: str = "face") -> bool:
    """True iff a chain of adjacent 1-cubes joins a cube meeting A to a cube meeting B."""
    v = f.values
    if not v.any():
        return False
    a = A.cubes_of(f) & v
    if not a.any():
        return False
    b = B.cubes_of(f) & v
    if not b.any():
        return False
    lab, _ = ndimage.label(v, structure=_structure(v.ndim, adjacency))
    return bool(np.intersect1d(lab[a], lab[b]).size)


# --------------------------------------------------------------------------
# discretization of inclusion sets


def contributing(incl: InclusionSet, rho: float) -> np.ndarray:
    """Inclusions having another inclusion at distance < rho."""
    pairs, _ = close_pairs(incl, rho)
    flag = np.zeros(len(incl), dtype=bool)
    flag[pairs.ravel()] = True
    return flag


def _grid_box(lo, hi, pitch):
    """Cube lattice pitch*(k - 1/2 + [0,1]) covering [lo, hi]."""
    k0 = np.floor(np.asarray(lo) / pitch + 0.5).astype(np.int64)
    k1 = np.floor(np.asarray(hi) / pitch + 0.5).astype(np.int64)
    shape = tuple(int(x) for x in (k1 - k0 + 1))
    return pitch * (k0 - 0.5), shape


def discretize(incl: InclusionSet, rho: float, box=None, members=None) -> SiteField:
    """Site field at pitch rho/(3 sqrt d) over ``box`` (default: the window)."""
    if not rho > 0:
        raise ValueError("rho must be positive")
    d = incl.window.dim
    h = site_pitch(rho, d)
    if box is None:
        box = (np.zeros(d), np.full(d, incl.window.size))
    origin, shape = _grid_box(box[0], box[1], h)
    vals = np.zeros(shape, dtype=bool)
    if members is None:
        members = np.flatnonzero(contributing(incl, rho))
    mark_shapes(vals, [incl.shapes[i] for i in members], h, origin)
    return SiteField(vals, h, origin)


# --------------------------------------------------------------------------
# crossing samplers


@dataclass(frozen=True)
class InclusionCrossing:
    """Crossing events {B_(alpha r) <-> dB_r} at the window center for an inclusion model.

    Site cubes of distinct rho-clusters are never adjacent, so a crossing runs
    inside one cluster; only clusters whose radial extent spans the annulus
    are rasterized (``fast``).  With ``fast=False`` the full cropped field is
    labeled instead.
    """

    spec: ModelSpec
    window: Window
    rho: float
    adjacency: str = "face"
    fast: bool = True

    def realize(self, seed: SeedKey) -> InclusionSet:
        return self.spec.realize(self.window, seed)

    def crossings(self, seed: SeedKey, alpha: float, radii) -> np.ndarray:
        return self.crossings_of(self.realize(seed), alpha, radii)

    def crossings_of(self, incl: InclusionSet, alpha: float, radii) -> np.ndarray:
        radii = np.asarray(radii, dtype=float)
        out = np.zeros(len(radii), dtype=bool)
        if len(incl) < 2:
            return out
        c = self.window.center
        d = self.window.dim
        h = site_pitch(self.rho, d)
        slack = h * math.sqrt(d)
        if not self.fast:
            for k, r in enumerate(radii):
                f = discretize(incl, self.rho, (c - r - slack, c + r + slack))
                out[k] = connects(f, Region.ball(c, alpha * r), Region.sphere(c, r), self.adjacency)
            return out
        dec = decompose(incl, self.rho)
        if incl.all_balls:
            dist = np.linalg.norm(incl.centers - c, axis=1)
            near, far = dist - incl.radii, dist + incl.radii
        else:
            from .geometry import point_shape_distance
            near = np.array([point_shape_distance(c, s) for s in incl.shapes])
            far = np.array([float(np.linalg.norm(s.extreme_points()[0] - c, axis=1).max()
                                  + s.extreme_points()[1].max()) for s in incl.shapes])
        m = len(dec)
        cnear = np.full(m, np.inf)
        cfar = np.zeros(m)
        np.minimum.at(cnear, dec.labels, near)
        np.maximum.at(cfar, dec.labels, far)
        sizes = np.bincount(dec.labels, minlength=m)
        for k, r in enumerate(radii):
            cand = np.flatnonzero((sizes > 1) & (cnear <= alpha * r + slack) & (cfar >= r - slack))
            for cl in cand:
                members = dec.clusters[cl]
                f = discretize(incl, self.rho, (c - r - slack, c + r + slack), members)
                if connects(f, Region.ball(c, alpha * r), Region.sphere(c, r), self.adjacency):
                    out[k] = True
                    break
        return out


@dataclass(frozen=True)
class BernoulliCrossing:
    """Iid Bernoulli(p) site field on a fixed cube grid; regions given as cube masks."""

    p: float
    shape: tuple
    A: object
    B: object
    adjacency: str = "face"

    def field(self, seed: SeedKey) -> SiteField:
        idx = np.argwhere(np.ones(self.shape, dtype=bool))
        u = counter_uniforms(lattice_keys(seed.key, idx), np.zeros(len(idx), dtype=np.uint64))
        return SiteField((u < self.p).reshape(self.shape), 1.0, np.zeros(len(self.shape)))

    def crossings(self, seed: SeedKey, alpha: float, radii) -> np.ndarray:
        f = self.field(seed)
        hit = connects(f, Region.cubes(self.A), Region.cubes(self.B), self.adjacency)
        return np.full(len(np.atleast_1d(radii)), hit)


@dataclass(eq=False)
class ConnectivityEstimate:
    alpha: float
    radii: np.ndarray
    k: np.ndarray
    n: int
    seeds: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.radii = np.asarray(self.radii, dtype=float)
        self.k = np.asarray(self.k, dtype=np.int64)

    @property
    def theta(self) -> np.ndarray:
        return self.k / max(self.n, 1)

    @property
    def ci(self):
        return wilson_interval(self.k, self.n)

    def at(self, r) -> int:
        hit = np.flatnonzero(np.isclose(self.radii, r))
        if not len(hit):
            raise KeyError(f"radius {r} not measured")
        return int(hit[0])

    def to_dict(self) -> dict:
        return {"kind": "connectivity", "alpha": self.alpha, "radii": self.radii.tolist(),
                "k": self.k.tolist(), "n": int(self.n), "seeds": [list(map(int, s)) for s in self.seeds],
                "meta": self.meta}

    @classmethod
    def from_dict(cls, d) -> "ConnectivityEstimate":
        return cls(d["alpha"], d["radii"], d["k"], d["n"], [tuple(s) for s in d["seeds"]], d["meta"])

    def to_csv(self, path):
        lo, hi = self.ci
        with open(path, "w") as fh:
            fh.write("r,theta,ci_lo,ci_hi,k,n\n")
            for r, t, a, b, k in zip(self.radii, self.theta, lo, hi, self.k):
                fh.write(f"{r!r},{t!r},{a!r},{b!r},{k},{self.n}\n")


def _theta_job(args):
    sampler, alpha, radii, seed = args
    return sampler.crossings(seed, alpha, radii)


def theta_estimate(sampler, alpha: float, radii, replicates: int, seed: SeedKey,
                   workers: int = 1, first: int = 0) -> ConnectivityEstimate:
    """Monte Carlo crossing frequencies theta_r = P[B_(alpha r) <-> dB_r]."""
    if not 0 < alpha < 0.5:
        raise ValueError("alpha must lie in (0, 1/2)")
    radii = np.asarray(radii, dtype=float)
    W = getattr(sampler, "window", None)
    if W is not None and W.size < 2 * radii.max() + W.guard:
        raise ValueError("insufficient window: need size >= 2 * max radius + guard")
    jobs = [(sampler, alpha, radii, seed.child("replicate", i)) for i in range(first, first + replicates)]
    hits = np.array(_run(_theta_job, jobs, workers)).reshape(replicates, len(radii))
    return ConnectivityEstimate(alpha, radii, hits.sum(axis=0), replicates,
                                [(seed.seed, first, first + replicates)])


def merge_connectivity(a: ConnectivityEstimate, b: ConnectivityEstimate) -> ConnectivityEstimate:
    if a.alpha != b.alpha or not np.array_equal(a.radii, b.radii) or a.meta != b.meta:
        raise ValueError("cannot merge estimates with different definitions")
    for s1, f1, l1 in a.seeds:
        for s2, f2, l2 in b.seeds:
            if s1 == s2 and f1 < l2 and f2 < l1:
                raise ValueError("cannot merge estimates with overlapping seed ranges")
    return ConnectivityEstimate(a.alpha, a.radii, a.k + b.k, a.n + b.n, sorted(a.seeds + b.seeds), dict(a.meta))


# --------------------------------------------------------------------------
# covering and renormalization inequalities


def covering_constant(d: int) -> float:
    return 5.0 ** d


def covering_number(s: float, t: float, d: int, c_d: float | None = None) -> int:
    """Balls of radius t used to cover a sphere of radius s."""
    c = covering_constant(d) if c_d is None else c_d
    return int(math.ceil(c * (s / t) ** (d - 1)))


def covering_check(est: ConnectivityEstimate, pairs=None, c_d: float | None = None, d: int = 2) -> dict:
    """Check theta_s <= N(s, r) theta_r with Wilson slack on every pair r < s(1 - alpha)."""
    lo, hi = est.ci
    if pairs is None:
        pairs = [(r, s) for r in est.radii for s in est.radii if r < s * (1 - est.alpha)]
    rows = []
    for r, s in pairs:
        if not r < s * (1 - est.alpha):
            raise ValueError(f"pair ({r}, {s}) violates r < s(1 - alpha)")
        i, j = est.at(r), est.at(s)
        N = covering_number(s, r, d, c_d)
        lhs, rhs = float(lo[j]), float(N * hi[i])
        rows.append({"r": float(r), "s": float(s), "theta_r": float(est.theta[i]), "theta_s": float(est.theta[j]),
                     "N": N, "lhs": lhs, "rhs": rhs, "margin": rhs - lhs,
                     "holds": bool(est.theta[j] == 0 or lhs <= rhs)})
    frac = float(np.mean([r["holds"] for r in rows])) if rows else 1.0
    return {"pairs": rows, "fraction_holding": frac, "c_d": covering_constant(d) if c_d is None else c_d}


@dataclass
class CertifierInput:
    alpha: float
    r0: float
    d: int = 2
    beta: float = 0.5
    ell: float | None = None
    c_d: float | None = None
    pi_model: str = "zero"          # zero | algebraic | stretched
    C0: float = 0.0
    exponent: float = 0.0           # kappa (algebraic) or gamma (stretched)
    theta_r0: float | None = None   # upper confidence bound of the measured theta at r0
    steps: int = 10

    def __post_init__(self):
        if not 0 < self.alpha < 0.5:
            raise ValueError("alpha must lie in (0, 1/2)")
        if not self.alpha < self.beta < 1:
            raise ValueError("beta must lie in (alpha, 1)")
        if self.c_d is None:
            self.c_d = covering_constant(self.d)
        if self.pi_model not in ("zero", "algebraic", "stretched"):
            raise ValueError("pi_model must be zero, algebraic or stretched")

    @property
    def shrink(self) -> float:
        """Scale factor between consecutive grid radii (1/2 - alpha)."""
        return 0.5 - self.alpha

    @property
    def K(self) -> float:
        return self.c_d * (self.alpha * self.shrink ** 2) ** (1 - self.d)

    @property
    def eps(self) -> float:
        return 1.0 / (2.0 * self.K)

    def pi(self, r) -> np.ndarray:
        r = np.asarray(r, dtype=float)
        if self.pi_model == "zero":
            return np.zeros_like(r)
        if self.pi_model == "algebraic":
            return np.minimum(1.0, self.C0 * r ** (-self.exponent))
        return np.minimum(1.0, self.C0 * np.exp(-(r ** self.exponent) / self.C0))

    def to_dict(self):
        return {k: getattr(self, k) for k in ("alpha", "r0", "d", "beta", "ell", "c_d", "pi_model", "C0",
                                              "exponent", "theta_r0", "steps")} | {"K": self.K, "eps": self.eps}


def renormalization_rhs(inp: CertifierInput, r: float, theta_outer: float, theta_inner: float,
                        pi_hat: float, ell: float | None = None) -> float:
    """pi + C ((beta r + l)/(r - beta r - l) / (alpha (beta - alpha)))^(d-1) theta_1 theta_2.

    ``theta_outer`` is the crossing probability at r(1-beta)-l, ``theta_inner``
    at r(beta-alpha); C is the covering constant c_d.
    """
    ell = inp.ell if ell is None else ell
    if ell is None:
        ell = inp.alpha * r
    if pi_hat > 0.5:
        raise ValueError(f"renormalization needs P[R > l] <= 1/2, got {pi_hat}")
    b, a = inp.beta, inp.alpha
    if not 0 < ell < (1 - b) * r:
        raise ValueError("need 0 < l < (1 - beta) r")
    factor = ((b * r + ell) / (r - b * r - ell) / (a * (b - a))) ** (inp.d - 1)
    return float(pi_hat + inp.c_d * factor * theta_outer * theta_inner)


@dataclass
class CertifiedBound:
    radii: np.ndarray
    bound: np.ndarray
    valid: bool
    fit: object = None
    inp: CertifierInput = None
    report: dict = field(default_factory=dict)

    def bound_at(self, s: float) -> float:
        """Bound at any radius s >= r0/(1 - alpha) via the covering interpolation."""
        a = self.inp.alpha
        ok = np.flatnonzero(self.radii < s * (1 - a))
        if not len(ok):
            if np.isclose(s, self.radii[0]):
                return float(self.bound[0])
            raise ValueError("radius below the certified range")
        j = ok[-1]
        if np.isclose(s, self.radii).any():
            return float(self.bound[np.flatnonzero(np.isclose(s, self.radii))[0]])
        N = covering_number(s, self.radii[j], self.inp.d, self.inp.c_d)
        return float(min(1.0, N * self.bound[j]))


def kappa_alpha(alpha: float) -> float:
    return math.log(2) / (math.log(2) - math.log(1 - 2 * alpha))


def buckling_certify(inp: CertifierInput) -> CertifiedBound:
    """Iterate b_(k+1) = pi(r_(k+1)) + K b_k^2 from b_0 = eps on r_k = r0 / (1/2 - alpha)^k."""
    from .clusters import fit_curve
    eps = inp.eps
    if inp.theta_r0 is not None and inp.theta_r0 > eps:
        raise ValueError(f"certification refused: theta(r0) bound {inp.theta_r0:.3g} exceeds eps {eps:.3g}")
    if inp.pi_model == "stretched" and inp.exponent >= kappa_alpha(inp.alpha):
        raise ValueError(f"certification refused: stretched exponent {inp.exponent} >= {kappa_alpha(inp.alpha):.4g}")
    k = np.arange(inp.steps + 1)
    radii = inp.r0 / inp.shrink ** k
    pi = inp.pi(radii)
    b = np.empty(len(radii))
    b[0] = eps
    with np.errstate(over="ignore"):     # a diverging recursion is reported as invalid
        for i in range(1, len(radii)):
            b[i] = pi[i] + inp.K * b[i - 1] ** 2
    valid = bool(np.all(b <= eps))
    fit = None
    if inp.pi_model != "zero":
        try:
            fit = fit_curve(radii, b, "algebraic" if inp.pi_model == "algebraic" else "stretched")
        except ValueError:
            fit = None
    return CertifiedBound(radii, b, valid, fit, inp, {"K": inp.K, "eps": eps})
