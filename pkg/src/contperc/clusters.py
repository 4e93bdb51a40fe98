"""rho-clusters of an inclusion set, typical-cluster tails, decay fits, smallness checks."""
from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree
from scipy.stats import norm

from .geometry import Window, point_shape_distance, points_radii_diameter, shape_distance
from .inclusions import InclusionSet, ModelSpec
from .rng import SeedKey


class UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, x: int) -> int:
        p = self.parent
        while p[x] != x:
            p[x] = p[p[x]]
            x = p[x]
        return x

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)

    def labels(self) -> np.ndarray:
        return np.array([self.find(i) for i in range(len(self.parent))], dtype=np.int64)


@dataclass(eq=False)
class ClusterDecomposition:
    rho: float
    labels: np.ndarray          # cluster index per inclusion
    clusters: list              # member index arrays, ordered by smallest member
    diameters: np.ndarray
    censored: np.ndarray
    offsets: np.ndarray = None  # periodic windows: unwrapping shift per inclusion
    wraps: np.ndarray = None    # periodic windows: cluster winds around the torus

    def __len__(self):
        return len(self.clusters)

    def partition(self) -> set:
        return {frozenset(c.tolist()) for c in self.clusters}


# --------------------------------------------------------------------------
# proximity graph


def _reach(incl: InclusionSet) -> np.ndarray:
    """Max distance from each anchor to a point of its shape."""
    if incl.all_balls:
        return incl.radii.copy()
    out = np.empty(len(incl))
    for i, s in enumerate(incl.shapes):
        P, R = s.extreme_points()
        out[i] = float((np.linalg.norm(P - s.anchor, axis=1) + R).max())
    return out


def _min_image(v, S):
    return v - S * np.round(v / S)


def close_pairs(incl: InclusionSet, rho: float):
    """Pairs (i, j), i < j, with shape distance < rho, and their displacement vectors."""
    n = len(incl)
    d = incl.window.dim
    if n < 2:
        return np.zeros((0, 2), dtype=np.int64), np.zeros((0, d))
    A = incl.centers
    reach = _reach(incl)
    W = incl.window
    cutoff = rho + 2.0 * reach.max()
    if W.periodic:
        if cutoff >= W.size / 2:
            raise ValueError("periodic window too small for the interaction range")
        tree = cKDTree(np.mod(A, W.size), boxsize=W.size)
    else:
        tree = cKDTree(A)
    pairs = tree.query_pairs(cutoff, output_type="ndarray")
    if len(pairs) == 0:
        return pairs.reshape(0, 2), np.zeros((0, d))
    vec = A[pairs[:, 1]] - A[pairs[:, 0]]
    if W.periodic:
        vec = _min_image(vec, W.size)
    gap = np.linalg.norm(vec, axis=1) - reach[pairs[:, 0]] - reach[pairs[:, 1]]
    keep = gap < rho
    pairs, vec = pairs[keep], vec[keep]
    if incl.all_balls:
        return pairs, vec
    ok = np.zeros(len(pairs), dtype=bool)
    for k, (i, j) in enumerate(pairs):
        ok[k] = shape_distance(incl.shapes[i], incl.shapes[j]) < rho
    return pairs[ok], vec[ok]


def _boundary_distance(incl: InclusionSet) -> np.ndarray:
    W = incl.window
    if incl.all_balls:
        return W.boundary_distance(incl.centers) - incl.radii
    out = np.empty(len(incl))
    for i, s in enumerate(incl.shapes):
        P, R = s.extreme_points()
        out[i] = float((W.boundary_distance(P) - R).min())
    return out


def decompose(incl: InclusionSet, rho: float) -> ClusterDecomposition:
    """Partition inclusions into rho-clusters (edge iff shape distance < rho)."""
    if not rho > 0:
        raise ValueError("rho must be positive")
    n = len(incl)
    if n == 0:
        return ClusterDecomposition(rho, np.zeros(0, dtype=np.int64), [], np.zeros(0), np.zeros(0, dtype=bool))
    pairs, vec = close_pairs(incl, rho)
    g = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
    _, lab = connected_components(g, directed=False)
    # relabel clusters in order of their smallest member
    first = np.full(lab.max() + 1, n)
    np.minimum.at(first, lab, np.arange(n))
    rank = np.argsort(np.argsort(first))
    lab = rank[lab]
    order = np.argsort(lab, kind="stable")
    splits = np.flatnonzero(np.diff(lab[order])) + 1
    clusters = np.split(order, splits)

    offsets = wraps = None
    if incl.window.periodic:
        offsets, wraps = _unwrap(incl, pairs, vec, lab, len(clusters))
    P_all, R_all, owner = _extremes(incl)
    start = np.searchsorted(owner, np.arange(n + 1))
    diam = np.asarray(incl.diameters, dtype=float)[[c[0] for c in clusters]]
    for c, members in enumerate(clusters):
        if wraps is not None and wraps[c]:
            diam[c] = np.inf
            continue
        if len(members) == 1:
            continue
        sel = np.concatenate([np.arange(start[i], start[i + 1]) for i in members])
        P = P_all[sel] if offsets is None else P_all[sel] + offsets[owner[sel]]
        diam[c] = points_radii_diameter(P, R_all[sel])
    if incl.window.periodic:
        censored = np.zeros(len(clusters), dtype=bool)
    else:
        own_diam = incl.diameters
        near = _boundary_distance(incl) < rho + own_diam
        near |= incl.boundary
        censored = np.zeros(len(clusters), dtype=bool)
        np.logical_or.at(censored, lab, near)
    return ClusterDecomposition(rho, lab, clusters, diam, censored, offsets, wraps)


def _extremes(incl: InclusionSet):
    if incl.all_balls:
        return incl.centers, incl.radii, np.arange(len(incl))
    pts, rad, own = [], [], []
    for i, s in enumerate(incl.shapes):
        P, R = s.extreme_points()
        pts.append(P)
        rad.append(R)
        own.append(np.full(len(P), i))
    return np.vstack(pts), np.concatenate(rad), np.concatenate(own)


def _unwrap(incl, pairs, vec, lab, m):
    """Consistent periodic shifts along a spanning forest; detect clusters that wind."""
    n = len(incl)
    A = incl.centers
    S = incl.window.size
    nbrs = [[] for _ in range(n)]
    for (i, j), v in zip(pairs, vec):
        nbrs[i].append((j, v))
        nbrs[j].append((i, -v))
    pos = np.full((n, A.shape[1]), np.nan)
    wraps = np.zeros(m, dtype=bool)
    for root in range(n):
        if not np.isnan(pos[root, 0]):
            continue
        pos[root] = A[root]
        stack = [root]
        while stack:
            i = stack.pop()
            for j, v in nbrs[i]:
                target = pos[i] + v
                if np.isnan(pos[j, 0]):
                    pos[j] = target
                    stack.append(j)
                elif np.abs(pos[j] - target).max() > 1e-6 * S:
                    wraps[lab[i]] = True
    return pos - A, wraps


# --------------------------------------------------------------------------
# typical cluster tails


def wilson_interval(k, n, z: float = 1.959963984540054):
    """Wilson score interval for k successes in n trials (vectorized)."""
    k = np.asarray(k, dtype=float)
    n = np.asarray(n, dtype=float)
    with np.errstate(invalid="ignore", divide="ignore"):
        p = np.where(n > 0, k / n, 0.0)
        denom = 1 + z * z / n
        centre = (p + z * z / (2 * n)) / denom
        half = z * np.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
        lo = np.where(n > 0, np.clip(centre - half, 0, 1), 0.0)
        hi = np.where(n > 0, np.clip(centre + half, 0, 1), 1.0)
    return lo, hi


@dataclass(eq=False)
class TailEstimate:
    statistic: str
    thresholds: np.ndarray
    values: np.ndarray          # observed statistic per usable replicate
    censored: np.ndarray        # censoring flag per usable replicate
    missing: int = 0
    seeds: list = field(default_factory=list)   # (seed, first, last) replicate ranges
    meta: dict = field(default_factory=dict)
    ids: np.ndarray = None      # (seed, replicate index) per value, uint64

    def __post_init__(self):
        if self.ids is None:
            self.ids = np.zeros((len(self.values), 2), dtype=np.uint64)
        self.ids = np.asarray(self.ids, dtype=np.uint64).reshape(-1, 2)
        self.thresholds = np.asarray(self.thresholds, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        self.censored = np.asarray(self.censored, dtype=bool)
        if np.any(np.diff(self.thresholds) <= 0):
            raise ValueError("thresholds must be increasing")

    @property
    def n(self) -> int:
        return len(self.values)

    @property
    def k_pess(self) -> np.ndarray:
        return ((self.values[None, :] > self.thresholds[:, None]) | self.censored[None, :]).sum(axis=1)

    @property
    def k_opt(self) -> np.ndarray:
        ok = ~self.censored
        return (self.values[None, ok] > self.thresholds[:, None]).sum(axis=1)

    @property
    def p_pess(self) -> np.ndarray:
        return self.k_pess / max(self.n, 1)

    @property
    def p_opt(self) -> np.ndarray:
        return self.k_opt / max(int((~self.censored).sum()), 1)

    @property
    def ci(self):
        return wilson_interval(self.k_pess, self.n)

    @property
    def censored_fraction(self) -> float:
        return float(self.censored.mean()) if self.n else 0.0

    def survival(self, which: str = "pessimistic") -> np.ndarray:
        return self.p_pess if which == "pessimistic" else self.p_opt

    def rows(self):
        lo, hi = self.ci
        n_cens = int(self.censored.sum())
        return [(float(r), float(a), float(b), float(c), float(e), self.n, n_cens)
                for r, a, b, c, e in zip(self.thresholds, self.p_pess, self.p_opt, lo, hi)]

    def to_dict(self) -> dict:
        return {"kind": "tail", "statistic": self.statistic, "thresholds": self.thresholds.tolist(),
                "values": self.values.tolist(), "censored": self.censored.astype(int).tolist(),
                "missing": int(self.missing), "seeds": [list(map(int, s)) for s in self.seeds],
                "meta": self.meta, "ids": self.ids.astype(int).tolist()}

    @classmethod
    def from_dict(cls, d) -> "TailEstimate":
        return cls(d["statistic"], d["thresholds"], d["values"], np.array(d["censored"], dtype=bool),
                   d["missing"], [tuple(s) for s in d["seeds"]], d["meta"],
                   np.array(d["ids"], dtype=np.uint64).reshape(-1, 2))

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write("r,p_pess,p_opt,ci_lo,ci_hi,n,censored\n")
            for row in self.rows():
                fh.write(",".join(repr(x) for x in row) + "\n")


def empirical_tail(values, thresholds, censored=None, statistic="diameter") -> TailEstimate:
    values = np.asarray(values, dtype=float)
    cens = np.zeros(len(values), dtype=bool) if censored is None else censored
    return TailEstimate(statistic, thresholds, values, cens)


def nearest_inclusion(incl: InclusionSet, x) -> tuple[int, float]:
    """Index of the inclusion closest to x (ties broken lexicographically by anchor)."""
    if incl.all_balls:
        dist = np.maximum(0.0, np.linalg.norm(incl.centers - x, axis=1) - incl.radii)
    else:
        dist = np.array([point_shape_distance(x, s) for s in incl.shapes])
    best = dist.min()
    cand = np.flatnonzero(dist <= best)
    if len(cand) > 1:
        A = incl.centers[cand]
        cand = cand[np.lexsort(A.T[::-1])]
    return int(cand[0]), float(best)


def _tail_replicate(args):
    spec, window, rho, seed = args
    incl = spec.realize(window, seed)
    if len(incl) == 0:
        return None
    i0, dist = nearest_inclusion(incl, window.center)
    if dist > window.size / 2 - window.guard:
        return None
    dec = decompose(incl, rho)
    c = dec.labels[i0]
    return float(dec.diameters[c]), bool(dec.censored[c]), seed.path[-1][1]


def _run(fn, jobs, workers):
    if workers and workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            return list(ex.map(fn, jobs, chunksize=max(1, len(jobs) // (8 * workers))))
    return [fn(j) for j in jobs]


def typical_cluster_tail(spec: ModelSpec, window: Window, rho: float, thresholds, replicates: int,
                         seed: SeedKey, workers: int = 1, first: int = 0) -> TailEstimate:
    """Diameter survival of the cluster containing the inclusion nearest the window center."""
    thresholds = np.asarray(thresholds, dtype=float)
    if window.guard < thresholds.max():
        raise ValueError("guard margin must be at least the largest threshold")
    jobs = [(spec, window, rho, seed.child("replicate", i)) for i in range(first, first + replicates)]
    out = _run(_tail_replicate, jobs, workers)
    got = [o for o in out if o is not None]
    vals = np.array([g[0] for g in got])
    cens = np.array([g[1] for g in got], dtype=bool)
    ids = np.array([(seed.seed, g[2]) for g in got], dtype=np.uint64).reshape(-1, 2)
    return TailEstimate("diameter", thresholds, vals, cens, missing=len(out) - len(got),
                        seeds=[(seed.seed, first, first + replicates)],
                        meta={"rho": rho, "model": spec.to_dict(), "window": window.to_dict()}, ids=ids)


# --------------------------------------------------------------------------
# decay fits


@dataclass
class DecayFit:
    model: str
    exponent: float             # kappa (algebraic) or gamma (stretched)
    constant: float             # C0 (algebraic) or C_gamma (stretched)
    fit_range: tuple
    residual: float
    decaying: bool = True
    ci: tuple = (np.nan, np.nan)
    stderr: float = np.nan


def _design(r, p, model):
    x = np.log(r)
    y = np.log(p) if model == "algebraic" else np.log(-np.log(p))
    return x, y


def _ols(x, y):
    X = np.column_stack([np.ones_like(x), x])
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    res = y - X @ coef
    return coef, res


def fit_curve(r, p, model: str = "algebraic") -> DecayFit:
    """Least-squares decay fit of a survival curve on the points with 0 < p < 1."""
    if model not in ("algebraic", "stretched"):
        raise ValueError("model must be 'algebraic' or 'stretched'")
    r = np.asarray(r, dtype=float)
    p = np.asarray(p, dtype=float)
    ok = (p > 0) & (p < 1)
    if not ok.any():
        raise ValueError("fit refused: every survival value is 0 or 1")
    if ok.sum() < 4:
        raise ValueError("fit refused: need at least 4 thresholds with 0 < p < 1")
    x, y = _design(r[ok], p[ok], model)
    coef, res = _ols(x, y)
    resid = float(np.linalg.norm(res))
    n = len(x)
    sxx = float(((x - x.mean()) ** 2).sum())
    stderr = float(np.sqrt((res @ res) / (n - 2) / sxx)) if n > 2 and sxx > 0 else np.nan
    if model == "algebraic":
        expo, const = -coef[1], float(np.exp(coef[0]))
    else:
        expo, const = coef[1], float(np.exp(-coef[0]))
    decaying = bool(expo > 1e-12) if model == "algebraic" else bool(np.ptp(p[ok]) > 0)
    if abs(expo) < 1e-12:
        expo = 0.0
    return DecayFit(model, float(expo), const, (float(r[ok][0]), float(r[ok][-1])), resid, decaying,
                    stderr=stderr)


def fit_decay(tail: TailEstimate, model: str = "algebraic", which: str = "pessimistic",
              bootstrap: int = 0, seed: SeedKey | None = None, level: float = 0.95) -> DecayFit:
    """Decay fit of a tail estimate; optional replicate-bootstrap CI for the exponent."""
    p = tail.survival(which)
    fit = fit_curve(tail.thresholds, p, model)
    if bootstrap:
        g = (seed or SeedKey(0)).generator()
        ok = (p > 0) & (p < 1)
        r = tail.thresholds[ok]
        vals, cens = tail.values, tail.censored
        est = []
        for _ in range(bootstrap):
            idx = g.integers(0, tail.n, tail.n)
            v, c = vals[idx], cens[idx]
            if which == "pessimistic":
                pb = ((v[None, :] > r[:, None]) | c[None, :]).mean(axis=1)
            else:
                pb = (v[None, ~c] > r[:, None]).mean(axis=1)
            good = (pb > 0) & (pb < 1)
            if good.sum() < 2:
                continue
            xb, yb = _design(r[good], pb[good], model)
            coef, _ = _ols(xb, yb)
            est.append(-coef[1] if model == "algebraic" else coef[1])
        if est:
            a = (1 - level) / 2
            fit.ci = (float(np.quantile(est, a)), float(np.quantile(est, 1 - a)))
    elif np.isfinite(fit.stderr):
        zq = norm.ppf(0.5 + level / 2)
        fit.ci = (fit.exponent - zq * fit.stderr, fit.exponent + zq * fit.stderr)
    return fit


# --------------------------------------------------------------------------
# smallness conditions


@dataclass
class SmallnessReport:
    L: float
    h0: float
    r0: float
    delta: float
    d: int
    lhs: float
    rhs: float
    holds: bool
    asymptotic: dict = None

    def to_dict(self):
        return {k: getattr(self, k) for k in ("L", "h0", "r0", "delta", "d", "lhs", "rhs", "holds", "asymptotic")}


def _p_at(tail, r0):
    """Pessimistic survival at the largest threshold <= r0 (an upper estimate at r0)."""
    if isinstance(tail, (int, float)):
        return float(tail)
    k = np.searchsorted(tail.thresholds, r0, side="right") - 1
    if k < 0:
        return 1.0
    return float(tail.p_pess[k])


def smallness_check(tails: dict, L: float, r0: float, d: int = 2, delta: float | None = None,
                    asymptotic: bool = False, rtol: float = 1e-12) -> SmallnessReport:
    """Evaluate  r0^(d-1) P[diam > r0] <= h0^d / L  (and the small-h form with delta).

    ``tails`` maps fattening radius h to a TailEstimate (or directly to a
    survival value at r0).  The plain condition uses the largest h as h0; the
    asymptotic one uses the smallest h as a stand-in for the limit h -> 0.
    """
    if L < 1:
        raise ValueError("L must be >= 1")
    if asymptotic and delta is None:
        raise ValueError("asymptotic smallness needs the interior-ball radius delta")
    hs = sorted(tails, reverse=True)
    h0 = hs[0]
    lhs = r0 ** (d - 1) * _p_at(tails[h0], r0)
    rhs = h0 ** d / L
    holds = lhs <= rhs * (1 + rtol)
    extra = None
    if asymptotic:
        ps = [_p_at(tails[h], r0) for h in hs]
        a_lhs = r0 ** (d - 1) * ps[-1]
        a_rhs = delta ** d / L
        extra = {"h": hs, "p": ps, "lhs": a_lhs, "rhs": a_rhs, "holds": a_lhs <= a_rhs * (1 + rtol),
                 "monotone_in_h": bool(np.all(np.diff(ps) <= 1e-12))}
    return SmallnessReport(L, h0, r0, delta if delta is not None else np.nan, d, lhs, rhs, bool(holds), extra)


def merge_tails(a: TailEstimate, b: TailEstimate) -> TailEstimate:
    """Pool two tail estimates with identical definitions and disjoint seed ranges."""
    if a.statistic != b.statistic or not np.array_equal(a.thresholds, b.thresholds) or a.meta != b.meta:
        raise ValueError("cannot merge estimates with different definitions")
    for s1, f1, l1 in a.seeds:
        for s2, f2, l2 in b.seeds:
            if s1 == s2 and f1 < l2 and f2 < l1:
                raise ValueError("cannot merge estimates with overlapping seed ranges")
    seeds = sorted(a.seeds + b.seeds)
    ids = np.vstack([a.ids, b.ids])
    vals = np.concatenate([a.values, b.values])
    cens = np.concatenate([a.censored, b.censored])
    # canonical order so that pooling is commutative and associative
    order = np.lexsort((vals, ids[:, 1], ids[:, 0]))
    return TailEstimate(a.statistic, a.thresholds, vals[order], cens[order], a.missing + b.missing, seeds,
                        dict(a.meta), ids[order])
