"""Acceptance criteria 1-9.

Each test reports a single PASS/FAIL line (see ``conftest.acceptance``) and
then asserts the criterion, including its runtime budget.
"""
import json
import math
import os
import time

import numpy as np
import shapely
from scipy import ndimage

from contperc.cli import main
from contperc.cluster_geometry import (ball_condition, build_cutoff, disjoint, envelope, fatten,
                                       fatten_decomposition, max_gradient, verify_ball_conditions)
from contperc.clusters import decompose, fit_curve, fit_decay, smallness_check, typical_cluster_tail, wilson_interval
from contperc.connectivity import (BernoulliCrossing, CertifierInput, InclusionCrossing, Region, SiteField,
                                   buckling_certify, connects, covering_check, discretize, renormalization_rhs,
                                   theta_estimate)
from contperc.effective import (assemble_field, bounds_check, contrast_sweep, effective_tensor, energy,
                                loewner_leq, trial_field)
from contperc.geometry import Ball, Window, set_diameter, shape_distance
from contperc.inclusions import (InclusionSet, ModelSpec, RadiusLaw, cell_diameters, hardcore_balls,
                                 voronoi_cells, voronoi_marked, voronoi_threshold)
from contperc.point_processes import (PointSample, ProcessConfig, admissible_probes, min_pair_distance,
                                      random_parking, sample_poisson, thin_matern)
from contperc.radii import (_raster_radius, action_radius, agree_outside, boolean_radius_map,
                            dependence_constraint_ok, dependence_radius, radius_tail_bound)
from contperc.rng import SeedKey

RHO = 0.2
PARETO = RadiusLaw.pareto(5.0, 0.5)
TAIL_WINDOW = Window(40.0, guard=16.0)
TAIL_SEEDS = {0.05: SeedKey(301), 0.1: SeedKey(302)}
SUBCRITICAL = ModelSpec(ProcessConfig(0.6), "boolean", RadiusLaw.dirac(0.5))


# --------------------------------------------------------------------------
# criterion 1: deterministic rule oracles


def _points(P, marks=None, size=10.0, aux=None):
    P = np.array(P, float).reshape(-1, 2)
    marks = np.linspace(0.1, 0.9, len(P)) if marks is None else np.array(marks, float)
    return PointSample(P, marks, Window(size), SeedKey(0), aux)


def _as_set(sample):
    return {tuple(np.round(p, 9)) for p in sample.points}


def _disk(c, r, h=0.01, n=200):
    x = (np.arange(n) + 0.5) * h
    X, Y = np.meshgrid(x, x, indexing="ij")
    return (X - c[0]) ** 2 + (Y - c[1]) ** 2 <= r * r


def _rule_examples():
    two = [Ball([0, 0], 0.5), Ball([1.2, 0], 0.5)]
    pair = InclusionSet([Ball([5, 5], 0.5), Ball([6.2, 5], 0.5)], Window(20.0))
    dec03, dec015 = decompose(pair, 0.3), decompose(pair, 0.15)
    s1 = _points([(0, 0), (0.5, 0), (3, 0)], [0.1, 0.2, 0.3])
    s3 = _points([(0, 0), (0.8, 0), (1.6, 0)], [0.3, 0.2, 0.1])
    strip = voronoi_marked(_points([(0, 0), (1, 0), (2, 0)], size=2.0,
                                   aux=np.array([[0.5, 0.9], [0.5, 0.1], [0.5, 0.9]])), 0.5, Window(2.0))
    g = np.array([(i + 0.5, j + 0.5) for i in range(5) for j in range(5)])
    cells = voronoi_cells(_points(g, size=5.0), Window(5.0))
    plus, _ = voronoi_threshold(_points(g, size=5.0), 2.0, 1e9, Window(5.0))
    hc = hardcore_balls(_points([(1, 1), (2, 1), (1.5, 1 + math.sqrt(0.75))]), 0.4)
    lo, hi = wilson_interval(2, 4)
    r = np.array([2.0, 4.0, 8.0, 16.0])
    r1 = np.array([1.0, 2.0, 4.0, 8.0])
    small = smallness_check({0.1: 1e-4}, L=10.0, r0=10.0)
    # site field of a close pair: exactly the cubes meeting either ball
    b1, b2 = Ball([5.01, 5.02], 0.5), Ball([6.13, 4.97], 0.5)
    f = discretize(InclusionSet([b1, b2], Window(10.0)), 0.3)
    idx = np.argwhere(np.ones(f.values.shape, bool))
    clo = f.origin + f.pitch * idx
    meet = np.zeros(len(idx), bool)
    for b in (b1, b2):
        gap = np.maximum(0, np.maximum(clo - b.center, b.center - (clo + f.pitch)))
        meet |= np.sqrt((gap ** 2).sum(axis=1)) <= b.radius
    v = np.zeros((6, 6), bool)
    v[0, 0:5] = True
    v[0:6, 4] = True
    A = np.zeros_like(v)
    A[0, 0] = True
    B = np.zeros_like(v)
    B[5, 4] = True
    corridor = connects(SiteField(v, 1.0, [0, 0]), Region.cubes(A), Region.cubes(B))
    v[2, 4] = False
    cut = connects(SiteField(v, 1.0, [0, 0]), Region.cubes(A), Region.cubes(B))
    inp = CertifierInput(0.25, 1.0, 2, 0.5, c_d=16.0)
    W12 = Window(12.0, guard=1.0)
    z = np.array([6.0, 6.0])
    Rr, _ = _raster_radius(InclusionSet([Ball(z, 1.0), Ball([2, 2], 0.5)], W12),
                           InclusionSet([Ball([2, 2], 0.5)], W12), z, "inclusions", None, 0.02, W12)
    dr = dependence_radius([[6.0, 0.0]], [3.0], (0, 0), 4.0)
    ring = lambda c: _disk(c, 0.35) & ~_disk(c, 0.15)     # noqa: E731
    env = envelope(ring((0.5, 0.5)) | ring((1.4, 1.4)))
    fc = fatten(_disk((1, 1), 0.4), 0.1, 0.01)
    area_r = lambda m: math.sqrt(m.sum() * 1e-4 / math.pi)   # noqa: E731
    J1 = fc.J1.copy()
    x = (np.arange(200) + 0.5) * 0.01
    X, Y = np.meshgrid(x, x, indexing="ij")
    J1 |= (np.abs(Y - 1.0) < 0.02) & (X > 1.4) & (X < 1.75)
    lam = np.where((np.arange(64) + 0.5) / 64 < 0.5, 4.0, 1.0)
    lam_t = effective_tensor(assemble_field(np.ascontiguousarray(np.broadcast_to((lam > 1)[:, None], (64, 64))),
                                            4.0, 64))
    return {
        "ball distance 0.2": abs(shape_distance(*two) - 0.2) < 1e-12,
        "pair diameter 2.2": abs(set_diameter(two) - 2.2) < 1e-12,
        "Matern I fixture": _as_set(thin_matern(s1, 1, 1.0)) == {(3.0, 0.0)},
        "Matern II triple": _as_set(thin_matern(s3, 2, 1.0)) == {(1.6, 0.0)},
        "Matern III triple": _as_set(thin_matern(s3, 3, 1.0)) == {(0.0, 0.0), (1.6, 0.0)},
        "parking capacity (0.7 box)": all(len(random_parking(Window(0.7), 1.0, SeedKey(i))) == 1 for i in range(3)),
        "0.9 box admits two points": len(admissible_probes(np.zeros((1, 2)), Window(0.9), 1.0, 0.01)[0]) > 0,
        "Voronoi collinear strip": len(strip) == 1
        and strip.shapes[0].geom.symmetric_difference(shapely.box(0.5, 0, 1.5, 2.0)).area < 1e-12,
        "grid cells sqrt(2), none above 2": bool(np.allclose(cell_diameters(cells), math.sqrt(2))) and len(plus) == 0,
        "hardcore balls gap 0.2": abs(min(shape_distance(a, b) for i, a in enumerate(hc.shapes)
                                          for b in hc.shapes[i + 1:]) - 0.2) < 1e-12,
        "gap 0.2 < rho 0.3: one cluster of diameter 2.2": len(dec03) == 1 and abs(dec03.diameters[0] - 2.2) < 1e-12,
        "gap 0.2 >= rho 0.15: two clusters": len(dec015) == 2,
        "Wilson (0.150, 0.850)": (round(float(lo), 3), round(float(hi), 3)) == (0.150, 0.850),
        "algebraic fit exponent 2": abs(fit_curve(r, r ** -2.0).exponent - 2.0) < 1e-9,
        "stretched fit exponent 1": abs(fit_curve(r1, np.exp(-r1), "stretched").exponent - 1.0) < 1e-9,
        "smallness with equality": abs(small.lhs - 1e-3) < 1e-15 and abs(small.rhs - 1e-3) < 1e-15 and small.holds,
        "close pair marks meeting cubes": bool(np.array_equal(f.values.ravel(), meet)),
        "L corridor connects, cut does not": corridor and not cut,
        "renormalization value 46.18": abs(renormalization_rhs(inp, 16.0, 0.2, 0.3, 0.1, ell=4.0) - 46.18) < 1e-9,
        "raster action radius of a unit ball": 1.0 <= Rr <= 1.0 + 0.02 * math.sqrt(2),
        "dependence radius value 5": abs(dr.R - 5.0) < 1e-12,
        "dependence radius minimal": dependence_constraint_ok([[6.0, 0.0]], [3.0], (0, 0), 4.0, dr.R)
        and not dependence_constraint_ok([[6.0, 0.0]], [3.0], (0, 0), 4.0, dr.R - 1e-6),
        "two annuli fill to two disks": bool(np.array_equal(env, _disk((0.5, 0.5), 0.35) | _disk((1.4, 1.4), 0.35))),
        "disk fattening radii": abs(area_r(fc.J1) - 0.45) <= 0.01 and abs(area_r(fc.J2) - 0.5) <= 0.01,
        "sliver violates the interior condition": not ball_condition(J1, 0.15, 0.01)["holds"],
        "disk cutoff gradient <= 4/rho": max_gradient(build_cutoff(fc), 0.01) <= 40.0,
        "laminate harmonic mean 1.6": abs(lam_t.matrix[0, 0] - 1.6) < 1e-6,
    }


def test_criterion_1_rule_oracles(acceptance):
    t0 = time.perf_counter()
    res = _rule_examples()
    dt = time.perf_counter() - t0
    bad = [k for k, ok in res.items() if not ok]
    ok = not bad and dt < 1.0
    acceptance(1, ok, f"{len(res) - len(bad)}/{len(res)} examples exact, {dt:.2f} s (budget 1 s)"
               + (f"; failing: {bad}" if bad else ""))
    assert ok


# --------------------------------------------------------------------------
# criterion 2: Matern chain


def test_criterion_2_matern_chain(acceptance):
    t0 = time.perf_counter()
    W = Window(20.0, guard=2.0)
    chain_bad = sep_bad = 0
    sizes = np.zeros(3)
    for i in range(1000):
        base = sample_poisson(ProcessConfig(1.0), W, SeedKey(2000 + i))
        thin = [thin_matern(base, v, 1.0) for v in (1, 2, 3)]
        sets = [_as_set(t) for t in thin]
        chain_bad += not (sets[0] <= sets[1] <= sets[2])
        sep_bad += sum(len(t) > 1 and min_pair_distance(t.points) < 1.0 for t in thin)
        sizes += [len(t) for t in thin]
    dt = time.perf_counter() - t0
    ok = chain_bad == 0 and sep_bad == 0 and dt < 60
    acceptance(2, ok, f"chain violations {chain_bad}, separation violations {sep_bad} on 1000 realizations; "
                      f"mean sizes I/II/III {np.round(sizes / 1000, 1).tolist()}; {dt:.0f} s (budget 60 s)")
    assert ok


# --------------------------------------------------------------------------
# criterion 3: cluster-diameter decay


def test_criterion_3_cluster_decay(acceptance):
    t0 = time.perf_counter()
    lines, ok = [], True
    thresholds = [2.0, 3.0, 4.0, 6.0, 8.0, 11.0, 16.0]
    for lam, seed in TAIL_SEEDS.items():
        spec = ModelSpec(ProcessConfig(lam), "boolean", PARETO)
        tail = typical_cluster_tail(spec, TAIL_WINDOW, RHO, thresholds, 10_000, seed)
        fit = fit_decay(tail, "algebraic", bootstrap=400, seed=seed.child("bootstrap"))
        good = fit.exponent >= 2.5 and fit.ci[0] >= 2.5 and tail.censored_fraction < 0.01
        ok &= good
        lines.append(f"Pareto lam={lam}: kappa {fit.exponent:.2f} CI [{fit.ci[0]:.2f}, {fit.ci[1]:.2f}], "
                     f"censored {tail.censored_fraction:.4f}")
    for lam in TAIL_SEEDS:
        spec = ModelSpec(ProcessConfig(lam), "boolean", RadiusLaw.dirac(0.5))
        tail = typical_cluster_tail(spec, Window(30.0, guard=10.0), RHO, [1.5, 2, 2.5, 3, 3.5, 4, 5, 6, 8],
                                    10_000, SeedKey(310))
        fit = fit_decay(tail, "stretched")
        ok &= fit.exponent >= 0.7 and tail.censored_fraction < 0.01
        lines.append(f"dirac lam={lam}: gamma {fit.exponent:.2f}")
    dt = time.perf_counter() - t0
    ok &= dt < 600
    acceptance(3, ok, "; ".join(lines) + f"; {dt:.0f} s (budget 600 s)")
    assert ok


# --------------------------------------------------------------------------
# criterion 4: crossing probabilities, covering, renormalization


def enumerate_crossing(p, rows=4, cols=5):
    """Exact left-to-right face-crossing probability of a rows x cols Bernoulli grid (all 2^k states)."""
    k = rows * cols
    v = np.arange(2 ** k, dtype=np.uint32)
    col = lambda j: np.uint32(sum(1 << (i * cols + j) for i in range(rows)))   # noqa: E731
    full = np.uint32(2 ** k - 1)
    reach = v & col(0)
    while True:
        nxt = (reach | ((reach << 1) & ~col(0)) | ((reach >> 1) & ~col(cols - 1))
               | (reach << cols) | (reach >> cols)) & v & full
        if np.array_equal(nxt, reach):
            break
        reach = nxt
    hit = (reach & col(cols - 1)) != 0
    ones = np.unpackbits(v.view(np.uint8).reshape(-1, 4), axis=1).sum(axis=1)
    return float((p ** ones[hit] * (1 - p) ** (k - ones[hit])).sum())


def test_criterion_4_crossing_machinery(acceptance):
    t0 = time.perf_counter()
    # (i) estimator versus exhaustive enumeration
    A = np.zeros((4, 5), bool)
    A[:, 0] = True
    B = np.zeros((4, 5), bool)
    B[:, -1] = True
    part1 = []
    for j, p in enumerate((0.3, 0.5, 0.7)):
        exact = enumerate_crossing(p)
        n = 4000
        est = theta_estimate(BernoulliCrossing(p, (4, 5), A, B), 0.25, [1.0], n, SeedKey(400).child("p", j))
        sig = math.sqrt(exact * (1 - exact) / n)
        part1.append((p, exact, float(est.theta[0]), abs(est.theta[0] - exact) <= 3 * sig))
    ok1 = all(x[3] for x in part1)
    # (ii) covering and (iii) renormalization on the subcritical fixture
    outer = np.arange(20.0, 33.0, 2.0)
    radii = np.concatenate([outer / 4, outer])
    W = Window(72.0, guard=4.0)
    est = theta_estimate(InclusionCrossing(SUBCRITICAL, W, RHO), 0.25, radii, 2000, SeedKey(401))
    cov = covering_check(est)
    ok2 = cov["fraction_holding"] >= 0.95
    maps = 200
    big = np.zeros(len(outer))
    for i in range(maps):
        sites, R = boolean_radius_map(SUBCRITICAL, W, SeedKey(402).child("map", i), SeedKey(403).child("map", i),
                                      "eta", RHO)
        for k, r in enumerate(outer):
            big[k] += dependence_radius(sites, R, W.center, r / 2).R > r / 4
    pi_hi = wilson_interval(big, maps)[1]
    lo, hi = est.ci
    inp = CertifierInput(0.25, 1.0)
    holds = []
    for k, r in enumerate(outer):
        if big[k] / maps > 0.5:
            holds.append(False)
            continue
        j, i = est.at(r), est.at(r / 4)
        rhs = renormalization_rhs(inp, r, hi[i], hi[i], min(0.5, float(pi_hi[k])), ell=r / 4)
        holds.append(bool(lo[j] <= rhs))
    ok3 = np.mean(holds) >= 0.95
    dt = time.perf_counter() - t0
    ok = ok1 and ok2 and ok3 and dt < 900
    acceptance(4, ok, "(i) " + ", ".join(f"p={p}: exact {e:.4f} est {t:.4f}" for p, e, t, _ in part1)
               + f"; (ii) covering holds on {cov['fraction_holding']:.0%} of {len(cov['pairs'])} pairs"
               + f"; (iii) renormalization holds on {np.mean(holds):.0%} of {len(holds)} triples "
                 f"(max P[R > l] = {big.max() / maps:.3f}); {dt:.0f} s (budget 900 s)")
    assert ok


# --------------------------------------------------------------------------
# criterion 5: buckling certifier


def test_criterion_5_buckling(acceptance):
    t0 = time.perf_counter()
    zero = buckling_certify(CertifierInput(0.25, 1.0, steps=10))
    eps = zero.inp.eps
    k = np.arange(11)
    target = eps * 2.0 ** -(2.0 ** k - 1)
    ok_a = bool(np.all(zero.bound <= target)) and zero.valid
    alg = buckling_certify(CertifierInput(0.25, 1.0, pi_model="algebraic", C0=1e-4, exponent=3.0, steps=8))
    ok_b = alg.valid and alg.fit.exponent >= 2.9
    t_rec = time.perf_counter() - t0
    # empirical comparison on a sparse subcritical fixture
    spec = ModelSpec(ProcessConfig(0.2), "boolean", RadiusLaw.dirac(0.5))
    W = Window(36.0, guard=4.0)
    radii = [8.0, 12.0, 16.0]
    est = theta_estimate(InclusionCrossing(spec, W, RHO), 0.25, radii, 13_000, SeedKey(500))
    lo, hi = est.ci
    # site-field action radii of dirac 0.5 balls are at most 0.5 sqrt(2) + 1.2 + 0.5 + one site diagonal,
    # so beyond the first grid radius (l = 8) the dependence radius never exceeds l and pi vanishes
    maps = 50
    exceed = sum(dependence_radius(*boolean_radius_map(spec, W, SeedKey(501).child("m", i), SeedKey(502).child("m", i),
                                                       "eta", RHO), W.center, 16.0).R > 8.0 for i in range(maps))
    cert = buckling_certify(CertifierInput(0.25, radii[0], theta_r0=float(hi[0]), steps=10))
    cmp_ok = all(cert.bound_at(r) >= lo[est.at(r)] for r in radii)
    ok_c = cert.valid and cmp_ok and exceed == 0
    ok = ok_a and ok_b and ok_c and t_rec < 60
    acceptance(5, ok, f"zero pi: b_k <= eps 2^-(2^k-1) for k <= 10: {ok_a}; algebraic pi: fitted exponent "
                      f"{alg.fit.exponent:.3f}; measured theta {est.theta.tolist()} (upper {hi[0]:.2e} <= eps "
                      f"{eps:.3e}) under certified {[f'{cert.bound_at(r):.2e}' for r in radii]}; "
                      f"recursion {t_rec * 1e3:.0f} ms (budget 60 s)")
    assert ok


# --------------------------------------------------------------------------
# criterion 6: action and dependence radii


def test_criterion_6_radii(acceptance):
    t0 = time.perf_counter()
    W = Window(16.0, guard=4.0)
    specs = [ModelSpec(ProcessConfig(0.5), "boolean", RadiusLaw.pareto(5.0, 0.4)), SUBCRITICAL]
    g = SeedKey(600).generator()
    viol = 0
    for i in range(1000):
        spec = specs[i % 2]
        target = "inclusions" if i % 4 < 2 else "eta"
        z = tuple(int(c) for c in g.integers(4, 13, 2))
        s = action_radius(spec, W, z, SeedKey(601).child("a", i), 10_000 + i, target, RHO)
        viol += not agree_outside(spec, W, s, SeedKey(601).child("a", i), RHO, 0.05)
    # minimality scan against a grid search of the defining constraint
    scan_bad = 0
    step = 1e-3
    for i in range(1000):
        m = int(g.integers(1, 30))
        sites = g.uniform(-10, 10, (m, 2))
        R = np.where(g.random(m) < 0.3, 0.0, g.exponential(2.0, m))
        z, r = g.uniform(-3, 3, 2), float(g.uniform(0.5, 5))
        dr = dependence_radius(sites, R, z, r).R
        grid = np.arange(0.0, dr + 2 * step, step)
        first = next(x for x in grid if dependence_constraint_ok(sites, R, z, r, x))
        good = dependence_constraint_ok(sites, R, z, r, dr) and first - step <= dr <= first
        if dr > 0:
            good &= not dependence_constraint_ok(sites, R, z, r, dr - 1e-6)
        scan_bad += not good
    # empirical dependence-radius tail against the shell-sum bound
    spec = ModelSpec(ProcessConfig(0.1), "boolean", PARETO)
    Wt = Window(40.0, guard=4.0)
    r, ells = 4.0, np.array([0.5, 1.0, 2.0, 4.0, 8.0, 16.0])
    pooled, deps = [], []
    for i in range(300):
        sites, R = boolean_radius_map(spec, Wt, SeedKey(603).child("m", i), SeedKey(604).child("m", i), "eta", RHO)
        inner = np.all((sites >= 8) & (sites <= 32), axis=1)
        pooled.append(R[inner])
        deps.append(dependence_radius(sites, R, Wt.center, r).R)
    pooled, deps = np.concatenate(pooled), np.array(deps)
    ts = np.geomspace(1.0, 8.0, 12)
    C0 = float(max(wilson_interval((pooled > t).sum(), len(pooled))[1] * t ** 5 for t in ts))
    emp = np.array([(deps > ell).mean() for ell in ells])
    bound = np.array([radius_tail_bound(C0, 3.0, 2, r, ell)["value"] for ell in ells])
    tail_ok = bool(np.all(emp <= bound))
    dt = time.perf_counter() - t0
    ok = viol == 0 and scan_bad == 0 and tail_ok and dt < 300
    acceptance(6, ok, f"soundness violations {viol}/1000; minimality failures {scan_bad}/1000; "
                      f"tail (C0={C0:.3g}) empirical {np.round(emp, 3).tolist()} vs bound "
                      f"{[float(f'{b:.3g}') for b in bound]}; {dt:.0f} s (budget 300 s)")
    assert ok


# --------------------------------------------------------------------------
# criterion 7: fattened cluster geometry


def test_criterion_7_cluster_geometry(acceptance):
    t0 = time.perf_counter()
    rf = RHO / 2
    pitch = rf / 10
    box = 6.0
    n_dec = n_cl = 0
    fails = {"nested": 0, "disjoint": 0, "layer_connected": 0, "balls": 0, "gradient": 0}
    refilled = []
    worst = 0.0
    for lam, seed in TAIL_SEEDS.items():
        spec = ModelSpec(ProcessConfig(lam), "boolean", PARETO)
        for i in range(500):
            incl = spec.realize(TAIL_WINDOW, seed.child("replicate", i))
            n_dec += 1
            if len(incl) == 0:
                continue
            dec = decompose(incl, RHO)
            ctr = TAIL_WINDOW.center
            sel = [k for k, m in enumerate(dec.clusters)
                   if np.all(np.abs(incl.centers[m] - ctr) <= box / 2, axis=1).any()]
            fcs = fatten_decomposition(incl, dec, rf, pitch, sel)
            n_cl += len(fcs)
            for k, fc in fcs:
                rep = verify_ball_conditions(fc)
                fails["nested"] += not rep["nested"]
                fails["layer_connected"] += not rep["layer_connected"]
                fails["balls"] += not all(rep[k]["holds"] for k in ("J1_interior", "J1_exterior", "J2_interior",
                                                                    "J2_exterior", "layer_interior"))
                gmax = max_gradient(build_cutoff(fc), pitch)
                worst = max(worst, gmax)
                fails["gradient"] += gmax > 4 / rf
                if not rep["all"]:
                    # diagnostic only: the same cluster with the holes of J_tilde + 2 rho B filled
                    alt = fatten_decomposition(incl, dec, rf, pitch, [k], refill=True)[0][1]
                    hole = ndimage.label(ndimage.binary_fill_holes(fc.J2) & ~fc.J2)[1] > 0
                    refilled.append((hole, verify_ball_conditions(alt)["all"]))
            fails["disjoint"] += not disjoint(fcs, tol_cells=1)["disjoint"]
    dt = time.perf_counter() - t0
    ok = not any(fails.values()) and dt < 600
    note = (f"; of the {len(refilled)} failing clusters {sum(h for h, _ in refilled)} have a hole in J2 created "
            f"by the 2 rho dilation and {sum(r for _, r in refilled)} pass once it is filled (diagnostic, "
            f"not the defined sets)" if refilled else "")
    acceptance(7, ok, f"{n_cl} clusters from {n_dec} decompositions; failures {fails}; "
                      f"max gradient {worst:.1f} <= {4 / rf:.0f}; {dt:.0f} s (budget 600 s)" + note)
    assert ok


# --------------------------------------------------------------------------
# criterion 8: effective coefficient


def _hardcore(seed):
    spec = ModelSpec(ProcessConfig(2.0, 1.0, "matern2"), "hardcore_balls", radius=0.4)
    return spec.realize(Window(8.0, 2, "periodic"), SeedKey(seed))


def _labels(n, geo):
    x = (np.arange(n) + 0.5) / n
    if geo == "laminate":
        lab = np.broadcast_to((x < 0.5)[:, None], (n, n))
    elif geo == "checkerboard":
        lab = (x < 0.5)[:, None] ^ (x < 0.5)[None, :]
    else:
        lab = np.broadcast_to((np.abs(x - 0.5) < 0.125)[None, :], (n, n))
    return np.ascontiguousarray(lab)


def test_criterion_8_effective_coefficient(acceptance):
    t0 = time.perf_counter()
    n = 256
    parts = {}
    bounds_ok = True
    hom = effective_tensor(assemble_field(np.zeros((n, n), bool), 7.0, n))
    parts["homogeneous"] = (float(np.abs(hom.matrix - np.eye(2)).max()) <= 1e-10, "identity")
    f = assemble_field(_labels(n, "laminate"), 4.0, n)
    lt = effective_tensor(f)
    err = float(np.abs(lt.matrix - np.diag([1.6, 2.5])).max())
    parts["laminate"] = (err <= 1e-6, f"error {err:.1e}")
    bounds_ok &= bounds_check(f, lt)["ok"]
    f = assemble_field(_labels(n, "checkerboard"), 100.0, n)
    ct = effective_tensor(f)
    val = float(ct.eigenvalues.mean())
    # diagnostic: the arithmetic face rule converges to 10 from above; the product of the two is ~100
    dual = float(effective_tensor(f.with_faces("arithmetic")).eigenvalues.mean())
    parts["checkerboard"] = (abs(val - 10.0) <= 0.2, f"{val:.2f} vs 10; arithmetic faces {dual:.2f}, "
                                                     f"geometric mean {math.sqrt(val * dual):.2f}")
    bounds_ok &= bounds_check(f, ct)["ok"]
    # truncation monotonicity with per-inclusion contrasts
    m = 128
    pairs = 0
    mono = True
    for s in range(5):
        inc = _hardcore(800 + s)
        lam = np.exp(SeedKey(810 + s).generator().uniform(math.log(2), math.log(1000), len(inc)))
        full = assemble_field(inc, lam, m)
        top = effective_tensor(full)
        bounds_ok &= bounds_check(full, top)["ok"]
        for cut in (5.0, 30.0, 200.0, 600.0):
            tr = full.truncated(cut)
            low = effective_tensor(tr)
            bounds_ok &= bounds_check(tr, low)["ok"]
            mono &= loewner_leq(low.matrix, top.matrix)
            pairs += 1
    parts["monotone"] = (mono, f"{pairs} pairs")
    # sweeps with Reuss / Voigt / trial-field bounds
    inc = _hardcore(1)
    contrasts = [10.0, 100.0, 1000.0, 10000.0]
    sweep = contrast_sweep(lambda c: assemble_field(inc, c, n), contrasts)
    phis = [trial_field(inc, n, RHO, E)[0] for E in np.eye(2)]
    finite = all(p is not None for p in phis)
    trial = []
    for c, M in zip(contrasts, sweep["tensors"]):
        fc = assemble_field(inc, c, n)
        tb = [energy(fc, p, E) for p, E in zip(phis, np.eye(2))] if finite else None
        trial.append(tb)
        bounds_ok &= bounds_check(fc, M, tb)["ok"]
    trial_const = finite and np.allclose(trial[1], trial[-1], rtol=1e-9)
    parts["hardcore plateau"] = (sweep["plateau"], f"largest {np.round(sweep['largest'], 4).tolist()}")
    parts["trial field"] = (finite and trial_const, f"bounds {np.round(trial[-1], 3).tolist()} at every contrast")
    stripe = contrast_sweep(lambda c: assemble_field(_labels(n, "stripe"), c, n), contrasts)
    ratios = [b / a for a, b in zip(stripe["largest"], stripe["largest"][1:])]
    parts["stripe growth"] = (min(ratios) >= 5, f"ratios {np.round(ratios, 2).tolist()}")
    for c in contrasts:
        fs = assemble_field(_labels(n, "stripe"), c, n)
        bounds_ok &= bounds_check(fs, effective_tensor(fs))["ok"]
    parts["bounds"] = (bool(bounds_ok), "Reuss/Voigt/trial")
    dt = time.perf_counter() - t0
    ok = all(v[0] for v in parts.values()) and dt < 1200
    acceptance(8, ok, "; ".join(f"{k} {'ok' if v[0] else 'FAILED'} ({v[1]})" for k, v in parts.items())
               + f"; {dt:.0f} s (budget 1200 s)")
    assert ok


# --------------------------------------------------------------------------
# criterion 9: reproducibility


CONFIG = """
stages = ["generate", "clusters", "tail", "connectivity", "certify", "radii", "fatten", "effcoef"]
seed = 9
replicates = 40
rho = 0.2
thresholds = [1.0, 2.0, 3.0, 4.0]

[model]
process = "poisson"
intensity = 0.3
inclusion = "boolean"
law = { variant = "pareto", exponent = 5.0, scale = 0.5 }

[window]
size = 16.0
guard = 4.0

[connectivity]
alpha = 0.25
radii = [2.0, 4.0]

[certify]
alpha = 0.25
r0 = 1.0

[radii]
cells = [[8, 8], [6, 9]]

[fatten]
box = 6.0

[effcoef]
n = 32
geometry = "inclusions"
contrasts = [10.0, 100.0]
"""


def _artifacts(d):
    return {f: (d / f).read_bytes() for f in sorted(os.listdir(d)) if f != "manifest.json"}


def test_criterion_9_reproducibility(acceptance, tmp_path):
    cfg = tmp_path / "exp.toml"
    cfg.write_text(CONFIG)
    codes = [main(["run", "--config", str(cfg), "--out", str(tmp_path / "w1"), "--workers", "1"]),
             main(["run", "--config", str(cfg), "--out", str(tmp_path / "w2"), "--workers", "2"]),
             main(["run", "--config", str(tmp_path / "w1" / "manifest.json"), "--out", str(tmp_path / "replay")])]
    a, b, c = (_artifacts(tmp_path / d) for d in ("w1", "w2", "replay"))
    man = json.loads((tmp_path / "w1" / "manifest.json").read_text())
    ok = codes == [0, 0, 0] and len(a) > 0 and a == b == c and [s["stage"] for s in man["stages"]] == \
        json.loads(json.dumps(man["config"]["stages"]))
    acceptance(9, ok, f"exit codes {codes}; {len(a)} artifacts byte-identical across 1 and 2 workers and "
                      f"manifest replay: {a == b == c}")
    assert ok
