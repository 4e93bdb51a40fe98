import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from contperc.geometry import Ball, Window
from contperc.inclusions import InclusionSet, ModelSpec, RadiusLaw
from contperc.point_processes import ProcessConfig
from contperc.radii import (_raster_radius, action_radius, agree_outside, boolean_radius_map,
                            dependence_constraint_ok, dependence_radius, radius_tail_bound)
from contperc.rng import SeedKey

SPEC = ModelSpec(ProcessConfig(0.5), "boolean", RadiusLaw.pareto(5.0, 0.4))
W = Window(12.0, guard=1.0)

# brute-force sum over all lattice sites |y| <= 1000 (see the oracle script in the decisions notes)
SHELL_SUM_ORACLE = 0.5076434909240678


def test_empty_cell_gives_zero_radius():
    sparse = ModelSpec(ProcessConfig(1e-9), "boolean", RadiusLaw.dirac(0.5))
    s = action_radius(sparse, W, (6, 6), SeedKey(1), 2)
    assert s.R == 0.0 and s.changed == 0


def test_single_ball_raster_matches_closed_form():
    z = np.array([6.0, 6.0])
    a = InclusionSet([Ball(z, 1.0), Ball([2, 2], 0.5)], W)
    b = InclusionSet([Ball([2, 2], 0.5)], W)
    h = 0.02
    R, cens = _raster_radius(a, b, z, "inclusions", None, h, W)
    assert 1.0 <= R <= 1.0 + h * math.sqrt(2) and not cens


def test_determinism():
    a = action_radius(SPEC, W, (5, 6), SeedKey(3), 11)
    b = action_radius(SPEC, W, (5, 6), SeedKey(3), 11)
    assert a == b


def test_closed_form_dominates_raster():
    # the raster radius reaches the far corner of the last differing cell
    h = 0.05
    for i in range(5):
        c = action_radius(SPEC, W, (6, 6), SeedKey(i), 100 + i)
        r = action_radius(SPEC, W, (6, 6), SeedKey(i), 100 + i, method="raster", pitch=h)
        assert r.R <= c.R + h * math.sqrt(2) + 1e-9


def test_radius_map_matches_single_site_resampling():
    seed, s2 = SeedKey(4), 99
    sites, R = boolean_radius_map(SPEC, W, seed, s2)
    for k in range(0, len(sites), 17):
        z = tuple(sites[k])
        assert R[k] == pytest.approx(action_radius(SPEC, W, z, seed, s2).R, abs=1e-12)


def test_dependence_radius_examples():
    assert dependence_radius([[3.0, 0.0]], [0.0], (0, 0), 1.0).R == 0.0
    r = 4.0
    dr = dependence_radius([[r + 2, 0.0]], [3.0], (0, 0), r)
    assert dr.R == pytest.approx(5.0)
    assert dependence_constraint_ok([[r + 2, 0.0]], [3.0], (0, 0), r, 5.0)
    assert not dependence_constraint_ok([[r + 2, 0.0]], [3.0], (0, 0), r, 5.0 - 1e-6)


def test_tail_bound_shell_sum():
    out = radius_tail_bound(1.0, 2.0, 2, 10.0, 10.0, cutoff=1000.0)
    assert out["head"] == pytest.approx(SHELL_SUM_ORACLE, rel=1e-12)
    full = radius_tail_bound(1.0, 2.0, 2, 10.0, 10.0)
    # the integral remainder is a rigorous over-estimate of the sites beyond the cutoff
    assert SHELL_SUM_ORACLE <= full["value"] <= SHELL_SUM_ORACLE + 1e-4


def test_tail_bound_monotone_and_vanishing():
    vals = [radius_tail_bound(1.0, 2.0, 2, 10.0, ell)["value"] for ell in (5, 10, 20, 40, 80, 1000)]
    assert all(b <= a + 1e-12 for a, b in zip(vals, vals[1:]))
    assert vals[-1] < 1e-4
    s = [radius_tail_bound(1.0, 0.5, 2, 5.0, ell, model="stretched")["value"] for ell in (5, 20, 80)]
    assert s[0] >= s[1] >= s[2]


sites_strategy = st.lists(st.tuples(st.integers(-10, 10), st.integers(-10, 10), st.floats(0, 8)), min_size=1,
                          max_size=30)


@given(sites_strategy, st.floats(0.5, 6), st.tuples(st.integers(-5, 5), st.integers(-5, 5)))
def test_dependence_radius_minimal_and_translation_covariant(items, r, shift):
    S = np.array([(x, y) for x, y, _ in items], float)
    R = np.array([v for *_, v in items])
    dr = dependence_radius(S, R, (0, 0), r)
    assert dependence_constraint_ok(S, R, (0, 0), r, dr.R)
    if dr.R > 1e-6:
        assert not dependence_constraint_ok(S, R, (0, 0), r, dr.R - 1e-6)
    moved = dependence_radius(S + shift, R, shift, r)
    assert moved.R == pytest.approx(dr.R, abs=1e-9)


@settings(max_examples=8)
@given(st.integers(0, 10**6), st.tuples(st.integers(3, 9), st.integers(3, 9)),
       st.sampled_from(["inclusions", "eta"]))
def test_action_radius_soundness(seed, z, target):
    s = action_radius(SPEC, W, z, SeedKey(seed), seed + 1, target, rho=0.3)
    assert agree_outside(SPEC, W, s, SeedKey(seed), rho=0.3, pitch=0.05)
