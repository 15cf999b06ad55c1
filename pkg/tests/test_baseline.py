import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import SequenceTree
from surfseg.baseline import (
    DpConfig,
    build_costs,
    check_constraints,
    objective,
    segment_volume_dp,
    solve_slice,
)
from surfseg.errors import ContractError, InfeasibleError
from surfseg.synthdata import Volume

WEIGHTS = np.array([0.0, 0.5, 1.0, 2.0])


def random_instance(rng, lam, X, Z):
    costs = rng.integers(-5, 6, size=(lam, X, Z)).astype(float)
    w = tuple(float(v) for v in rng.choice(WEIGHTS, size=lam))
    return costs, w


def check_against_tree(tree, costs, cfg):
    objs = tree.objectives(costs, cfg.smooth_weight)
    leaf = int(np.argmin(objs))  # first minimum = lexicographically smallest
    surf, best = solve_slice(costs, cfg)
    assert best == objs[leaf]
    assert np.array_equal(surf, tree.sequence(leaf))
    assert objective(costs, surf, cfg) == best
    assert check_constraints(surf, cfg) == 0


# -- costs --------------------------------------------------------------------

def test_constant_image_zero_costs():
    assert not build_costs(np.full((5, 9), 0.3), DpConfig()).any()


def test_step_image_minimum_at_edge():
    img = np.zeros((4, 20))
    img[:, 8:] = 1.0  # dark above, bright below
    c = build_costs(img, DpConfig())
    assert c.shape == (2, 4, 20)
    # surface 1 (dark-to-bright) prefers the edge rows, ties resolved by argmin
    assert np.all(np.argmin(c[0], axis=1) == 7)
    assert c[0, 0, 7] == c[0, 0, 8] == -0.5
    # surface 2 has the opposite polarity so the step is its worst row
    assert np.all(c[1, :, 7] == 0.5)


def test_costs_match_direct_differences():
    rng = np.random.default_rng(0)
    img = rng.normal(size=(6, 11))
    cfg = DpConfig()
    c = build_costs(img, cfg)
    Z = img.shape[1]
    for i, s in enumerate(cfg.cost_sign):
        for x in range(6):
            for z in range(Z):
                up, down = img[x, max(z - 1, 0)], img[x, min(z + 1, Z - 1)]
                assert abs(c[i, x, z] - (-s * (down - up) / 2)) < 1e-12


# -- solver -------------------------------------------------------------------

def test_single_column_single_surface():
    cfg = DpConfig(smooth_weight=(0.1,), cost_sign=(1,))
    surf, best = solve_slice(np.array([[[3.0, 1.0, 1.0, 2.0]]]), cfg)
    assert surf.tolist() == [[1]] and best == 1.0


def test_zero_costs_give_flat_surfaces_by_tie_rule():
    surf, best = solve_slice(np.zeros((2, 7, 10)), DpConfig(delta_min_sep=3))
    assert best == 0.0
    assert surf[0].tolist() == [0] * 7 and surf[1].tolist() == [3] * 7


_TREE_2 = None


def tree2():
    global _TREE_2
    if _TREE_2 is None:
        _TREE_2 = SequenceTree(6, 8, 2, 2, 1, 4)
    return _TREE_2


@pytest.mark.parametrize("seed", range(15))
def test_two_surfaces_match_enumeration(seed):
    rng = np.random.default_rng(seed)
    costs, w = random_instance(rng, 2, 6, 8)
    cfg = DpConfig(delta_max=2, smooth_weight=w, delta_min_sep=1, delta_max_sep=4)
    check_against_tree(tree2(), costs, cfg)


@pytest.mark.parametrize("seed", range(10))
def test_one_surface_matches_enumeration(seed):
    rng = np.random.default_rng(100 + seed)
    costs, w = random_instance(rng, 1, 7, 9)
    cfg = DpConfig(delta_max=1, smooth_weight=w, cost_sign=(1,))
    check_against_tree(SequenceTree(7, 9, 1, 1, 1, 1), costs, cfg)


@pytest.mark.parametrize("seed", range(5))
def test_three_surfaces_match_enumeration(seed):
    rng = np.random.default_rng(200 + seed)
    costs, w = random_instance(rng, 3, 4, 7)
    cfg = DpConfig(delta_max=1, smooth_weight=w, delta_min_sep=1, delta_max_sep=3, cost_sign=(1, -1, 1))
    check_against_tree(SequenceTree(4, 7, 3, 1, 1, 3), costs, cfg)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6), dmax=st.integers(0, 3), smin=st.integers(1, 3),
       extra=st.integers(0, 6))
def test_constraints_always_hold(seed, dmax, smin, extra):
    rng = np.random.default_rng(seed)
    cfg = DpConfig(delta_max=dmax, delta_min_sep=smin, delta_max_sep=smin + extra)
    surf, best = solve_slice(rng.normal(size=(2, 9, 12)), cfg)
    assert check_constraints(surf, cfg) == 0
    assert surf.min() >= 0 and surf.max() <= 11
    assert np.isfinite(best)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10**6), shift=st.integers(-8, 8))
def test_constant_shift_changes_objective_only(seed, shift):
    rng = np.random.default_rng(seed)
    costs = rng.integers(-4, 5, size=(2, 6, 10)).astype(float)
    cfg = DpConfig(smooth_weight=(0.5, 1.0), delta_max_sep=6)
    s1, b1 = solve_slice(costs, cfg)
    s2, b2 = solve_slice(costs + shift, cfg)
    assert np.array_equal(s1, s2)
    assert b2 == b1 + 6 * 2 * shift


def test_deterministic():
    costs = np.random.default_rng(3).normal(size=(2, 10, 14))
    a, _ = solve_slice(costs, DpConfig())
    b, _ = solve_slice(costs.copy(), DpConfig())
    assert np.array_equal(a, b)


def test_infeasible_separation():
    with pytest.raises(InfeasibleError):
        solve_slice(np.zeros((2, 3, 4)), DpConfig(delta_min_sep=5, delta_max_sep=6))


def test_invalid_configs():
    with pytest.raises(ContractError):
        solve_slice(np.zeros((2, 3, 4)), DpConfig(delta_min_sep=0))
    with pytest.raises(ContractError):
        solve_slice(np.zeros((3, 3, 4)), DpConfig())
    with pytest.raises(ContractError):
        solve_slice(np.zeros((2, 3, 4)), DpConfig(delta_max=-1))
    with pytest.raises(ContractError):
        solve_slice(np.full((2, 3, 4), np.nan), DpConfig())


def test_state_budget():
    cfg = DpConfig(smooth_weight=(0.1,) * 3, cost_sign=(1, -1, 1))
    with pytest.raises(ContractError, match="budget"):
        solve_slice(np.zeros((3, 2, 200)), cfg)


# -- volumes ------------------------------------------------------------------

def test_volume_reduces_to_slice():
    rng = np.random.default_rng(4)
    vox = rng.normal(size=(1, 12, 16)).astype(np.float32)
    cfg = DpConfig()
    res = segment_volume_dp(Volume(vox), cfg)
    surf, obj = solve_slice(build_costs(vox[0], cfg), cfg)
    assert np.array_equal(res.surfaces.positions[:, 0], surf.astype(np.float32))
    assert res.objectives == [obj] and res.violations == 0


def test_volume_finds_step_edges():
    vox = np.full((2, 10, 30), 0.2, dtype=np.float32)
    vox[:, :, 10:] = 0.8
    vox[:, :, 20:] = 0.4
    res = segment_volume_dp(Volume(vox), DpConfig())
    # gradient peaks straddle the edge: first bright row minus one for the tie rule
    assert np.all(res.surfaces.positions[0] == 9)
    assert np.all(res.surfaces.positions[1] == 19)
    assert res.violations == 0
