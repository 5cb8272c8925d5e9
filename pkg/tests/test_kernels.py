"""Laplace kernel and direct summation."""

import math

import numpy as np
import pytest

from unifmm import morton
from unifmm.kernels import (
    NearFieldGhosts,
    UnresolvedDependencyError,
    direct_sum,
    laplace_kernel,
    laplace_potential,
    p2p_uli,
)
from unifmm.tree import build_interaction_lists, build_tree

UNIT = morton.BoundingCube(origin=(0.0, 0.0, 0.0), side=1.0)


def python_double_loop(targets, sources, charges):
    """Independent oracle: plain Python loops, math.sqrt, no numpy math."""
    out = []
    for t in targets:
        acc = 0.0
        for s, q in zip(sources, charges):
            dx, dy, dz = t[0] - s[0], t[1] - s[1], t[2] - s[2]
            r = math.sqrt(dx * dx + dy * dy + dz * dz)
            if r != 0.0:
                acc += q / r
        out.append(acc)
    return np.asarray(out)


def test_kernel_unit_distance():
    assert laplace_kernel((0, 0, 0), (1, 0, 0)) == 1.0


def test_kernel_3_4_5_triangle():
    assert laplace_kernel((0, 0, 0), (3, 4, 0)) == pytest.approx(0.2, abs=0.0)


def test_kernel_self_convention():
    assert laplace_kernel((0.3, 0.1, 0.9), (0.3, 0.1, 0.9)) == 0.0


def test_kernel_symmetry_and_translation():
    rng = np.random.default_rng(0)
    for _ in range(10):
        x, y = rng.random(3), rng.random(3)
        assert laplace_kernel(x, y) == laplace_kernel(y, x)
        # Exact translation invariance, checked on exactly representable
        # coordinates so x + t carries no rounding.
        xd, yd, t = (np.floor(rng.random(3) * 64) / 64 for _ in range(3))
        assert laplace_kernel(xd + t, yd + t) == laplace_kernel(xd, yd)


def test_direct_sum_two_unit_charges():
    f = direct_sum([[0.0, 0, 0]], [[1.0, 0, 0], [0.0, 1, 0]], [1.0, 1.0])
    assert f[0] == pytest.approx(2.0)


def test_direct_sum_zero_charges():
    rng = np.random.default_rng(1)
    pts = rng.random((50, 3))
    assert np.all(direct_sum(pts, pts, np.zeros(50)) == 0.0)


def test_direct_sum_matches_double_loop_oracle():
    rng = np.random.default_rng(2)
    pts = rng.random((100, 3))
    f = direct_sum(pts, pts, np.ones(100))
    ref = python_double_loop(pts, pts, np.ones(100))
    np.testing.assert_allclose(f, ref, rtol=1e-12)


def test_direct_sum_length_mismatch():
    with pytest.raises(ValueError, match="length"):
        direct_sum([[0.0, 0, 0]], [[1.0, 0, 0]], [1.0, 2.0])


def test_direct_sum_linearity():
    rng = np.random.default_rng(3)
    pts = rng.random((80, 3))
    s1, s2 = rng.random(80), rng.random(80)
    lhs = direct_sum(pts, pts, 3.0 * s1 + s2)
    rhs = 3.0 * direct_sum(pts, pts, s1) + direct_sum(pts, pts, s2)
    np.testing.assert_allclose(lhs, rhs, rtol=1e-12)


def test_potential_numpy_path_matches_active_backend():
    from unifmm.kernels import _potential_numpy

    rng = np.random.default_rng(4)
    t, s, q = rng.random((37, 3)), rng.random((53, 3)), rng.random(53)
    got = laplace_potential(t, s, q)
    ref = _potential_numpy(t, s, q, np.zeros(len(t)))
    np.testing.assert_allclose(got, ref, rtol=1e-13)


def _center_point_tree(cells, level, d_g, d_l):
    n = 1 << level
    pts = (np.asarray(cells, dtype=np.float64) + 0.5) / n
    keys = morton.encode_points(pts, level, UNIT)
    order = np.argsort(keys, kind="stable")
    roots = np.unique(morton.ancestor_at(keys, d_g))
    # Own the whole lattice so U members always resolve locally.
    all_roots = np.sort(
        morton.descendants(morton.make_key(0, 0, 0, 0), d_g)
    )
    tree = build_tree(pts[order], UNIT, d_g, d_l, local_roots=all_roots)
    del roots
    return tree, order


def test_p2p_uli_two_adjacent_leaves():
    tree, _ = _center_point_tree([[0, 0, 0], [1, 0, 0]], 2, 1, 1)
    lists = build_interaction_lists(tree)
    charges = np.ones(2)
    f = p2p_uli(tree, lists, charges)
    r = 0.25  # cell centers one cell apart
    np.testing.assert_allclose(f, [1 / r, 1 / r], rtol=1e-14)


def test_p2p_uli_isolated_leaf_sees_only_itself():
    # Two points in one leaf, far cells empty: contribution only internal.
    tree, _ = _center_point_tree([[0, 0, 0], [0, 0, 0]], 2, 1, 1)
    lists = build_interaction_lists(tree)
    pts = tree.points.copy()
    pts[1] += 0.01
    tree.points[:] = pts
    f = p2p_uli(tree, lists, np.ones(2))
    want = python_double_loop(pts, pts, np.ones(2))
    np.testing.assert_allclose(f, want, rtol=1e-12)


def test_p2p_uli_matches_direct_sum_on_dense_small_domain():
    # Depth-1 local tree under a depth-1 global root: every pair of leaves
    # is adjacent, so the near field alone is the full interaction.
    rng = np.random.default_rng(5)
    pts = rng.random((64, 3)) * 0.5  # all inside root octant (0,0,0)
    keys = morton.encode_points(pts, 2, UNIT)
    order = np.argsort(keys, kind="stable")
    pts = pts[order]
    roots = morton.descendants(morton.make_key(0, 0, 0, 0), 1)
    tree = build_tree(pts, UNIT, 1, 1, local_roots=np.sort(roots))
    lists = build_interaction_lists(tree)
    charges = rng.random(64)
    # Only the points in octant 0 interact fully; all lie there by scaling.
    f = p2p_uli(tree, lists, charges)
    ref = direct_sum(pts, pts, charges)
    np.testing.assert_allclose(f, ref, rtol=1e-12)


def test_p2p_uli_unresolved_dependency():
    # Own only root 0; a point near its inner corner has U members under
    # other roots, with no ghost data supplied.
    pts = np.array([[0.49, 0.49, 0.49]])
    keys = morton.encode_points(pts, 2, UNIT)
    root = morton.ancestor_at(int(keys[0]), 1)
    tree = build_tree(pts, UNIT, 1, 1, local_roots=[root])
    lists = build_interaction_lists(tree)
    with pytest.raises(UnresolvedDependencyError, match="unresolved dependency"):
        p2p_uli(tree, lists, np.ones(1))


def test_p2p_uli_ghosts_resolve_remote_members():
    pts = np.array([[0.49, 0.49, 0.49]])
    keys = morton.encode_points(pts, 2, UNIT)
    root = morton.ancestor_at(int(keys[0]), 1)
    tree = build_tree(pts, UNIT, 1, 1, local_roots=[root])
    lists = build_interaction_lists(tree)
    remote = [int(k) for k in lists.u_members(tree.index_of(2, keys)[0])
              if not tree.contains(2, np.asarray([k], dtype=np.uint64))[0]]
    ghosts = NearFieldGhosts(confirmed_absent=set(remote))
    # One remote member actually holds a point.
    gkey = remote[0]
    anchor, side = morton.decode(gkey, UNIT)
    gpt = anchor + 0.5 * side
    ghosts.confirmed_absent.discard(gkey)
    ghosts.points[gkey] = gpt[None, :]
    ghosts.charges[gkey] = np.array([2.0])
    f = p2p_uli(tree, lists, np.ones(1), ghosts)
    want = 2.0 / np.linalg.norm(pts[0] - gpt)
    np.testing.assert_allclose(f, [want], rtol=1e-14)
