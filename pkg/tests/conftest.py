"""Shared helpers: pipeline drivers for single-rank and multi-rank runs."""

import numpy as np

from unifmm import morton
from unifmm.distributed import evaluate, setup
from unifmm.kernels import p2p_uli
from unifmm.operators import (
    d2t,
    get_operator_set,
    make_local_v_plan,
    store_for_tree,
    upward_pass,
    vli_downward,
)
from unifmm.transport import create_world, run_spmd
from unifmm.tree import build_interaction_lists, build_tree


def rel_l2(got, want):
    return float(np.linalg.norm(got - want) / np.linalg.norm(want))


def sorted_instance(n, seed, cube_side=1.0, leaf_level=3, sphere=False):
    """Seeded points/charges sorted by leaf-level Morton key."""
    rng = np.random.default_rng(seed)
    if sphere:
        raw = rng.normal(size=(n, 3))
        pts = raw / np.linalg.norm(raw, axis=1, keepdims=True)
        pts = (pts + 1.0) / 2.0 * cube_side  # map onto [0, side]
    else:
        pts = rng.random((n, 3)) * cube_side
    charges = rng.random(n)
    cube = morton.fit_domain(pts)
    keys = morton.encode_points(pts, leaf_level, cube)
    order = np.argsort(keys, kind="stable")
    return pts[order], charges[order], cube


def raw_instance(n, seed, sphere=False):
    """Seeded unsorted points and charges, as a distributed run receives."""
    rng = np.random.default_rng(seed)
    if sphere:
        raw = rng.normal(size=(n, 3))
        pts = raw / np.linalg.norm(raw, axis=1, keepdims=True)
    else:
        pts = rng.random((n, 3))
    return pts, rng.random(n)


def distributed_run(points, charges, n_ranks, config, evaluate_runs=1):
    """Scatter the inputs in contiguous chunks, run setup plus
    ``evaluate_runs`` evaluations on every rank; returns (world, states,
    list-of-eval-results per rank)."""
    chunks = np.array_split(np.arange(len(points)), n_ranks)
    world = create_world(n_ranks, seed=config.seed)

    def program(comm):
        mine = chunks[comm.rank]
        state = setup(comm, points[mine], charges[mine], config)
        evals = [evaluate(state) for _ in range(evaluate_runs)]
        return state, evals

    results = run_spmd(world, program)
    states = [r[0] for r in results]
    evals = [r[1] for r in results]
    return world, states, evals


def concat_potentials(evals, run=0):
    return np.concatenate([e[run].potentials for e in evals])


def local_fmm(points, charges, cube, local_depth, order):
    """Complete uniform FMM on one rank with global_depth = 1.

    With a depth-1 global tree the V lists above the local levels are
    empty, so no global stage exists and the local passes plus the near
    field are the whole algorithm.
    """
    all_roots = morton.descendants(morton.make_key(0, 0, 0, 0), 1)
    tree = build_tree(points, cube, 1, local_depth, local_roots=np.sort(all_roots))
    lists = build_interaction_lists(tree)
    ops = get_operator_set(order)
    store = store_for_tree(tree, ops)
    upward_pass(tree, ops, store, charges)
    plan = make_local_v_plan(tree, lists)
    vli_downward(tree, ops, store, plan)
    far = d2t(tree, ops, store)
    near = p2p_uli(tree, lists, charges)
    return near + far, tree, store
