"""Laplace kernel evaluation and direct particle summation.

The pairwise potential sums here are the hot inner loops of the whole
package: they serve the near-field (ULI) sweep, the source-to-check and
expansion-to-target evaluations of the far-field operators, and the
brute-force verification oracle. They are JIT-compiled with numba when
available; a pure-numpy path is kept behind the ``FMM_DISABLE_NUMBA=1``
environment flag and used automatically when numba is missing.

The kernel is 1/r with no 1/(4*pi) factor. Coincident points evaluate
to 0, which also covers the self-interaction when one point set serves
as both sources and targets.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

_DISABLE_NUMBA = os.environ.get("FMM_DISABLE_NUMBA", "0") == "1"

try:
    if _DISABLE_NUMBA:
        raise ImportError("numba disabled by FMM_DISABLE_NUMBA")
    from numba import njit, prange

    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False


def kernel_backend():
    """Identifier of the active pairwise-kernel implementation."""
    return "numba" if HAVE_NUMBA else "numpy"


class UnresolvedDependencyError(RuntimeError):
    """A near- or far-field member exists remotely but has no ghost data."""


def laplace_kernel(x, y):
    """1/|x - y|, with 0 at coincident points."""
    d = np.asarray(x, dtype=np.float64) - np.asarray(y, dtype=np.float64)
    r = float(np.sqrt(np.dot(d, d)))
    return 0.0 if r == 0.0 else 1.0 / r


def _potential_numpy(targets, sources, charges, out):
    # Chunk targets to bound the (chunk, m) distance matrix.
    m = sources.shape[0]
    if m == 0:
        return out
    chunk = max(1, int(4e6) // max(m, 1))
    for lo in range(0, targets.shape[0], chunk):
        t = targets[lo : lo + chunk]
        d2 = ((t[:, None, :] - sources[None, :, :]) ** 2).sum(axis=2)
        with np.errstate(divide="ignore"):
            inv = 1.0 / np.sqrt(d2)
        inv[d2 == 0.0] = 0.0
        out[lo : lo + chunk] += inv @ charges
    return out


if HAVE_NUMBA:

    @njit(cache=True, nogil=True, parallel=True)
    def _potential_numba_par(targets, sources, charges, out):
        for i in prange(targets.shape[0]):
            acc = 0.0
            for j in range(sources.shape[0]):
                dx = targets[i, 0] - sources[j, 0]
                dy = targets[i, 1] - sources[j, 1]
                dz = targets[i, 2] - sources[j, 2]
                r2 = dx * dx + dy * dy + dz * dz
                if r2 > 0.0:
                    acc += charges[j] / np.sqrt(r2)
            out[i] += acc
        return out

    @njit(cache=True, nogil=True)
    def _potential_numba_seq(targets, sources, charges, out):
        for i in range(targets.shape[0]):
            acc = 0.0
            for j in range(sources.shape[0]):
                dx = targets[i, 0] - sources[j, 0]
                dy = targets[i, 1] - sources[j, 1]
                dz = targets[i, 2] - sources[j, 2]
                r2 = dx * dx + dy * dy + dz * dz
                if r2 > 0.0:
                    acc += charges[j] / np.sqrt(r2)
            out[i] += acc
        return out

    @njit(cache=True, nogil=True)
    def _uli_numba(tgt_pts, src_pts, src_chg, leaf_tgt, seg_ptr, seg_bounds, out):
        for leaf in range(leaf_tgt.shape[0]):
            t0, t1 = leaf_tgt[leaf, 0], leaf_tgt[leaf, 1]
            for s in range(seg_ptr[leaf], seg_ptr[leaf + 1]):
                a, b = seg_bounds[s, 0], seg_bounds[s, 1]
                for i in range(t0, t1):
                    acc = 0.0
                    for j in range(a, b):
                        dx = tgt_pts[i, 0] - src_pts[j, 0]
                        dy = tgt_pts[i, 1] - src_pts[j, 1]
                        dz = tgt_pts[i, 2] - src_pts[j, 2]
                        r2 = dx * dx + dy * dy + dz * dz
                        if r2 > 0.0:
                            acc += src_chg[j] / np.sqrt(r2)
                    out[i] += acc
        return out


def _uli_numpy(tgt_pts, src_pts, src_chg, leaf_tgt, seg_ptr, seg_bounds, out):
    for leaf in range(leaf_tgt.shape[0]):
        t0, t1 = leaf_tgt[leaf, 0], leaf_tgt[leaf, 1]
        if t1 <= t0:
            continue
        t = tgt_pts[t0:t1]
        for s in range(seg_ptr[leaf], seg_ptr[leaf + 1]):
            a, b = seg_bounds[s, 0], seg_bounds[s, 1]
            if b <= a:
                continue
            _potential_numpy(t, src_pts[a:b], src_chg[a:b], out[t0:t1])
    return out


def laplace_potential(targets, sources, charges, out=None, parallel=True):
    """Accumulate sum_j charges[j] / |targets_i - sources_j| into ``out``.

    Coincident target/source pairs contribute zero. ``parallel`` only
    affects the numba path; rank-level code passes False to keep the
    simulated ranks from oversubscribing the machine.
    """
    targets = np.ascontiguousarray(targets, dtype=np.float64).reshape(-1, 3)
    sources = np.ascontiguousarray(sources, dtype=np.float64).reshape(-1, 3)
    charges = np.ascontiguousarray(charges, dtype=np.float64).reshape(-1)
    if charges.shape[0] != sources.shape[0]:
        raise ValueError("charges length does not match sources")
    if out is None:
        out = np.zeros(targets.shape[0], dtype=np.float64)
    if HAVE_NUMBA:
        fn = _potential_numba_par if parallel else _potential_numba_seq
        return fn(targets, sources, charges, out)
    return _potential_numpy(targets, sources, charges, out)


def direct_sum(targets, sources, charges):
    """Brute-force O(n*m) potential evaluation (the verification oracle)."""
    return laplace_potential(targets, sources, charges)


@dataclass
class NearFieldGhosts:
    """Ghost point/charge data for off-rank U-list leaves.

    ``confirmed_absent`` lists remote leaves that were queried and do not
    exist (contain no points); members in neither map are unresolved.
    """

    points: dict = field(default_factory=dict)   # key -> (k, 3) float64
    charges: dict = field(default_factory=dict)  # key -> (k,) float64
    confirmed_absent: set = field(default_factory=set)


def p2p_uli(tree, lists, charges, ghosts=None, out=None):
    """Near-field sweep: direct interactions of every local target leaf
    with all existing members of its U list (local and ghost).

    Raises :class:`UnresolvedDependencyError` for a member that is
    neither local nor covered by ghost data.
    """
    charges = np.ascontiguousarray(charges, dtype=np.float64).reshape(-1)
    if charges.shape[0] != tree.n_points:
        raise ValueError("charges length does not match tree points")
    if ghosts is None:
        ghosts = NearFieldGhosts()

    leaf_level = tree.leaf_level
    leaf_index = tree.key_to_index(leaf_level)
    nonempty = tree.level_nonempty[leaf_level]

    src_blocks = [tree.points]
    chg_blocks = [charges]
    ghost_offset = {}
    offset = tree.n_points
    for key in sorted(ghosts.points):
        pts = np.asarray(ghosts.points[key], dtype=np.float64).reshape(-1, 3)
        chg = np.asarray(ghosts.charges[key], dtype=np.float64).reshape(-1)
        if len(chg) != len(pts):
            raise ValueError("ghost charges length does not match ghost points")
        ghost_offset[key] = (offset, offset + len(pts))
        src_blocks.append(pts)
        chg_blocks.append(chg)
        offset += len(pts)
    src_pts = np.concatenate(src_blocks, axis=0) if len(src_blocks) > 1 else tree.points
    src_chg = np.concatenate(chg_blocks) if len(chg_blocks) > 1 else charges

    seg_ptr = np.zeros(len(tree.leaves) + 1, dtype=np.int64)
    bounds = []
    for pos in range(len(tree.leaves)):
        n_segs = 0
        for key in lists.u_members(pos):
            k = int(key)
            local = leaf_index.get(k)
            if local is not None:
                if nonempty[local]:
                    bounds.append(tree.leaf_ranges[local])
                    n_segs += 1
            elif k in ghost_offset:
                bounds.append(ghost_offset[k])
                n_segs += 1
            elif k not in ghosts.confirmed_absent:
                raise UnresolvedDependencyError(
                    f"unresolved dependency: no ghost data for U-list box {k:#x}"
                )
        seg_ptr[pos + 1] = seg_ptr[pos] + n_segs
    seg_bounds = (
        np.asarray(bounds, dtype=np.int64)
        if bounds
        else np.empty((0, 2), dtype=np.int64)
    )

    if out is None:
        out = np.zeros(tree.n_points, dtype=np.float64)
    fn = _uli_numba if HAVE_NUMBA else _uli_numpy
    return fn(tree.points, src_pts, src_chg, tree.leaf_ranges, seg_ptr, seg_bounds, out)
