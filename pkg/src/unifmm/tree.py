"""Per-rank uniform linear octrees and U/V interaction lists.

A rank's tree is the union of fully refined subtrees hanging under its
local roots (level ``global_depth``), refined uniformly for another
``local_depth`` levels. All boxes are kept whether or not they contain
points; occupancy is tracked with a flag so interactions with empty
boxes can be skipped or resolved against remote ranks at runtime.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import morton
from .morton import MAX_DEPTH, ancestor_at, anchor_lattice, descendants, make_key

# Offsets of the 27-cell neighborhood (self included), Morton-sorted so
# member lists come out in key order for same-level candidates.
_HALO_OFFSETS = np.array(
    [(dx, dy, dz) for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)],
    dtype=np.int64,
)

# (ox, oy, oz) for octant o, x in the least significant interleave slot.
_OCTANT_OFFSETS = np.array(
    [[(o >> 0) & 1, (o >> 1) & 1, (o >> 2) & 1] for o in range(8)], dtype=np.int64
)


def transfer_vectors():
    """The 316 admissible V-list lattice offsets, sorted lexicographically."""
    t = np.array(
        [
            (tx, ty, tz)
            for tx in range(-3, 4)
            for ty in range(-3, 4)
            for tz in range(-3, 4)
            if max(abs(tx), abs(ty), abs(tz)) >= 2
        ],
        dtype=np.int64,
    )
    return t


TRANSFER_VECTORS = transfer_vectors()

# (7,7,7) lookup from offset+3 to compact transfer-vector index, -1 if near.
TRANSFER_INDEX = np.full((7, 7, 7), -1, dtype=np.int64)
for _i, (_tx, _ty, _tz) in enumerate(TRANSFER_VECTORS):
    TRANSFER_INDEX[_tx + 3, _ty + 3, _tz + 3] = _i


@dataclass
class UniformTree:
    """Local uniform octree: boxes per level plus leaf point assignment."""

    cube: morton.BoundingCube
    global_depth: int
    local_depth: int
    local_roots: np.ndarray
    level_keys: dict = field(repr=False)       # level -> sorted uint64 keys
    level_nonempty: dict = field(repr=False)   # level -> bool mask
    leaf_ranges: np.ndarray = field(repr=False)  # (n_leaves, 2) into points
    points: np.ndarray = field(repr=False)     # (n, 3) sorted by leaf key

    @property
    def leaf_level(self):
        return self.global_depth + self.local_depth

    @property
    def leaves(self):
        return self.level_keys[self.leaf_level]

    @property
    def n_points(self):
        return self.points.shape[0]

    def index_of(self, level, keys):
        """Dense per-level indices of ``keys`` (Morton-sorted ordering)."""
        arr = self.level_keys[level]
        idx = np.searchsorted(arr, keys)
        ok = (idx < arr.size) & (arr[np.minimum(idx, arr.size - 1)] == keys)
        if not np.all(ok):
            raise KeyError("key not in tree at level %d" % level)
        return idx

    def key_to_index(self, level):
        """Hashed key -> dense index map for one level."""
        return {int(k): i for i, k in enumerate(self.level_keys[level])}

    def contains(self, level, keys):
        arr = self.level_keys.get(level)
        if arr is None:
            return np.zeros(np.shape(keys), dtype=bool)
        idx = np.searchsorted(arr, keys)
        return (idx < arr.size) & (arr[np.minimum(idx, arr.size - 1)] == keys)


def build_tree(points, cube, global_depth, local_depth, local_roots=None, charges=None):
    """Build the rank-local uniform tree over ``points`` sorted by leaf key.

    ``local_roots`` lists the level-``global_depth`` boxes this rank owns;
    when omitted it defaults to the distinct root ancestors of the points.
    The ``charges`` argument is only validated for length, as a convenience
    for callers carrying both arrays.
    """
    if global_depth < 1 or local_depth < 1:
        raise ValueError("global_depth and local_depth must each be >= 1")
    if global_depth + local_depth > MAX_DEPTH:
        raise ValueError("tree depth exceeds MAX_DEPTH = %d" % MAX_DEPTH)
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if charges is not None and len(charges) != len(points):
        raise ValueError("charges length does not match points")

    leaf_level = global_depth + local_depth
    pkeys = morton.encode_points(points, leaf_level, cube) if points.size else np.empty(0, np.uint64)
    if np.any(pkeys[1:] < pkeys[:-1]):
        raise ValueError("points are not sorted by their Morton key")

    if local_roots is None:
        if points.size == 0:
            raise ValueError("cannot infer local roots from an empty point set")
        local_roots = np.unique(ancestor_at(pkeys, global_depth))
    local_roots = np.sort(np.asarray(local_roots, dtype=np.uint64))

    level_keys = {}
    for level in range(global_depth, leaf_level + 1):
        level_keys[level] = np.concatenate(
            [descendants(int(r), level - global_depth) for r in local_roots]
        )

    leaves = level_keys[leaf_level]
    starts = np.searchsorted(pkeys, leaves, side="left")
    ends = np.searchsorted(pkeys, leaves, side="right")
    if int((ends - starts).sum()) != len(points):
        raise ValueError("points fall outside the rank's local roots")
    leaf_ranges = np.stack([starts, ends], axis=1)

    level_nonempty = {leaf_level: ends > starts}
    for level in range(leaf_level - 1, global_depth - 1, -1):
        level_nonempty[level] = level_nonempty[level + 1].reshape(-1, 8).any(axis=1)

    return UniformTree(
        cube=cube,
        global_depth=global_depth,
        local_depth=local_depth,
        local_roots=local_roots,
        level_keys=level_keys,
        level_nonempty=level_nonempty,
        leaf_ranges=leaf_ranges,
        points=points,
    )


def compute_u_list(tree, leaf):
    """Near-field members of a leaf: its adjacent same-level boxes plus itself.

    Members outside the rank's subdomain are returned too; whether they
    exist on another rank is resolved by the ghost exchange.
    """
    if morton.key_level(leaf) != tree.leaf_level:
        raise ValueError("u_list is defined for leaf boxes only")
    members = np.concatenate([morton.neighbors(leaf), [np.uint64(int(leaf))]])
    return np.sort(members)


def compute_v_list(tree, box):
    """Well-separated same-level members: children of the parent's
    neighborhood (parent included) that are not adjacent to ``box``.

    Defined empty below level 2.
    """
    level = morton.key_level(box)
    if level < 2:
        return np.empty(0, dtype=np.uint64)
    keys, _, _ = _v_members_with_vectors(np.asarray([int(box)], dtype=np.uint64), level)
    return np.sort(keys)


def _v_members_with_vectors(box_keys, level):
    """Vectorized V-list enumeration for same-level ``box_keys``.

    Returns (member_keys, owner_box_positions, transfer_index) flattened
    over all boxes; members are emitted in ascending key order per box.
    """
    n_cells = 1 << level
    coords = anchor_lattice(box_keys)
    pcoords = coords >> 1
    # Candidates: children of the 27-cell parent neighborhood.
    centers = pcoords[:, None, :] + _HALO_OFFSETS[None, :, :]  # (n, 27, 3)
    cand = (centers[:, :, None, :] * 2 + _OCTANT_OFFSETS[None, None, :, :]).reshape(
        len(box_keys), 216, 3
    )
    offs = cand - coords[:, None, :]
    in_lattice = np.all((cand >= 0) & (cand < n_cells), axis=2)
    far = np.abs(offs).max(axis=2) >= 2
    keep = in_lattice & far
    box_pos, flat = np.nonzero(keep)
    sel = cand[box_pos, flat]
    keys = make_key(
        sel[:, 0].astype(np.uint64),
        sel[:, 1].astype(np.uint64),
        sel[:, 2].astype(np.uint64),
        level,
    )
    tv = offs[box_pos, flat]
    tv_idx = TRANSFER_INDEX[tv[:, 0] + 3, tv[:, 1] + 3, tv[:, 2] + 3]
    # Sort members by key within each box for a stable accumulation order.
    order = np.lexsort((keys, box_pos))
    return keys[order], box_pos[order], tv_idx[order]


def _u_members(leaf_keys, level):
    """Vectorized U-list enumeration (adjacent cells plus self, key-sorted)."""
    n_cells = 1 << level
    coords = anchor_lattice(leaf_keys)
    cand = coords[:, None, :] + _HALO_OFFSETS[None, :, :]
    keep = np.all((cand >= 0) & (cand < n_cells), axis=2)
    box_pos, flat = np.nonzero(keep)
    sel = cand[box_pos, flat]
    keys = make_key(
        sel[:, 0].astype(np.uint64),
        sel[:, 1].astype(np.uint64),
        sel[:, 2].astype(np.uint64),
        level,
    )
    order = np.lexsort((keys, box_pos))
    return keys[order], box_pos[order]


def transfer_vector(source, target):
    """Lattice offset (source - target) in units of the boxes' side."""
    ls, lt = morton.key_level(source), morton.key_level(target)
    if ls != lt:
        raise ValueError(f"transfer vector needs same-level keys, got {ls} and {lt}")
    s = np.asarray(anchor_lattice(source), dtype=np.int64)
    t = np.asarray(anchor_lattice(target), dtype=np.int64)
    return s - t


@dataclass
class InteractionLists:
    """Static per-tree interaction lists.

    ``u_member_keys``/``u_member_ptr`` form a CSR layout over leaves in
    tree order. ``v_pairs[level]`` holds flattened (target_index,
    source_key, transfer_index) triples, key-sorted per target.
    """

    u_member_keys: np.ndarray
    u_member_ptr: np.ndarray
    v_pairs: dict

    def u_members(self, leaf_pos):
        return self.u_member_keys[self.u_member_ptr[leaf_pos] : self.u_member_ptr[leaf_pos + 1]]


def build_interaction_lists(tree, from_level=None):
    """Enumerate U lists for all leaves and V lists for levels >= ``from_level``.

    ``from_level`` defaults to ``global_depth + 1``: the root level's V
    interactions are handled by the global stage, never locally.
    """
    if from_level is None:
        from_level = tree.global_depth + 1
    leaf_level = tree.leaf_level
    keys, box_pos = _u_members(tree.leaves, leaf_level)
    ptr = np.zeros(len(tree.leaves) + 1, dtype=np.int64)
    np.add.at(ptr, box_pos + 1, 1)
    ptr = np.cumsum(ptr)

    v_pairs = {}
    for level in range(max(from_level, 2), leaf_level + 1):
        mkeys, tgt, tv_idx = _v_members_with_vectors(tree.level_keys[level], level)
        v_pairs[level] = (tgt, mkeys, tv_idx)
    return InteractionLists(u_member_keys=keys, u_member_ptr=ptr, v_pairs=v_pairs)
