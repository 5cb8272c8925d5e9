"""Morton (Z-curve) keys over a cubic domain.

A key is a 64-bit unsigned integer: the high 48 bits hold the 3-way
bit-interleaved anchor of the box (lattice coordinates at the deepest
level, x in the least significant interleave slot), the low 16 bits hold
the level. Anchor bits below a key's own level are always zero, so the
anchor is the box's minimal corner. Sorting keys of a fixed level sorts
the boxes in Z-curve order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MAX_DEPTH = 16
LEVEL_BITS = 16
LEVEL_MASK = (1 << LEVEL_BITS) - 1

# Relative growth applied to the tight bounding box so points sitting
# exactly on the maximal face stay strictly inside after clamping.
DEFAULT_MARGIN = 1e-6

# Side assigned to a degenerate (zero-extent) point cloud.
SMALL_SIDE_FLOOR = 1.0

_SPREAD_MASKS = (
    (32, 0x1F00000000FFFF),
    (16, 0x1F0000FF0000FF),
    (8, 0x100F00F00F00F00F),
    (4, 0x10C30C30C30C30C3),
    (2, 0x1249249249249249),
)


def _spread_bits(v):
    """Space the low 21 bits of ``v`` three apart (uint64 array or int)."""
    if isinstance(v, np.ndarray):
        v = v.astype(np.uint64) & np.uint64(0x1FFFFF)
        for shift, mask in _SPREAD_MASKS:
            v = (v | (v << np.uint64(shift))) & np.uint64(mask)
        return v
    v &= 0x1FFFFF
    for shift, mask in _SPREAD_MASKS:
        v = (v | (v << shift)) & mask
    return v


_COMPACT_MASKS = (
    (2, 0x10C30C30C30C30C3),
    (4, 0x100F00F00F00F00F),
    (8, 0x1F0000FF0000FF),
    (16, 0x1F00000000FFFF),
    (32, 0x1FFFFF),
)


def _compact_bits(v):
    """Inverse of :func:`_spread_bits`."""
    if isinstance(v, np.ndarray):
        v = v.astype(np.uint64) & np.uint64(0x1249249249249249)
        for shift, mask in _COMPACT_MASKS:
            v = (v ^ (v >> np.uint64(shift))) & np.uint64(mask)
        return v
    v &= 0x1249249249249249
    for shift, mask in _COMPACT_MASKS:
        v = (v ^ (v >> shift)) & mask
    return v


@dataclass(frozen=True)
class BoundingCube:
    """Axis-aligned cube enclosing all source and target points."""

    origin: tuple
    side: float

    def __post_init__(self):
        if not (self.side > 0.0 and np.isfinite(self.side)):
            raise ValueError(f"cube side must be positive and finite, got {self.side}")
        object.__setattr__(self, "origin", tuple(float(c) for c in self.origin))

    def contains(self, points):
        """Boolean mask of points inside the closed cube."""
        p = np.atleast_2d(np.asarray(points, dtype=np.float64))
        lo = np.asarray(self.origin)
        return np.all((p >= lo) & (p <= lo + self.side), axis=1)

    def center(self):
        return np.asarray(self.origin) + 0.5 * self.side


def fit_domain(points, margin=DEFAULT_MARGIN):
    """Fit a cube around ``points``, grown by a relative ``margin``.

    The cube is anchored at the componentwise minimum; its side is the
    largest axis extent times ``1 + margin``, floored at
    ``SMALL_SIDE_FLOOR`` for degenerate inputs.
    """
    p = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if p.size == 0:
        raise ValueError("no points")
    if p.ndim != 2 or p.shape[1] != 3:
        raise ValueError(f"expected (n, 3) points, got shape {p.shape}")
    if not np.all(np.isfinite(p)):
        raise ValueError("non-finite coordinate in input points")
    lo = p.min(axis=0)
    extent = float((p.max(axis=0) - lo).max())
    side = extent * (1.0 + margin)
    if side <= 0.0:
        side = SMALL_SIDE_FLOOR
    return BoundingCube(origin=tuple(lo), side=side)


def make_key(ix, iy, iz, level):
    """Key for the box with lattice coordinates (ix, iy, iz) at ``level``."""
    shift = MAX_DEPTH - level
    if isinstance(ix, np.ndarray):
        sh = np.uint64(shift)
        code = (
            _spread_bits(ix.astype(np.uint64) << sh)
            | (_spread_bits(iy.astype(np.uint64) << sh) << np.uint64(1))
            | (_spread_bits(iz.astype(np.uint64) << sh) << np.uint64(2))
        )
        return (code << np.uint64(LEVEL_BITS)) | np.uint64(level)
    code = (
        _spread_bits(int(ix) << shift)
        | (_spread_bits(int(iy) << shift) << 1)
        | (_spread_bits(int(iz) << shift) << 2)
    )
    return (code << LEVEL_BITS) | level


def key_level(key):
    """Refinement level stored in the key."""
    if isinstance(key, np.ndarray):
        return (key & np.uint64(LEVEL_MASK)).astype(np.int64)
    return int(key) & LEVEL_MASK


def anchor_lattice(key, level=None):
    """Lattice coordinates of the key's anchor at ``level`` (own level by default)."""
    own = key_level(key)
    if level is None:
        level = own
    if isinstance(key, np.ndarray):
        sh = np.uint64(LEVEL_BITS)
        code = key >> sh
        coords = np.stack(
            [
                _compact_bits(code),
                _compact_bits(code >> np.uint64(1)),
                _compact_bits(code >> np.uint64(2)),
            ],
            axis=-1,
        ).astype(np.int64)
        return coords >> (MAX_DEPTH - np.asarray(level)).reshape(-1, 1)
    code = int(key) >> LEVEL_BITS
    sh = MAX_DEPTH - level
    return (
        _compact_bits(code) >> sh,
        _compact_bits(code >> 1) >> sh,
        _compact_bits(code >> 2) >> sh,
    )


def _check_level(level):
    if not 0 <= level <= MAX_DEPTH:
        raise ValueError(f"level must be in [0, {MAX_DEPTH}], got {level}")


def encode_points(points, level, cube):
    """Vectorized Morton encoding of an (n, 3) point array at ``level``.

    Cells are half-open; points on the upper domain face are clamped to
    the last cell so every point in the cube maps to exactly one box.
    """
    _check_level(level)
    p = np.atleast_2d(np.asarray(points, dtype=np.float64))
    lo = np.asarray(cube.origin)
    if p.shape[0] and not np.all((p >= lo) & (p <= lo + cube.side)):
        raise ValueError("point outside cube")
    n_cells = 1 << level
    idx = np.floor((p - lo) / cube.side * n_cells).astype(np.int64)
    np.clip(idx, 0, n_cells - 1, out=idx)
    return make_key(
        idx[:, 0].astype(np.uint64),
        idx[:, 1].astype(np.uint64),
        idx[:, 2].astype(np.uint64),
        level,
    )


def encode_point(p, level, cube):
    """Scalar form of :func:`encode_points`; returns a Python int key."""
    return int(encode_points(np.asarray(p, dtype=np.float64)[None, :], level, cube)[0])


def decode(key, cube):
    """Anchor coordinates (minimal corner) and box side of ``key`` in ``cube``."""
    level = key_level(key)
    _check_level_field(key)
    ix, iy, iz = anchor_lattice(key)
    side = cube.side / (1 << level)
    lo = np.asarray(cube.origin)
    return lo + np.array([ix, iy, iz], dtype=np.float64) * side, side


def box_center(key, cube):
    anchor, side = decode(key, cube)
    return anchor + 0.5 * side


def _check_level_field(key):
    level = key_level(key)
    if isinstance(level, np.ndarray):
        if np.any(level > MAX_DEPTH):
            raise ValueError("malformed key: level bits exceed MAX_DEPTH")
    elif level > MAX_DEPTH:
        raise ValueError(f"malformed key: level bits {level} exceed MAX_DEPTH")


def parent(key):
    """Parent key one level up; errors at the root."""
    level = key_level(key)
    if level < 1:
        raise ValueError("root box has no parent")
    new_level = level - 1
    keep = 3 * new_level
    code = (int(key) >> LEVEL_BITS) >> (48 - keep) << (48 - keep) if keep else 0
    return (code << LEVEL_BITS) | new_level


def parent_keys(keys):
    """Vectorized :func:`parent` for a uint64 array of same-level keys."""
    level = key_level(keys)
    if np.any(level < 1):
        raise ValueError("root box has no parent")
    new_level = (level - 1).astype(np.uint64)
    drop = np.uint64(LEVEL_BITS + 48) - np.uint64(3) * new_level
    return ((keys >> drop) << drop) | new_level


def children(key):
    """The 8 child keys in ascending (Morton) order."""
    level = key_level(key)
    if level >= MAX_DEPTH:
        raise ValueError(f"cannot refine below MAX_DEPTH = {MAX_DEPTH}")
    base = int(key) >> LEVEL_BITS
    slot = 3 * (MAX_DEPTH - level - 1)
    return np.array(
        [((base | (o << slot)) << LEVEL_BITS) | (level + 1) for o in range(8)],
        dtype=np.uint64,
    )


def descendants(key, depth):
    """All descendants ``depth`` levels below ``key``, in Morton order."""
    level = key_level(key)
    if level + depth > MAX_DEPTH:
        raise ValueError("descendant level exceeds MAX_DEPTH")
    if depth == 0:
        return np.array([int(key)], dtype=np.uint64)
    base = np.uint64(int(key) >> LEVEL_BITS)
    slot = np.uint64(3 * (MAX_DEPTH - level - depth))
    suffix = np.arange(8**depth, dtype=np.uint64)
    codes = base | (suffix << slot)
    return (codes << np.uint64(LEVEL_BITS)) | np.uint64(level + depth)


def ancestor_at(key, level):
    """Ancestor of ``key`` at the given coarser ``level``."""
    own = key_level(key)
    if isinstance(key, np.ndarray):
        if np.any(own < level):
            raise ValueError("ancestor level must not exceed key level")
        keep = np.uint64(LEVEL_BITS + 48) - np.uint64(3 * level)
        return ((key >> keep) << keep) | np.uint64(level)
    if own < level:
        raise ValueError("ancestor level must not exceed key level")
    keep = 3 * level
    code = (int(key) >> LEVEL_BITS) >> (48 - keep) << (48 - keep) if keep else 0
    return (code << LEVEL_BITS) | level


_NEIGHBOR_OFFSETS = np.array(
    [
        (dx, dy, dz)
        for dx in (-1, 0, 1)
        for dy in (-1, 0, 1)
        for dz in (-1, 0, 1)
        if (dx, dy, dz) != (0, 0, 0)
    ],
    dtype=np.int64,
)


def neighbors(key):
    """Same-level keys adjacent to ``key`` (up to 26; fewer on the boundary)."""
    level = key_level(key)
    ix, iy, iz = anchor_lattice(key)
    cand = np.array([ix, iy, iz], dtype=np.int64) + _NEIGHBOR_OFFSETS
    n_cells = 1 << level
    ok = np.all((cand >= 0) & (cand < n_cells), axis=1)
    cand = cand[ok]
    return make_key(
        cand[:, 0].astype(np.uint64),
        cand[:, 1].astype(np.uint64),
        cand[:, 2].astype(np.uint64),
        level,
    )
