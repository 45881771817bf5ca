"""Octree AMR data model: cubic cells over the box [0, L]^3.

The tree is stored pointer-free in flat numpy arrays, one entry per node,
ordered depth-first with children visited in ascending octant index
(octant = 4*kz + 2*ky + kx).  Values are stored on every node, not only on
leaves, so a traversal capped at some level can treat interior nodes as
leaves without descending further.  Cell boxes are half-open [lo, hi) per
axis; the far box face at L is owned by the last cell (queries clamp).
"""

from dataclasses import dataclass

import numpy as np

from .errors import StructureError

# LevelMap sentinel for rays that never touch the box.
MISS_LEVEL = -1


def _spread_bits(v: np.ndarray) -> np.ndarray:
    # Dilate the lower 21 bits of v so bit i lands at position 3*i.
    v = v.astype(np.uint64)
    v = (v | (v << np.uint64(32))) & np.uint64(0x1F00000000FFFF)
    v = (v | (v << np.uint64(16))) & np.uint64(0x1F0000FF0000FF)
    v = (v | (v << np.uint64(8))) & np.uint64(0x100F00F00F00F00F)
    v = (v | (v << np.uint64(4))) & np.uint64(0x10C30C30C30C30C3)
    v = (v | (v << np.uint64(2))) & np.uint64(0x1249249249249249)
    return v


def morton3(ix, iy, iz) -> np.ndarray:
    """Interleave three integer coordinates, x in the least significant bit."""
    ix = np.asarray(ix, dtype=np.uint64)
    iy = np.asarray(iy, dtype=np.uint64)
    iz = np.asarray(iz, dtype=np.uint64)
    return _spread_bits(ix) | (_spread_bits(iy) << np.uint64(1)) | (_spread_bits(iz) << np.uint64(2))


@dataclass(frozen=True)
class CellCoord:
    """Integer cell coordinates: level plus per-axis index in [0, 2^level)."""

    level: int
    ix: int
    iy: int
    iz: int

    def __post_init__(self):
        if self.level < 0:
            raise ValueError(f"negative level {self.level}")
        n = 1 << self.level
        for name in ("ix", "iy", "iz"):
            i = getattr(self, name)
            if not 0 <= i < n:
                raise ValueError(f"{name}={i} outside [0, {n}) at level {self.level}")

    def size(self, box_len: float) -> float:
        return box_len * (0.5 ** self.level)

    def center(self, box_len: float) -> np.ndarray:
        inv = 0.5 ** self.level
        return np.array(
            [
                box_len * ((self.ix + 0.5) * inv),
                box_len * ((self.iy + 0.5) * inv),
                box_len * ((self.iz + 0.5) * inv),
            ]
        )

    def bounds(self, box_len: float) -> tuple[np.ndarray, np.ndarray]:
        inv = 0.5 ** self.level
        lo = np.array([box_len * (self.ix * inv), box_len * (self.iy * inv), box_len * (self.iz * inv)])
        hi = np.array(
            [box_len * ((self.ix + 1) * inv), box_len * ((self.iy + 1) * inv), box_len * ((self.iz + 1) * inv)]
        )
        return lo, hi

    def child(self, kx: int, ky: int, kz: int) -> "CellCoord":
        return CellCoord(self.level + 1, 2 * self.ix + kx, 2 * self.iy + ky, 2 * self.iz + kz)


def child_octant(parent: CellCoord, kx: int, ky: int, kz: int) -> CellCoord:
    """Coordinates of the child cell in octant (kx, ky, kz), bits in {0, 1}."""
    for k in (kx, ky, kz):
        if k not in (0, 1):
            raise ValueError(f"octant bits must be 0 or 1, got {(kx, ky, kz)}")
    return parent.child(kx, ky, kz)


class AmrNode:
    """Lightweight view of one tree node."""

    __slots__ = ("tree", "index")

    def __init__(self, tree: "AmrTree", index: int):
        self.tree = tree
        self.index = int(index)

    @property
    def coord(self) -> CellCoord:
        t, i = self.tree, self.index
        return CellCoord(int(t.levels[i]), int(t.ix[i]), int(t.iy[i]), int(t.iz[i]))

    @property
    def level(self) -> int:
        return int(self.tree.levels[self.index])

    @property
    def is_leaf(self) -> bool:
        return bool(self.tree.is_leaf[self.index])

    @property
    def values(self) -> dict[str, float]:
        row = self.tree.values[self.index]
        return {name: float(row[j]) for j, name in enumerate(self.tree.fields)}

    def value(self, field: str) -> float:
        return float(self.tree.values[self.index, self.tree.field_index(field)])

    @property
    def children(self) -> tuple["AmrNode", ...] | None:
        if self.is_leaf:
            return None
        ch = self.tree.children[self.index]
        return tuple(AmrNode(self.tree, int(c)) for c in ch)

    def size(self) -> float:
        return self.tree.box_len * (0.5 ** self.level)

    def center(self) -> np.ndarray:
        return self.coord.center(self.tree.box_len)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.coord.bounds(self.tree.box_len)

    def __eq__(self, other):
        return isinstance(other, AmrNode) and other.tree is self.tree and other.index == self.index

    def __hash__(self):
        return hash((id(self.tree), self.index))

    def __repr__(self):
        c = self.coord
        return f"AmrNode(level={c.level}, i=({c.ix},{c.iy},{c.iz}), leaf={self.is_leaf})"


class AmrTree:
    """Immutable pointer-free octree with per-node field values.

    Arrays (all length n_nodes, depth-first order, children ascending octant):
      levels    uint8
      ix/iy/iz  uint32
      is_leaf   bool
      children  int32 (n, 8); -1 where absent (leaves, or pruned in partial trees)
      values    float64 (n, nfields)
      domains   uint32 per-node domain tag
      present   bool or None; None means every node carries real data.  Partial
                trees (one payload domain of a multi-domain dataset) mark
                synthesized ancestor placeholders absent.
    """

    def __init__(self, box_len, levelmin, levelmax, fields, conservative,
                 levels, ix, iy, iz, is_leaf, children, values, domains, ndomains,
                 present=None):
        self.box_len = float(box_len)
        self.levelmin = int(levelmin)
        self.levelmax = int(levelmax)
        self.fields = tuple(fields)
        self.conservative = tuple(bool(c) for c in conservative)
        self.levels = levels
        self.ix = ix
        self.iy = iy
        self.iz = iz
        self.is_leaf = is_leaf
        self.children = children
        self.values = values
        self.domains = domains
        self.ndomains = int(ndomains)
        self.present = present
        self._field_index = {name: j for j, name in enumerate(self.fields)}
        # Filled by dataset readers; {"materialized_per_level": array, "records_total": int}
        self.source_stats = None

    # -- basic queries ----------------------------------------------------

    @property
    def n_nodes(self) -> int:
        return len(self.levels)

    @property
    def n_leaves(self) -> int:
        return int(np.count_nonzero(self.is_leaf))

    @property
    def root(self) -> AmrNode:
        return AmrNode(self, 0)

    def field_index(self, field: str) -> int:
        try:
            return self._field_index[field]
        except KeyError:
            raise KeyError(f"unknown field {field!r}; tree has {list(self.fields)}") from None

    def field_values(self, field: str) -> np.ndarray:
        return self.values[:, self.field_index(field)]

    def cell_sizes(self, idx=None) -> np.ndarray:
        lv = self.levels if idx is None else self.levels[idx]
        return self.box_len * np.ldexp(1.0, -lv.astype(np.int64))

    def cell_centers(self, idx=None) -> np.ndarray:
        if idx is None:
            idx = slice(None)
        inv = np.ldexp(1.0, -self.levels[idx].astype(np.int64))
        out = np.empty((np.shape(inv)[0] if np.ndim(inv) else 1, 3))
        out[:, 0] = self.box_len * ((self.ix[idx] + 0.5) * inv)
        out[:, 1] = self.box_len * ((self.iy[idx] + 0.5) * inv)
        out[:, 2] = self.box_len * ((self.iz[idx] + 0.5) * inv)
        return out

    def cell_bounds(self, idx) -> tuple[np.ndarray, np.ndarray]:
        """Half-open cell boxes [lo, hi) for the given node indices."""
        inv = np.ldexp(1.0, -self.levels[idx].astype(np.int64))
        lo = np.stack(
            [self.box_len * (self.ix[idx] * inv),
             self.box_len * (self.iy[idx] * inv),
             self.box_len * (self.iz[idx] * inv)], axis=-1)
        hi = np.stack(
            [self.box_len * ((self.ix[idx] + 1) * inv),
             self.box_len * ((self.iy[idx] + 1) * inv),
             self.box_len * ((self.iz[idx] + 1) * inv)], axis=-1)
        return lo, hi

    # -- traversal --------------------------------------------------------

    def point_query_many(self, points: np.ndarray, level_cap: int) -> np.ndarray:
        """Vectorized point location: node index per point.

        Descends from the root until a leaf or a node at level_cap is reached.
        Points must lie in [0, L]^3; the far face at L is clamped into the
        last cell (half-open cells internally).
        """
        if level_cap < self.levelmin:
            raise ValueError(f"level_cap {level_cap} below levelmin {self.levelmin}")
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim == 1:
            pts = pts[None, :]
        if np.any(pts < 0.0) or np.any(pts > self.box_len):
            raise ValueError("point outside the box [0, L]^3")
        node = np.zeros(len(pts), dtype=np.int64)
        active = ~(self.is_leaf[node] | (self.levels[node].astype(np.int64) >= level_cap))
        while np.any(active):
            ids = node[active]
            centers = self.cell_centers(ids)
            kx = (pts[active, 0] >= centers[:, 0]).astype(np.int64)
            ky = (pts[active, 1] >= centers[:, 1]).astype(np.int64)
            kz = (pts[active, 2] >= centers[:, 2]).astype(np.int64)
            child = self.children[ids, 4 * kz + 2 * ky + kx].astype(np.int64)
            node[active] = child
            lv = self.levels[node].astype(np.int64)
            active = ~(self.is_leaf[node] | (lv >= level_cap))
        return node

    def point_query(self, p, level_cap: int) -> AmrNode:
        """Unique node containing p: first leaf or level_cap node on the descent."""
        idx = self.point_query_many(np.asarray(p, dtype=np.float64), level_cap)
        return AmrNode(self, int(idx[0]))

    def cells_at_cap_indices(self, level_cap: int) -> np.ndarray:
        """Node indices of cells rendered at a level cap, in depth-first order.

        Selects leaves at level <= cap plus non-leaf nodes at exactly the cap;
        together these tile the box exactly once.  In partial trees absent
        placeholder nodes are excluded.
        """
        if level_cap < self.levelmin:
            raise ValueError(f"level_cap {level_cap} below levelmin {self.levelmin}")
        lv = self.levels.astype(np.int64)
        mask = (self.is_leaf & (lv <= level_cap)) | (lv == level_cap)
        if self.present is not None:
            mask &= self.present
        return np.flatnonzero(mask)

    def cells_at_cap(self, level_cap: int):
        """Iterate AmrNode views over cells_at_cap_indices."""
        for i in self.cells_at_cap_indices(level_cap):
            yield AmrNode(self, int(i))


def _dfs_order(levels, ix, iy, iz, levelmax):
    """Depth-first rank (children ascending octant) from coordinates alone.

    Key: the path digit string d_1..d_level, each digit stored +1 so that a
    0-padded prefix (an ancestor) sorts before its descendants.
    """
    n = len(levels)
    if n == 0:
        return np.empty(0, dtype=np.int64)
    lv = levels.astype(np.int64)
    cols = []
    for j in range(1, int(levelmax) + 1):
        s = np.maximum(lv - j, 0)
        digit = (((iz.astype(np.int64) >> s) & 1) << 2) | (((iy.astype(np.int64) >> s) & 1) << 1) | (
            (ix.astype(np.int64) >> s) & 1
        )
        cols.append(np.where(lv >= j, digit + 1, 0).astype(np.uint8))
    if not cols:
        return np.arange(n, dtype=np.int64)
    return np.lexsort(tuple(cols[::-1]))


def from_cells(box_len, levelmin, levelmax, fields, conservative,
               levels, ix, iy, iz, is_leaf, values,
               domains=None, ndomains=1, *, strict=True, average=False,
               present=None) -> AmrTree:
    """Assemble an AmrTree from per-node records.

    Records may arrive in any order; nodes are sorted into canonical
    depth-first order and children are linked by coordinate lookup.  In
    strict mode a non-leaf with a partial child set (1..7 present) is a
    StructureError and a non-leaf with no recorded children becomes a leaf;
    nodes unreachable from the root are rejected.  Partial trees
    (strict=False) keep whatever children exist.

    With average=True, values of conservative-flagged fields on non-leaf
    nodes are replaced bottom-up by the mean of their 8 children.
    """
    levels = np.ascontiguousarray(levels, dtype=np.uint8)
    ix = np.ascontiguousarray(ix, dtype=np.uint32)
    iy = np.ascontiguousarray(iy, dtype=np.uint32)
    iz = np.ascontiguousarray(iz, dtype=np.uint32)
    is_leaf = np.ascontiguousarray(is_leaf, dtype=bool)
    values = np.ascontiguousarray(values, dtype=np.float64)
    n = len(levels)
    if values.ndim == 1:
        values = values[:, None]
    if values.shape != (n, len(fields)):
        raise ValueError(f"values shape {values.shape} != ({n}, {len(fields)})")
    if n == 0:
        raise StructureError("empty record set")
    lv64 = levels.astype(np.int64)
    if np.any(lv64 > levelmax):
        raise StructureError("record level above levelmax")
    lim = np.int64(1) << lv64
    if (np.any(ix >= lim) or np.any(iy >= lim) or np.any(iz >= lim)):
        raise StructureError("cell index outside [0, 2^level)")

    order = _dfs_order(levels, ix, iy, iz, levelmax)
    levels, ix, iy, iz = levels[order], ix[order], iy[order], iz[order]
    is_leaf = is_leaf[order].copy()
    values = values[order]
    domains = np.zeros(n, dtype=np.uint32) if domains is None else np.ascontiguousarray(domains, dtype=np.uint32)[order]
    if present is not None:
        present = np.ascontiguousarray(present, dtype=bool)[order]

    if int(levels[0]) != 0:
        raise StructureError("no root record at level 0")
    if n > 1 and int(levels[1]) == 0:
        raise StructureError("multiple level-0 records")

    # Duplicate coordinates collapse to adjacent DFS ranks.
    key_lv = levels.astype(np.int64)
    key_m = morton3(ix, iy, iz)
    dup = (key_lv[1:] == key_lv[:-1]) & (key_m[1:] == key_m[:-1])
    if np.any(dup):
        raise StructureError("duplicate cell record")

    idx_by_level = [np.flatnonzero(levels == l) for l in range(int(levelmax) + 1)]
    morton_by_level = [key_m[ids] for ids in idx_by_level]

    children = np.full((n, 8), -1, dtype=np.int64)
    for l in range(int(levelmax)):
        parents = idx_by_level[l][~is_leaf[idx_by_level[l]]]
        if len(parents) == 0:
            continue
        child_codes = (key_m[parents][:, None] << np.uint64(3)) | np.arange(8, dtype=np.uint64)[None, :]
        flat = child_codes.ravel()
        tgt = morton_by_level[l + 1]
        if len(tgt) == 0:
            found = np.zeros(len(flat), dtype=bool)
            pos = np.zeros(len(flat), dtype=np.int64)
        else:
            pos = np.searchsorted(tgt, flat)
            inb = pos < len(tgt)
            found = np.zeros(len(flat), dtype=bool)
            found[inb] = tgt[pos[inb]] == flat[inb]
        cnt = found.reshape(-1, 8).sum(axis=1)
        if strict:
            bad = (cnt != 0) & (cnt != 8)
            if np.any(bad):
                raise StructureError(
                    f"non-leaf at level {l} has {int(cnt[bad][0])} of 8 children recorded"
                )
            empty = cnt == 0
            if np.any(empty):
                is_leaf[parents[empty]] = True
            link = cnt == 8
            if np.any(link):
                rows = parents[link]
                children[rows, :] = idx_by_level[l + 1][pos.reshape(-1, 8)[link]]
        else:
            pos_clip = np.minimum(pos, max(len(tgt) - 1, 0))
            glob = idx_by_level[l + 1][pos_clip.reshape(-1, 8)] if len(tgt) else np.zeros((len(parents), 8), dtype=np.int64)
            hit = found.reshape(-1, 8)
            children[parents] = np.where(hit, glob, -1)
            becomes_leaf = cnt == 0
            if np.any(becomes_leaf):
                is_leaf[parents[becomes_leaf]] = True

    if strict:
        reachable = np.zeros(n, dtype=bool)
        reachable[0] = True
        for l in range(int(levelmax)):
            ids = idx_by_level[l]
            src = ids[reachable[ids] & ~is_leaf[ids]]
            if len(src):
                reachable[children[src].ravel()] = True
        if not np.all(reachable):
            raise StructureError(f"{int(np.count_nonzero(~reachable))} records unreachable from the root")

    children32 = children.astype(np.int32)
    tree = AmrTree(box_len, levelmin, levelmax, fields, conservative,
                   levels, ix, iy, iz, is_leaf, children32, values, domains, ndomains,
                   present=present)
    if average:
        _average_down(tree)
    return tree


def _average_down(tree: AmrTree):
    """Overwrite conservative-flagged fields on non-leaves with child means, bottom-up."""
    cons = [j for j, c in enumerate(tree.conservative) if c]
    if not cons:
        return
    lv = tree.levels.astype(np.int64)
    for l in range(int(tree.levelmax) - 1, -1, -1):
        parents = np.flatnonzero((lv == l) & ~tree.is_leaf)
        if len(parents) == 0:
            continue
        ch = tree.children[parents].astype(np.int64)
        for j in cons:
            tree.values[parents, j] = tree.values[:, j][ch].mean(axis=1)


def build_tree(box_len, fields, levelmin, levelmax, value_fn, refine_fn=None,
               conservative=None, ndomains=1) -> AmrTree:
    """Grow a tree level by level from a value function and a refinement rule.

    value_fn(level, centers (n,3)) -> (n, nfields) values at cell centers.
    refine_fn(level, centers, values) -> bool mask; consulted only for
    levelmin <= level < levelmax (shallower cells always split, levelmax
    never does).  Non-leaf values of conservative fields are then replaced
    by bottom-up child averages.
    """
    if levelmin > levelmax:
        raise ValueError(f"levelmin {levelmin} > levelmax {levelmax}")
    if conservative is None:
        conservative = [True] * len(fields)

    all_lv, all_ix, all_iy, all_iz, all_leaf, all_val = [], [], [], [], [], []
    cur = np.zeros((1, 3), dtype=np.int64)
    for level in range(levelmax + 1):
        n = len(cur)
        if n == 0:
            break
        inv = np.ldexp(1.0, -level)
        centers = box_len * ((cur + 0.5) * inv)
        vals = np.asarray(value_fn(level, centers), dtype=np.float64)
        if vals.ndim == 1:
            vals = vals[:, None]
        if level < levelmin:
            split = np.ones(n, dtype=bool)
        elif level >= levelmax:
            split = np.zeros(n, dtype=bool)
        elif refine_fn is None:
            split = np.zeros(n, dtype=bool)
        else:
            split = np.asarray(refine_fn(level, centers, vals), dtype=bool)
        all_lv.append(np.full(n, level, dtype=np.uint8))
        all_ix.append(cur[:, 0].astype(np.uint32))
        all_iy.append(cur[:, 1].astype(np.uint32))
        all_iz.append(cur[:, 2].astype(np.uint32))
        all_leaf.append(~split)
        all_val.append(vals)
        if not np.any(split):
            break
        parents = cur[split]
        oct_k = np.array([[kx, ky, kz] for kz in (0, 1) for ky in (0, 1) for kx in (0, 1)], dtype=np.int64)
        cur = (2 * parents[:, None, :] + oct_k[None, :, :]).reshape(-1, 3)

    return from_cells(
        box_len, levelmin, levelmax, fields, conservative,
        np.concatenate(all_lv), np.concatenate(all_ix), np.concatenate(all_iy), np.concatenate(all_iz),
        np.concatenate(all_leaf), np.concatenate(all_val, axis=0),
        ndomains=ndomains, strict=True, average=True,
    )
