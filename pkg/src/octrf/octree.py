"""Sparse octree storage with merge/split mutation primitives.

Nodes live in a pooled array indexed by integer ids. The root always sits at
slot 0. Structural mutations (merge, split) are O(1) amortized through a
free list; serialization compacts ids, the in-memory pool never does.

Geometry convention: every node owns the axis-aligned cube
``[center - half, center + half)`` per axis, half-open with ties resolved
toward the larger coordinate. A node at depth d has
``half = root_half * 2**-d``. Child octant index packs the comparison
against the parent center as x -> bit 0, y -> bit 1, z -> bit 2.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence, Union

import numpy as np

from .errors import (
    ConfigError,
    DepthCapError,
    HandleError,
    OutOfBoundsError,
    PreconditionError,
    StructureError,
)

INVALID = -1

VALID_BASIS_COUNTS = (1, 4, 9, 16)

# Octant corner signs, row o gives the child-center offset direction.
OCTANT_SIGNS = np.array(
    [[(1.0 if o & 1 else -1.0), (1.0 if o & 2 else -1.0), (1.0 if o & 4 else -1.0)]
     for o in range(8)],
    dtype=np.float64,
)


@dataclass
class LeafPayload:
    """Per-leaf radiance data: raw density and SH color coefficients.

    ``sigma`` is the extinction coefficient used directly by the renderer
    (no activation), kept >= 0 by the optimizer. ``sh`` holds 3*B
    coefficients laid out channel-major: channel k occupies
    ``sh[k*B:(k+1)*B]``.
    """

    sigma: float
    sh: np.ndarray

    def copy(self) -> "LeafPayload":
        return LeafPayload(float(self.sigma), np.array(self.sh, dtype=np.float32))


@dataclass
class TreeStats:
    leaf_count: int
    internal_count: int
    depth_histogram: dict[int, int] = field(default_factory=dict)
    payload_bytes: int = 0


InitSource = Union[LeafPayload, Callable[[np.ndarray], tuple], int]


class SparseOctree:
    """Pooled-array octree over a world cube.

    Node ids are plain ints. ``generation`` bumps on every structural
    mutation; holders of cached per-leaf data compare generations to detect
    staleness (slot ids may be reused after a merge frees them).
    """

    def __init__(self, center: Sequence[float], half_extent: float,
                 basis_count: int, max_depth: int = 10, capacity: int = 64):
        if basis_count not in VALID_BASIS_COUNTS:
            raise ConfigError(f"basis_count must be one of {VALID_BASIS_COUNTS}, "
                              f"got {basis_count}")
        if max_depth < 0:
            raise ConfigError(f"max_depth must be >= 0, got {max_depth}")
        if not (half_extent > 0 and math.isfinite(half_extent)):
            raise ConfigError(f"half_extent must be positive, got {half_extent}")
        self.basis_count = int(basis_count)
        self.max_depth = int(max_depth)
        self.center = np.asarray(center, dtype=np.float64).reshape(3).copy()
        self.half_extent = float(half_extent)
        self.generation = 0

        cap = max(int(capacity), 8)
        self._child = np.full((cap, 8), INVALID, dtype=np.int64)
        self._parent = np.full(cap, INVALID, dtype=np.int64)
        self._depth = np.zeros(cap, dtype=np.int32)
        self._leaf = np.zeros(cap, dtype=np.uint8)
        self._alive = np.zeros(cap, dtype=np.uint8)
        self._center = np.zeros((cap, 3), dtype=np.float64)
        self.sigma = np.zeros(cap, dtype=np.float32)
        self.sh = np.zeros((cap, 3 * basis_count), dtype=np.float32)
        self._free: list[int] = list(range(cap - 1, 0, -1))

        # Root occupies slot 0 as a zero leaf.
        self._alive[0] = 1
        self._leaf[0] = 1
        self._center[0] = self.center
        self.leaf_count = 1
        self.internal_count = 0

    # ------------------------------------------------------------------
    # Basic queries

    @property
    def root(self) -> int:
        return 0

    @property
    def capacity(self) -> int:
        return self.sigma.shape[0]

    def half_at(self, depth: int) -> float:
        return self.half_extent * 2.0 ** (-int(depth))

    def half_table(self) -> np.ndarray:
        return self.half_extent * 2.0 ** (-np.arange(self.max_depth + 1, dtype=np.float64))

    def is_live(self, node: int) -> bool:
        return 0 <= node < self.capacity and bool(self._alive[node])

    def is_leaf(self, node: int) -> bool:
        self._check_live(node)
        return bool(self._leaf[node])

    def node_depth(self, node: int) -> int:
        self._check_live(node)
        return int(self._depth[node])

    def node_center(self, node: int) -> np.ndarray:
        self._check_live(node)
        return self._center[node].copy()

    def children(self, node: int) -> np.ndarray:
        self._check_live(node)
        if self._leaf[node]:
            raise PreconditionError(f"node {node} is a leaf, has no children")
        return self._child[node].copy()

    def parent(self, node: int) -> int:
        self._check_live(node)
        return int(self._parent[node])

    def payload(self, node: int) -> LeafPayload:
        self._check_live(node)
        if not self._leaf[node]:
            raise PreconditionError(f"node {node} is internal, has no payload")
        return LeafPayload(float(self.sigma[node]), self.sh[node].copy())

    def set_payload(self, node: int, payload: LeafPayload) -> None:
        self._check_live(node)
        if not self._leaf[node]:
            raise PreconditionError(f"node {node} is internal, has no payload")
        sh = np.asarray(payload.sh, dtype=np.float32).reshape(-1)
        if sh.shape[0] != 3 * self.basis_count:
            raise ConfigError(f"sh length {sh.shape[0]} != 3*B={3 * self.basis_count}")
        if not (math.isfinite(payload.sigma) and np.isfinite(sh).all()):
            raise ConfigError("payload values must be finite")
        self.sigma[node] = payload.sigma
        self.sh[node] = sh

    def leaf_ids(self) -> np.ndarray:
        """Live leaf ids, ascending."""
        return np.nonzero((self._alive == 1) & (self._leaf == 1))[0].astype(np.int64)

    def internal_ids(self) -> np.ndarray:
        return np.nonzero((self._alive == 1) & (self._leaf == 0))[0].astype(np.int64)

    def _check_live(self, node: int) -> None:
        if not self.is_live(node):
            raise HandleError(f"node id {node} does not resolve to a live node")

    # ------------------------------------------------------------------
    # Mutation

    def _grow(self, extra: int) -> None:
        old = self.capacity
        new = max(old * 2, old + extra)
        grown_child = np.full((new, 8), INVALID, dtype=np.int64)
        grown_child[:old] = self._child
        self._child = grown_child
        self._parent = np.concatenate([self._parent,
                                       np.full(new - old, INVALID, dtype=np.int64)])
        self._depth = np.concatenate([self._depth, np.zeros(new - old, dtype=np.int32)])
        self._leaf = np.concatenate([self._leaf, np.zeros(new - old, dtype=np.uint8)])
        self._alive = np.concatenate([self._alive, np.zeros(new - old, dtype=np.uint8)])
        self._center = np.concatenate([self._center,
                                       np.zeros((new - old, 3), dtype=np.float64)])
        self.sigma = np.concatenate([self.sigma, np.zeros(new - old, dtype=np.float32)])
        self.sh = np.concatenate(
            [self.sh, np.zeros((new - old, 3 * self.basis_count), dtype=np.float32)])
        self._free.extend(range(new - 1, old - 1, -1))

    def _alloc(self) -> int:
        if not self._free:
            self._grow(8)
        return self._free.pop()

    def _release(self, node: int) -> None:
        self._alive[node] = 0
        self._leaf[node] = 0
        self._parent[node] = INVALID
        self._child[node] = INVALID
        self._free.append(node)

    def split_leaf(self, leaf: int) -> np.ndarray:
        """Replace a leaf with 8 children carrying exact payload copies."""
        self._check_live(leaf)
        if not self._leaf[leaf]:
            raise PreconditionError(f"split target {leaf} is not a leaf")
        depth = int(self._depth[leaf])
        if depth >= self.max_depth:
            raise DepthCapError(f"leaf {leaf} already at max_depth {self.max_depth}")

        ids = np.empty(8, dtype=np.int64)
        for o in range(8):
            ids[o] = self._alloc()
        child_half = self.half_at(depth) * 0.5
        parent_center = self._center[leaf]
        sigma = self.sigma[leaf]
        sh = self.sh[leaf].copy()
        for o in range(8):
            c = ids[o]
            self._alive[c] = 1
            self._leaf[c] = 1
            self._parent[c] = leaf
            self._depth[c] = depth + 1
            self._center[c] = parent_center + child_half * OCTANT_SIGNS[o]
            self.sigma[c] = sigma
            self.sh[c] = sh
        self._leaf[leaf] = 0
        self._child[leaf] = ids
        self.sigma[leaf] = 0.0
        self.sh[leaf] = 0.0
        self.leaf_count += 7
        self.internal_count += 1
        self.generation += 1
        return ids

    def merge_children(self, parent: int) -> int:
        """Collapse 8 leaf children into the parent, averaging payloads.

        The mean runs in float64 and rounds once to the float32 store.
        """
        self._check_live(parent)
        if self._leaf[parent]:
            raise PreconditionError(f"merge target {parent} is a leaf")
        kids = self._child[parent]
        if not self._leaf[kids].all():
            raise PreconditionError(
                f"node {parent} has internal children; merge bottom-up first")
        mean_sigma = self.sigma[kids].astype(np.float64).mean()
        mean_sh = self.sh[kids].astype(np.float64).mean(axis=0)
        for c in kids:
            self._release(int(c))
        self._leaf[parent] = 1
        self._child[parent] = INVALID
        self.sigma[parent] = np.float32(mean_sigma)
        self.sh[parent] = mean_sh.astype(np.float32)
        self.leaf_count -= 7
        self.internal_count -= 1
        self.generation += 1
        return parent

    def merge_children_many(self, parents: np.ndarray) -> None:
        """Vectorized merge of many disjoint parents (all children leaves)."""
        parents = np.asarray(parents, dtype=np.int64)
        if parents.size == 0:
            return
        kids = self._child[parents]
        if not (self._alive[parents].all() and (self._leaf[parents] == 0).all()
                and self._leaf[kids.reshape(-1)].all()):
            raise PreconditionError("batch merge preconditions violated")
        self.sigma[parents] = self.sigma[kids].astype(np.float64).mean(axis=1).astype(np.float32)
        self.sh[parents] = self.sh[kids].astype(np.float64).mean(axis=1).astype(np.float32)
        flat = kids.reshape(-1)
        self._alive[flat] = 0
        self._leaf[flat] = 0
        self._parent[flat] = INVALID
        self._child[flat] = INVALID
        self._free.extend(int(c) for c in flat)
        self._leaf[parents] = 1
        self._child[parents] = INVALID
        self.leaf_count -= 7 * parents.size
        self.internal_count -= parents.size
        self.generation += 1

    def split_leaf_many(self, leaves: np.ndarray) -> np.ndarray:
        """Split many leaves; returns the (k, 8) child id array."""
        leaves = np.asarray(leaves, dtype=np.int64)
        out = np.empty((leaves.size, 8), dtype=np.int64)
        for i, leaf in enumerate(leaves):
            out[i] = self.split_leaf(int(leaf))
        return out

    # ------------------------------------------------------------------
    # Addressing

    def locate(self, point: Sequence[float]) -> tuple[int, np.ndarray, float]:
        """Leaf containing ``point`` plus its cube (center, half extent)."""
        p = np.asarray(point, dtype=np.float64).reshape(3)
        lo = self.center - self.half_extent
        hi = self.center + self.half_extent
        if not ((p >= lo).all() and (p < hi).all()):
            raise OutOfBoundsError(f"point {p.tolist()} outside half-open bounds")
        node = 0
        while not self._leaf[node]:
            c = self._center[node]
            octant = int(p[0] >= c[0]) | (int(p[1] >= c[1]) << 1) | (int(p[2] >= c[2]) << 2)
            node = int(self._child[node, octant])
        return node, self._center[node].copy(), self.half_at(int(self._depth[node]))

    # ------------------------------------------------------------------
    # Inspection

    def stats(self) -> TreeStats:
        leaves = self.leaf_ids()
        depths = self._depth[leaves]
        hist = {int(d): int(n) for d, n in zip(*np.unique(depths, return_counts=True))}
        payload_bytes = int(leaves.size) * 4 * (1 + 3 * self.basis_count)
        return TreeStats(
            leaf_count=int(self.leaf_count),
            internal_count=int(self.internal_count),
            depth_histogram=hist,
            payload_bytes=payload_bytes,
        )

    def validate(self) -> None:
        """Check structural invariants, raising StructureError on violation."""
        alive = np.nonzero(self._alive == 1)[0]
        leaves = alive[self._leaf[alive] == 1]
        internals = alive[self._leaf[alive] == 0]
        if leaves.size != self.leaf_count or internals.size != self.internal_count:
            raise StructureError("node counters disagree with alive flags")
        if leaves.size != 7 * internals.size + 1:
            raise StructureError(
                f"L = 7I + 1 violated: L={leaves.size} I={internals.size}")
        if not self._alive[0]:
            raise StructureError("root slot 0 is dead")

        # Reachability sweep from the root; checks parent/depth/center links.
        seen = np.zeros(self.capacity, dtype=bool)
        seen[0] = True
        frontier = np.array([0], dtype=np.int64)
        count = 1
        while frontier.size:
            inner = frontier[self._leaf[frontier] == 0]
            if inner.size == 0:
                break
            kids = self._child[inner]
            flat = kids.reshape(-1)
            if (flat < 0).any() or (flat >= self.capacity).any():
                raise StructureError("child index out of range")
            if not self._alive[flat].all():
                raise StructureError("internal node points at a dead child")
            if seen[flat].any():
                raise StructureError("node reachable through two parents")
            if not (self._parent[flat] == np.repeat(inner, 8)).all():
                raise StructureError("parent back-pointer mismatch")
            if not (self._depth[flat] == np.repeat(self._depth[inner] + 1, 8)).all():
                raise StructureError("child depth != parent depth + 1")
            halves = self.half_extent * 2.0 ** (-self._depth[flat].astype(np.float64))
            expect = (np.repeat(self._center[inner], 8, axis=0)
                      + halves[:, None] * np.tile(OCTANT_SIGNS, (inner.size, 1)))
            if not np.array_equal(expect, self._center[flat]):
                raise StructureError("child centers off the octant grid")
            seen[flat] = True
            count += flat.size
            frontier = flat
        if count != alive.size:
            raise StructureError("live nodes unreachable from root")
        if (self._depth[leaves] > self.max_depth).any():
            raise StructureError("leaf deeper than max_depth")
        if not (np.isfinite(self.sigma[leaves]).all()
                and np.isfinite(self.sh[leaves]).all()):
            raise StructureError("non-finite payload")
        if (self.sigma[leaves] < 0).any():
            raise StructureError("negative density")


def build_dense(depth: int, center: Sequence[float], half_extent: float,
                basis_count: int, init: InitSource, max_depth: int = 10) -> SparseOctree:
    """Complete octree of uniform leaf depth with payloads from ``init``.

    ``init`` is one of: a LeafPayload applied to every leaf, a callable
    mapping an (N, 3) array of leaf centers to (sigma[N], sh[N, 3*B]), or an
    int seed for random payloads (sigma ~ U[0,1), sh ~ N(0, 0.5)).
    """
    if not (0 <= depth <= max_depth):
        raise ConfigError(f"depth {depth} outside [0, max_depth={max_depth}]")
    n_total = (8 ** (depth + 1) - 1) // 7
    tree = SparseOctree(center, half_extent, basis_count,
                        max_depth=max_depth, capacity=n_total)
    if depth > 0:
        tree._free.clear()
        offsets = [(8 ** k - 1) // 7 for k in range(depth + 2)]
        centers = tree.center[None, :]
        for k in range(depth + 1):
            lo, hi = offsets[k], offsets[k + 1]
            if k > 0:
                child_half = tree.half_at(k - 1) * 0.5
                n_parents = centers.shape[0]
                centers = (np.repeat(centers, 8, axis=0)
                           + child_half * np.tile(OCTANT_SIGNS, (n_parents, 1)))
                parents = np.repeat(np.arange(offsets[k - 1], lo, dtype=np.int64), 8)
                tree._parent[lo:hi] = parents
            tree._alive[lo:hi] = 1
            tree._depth[lo:hi] = k
            tree._center[lo:hi] = centers
            if k < depth:
                base = offsets[k + 1] + 8 * np.arange(hi - lo, dtype=np.int64)
                tree._child[lo:hi] = base[:, None] + np.arange(8, dtype=np.int64)
                tree._leaf[lo:hi] = 0
            else:
                tree._leaf[lo:hi] = 1
        tree.leaf_count = 8 ** depth
        tree.internal_count = (8 ** depth - 1) // 7

    leaves = np.arange(n_total - 8 ** depth, n_total, dtype=np.int64) if depth > 0 \
        else np.array([0], dtype=np.int64)
    centers = tree._center[leaves]
    if isinstance(init, LeafPayload):
        sh = np.asarray(init.sh, dtype=np.float32).reshape(-1)
        if sh.shape[0] != 3 * basis_count:
            raise ConfigError(f"init sh length {sh.shape[0]} != 3*B={3 * basis_count}")
        tree.sigma[leaves] = np.float32(init.sigma)
        tree.sh[leaves] = sh
    elif callable(init):
        sigma, sh = init(centers)
        sigma = np.asarray(sigma, dtype=np.float32).reshape(-1)
        sh = np.asarray(sh, dtype=np.float32).reshape(len(leaves), 3 * basis_count)
        if sigma.shape[0] != leaves.size:
            raise ConfigError("init callback returned wrong-length sigma")
        tree.sigma[leaves] = sigma
        tree.sh[leaves] = sh
    else:
        rng = np.random.default_rng(int(init))
        tree.sigma[leaves] = rng.uniform(0.0, 1.0, leaves.size).astype(np.float32)
        tree.sh[leaves] = rng.normal(0.0, 0.5, (leaves.size, 3 * basis_count)).astype(np.float32)
    return tree
