"""Per-leaf training signals accumulated over one calibration interval.

The buffer sums each leaf's light contribution Q across every training ray
of the interval. Density is the alternative signal; it needs no
accumulation and is read straight from the tree.
"""

import csv
import enum

import numpy as np

from .errors import HandleError, InputError, OutOfBoundsError, StaleBufferError
from .octree import SparseOctree


class SignalTarget(enum.Enum):
    RAY_WEIGHT_Q = "q"
    DENSITY_SIGMA = "sigma"


class SignalBuffer:
    """Interval-windowed Σ_r Q_{i,r} accumulator, bound to one tree topology.

    Any structural mutation of the tree invalidates the buffer; it must be
    reset before further use. The threshold τ therefore always refers to
    the Q mass of exactly one interval's rays.
    """

    def __init__(self, tree: SparseOctree,
                 target: SignalTarget = SignalTarget.RAY_WEIGHT_Q):
        self.target = SignalTarget(target)
        self._tree = tree
        self.accumulator = np.zeros(0, dtype=np.float64)
        self.epoch_rays = 0
        self.generation = -1
        self.reset()

    @property
    def tree(self) -> SparseOctree:
        return self._tree

    def reset(self) -> None:
        """Re-bind to the tree's current topology with a zero accumulator."""
        self.accumulator = np.zeros(self._tree.capacity, dtype=np.float64)
        self.epoch_rays = 0
        self.generation = self._tree.generation

    def is_fresh(self) -> bool:
        return self.generation == self._tree.generation

    def check_fresh(self) -> None:
        if not self.is_fresh():
            raise StaleBufferError(
                f"signal buffer bound to generation {self.generation}, "
                f"tree is at {self._tree.generation}; reset() required")

    def accumulate(self, contributions: np.ndarray, ray_count: int) -> None:
        """Add one batch's per-leaf Q contributions."""
        self.check_fresh()
        contributions = np.asarray(contributions, dtype=np.float64)
        if contributions.shape != self.accumulator.shape:
            raise InputError(
                f"contribution array shape {contributions.shape} does not "
                f"match buffer shape {self.accumulator.shape}")
        if (contributions < 0).any():
            raise InputError("negative Q contribution")
        self.accumulator += contributions
        self.epoch_rays += int(ray_count)


def signal_value(buffer: SignalBuffer, tree: SparseOctree, leaf: int) -> float:
    """One leaf's current signal under the buffer's target."""
    return float(signal_values(buffer, tree, np.asarray([leaf]))[0])


def signal_values(buffer: SignalBuffer, tree: SparseOctree,
                  leaves: np.ndarray) -> np.ndarray:
    """Vectorized signal lookup for many leaves."""
    if tree is not buffer.tree:
        raise InputError("buffer is bound to a different tree")
    buffer.check_fresh()
    leaves = np.asarray(leaves, dtype=np.int64)
    if leaves.size and not (tree._alive[leaves].all() and tree._leaf[leaves].all()):
        raise HandleError("signal lookup on a dead or internal node")
    if buffer.target is SignalTarget.DENSITY_SIGMA:
        return tree.sigma[leaves].astype(np.float64)
    return buffer.accumulator[leaves].copy()


def dump_signals(buffer: SignalBuffer, tree: SparseOctree, path) -> None:
    """Write (leaf, depth, center, signal) rows for every live leaf."""
    buffer.check_fresh()
    leaves = tree.leaf_ids()
    values = signal_values(buffer, tree, leaves)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["leaf", "depth", "cx", "cy", "cz", "signal"])
        for leaf, value in zip(leaves, values):
            c = tree._center[leaf]
            writer.writerow([int(leaf), int(tree._depth[leaf]),
                             repr(float(c[0])), repr(float(c[1])),
                             repr(float(c[2])), repr(float(value))])


def load_signals(tree: SparseOctree, path,
                 target: SignalTarget = SignalTarget.RAY_WEIGHT_Q) -> SignalBuffer:
    """Rebuild a buffer from a dump written against the same topology.

    Rows carrying the geometry columns are matched by cell (center plus
    depth), so a dump survives the id renumbering that saving a tree
    performs. Minimal (leaf, signal) dumps fall back to raw pool ids and
    only work against the very tree that produced them.
    """
    buffer = SignalBuffer(tree, target)
    live_leaves = set(int(i) for i in tree.leaf_ids())
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "leaf" not in reader.fieldnames \
                or "signal" not in reader.fieldnames:
            raise InputError(f"{path}: expected a signal dump with "
                             "'leaf' and 'signal' columns")
        by_cell = all(c in reader.fieldnames
                      for c in ("depth", "cx", "cy", "cz"))
        seen = set()
        for row in reader:
            try:
                leaf = int(row["leaf"])
                value = float(row["signal"])
                if by_cell:
                    depth = int(row["depth"])
                    center = (float(row["cx"]), float(row["cy"]),
                              float(row["cz"]))
            except (TypeError, ValueError) as exc:
                raise InputError(f"{path}: malformed signal row {row}") from exc
            if by_cell:
                try:
                    leaf, _, _ = tree.locate(center)
                except OutOfBoundsError as exc:
                    raise InputError(
                        f"{path}: cell center {center} is outside this "
                        "tree; dump does not match") from exc
                if int(tree._depth[leaf]) != depth:
                    raise InputError(
                        f"{path}: no depth-{depth} leaf cell at {center}; "
                        "dump does not match this tree")
            elif leaf not in live_leaves:
                raise InputError(f"{path}: leaf {leaf} is not a live leaf; "
                                 "dump does not match this tree")
            if leaf in seen:
                raise InputError(f"{path}: duplicate rows for leaf {leaf}")
            seen.add(leaf)
            if value < 0:
                raise InputError(f"{path}: negative signal for leaf {leaf}")
            buffer.accumulator[leaf] = value
    if len(seen) != len(live_leaves):
        raise InputError(f"{path}: {len(seen)} rows for "
                         f"{len(live_leaves)} leaves")
    return buffer
