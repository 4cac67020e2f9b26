"""Signal-guided structural calibration: prune cold regions, sample hot ones.

Pruning merges sibling sets whose signals all sit at or below tau; the
recursive variant keeps folding upward, treating a merged parent's signal
as the sum of its children's accumulated contribution (Q mass is additive
over sub-segments). Sampling splits the top gamma fraction of leaves by
signal. Both edits preserve the rendered image at application time: splits
copy payloads exactly and merges of homogeneous siblings average them.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .octree import SparseOctree
from .signals import SignalBuffer, SignalTarget


@dataclass
class CalibrationConfig:
    """Thresholds and mode switches for one calibration event.

    gamma = 0 disables sampling (prune-only runs). sample_threshold, when
    set, replaces the top-k rule with an absolute signal cutoff.
    """

    tau: float = 1.0
    gamma: float = 0.01
    recursive: bool = False
    sample_threshold: float | None = None
    check_invariants: bool = False

    def __post_init__(self):
        if self.tau < 0:
            raise ConfigError(f"tau must be >= 0, got {self.tau}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError(f"gamma must be in [0, 1], got {self.gamma}")
        if self.sample_threshold is not None and self.sample_threshold < 0:
            raise ConfigError("sample_threshold must be >= 0")


@dataclass
class CalibrationReport:
    """Outcome of one calibration event.

    events logs every structural edit in application order as
    ("merge"|"split", node, (8 child ids)); optimizer state is re-mapped by
    replaying it. Merged-then-reused slots make the order significant.
    """

    leaves_before: int
    leaves_after: int
    merges_applied: int
    splits_applied: int
    recursion_rounds: int
    events: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps({
            "leaves_before": self.leaves_before,
            "leaves_after": self.leaves_after,
            "merges_applied": self.merges_applied,
            "splits_applied": self.splits_applied,
            "recursion_rounds": self.recursion_rounds,
        })


def _prunable_parents(tree: SparseOctree) -> np.ndarray:
    """Internal nodes whose 8 children are all leaves, ascending."""
    internals = tree.internal_ids()
    if internals.size == 0:
        return internals
    kids = tree._child[internals]
    all_leaf = tree._leaf[kids].all(axis=1)
    return internals[all_leaf]


def _child_signals(tree: SparseOctree, acc: np.ndarray, target: SignalTarget,
                   parents: np.ndarray) -> np.ndarray:
    kids = tree._child[parents]
    if target is SignalTarget.DENSITY_SIGMA:
        return tree.sigma[kids].astype(np.float64)
    return acc[kids]


def select_prune(tree: SparseOctree, buffer: SignalBuffer,
                 tau: float) -> np.ndarray:
    """Parents of all-leaf sibling sets whose signals all sit <= tau."""
    buffer.check_fresh()
    if tau < 0:
        raise ConfigError(f"tau must be >= 0, got {tau}")
    parents = _prunable_parents(tree)
    if parents.size == 0:
        return parents
    sig = _child_signals(tree, buffer.accumulator, buffer.target, parents)
    return parents[(sig <= tau).all(axis=1)]


def prune(tree: SparseOctree, buffer: SignalBuffer, tau: float,
          recursive: bool = False) -> CalibrationReport:
    """Merge every selected sibling set; optionally repeat to a fixed point."""
    buffer.check_fresh()
    if tau < 0:
        raise ConfigError(f"tau must be >= 0, got {tau}")
    leaves_before = tree.leaf_count
    # Working copy: recursion folds child signal sums into merged parents,
    # while the buffer itself goes stale at the first mutation.
    acc = buffer.accumulator.copy()
    target = buffer.target
    merges = 0
    rounds = 0
    events = []
    while True:
        parents = _prunable_parents(tree)
        if parents.size:
            sig = _child_signals(tree, acc, target, parents)
            parents = parents[(sig <= tau).all(axis=1)]
        if parents.size == 0:
            break
        kids = tree._child[parents]
        for p, ks in zip(parents, kids):
            events.append(("merge", int(p), tuple(int(k) for k in ks)))
        acc[parents] = acc[kids].sum(axis=1)
        tree.merge_children_many(parents)
        merges += int(parents.size)
        rounds += 1
        if not recursive:
            break
    return CalibrationReport(leaves_before=leaves_before,
                             leaves_after=tree.leaf_count,
                             merges_applied=merges,
                             splits_applied=0,
                             recursion_rounds=rounds,
                             events=events)


def _eligible_leaf_signals(tree: SparseOctree, acc: np.ndarray,
                           target: SignalTarget):
    leaves = tree.leaf_ids()
    if target is SignalTarget.DENSITY_SIGMA:
        sig = tree.sigma[leaves].astype(np.float64)
    else:
        sig = acc[leaves]
    eligible = (tree._depth[leaves] < tree.max_depth) & (sig > 0.0)
    return leaves, sig, eligible


def _select_sample_from(tree: SparseOctree, acc: np.ndarray,
                        target: SignalTarget, gamma: float,
                        threshold) -> np.ndarray:
    leaves, sig, eligible = _eligible_leaf_signals(tree, acc, target)
    leaves, sig = leaves[eligible], sig[eligible]
    if threshold is not None:
        return np.sort(leaves[sig > threshold])
    # Top ceil(gamma * L) by signal; L counts every leaf, capped ones too.
    k = min(math.ceil(gamma * tree.leaf_count), leaves.size)
    if k == 0:
        return np.empty(0, dtype=np.int64)
    order = np.lexsort((leaves, -sig))
    return np.sort(leaves[order[:k]])


def select_sample(tree: SparseOctree, buffer: SignalBuffer, gamma: float,
                  threshold=None) -> np.ndarray:
    """The hottest ceil(gamma*L) leaves, or all leaves above a threshold.

    Leaves at the depth cap and leaves with zero signal are never selected.
    Ties break toward the smaller leaf id.
    """
    buffer.check_fresh()
    if not 0.0 <= gamma <= 1.0:
        raise ConfigError(f"gamma must be in [0, 1], got {gamma}")
    return _select_sample_from(tree, buffer.accumulator, buffer.target,
                               gamma, threshold)


def sample(tree: SparseOctree, buffer: SignalBuffer, gamma: float,
           threshold=None) -> CalibrationReport:
    """Split every selected leaf; payload copies keep renders unchanged."""
    selection = select_sample(tree, buffer, gamma, threshold)
    return _apply_sample(tree, selection)


def _apply_sample(tree: SparseOctree, selection: np.ndarray) -> CalibrationReport:
    leaves_before = tree.leaf_count
    events = []
    if selection.size:
        kids = tree.split_leaf_many(selection)
        for leaf, ks in zip(selection, kids):
            events.append(("split", int(leaf), tuple(int(k) for k in ks)))
    return CalibrationReport(leaves_before=leaves_before,
                             leaves_after=tree.leaf_count,
                             merges_applied=0,
                             splits_applied=int(selection.size),
                             recursion_rounds=0,
                             events=events)


def calibrate(tree: SparseOctree, buffer: SignalBuffer,
              config: CalibrationConfig) -> CalibrationReport:
    """One full calibration event: prune, then sample, then reset the buffer.

    The sample phase runs on the post-prune topology using the same
    interval's signals (merged parents carry their children's sum).
    """
    buffer.check_fresh()
    leaves_before = tree.leaf_count
    acc = buffer.accumulator.copy()
    target = buffer.target

    prune_report = prune(tree, buffer_override(buffer, acc), config.tau,
                         config.recursive)
    for kind, node, kids in prune_report.events:
        acc[node] = acc[list(kids)].sum()

    splits = 0
    events = list(prune_report.events)
    if config.sample_threshold is not None or config.gamma > 0.0:
        if acc.shape[0] < tree.capacity:
            acc = np.concatenate([acc, np.zeros(tree.capacity - acc.shape[0])])
        selection = _select_sample_from(tree, acc, target, config.gamma,
                                        config.sample_threshold)
        sample_report = _apply_sample(tree, selection)
        splits = sample_report.splits_applied
        events.extend(sample_report.events)

    if config.check_invariants:
        tree.validate()
    buffer.reset()
    return CalibrationReport(leaves_before=leaves_before,
                             leaves_after=tree.leaf_count,
                             merges_applied=prune_report.merges_applied,
                             splits_applied=splits,
                             recursion_rounds=prune_report.recursion_rounds,
                             events=events)


def buffer_override(buffer: SignalBuffer, acc: np.ndarray) -> SignalBuffer:
    """A fresh-looking view of the buffer with a substituted accumulator."""
    view = SignalBuffer.__new__(SignalBuffer)
    view.target = buffer.target
    view._tree = buffer.tree
    view.accumulator = acc
    view.epoch_rays = buffer.epoch_rays
    view.generation = buffer.tree.generation
    return view
