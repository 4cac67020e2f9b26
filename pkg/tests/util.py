"""Shared test helpers: scene builders and independent oracles.

The oracles here recompute renderer quantities through a different route
than the library kernels: vectorized point location for marching, bisection
for boundary refinement, and a numpy compositor built on the already-tested
SH decoder.
"""

import numpy as np

from octrf import LeafPayload, build_dense
from octrf.render import render_and_backprop, render_rays
from octrf.sh import decode_color, sh_from_rgb


class GridCamera:
    """Minimal camera stand-in: a fixed precomputed ray bundle."""

    def __init__(self, origins, dirs, height, width):
        self._origins = origins
        self._dirs = dirs
        self.height = height
        self.width = width

    def rays(self):
        return self._origins, self._dirs


class RayBundle:
    """Training dataset stand-in: flat rays plus optional held-out views."""

    def __init__(self, origins, dirs, targets, heldout=None):
        self.origins = origins
        self.dirs = dirs
        self.targets = targets
        self.heldout = heldout or []


def random_tree(seed, depth=2, basis_count=1, extra_splits=4, extra_merges=2,
                center=(0.0, 0.0, 0.0), half=1.0, max_depth=3,
                sigma_range=(0.05, 5.0)):
    """Seeded octree with irregular structure and random payloads."""
    rng = np.random.default_rng(seed)

    def init(centers):
        sigma = rng.uniform(*sigma_range, len(centers))
        sh = rng.normal(0.0, 1.0, (len(centers), 3 * basis_count))
        return sigma, sh

    tree = build_dense(depth, center, half, basis_count, init, max_depth=max_depth)
    for _ in range(extra_splits):
        leaves = tree.leaf_ids()
        splittable = leaves[tree._depth[leaves] < max_depth]
        if splittable.size == 0:
            break
        kids = tree.split_leaf(int(rng.choice(splittable)))
        tree.sigma[kids] = rng.uniform(*sigma_range, 8).astype(np.float32)
        tree.sh[kids] = rng.normal(0.0, 1.0, (8, 3 * basis_count)).astype(np.float32)
    for _ in range(extra_merges):
        internals = tree.internal_ids()
        ok = [n for n in internals
              if all(tree.is_leaf(int(c)) for c in tree.children(int(n)))]
        if not ok:
            break
        tree.merge_children(int(rng.choice(ok)))
    return tree


def random_rays(seed, n, center=(0.0, 0.0, 0.0), half=1.0, miss_fraction=0.1):
    """Seeded rays mostly aimed through the cube, some deliberate misses."""
    rng = np.random.default_rng(seed)
    center = np.asarray(center, dtype=np.float64)
    u = rng.normal(0.0, 1.0, (n, 3))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    origins = center + u * (3.0 * half)
    inside = center + rng.uniform(-0.9, 0.9, (n, 3)) * half
    dirs = inside - origins
    n_miss = int(n * miss_fraction)
    if n_miss:
        dirs[:n_miss] = rng.normal(0.0, 1.0, (n_miss, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return origins, dirs


def locate_batch(tree, points):
    """Vectorized half-open point location; independent of the kernels."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    nodes = np.zeros(len(pts), dtype=np.int64)
    active = tree._leaf[nodes] == 0
    while active.any():
        idx = np.nonzero(active)[0]
        cur = nodes[idx]
        c = tree._center[cur]
        octant = ((pts[idx, 0] >= c[:, 0]).astype(np.int64)
                  | ((pts[idx, 1] >= c[:, 1]).astype(np.int64) << 1)
                  | ((pts[idx, 2] >= c[:, 2]).astype(np.int64) << 2))
        nodes[idx] = tree._child[cur, octant]
        active[idx] = tree._leaf[nodes[idx]] == 0
    return nodes


def clip_to_cube(origin, direction, center, half):
    """Slab intersection [t0, t1] of a ray with the cube, or None."""
    t0, t1 = 0.0, np.inf
    for a in range(3):
        lo = center[a] - half
        hi = center[a] + half
        if direction[a] != 0.0:
            ta = (lo - origin[a]) / direction[a]
            tb = (hi - origin[a]) / direction[a]
            if ta > tb:
                ta, tb = tb, ta
            t0 = max(t0, ta)
            t1 = min(t1, tb)
        elif origin[a] < lo or origin[a] >= hi:
            return None
    if t1 <= t0:
        return None
    return t0, t1


def oracle_march(tree, origin, direction, step_div=16):
    """March one ray by point location, bisecting each leaf transition.

    The step is edge / 2**(max_depth + 4) by default (step_div = 2**4).
    Cells are convex, so every transition falls between two samples and
    bisection pins the exiting cell's boundary. Cells thinner than the step
    are recovered by probing just past each refined boundary and walking
    forward until the sampled successor is reached; only chords below the
    probe epsilon (1e-11 of the cube edge) can be absorbed into a neighbor.
    """
    origin = np.asarray(origin, dtype=np.float64)
    direction = np.asarray(direction, dtype=np.float64)
    span = clip_to_cube(origin, direction, tree.center, tree.half_extent)
    if span is None:
        return (np.empty(0, dtype=np.int64), np.empty(0), np.empty(0))
    t0, t1 = span
    edge = 2.0 * tree.half_extent
    eps = 1e-11 * edge
    step = edge / (2 ** tree.max_depth * step_div)
    ts = np.arange(t0 + 0.5 * step, t1, step)
    # Bracket with probes just inside the slab so transitions in the head
    # and tail intervals are detected too.
    ts = np.concatenate([[t0 + eps], ts, [t1 - eps]])

    def locate_at(t_vals):
        pts = origin[None, :] + np.asarray(t_vals).reshape(-1, 1) * direction[None, :]
        return locate_batch(tree, pts)

    nodes = locate_at(ts)
    cuts = np.nonzero(nodes[1:] != nodes[:-1])[0]
    if cuts.size == 0:
        return (nodes[:1].copy(), np.array([t0]), np.array([t1]))

    # All transitions bisect in lockstep against the cell being exited.
    lo = ts[cuts].copy()
    hi = ts[cuts + 1].copy()
    ref = nodes[cuts]
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        inside = locate_at(mid) == ref
        lo[inside] = mid[inside]
        hi[~inside] = mid[~inside]
    bounds = 0.5 * (lo + hi)

    leaf_seq = [int(nodes[0])]
    edges = [t0]
    after = locate_at(bounds + eps)
    for j in range(cuts.size):
        t_b = bounds[j]
        target = int(nodes[cuts[j] + 1])
        edges.append(t_b)
        nxt = int(after[j])
        leaf_seq.append(nxt)
        guard = 0
        while nxt != target:
            # A skipped thin cell: find its exit and keep walking.
            guard += 1
            assert guard < 64, "runaway sliver chain in march oracle"
            blo, bhi = t_b + eps, ts[cuts[j] + 1]
            for _ in range(60):
                mid = 0.5 * (blo + bhi)
                if int(locate_at(mid)[0]) == nxt:
                    blo = mid
                else:
                    bhi = mid
            t_b = 0.5 * (blo + bhi)
            edges.append(t_b)
            nxt = int(locate_at(t_b + eps)[0])
            leaf_seq.append(nxt)
    edges.append(t1)
    edges = np.asarray(edges)
    return np.asarray(leaf_seq, dtype=np.int64), edges[:-1], edges[1:]


def oracle_composite(tree, leaf_seq, deltas, direction, background):
    """Independent numpy compositor over known segments."""
    background = np.asarray(background, dtype=np.float64) * np.ones(3)
    if len(leaf_seq) == 0:
        return background.copy(), 1.0
    sig = tree.sigma[leaf_seq].astype(np.float64)
    alpha = np.exp(-sig * np.asarray(deltas, dtype=np.float64))
    q = 1.0 - alpha
    trans = np.concatenate([[1.0], np.cumprod(alpha)])
    cols = np.stack([decode_color(tree.sh[int(n)].astype(np.float64), direction)
                     for n in leaf_seq])
    rgb = (trans[:-1, None] * q[:, None] * cols).sum(axis=0) + trans[-1] * background
    return rgb, float(trans[-1])


def ball_tree(depth=2, radius=0.55, sigma=8.0, rgb=(0.8, 0.3, 0.2),
              basis_count=1, max_depth=4):
    """Dense tree holding an opaque colored ball, used as ground truth."""
    sh_in = sh_from_rgb(np.asarray(rgb), basis_count)

    def init(centers):
        inside = np.linalg.norm(centers, axis=1) <= radius
        return np.where(inside, sigma, 0.0), np.where(inside[:, None], sh_in, 0.0)

    return build_dense(depth, (0.0, 0.0, 0.0), 1.0, basis_count, init,
                       max_depth=max_depth)


def training_setup(seed, n_rays=1500, background=1.0, depth=2,
                   heldout_side=16):
    """(ground truth tree, trainee tree, RayBundle) for optimizer tests."""
    truth = ball_tree(depth=depth)
    origins, dirs = random_rays(seed, n_rays, miss_fraction=0.05)
    targets = render_rays(truth, origins, dirs, background, early_stop_eps=0.0)

    ho_origins, ho_dirs = random_rays(seed + 1, heldout_side * heldout_side,
                                      miss_fraction=0.0)
    camera = GridCamera(ho_origins, ho_dirs, heldout_side, heldout_side)
    image = render_rays(truth, ho_origins, ho_dirs, background,
                        early_stop_eps=0.0).reshape(heldout_side, heldout_side, 3)

    trainee = build_dense(depth, (0.0, 0.0, 0.0), 1.0, 1,
                          LeafPayload(0.3, [0.0, 0.0, 0.0]), max_depth=4)
    return truth, trainee, RayBundle(origins, dirs, targets, [(camera, image)])


def loss_of(tree, origins, dirs, targets, background):
    """Loss evaluation with early termination off, for finite differences."""
    loss, _, _ = render_and_backprop(tree, origins, dirs, targets, background,
                                     early_stop_eps=0.0)
    return loss


def fd_sigma(tree, leaf, origins, dirs, targets, background, h=1e-4):
    """Central finite difference on one leaf's stored density."""
    old = tree.sigma[leaf]
    hi = np.float32(np.float64(old) + h)
    lo = np.float32(np.float64(old) - h)
    tree.sigma[leaf] = hi
    f_hi = loss_of(tree, origins, dirs, targets, background)
    tree.sigma[leaf] = lo
    f_lo = loss_of(tree, origins, dirs, targets, background)
    tree.sigma[leaf] = old
    return (f_hi - f_lo) / (np.float64(hi) - np.float64(lo))


def fd_sh(tree, leaf, j, origins, dirs, targets, background, h=1e-4):
    """Central finite difference on one SH coefficient."""
    old = tree.sh[leaf, j]
    hi = np.float32(np.float64(old) + h)
    lo = np.float32(np.float64(old) - h)
    tree.sh[leaf, j] = hi
    f_hi = loss_of(tree, origins, dirs, targets, background)
    tree.sh[leaf, j] = lo
    f_lo = loss_of(tree, origins, dirs, targets, background)
    tree.sh[leaf, j] = old
    return (f_hi - f_lo) / (np.float64(hi) - np.float64(lo))
