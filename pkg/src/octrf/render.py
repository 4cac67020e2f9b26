"""Differentiable volume rendering over a sparse octree.

Rays are cut into one exact segment per traversed leaf; the field is
piecewise constant, so compositing each segment in closed form makes the
render invariant under leaf subdivision. Gradients of the batch MSE loss
with respect to every touched leaf's density and SH coefficients come from
an analytical reverse sweep, not autodiff.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numba
import numpy as np

from . import _kernels
from .errors import InputError
from .octree import SparseOctree
from .sh import degree_for_basis

EPS_T = 1e-4  # early-termination transmittance threshold

UNIT_TOL = 1e-6


@dataclass
class Ray:
    origin: np.ndarray
    dir: np.ndarray
    t_near: float = 0.0
    t_far: float = np.inf

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        self.dir = np.asarray(self.dir, dtype=np.float64).reshape(3)
        if abs(float(np.linalg.norm(self.dir)) - 1.0) > UNIT_TOL:
            raise InputError("ray direction must be a unit vector")
        if not self.t_near < self.t_far:
            raise InputError(f"t_near {self.t_near} must be < t_far {self.t_far}")


@dataclass
class RaySegmentList:
    """Ordered (leaf, t_entry, delta) triples; consecutive segments abut."""

    leaf: np.ndarray
    t_entry: np.ndarray
    delta: np.ndarray

    def __len__(self) -> int:
        return int(self.leaf.shape[0])


@dataclass
class RenderOutput:
    rgb: np.ndarray
    per_segment_Q: np.ndarray
    transmittance_final: float


@dataclass
class GradBuffer:
    """Loss gradients for every leaf touched by the batch.

    Dense arrays indexed by node id; ``touched`` lists the leaf ids that were
    actually intersected (ascending). ``generation`` binds the buffer to the
    tree topology it was computed against.
    """

    dsigma: np.ndarray
    dsh: np.ndarray
    touched: np.ndarray
    generation: int

    def get(self, leaf: int) -> tuple[float, np.ndarray]:
        return float(self.dsigma[leaf]), self.dsh[leaf].copy()


def _geometry(tree: SparseOctree):
    return tree._child, tree._leaf, tree._center, tree._depth, tree.half_table()


def _as_background(background) -> np.ndarray:
    bg = np.asarray(background, dtype=np.float64)
    if bg.ndim == 0:
        bg = np.full(3, float(bg))
    return np.ascontiguousarray(bg.reshape(3))


@contextlib.contextmanager
def _worker_count(n):
    if n is None:
        yield
        return
    prev = numba.get_num_threads()
    numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))
    try:
        yield
    finally:
        numba.set_num_threads(prev)


def segment_batch(tree: SparseOctree, origins: np.ndarray, dirs: np.ndarray,
                  t_near: float = 0.0, t_far: float = np.inf):
    """Segment many rays at once; returns (offsets, leaf, t_entry, delta)."""
    origins = np.ascontiguousarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.ascontiguousarray(dirs, dtype=np.float64).reshape(-1, 3)
    n = origins.shape[0]
    geo = _geometry(tree)
    counts = np.empty(n, dtype=np.int64)
    _kernels.count_segments_kernel(*geo, origins, dirs,
                                   float(t_near), float(t_far), counts)
    offsets = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    total = int(offsets[-1])
    seg_leaf = np.empty(total, dtype=np.int64)
    seg_t = np.empty(total, dtype=np.float64)
    seg_delta = np.empty(total, dtype=np.float64)
    _kernels.fill_segments_kernel(*geo, origins, dirs,
                                  float(t_near), float(t_far), offsets,
                                  seg_leaf, seg_t, seg_delta)
    return offsets, seg_leaf, seg_t, seg_delta


def traverse(tree: SparseOctree, ray: Ray) -> RaySegmentList:
    """Exact leaf-boundary segmentation of the ray's path through bounds."""
    offsets, seg_leaf, seg_t, seg_delta = segment_batch(
        tree, ray.origin[None, :], ray.dir[None, :], ray.t_near, ray.t_far)
    return RaySegmentList(seg_leaf, seg_t, seg_delta)


def render_rays(tree: SparseOctree, origins: np.ndarray, dirs: np.ndarray,
                background, early_stop_eps: float = EPS_T,
                t_near: float = 0.0, t_far: float = np.inf,
                return_aux: bool = False):
    """Composite a batch of rays; optionally also return (T_final, weight sum)."""
    origins = np.ascontiguousarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.ascontiguousarray(dirs, dtype=np.float64).reshape(-1, 3)
    n = origins.shape[0]
    offsets, seg_leaf, _, seg_delta = segment_batch(tree, origins, dirs, t_near, t_far)
    rgb = np.empty((n, 3), dtype=np.float64)
    tfin = np.empty(n, dtype=np.float64)
    wsum = np.empty(n, dtype=np.float64)
    _kernels.composite_kernel(tree.sigma, tree.sh, tree.basis_count,
                              degree_for_basis(tree.basis_count), dirs, offsets,
                              seg_leaf, seg_delta, _as_background(background),
                              float(early_stop_eps), rgb, tfin, wsum)
    if return_aux:
        return rgb, tfin, wsum
    return rgb


def render_ray(tree: SparseOctree, ray: Ray, background,
               early_stop_eps: float = EPS_T) -> RenderOutput:
    """Volume-render one ray: rgb, per-segment light contribution, final T."""
    segs = traverse(tree, ray)
    rgb, tfin, _ = render_rays(tree, ray.origin[None, :], ray.dir[None, :],
                               background, early_stop_eps,
                               ray.t_near, ray.t_far, return_aux=True)
    alpha = np.exp(-tree.sigma[segs.leaf].astype(np.float64) * segs.delta)
    q = 1.0 - alpha
    # Segments past an early-termination cut carry zero contribution, so the
    # list keeps one entry per traversed segment.
    if early_stop_eps > 0.0 and len(segs):
        trans = np.cumprod(alpha)
        cut = np.nonzero(trans < early_stop_eps)[0]
        if cut.size:
            q[int(cut[0]) + 1:] = 0.0
    return RenderOutput(rgb=rgb[0], per_segment_Q=q,
                        transmittance_final=float(tfin[0]))


def render_and_backprop(tree: SparseOctree, origins: np.ndarray, dirs: np.ndarray,
                        targets: np.ndarray, background,
                        early_stop_eps: float = EPS_T,
                        t_near: float = 0.0, t_far: float = np.inf):
    """Batch MSE loss, analytical gradients, and per-leaf ray-weight signal.

    Loss is the mean over rays of the squared color error summed across the
    3 channels. Returns (loss, GradBuffer, signal) where signal[leaf] is the
    batch's summed light contribution Q for that leaf.
    """
    origins = np.ascontiguousarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.ascontiguousarray(dirs, dtype=np.float64).reshape(-1, 3)
    targets = np.ascontiguousarray(targets, dtype=np.float64).reshape(-1, 3)
    n = origins.shape[0]
    if targets.shape[0] != n or dirs.shape[0] != n:
        raise InputError(f"batch length mismatch: {n} origins, "
                         f"{dirs.shape[0]} dirs, {targets.shape[0]} targets")
    cap = tree.capacity
    nsh = 3 * tree.basis_count
    grad_sigma = np.zeros(cap, dtype=np.float64)
    grad_sh = np.zeros((cap, nsh), dtype=np.float64)
    signal = np.zeros(cap, dtype=np.float64)
    touched = np.zeros(cap, dtype=np.uint8)
    if n == 0:
        return 0.0, GradBuffer(grad_sigma, grad_sh,
                               np.empty(0, dtype=np.int64), tree.generation), signal

    offsets, seg_leaf, _, seg_delta = segment_batch(tree, origins, dirs, t_near, t_far)
    total = int(offsets[-1])
    seg_q = np.empty(total, dtype=np.float64)
    seg_dsig = np.empty(total, dtype=np.float64)
    seg_w = np.empty((total, 3), dtype=np.float64)
    seg_trans = np.empty(total, dtype=np.float64)
    seg_col = np.empty((total, 3), dtype=np.float64)
    basis_out = np.empty((n, tree.basis_count), dtype=np.float64)
    rgb = np.empty((n, 3), dtype=np.float64)
    tfin = np.empty(n, dtype=np.float64)
    wsum = np.empty(n, dtype=np.float64)
    loss_per_ray = np.empty(n, dtype=np.float64)
    _kernels.grad_kernel(tree.sigma, tree.sh, tree.basis_count,
                         degree_for_basis(tree.basis_count), dirs, targets,
                         offsets, seg_leaf, seg_delta, _as_background(background),
                         float(early_stop_eps), 2.0 / n,
                         seg_q, seg_dsig, seg_w, seg_trans, seg_col, basis_out,
                         rgb, tfin, wsum, loss_per_ray)
    _kernels.scatter_kernel(offsets, seg_leaf, seg_q, seg_dsig, seg_w, basis_out,
                            tree.basis_count, grad_sigma, grad_sh, signal, touched)
    loss = float(loss_per_ray.sum() / n)
    touched_ids = np.nonzero(touched)[0].astype(np.int64)
    grads = GradBuffer(grad_sigma, grad_sh, touched_ids, tree.generation)
    return loss, grads, signal


def render_image(tree: SparseOctree, camera, background,
                 worker_count: int | None = None,
                 early_stop_eps: float = EPS_T,
                 chunk: int = 65536) -> np.ndarray:
    """Render an H x W x 3 float image; deterministic for any worker count."""
    origins, dirs = camera.rays()
    n = origins.shape[0]
    out = np.empty((n, 3), dtype=np.float64)
    with _worker_count(worker_count):
        for lo in range(0, n, chunk):
            hi = min(lo + chunk, n)
            out[lo:hi] = render_rays(tree, origins[lo:hi], dirs[lo:hi],
                                     background, early_stop_eps)
    return out.reshape(camera.height, camera.width, 3)
