"""RMSProp over leaf payloads and the interval-calibrated training loop.

Training alternates stabilization windows of fixed-structure optimization
with calibration events that reshape the tree. Optimizer state survives a
reshape by replaying the event log: a merged parent takes the mean of its
children's second moments, split children inherit their parent's.
"""

import csv
import math
from dataclasses import dataclass

import numpy as np

from .calibrate import CalibrationConfig, CalibrationReport, calibrate
from .errors import ConfigError, StaleGradientError
from .metrics import psnr
from .octree import SparseOctree
from .render import EPS_T, GradBuffer, render_and_backprop, render_image
from .signals import SignalBuffer, SignalTarget


@dataclass
class TrainConfig:
    epochs: int = 100
    interval: int = 20
    tau: float = 1.0
    gamma: float = 0.01
    recursive: bool = False
    lr_sigma: float = 0.1
    lr_sh: float = 0.01
    batch_size: int = 4096
    seed: int = 0
    signal: SignalTarget = SignalTarget.RAY_WEIGHT_Q
    background: float | tuple = 1.0
    beta: float = 0.95
    eps: float = 1e-8
    reset_state_on_calibration: bool = False
    early_stop_eps: float = EPS_T

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.interval < 1:
            raise ConfigError(f"interval must be >= 1, got {self.interval}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 < self.beta < 1.0:
            raise ConfigError(f"beta must be in (0, 1), got {self.beta}")
        self.signal = SignalTarget(self.signal)

    def calibration(self) -> CalibrationConfig:
        return CalibrationConfig(tau=self.tau, gamma=self.gamma,
                                 recursive=self.recursive)


class RmsPropState:
    """Per-parameter running mean of squared gradients, topology-bound."""

    def __init__(self, tree: SparseOctree, beta: float = 0.95,
                 eps: float = 1e-8, lr_sigma: float = 0.1,
                 lr_sh: float = 0.01):
        if not 0.0 < beta < 1.0:
            raise ConfigError(f"beta must be in (0, 1), got {beta}")
        self.beta = float(beta)
        self.eps = float(eps)
        self.lr_sigma = float(lr_sigma)
        self.lr_sh = float(lr_sh)
        self._tree = tree
        self.v_sigma = np.zeros(tree.capacity, dtype=np.float64)
        self.v_sh = np.zeros((tree.capacity, 3 * tree.basis_count),
                             dtype=np.float64)
        self.generation = tree.generation

    def check_fresh(self) -> None:
        if self.generation != self._tree.generation:
            raise StaleGradientError(
                f"optimizer state bound to generation {self.generation}, "
                f"tree is at {self._tree.generation}")

    def _ensure_capacity(self) -> None:
        cap = self._tree.capacity
        if self.v_sigma.shape[0] < cap:
            grow = cap - self.v_sigma.shape[0]
            self.v_sigma = np.concatenate([self.v_sigma, np.zeros(grow)])
            self.v_sh = np.concatenate(
                [self.v_sh, np.zeros((grow, self.v_sh.shape[1]))])

    def remap(self, report: CalibrationReport, reset: bool = False) -> None:
        """Carry second moments across a calibration event's edits."""
        self._ensure_capacity()
        if reset:
            self.v_sigma[:] = 0.0
            self.v_sh[:] = 0.0
        else:
            for kind, node, kids in report.events:
                kids = list(kids)
                if kind == "merge":
                    self.v_sigma[node] = self.v_sigma[kids].mean()
                    self.v_sh[node] = self.v_sh[kids].mean(axis=0)
                else:
                    self.v_sigma[kids] = self.v_sigma[node]
                    self.v_sh[kids] = self.v_sh[node]
        self.generation = self._tree.generation


def rmsprop_step(tree: SparseOctree, grads: GradBuffer,
                 state: RmsPropState) -> None:
    """One sparse update: only leaves touched by the batch move.

    Density is clamped to stay non-negative after the step.
    """
    state.check_fresh()
    if grads.generation != tree.generation:
        raise StaleGradientError(
            f"gradients computed at generation {grads.generation}, "
            f"tree is at {tree.generation}")
    touched = grads.touched
    if touched.size == 0:
        return
    beta = state.beta

    g = grads.dsigma[touched]
    v = beta * state.v_sigma[touched] + (1.0 - beta) * g * g
    state.v_sigma[touched] = v
    theta = tree.sigma[touched].astype(np.float64)
    theta -= state.lr_sigma * g / (np.sqrt(v) + state.eps)
    tree.sigma[touched] = np.maximum(theta, 0.0).astype(np.float32)

    g = grads.dsh[touched]
    v = beta * state.v_sh[touched] + (1.0 - beta) * g * g
    state.v_sh[touched] = v
    theta = tree.sh[touched].astype(np.float64)
    theta -= state.lr_sh * g / (np.sqrt(v) + state.eps)
    tree.sh[touched] = theta.astype(np.float32)


def train_epoch(tree: SparseOctree, dataset, state: RmsPropState,
                buffer: SignalBuffer, config: TrainConfig,
                rng: np.random.Generator) -> float:
    """One pass over the shuffled rays; returns the epoch's mean loss."""
    n = dataset.origins.shape[0]
    perm = rng.permutation(n)
    total = 0.0
    for start in range(0, n, config.batch_size):
        idx = perm[start:start + config.batch_size]
        loss, grads, signal = render_and_backprop(
            tree, dataset.origins[idx], dataset.dirs[idx],
            dataset.targets[idx], config.background,
            early_stop_eps=config.early_stop_eps)
        rmsprop_step(tree, grads, state)
        buffer.accumulate(signal, idx.size)
        total += loss * idx.size
    return total / n


def heldout_psnr(tree: SparseOctree, dataset, background) -> float:
    """Mean PSNR over the dataset's held-out (camera, image) pairs."""
    views = getattr(dataset, "heldout", None)
    if not views:
        return math.nan
    scores = []
    for camera, image in views:
        rendered = render_image(tree, camera, background)
        scores.append(psnr(rendered, image))
    return float(np.mean(scores))


def train(tree: SparseOctree, dataset, config: TrainConfig):
    """Alg-style loop: optimize for `interval` epochs, calibrate, repeat.

    Returns (tree, history); history rows carry epoch, loss, held-out psnr,
    leaf count, and a short event tag for calibration epochs.
    """
    state = RmsPropState(tree, config.beta, config.eps,
                         config.lr_sigma, config.lr_sh)
    buffer = SignalBuffer(tree, config.signal)
    rng = np.random.default_rng(config.seed)
    history = []
    for epoch in range(1, config.epochs + 1):
        loss = train_epoch(tree, dataset, state, buffer, config, rng)
        event = ""
        if epoch % config.interval == 0:
            report = calibrate(tree, buffer, config.calibration())
            state.remap(report, reset=config.reset_state_on_calibration)
            event = (f"calibrate merges={report.merges_applied} "
                     f"splits={report.splits_applied}")
        history.append({
            "epoch": epoch,
            "loss": loss,
            "psnr": heldout_psnr(tree, dataset, config.background),
            "leaf_count": tree.leaf_count,
            "event": event,
        })
    return tree, history


def write_history(history, path) -> None:
    """History CSV with exact float repr for determinism checks."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss", "psnr", "leaf_count", "event"])
        for row in history:
            writer.writerow([row["epoch"], repr(float(row["loss"])),
                             repr(float(row["psnr"])), row["leaf_count"],
                             row["event"]])
