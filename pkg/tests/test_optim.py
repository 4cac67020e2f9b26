"""RMSProp update rule, state remapping, and the training loop."""

import math

import numpy as np
import pytest

from octrf import LeafPayload, build_dense
from octrf.calibrate import CalibrationConfig, calibrate, sample
from octrf.errors import ConfigError, StaleGradientError
from octrf.optim import (
    RmsPropState,
    TrainConfig,
    rmsprop_step,
    train,
    train_epoch,
    write_history,
)
from octrf.render import GradBuffer, render_and_backprop
from octrf.signals import SignalBuffer

from util import random_rays, random_tree, training_setup


def manual_grads(tree, dsigma=None, dsh=None, touched=None):
    g = GradBuffer(dsigma=np.zeros(tree.capacity),
                   dsh=np.zeros((tree.capacity, 3 * tree.basis_count)),
                   touched=np.asarray(touched if touched is not None else [],
                                      dtype=np.int64),
                   generation=tree.generation)
    if dsigma:
        for leaf, val in dsigma.items():
            g.dsigma[leaf] = val
    if dsh:
        for leaf, vec in dsh.items():
            g.dsh[leaf] = vec
    return g


class TestRmsPropStep:
    def test_hand_evaluated_update(self):
        tree = build_dense(0, (0.0, 0.0, 0.0), 1.0, 1, LeafPayload(5.0, [0.0] * 3))
        state = RmsPropState(tree, beta=0.9, eps=1e-8, lr_sigma=0.1)
        grads = manual_grads(tree, dsigma={0: 1.0}, touched=[0])
        rmsprop_step(tree, grads, state)
        assert state.v_sigma[0] == pytest.approx(0.1, rel=1e-12)
        want = 5.0 - 0.1 * 1.0 / (math.sqrt(0.1) + 1e-8)
        assert tree.sigma[0] == pytest.approx(want, abs=1e-6)
        assert want == pytest.approx(5.0 - 0.3162, abs=1e-4)

    def test_zero_gradient_on_touched_leaf_decays_v_only(self):
        tree = build_dense(0, (0.0, 0.0, 0.0), 1.0, 1, LeafPayload(2.0, [0.5] * 3))
        state = RmsPropState(tree, beta=0.95)
        state.v_sigma[0] = 1.0
        state.v_sh[0] = 0.25
        before_sigma = tree.sigma[0]
        before_sh = tree.sh[0].copy()
        rmsprop_step(tree, manual_grads(tree, touched=[0]), state)
        assert tree.sigma[0] == before_sigma
        np.testing.assert_array_equal(tree.sh[0], before_sh)
        assert state.v_sigma[0] == pytest.approx(0.95, rel=1e-12)
        np.testing.assert_allclose(state.v_sh[0], 0.95 * 0.25, rtol=1e-12)

    def test_density_clamps_at_zero(self):
        tree = build_dense(0, (0.0, 0.0, 0.0), 1.0, 1, LeafPayload(0.01, [0.0] * 3))
        state = RmsPropState(tree, lr_sigma=0.1)
        rmsprop_step(tree, manual_grads(tree, dsigma={0: 100.0}, touched=[0]), state)
        assert tree.sigma[0] == 0.0

    def test_untouched_leaves_never_move(self):
        tree = random_tree(501, depth=1)
        state = RmsPropState(tree)
        leaves = tree.leaf_ids()
        sig_before = tree.sigma.copy()
        sh_before = tree.sh.copy()
        target = int(leaves[2])
        grads = manual_grads(tree, dsigma={target: 0.5},
                             dsh={target: np.full(3, 0.2)}, touched=[target])
        rmsprop_step(tree, grads, state)
        others = [int(x) for x in leaves if int(x) != target]
        np.testing.assert_array_equal(tree.sigma[others], sig_before[others])
        np.testing.assert_array_equal(tree.sh[others], sh_before[others])
        assert tree.sigma[target] != sig_before[target]
        assert (tree.sh[target] != sh_before[target]).all()

    def test_stale_gradients_and_state_rejected(self):
        tree = random_tree(511, depth=1)
        state = RmsPropState(tree)
        grads = manual_grads(tree, touched=[int(tree.leaf_ids()[0])])
        tree.split_leaf(int(tree.leaf_ids()[0]))
        with pytest.raises(StaleGradientError):
            rmsprop_step(tree, grads, state)


class TestStateRemap:
    def test_merge_takes_mean_of_children(self):
        tree = build_dense(1, (0.0, 0.0, 0.0), 1.0, 1, LeafPayload(0.0, [0.0] * 3))
        kids = [int(c) for c in tree.children(0)]
        state = RmsPropState(tree)
        state.v_sigma[kids] = np.arange(1.0, 9.0)
        state.v_sh[kids] = np.arange(8.0)[:, None] * 0.5
        buf = SignalBuffer(tree)
        report = calibrate(tree, buf, CalibrationConfig(tau=0.0, gamma=0.0))
        state.remap(report)
        assert state.v_sigma[0] == pytest.approx(4.5)
        np.testing.assert_allclose(state.v_sh[0], np.mean(np.arange(8.0)) * 0.5)
        assert state.generation == tree.generation
        rmsprop_step(tree, manual_grads(tree, touched=[0]), state)

    def test_split_children_inherit_parent(self):
        tree = build_dense(1, (0.0, 0.0, 0.0), 1.0, 1, LeafPayload(1.0, [0.0] * 3))
        leaf = int(tree.leaf_ids()[4])
        state = RmsPropState(tree)
        state.v_sigma[leaf] = 0.7
        state.v_sh[leaf] = 0.3
        buf = SignalBuffer(tree)
        buf.accumulator[leaf] = 5.0
        report = sample(tree, buf, 1.0 / tree.leaf_count)
        state._tree = tree
        state.remap(report)
        kids = report.events[0][2]
        np.testing.assert_array_equal(state.v_sigma[list(kids)], 0.7)
        np.testing.assert_array_equal(state.v_sh[list(kids)], 0.3)

    def test_reset_flag_zeroes_everything(self):
        tree = build_dense(1, (0.0, 0.0, 0.0), 1.0, 1, LeafPayload(0.0, [0.0] * 3))
        state = RmsPropState(tree)
        state.v_sigma[:] = 3.0
        buf = SignalBuffer(tree)
        report = calibrate(tree, buf, CalibrationConfig(tau=0.0, gamma=0.0))
        state.remap(report, reset=True)
        assert not state.v_sigma.any()
        assert not state.v_sh.any()


class TestTrainEpoch:
    def test_perfect_fit_changes_nothing(self):
        tree = build_dense(1, (0.0, 0.0, 0.0), 1.0, 1, LeafPayload(0.0, [0.0] * 3))
        origins, dirs = random_rays(521, 64)
        dataset_targets = np.ones((64, 3))
        from util import RayBundle
        dataset = RayBundle(origins, dirs, dataset_targets)
        state = RmsPropState(tree)
        buf = SignalBuffer(tree)
        config = TrainConfig(epochs=1, interval=5, batch_size=16, background=1.0)
        sig_before = tree.sigma.copy()
        sh_before = tree.sh.copy()
        loss = train_epoch(tree, dataset, state, buf, config,
                           np.random.default_rng(0))
        assert loss == 0.0
        np.testing.assert_array_equal(tree.sigma, sig_before)
        np.testing.assert_array_equal(tree.sh, sh_before)

    def test_loss_decreases_on_fixed_structure(self):
        _, trainee, dataset = training_setup(531)
        state = RmsPropState(trainee)
        buf = SignalBuffer(trainee)
        config = TrainConfig(epochs=10, interval=100, batch_size=512, seed=7)
        rng = np.random.default_rng(config.seed)
        losses = [train_epoch(trainee, dataset, state, buf, config, rng)
                  for _ in range(10)]
        for prev, cur in zip(losses, losses[1:]):
            assert cur < prev * 1.05
        assert losses[-1] < 0.5 * losses[0]


class TestTrain:
    def test_identical_seeds_are_bitwise_identical(self, tmp_path):
        results = []
        for _ in range(2):
            _, trainee, dataset = training_setup(541)
            config = TrainConfig(epochs=6, interval=3, tau=0.05, gamma=0.02,
                                 batch_size=512, seed=11, recursive=True)
            tree, history = train(trainee, dataset, config)
            results.append((tree, history))
        t1, h1 = results[0]
        t2, h2 = results[1]
        np.testing.assert_array_equal(t1.sigma[t1.leaf_ids()],
                                      t2.sigma[t2.leaf_ids()])
        np.testing.assert_array_equal(t1.sh[t1.leaf_ids()], t2.sh[t2.leaf_ids()])
        assert h1 == h2
        p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
        write_history(h1, p1)
        write_history(h2, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_no_calibration_before_interval(self):
        _, trainee, dataset = training_setup(551)
        config = TrainConfig(epochs=4, interval=5, batch_size=512, seed=3)
        tree, history = train(trainee, dataset, config)
        assert len(history) == 4
        assert all(row["event"] == "" for row in history)
        assert tree.leaf_count == 64

    def test_calibration_epochs_are_tagged_and_tracked(self):
        _, trainee, dataset = training_setup(561)
        config = TrainConfig(epochs=6, interval=3, tau=0.02, gamma=0.02,
                             batch_size=512, seed=5)
        tree, history = train(trainee, dataset, config)
        tagged = [row["epoch"] for row in history if row["event"]]
        assert tagged == [3, 6]
        assert all(row["leaf_count"] >= 1 for row in history)
        assert all(math.isfinite(row["psnr"]) for row in history)
        tree.validate()

    def test_sampling_is_loss_neutral_at_application(self):
        _, trainee, dataset = training_setup(571)
        state = RmsPropState(trainee)
        buf = SignalBuffer(trainee)
        config = TrainConfig(epochs=2, interval=100, batch_size=512)
        rng = np.random.default_rng(9)
        for _ in range(2):
            train_epoch(trainee, dataset, state, buf, config, rng)

        def batch_loss():
            loss, _, _ = render_and_backprop(
                trainee, dataset.origins, dataset.dirs, dataset.targets, 1.0,
                early_stop_eps=0.0)
            return loss

        before = batch_loss()
        report = sample(trainee, buf, 0.05)
        assert report.splits_applied > 0
        assert batch_loss() == pytest.approx(before, abs=1e-6)

    def test_training_view_quality_holds_within_windows(self):
        _, trainee, dataset = training_setup(581)
        config = TrainConfig(epochs=10, interval=5, tau=0.02, gamma=0.02,
                             batch_size=512, seed=13)
        _, history = train(trainee, dataset, config)
        # Loss-derived PSNR on training rays, per stabilization window.
        train_psnr = [-10.0 * math.log10(row["loss"] / 3.0) for row in history]
        for start, end in ((0, 4), (5, 9)):
            assert train_psnr[end] >= train_psnr[start] - 0.05

    def test_bad_configs_rejected(self):
        with pytest.raises(ConfigError):
            TrainConfig(interval=0)
        with pytest.raises(ConfigError):
            TrainConfig(epochs=-1)
        with pytest.raises(ConfigError):
            TrainConfig(beta=1.0)
