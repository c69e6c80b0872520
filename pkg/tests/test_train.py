"""Trainer determinism, checkpoint discipline, abort recovery, and metrics."""

from types import SimpleNamespace

import numpy as np
import pytest

from fruitlets.assoc.network import AssociationNetwork
from fruitlets.assoc.types import NetConfig
from fruitlets.augment import AugmentConfig
from fruitlets.synth import SceneConfig, SyntheticPairs, gen_pair
from fruitlets.train import (
    TrainConfig,
    TrainingAbortedError,
    evaluate,
    evaluate_single,
    train,
)

TINY = NetConfig(
    visual_channels=3,
    feature_dim=8,
    num_heads=2,
    num_layers=2,
    sinkhorn_iters=10,
    d_enc_channels=(4, 4),
    p_enc_channels=(4, 4, 4, 4),
)
SCENE = SceneConfig(seed=0, visual_channels=3)


def tiny_net(seed=0):
    return AssociationNetwork(TINY, seed=seed)


def tiny_data(n, start=0):
    return SyntheticPairs(SCENE, range(start, start + n))


class TestTrainLoop:
    def test_zero_epochs_leaves_parameters_untouched(self, tmp_path):
        net = tiny_net()
        before = net.store.state_dict()
        res = train(net, tiny_data(4), TrainConfig(epochs=0), checkpoint_dir=str(tmp_path))
        assert res.epochs == ()
        assert net.store.state_dict() == before
        assert (tmp_path / "ckpt-init.json").exists()

    def test_same_seed_reproduces_run_exactly(self):
        cfg = TrainConfig(epochs=2, seed=7)
        curves, finals = [], []
        for _ in range(2):
            net = tiny_net(seed=3)
            res = train(net, tiny_data(10), cfg)
            curves.append(res.loss_curve)
            finals.append(net.store.state_dict())
        assert curves[0] == curves[1]
        assert finals[0] == finals[1]

    def test_loss_decreases(self):
        net = tiny_net()
        res = train(net, tiny_data(30), TrainConfig(epochs=2, seed=0))
        assert res.epochs[1].mean_loss < res.epochs[0].mean_loss

    def test_checkpoint_files_track_epochs(self, tmp_path):
        net = tiny_net()
        res = train(
            net, tiny_data(6), TrainConfig(epochs=2, seed=0), checkpoint_dir=str(tmp_path)
        )
        names = [p.split("/")[-1] for p in res.checkpoints]
        assert names == ["ckpt-init.json", "ckpt-epoch000.json", "ckpt-epoch001.json"]
        fresh = tiny_net(seed=99)
        fresh.store.load(str(tmp_path / "ckpt-epoch001.json"))
        assert fresh.store.state_dict() == net.store.state_dict()

    def test_flush_step_when_accum_exceeds_dataset(self):
        net = tiny_net()
        before = net.store.state_dict()
        res = train(net, tiny_data(3), TrainConfig(epochs=1, accum_pairs=64, seed=0))
        assert res.epochs[0].n_pairs == 3
        assert net.store.state_dict() != before

    def test_abort_restores_last_good_parameters(self):
        net = tiny_net()
        init = net.store.state_dict()
        name, tensor = next(iter(net.store.items()))

        def poison(epoch, pos, value):
            if pos == 1:
                tensor.data[...] = np.inf

        with pytest.raises(TrainingAbortedError) as err:
            train(net, tiny_data(6), TrainConfig(epochs=1, seed=0), progress=poison)
        assert err.value.epoch == 0
        assert net.store.state_dict() == init

    def test_augmentation_changes_the_run(self):
        curves = []
        for aug in (None, AugmentConfig(flip_prob=1.0, bbox_jitter_px=3.0)):
            net = tiny_net()
            res = train(net, tiny_data(8), TrainConfig(epochs=1, seed=0, augment=aug))
            curves.append(res.loss_curve)
        assert curves[0] != curves[1]

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(epochs=-1)
        with pytest.raises(ValueError):
            TrainConfig(accum_pairs=0)
        with pytest.raises(ValueError):
            TrainConfig(lr=0.0)


class FakeNet:
    """Returns a fixed assignment matrix regardless of input."""

    def __init__(self, probs):
        self.probs = np.asarray(probs, dtype=np.float64)

    def forward(self, obs_a, obs_b):
        m, n = len(obs_a.nodes), len(obs_b.nodes)
        assert self.probs.shape == (m, n)
        return SimpleNamespace(probabilities=self.probs)


def still_pair():
    cfg = SceneConfig(
        seed=4,
        drop_prob=0.0,
        camera_shift_px=0.0,
        jitter_px=0.0,
        depth_jitter_mm=0.0,
        angle_jitter=0.0,
        appearance_drift_std=0.0,
    )
    return gen_pair(cfg, 0)


class TestEvaluate:
    def test_perfect_predictions_score_one(self):
        a, b, truth = still_pair()
        probs = np.full((len(a.nodes), len(b.nodes)), 0.01)
        for i, j in truth.labels.matches:
            probs[i, j] = 0.9
        pt = evaluate_single(FakeNet(probs), [(a, b, truth)], threshold=0.5)
        assert pt.precision == 1.0 and pt.recall == 1.0 and pt.matching_score == 1.0
        assert pt.true_positives == len(truth.labels.matches)
        assert pt.false_positives == 0 and pt.false_negatives == 0

    def test_high_threshold_counts_misses(self):
        a, b, truth = still_pair()
        probs = np.full((len(a.nodes), len(b.nodes)), 0.01)
        for i, j in truth.labels.matches:
            probs[i, j] = 0.6
        pt = evaluate_single(FakeNet(probs), [(a, b, truth)], threshold=0.7)
        assert pt.true_positives == 0
        assert pt.false_negatives == len(truth.labels.matches)
        assert pt.precision == 1.0  # no predictions at all
        assert pt.recall == 0.0
        assert pt.matching_score == 0.0  # every fruitlet has a partner it missed

    def test_one_swapped_match(self):
        a, b, truth = still_pair()
        matches = list(truth.labels.matches)
        assert len(matches) >= 2
        probs = np.full((len(a.nodes), len(b.nodes)), 0.01)
        (i0, j0), (i1, j1) = matches[0], matches[1]
        probs[i0, j1] = 0.9  # crossed pair
        probs[i1, j0] = 0.9
        for i, j in matches[2:]:
            probs[i, j] = 0.9
        pt = evaluate_single(FakeNet(probs), [(a, b, truth)], threshold=0.5)
        assert pt.false_positives == 2
        assert pt.false_negatives == 2
        assert pt.true_positives == len(matches) - 2
        k = len(matches)
        assert pt.matching_score == pytest.approx((2 * k - 4) / (2 * k))

    def test_sweep_shares_forward_pass(self):
        a, b, truth = still_pair()
        probs = np.full((len(a.nodes), len(b.nodes)), 0.01)
        for i, j in truth.labels.matches:
            probs[i, j] = 0.6
        pts = evaluate(FakeNet(probs), [(a, b, truth)], thresholds=(0.4, 0.5, 0.7))
        assert [p.threshold for p in pts] == [0.4, 0.5, 0.7]
        assert pts[0].recall == 1.0 and pts[2].recall == 0.0

    def test_trained_tiny_net_on_real_data(self):
        net = tiny_net()
        train(net, tiny_data(20), TrainConfig(epochs=1, seed=0))
        pt = evaluate_single(net, tiny_data(8, start=500), threshold=0.5)
        assert 0.0 <= pt.matching_score <= 1.0
        assert 0.0 <= pt.precision <= 1.0 and 0.0 <= pt.recall <= 1.0
        assert pt.n_pairs == 8
