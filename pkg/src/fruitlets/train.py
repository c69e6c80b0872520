"""Training loop and evaluation metrics for the association network.

The trainer iterates a pair dataset (anything indexable yielding
(obs_a, obs_b, truth-with-labels)), accumulates gradients over small
groups of pairs, and steps Adam.  Per-pair loss is normalised by the
number of labelled assignments so clusters of different sizes carry
comparable weight.  All shuffling and augmentation derive from the
config seed: two runs with identical inputs produce identical loss
curves and identical final parameters.

A checkpoint is written before the first step and after every epoch.
If a step aborts on non-finite values, the parameters are rolled back
to the last completed epoch before the error is re-raised, so a crashed
run still leaves a usable model behind.
"""

import os
import time
from dataclasses import dataclass

import numpy as np

from .assoc.loss import assignment_loss
from .assoc.sinkhorn import extract_matches
from .augment import AugmentConfig, augment_pair
from .optim import Adam, StepAbortedError
from .tensor import NonFiniteError, Tensor, no_grad

__all__ = [
    "TrainConfig",
    "EpochStats",
    "TrainResult",
    "TrainingAbortedError",
    "train",
    "EvalPoint",
    "evaluate",
    "evaluate_single",
]


class TrainingAbortedError(RuntimeError):
    """Raised when a non-finite loss or gradient stops training.

    Parameters have already been restored to the last completed epoch
    when this propagates.
    """

    def __init__(self, reason: str, epoch: int, pair_index: int):
        super().__init__(
            f"training aborted at epoch {epoch}, pair {pair_index}: {reason}; "
            "parameters restored to last completed epoch"
        )
        self.reason = reason
        self.epoch = epoch
        self.pair_index = pair_index


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 6
    lr: float = 1e-3
    accum_pairs: int = 8
    seed: int = 0
    augment: AugmentConfig | None = AugmentConfig()
    shuffle: bool = True

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.accum_pairs < 1:
            raise ValueError("accum_pairs must be at least 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    mean_loss: float
    n_pairs: int
    seconds: float


@dataclass(frozen=True)
class TrainResult:
    epochs: tuple
    checkpoints: tuple

    @property
    def loss_curve(self):
        return [e.mean_loss for e in self.epochs]


def _label_cells(labels) -> int:
    return len(labels.matches) + len(labels.unmatched_a) + len(labels.unmatched_b)


def _save(store, directory, name):
    if directory is None:
        return None
    os.makedirs(directory, exist_ok=True)
    path = os.path.join(directory, name)
    store.save(path)
    return path


def train(net, dataset, config: TrainConfig, checkpoint_dir=None, progress=None):
    """Optimise ``net`` on ``dataset``; returns per-epoch statistics.

    Args:
        net: association network exposing .store and .forward.
        dataset: indexable of (obs_a, obs_b, truth) with truth.labels.
        config: loop hyperparameters.
        checkpoint_dir: if given, receives ckpt-init.json and
            ckpt-epoch{N}.json files.
        progress: optional callable(epoch, pair_position, loss_value),
            invoked after each pair.

    Raises:
        TrainingAbortedError: a non-finite loss or gradient appeared;
            parameters were rolled back to the last completed epoch.
    """
    rng = np.random.default_rng([config.seed, 17])
    opt = Adam(net.store, lr=config.lr)
    stats = []
    paths = []
    p = _save(net.store, checkpoint_dir, "ckpt-init.json")
    if p:
        paths.append(p)
    last_good = net.store.state_dict()

    for epoch in range(config.epochs):
        order = rng.permutation(len(dataset)) if config.shuffle else np.arange(len(dataset))
        t0 = time.monotonic()
        total = 0.0
        counted = 0
        pending = 0
        net.store.zero_grad()
        for pos, idx in enumerate(order):
            obs_a, obs_b, truth = dataset[int(idx)]
            labels = truth.labels
            if config.augment is not None:
                obs_a, obs_b, labels = augment_pair(obs_a, obs_b, labels, config.augment, rng)
            cells = _label_cells(labels)
            if cells == 0:
                continue
            try:
                out = net.forward(obs_a, obs_b)
                loss = assignment_loss(out.log_pbar, labels) * Tensor(1.0 / cells)
                value = float(loss.data)
                (loss * Tensor(1.0 / config.accum_pairs)).backward()
                pending += 1
                if pending == config.accum_pairs:
                    opt.step()
                    net.store.zero_grad()
                    pending = 0
            except (NonFiniteError, StepAbortedError) as e:
                net.store.load_state_dict(last_good)
                raise TrainingAbortedError(str(e), epoch, int(idx)) from e
            total += value
            counted += 1
            if progress is not None:
                progress(epoch, pos, value)
        if pending:
            try:
                opt.step()
            except StepAbortedError as e:
                net.store.load_state_dict(last_good)
                raise TrainingAbortedError(str(e), epoch, -1) from e
            net.store.zero_grad()
        stats.append(
            EpochStats(
                epoch=epoch,
                mean_loss=total / max(counted, 1),
                n_pairs=counted,
                seconds=time.monotonic() - t0,
            )
        )
        last_good = net.store.state_dict()
        p = _save(net.store, checkpoint_dir, f"ckpt-epoch{epoch:03d}.json")
        if p:
            paths.append(p)
    return TrainResult(epochs=tuple(stats), checkpoints=tuple(paths))


@dataclass(frozen=True)
class EvalPoint:
    """Association quality at one confidence threshold.

    precision/recall count predicted match pairs against labelled ones;
    matching_score averages, over pairs, the fraction of clustered
    fruitlets assigned exactly as labelled (including correctly left
    unmatched).  Empty denominators read as perfect (1.0).
    """

    threshold: float
    precision: float
    recall: float
    matching_score: float
    true_positives: int
    false_positives: int
    false_negatives: int
    n_pairs: int


def _partner_maps(labels):
    a_map = {i: j for i, j in labels.matches}
    b_map = {j: i for i, j in labels.matches}
    for i in labels.unmatched_a:
        a_map[i] = None
    for j in labels.unmatched_b:
        b_map[j] = None
    return a_map, b_map


def evaluate(net, dataset, thresholds=(0.5,)):
    """Score the matcher over a dataset at one or more thresholds.

    Runs one forward pass per pair and reuses the assignment matrix for
    every threshold.  Returns a list of EvalPoint, aligned with
    ``thresholds``.
    """
    thresholds = [float(t) for t in thresholds]
    tp = np.zeros(len(thresholds), dtype=np.int64)
    fp = np.zeros(len(thresholds), dtype=np.int64)
    fn = np.zeros(len(thresholds), dtype=np.int64)
    score_sum = np.zeros(len(thresholds))
    n_pairs = 0

    for k in range(len(dataset)):
        obs_a, obs_b, truth = dataset[k]
        labels = truth.labels
        with no_grad():
            out = net.forward(obs_a, obs_b)
        probs = out.probabilities
        flags_a = obs_a.is_cluster_flags
        flags_b = obs_b.is_cluster_flags
        a_map, b_map = _partner_maps(labels)
        label_set = set(labels.matches)
        n_pairs += 1

        for t_idx, thr in enumerate(thresholds):
            ms = extract_matches(probs, thr, flags_a, flags_b)
            pred = {(i, j) for i, j, _ in ms.pairs}
            tp[t_idx] += len(pred & label_set)
            fp[t_idx] += len(pred - label_set)
            fn[t_idx] += len(label_set - pred)

            pred_a = {i: j for i, j in pred}
            pred_b = {j: i for i, j in pred}
            correct = 0
            total = 0
            for i, want in a_map.items():
                total += 1
                correct += pred_a.get(i) == want
            for j, want in b_map.items():
                total += 1
                correct += pred_b.get(j) == want
            if total:
                score_sum[t_idx] += correct / total
            else:
                score_sum[t_idx] += 1.0

    points = []
    for t_idx, thr in enumerate(thresholds):
        denom_p = tp[t_idx] + fp[t_idx]
        denom_r = tp[t_idx] + fn[t_idx]
        points.append(
            EvalPoint(
                threshold=thr,
                precision=float(tp[t_idx] / denom_p) if denom_p else 1.0,
                recall=float(tp[t_idx] / denom_r) if denom_r else 1.0,
                matching_score=float(score_sum[t_idx] / max(n_pairs, 1)),
                true_positives=int(tp[t_idx]),
                false_positives=int(fp[t_idx]),
                false_negatives=int(fn[t_idx]),
                n_pairs=n_pairs,
            )
        )
    return points


def evaluate_single(net, dataset, threshold: float = 0.5) -> EvalPoint:
    return evaluate(net, dataset, thresholds=(threshold,))[0]
