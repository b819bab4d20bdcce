"""End-to-end protocols on the toy tasks, shared by the scripts and the tests.

Blobs: train a ReLU classifier on clean 16x16 blob images, convert it, then
stream cloud-corrupted test images through one-pass online adaptation and
score the predictions made during the pass.

Rectangles: the same for the grid detector, scored by mAP.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .adapt import AdaptConfig, BatchMetrics, StepLoss, adapt_stream
from .convert import AnnModel, calibrate_max_activations, convert
from .corrupt import CorruptionSpec, corrupt_batch
from .data import detection_targets, make_blobs, make_rectangles
from .detect import DetectionEntropy, WeightingParams, decode, head_output, mean_average_precision
from .io import Dataset
from .netcore import SpikingNetwork, forward
from .train import TrainConfig, train_classifier, train_detector


def kl_to_uniform(labels: np.ndarray, n_classes: int) -> float:
    p = np.bincount(np.asarray(labels), minlength=n_classes) / max(len(labels), 1)
    nz = p > 0
    return float(np.sum(p[nz] * np.log(p[nz] * n_classes)))


@dataclass
class BlobsTask:
    seed: int = 0
    n_train: int = 1500
    n_test: int = 600
    hidden: list[str] = field(default_factory=lambda: ["d64", "d64", "d32"])
    percentile: float = 99.9
    n_calibration: int = 500
    corruption: str = "cloudy"
    beta: float = 0.5


@dataclass
class PreparedTask:
    ann: AnnModel
    snn: SpikingNetwork
    clean: Dataset
    corrupted: Dataset
    train: Dataset


def prepare_blobs(task: BlobsTask = BlobsTask()) -> PreparedTask:
    rng = np.random.default_rng(task.seed)
    train = make_blobs(task.n_train, rng)
    test = make_blobs(task.n_test, rng)
    ann = train_classifier(train.images, train.labels, 3, TrainConfig(hidden=list(task.hidden), seed=task.seed))
    snn = convert(ann, calibrate_max_activations(ann, train.images[: task.n_calibration], task.percentile))
    cor = corrupt_batch(test.images, CorruptionSpec(task.corruption, task.beta, seed=task.seed))
    return PreparedTask(ann, snn, test, Dataset(cor, test.labels, 3), train)


def static_accuracy(net: SpikingNetwork, ds: Dataset, T: int) -> float:
    """Accuracy of the frozen network, no statistics refresh."""
    return float(np.mean(forward(net, ds.images, T).prediction().argmax(1) == ds.labels))


@dataclass
class StreamResult:
    accuracy: float
    predictions: np.ndarray  # (N,) argmax labels in stream order
    history: list[BatchMetrics]

    def tail_kl(self, n_classes: int, fraction: float = 0.25) -> float:
        k = max(1, int(round(len(self.predictions) * fraction)))
        return kl_to_uniform(self.predictions[-k:], n_classes)


def run_stream(net: SpikingNetwork, ds: Dataset, cfg: AdaptConfig, loss: StepLoss | None = None) -> StreamResult:
    _, hist = adapt_stream(net, ds.batches(cfg.batch_size), cfg, loss)
    preds = np.concatenate([h.predictions.argmax(1) for h in hist])
    acc = float(np.mean(preds == ds.labels)) if ds.labels is not None else float("nan")
    return StreamResult(acc, preds, hist)


# default adaptation settings for the blob protocol
BLOBS_ADAPT = AdaptConfig(lr=0.1, temperature=4.0, epsilon=0.3, timesteps=8, batch_size=32)


def blobs_adapt_config(**overrides) -> AdaptConfig:
    return replace(BLOBS_ADAPT, **overrides)


# --------------------------------------------------------------------------
# detection


@dataclass
class DetectionTask:
    seed: int = 0
    n_train: int = 2000
    n_test: int = 600
    grid: int = 4
    n_classes: int = 2
    size: int = 16
    hidden: list[str] = field(default_factory=lambda: ["d128", "d64"])
    epochs: int = 40
    percentile: float = 99.9
    corruption: str = "cloudy"
    beta: float = 0.5


DETECT_ADAPT = AdaptConfig(lr=0.01, temperature=4.0, epsilon=0.3, timesteps=32, batch_size=32)


@dataclass
class PreparedDetection:
    snn: SpikingNetwork
    corrupted: Dataset
    annotations: list


def prepare_detection(task: DetectionTask = DetectionTask()) -> PreparedDetection:
    rng = np.random.default_rng(task.seed)
    train = make_rectangles(task.n_train, rng, task.size, task.grid)
    test = make_rectangles(task.n_test, rng, task.size, task.grid)
    targets = detection_targets(train.annotations, task.size, task.grid, task.n_classes)
    cfg = TrainConfig(hidden=list(task.hidden), epochs=task.epochs, seed=task.seed)
    ann = train_detector(train.images, targets, task.grid, task.n_classes, cfg)
    snn = convert(ann, calibrate_max_activations(ann, train.images[:500], task.percentile))
    cor = corrupt_batch(test.images, CorruptionSpec(task.corruption, task.beta, seed=task.seed))
    return PreparedDetection(snn, Dataset(cor, None, task.n_classes, test.annotations), test.annotations)


def detection_stream_map(
    prep: PreparedDetection,
    task: DetectionTask,
    cfg: AdaptConfig,
    weighting: WeightingParams | None,
) -> float:
    """mAP of the detections emitted during one adaptation pass."""
    loss = DetectionEntropy(task.grid, task.n_classes, weighting, cfg.temperature)
    _, hist = adapt_stream(prep.snn, prep.corrupted.batches(cfg.batch_size), cfg, loss)
    u = np.concatenate([h.predictions for h in hist]) * 2.0 / (cfg.timesteps + 1)
    dets = decode(head_output(u, task.grid, task.n_classes), task.size)
    return mean_average_precision(dets, prep.annotations, task.n_classes)
