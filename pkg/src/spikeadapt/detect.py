"""Confidence-weighted entropy for a toy one-stage grid detector.

The head predicts, for every cell of an ``H x W`` grid, one objectness logit,
``C`` class logits and four box numbers ``(cx, cy, w, h)``: centre offset
within the cell and size relative to the image, both squashed by a sigmoid.
The network's last layer therefore has ``H * W * (1 + C + 4)`` outputs laid
out cell-major.

Adaptation only sees the class entropy. Each cell's entropy is scaled by a
soft band-stop weight on its confidence, so cells the head is unsure about
(confidence between ``tau1`` and ``tau2``) are mostly ignored. The weight is
treated as a constant when differentiating.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .adapt import log_softmax, softmax_entropy, softmax_entropy_grad
from .netcore import SpikingNetwork, StructureError, forward

BOX_DIMS = 4


@dataclass(frozen=True)
class WeightingParams:
    tau1: float = 0.2
    tau2: float = 0.8
    delta: float = 20.0

    def __post_init__(self):
        if not 0.0 < self.tau1 < self.tau2 < 1.0:
            raise ValueError("need 0 < tau1 < tau2 < 1")
        if not self.delta > 0:
            raise ValueError("delta must be positive")


@dataclass
class DetectionHeadOutput:
    conf: np.ndarray  # (..., H, W) in [0, 1]
    cls_logits: np.ndarray  # (..., H, W, C)
    box: np.ndarray  # (..., H, W, 4) in [0, 1]

    @property
    def cls_prob(self) -> np.ndarray:
        return np.exp(log_softmax(self.cls_logits))

    @property
    def grid(self) -> tuple[int, int]:
        return self.conf.shape[-2:]

    @property
    def n_classes(self) -> int:
        return self.cls_logits.shape[-1]


def confidence_weight(p_cf, params: WeightingParams = WeightingParams()) -> np.ndarray:
    """Soft weight near 1 for confident cells (either way) and near 0 between the bounds."""
    p = np.asarray(p_cf, dtype=float)
    return expit(-params.delta * (p - params.tau1)) + expit(params.delta * (p - params.tau2))


def detection_entropy(out: DetectionHeadOutput, params: WeightingParams | None = WeightingParams(), tau: float = 1.0) -> float:
    """Sum over cells (and any leading batch axes) of weight x class entropy.

    ``params=None`` gives every cell weight one, the unweighted variant.
    """
    h = softmax_entropy(out.cls_logits, tau)
    w = 1.0 if params is None else confidence_weight(out.conf, params)
    return float(np.sum(w * h))


def cell_width(grid: int, n_classes: int) -> int:
    return 1 + n_classes + BOX_DIMS


def split_head(u: np.ndarray, grid: int, n_classes: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Raw (B, G*G*K) outputs into objectness logits, class logits and box logits."""
    u = np.asarray(u, dtype=float)
    k = cell_width(grid, n_classes)
    if u.shape[-1] != grid * grid * k:
        raise StructureError(f"head width {u.shape[-1]} != {grid}*{grid}*{k}")
    cells = u.reshape(u.shape[:-1] + (grid, grid, k))
    return cells[..., 0], cells[..., 1 : 1 + n_classes], cells[..., 1 + n_classes :]


def merge_head(obj: np.ndarray, cls: np.ndarray, box: np.ndarray) -> np.ndarray:
    cells = np.concatenate([obj[..., None], cls, box], axis=-1)
    return cells.reshape(cells.shape[:-3] + (-1,))


def head_output(u: np.ndarray, grid: int, n_classes: int) -> DetectionHeadOutput:
    obj, cls, box = split_head(u, grid, n_classes)
    return DetectionHeadOutput(expit(obj), cls.copy(), expit(box))


def toy_head_forward(net: SpikingNetwork, x: np.ndarray, T: int, grid: int, n_classes: int) -> DetectionHeadOutput:
    """Simulate ``net`` and decode its output as a detection head.

    The accumulated potential grows with time, so the head reads
    ``mean_t v[t] / mean_t t``, which equals the per-step output current
    when that current is constant. This keeps confidences on the scale the
    source ANN was trained at, whatever ``T``.
    """
    if net.n_classes != grid * grid * cell_width(grid, n_classes):
        raise StructureError(f"network width {net.n_classes} does not fit a {grid}x{grid} head with {n_classes} classes")
    y_hat = forward(net, x, T).prediction()
    return head_output(y_hat * 2.0 / (T + 1), grid, n_classes)


@dataclass
class DetectionEntropy:
    """Per-step loss for the adaptation engines.

    At step ``t`` the head logits are ``v[t] / t``. Only the class logits get
    gradient; the confidence weight is held constant.
    """

    grid: int
    n_classes: int
    params: WeightingParams | None = WeightingParams()
    tau: float = 1.0

    def step(self, v_out, t=1):
        u = np.asarray(v_out, dtype=float) / t
        obj, cls, _ = split_head(u, self.grid, self.n_classes)
        w = np.ones_like(obj) if self.params is None else confidence_weight(expit(obj), self.params)
        loss = float(np.sum(w * softmax_entropy(cls, self.tau)))
        g_cls = w[..., None] * softmax_entropy_grad(cls, self.tau) / t
        grad = merge_head(np.zeros_like(obj), g_cls, np.zeros(cls.shape[:-1] + (BOX_DIMS,)))
        return loss, grad


# --------------------------------------------------------------------------
# decoding and evaluation


@dataclass(frozen=True)
class Detection:
    image: int
    cls: int
    score: float
    box: tuple[float, float, float, float]  # x0, y0, x1, y1 in pixels

    def to_dict(self) -> dict:
        return {"image": self.image, "class": self.cls, "score": self.score, "box": list(self.box)}


def decode(out: DetectionHeadOutput, size: int, score_threshold: float = 0.05, first_index: int = 0) -> list[Detection]:
    """One candidate per cell; score is confidence times top class probability."""
    gh, gw = out.grid
    cell = size / gw
    prob = out.cls_prob
    dets = []
    for b in range(out.conf.shape[0]):
        for i in range(gh):
            for j in range(gw):
                c = int(prob[b, i, j].argmax())
                score = float(out.conf[b, i, j] * prob[b, i, j, c])
                if score < score_threshold:
                    continue
                bx, by, bw, bh = out.box[b, i, j]
                cx, cy = (j + bx) * cell, (i + by) * cell
                w, h = bw * size, bh * size
                dets.append(Detection(first_index + b, c, score, (cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)))
    return dets


def iou(a, b) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def average_precision_11(recall: np.ndarray, precision: np.ndarray) -> float:
    """Mean over r in {0, 0.1, ..., 1} of the best precision at recall >= r."""
    ap = 0.0
    for r in np.linspace(0.0, 1.0, 11):
        mask = recall >= r - 1e-12
        ap += precision[mask].max() if mask.any() else 0.0
    return ap / 11.0


def mean_average_precision(detections: list[Detection], annotations, n_classes: int, iou_threshold: float = 0.5) -> float:
    """Greedy matching by descending score; classes with no ground truth are skipped."""
    aps = []
    for c in range(n_classes):
        gt = {i: [b[1:] for b in boxes if int(b[0]) == c] for i, boxes in enumerate(annotations)}
        n_gt = sum(len(v) for v in gt.values())
        if n_gt == 0:
            continue
        used = {i: np.zeros(len(v), bool) for i, v in gt.items()}
        cand = sorted((d for d in detections if d.cls == c), key=lambda d: -d.score)
        tp = np.zeros(len(cand))
        for k, d in enumerate(cand):
            boxes = gt.get(d.image, [])
            overlaps = [iou(d.box, g) for g in boxes]
            if overlaps:
                m = int(np.argmax(overlaps))
                if overlaps[m] >= iou_threshold and not used[d.image][m]:
                    used[d.image][m] = True
                    tp[k] = 1
        if len(cand) == 0:
            aps.append(0.0)
            continue
        ctp = np.cumsum(tp)
        recall = ctp / n_gt
        precision = ctp / np.arange(1, len(cand) + 1)
        aps.append(average_precision_11(recall, precision))
    return float(np.mean(aps)) if aps else 0.0
