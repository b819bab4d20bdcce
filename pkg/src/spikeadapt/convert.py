"""ReLU network description and its conversion to an IF spiking network."""
from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from .netcore import (
    LayerSpec,
    SpikingNetwork,
    Stage,
    StructureError,
    SurrogateConfig,
    build_stages,
    check_finite,
)

A_MAX_FLOOR = 1e-6


@dataclass
class AnnModel:
    """Feed-forward ReLU network: synaptic layers, each optionally followed by
    a normalization layer in inference mode. The last group produces logits."""

    input_shape: tuple[int, ...]
    layers: list[LayerSpec]

    def __post_init__(self):
        self.input_shape = tuple(int(d) for d in self.input_shape)
        self.stages: list[Stage] = build_stages(self.input_shape, self.layers, terminal=False)

    @property
    def n_hidden(self) -> int:
        return len(self.stages) - 1


@dataclass
class CalibrationProfile:
    a_max: list[float]
    percentile: float = 99.9

    def __post_init__(self):
        if any(not a > 0 for a in self.a_max):
            raise ValueError("every a_max must be positive")
        if not 0 < self.percentile <= 100:
            raise ValueError("percentile must lie in (0, 100]")

    def to_dict(self) -> dict:
        return {"a_max": [float(a) for a in self.a_max], "percentile": float(self.percentile)}


def _preact(ann_layers, stage: Stage, x: np.ndarray) -> np.ndarray:
    z = ann_layers[stage.synapse].synapse(x)
    if stage.norm is not None:
        z = ann_layers[stage.norm].normalize(z)[1]
    return z


def ann_forward(ann: AnnModel, x: np.ndarray) -> list[np.ndarray]:
    """Activations of every hidden layer (after ReLU) followed by the logits."""
    x = np.asarray(x, dtype=float)
    if x.shape[1:] != ann.input_shape:
        raise StructureError(f"input shape {x.shape[1:]} != model input {ann.input_shape}")
    check_finite(x, "input")
    outs = []
    for i, st in enumerate(ann.stages):
        z = _preact(ann.layers, st, x)
        x = np.maximum(z, 0.0) if i < ann.n_hidden else z
        outs.append(x)
    return outs


def calibrate_max_activations(ann: AnnModel, batch: np.ndarray, percentile: float = 99.9) -> CalibrationProfile:
    """Per-layer activation range from a calibration batch."""
    batch = np.asarray(batch, dtype=float)
    if batch.ndim == 0 or batch.shape[0] == 0:
        raise ValueError("calibration batch is empty")
    acts = ann_forward(ann, batch)[:-1]
    a_max = [max(float(np.percentile(a, percentile)), A_MAX_FLOOR) for a in acts]
    return CalibrationProfile(a_max, percentile)


def convert(ann: AnnModel, profile: CalibrationProfile, surrogate: SurrogateConfig | None = None) -> SpikingNetwork:
    """Map ANN weights onto IF neurons with threshold 1.

    Hidden layer ``l`` gets ``W * a_max[l-1] / a_max[l]`` and ``b / a_max[l]``
    (``a_max[-1] = 1`` for the input). A following normalization layer has its
    statistics and affine divided by ``a_max[l]`` too, so its output equals the
    ANN's normalized pre-activation over ``a_max[l]``. The logit layer only
    absorbs the previous range and is left in ANN units.
    """
    if len(profile.a_max) < ann.n_hidden:
        raise StructureError(f"calibration covers {len(profile.a_max)} layers, network has {ann.n_hidden}")
    layers: list[LayerSpec] = []
    prev = 1.0
    for i, st in enumerate(ann.stages):
        src = ann.layers[st.synapse]
        hidden = i < ann.n_hidden
        a = float(profile.a_max[i]) if hidden else 1.0
        layers.append(
            LayerSpec(
                src.kind,
                weight=src.weight * (prev / a),
                bias=src.bias / a,
                stride=src.stride,
                padding=src.padding,
                v_th=1.0,
                alpha=a,
                a_max=a,
            )
        )
        if st.norm is not None:
            nl = ann.layers[st.norm]
            layers.append(
                LayerSpec("normalization", gamma=nl.gamma / a, beta=nl.beta / a, mean=nl.mean / a, std=nl.std / a)
            )
        prev = a
    layers.append(LayerSpec("output-accumulator"))
    return SpikingNetwork(
        ann.input_shape, layers, surrogate or SurrogateConfig(), calibration=profile.to_dict()
    )


def normalized_activations(ann: AnnModel, profile: CalibrationProfile, x: np.ndarray) -> list[np.ndarray]:
    """ANN hidden activations divided by their layer range and clipped to [0, 1].

    These are the firing rates a converted network approaches as T grows.
    """
    acts = ann_forward(ann, x)[:-1]
    return [np.clip(a / m, 0.0, 1.0) for a, m in zip(acts, profile.a_max)]


def copy_ann(ann: AnnModel) -> AnnModel:
    return AnnModel(ann.input_shape, copy.deepcopy(ann.layers))
