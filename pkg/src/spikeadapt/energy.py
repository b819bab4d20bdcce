"""Operation counting and a 45 nm energy estimate.

ANN inference is costed as multiply-accumulates (MACs) of its dense and conv
layers. SNN inference is costed as accumulates (ACs, "SynOps"): each spike
adds one AC per outgoing synapse of the neuron that fired.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .netcore import LayerSpec, RunTrace, SpikingNetwork, Stage

PJ = 1e-12


@dataclass(frozen=True)
class EnergyProfile:
    mac_pj: float = 4.6
    ac_pj: float = 0.1
    mult_pj: float = 3.7
    add_pj: float = 0.9

    def __post_init__(self):
        if min(self.mac_pj, self.ac_pj, self.mult_pj, self.add_pj) <= 0:
            raise ValueError("energy costs must be positive")
        if not np.isclose(self.mac_pj, self.mult_pj + self.add_pj):
            raise ValueError("mac_pj must equal mult_pj + add_pj")


@dataclass(frozen=True)
class EnergyReport:
    mac_count: int
    ac_count: int
    estimated_joules: float

    def to_dict(self) -> dict:
        return {"mac_count": self.mac_count, "ac_count": self.ac_count, "estimated_joules": self.estimated_joules}


def _layer_macs(layer: LayerSpec, stage: Stage) -> int:
    if layer.kind == "dense":
        return int(layer.weight.shape[0] * layer.weight.shape[1])
    c_out, c_in, k, _ = layer.weight.shape
    _, ho, wo = stage.out_shape
    return int(k * k * c_in * c_out * ho * wo)


def count_ann_macs(model) -> int:
    """MACs of one forward pass; ``model`` is an AnnModel or SpikingNetwork."""
    return sum(_layer_macs(model.layers[st.synapse], st) for st in model.stages)


def fanout(net: SpikingNetwork, stage_index: int) -> np.ndarray:
    """Outgoing synapse count of every neuron feeding stage ``stage_index``."""
    st = net.stages[stage_index]
    layer = net.layers[st.synapse]
    if layer.kind == "dense":
        return np.full(st.in_shape, layer.weight.shape[0], dtype=np.int64)
    ones_out = np.ones((1,) + st.out_shape)
    unit = LayerSpec("conv2d", np.ones_like(layer.weight), stride=layer.stride, padding=layer.padding)
    counts = unit.synapse_transpose(ones_out, st.in_shape)[0]
    return np.rint(counts).astype(np.int64)


def synops_from_counts(net: SpikingNetwork, spike_counts: list[np.ndarray]) -> int:
    """SynOps from per-layer spike counts of shape (B, *layer_shape), summed over the batch."""
    total = 0
    for k, counts in enumerate(spike_counts):
        total += int(np.rint(np.sum(counts * fanout(net, k + 1))))
    return total


def count_snn_synops(trace: RunTrace, net: SpikingNetwork) -> int:
    """Accumulate operations triggered by all spikes in ``trace``."""
    if len(trace.spikes) != len(net.spiking_stages):
        raise ValueError("trace does not match the network's spiking layers")
    return synops_from_counts(net, trace.spike_counts)


def estimate_energy(mac_count: int, ac_count: int, profile: EnergyProfile = EnergyProfile()) -> EnergyReport:
    joules = (mac_count * profile.mac_pj + ac_count * profile.ac_pj) * PJ
    return EnergyReport(int(mac_count), int(ac_count), joules)
