from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from spikeadapt.convert import AnnModel
from spikeadapt.energy import (
    EnergyProfile,
    count_ann_macs,
    count_snn_synops,
    estimate_energy,
    fanout,
    synops_from_counts,
)
from spikeadapt.netcore import LayerSpec, RunTrace, SpikingNetwork, forward, mlp


def brute_force_synops(net, trace):
    """Walk every stored spike and add the number of synapses it drives."""
    total = 0
    for k, spikes in enumerate(trace.spikes):
        stage = net.stages[k + 1]
        layer = net.layers[stage.synapse]
        for t, b, *pos in np.argwhere(spikes > 0):
            probe = np.zeros((1,) + stage.in_shape)
            probe[(0, *pos)] = 1.0
            # a synapse exists wherever the unit weight pattern reaches an output
            unit = LayerSpec(layer.kind, np.ones_like(layer.weight), stride=layer.stride, padding=layer.padding)
            total += int(np.count_nonzero(unit.synapse(probe)))
    return total


def hidden4_net():
    return SpikingNetwork((2,), [LayerSpec("dense", np.ones((4, 2))), LayerSpec("dense", np.ones((3, 4))), LayerSpec("output-accumulator")])


# ---------------------------------------------------------------- macs


def test_dense_macs():
    ann = AnnModel((4,), [LayerSpec("dense", np.zeros((3, 4)))])
    assert count_ann_macs(ann) == 12


def test_conv_macs():
    ann = AnnModel((1, 6, 6), [LayerSpec("conv2d", np.zeros((1, 1, 3, 3)))])
    assert ann.stages[0].out_shape == (1, 4, 4)
    assert count_ann_macs(ann) == 144


def test_empty_net_macs():
    assert count_ann_macs(SimpleNamespace(layers=[], stages=[])) == 0


def test_macs_sum_over_layers():
    ann = AnnModel((1, 8, 8), [LayerSpec("conv2d", np.zeros((2, 1, 3, 3)), stride=2, padding=1), LayerSpec("dense", np.zeros((5, 32)))])
    assert count_ann_macs(ann) == 9 * 1 * 2 * 4 * 4 + 32 * 5


# ---------------------------------------------------------------- synops


def test_silent_network_zero_synops():
    net = mlp([3, 6, 4, 2], np.random.default_rng(0))
    for layer in net.layers[:3]:
        layer.weight[:] = 0
        layer.bias[:] = 0
    assert count_snn_synops(forward(net, np.ones((2, 3)), 8), net) == 0


def test_single_spike_into_width5():
    net = SpikingNetwork((2,), [LayerSpec("dense", np.zeros((3, 2))), LayerSpec("dense", np.zeros((5, 3))), LayerSpec("output-accumulator")])
    spikes = np.zeros((4, 1, 3))
    spikes[2, 0, 1] = 1
    trace = RunTrace([spikes], np.zeros((4, 1, 5)))
    assert count_snn_synops(trace, net) == 5


def test_scripted_pattern_hand_count():
    net = hidden4_net()
    spikes = np.zeros((3, 2, 4))
    spikes[0, 0, [0, 2]] = 1  # 2 spikes
    spikes[1, 1, :] = 1  # 4 spikes
    spikes[2, 0, 3] = 1  # 1 spike
    trace = RunTrace([spikes], np.zeros((3, 2, 3)))
    assert count_snn_synops(trace, net) == 7 * 3


def test_trace_layer_mismatch_rejected():
    with pytest.raises(ValueError):
        count_snn_synops(RunTrace([], np.zeros((1, 1, 3))), hidden4_net())


@pytest.mark.parametrize("padding,stride", [(0, 1), (1, 1), (1, 2)])
def test_conv_fanout_matches_enumeration(padding, stride):
    rng = np.random.default_rng(1)
    layers = [
        LayerSpec("conv2d", rng.normal(0, 0.6, (3, 1, 3, 3)), rng.normal(0.2, 0.1, 3), padding=1),
        LayerSpec("conv2d", rng.normal(0, 0.4, (2, 3, 3, 3)), stride=stride, padding=padding),
        LayerSpec("dense", rng.normal(0, 0.3, (4, 2 * ((6 + 2 * padding - 3) // stride + 1) ** 2))),
        LayerSpec("output-accumulator"),
    ]
    net = SpikingNetwork((1, 6, 6), layers)
    trace = forward(net, rng.uniform(0, 1, (2, 1, 6, 6)), 5)
    assert sum(s.sum() for s in trace.spikes) > 0
    assert count_snn_synops(trace, net) == brute_force_synops(net, trace)
    # border neurons of a padded conv drive fewer synapses
    f = fanout(net, 1)
    assert f.max() == 2 * 9 or stride == 2


@given(st.integers(0, 10_000), st.integers(1, 8))
def test_dense_synops_match_enumeration(seed, T):
    rng = np.random.default_rng(seed)
    net = mlp([5, 7, 6, 3], rng)
    trace = forward(net, rng.uniform(0, 1, (3, 5)), T)
    assert count_snn_synops(trace, net) == brute_force_synops(net, trace)
    assert synops_from_counts(net, trace.spike_counts) == count_snn_synops(trace, net)


# ---------------------------------------------------------------- energy


def test_energy_unit_costs():
    assert estimate_energy(1, 0).estimated_joules == pytest.approx(4.6e-12, rel=1e-12)
    assert estimate_energy(0, 1).estimated_joules == pytest.approx(0.1e-12, rel=1e-12)
    assert estimate_energy(10**9, 0).estimated_joules == pytest.approx(4.6e-3, rel=1e-12)


@given(st.integers(0, 10**12), st.integers(0, 10**12))
def test_energy_is_linear(macs, acs):
    r = estimate_energy(macs, acs)
    assert r.estimated_joules == pytest.approx(macs * 4.6e-12 + acs * 0.1e-12, rel=1e-12, abs=0)
    assert r.to_dict() == {"mac_count": macs, "ac_count": acs, "estimated_joules": r.estimated_joules}


def test_profile_validation():
    with pytest.raises(ValueError):
        EnergyProfile(mac_pj=-1.0)
    with pytest.raises(ValueError):
        EnergyProfile(mac_pj=5.0)


def _ratio(net, x, T):
    trace = forward(net, x, T)
    macs = count_ann_macs(net) * x.shape[0] * T
    return estimate_energy(0, count_snn_synops(trace, net)).estimated_joules / estimate_energy(macs, 0).estimated_joules, trace


def test_snn_cheaper_on_sparse_net_and_ratio_tracks_sparsity():
    rng = np.random.default_rng(2)
    net = mlp([16, 32, 32, 4], rng)
    x = rng.uniform(0, 1, (8, 16))
    ratios = []
    for shift in (0.0, -0.3, -0.6, -1.0):
        for layer in net.layers[:2]:
            layer.bias[:] = shift
        ratio, trace = _ratio(net, x, 8)
        assert np.mean(np.concatenate([r.ravel() for r in trace.rates()])) < 0.5
        assert ratio < 1
        ratios.append(ratio)
    assert all(a >= b for a, b in zip(ratios, ratios[1:]))
    assert ratios[0] > ratios[-1]
