"""Discrete-time integrate-and-fire network simulation.

A network is a flat list of :class:`LayerSpec` entries. Synaptic layers
(``dense`` / ``conv2d``) may be followed by one ``normalization`` layer;
each such group drives a layer of IF neurons, except the group right before
the terminal ``output-accumulator``, whose membrane integrates without
spiking or reset.

Per timestep, a spiking group computes::

    z = W x + b
    n = gamma * (z - mean) / std + beta      # only with a normalization layer
    I = (a_max / alpha) * n
    v = v - v_th * s_prev + I
    s = H(v - v_th)

The input tensor is applied as a constant analog current at every step.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

from . import ops

SYNAPTIC = ("dense", "conv2d")
LAYER_KINDS = SYNAPTIC + ("normalization", "output-accumulator")
VAR_FLOOR = 1e-5


class StructureError(ValueError):
    """Shapes or layer ordering are inconsistent."""


class NumericError(FloatingPointError):
    """A non-finite value appeared in an input, a loss or a gradient."""


def check_finite(x: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite values in {what}")


# --------------------------------------------------------------------------
# surrogate gradients


@dataclass(frozen=True)
class SurrogateConfig:
    """Shape and half-width of the spike-function surrogate.

    ``width=None`` means "use the layer threshold". With ``smooth=True`` the
    forward pass emits the surrogate's antiderivative instead of a hard spike,
    which makes the surrogate the exact derivative; this is only meant for
    finite-difference checks of the backward machinery.
    """

    shape: str = "triangular"
    width: float | None = None
    smooth: bool = False

    def __post_init__(self):
        if self.shape not in ("triangular", "rectangular"):
            raise ValueError(f"unknown surrogate shape {self.shape!r}")
        if self.width is not None and not self.width > 0:
            raise ValueError("surrogate width must be positive")

    def half_width(self, v_th: float) -> float:
        return v_th if self.width is None else self.width


def surrogate_grad(v, v_th: float, cfg: SurrogateConfig = SurrogateConfig()):
    a = cfg.half_width(v_th)
    d = np.abs(np.asarray(v, dtype=float) - v_th)
    if cfg.shape == "triangular":
        return np.maximum(0.0, 1.0 - d / a) / a
    return np.where(d <= a, 1.0 / (2.0 * a), 0.0)


def spike_fn(v: np.ndarray, v_th: float, cfg: SurrogateConfig = SurrogateConfig()) -> np.ndarray:
    if not cfg.smooth:
        return (v >= v_th).astype(float)
    a = cfg.half_width(v_th)
    u = (v - v_th) / a
    if cfg.shape == "rectangular":
        return np.clip((u + 1.0) / 2.0, 0.0, 1.0)
    u = np.clip(u, -1.0, 1.0)
    return np.where(u <= 0, 0.5 * (1.0 + u) ** 2, 1.0 - 0.5 * (1.0 - u) ** 2)


# --------------------------------------------------------------------------
# neuron state


@dataclass
class IfLayerState:
    v: np.ndarray
    s: np.ndarray
    trace: np.ndarray  # cumulative spike count, the presynaptic trace for the next layer

    @classmethod
    def zeros(cls, shape: tuple[int, ...]) -> "IfLayerState":
        return cls(np.zeros(shape), np.zeros(shape), np.zeros(shape))


def if_step(
    state: IfLayerState,
    input_current: np.ndarray,
    v_th: float,
    alpha_scale: float = 1.0,
    surrogate: SurrogateConfig = SurrogateConfig(),
) -> tuple[IfLayerState, np.ndarray]:
    """Advance one IF layer by one step with subtractive reset."""
    if np.shape(input_current) != state.v.shape:
        raise StructureError(f"input current shape {np.shape(input_current)} != state shape {state.v.shape}")
    v = state.v - v_th * state.s + alpha_scale * input_current
    s = spike_fn(v, v_th, surrogate)
    return IfLayerState(v, s, state.trace + s), s


# --------------------------------------------------------------------------
# layers and networks


@dataclass
class LayerSpec:
    kind: str
    weight: np.ndarray | None = None
    bias: np.ndarray | None = None
    stride: int = 1
    padding: int = 0
    # spiking parameters, read from the synaptic layer of a group
    v_th: float = 1.0
    alpha: float = 1.0
    alpha_init: float | None = None
    a_max: float = 1.0
    # normalization parameters
    gamma: np.ndarray | None = None
    beta: np.ndarray | None = None
    mean: np.ndarray | None = None
    std: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise StructureError(f"unknown layer kind {self.kind!r}")
        if not self.v_th > 0:
            raise StructureError("v_th must be positive")
        if not self.alpha > 0:
            raise StructureError("clip alpha must be positive")
        if self.alpha_init is None:
            self.alpha_init = self.alpha
        if self.kind in SYNAPTIC:
            if self.weight is None:
                raise StructureError(f"{self.kind} layer needs weights")
            want = 2 if self.kind == "dense" else 4
            if self.weight.ndim != want:
                raise StructureError(f"{self.kind} weight must be {want}-d, got {self.weight.shape}")
            if self.kind == "conv2d" and self.weight.shape[2] != self.weight.shape[3]:
                raise StructureError("conv2d kernels must be square")
            if self.bias is None:
                self.bias = np.zeros(self.weight.shape[0])
            if self.bias.shape != (self.weight.shape[0],):
                raise StructureError("bias length must equal fan-out")
        if self.kind == "normalization":
            if self.gamma is None:
                raise StructureError("normalization layer needs gamma")
            c = self.gamma.shape[0]
            if self.beta is None:
                self.beta = np.zeros(c)
            if self.mean is None:
                self.mean = np.zeros(c)
            if self.std is None:
                self.std = np.ones(c)
            if not (self.beta.shape == self.mean.shape == self.std.shape == (c,)):
                raise StructureError("normalization vectors must share one length")

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    def out_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        if self.kind == "dense":
            if int(np.prod(in_shape)) != self.weight.shape[1]:
                raise StructureError(f"dense fan-in {self.weight.shape[1]} != input size {int(np.prod(in_shape))}")
            return (self.weight.shape[0],)
        if len(in_shape) != 3 or in_shape[0] != self.weight.shape[1]:
            raise StructureError(f"conv2d expects (C={self.weight.shape[1]}, H, W), got {in_shape}")
        ho, wo = ops.conv_output_hw(in_shape[1], in_shape[2], self.weight.shape[-1], self.stride, self.padding)
        return (self.weight.shape[0], ho, wo)

    def synapse(self, x: np.ndarray) -> np.ndarray:
        if self.kind == "dense":
            out = ops.dense(x, self.weight)
        else:
            out = ops.conv2d(x, self.weight, self.stride, self.padding)
        return out + ops.channel_view(self.bias, out.ndim)

    def synapse_transpose(self, grad_out: np.ndarray, in_shape: tuple[int, ...]) -> np.ndarray:
        """Adjoint of the linear part of :meth:`synapse` (bias excluded)."""
        if self.kind == "dense":
            return (grad_out @ self.weight).reshape((grad_out.shape[0],) + in_shape)
        return ops.conv2d_input_grad(grad_out, self.weight, in_shape[1:], self.stride, self.padding)

    def weight_grad(self, grad_out: np.ndarray, x: np.ndarray) -> np.ndarray:
        if self.kind == "dense":
            return grad_out.T @ x.reshape(x.shape[0], -1)
        return ops.conv2d_weight_grad(grad_out, x, self.weight.shape[-1], self.stride, self.padding)

    def normalize(self, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Return (standardized z, affine output)."""
        zhat = (z - ops.channel_view(self.mean, z.ndim)) / ops.channel_view(self.std, z.ndim)
        return zhat, ops.channel_view(self.gamma, z.ndim) * zhat + ops.channel_view(self.beta, z.ndim)


@dataclass(frozen=True)
class Stage:
    """One synapse (+ optional normalization) group feeding a neuron layer."""

    synapse: int
    norm: int | None
    spiking: bool
    in_shape: tuple[int, ...]
    out_shape: tuple[int, ...]


def build_stages(input_shape: tuple[int, ...], layers: list[LayerSpec], terminal: bool = True) -> list[Stage]:
    """Group a layer list into stages and check the shape chain.

    ``terminal=True`` requires the list to end with an ``output-accumulator``
    (spiking networks); ``terminal=False`` is the ANN layout, where the last
    group is the logit layer.
    """
    if terminal:
        if not layers or layers[-1].kind != "output-accumulator":
            raise StructureError("spiking network must end with an output-accumulator layer")
        body = layers[:-1]
    else:
        body = layers
    if any(l.kind == "output-accumulator" for l in body):
        raise StructureError("output-accumulator may only appear last")
    groups: list[list[int]] = []
    for i, layer in enumerate(body):
        if layer.kind in SYNAPTIC:
            groups.append([i])
        elif layer.kind == "normalization":
            if not groups or len(groups[-1]) != 1:
                raise StructureError(f"normalization layer {i} must directly follow a synaptic layer")
            groups[-1].append(i)
    if not groups:
        raise StructureError("network has no synaptic layers")
    if body[0].kind not in SYNAPTIC:
        raise StructureError("first layer must be synaptic")
    stages = []
    shape = tuple(input_shape)
    for g_index, group in enumerate(groups):
        syn = layers[group[0]]
        out = syn.out_shape(shape)
        norm = group[1] if len(group) > 1 else None
        if norm is not None and layers[norm].gamma.shape[0] != out[0]:
            raise StructureError(f"normalization layer {norm} width != {out[0]} channels")
        stages.append(Stage(group[0], norm, g_index < len(groups) - 1, shape, out))
        shape = out
    return stages


@dataclass
class SpikingNetwork:
    input_shape: tuple[int, ...]
    layers: list[LayerSpec]
    surrogate: SurrogateConfig = field(default_factory=SurrogateConfig)
    calibration: dict | None = None  # {"a_max": [...], "percentile": p} when produced by conversion

    def __post_init__(self):
        self.input_shape = tuple(int(d) for d in self.input_shape)
        self.stages = build_stages(self.input_shape, self.layers)

    @property
    def spiking_stages(self) -> list[Stage]:
        return [st for st in self.stages if st.spiking]

    @property
    def n_classes(self) -> int:
        return int(np.prod(self.stages[-1].out_shape))

    def current_scale(self, stage: Stage) -> float:
        if not stage.spiking:
            return 1.0
        syn = self.layers[stage.synapse]
        return syn.a_max / syn.alpha

    def copy(self) -> "SpikingNetwork":
        return copy.deepcopy(self)

    # parameter access, identifiers look like "3.weight" / "1.gamma" / "0.alpha"
    def parameter_ids(self) -> list[str]:
        ids = []
        for st in self.stages:
            ids += [f"{st.synapse}.weight", f"{st.synapse}.bias"]
            if st.norm is not None:
                ids += [f"{st.norm}.gamma", f"{st.norm}.beta"]
            if st.spiking:
                ids.append(f"{st.synapse}.alpha")
        return ids

    def get_param(self, pid: str) -> np.ndarray:
        idx, name = pid.split(".")
        value = getattr(self.layers[int(idx)], name)
        return np.asarray(value, dtype=float)

    def set_param(self, pid: str, value) -> None:
        idx, name = pid.split(".")
        layer = self.layers[int(idx)]
        old = getattr(layer, name)
        if name == "alpha":
            value = float(value)
            if not value > 0:
                raise NumericError("clip alpha must stay positive")
        elif np.shape(value) != np.shape(old):
            raise StructureError(f"shape mismatch for {pid}")
        setattr(layer, name, value)

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Every numeric tensor of the network, parameters and statistics."""
        out = {}
        for i, layer in enumerate(self.layers):
            for name in ("weight", "bias", "gamma", "beta", "mean", "std"):
                value = getattr(layer, name)
                if value is not None:
                    out[f"{i}.{name}"] = value
            if layer.kind in SYNAPTIC:
                out[f"{i}.alpha"] = np.array(layer.alpha)
        return out


# --------------------------------------------------------------------------
# simulation


@dataclass
class StageRecord:
    inp: np.ndarray
    zhat: np.ndarray | None
    pre: np.ndarray  # after normalization, before the AAS scale
    current: np.ndarray
    v: np.ndarray
    s: np.ndarray | None


class Simulator:
    """Step-by-step simulation holding the neuron state of one batch."""

    def __init__(self, net: SpikingNetwork, batch: int):
        self.net = net
        self.t = 0
        self.states = [IfLayerState.zeros((batch,) + st.out_shape) for st in net.spiking_stages]
        self.v_out = np.zeros((batch,) + net.stages[-1].out_shape)

    def step(self, x: np.ndarray) -> list[StageRecord]:
        net = self.net
        records = []
        k = 0
        for st in net.stages:
            syn = net.layers[st.synapse]
            z = syn.synapse(x)
            if st.norm is not None:
                zhat, pre = net.layers[st.norm].normalize(z)
            else:
                zhat, pre = None, z
            scale = net.current_scale(st)
            if st.spiking:
                self.states[k], s = if_step(self.states[k], pre, syn.v_th, scale, net.surrogate)
                records.append(StageRecord(x, zhat, pre, scale * pre, self.states[k].v, s))
                x = s
                k += 1
            else:
                self.v_out = self.v_out + pre
                records.append(StageRecord(x, zhat, pre, pre, self.v_out, None))
        self.t += 1
        return records


@dataclass
class RunTrace:
    spikes: list[np.ndarray]  # per spiking layer, (T, B, *shape)
    potentials: np.ndarray  # output membrane potential, (T, B, C)

    @property
    def timesteps(self) -> int:
        return self.potentials.shape[0]

    @property
    def spike_counts(self) -> list[np.ndarray]:
        return [s.sum(axis=0) for s in self.spikes]

    def rates(self) -> list[np.ndarray]:
        return [c / self.timesteps for c in self.spike_counts]

    def prediction(self) -> np.ndarray:
        return self.potentials.mean(axis=0)


def check_input(net: SpikingNetwork, x: np.ndarray, T: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[1:] != net.input_shape:
        raise StructureError(f"input shape {x.shape[1:]} != network input {net.input_shape}")
    if T < 1:
        raise StructureError("T must be at least 1")
    check_finite(x, "input")
    return x


def forward(net: SpikingNetwork, x: np.ndarray, T: int) -> RunTrace:
    """Simulate ``T`` steps on a batch ``x`` of shape (B, *input_shape)."""
    x = check_input(net, x, T)
    sim = Simulator(net, x.shape[0])
    spikes = [np.empty((T,) + s.v.shape) for s in sim.states]
    potentials = np.empty((T,) + sim.v_out.shape)
    for t in range(T):
        records = sim.step(x)
        for k, rec in enumerate(r for r in records if r.s is not None):
            spikes[k][t] = rec.s
        potentials[t] = records[-1].v
    return RunTrace(spikes, potentials.reshape(T, x.shape[0], -1))


def firing_rate_histogram(trace: RunTrace, bins: int = 10) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per-layer histogram of per-neuron firing rates on uniform bins over [0, 1]."""
    if bins < 2:
        raise ValueError("need at least 2 bins")
    return [np.histogram(r.ravel(), bins=bins, range=(0.0, 1.0)) for r in trace.rates()]


def iter_spiking_layers(net: SpikingNetwork) -> Iterator[LayerSpec]:
    for st in net.spiking_stages:
        yield net.layers[st.synapse]


def mlp(
    sizes: list[int],
    rng: np.random.Generator,
    norm: bool = False,
    weight_scale: Callable[[int], float] | None = None,
) -> SpikingNetwork:
    """Random fully-connected spiking network, handy for tests and demos."""
    weight_scale = weight_scale or (lambda fan_in: np.sqrt(2.0 / fan_in))
    layers = []
    for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        layers.append(LayerSpec("dense", rng.normal(0, weight_scale(n_in), (n_out, n_in)), rng.normal(0, 0.1, n_out)))
        if norm and i < len(sizes) - 2:
            layers.append(LayerSpec("normalization", gamma=rng.uniform(0.5, 1.5, n_out), beta=rng.normal(0, 0.2, n_out),
                                    mean=rng.normal(0, 0.2, n_out), std=rng.uniform(0.5, 1.5, n_out)))
    layers.append(LayerSpec("output-accumulator"))
    return SpikingNetwork((sizes[0],), layers)
