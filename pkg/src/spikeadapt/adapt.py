"""Unsupervised test-time adaptation of converted spiking networks.

Two gradient engines live here:

* :func:`online_pass` runs forward in time and keeps only the running
  presynaptic spike counts. At every step the instantaneous loss is
  backpropagated through the layers at that step only, and each weight
  gradient is the outer product of the local error with the trace.
* :func:`bptt_grad` records the whole unrolled run on a tape and walks it
  backwards. With ``detach_reset=True, per_step=True`` it computes, by a
  different route, the same quantity as the online engine.

Both operate in float64 on the parameters exposed by
:meth:`SpikingNetwork.parameter_ids`.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Protocol

import numpy as np

from . import ops
from .netcore import (
    IfLayerState,
    NumericError,
    Simulator,
    SpikingNetwork,
    StageRecord,
    VAR_FLOOR,
    check_finite,
    check_input,
    forward,
    if_step,
    surrogate_grad,
)

MODES = ("online", "bptt-oracle", "bn-stats-only")
SUBSETS = ("affine+clip", "affine", "clip", "all")
ALPHA_FLOOR = 1e-3

GradientSet = dict[str, np.ndarray]


@dataclass
class AdaptConfig:
    lr: float = 1e-3
    temperature: float = 4.0
    epsilon: float = 1e-3
    timesteps: int = 8
    mode: str = "online"
    param_subset: str = "affine+clip"
    batch_size: int = 32
    refresh_stats: bool = True

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError("learning rate must be non-negative")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if not self.epsilon >= 0:
            raise ValueError("epsilon must be non-negative")
        if self.timesteps < 1:
            raise ValueError("timesteps must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.param_subset not in SUBSETS:
            raise ValueError(f"param_subset must be one of {SUBSETS}")


# --------------------------------------------------------------------------
# entropy losses


def log_softmax(u: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = u - u.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def softmax(u: np.ndarray, tau: float = 1.0, axis: int = -1) -> np.ndarray:
    return np.exp(log_softmax(np.asarray(u, dtype=float) / tau, axis))


def softmax_entropy(u: np.ndarray, tau: float = 1.0, axis: int = -1) -> np.ndarray:
    logp = log_softmax(np.asarray(u, dtype=float) / tau, axis)
    return -(np.exp(logp) * logp).sum(axis=axis)


def softmax_entropy_grad(u: np.ndarray, tau: float = 1.0, axis: int = -1) -> np.ndarray:
    """Derivative of :func:`softmax_entropy` with respect to ``u``."""
    logp = log_softmax(np.asarray(u, dtype=float) / tau, axis)
    p = np.exp(logp)
    h = -(p * logp).sum(axis=axis, keepdims=True)
    return -p * (logp + h) / tau


def entropy_loss(y_hat, tau: float = 1.0) -> float:
    """Entropy of softmax(y_hat / tau), natural log."""
    y_hat = np.asarray(y_hat, dtype=float)
    check_finite(y_hat, "logits")
    return float(softmax_entropy(y_hat, tau))


def instantaneous_entropy(v_out_t, tau: float = 1.0) -> float:
    """Entropy of the output membrane potential at a single timestep."""
    return entropy_loss(v_out_t, tau)


class StepLoss(Protocol):
    def step(self, v_out: np.ndarray, t: int) -> tuple[float, np.ndarray]:
        """Loss summed over the batch for the (B, C) output at step ``t`` (1-based), and its gradient."""


@dataclass
class InstantEntropy:
    tau: float = 1.0

    def step(self, v_out, t=1):
        return float(softmax_entropy(v_out, self.tau).sum()), softmax_entropy_grad(v_out, self.tau)


def sequence_loss(step_loss: StepLoss) -> Callable[[np.ndarray], tuple[float, np.ndarray]]:
    """Mean of a per-step loss over batch and timesteps, for :func:`bptt_grad`."""

    def fn(potentials):
        T, B = potentials.shape[:2]
        grad = np.empty_like(potentials)
        total = 0.0
        for t in range(T):
            loss, grad[t] = step_loss.step(potentials[t], t + 1)
            total += loss
        return total / (B * T), grad / (B * T)

    return fn


def prediction_entropy(tau: float = 1.0) -> Callable[[np.ndarray], tuple[float, np.ndarray]]:
    """Entropy of the time-averaged output, mean over the batch."""

    def fn(potentials):
        T, B = potentials.shape[:2]
        y_hat = potentials.mean(axis=0)
        g = softmax_entropy_grad(y_hat, tau) / (B * T)
        return float(softmax_entropy(y_hat, tau).mean()), np.broadcast_to(g, potentials.shape).copy()

    return fn


# --------------------------------------------------------------------------
# gradient engines


@dataclass
class MemoryProbe:
    """Counts tensors a gradient routine keeps alive across timesteps."""

    buffers: int = 0
    nbytes: int = 0
    peak_buffers: int = 0

    def retain(self, *arrays) -> None:
        for a in arrays:
            if a is not None:
                self.buffers += 1
                self.nbytes += a.nbytes
        self.peak_buffers = max(self.peak_buffers, self.buffers)


@dataclass
class PassResult:
    grads: GradientSet
    loss: float
    prediction: np.ndarray  # (B, C), mean output potential over time
    spike_counts: list[np.ndarray]  # per spiking layer, (B, *shape)


def _zero_grads(net: SpikingNetwork, subset) -> GradientSet:
    ids = net.parameter_ids() if subset is None else list(subset)
    return {pid: np.zeros_like(net.get_param(pid)) for pid in ids}


def _add(grads: GradientSet, pid: str, value) -> None:
    if pid in grads:
        grads[pid] += value


def online_pass(
    net: SpikingNetwork,
    x: np.ndarray,
    T: int,
    loss: StepLoss,
    subset: Iterable[str] | None = None,
    probe: MemoryProbe | None = None,
) -> PassResult:
    """Forward-in-time gradient of the mean instantaneous loss."""
    x = check_input(net, x, T)
    B = x.shape[0]
    grads = _zero_grads(net, subset)
    sim = Simulator(net, B)
    in_trace = np.zeros_like(x)
    pred_sum = np.zeros((B, net.n_classes))
    if probe is not None:
        probe.retain(in_trace, pred_sum, *(s.trace for s in sim.states))
    total = 0.0
    for t in range(1, T + 1):
        records = sim.step(x)
        in_trace = in_trace + x
        traces = [in_trace] + [s.trace for s in sim.states]
        v_out = records[-1].v.reshape(B, -1)
        step_loss, g = loss.step(v_out, t)
        total += step_loss
        pred_sum += v_out
        g_upper = (g / (B * T)).reshape(records[-1].v.shape)
        for k in reversed(range(len(net.stages))):
            st, rec = net.stages[k], records[k]
            syn = net.layers[st.synapse]
            if st.spiking:
                g_v = g_upper * surrogate_grad(rec.v, syn.v_th, net.surrogate)
            else:
                g_v = g_upper
            a_hat = traces[k]
            z_sum = syn.synapse(a_hat) + (t - 1) * ops.channel_view(syn.bias, g_v.ndim)
            if st.norm is not None:
                nl = net.layers[st.norm]
                zhat_sum = (z_sum - t * ops.channel_view(nl.mean, g_v.ndim)) / ops.channel_view(nl.std, g_v.ndim)
                pre_sum = ops.channel_view(nl.gamma, g_v.ndim) * zhat_sum + t * ops.channel_view(nl.beta, g_v.ndim)
            else:
                pre_sum = z_sum
            scale = net.current_scale(st)
            if st.spiking:
                _add(grads, f"{st.synapse}.alpha", -np.sum(g_v * pre_sum) * scale / syn.alpha)
            g_pre = g_v * scale
            if st.norm is not None:
                _add(grads, f"{st.norm}.beta", ops.reduce_channel(g_pre) * t)
                _add(grads, f"{st.norm}.gamma", ops.reduce_channel(g_pre * zhat_sum))
                g_z = g_pre * ops.channel_view(nl.gamma / nl.std, g_v.ndim)
            else:
                g_z = g_pre
            _add(grads, f"{st.synapse}.bias", ops.reduce_channel(g_z) * t)
            _add(grads, f"{st.synapse}.weight", syn.weight_grad(g_z, a_hat))
            if k > 0:
                g_upper = syn.synapse_transpose(g_z, st.in_shape)
    for pid, g in grads.items():
        check_finite(g, f"gradient {pid}")
    return PassResult(grads, total / (B * T), pred_sum / T, [s.trace for s in sim.states])


def online_step_grad(
    net: SpikingNetwork,
    x: np.ndarray,
    T: int,
    tau: float = 1.0,
    subset: Iterable[str] | None = None,
    probe: MemoryProbe | None = None,
) -> GradientSet:
    return online_pass(net, x, T, InstantEntropy(tau), subset, probe).grads


def record_tape(net: SpikingNetwork, x: np.ndarray, T: int, probe: MemoryProbe | None = None):
    x = check_input(net, x, T)
    sim = Simulator(net, x.shape[0])
    tape: list[list[StageRecord]] = []
    for _ in range(T):
        records = sim.step(x)
        tape.append(records)
        if probe is not None:
            for r in records:
                probe.retain(r.inp, r.zhat, r.pre, r.current, r.v, r.s)
    return tape


def _backward(net, tape, delta, grads, detach_reset: bool, credit_step: int | None) -> None:
    n = len(net.stages)
    lam_next: list[np.ndarray | None] = [None] * n
    last = len(tape) - 1 if credit_step is None else credit_step
    for t in range(last, -1, -1):
        g_s = None
        for k in reversed(range(n)):
            st, rec = net.stages[k], tape[t][k]
            syn = net.layers[st.synapse]
            if not st.spiking:
                d = delta[t].reshape(rec.v.shape)
                lam = d if lam_next[k] is None else d + lam_next[k]
            else:
                lam_s = np.zeros_like(rec.v) if g_s is None else g_s
                if not detach_reset and lam_next[k] is not None:
                    lam_s = lam_s - syn.v_th * lam_next[k]
                lam = lam_s * surrogate_grad(rec.v, syn.v_th, net.surrogate)
                if lam_next[k] is not None:
                    lam = lam + lam_next[k]
            lam_next[k] = lam
            scale = net.current_scale(st)
            if st.spiking:
                _add(grads, f"{st.synapse}.alpha", -np.sum(lam * rec.pre) * scale / syn.alpha)
            g_pre = lam * scale
            if st.norm is not None:
                nl = net.layers[st.norm]
                _add(grads, f"{st.norm}.beta", ops.reduce_channel(g_pre))
                _add(grads, f"{st.norm}.gamma", ops.reduce_channel(g_pre * rec.zhat))
                g_z = g_pre * ops.channel_view(nl.gamma / nl.std, lam.ndim)
            else:
                g_z = g_pre
            _add(grads, f"{st.synapse}.bias", ops.reduce_channel(g_z))
            _add(grads, f"{st.synapse}.weight", syn.weight_grad(g_z, rec.inp))
            if k > 0 and (credit_step is None or t == credit_step):
                g_s = syn.synapse_transpose(g_z, st.in_shape)
            else:
                g_s = None


def bptt_grad(
    net: SpikingNetwork,
    x: np.ndarray,
    T: int,
    loss_fn: Callable[[np.ndarray], tuple[float, np.ndarray]] | None = None,
    *,
    detach_reset: bool = False,
    per_step: bool = False,
    subset: Iterable[str] | None = None,
    probe: MemoryProbe | None = None,
) -> GradientSet:
    """Backpropagation through the unrolled ``T``-step run.

    ``loss_fn`` maps output potentials (T, B, C) to (loss, dloss/dpotentials);
    it defaults to the mean instantaneous entropy at temperature 1.

    ``detach_reset`` drops the reset path (dv[t+1]/ds[t]). ``per_step``
    backpropagates each step's loss separately and lets it reach lower layers
    only through spikes emitted at that same step; earlier presynaptic
    activity then acts as a constant input. Requires an additive loss.
    """
    loss_fn = loss_fn or sequence_loss(InstantEntropy(1.0))
    tape = record_tape(net, x, T, probe)
    B = tape[0][-1].v.shape[0]
    potentials = np.stack([step[-1].v.reshape(B, -1) for step in tape])
    loss, delta = loss_fn(potentials)
    if not np.isfinite(loss):
        raise NumericError("non-finite loss")
    grads = _zero_grads(net, subset)
    if per_step:
        for t0 in range(T):
            masked = np.zeros_like(delta)
            masked[t0] = delta[t0]
            _backward(net, tape, masked, grads, detach_reset, t0)
    else:
        _backward(net, tape, delta, grads, detach_reset, None)
    for pid, g in grads.items():
        check_finite(g, f"gradient {pid}")
    return grads


def bptt_pass(net, x, T, loss: StepLoss, subset=None, probe=None) -> PassResult:
    """Full BPTT on the mean instantaneous loss, packaged like :func:`online_pass`."""
    tape = record_tape(net, x, T, probe)
    B = x.shape[0]
    potentials = np.stack([step[-1].v.reshape(B, -1) for step in tape])
    value, delta = sequence_loss(loss)(potentials)
    if not np.isfinite(value):
        raise NumericError("non-finite loss")
    grads = _zero_grads(net, subset)
    _backward(net, tape, delta, grads, False, None)
    for pid, g in grads.items():
        check_finite(g, f"gradient {pid}")
    counts = [sum(step[k].s for step in tape) for k, st in enumerate(net.stages) if st.spiking]
    return PassResult(grads, value, potentials.mean(axis=0), counts)


# --------------------------------------------------------------------------
# parameter updates


def update_clip(alpha: float, grad: float, lr: float, epsilon: float, alpha_init: float | None = None) -> float:
    """One SGD step on loss + epsilon * alpha**2, floored to stay positive."""
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    floor = ALPHA_FLOOR * (alpha if alpha_init is None else alpha_init)
    return max(alpha - lr * (grad + 2.0 * epsilon * alpha), floor)


def select_adapt_params(net: SpikingNetwork, subset: str = "affine+clip") -> list[str]:
    if subset not in SUBSETS:
        raise ValueError(f"unknown parameter subset {subset!r}")
    ids = net.parameter_ids()
    if subset == "all":
        return ids
    keep = {"affine+clip": ("gamma", "beta", "alpha"), "affine": ("gamma", "beta"), "clip": ("alpha",)}[subset]
    return [pid for pid in ids if pid.split(".")[1] in keep]


def bn_refresh(net: SpikingNetwork, x: np.ndarray, T: int, var_floor: float = VAR_FLOOR) -> SpikingNetwork:
    """Replace normalization statistics with those of this batch, in place.

    Statistics are pooled over batch, time and spatial positions of each
    layer's per-step input current. Layers are refreshed in order, so every
    layer sees spikes produced under the already refreshed layers below it.
    """
    x = check_input(net, x, T)
    B = x.shape[0]
    if B < 2:
        raise ValueError("statistics refresh needs a batch of at least 2 samples")
    seq = np.broadcast_to(x, (T,) + x.shape)
    for st in net.stages:
        syn = net.layers[st.synapse]
        z = syn.synapse(seq.reshape((T * B,) + st.in_shape))
        if st.norm is not None:
            nl = net.layers[st.norm]
            count = z.size / z.shape[1]
            mu = ops.reduce_channel(z) / count
            var = ops.reduce_channel((z - ops.channel_view(mu, z.ndim)) ** 2) / count
            nl.mean = mu
            nl.std = np.sqrt(np.maximum(var, var_floor))
        if not st.spiking:
            break
        pre = net.layers[st.norm].normalize(z)[1] if st.norm is not None else z
        pre = pre.reshape((T, B) + st.out_shape)
        state = IfLayerState.zeros((B,) + st.out_shape)
        spikes = np.empty_like(pre)
        for t in range(T):
            state, spikes[t] = if_step(state, pre[t], syn.v_th, net.current_scale(st), net.surrogate)
        seq = spikes
    return net


def apply_gradients(net: SpikingNetwork, grads: GradientSet, lr: float, epsilon: float) -> None:
    for pid, g in grads.items():
        if pid.endswith(".alpha"):
            layer = net.layers[int(pid.split(".")[0])]
            layer.alpha = update_clip(layer.alpha, float(g), lr, epsilon, layer.alpha_init)
        else:
            net.set_param(pid, net.get_param(pid) - lr * g)


# --------------------------------------------------------------------------
# streaming adaptation


@dataclass
class BatchMetrics:
    batch: int
    entropy: float
    accuracy: float | None
    firing_rates: list[float]
    alphas: list[float]
    synops: int
    wall_ms: float
    predictions: np.ndarray = field(repr=False, default=None)


def adapt_batch(
    net: SpikingNetwork,
    x: np.ndarray,
    cfg: AdaptConfig,
    labels: np.ndarray | None = None,
    loss: StepLoss | None = None,
    batch_index: int = 0,
) -> tuple[np.ndarray, BatchMetrics, SpikingNetwork]:
    """Predict on one batch and adapt on it in the same pass.

    Returns predictions (B, C) of the network as it stood for this batch,
    the batch metrics and the updated network. The input network is never
    modified; on error nothing is returned.
    """
    from .energy import synops_from_counts

    start = time.perf_counter()
    x = check_input(net, x, cfg.timesteps)
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    loss = loss or InstantEntropy(cfg.temperature)
    new = net.copy()
    T = cfg.timesteps
    if cfg.refresh_stats:
        bn_refresh(new, x, T)
    subset = select_adapt_params(new, cfg.param_subset)
    if cfg.mode == "bn-stats-only":
        trace = forward(new, x, T)
        B = x.shape[0]
        total = sum(loss.step(trace.potentials[t], t + 1)[0] for t in range(T))
        result = PassResult({}, total / (B * T), trace.prediction(), trace.spike_counts)
    elif cfg.mode == "online":
        result = online_pass(new, x, T, loss, subset)
    else:
        result = bptt_pass(new, x, T, loss, subset)
    check_finite(result.prediction, "predictions")
    if cfg.lr > 0 and result.grads:
        apply_gradients(new, result.grads, cfg.lr, cfg.epsilon)
        for pid in subset:
            check_finite(new.get_param(pid), pid)
    acc = None
    if labels is not None:
        acc = float(np.mean(result.prediction.argmax(axis=1) == np.asarray(labels)))
    metrics = BatchMetrics(
        batch=batch_index,
        entropy=result.loss,
        accuracy=acc,
        firing_rates=[float(c.mean() / T) for c in result.spike_counts],
        alphas=[float(new.layers[st.synapse].alpha) for st in new.spiking_stages],
        synops=synops_from_counts(new, result.spike_counts),
        wall_ms=(time.perf_counter() - start) * 1e3,
        predictions=result.prediction,
    )
    return result.prediction, metrics, new


def adapt_stream(
    net: SpikingNetwork,
    batches: Iterable[tuple[np.ndarray, np.ndarray | None]],
    cfg: AdaptConfig,
    loss: StepLoss | None = None,
    on_batch: Callable[[BatchMetrics], None] | None = None,
) -> tuple[SpikingNetwork, list[BatchMetrics]]:
    """Adapt over an ordered stream, one update per batch."""
    history = []
    for i, (x, y) in enumerate(batches):
        _, metrics, net = adapt_batch(net, x, cfg, y, loss, batch_index=i)
        history.append(metrics)
        if on_batch is not None:
            on_batch(metrics)
    return net, history


def adapt_epochs(
    net: SpikingNetwork,
    make_batches: Callable[[], Iterable[tuple[np.ndarray, np.ndarray | None]]],
    cfg: AdaptConfig,
    epochs: int,
    loss: StepLoss | None = None,
) -> tuple[SpikingNetwork, list[list[BatchMetrics]]]:
    """Repeat the stream ``epochs`` times, carrying the network across passes.

    Only for ablations: deployment sees each batch once.
    """
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    per_epoch = []
    for _ in range(epochs):
        net, hist = adapt_stream(net, make_batches(), cfg, loss)
        per_epoch.append(hist)
    return net, per_epoch
