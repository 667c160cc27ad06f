"""Artificial, leaky integrate-and-fire, and variable-spiking neuron layers.

A layer owns per-element leakage and threshold tensors (optionally trained),
a membrane state that persists across the spike time steps of one forward
pass, and running spike counters.  The firing decision goes through
:func:`vswno.tensor.spike_threshold`, so gradients follow the fast-sigmoid
surrogate; the membrane reset multiplies by a detached (1 - spike) factor so
no gradient flows through the reset itself.

Also provides the three input encodings: direct repetition, Bernoulli rate
coding, and prefix-of-ones (triangular) coding.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T

__all__ = [
    "KINDS",
    "SIGMAS",
    "SpikeCounter",
    "NeuronLayer",
    "SpikeTrain",
    "make_layer",
    "lif_step",
    "vsn_step",
    "artificial_apply",
    "reset_state",
    "encode_direct",
    "encode_rate",
    "encode_triangular",
]

KINDS = ("artificial", "lif", "vsn")
SIGMAS = ("identity", "gelu")

DEFAULT_SLOPE = 25.0


def _sigma_fn(name):
    if name == "identity":
        return lambda t: t
    if name == "gelu":
        return T.gelu
    raise ValueError(f"unknown activation {name!r}; choose from {SIGMAS}")


@dataclass
class SpikeCounter:
    spikes: float = 0.0
    possible: int = 0

    def clear(self):
        self.spikes = 0.0
        self.possible = 0


@dataclass
class NeuronLayer:
    """One activation site; ``feature_shape`` excludes any leading batch axis."""

    kind: str
    sigma: str
    feature_shape: tuple
    beta: T.Tensor | None = None
    threshold: T.Tensor | None = None
    trainable: bool = False
    slope: float = DEFAULT_SLOPE
    membrane: T.Tensor | None = None
    spike_counter: SpikeCounter = field(default_factory=SpikeCounter)
    soft_spikes: list = field(default_factory=list)

    def reset_state(self):
        self.membrane = None
        self.spike_counter.clear()
        self.soft_spikes.clear()

    def step(self, z):
        if self.kind == "artificial":
            return artificial_apply(self, z)
        if self.kind == "lif":
            return lif_step(self, z)
        if self.kind == "vsn":
            return vsn_step(self, z)
        raise ValueError(f"unknown neuron kind {self.kind!r}")

    def _align(self, param, z):
        # beta/threshold live on the feature shape; batched inputs get an
        # explicit leading expansion so gradients sum back per element
        if z.data.shape == self.feature_shape:
            return param
        if z.data.shape[1:] == self.feature_shape:
            return T.expand_leading(param, z.data.shape[0])
        raise ValueError(
            f"input shape {z.data.shape} does not match neuron layer "
            f"feature shape {self.feature_shape}"
        )

    def _membrane_update(self, z):
        threshold = self._align(self.threshold, z)
        if self.membrane is None:
            # first step after reset: M = beta*0 + z, so the leakage term
            # (and its zero gradient) can be skipped outright
            m = z
        else:
            m_prev = self.membrane
            if m_prev.data.shape != z.data.shape:
                raise ValueError(
                    f"membrane shape {m_prev.data.shape} does not match input {z.data.shape}; "
                    "call reset_state between differently shaped passes"
                )
            m = T.add(T.mul(self._align(self.beta, z), m_prev), z)
        spike = T.spike_threshold(T.sub(m, threshold), self.slope)
        # reset-to-zero where fired; the spike indicator is detached here so
        # the reset contributes no gradient path
        self.membrane = T.mul(m, T.Tensor(1.0 - spike.data))
        self.spike_counter.spikes += float(spike.data.sum())
        self.spike_counter.possible += spike.data.size
        self.soft_spikes.append(spike)
        return spike


def make_layer(kind, feature_shape, sigma="gelu", trainable=True, rng=None, slope=DEFAULT_SLOPE):
    """Create a site; leakage/threshold are drawn per element from U[0, 1]."""
    if kind not in KINDS:
        raise ValueError(f"unknown neuron kind {kind!r}; choose from {KINDS}")
    _sigma_fn(sigma)  # validate early
    layer = NeuronLayer(kind=kind, sigma=sigma, feature_shape=tuple(feature_shape), slope=slope)
    if kind != "artificial":
        if rng is None:
            rng = np.random.default_rng(0)
        layer.beta = T.Tensor(rng.uniform(0.0, 1.0, feature_shape), requires_grad=trainable)
        layer.threshold = T.Tensor(rng.uniform(0.0, 1.0, feature_shape), requires_grad=trainable)
        layer.trainable = trainable
    return layer


def lif_step(layer, z):
    """Leaky integrate-and-fire: M <- beta*M + z, emit 1 where M >= T, reset."""
    if layer.kind != "lif":
        raise ValueError(f"lif_step on a {layer.kind!r} layer")
    return layer._membrane_update(z)


def vsn_step(layer, z):
    """Variable spiking: LIF gating, but the emitted value is sigma(z * spike).

    sigma(0) = 0 holds for both supported activations, so elements whose
    threshold test fails transmit exactly zero.
    """
    if layer.kind != "vsn":
        raise ValueError(f"vsn_step on a {layer.kind!r} layer")
    spike = layer._membrane_update(z)
    return _sigma_fn(layer.sigma)(T.mul(z, spike))


def artificial_apply(layer, z):
    if layer.kind != "artificial":
        raise ValueError(f"artificial_apply on a {layer.kind!r} layer")
    return _sigma_fn(layer.sigma)(z)


def reset_state(layer):
    layer.reset_state()


# ---------------------------------------------------------------------------
# input encodings


@dataclass
class SpikeTrain:
    """Input values replicated/encoded across spike time steps (leading axis)."""

    values: T.Tensor  # shape (sts, ...) constant
    sts: int

    def step(self, t):
        return T.Tensor(self.values.data[t])


def _as_array(x):
    return x.data if isinstance(x, T.Tensor) else np.asarray(x, dtype=np.float64)


def _normalize(x, value_range):
    lo, hi = value_range
    if hi <= lo:
        raise ValueError(f"invalid encoding range ({lo}, {hi}): hi must exceed lo")
    return np.clip((x - lo) / (hi - lo), 0.0, 1.0)


def encode_direct(x, sts):
    """Repeat the input verbatim at every spike time step."""
    if sts < 1:
        raise ValueError(f"sts must be >= 1, got {sts}")
    arr = _as_array(x)
    vals = np.broadcast_to(arr, (sts,) + arr.shape).copy()
    return SpikeTrain(values=T.Tensor(vals), sts=sts)


def encode_rate(x, sts, seed, value_range):
    """Bernoulli rate coding: spike probability tracks the normalized value.

    Deterministic per (seed, element, step): a counter-based generator keyed
    by the seed produces the whole (sts, ...) uniform block in one shot.
    """
    if sts < 1:
        raise ValueError(f"sts must be >= 1, got {sts}")
    arr = _as_array(x)
    p = _normalize(arr, value_range)
    key = np.random.SeedSequence(seed).generate_state(2, dtype=np.uint64)
    gen = np.random.Generator(np.random.Philox(key=key))
    u = gen.random((sts,) + arr.shape)
    return SpikeTrain(values=T.Tensor((u < p).astype(np.float64)), sts=sts)


def encode_triangular(x, sts, value_range):
    """Prefix-of-ones coding: k = round(normalized * sts) leading spikes."""
    if sts < 1:
        raise ValueError(f"sts must be >= 1, got {sts}")
    arr = _as_array(x)
    k = np.round(_normalize(arr, value_range) * sts)
    steps = np.arange(sts, dtype=np.float64).reshape((sts,) + (1,) * arr.ndim)
    return SpikeTrain(values=T.Tensor((steps < k).astype(np.float64)), sts=sts)
