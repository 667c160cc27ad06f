"""The wavelet neural operator with configurable activation sites.

The network is: an uplift layer H (pointwise linear d_a -> d_u), L update
blocks, a two-layer projection G (d_u -> g_hidden -> 1), and one activation
site after each of blocks 1..L-1 plus one after the first projection layer
(the final block's output stays raw).  Each update block evaluates

    u  ->  idwt( R * dwt(u) ) + W u

where the learnable kernel R mixes channels on the retained wavelet bands
(the deepest approximation band plus the deepest detail band(s)); all finer
detail bands are dropped before reconstruction, so the kernel path is a
multiscale smoother while the size-one convolution W carries fine structure.

Activation sites can hold artificial, LIF or variable-spiking layers; the
multi-step forward follows the spike-train protocol: run the network up to
the penultimate projection once per spike time step, average those
penultimate signals, and apply the last projection layer once to the mean.

Inputs may carry a leading batch axis; grid coordinates are appended as
channels by :func:`append_grid`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import data as D
from . import neurons as N
from . import tensor as T
from . import wavelet as W

__all__ = [
    "WnoConfig",
    "WnoModel",
    "StsAccumulator",
    "append_grid",
    "update_block",
    "forward_single",
    "forward_multi_sts",
    "build_model",
    "clone_for_eval",
    "save_model",
    "load_model",
    "CHECKPOINT_KIND",
]

CHECKPOINT_KIND = "wno-checkpoint"


@dataclass(frozen=True)
class WnoConfig:
    grid: tuple  # (n,) or (h, w)
    d_u: int = 64
    g_hidden: int = 128
    L: int = 4
    wavelet: str = "db6"
    m: int = 8
    wavelet_mode: str = "periodic"
    neuron_kind: str = "artificial"
    sigma: str = "gelu"
    sts: int = 1
    neuron_params_trainable: bool = True
    slope: float = 25.0

    @property
    def d_a(self):
        # function value plus one normalized coordinate per spatial axis
        return 1 + len(self.grid)

    def validate(self):
        if len(self.grid) not in (1, 2) or any(g < 2 for g in self.grid):
            raise ValueError(f"grid must be (n,) or (h, w) with extents >= 2, got {self.grid}")
        if self.L < 1 or self.m < 1 or self.sts < 1:
            raise ValueError(f"L, m and sts must all be >= 1 (got {self.L}, {self.m}, {self.sts})")
        if self.d_u < 1 or self.g_hidden < 1:
            raise ValueError(f"widths must be >= 1 (got d_u={self.d_u}, g_hidden={self.g_hidden})")
        if self.neuron_kind not in N.KINDS:
            raise ValueError(f"unknown neuron kind {self.neuron_kind!r}")
        if self.sigma not in N.SIGMAS:
            raise ValueError(f"unknown activation {self.sigma!r}")
        W.get_filter(self.wavelet)
        if self.wavelet_mode not in W.MODES:
            raise ValueError(f"unknown wavelet mode {self.wavelet_mode!r}")


@dataclass
class AxisProjection:
    """Composed cascade matrices for one axis of the grid.

    ``analyze_lo`` maps a signal straight to the level-m approximation band
    (the product of the per-level low-pass analysis matrices), ``analyze_hi``
    to the level-m detail band; the ``synth_*`` partners reconstruct from one
    band with every other band zero.  Composing the cascade once keeps the
    per-step work to a single small matmul per band.
    """

    analyze_lo: np.ndarray
    analyze_hi: np.ndarray
    synth_lo: np.ndarray
    synth_hi: np.ndarray
    out_len: int


def _axis_projection(n, cfg):
    p_lo = None
    q_lo = None
    cur = n
    for level in range(cfg.m):
        lm = W.level_matrices(cur, cfg.wavelet, cfg.wavelet_mode)
        if level == cfg.m - 1:
            p_hi = lm.a_hi if p_lo is None else lm.a_hi @ p_lo
            q_hi = lm.s_hi if q_lo is None else q_lo @ lm.s_hi
        p_lo = lm.a_lo if p_lo is None else lm.a_lo @ p_lo
        q_lo = lm.s_lo if q_lo is None else q_lo @ lm.s_lo
        cur = lm.out_len
    return AxisProjection(analyze_lo=p_lo, analyze_hi=p_hi,
                          synth_lo=q_lo, synth_hi=q_hi, out_len=cur)


@dataclass
class WaveletPlan:
    """Band projections for the configured grid, shared by all blocks."""

    axis0: AxisProjection
    axis1: AxisProjection | None  # None in 1D
    band_extent: int  # flattened size of each retained band


def _build_plan(cfg):
    try:
        if len(cfg.grid) == 1:
            ax = _axis_projection(cfg.grid[0], cfg)
            return WaveletPlan(ax, None, ax.out_len)
        ax0 = _axis_projection(cfg.grid[0], cfg)
        ax1 = _axis_projection(cfg.grid[1], cfg)
        return WaveletPlan(ax0, ax1, ax0.out_len * ax1.out_len)
    except W.WaveletError as exc:
        raise ValueError(f"grid {cfg.grid} incompatible with {cfg.m} decomposition levels: {exc}")


@dataclass
class UpdateBlock:
    kernels: dict  # band name -> Tensor (d_u, d_u, band_extent)
    w_mix: T.Tensor


@dataclass
class WnoModel:
    cfg: WnoConfig
    plan: WaveletPlan
    h_w: T.Tensor
    h_b: T.Tensor
    blocks: list
    g1_w: T.Tensor
    g1_b: T.Tensor
    g2_w: T.Tensor
    g2_b: T.Tensor
    neurons: list = field(default_factory=list)

    def parameters(self):
        """Ordered (name, tensor) pairs for every trainable parameter."""
        out = [("h.weight", self.h_w), ("h.bias", self.h_b)]
        for i, blk in enumerate(self.blocks):
            for band, k in blk.kernels.items():
                out.append((f"block{i}.kernel.{band}", k))
            out.append((f"block{i}.w_mix", blk.w_mix))
        out += [("g1.weight", self.g1_w), ("g1.bias", self.g1_b),
                ("g2.weight", self.g2_w), ("g2.bias", self.g2_b)]
        for i, layer in enumerate(self.neurons):
            if layer.kind != "artificial" and layer.trainable:
                out.append((f"site{i + 1}.beta", layer.beta))
                out.append((f"site{i + 1}.threshold", layer.threshold))
        return out

    def parameter_counts(self):
        """(core weight count, neuron parameter count); the core count depends
        only on the configuration, never on the neuron kind."""
        core = neuron = 0
        for name, p in self.parameters():
            if ".beta" in name or ".threshold" in name:
                neuron += p.size
            else:
                core += p.size
        return core, neuron

    def reset_state(self):
        for layer in self.neurons:
            layer.reset_state()

    def spike_counters(self):
        return [(layer.spike_counter.spikes, layer.spike_counter.possible)
                for layer in self.neurons]


def _band_names(cfg):
    return ("approx", "detail") if len(cfg.grid) == 1 else ("ll", "lh", "hl", "hh")


def build_model(cfg, seed=0):
    """Initialize a model; weights are fan-in-scaled uniform draws."""
    cfg.validate()
    plan = _build_plan(cfg)
    rng = np.random.default_rng(np.random.SeedSequence((seed, 17)))

    def uniform(shape, bound):
        return T.Tensor(rng.uniform(-bound, bound, shape), requires_grad=True)

    def linear_init(fan_in, fan_out):
        # Kaiming uniform, variance-preserving: bound sqrt(6/fan_in); biases
        # use the customary tighter 1/sqrt(fan_in)
        return (uniform((fan_in, fan_out), math.sqrt(6.0 / fan_in)),
                uniform((fan_out,), 1.0 / math.sqrt(fan_in)))

    d_a, d_u, g_h = cfg.d_a, cfg.d_u, cfg.g_hidden
    h_w, h_b = linear_init(d_a, d_u)
    k_bound = 1.0 / (d_u * math.sqrt(plan.band_extent))
    blocks = []
    for _ in range(cfg.L):
        kernels = {band: uniform((d_u, d_u, plan.band_extent), k_bound) for band in _band_names(cfg)}
        w_bound = math.sqrt(6.0 / d_u)
        blocks.append(UpdateBlock(kernels=kernels, w_mix=uniform((d_u, d_u), w_bound)))
    g1_w, g1_b = linear_init(d_u, g_h)
    g2_w, g2_b = linear_init(g_h, 1)

    neuron_rng = np.random.default_rng(np.random.SeedSequence((seed, 29)))
    neurons = []
    for i in range(cfg.L):
        feat = cfg.grid + ((d_u,) if i < cfg.L - 1 else (g_h,))
        neurons.append(
            N.make_layer(cfg.neuron_kind, feat, sigma=cfg.sigma,
                         trainable=cfg.neuron_params_trainable, rng=neuron_rng, slope=cfg.slope)
        )
    return WnoModel(cfg=cfg, plan=plan, h_w=h_w, h_b=h_b, blocks=blocks,
                    g1_w=g1_w, g1_b=g1_b, g2_w=g2_w, g2_b=g2_b, neurons=neurons)


# ---------------------------------------------------------------------------
# forward pieces


def append_grid(sample, grid_rank=None):
    """Append normalized [0, 1] coordinates, one channel per spatial axis.

    ``sample`` is (grid..., c) or, with ``grid_rank`` given, (batch, grid..., c).
    """
    arr = sample.data if isinstance(sample, T.Tensor) else np.asarray(sample, dtype=np.float64)
    rank = grid_rank if grid_rank is not None else arr.ndim - 1
    lead = arr.ndim - 1 - rank
    grid = arr.shape[lead:-1]
    coords = []
    for axis, extent in enumerate(grid):
        line = np.linspace(0.0, 1.0, extent)
        shape = [1] * arr.ndim
        shape[lead + axis] = extent
        coords.append(np.broadcast_to(line.reshape(shape), arr.shape[:-1] + (1,)))
    return np.concatenate([arr] + coords, axis=-1)


def _dense(x, weight, bias):
    # linear over the flattened grid: (..., c_in) -> (..., c_out)
    lead = x.data.shape[:-1]
    flat = T.reshape(x, (-1, x.data.shape[-1]))
    out = T.linear(flat, weight, bias)
    return T.reshape(out, lead + (weight.data.shape[1],))


def _swap_last(x):
    return T.moveaxis(x, -1, -2)


def update_block(u, block, model):
    """One kernel-plus-residual update; activation is applied by the caller."""
    cfg, plan = model.cfg, model.plan
    if u.data.shape[-1] != cfg.d_u or u.data.shape[-1 - len(cfg.grid):-1] != cfg.grid:
        raise ValueError(f"update_block: input shape {u.data.shape} does not match "
                         f"grid {cfg.grid} with {cfg.d_u} channels")
    if len(cfg.grid) == 1:
        ax = plan.axis0
        cur = _swap_last(u)  # (..., c, n)
        mixed_a = T.coeff_mix(T.apply_matrix(cur, ax.analyze_lo), block.kernels["approx"])
        mixed_d = T.coeff_mix(T.apply_matrix(cur, ax.analyze_hi), block.kernels["detail"])
        rec = T.add(T.apply_matrix(mixed_a, ax.synth_lo), T.apply_matrix(mixed_d, ax.synth_hi))
        kernel_path = _swap_last(rec)
    else:
        ax0, ax1 = plan.axis0, plan.axis1
        cur = T.moveaxis(u, -1, -3)  # (..., c, h, w)
        row = lambda x, m: _swap_last(T.apply_matrix(_swap_last(x), m))
        x_a = T.apply_matrix(cur, ax1.analyze_lo)
        x_d = T.apply_matrix(cur, ax1.analyze_hi)
        bands = {
            "ll": row(x_a, ax0.analyze_lo),
            "lh": row(x_d, ax0.analyze_lo),
            "hl": row(x_a, ax0.analyze_hi),
            "hh": row(x_d, ax0.analyze_hi),
        }
        th, tw = ax0.out_len, ax1.out_len
        lead = bands["ll"].data.shape[:-2]

        def mix(name):
            flat = T.reshape(bands[name], lead + (th * tw,))
            mixed = T.coeff_mix(flat, block.kernels[name])
            return T.reshape(mixed, lead + (th, tw))

        lo1 = T.add(row(mix("ll"), ax0.synth_lo), row(mix("hl"), ax0.synth_hi))
        hi1 = T.add(row(mix("lh"), ax0.synth_lo), row(mix("hh"), ax0.synth_hi))
        rec = T.add(T.apply_matrix(lo1, ax1.synth_lo), T.apply_matrix(hi1, ax1.synth_hi))
        kernel_path = T.moveaxis(rec, -3, -1)
    return T.add(kernel_path, T.pointwise_conv(u, block.w_mix))


def _check_input(model, x):
    cfg = model.cfg
    shape = x.data.shape
    rank = len(cfg.grid)
    ok = shape[-1] == cfg.d_a and shape[-1 - rank:-1] == cfg.grid and len(shape) in (rank + 1, rank + 2)
    if not ok:
        raise ValueError(
            f"input shape {shape} does not match grid {cfg.grid} with {cfg.d_a} channels"
        )


def _penultimate(model, x):
    """H, the update blocks with their activation sites, G1 and its site."""
    _check_input(model, x)
    u = _dense(x, model.h_w, model.h_b)
    for i, block in enumerate(model.blocks):
        u = update_block(u, block, model)
        if i < model.cfg.L - 1:
            u = model.neurons[i].step(u)
    g1 = _dense(u, model.g1_w, model.g1_b)
    return model.neurons[-1].step(g1)


class StsAccumulator:
    """Collects the penultimate signal at each spike time step.

    Holds exactly one entry per step before :meth:`mean` folds them; the mean
    stays on the tape, so gradients distribute back across every step.
    """

    def __init__(self, sts):
        self.sts = sts
        self.entries = []

    def append(self, e):
        self.entries.append(e)

    def mean(self):
        if len(self.entries) != self.sts:
            raise ValueError(f"expected {self.sts} entries, have {len(self.entries)}")
        acc = self.entries[0]
        for e in self.entries[1:]:
            acc = T.add(acc, e)
        return T.mul(acc, T.Tensor(1.0 / self.sts))


def forward_single(model, sample):
    """Full field prediction for one (possibly batched) coordinate-augmented sample."""
    model.reset_state()
    e = _penultimate(model, sample)
    return _dense(e, model.g2_w, model.g2_b)


def forward_multi_sts(model, sample, sts=None, encoding="direct", seed=0, value_range=None):
    """Spike-train forward: average the penultimate signal over the steps,
    then apply the last projection layer once to the mean.

    ``sample`` carries the appended coordinate channels.  Direct encoding
    repeats the whole input verbatim; the binary encodings (rate,
    triangular) encode the function-value channel against ``value_range``
    while the coordinate channels pass through unencoded at every step.
    """
    sts = sts if sts is not None else model.cfg.sts
    if sts < 1:
        raise ValueError(f"sts must be >= 1, got {sts}")
    arr = sample.data if isinstance(sample, T.Tensor) else np.asarray(sample, dtype=np.float64)
    n_coord = len(model.cfg.grid)
    if encoding == "direct":
        steps = N.encode_direct(arr, sts).values.data
    else:
        values, coords = arr[..., :-n_coord], arr[..., -n_coord:]
        if encoding == "rate":
            train = N.encode_rate(values, sts, seed=seed, value_range=value_range)
        elif encoding == "triangular":
            train = N.encode_triangular(values, sts, value_range=value_range)
        else:
            raise ValueError(f"unknown encoding {encoding!r}")
        reps = np.broadcast_to(coords, (sts,) + coords.shape)
        steps = np.concatenate([train.values.data, reps], axis=-1)
    model.reset_state()
    acc = StsAccumulator(sts)
    for t in range(sts):
        acc.append(_penultimate(model, T.Tensor(steps[t])))
    return _dense(acc.mean(), model.g2_w, model.g2_b)


def clone_for_eval(model):
    """Shallow copy for read-only evaluation on another thread.

    Parameter tensors are shared by reference; neuron layers get fresh state
    (membranes, counters) so concurrent passes never touch common buffers.
    """
    neurons = []
    for layer in model.neurons:
        twin = N.NeuronLayer(kind=layer.kind, sigma=layer.sigma,
                             feature_shape=layer.feature_shape, beta=layer.beta,
                             threshold=layer.threshold, trainable=layer.trainable,
                             slope=layer.slope)
        neurons.append(twin)
    return WnoModel(cfg=model.cfg, plan=model.plan, h_w=model.h_w, h_b=model.h_b,
                    blocks=model.blocks, g1_w=model.g1_w, g1_b=model.g1_b,
                    g2_w=model.g2_w, g2_b=model.g2_b, neurons=neurons)


# ---------------------------------------------------------------------------
# checkpoint serialization (container format)


def _cfg_to_dict(cfg):
    return {
        "grid": list(cfg.grid),
        "d_u": cfg.d_u,
        "g_hidden": cfg.g_hidden,
        "L": cfg.L,
        "wavelet": cfg.wavelet,
        "m": cfg.m,
        "wavelet_mode": cfg.wavelet_mode,
        "neuron_kind": cfg.neuron_kind,
        "sigma": cfg.sigma,
        "sts": cfg.sts,
        "neuron_params_trainable": cfg.neuron_params_trainable,
        "slope": cfg.slope,
    }


def _cfg_from_dict(d):
    d = dict(d)
    d["grid"] = tuple(d["grid"])
    return WnoConfig(**d)


def save_model(model, path, extra_metadata=None):
    arrays = {name: p.data for name, p in model.parameters()}
    # frozen neuron parameters still belong in the checkpoint
    for i, layer in enumerate(model.neurons):
        if layer.kind != "artificial" and not layer.trainable:
            arrays[f"site{i + 1}.beta"] = layer.beta.data
            arrays[f"site{i + 1}.threshold"] = layer.threshold.data
    metadata = {"kind": CHECKPOINT_KIND, "config": _cfg_to_dict(model.cfg)}
    if extra_metadata:
        metadata.update(extra_metadata)
    D.dataset_write(path, arrays, metadata)


def load_model(path):
    arrays, metadata = D.dataset_read(path)
    if metadata.get("kind") != CHECKPOINT_KIND:
        raise D.ContainerError(f"{path}: not a model checkpoint (kind={metadata.get('kind')!r})")
    cfg = _cfg_from_dict(metadata["config"])
    model = build_model(cfg, seed=0)
    wanted = {name for name, _ in model.parameters()}
    for i, layer in enumerate(model.neurons):
        if layer.kind != "artificial" and not layer.trainable:
            wanted.add(f"site{i + 1}.beta")
            wanted.add(f"site{i + 1}.threshold")
    if wanted != set(arrays):
        raise D.ContainerError(
            f"{path}: checkpoint arrays do not match the model "
            f"(missing {sorted(wanted - set(arrays))}, unexpected {sorted(set(arrays) - wanted)})"
        )
    lookup = dict(model.parameters())
    for i, layer in enumerate(model.neurons):
        if layer.kind != "artificial" and not layer.trainable:
            lookup[f"site{i + 1}.beta"] = layer.beta
            lookup[f"site{i + 1}.threshold"] = layer.threshold
    for name, arr in arrays.items():
        target = lookup[name]
        if target.data.shape != arr.shape:
            raise D.ContainerError(f"{path}: array {name!r} has shape {arr.shape}, "
                                   f"model expects {target.data.shape}")
        target.data = arr.astype(np.float64)
    return model, metadata
