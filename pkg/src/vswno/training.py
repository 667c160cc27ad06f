"""Optimization, losses, spike metrics, the energy model and the train loop.

The task loss is the batch-mean relative L2 error (the same quantity the
evaluation metric reports, scaled to a fraction).  The composite objective
adds a sparsity term: alpha * L_b + gamma * S_tilde, where S_tilde sums each
site's spike fraction.  During training the sparsity term is assembled from
the spike tensors themselves, so it backpropagates through the fast-sigmoid
surrogate; reported metrics use the hard counts (the two agree in value,
they differ only in gradient).

Energy accounting follows the synaptic-operation cost model: an artificial
neuron costs 12 energy units per target node, a binary-spiking neuron
7 * N_s (no multiplications), a variable-spiking neuron 12 * N_s.  The
break-even average spike counts are therefore 12/7 and 1.0.
"""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import operator as O
from . import tensor as T

__all__ = [
    "AdamState",
    "adam_step",
    "relative_l2_per_sample",
    "relative_l2_percent",
    "batch_loss",
    "SpikeReport",
    "spike_activity",
    "soft_spike_fraction",
    "spiking_loss",
    "EnergyEstimate",
    "energy_estimate",
    "LIF_BREAK_EVEN",
    "VSN_BREAK_EVEN",
    "TrainingData",
    "load_dataset",
    "Schedule",
    "TrainLog",
    "TrainingDivergedError",
    "train",
    "evaluate",
]

LIF_BREAK_EVEN = 12.0 / 7.0
VSN_BREAK_EVEN = 1.0


class TrainingDivergedError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    params: list  # Tensors, order fixed
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def __post_init__(self):
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]


def adam_step(state, params=None, grads=None):
    """Coupled-decay Adam: g <- g + wd*p, then the bias-corrected update."""
    params = state.params if params is None else params
    if grads is None:
        grads = [p.grad for p in params]
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            raise ValueError(f"parameter {i} has no gradient; run backward first")
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.data.shape}")
        if state.weight_decay:
            g = g + state.weight_decay * p.data
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        m_hat = state.m[i] / c1
        v_hat = state.v[i] / c2
        p.data = p.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


# ---------------------------------------------------------------------------
# losses and metrics


def relative_l2_per_sample(pred, truth):
    """100 * ||pred - truth|| / ||truth|| per sample (first axis indexes samples)."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs truth {truth.shape}")
    p = pred.reshape(pred.shape[0], -1)
    t = truth.reshape(truth.shape[0], -1)
    norms = np.linalg.norm(t, axis=1)
    for i in np.nonzero(norms == 0.0)[0]:
        raise ValueError(f"sample {i}: reference field has zero norm")
    return 100.0 * np.linalg.norm(p - t, axis=1) / norms


def relative_l2_percent(pred, truth):
    return float(np.mean(relative_l2_per_sample(pred, truth)))


def batch_loss(pred, truth):
    """Differentiable batch-mean relative L2 (fraction, not percent)."""
    b = pred.data.shape[0]
    t = np.asarray(truth, dtype=np.float64).reshape(b, -1)
    norms = np.linalg.norm(t, axis=1)
    for i in np.nonzero(norms == 0.0)[0]:
        raise ValueError(f"sample {i}: reference field has zero norm")
    flat = T.reshape(pred, (b, t.shape[1]))
    diff = T.sub(flat, T.Tensor(t))
    per = T.reduce_sum(T.mul(diff, diff), axis=1)
    dist = T.sqrt(per)
    return T.reduce_mean(T.mul(dist, T.Tensor(1.0 / norms)))


@dataclass
class SpikeReport:
    """Per-site spike percentages plus the aggregate S_tilde = sum(S_i)/100."""

    s_per_site: list
    counts: list  # (spikes, possible) per site
    s_tilde: float
    soft_s_tilde: T.Tensor | None = None


def spike_activity(site_counters, soft_s_tilde=None):
    """Percentages from running counters: S = 100 * spikes / possible slots."""
    s = []
    for i, (spikes, possible) in enumerate(site_counters):
        if possible <= 0:
            raise ValueError(f"site {i + 1}: no possible spike slots recorded")
        s.append(100.0 * spikes / possible)
    return SpikeReport(
        s_per_site=s,
        counts=[tuple(c) for c in site_counters],
        s_tilde=sum(s) / 100.0,
        soft_s_tilde=soft_s_tilde,
    )


def soft_spike_fraction(model):
    """Differentiable S_tilde: per site, mean over every spike slot of the pass."""
    total = None
    for layer in model.neurons:
        if layer.kind == "artificial" or not layer.soft_spikes:
            continue
        possible = sum(s.data.size for s in layer.soft_spikes)
        acc = None
        for s in layer.soft_spikes:
            term = T.reduce_sum(s)
            acc = term if acc is None else T.add(acc, term)
        site = T.mul(acc, T.Tensor(1.0 / possible))
        total = site if total is None else T.add(total, site)
    return total


def spiking_loss(l_b, report, alpha, gamma):
    """alpha * L_b + gamma * S_tilde.

    Accepts a tensor loss (training path: the sparsity term uses the soft,
    surrogate-carrying spike counts when the report holds them) or a plain
    float (reporting arithmetic).
    """
    if alpha < 0 or gamma < 0:
        raise ValueError(f"alpha and gamma must be nonnegative, got {alpha}, {gamma}")
    if isinstance(l_b, T.Tensor):
        out = T.mul(l_b, T.Tensor(alpha))
        if gamma != 0.0 and report is not None:
            s_term = report.soft_s_tilde if report.soft_s_tilde is not None else T.Tensor(report.s_tilde)
            out = T.add(out, T.mul(s_term, T.Tensor(gamma)))
        return out
    s_tilde = report.s_tilde if report is not None else 0.0
    return alpha * float(l_b) + gamma * s_tilde


# ---------------------------------------------------------------------------
# energy model


@dataclass
class EnergyEstimate:
    """Per-site costs in units of the elementary addition energy."""

    n_s: list
    n_mt: list
    artificial: list
    lif: list
    vsn: list
    lif_break_even: float = LIF_BREAK_EVEN
    vsn_break_even: float = VSN_BREAK_EVEN

    def totals(self):
        return {
            "artificial": sum(self.artificial),
            "lif": sum(self.lif),
            "vsn": sum(self.vsn),
        }


def energy_estimate(n_s_per_site, n_mt_per_site):
    """Closed-form per-neuron costs: 12*N_mt, 7*N_mt*N_s, 12*N_mt*N_s."""
    if len(n_s_per_site) != len(n_mt_per_site):
        raise ValueError("n_s and n_mt lists must align site by site")
    n_s = [float(x) for x in n_s_per_site]
    n_mt = [float(x) for x in n_mt_per_site]
    return EnergyEstimate(
        n_s=n_s,
        n_mt=n_mt,
        artificial=[12.0 * m for m in n_mt],
        lif=[7.0 * m * s for m, s in zip(n_mt, n_s)],
        vsn=[12.0 * m * s for m, s in zip(n_mt, n_s)],
    )


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainingData:
    """In-memory dataset: float64 splits plus the recorded encoding range."""

    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    grid: tuple
    input_range: tuple
    metadata: dict
    config_echo: dict = field(default_factory=dict)


def load_dataset(path):
    from . import data as D

    arrays, metadata = D.dataset_read(path)
    required = ("train_x", "train_y", "test_x", "test_y")
    missing = [k for k in required if k not in arrays]
    if missing:
        raise D.ContainerError(f"{path}: dataset is missing arrays {missing}")
    grid = tuple(metadata.get("grid") or arrays["train_x"].shape[1:])
    rng = metadata.get("input_range")
    if rng is None:
        rng = [float(arrays["train_x"].min()), float(arrays["train_x"].max())]
    return TrainingData(
        train_x=arrays["train_x"].astype(np.float64),
        train_y=arrays["train_y"].astype(np.float64),
        test_x=arrays["test_x"].astype(np.float64),
        test_y=arrays["test_y"].astype(np.float64),
        grid=grid,
        input_range=(float(rng[0]), float(rng[1])),
        metadata=metadata,
        config_echo={"grid": list(grid), "problem": metadata.get("problem", "unknown")},
    )


@dataclass(frozen=True)
class Schedule:
    epochs: int
    batch_size: int
    lr: float = 1e-3
    weight_decay: float = 1e-4
    alpha: float = 1.0
    gamma: float = 0.0
    sts: int = 1
    seed: int = 0
    encoding: str = "direct"

    def validate(self):
        if self.epochs < 0 or self.batch_size < 1 or self.sts < 1:
            raise ValueError(f"invalid schedule: {self}")
        if self.lr <= 0 or self.weight_decay < 0 or self.alpha < 0 or self.gamma < 0:
            raise ValueError(f"invalid schedule: {self}")
        if self.encoding not in ("direct", "rate", "triangular"):
            raise ValueError(f"unknown encoding {self.encoding!r}")


@dataclass
class TrainLog:
    site_count: int
    config_echo: dict
    rows: list = field(default_factory=list)

    def header(self):
        sites = [f"S_{i + 1}" for i in range(self.site_count)]
        return ["epoch", "train_loss", "test_eps", *sites, "wall_seconds"]

    def to_csv_text(self):
        buf = io.StringIO()
        buf.write("# config: " + json.dumps(self.config_echo, sort_keys=True) + "\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.header())
        for row in self.rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row])
        return buf.getvalue()

    def save(self, path):
        from . import data as D

        D.write_atomic(path, self.to_csv_text().encode("utf-8"))

    @staticmethod
    def load(path):
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.read().splitlines()
        if not lines or not lines[0].startswith("# config: "):
            raise ValueError(f"{path}: line 1: missing config echo header")
        try:
            config_echo = json.loads(lines[0][len("# config: "):])
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: line 1: bad config JSON: {exc}") from exc
        reader = csv.reader(lines[1:])
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: line 2: missing column header") from None
        sites = [c for c in header if c.startswith("S_")]
        log = TrainLog(site_count=len(sites), config_echo=config_echo)
        if header != log.header():
            raise ValueError(f"{path}: line 2: unexpected columns {header}")
        for lineno, row in enumerate(reader, start=3):
            if not row:
                continue
            if len(row) != len(header):
                raise ValueError(f"{path}: line {lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                log.rows.append([int(row[0]), *[float(v) for v in row[1:]]])
            except ValueError:
                raise ValueError(f"{path}: line {lineno}: non-numeric field") from None
        return log


def _prepare_inputs(x):
    # raw samples (S, grid...) -> channels-last with coordinates appended
    arr = np.asarray(x, dtype=np.float64)[..., None]
    return O.append_grid(arr, grid_rank=arr.ndim - 2)


def evaluate(model, x, y, schedule, chunk=100, value_range=None, base_seed=0, workers=1):
    """Forward the whole set without recording; returns metrics and counters.

    Spike counters are accumulated across chunks; encodings draw their
    deterministic noise keyed by (base_seed, chunk offset).  With workers > 1
    the chunks run on a thread pool against per-thread model clones, and the
    per-chunk results are reduced in a fixed order, so the outcome is
    bit-identical for any worker count.
    """
    inputs = _prepare_inputs(x)
    n = inputs.shape[0]
    preds = np.empty(y.shape, dtype=np.float64)
    totals = [[0.0, 0] for _ in model.neurons]
    starts = list(range(0, n, chunk))

    def run_chunk(start, chunk_model):
        stop = min(start + chunk, n)
        with T.no_grad():
            out = O.forward_multi_sts(
                chunk_model, T.Tensor(inputs[start:stop]), sts=schedule.sts,
                encoding=schedule.encoding, seed=(base_seed, start),
                value_range=value_range,
            )
        return out.data.reshape(y[start:stop].shape), chunk_model.spike_counters()

    if workers > 1 and len(starts) > 1:
        from concurrent.futures import ThreadPoolExecutor

        # one clone per chunk: clones share parameters by reference, so this
        # costs nothing and keeps every task's neuron state private
        with ThreadPoolExecutor(max_workers=min(workers, len(starts))) as pool:
            futures = [pool.submit(run_chunk, s, O.clone_for_eval(model)) for s in starts]
            results = [f.result() for f in futures]
    else:
        results = [run_chunk(s, model) for s in starts]

    for start, (chunk_pred, counters) in zip(starts, results):
        stop = min(start + chunk, n)
        preds[start:stop] = chunk_pred
        for i, (spikes, possible) in enumerate(counters):
            totals[i][0] += spikes
            totals[i][1] += possible
    eps_samples = relative_l2_per_sample(preds, y)
    if model.cfg.neuron_kind == "artificial":
        report = SpikeReport(s_per_site=[0.0] * len(model.neurons),
                             counts=[(0.0, 0)] * len(model.neurons), s_tilde=0.0)
    else:
        report = spike_activity(totals)
    l_b = float(np.mean(eps_samples)) / 100.0
    return {
        "eps": float(np.mean(eps_samples)),
        "eps_std": float(np.std(eps_samples)),
        "eps_samples": eps_samples,
        "preds": preds,
        "report": report,
        "l_b": l_b,
        "loss": spiking_loss(l_b, report, schedule.alpha, schedule.gamma),
    }


def train(model, dataset, schedule, progress=None):
    """Mini-batch spike-train training with the composite objective.

    ``dataset`` needs train_x/train_y/test_x/test_y arrays plus the recorded
    input range.  Each epoch ends with full evaluation passes on both splits;
    the logged train loss is that post-epoch value, so it is reproducible
    from the saved checkpoint.  Raises :class:`TrainingDivergedError` with
    epoch/batch context if the loss stops being finite.
    """
    schedule.validate()
    params = [p for _, p in model.parameters()]
    opt = AdamState(params, lr=schedule.lr, weight_decay=schedule.weight_decay)
    shuffle_rng = np.random.Generator(np.random.Philox(np.random.SeedSequence((schedule.seed, 101))))
    value_range = tuple(dataset.input_range)

    train_inputs = _prepare_inputs(dataset.train_x)
    train_y = np.asarray(dataset.train_y, dtype=np.float64)
    n_train = train_inputs.shape[0]

    log = TrainLog(site_count=len(model.neurons), config_echo=dict(dataset.config_echo))
    t0 = time.perf_counter()
    for epoch in range(1, schedule.epochs + 1):
        order = shuffle_rng.permutation(n_train)
        for b_idx, start in enumerate(range(0, n_train, schedule.batch_size)):
            sel = order[start:start + schedule.batch_size]
            xb, yb = train_inputs[sel], train_y[sel]
            for p in params:
                # start from zeros: parameters that never reach this batch's
                # tape (leakage at a single spike step) legitimately have
                # zero gradient and still take the weight-decay update
                p.zero_grad()
            with T.Tape() as tape:
                pred = O.forward_multi_sts(
                    model, T.Tensor(xb), sts=schedule.sts, encoding=schedule.encoding,
                    seed=(schedule.seed, epoch, b_idx), value_range=value_range,
                )
                l_b = batch_loss(pred, yb)
                soft = soft_spike_fraction(model) if schedule.gamma > 0 else None
                report = SpikeReport([], [], 0.0, soft_s_tilde=soft) if soft is not None else None
                loss = spiking_loss(l_b, report, schedule.alpha, schedule.gamma)
                value = loss.item()
                if not np.isfinite(value):
                    raise TrainingDivergedError(
                        f"non-finite loss at epoch {epoch}, batch {b_idx + 1}"
                    )
                T.backward(loss, tape)
            adam_step(opt)
        train_eval = evaluate(model, dataset.train_x, dataset.train_y, schedule,
                              value_range=value_range, base_seed=schedule.seed)
        test_eval = evaluate(model, dataset.test_x, dataset.test_y, schedule,
                             value_range=value_range, base_seed=schedule.seed + 1)
        row = [epoch, float(train_eval["loss"]), test_eval["eps"],
               *test_eval["report"].s_per_site, time.perf_counter() - t0]
        log.rows.append(row)
        if progress is not None:
            progress(epoch, row)
    return log
