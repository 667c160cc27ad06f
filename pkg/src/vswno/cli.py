"""Command-line workflow: generate, train, eval, report.

Configuration is file-first (JSON) with flag overrides; every run echoes its
fully resolved configuration into its outputs.  Unknown config keys are
rejected.  Exit codes: 0 success, 2 configuration problem, 3 missing input
file, 4 numerical divergence, 5 container format problem, 1 anything else.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import data as D
from . import operator as O
from . import training as TR

EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_DIVERGED = 4
EXIT_FORMAT = 5


class ConfigError(ValueError):
    pass


def worker_count():
    """Thread cap from VSWNO_THREADS (default 1)."""
    raw = os.environ.get("VSWNO_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"VSWNO_THREADS must be an integer, got {raw!r}") from None


def _check_keys(section, d, allowed):
    unknown = set(d) - set(allowed)
    if unknown:
        raise ConfigError(f"{section}: unknown keys {sorted(unknown)} (allowed: {sorted(allowed)})")


def _load_config(path):
    if not os.path.exists(path):
        raise FileNotFoundError(f"config file {path} does not exist")
    with open(path, "r", encoding="utf-8") as fh:
        try:
            cfg = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return cfg


def _require_out(path, force):
    if os.path.exists(path) and not force:
        raise ConfigError(f"output {path} exists; pass --force to overwrite")


# ---------------------------------------------------------------------------
# generate


_GRF_KEYS = ("scale", "tau2", "power")


def _scaled(count, scale):
    return int(round(count * scale))


def cmd_generate(args):
    cfg = _load_config(args.config)
    problem = cfg.get("problem")
    if problem not in ("burgers", "darcy", "import"):
        raise ConfigError(f"problem must be burgers, darcy or import, got {problem!r}")
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    scale = args.scale if args.scale is not None else 1.0
    out = args.out or cfg.get("out")
    if not out:
        raise ConfigError("no output path: pass --out or set 'out' in the config")
    _require_out(out, args.force)

    if problem == "burgers":
        _check_keys("generate", cfg, ("problem", "seed", "out", "n", "samples_train",
                                      "samples_test", "nu", "t_end", "grf"))
        grf = dict(cfg.get("grf", {}))
        _check_keys("generate.grf", grf, _GRF_KEYS)
        n_train = _scaled(int(cfg["samples_train"]), scale)
        n_test = _scaled(int(cfg["samples_test"]), scale)
        arrays, metadata = D.generate_burgers_dataset(
            n=int(cfg["n"]), n_train=n_train, n_test=n_test,
            nu=float(cfg.get("nu", 0.1)), t_end=float(cfg.get("t_end", 1.0)),
            grf={"scale": float(grf.get("scale", 625.0)),
                 "tau2": float(grf.get("tau2", 25.0)),
                 "power": float(grf.get("power", 2.0))},
            seed=seed,
        )
    elif problem == "darcy":
        _check_keys("generate", cfg, ("problem", "seed", "out", "h", "w", "samples_train",
                                      "samples_test", "source", "grf"))
        grf = dict(cfg.get("grf", {}))
        _check_keys("generate.grf", grf, _GRF_KEYS)
        n_train = _scaled(int(cfg["samples_train"]), scale)
        n_test = _scaled(int(cfg["samples_test"]), scale)
        arrays, metadata = D.generate_darcy_dataset(
            h=int(cfg["h"]), w=int(cfg["w"]), n_train=n_train, n_test=n_test,
            grf={"scale": float(grf.get("scale", 1.0)),
                 "tau2": float(grf.get("tau2", 9.0)),
                 "power": float(grf.get("power", 2.0))},
            source=float(cfg.get("source", 1.0)), seed=seed,
        )
    else:
        _check_keys("generate", cfg, ("problem", "seed", "out", "arrays", "metadata"))
        entries = cfg.get("arrays")
        if not isinstance(entries, dict) or not entries:
            raise ConfigError("import config needs an 'arrays' object")
        for name, ent in entries.items():
            if not isinstance(ent, dict):
                raise ConfigError(f"arrays.{name}: must be an object")
            _check_keys(f"arrays.{name}", ent, ("path", "dtype", "shape"))
        arrays, metadata = D.import_raw_arrays(entries, cfg.get("metadata", {}))

    D.dataset_write(out, arrays, metadata)
    n_train = metadata.get("samples", {}).get("train", arrays["train_x"].shape[0])
    n_test = metadata.get("samples", {}).get("test", arrays["test_x"].shape[0])
    print(f"wrote {out}: {n_train} train / {n_test} test samples, "
          f"grid {tuple(metadata.get('grid', arrays['train_x'].shape[1:]))}, seed {seed}")
    return 0


# ---------------------------------------------------------------------------
# train


_MODEL_KEYS = ("d_u", "g_hidden", "L", "wavelet", "m", "wavelet_mode")
_NEURON_KEYS = ("kind", "sigma", "sts", "trainable_params", "slope")
_SCHED_KEYS = ("epochs", "batch_size", "lr", "weight_decay", "alpha", "gamma",
               "sts", "seed", "encoding", "repetitions")


def _resolve_train_config(args):
    cfg = _load_config(args.config)
    _check_keys("train", cfg, ("dataset", "out", "log", "model", "neuron", "schedule"))
    model_cfg = dict(cfg.get("model", {}))
    neuron_cfg = dict(cfg.get("neuron", {}))
    sched_cfg = dict(cfg.get("schedule", {}))
    _check_keys("train.model", model_cfg, _MODEL_KEYS)
    _check_keys("train.neuron", neuron_cfg, _NEURON_KEYS)
    _check_keys("train.schedule", sched_cfg, _SCHED_KEYS)

    if args.neuron:
        neuron_cfg["kind"] = args.neuron
    if args.sigma:
        neuron_cfg["sigma"] = args.sigma
    if args.sts is not None:
        neuron_cfg["sts"] = args.sts
        sched_cfg["sts"] = args.sts
    if args.neuron_params:
        neuron_cfg["trainable_params"] = args.neuron_params == "trainable"
    for key in ("alpha", "gamma", "seed"):
        val = getattr(args, key)
        if val is not None:
            sched_cfg[key] = val
    if args.encoding:
        sched_cfg["encoding"] = args.encoding
    if args.repetitions is not None:
        sched_cfg["repetitions"] = args.repetitions
    return cfg, model_cfg, neuron_cfg, sched_cfg


def _build_wno_config(dataset, model_cfg, neuron_cfg):
    return O.WnoConfig(
        grid=tuple(dataset.grid),
        d_u=int(model_cfg.get("d_u", 64)),
        g_hidden=int(model_cfg.get("g_hidden", 128)),
        L=int(model_cfg.get("L", 4)),
        wavelet=str(model_cfg.get("wavelet", "db6")),
        m=int(model_cfg.get("m", 8)),
        wavelet_mode=str(model_cfg.get("wavelet_mode", "symmetric")),
        neuron_kind=str(neuron_cfg.get("kind", "artificial")),
        sigma=str(neuron_cfg.get("sigma", "gelu")),
        sts=int(neuron_cfg.get("sts", 1)),
        neuron_params_trainable=bool(neuron_cfg.get("trainable_params", True)),
        slope=float(neuron_cfg.get("slope", 25.0)),
    )


def run_training(dataset_path, model_cfg, neuron_cfg, sched_cfg, out_path, log_path, seed):
    dataset = TR.load_dataset(dataset_path)
    wno_cfg = _build_wno_config(dataset, model_cfg, neuron_cfg)
    try:
        wno_cfg.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    schedule = TR.Schedule(
        epochs=int(sched_cfg.get("epochs", 100)),
        batch_size=int(sched_cfg.get("batch_size", 25)),
        lr=float(sched_cfg.get("lr", 1e-3)),
        weight_decay=float(sched_cfg.get("weight_decay", 1e-4)),
        alpha=float(sched_cfg.get("alpha", 1.0)),
        gamma=float(sched_cfg.get("gamma", 0.0)),
        sts=int(sched_cfg.get("sts", neuron_cfg.get("sts", 1))),
        seed=seed,
        encoding=str(sched_cfg.get("encoding", "direct")),
    )
    try:
        schedule.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    model = O.build_model(wno_cfg, seed=seed)
    core, neuron = model.parameter_counts()
    print(f"model parameters: {core} core + {neuron} neuron")
    echo = {
        "dataset": os.path.basename(dataset_path),
        "grid": list(dataset.grid),
        "model": {"d_u": wno_cfg.d_u, "g_hidden": wno_cfg.g_hidden, "L": wno_cfg.L,
                  "wavelet": wno_cfg.wavelet, "m": wno_cfg.m,
                  "wavelet_mode": wno_cfg.wavelet_mode},
        "neuron": {"kind": wno_cfg.neuron_kind, "sigma": wno_cfg.sigma, "sts": wno_cfg.sts,
                   "trainable_params": wno_cfg.neuron_params_trainable},
        "schedule": {"epochs": schedule.epochs, "batch_size": schedule.batch_size,
                     "lr": schedule.lr, "weight_decay": schedule.weight_decay,
                     "alpha": schedule.alpha, "gamma": schedule.gamma,
                     "sts": schedule.sts, "encoding": schedule.encoding, "seed": seed},
    }
    dataset.config_echo = echo
    log = TR.train(model, dataset, schedule)
    O.save_model(model, out_path, extra_metadata={"run": echo})
    log.config_echo = echo
    log.save(log_path)
    return model, log


def cmd_train(args):
    cfg, model_cfg, neuron_cfg, sched_cfg = _resolve_train_config(args)
    dataset_path = cfg.get("dataset")
    if not dataset_path:
        raise ConfigError("train config needs a 'dataset' path")
    if not os.path.exists(dataset_path):
        raise FileNotFoundError(f"dataset {dataset_path} does not exist")
    out = args.out or cfg.get("out")
    if not out:
        raise ConfigError("no checkpoint path: pass --out or set 'out' in the config")
    log_base = cfg.get("log") or (os.path.splitext(out)[0] + ".csv")
    reps = int(sched_cfg.get("repetitions", 1))
    if reps < 1:
        raise ConfigError(f"repetitions must be >= 1, got {reps}")
    base_seed = int(sched_cfg.get("seed", 0))

    finals = []
    for rep in range(reps):
        seed = base_seed + 1000 * rep
        if reps == 1:
            ckpt_path, log_path = out, log_base
        else:
            stem, ext = os.path.splitext(out)
            ckpt_path = f"{stem}_rep{rep}{ext or '.vswn'}"
            log_path = f"{os.path.splitext(log_base)[0]}_rep{rep}.csv"
        _require_out(ckpt_path, args.force)
        _, log = run_training(dataset_path, model_cfg, neuron_cfg, sched_cfg,
                              ckpt_path, log_path, seed)
        last = log.rows[-1] if log.rows else None
        finals.append(last)
        if last is not None:
            print(f"rep {rep}: seed {seed}, final test eps {last[2]:.4f}%, "
                  f"checkpoint {ckpt_path}, log {log_path}")
        else:
            print(f"rep {rep}: seed {seed}, 0 epochs, checkpoint {ckpt_path}, log {log_path}")
    if reps > 1 and all(f is not None for f in finals):
        eps = np.array([f[2] for f in finals])
        print(f"test eps over {reps} repetitions: {eps.mean():.4f} +/- {eps.std():.4f}")
        n_sites = len(finals[0]) - 4
        for i in range(n_sites):
            s = np.array([f[3 + i] for f in finals])
            print(f"S_{i + 1}: {s.mean():.4f} +/- {s.std():.4f}")
    return 0


# ---------------------------------------------------------------------------
# eval


def cmd_eval(args):
    for path in (args.checkpoint, args.dataset):
        if not os.path.exists(path):
            raise FileNotFoundError(f"{path} does not exist")
    model, metadata = O.load_model(args.checkpoint)
    dataset = TR.load_dataset(args.dataset)
    if tuple(dataset.grid) != model.cfg.grid:
        raise ConfigError(
            f"checkpoint grid {model.cfg.grid} does not match dataset grid {tuple(dataset.grid)}"
        )
    run = metadata.get("run", {}).get("schedule", {})
    schedule = TR.Schedule(
        epochs=0, batch_size=1,
        alpha=float(run.get("alpha", 1.0)), gamma=float(run.get("gamma", 0.0)),
        sts=model.cfg.sts, seed=int(run.get("seed", 0)),
        encoding=str(run.get("encoding", "direct")),
    )
    x, y = (dataset.train_x, dataset.train_y) if args.split == "train" else \
        (dataset.test_x, dataset.test_y)
    result = TR.evaluate(model, x, y, schedule, value_range=dataset.input_range,
                         base_seed=schedule.seed + (0 if args.split == "train" else 1),
                         workers=worker_count())
    report = result["report"]
    print(f"split: {args.split} ({x.shape[0]} samples)")
    print(f"eps: {result['eps']:.12g}% +/- {result['eps_std']:.6f}%")
    for i, s in enumerate(report.s_per_site):
        print(f"S_{i + 1}: {s:.4f}%")
    print(f"S_tilde: {report.s_tilde:.6f}")

    # energy table: N_s per site, fan-out = channel count of the next layer
    cfg = model.cfg
    n_mt = [cfg.d_u] * (cfg.L - 1) + [1]
    if report.s_per_site and any(c[1] > 0 for c in report.counts):
        n_s = [spikes / (possible / max(cfg.sts, 1)) if possible else 0.0
               for spikes, possible in report.counts]
    else:
        n_s = [0.0] * len(n_mt)
    est = TR.energy_estimate(n_s, n_mt)
    print("site  N_s       artificial  lif         vsn")
    for i in range(len(n_mt)):
        print(f"A{i + 1}    {est.n_s[i]:<9.4f} {est.artificial[i]:<11.2f} "
              f"{est.lif[i]:<11.4f} {est.vsn[i]:<11.4f}")
    totals = est.totals()
    print(f"totals (per-neuron energy units): artificial {totals['artificial']:.2f}, "
          f"lif {totals['lif']:.4f}, vsn {totals['vsn']:.4f}")
    print(f"break-even N_s: lif {est.lif_break_even:.4f}, vsn {est.vsn_break_even:.4f}")

    if args.out:
        _require_out(args.out, args.force)
        D.dataset_write(
            args.out,
            {"pred": result["preds"].astype(np.float64),
             "truth": np.asarray(y, dtype=np.float64),
             "eps_per_sample": result["eps_samples"].astype(np.float64)},
            {"kind": "predictions", "split": args.split,
             "checkpoint": os.path.basename(args.checkpoint),
             "dataset": os.path.basename(args.dataset)},
        )
        print(f"wrote predictions to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# report


def cmd_report(args):
    logs = []
    for path in args.logs:
        if not os.path.exists(path):
            raise FileNotFoundError(f"log {path} does not exist")
        logs.append((path, TR.TrainLog.load(path)))
    grids = {json.dumps(log.config_echo.get("grid")) for _, log in logs}
    if len(grids) > 1:
        raise ConfigError(
            f"refusing to aggregate logs over different grids: {sorted(grids)}; "
            "report each resolution separately"
        )
    groups = {}
    for path, log in logs:
        echo = json.loads(json.dumps(log.config_echo))  # deep copy
        echo.get("schedule", {}).pop("seed", None)  # repetitions differ only by seed
        key = json.dumps(echo, sort_keys=True)
        groups.setdefault(key, []).append((path, log))

    site_count = max(log.site_count for _, log in logs)
    header = ["group", "runs", "eps"] + [f"S_{i + 1}" for i in range(site_count)]
    rows = []
    for key, members in groups.items():
        finals = [log.rows[-1] for _, log in members if log.rows]
        if not finals:
            continue
        eps = np.array([f[2] for f in finals])
        label = "; ".join(sorted(os.path.basename(p) for p, _ in members))
        row = [label, str(len(finals)), f"{eps.mean():.4f} +/- {eps.std():.4f}"]
        for i in range(site_count):
            vals = np.array([f[3 + i] for f in finals if len(f) > 4 + i])
            row.append(f"{vals.mean():.4f} +/- {vals.std():.4f}" if vals.size else "-")
        rows.append(row)

    widths = [max(len(header[i]), *(len(r[i]) for r in rows)) if rows else len(header[i])
              for i in range(len(header))]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    for r in rows:
        lines.append("  ".join(v.ljust(w) for v, w in zip(r, widths)))
    table = "\n".join(lines)
    print(table)
    if args.out:
        import csv as _csv
        with open(args.out, "w", newline="", encoding="utf-8") as fh:
            writer = _csv.writer(fh)
            writer.writerow(header)
            writer.writerows(rows)
        print(f"wrote {args.out}")
    return 0


# ---------------------------------------------------------------------------
# entry point


def build_parser():
    parser = argparse.ArgumentParser(prog="vswno", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="generate or import a dataset container")
    g.add_argument("--config", required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--scale", type=float, help="multiply the configured sample counts")
    g.add_argument("--out")
    g.add_argument("--force", action="store_true")
    g.set_defaults(fn=cmd_generate)

    t = sub.add_parser("train", help="train a model, writing a checkpoint and a CSV log")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--repetitions", type=int)
    t.add_argument("--alpha", type=float)
    t.add_argument("--gamma", type=float)
    t.add_argument("--sts", type=int)
    t.add_argument("--neuron", choices=("artificial", "lif", "vsn"))
    t.add_argument("--sigma", choices=("identity", "gelu"))
    t.add_argument("--encoding", choices=("direct", "rate", "triangular"))
    t.add_argument("--neuron-params", choices=("trainable", "fixed"), dest="neuron_params")
    t.add_argument("--out")
    t.add_argument("--force", action="store_true")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint against a dataset")
    e.add_argument("checkpoint")
    e.add_argument("dataset")
    e.add_argument("--split", choices=("train", "test"), default="test")
    e.add_argument("--out", help="write predictions to a container")
    e.add_argument("--force", action="store_true")
    e.set_defaults(fn=cmd_eval)

    r = sub.add_parser("report", help="aggregate train logs into a comparison table")
    r.add_argument("logs", nargs="+")
    r.add_argument("--out", help="write the table as CSV")
    r.set_defaults(fn=cmd_report)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except TR.TrainingDivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except D.ContainerError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
