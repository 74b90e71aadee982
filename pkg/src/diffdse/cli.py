"""Command-line entry point: ``diffdse {search,correlate,evaluate,train-correction,make-samples}``.

Exit codes are 0 on success, 1 on runtime errors (bad files, infeasible
designs, oracle limits) and 2 on usage errors.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, fields

import numpy as np

from .arch import ArchParams, fit_problems, parse_arch_template
from .correction import (CorrectionModel, RESIDUAL_KINDS, TrainConfig,
                         corrected_layer_latency, evaluate_correction, format_loss_curve,
                         format_samples, load_samples, split, synthetic_samples, train)
from .mapping import validate
from .perfmodel import evaluate_layer, network_edp
from .search import (SearchConfig, format_design, parse_design, random_arch,
                     random_mapping, random_search, run_gd, summarize)
from .workload import load_workload

CORRELATION_SCHEMA = "diffdse.correlation.v1"


class UsageError(Exception):
    pass


def worker_count() -> int:
    """Worker processes allowed by ``DOSA_THREADS`` (default 1)."""
    raw = os.environ.get("DOSA_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise UsageError(f"DOSA_THREADS must be an integer, got {raw!r}") from None


def _sha256(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def _write(path, text: str) -> str:
    with open(path, "w", newline="") as fh:
        fh.write(text)
    return str(path)


def _write_manifest(out_dir, command: str, config: dict, seed, outputs: list, started: float):
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "started": started,
        "finished": time.time(),
        "outputs": {os.path.basename(p): _sha256(p) for p in outputs},
    }
    _write(os.path.join(out_dir, "manifest.json"), json.dumps(manifest, indent=1, sort_keys=True))


def _read_config_file(path) -> dict:
    """``key = value`` lines for :class:`SearchConfig` fields."""
    types = {f.name: f.type for f in fields(SearchConfig)}
    out = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, val = (s.strip() for s in line.partition("="))
            if not sep or key not in types:
                raise UsageError(f"{path}:{lineno}: unknown config entry {line!r}")
            kind = types[key]
            if "bool" in kind:
                out[key] = val.lower() in ("1", "true", "yes")
            elif "int" in kind:
                out[key] = int(val)
            elif "float" in kind:
                out[key] = float(val)
            else:
                out[key] = val
    return out


# -- search -----------------------------------------------------------------------

def cmd_search(args) -> int:
    started = time.time()
    network = load_workload(args.workload)
    params = ArchParams()
    if args.arch_template:
        with open(args.arch_template) as fh:
            params = parse_arch_template(fh.read())
    settings = asdict(SearchConfig())
    if args.config:
        settings.update(_read_config_file(args.config))
    flags = {"n_start_points": args.seeds, "steps_per_start": args.steps,
             "rounding_period": args.round_every, "ordering_strategy": args.strategy,
             "seed": args.seed, "budget": args.budget}
    settings.update({k: v for k, v in flags.items() if v is not None})
    if args.baseline == "random" and settings["budget"] is None:
        raise UsageError("--baseline random needs --budget")
    config = SearchConfig(**settings)
    print("config: " + " ".join(f"{k}={v}" for k, v in sorted(settings.items())))
    os.makedirs(args.out, exist_ok=True)

    trace = run_gd(network, config, params)
    outputs = [_write(os.path.join(args.out, "search_trace.csv"), trace.to_csv())]
    best = trace.best
    outputs.append(_write(os.path.join(args.out, "best_design.txt"),
                          format_design(network, best.mappings, best.arch)))
    summary = summarize(trace)
    if args.baseline == "random":
        base = random_search(network, config.budget, np.random.default_rng(config.seed),
                             params=params, min_bytes=config.min_buffer_bytes,
                             max_bytes=config.max_buffer_bytes)
        outputs.append(_write(os.path.join(args.out, "baseline_trace.csv"), base.to_csv()))
        summary["baseline_evaluations"] = base.evaluations
        summary["baseline_final_edp"] = base.best_edp
        summary["improvement_over_baseline"] = base.best_edp / summary["final_edp"]
    text = "".join(f"{k} = {_fmt(v)}\n" for k, v in summary.items())
    outputs.append(_write(os.path.join(args.out, "summary.txt"), text))
    print(text, end="")
    _write_manifest(args.out, "search", settings | {"workload": args.workload,
                    "arch_template": args.arch_template, "baseline": args.baseline},
                    config.seed, outputs, started)
    return 0


def _fmt(v) -> str:
    if v is None:
        return "undefined"
    return repr(v) if isinstance(v, float) else str(v)


# -- correlate --------------------------------------------------------------------

def _correlate_one(job):
    from .oracle import oracle_energy, oracle_latency, simulate_traffic
    index, layer_index, mapping, arch = job
    est = evaluate_layer(mapping.grid(), mapping.layer, mapping.ordering, arch)
    rep = simulate_traffic(mapping, arch.params.bypass)
    o_lat = oracle_latency(rep, arch, mapping)
    o_en = oracle_energy(rep, arch)
    return [index, layer_index, "-".join(mapping.ordering), float(est.latency), o_lat,
            float(est.energy), o_en, float(est.latency * est.energy), o_lat * o_en]


def cmd_correlate(args) -> int:
    from .oracle import MAX_ITERATIONS
    started = time.time()
    if args.samples < 0:
        raise UsageError("--samples must be non-negative")
    network = load_workload(args.workload)
    for j, layer in enumerate(network.shapes):
        if math.prod(layer.extents) > MAX_ITERATIONS:
            raise RuntimeError(f"layer {j} ({layer.to_record()}) exceeds the oracle cap of "
                               f"{MAX_ITERATIONS} iterations")
    rng = np.random.default_rng(args.seed)
    params = ArchParams()
    jobs = []
    for n in range(args.samples):
        j = n % len(network)
        arch = random_arch(rng, params)
        jobs.append((n, j, random_mapping(network.shapes[j], arch, rng), arch))
    workers = worker_count()
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(workers) as pool:
            rows = list(pool.map(_correlate_one, jobs, chunksize=8))
    else:
        rows = [_correlate_one(job) for job in jobs]

    buf = io.StringIO()
    buf.write(f"# schema: {CORRELATION_SCHEMA}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["index", "layer", "ordering", "model_latency", "oracle_latency",
                "model_energy", "oracle_energy", "model_edp", "oracle_edp"])
    for row in rows:
        w.writerow([row[0], row[1], row[2]] + [repr(x) for x in row[3:]])
    os.makedirs(args.out, exist_ok=True)
    outputs = [_write(os.path.join(args.out, "correlation.csv"), buf.getvalue())]
    lines = [f"samples = {len(rows)}"]
    for name, col in (("latency", 3), ("energy", 5), ("edp", 7)):
        if rows:
            errs = [abs(r[col] - r[col + 1]) / abs(r[col + 1]) for r in rows]
            lines.append(f"mae_{name}_percent = {100.0 * sum(errs) / len(errs)!r}")
        else:
            lines.append(f"mae_{name}_percent = undefined (no samples)")
    text = "\n".join(lines) + "\n"
    outputs.append(_write(os.path.join(args.out, "correlation_summary.txt"), text))
    print(text, end="")
    _write_manifest(args.out, "correlate", {"workload": args.workload, "samples": args.samples},
                    args.seed, outputs, started)
    return 0


# -- evaluate ---------------------------------------------------------------------

def cmd_evaluate(args) -> int:
    network = load_workload(args.workload)
    with open(args.design) as fh:
        arch, mappings = parse_design(fh.read(), network)
    for j, m in enumerate(mappings):
        check = validate(m)
        if not check:
            raise RuntimeError(f"layer {j}: invalid mapping: {'; '.join(check.problems)}")
        problems = fit_problems(m, arch)
        if problems:
            raise RuntimeError(f"layer {j}: design does not fit: {'; '.join(problems)}")
    model = None
    if args.correction:
        with open(args.correction) as fh:
            model = CorrectionModel.from_json(fh.read())
    energies, latencies, corrected = [], [], []
    for j, m in enumerate(mappings):
        est = evaluate_layer(m.grid(), m.layer, m.ordering, arch)
        energies.append(est.energy)
        latencies.append(est.latency)
        line = f"layer {j}: latency = {est.latency!r} energy = {est.energy!r}"
        if model is not None:
            c = corrected_layer_latency(m.grid(), m.layer, m.ordering, arch, est.latency, model)
            corrected.append(c)
            line += f" corrected_latency = {c!r}"
        print(line)
    print(f"network_edp = {network_edp(energies, latencies, network.repeats)!r}")
    if model is not None:
        print(f"corrected_network_edp = {network_edp(energies, corrected, network.repeats)!r}")
    return 0


# -- correction -------------------------------------------------------------------

def cmd_train_correction(args) -> int:
    data = load_samples(args.samples)
    for rowno, reason in data.rejected:
        print(f"rejected row {rowno}: {reason}", file=sys.stderr)
    config = TrainConfig(epochs=args.epochs, seed=args.seed)
    result = train(data.samples, config)
    _write(args.out, result.model.to_json())
    root, _ = os.path.splitext(args.out)
    _write(root + ".loss.csv", format_loss_curve(result))
    _, test = split(data.samples, config.test_fraction, config.seed)
    print(f"final_train_loss = {result.train_loss[-1]!r}")
    print(f"final_test_loss = {result.test_loss[-1]!r}")
    if len(test) >= 2:
        for k, v in evaluate_correction(result.model, test).items():
            print(f"{k} = {v!r}")
    return 0


def cmd_make_samples(args) -> int:
    samples = synthetic_samples(args.n, args.seed, args.kind, args.noise)
    _write(args.out, format_samples(samples))
    return 0


# -- argument parsing -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="diffdse",
                                 description="Gradient-based accelerator/mapping co-search.")
    sub = ap.add_subparsers(dest="command", required=True)

    s = sub.add_parser("search", help="co-search mappings and hardware")
    s.add_argument("--workload", required=True)
    s.add_argument("--arch-template")
    s.add_argument("--config", help="key = value file of search settings")
    s.add_argument("--strategy", choices=("none", "iterative", "softmax"))
    s.add_argument("--seeds", type=int, help="number of start points")
    s.add_argument("--steps", type=int, help="descent steps per start point")
    s.add_argument("--round-every", type=int)
    s.add_argument("--budget", type=int, help="cap on rounded evaluations")
    s.add_argument("--baseline", choices=("none", "random"), default="none")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_search)

    c = sub.add_parser("correlate", help="compare the closed-form model with the oracle")
    c.add_argument("--workload", required=True)
    c.add_argument("--samples", type=int, required=True)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_correlate)

    e = sub.add_parser("evaluate", help="evaluate a design bundle")
    e.add_argument("--design", required=True)
    e.add_argument("--workload", required=True)
    e.add_argument("--correction")
    e.set_defaults(func=cmd_evaluate)

    t = sub.add_parser("train-correction", help="fit the latency-correction model")
    t.add_argument("--samples", required=True)
    t.add_argument("--epochs", type=int, required=True)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train_correction)

    g = sub.add_parser("make-samples", help="write a synthetic measured-latency CSV")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--kind", choices=RESIDUAL_KINDS, default="structured")
    g.add_argument("--noise", type=float, default=0.05)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_make_samples)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
