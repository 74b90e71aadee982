"""Brute-force reference: walk the mapped loop nest and count data movement.

Only integer, valid mappings are accepted.  Writes into each level are found
by enumerating every temporal iteration outside that level and counting how
often the resident tile of a tensor changes; tile sizes come from
enumerating the element coordinates a tile touches.  Reads and updates then
follow from the write counts (each inner refill is a read of the outer
level, divided by broadcast fan-out).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import product

import numpy as np

from .arch import DEFAULT_BYPASS, ArchConfig, bandwidth, epa
from .mapping import (DRAM, LEVELS, LOOP_ORDER, SPATIAL, TEMPORAL, LayerMapping,
                      validate)
from .perfmodel import TrafficReport
from .workload import RELEVANT, C, K, N, O, P, Q, R, S, W, LayerShape

MAX_ITERATIONS = 10 ** 7


class OracleError(ValueError):
    pass


@dataclass
class Loop:
    dim: int
    bound: int
    level: int
    spatial: bool


def nest_spec(mapping: LayerMapping) -> list[Loop]:
    """Loops from DRAM inwards; spatial loops follow their level's temporal loops."""
    f = mapping.factors.astype(int)
    loops = []
    for level in range(DRAM, -1, -1):
        order = LOOP_ORDER[mapping.ordering[level - 1]] if level > 0 else range(7)
        for d in order:
            loops.append(Loop(d, int(f[TEMPORAL, level, d]), level, False))
        for d in range(7):
            loops.append(Loop(d, int(f[SPATIAL, level, d]), level, True))
    return loops


def _strides(loops: list[Loop]) -> list[int]:
    """Stride of each loop's index in its dimension (inner loops vary fastest)."""
    strides = [0] * len(loops)
    scale = [1] * 7
    for pos in range(len(loops) - 1, -1, -1):
        strides[pos] = scale[loops[pos].dim]
        scale[loops[pos].dim] *= loops[pos].bound
    return strides


def _dim_offsets(loops, strides, positions, d) -> list[int]:
    """Every global index of dimension ``d`` reachable by the given loops."""
    offs = [0]
    for pos in positions:
        if loops[pos].dim == d and loops[pos].bound > 1:
            offs = [o + j * strides[pos] for o in offs for j in range(loops[pos].bound)]
    return sorted(set(offs))


def tile_footprint(loops, strides, level: int, layer: LayerShape, t: int) -> int:
    """Words of tensor ``t`` touched by one tile of ``level``.

    Input tiles are stored as contiguous row/column windows, so the height
    and width are window spans rather than distinct-row counts.
    """
    inner = [pos for pos, lp in enumerate(loops) if lp.level <= level]
    idx = {d: _dim_offsets(loops, strides, inner, d) for d in range(7)}
    if t == W:
        return len(set(product(idx[R], idx[S], idx[C], idx[K])))
    if t == O:
        return len(set(product(idx[P], idx[Q], idx[K], idx[N])))
    rows = {p * layer.Pstride + r for p in idx[P] for r in idx[R]}
    cols = {q * layer.Qstride + s for q in idx[Q] for s in idx[S]}
    channels = set(product(idx[C], idx[N]))
    return len(channels) * (max(rows) - min(rows) + 1) * (max(cols) - min(cols) + 1)


def count_runs(loops: list[Loop], level: int, t: int) -> int:
    """Maximal runs of a constant tile id over temporal iterations above ``level``."""
    outer = [lp for lp in loops if lp.level > level and not lp.spatial]
    rel = RELEVANT[t]
    keep = [j for j, lp in enumerate(outer) if lp.dim in rel]
    runs = 0
    last = None
    for it in product(*(range(lp.bound) for lp in outer)):
        key = tuple(it[j] for j in keep)
        if key != last:
            runs += 1
            last = key
    return runs


def _instances(loops, level) -> list[tuple]:
    sp = [lp for lp in loops if lp.spatial and lp.level > level]
    return list(product(*(range(lp.bound) for lp in sp)))


def broadcast_factor(loops, level: int, t: int) -> int:
    """Children of ``level`` fed per distinct read of tensor ``t``."""
    sp = [lp for lp in loops if lp.spatial and lp.level == level]
    rel = RELEVANT[t]
    children = list(product(*(range(lp.bound) for lp in sp)))
    distinct = {tuple(c[j] for j, lp in enumerate(sp) if lp.dim in rel) for c in children}
    return len(children) // len(distinct)


def count_macs(loops) -> int:
    total = 0
    for _ in product(*(range(lp.bound) for lp in loops)):
        total += 1
    return total


def simulate_traffic(mapping: LayerMapping, bypass=None) -> TrafficReport:
    bypass = bypass or DEFAULT_BYPASS
    check = validate(mapping)
    if not check:
        raise OracleError("oracle needs a valid integer mapping: " + "; ".join(check.problems))
    layer = mapping.layer
    if math.prod(layer.extents) > MAX_ITERATIONS:
        raise OracleError(f"layer {layer} exceeds the {MAX_ITERATIONS} iteration cap")
    loops = nest_spec(mapping)
    strides = _strides(loops)
    macs = count_macs(loops)
    writes = [[0.0] * 3 for _ in range(LEVELS)]
    reads = [[0.0] * 3 for _ in range(LEVELS)]
    updates = [[0.0] * 3 for _ in range(LEVELS)]
    for t in range(3):
        held = [i for i in range(LEVELS) if bypass[i][t]]
        for i in held:
            size = tile_footprint(loops, strides, i, layer, t)
            writes[i][t] = float(size * count_runs(loops, i, t) * len(_instances(loops, i)))
        prev = None
        for i in held:
            fs = broadcast_factor(loops, i, t)
            source = macs if prev is None else writes[prev][t]
            reads[i][t] = source / fs
            if t == O:
                updates[i][t] = source / fs
            prev = i
    return TrafficReport(writes, reads, updates, float(macs), tuple(map(tuple, bypass)))


def oracle_latency(report: TrafficReport, arch: ArchConfig, mapping: LayerMapping) -> float:
    pes = float(np.prod(mapping.factors[SPATIAL]))
    cycles = [report.macs / pes]
    for i in range(LEVELS):
        words = sum(report.reads[i][t] + report.writes[i][t] + report.updates[i][t]
                    for t in range(3) if report.bypass[i][t])
        cycles.append(words / float(bandwidth(arch, i)))
    return max(cycles)


def oracle_energy(report: TrafficReport, arch: ArchConfig) -> float:
    total = report.macs * epa(arch, "PE")
    for i in range(LEVELS):
        words = sum(report.reads[i][t] + report.writes[i][t] + report.updates[i][t]
                    for t in range(3) if report.bypass[i][t])
        total += words * float(epa(arch, i))
    return total


def oracle_network_edp(mappings, repeats, arch: ArchConfig) -> float:
    energies, latencies = [], []
    for m in mappings:
        rep = simulate_traffic(m, arch.params.bypass)
        energies.append(oracle_energy(rep, arch))
        latencies.append(oracle_latency(rep, arch, m))
    return (sum(r * e for r, e in zip(repeats, energies))
            * sum(r * lt for r, lt in zip(repeats, latencies)))


def report_fields(report: TrafficReport) -> dict[str, float]:
    out = {"MACs": float(report.macs)}
    names = "WIO"
    for i in range(LEVELS):
        for t in range(3):
            if not report.bypass[i][t]:
                continue
            out[f"writes_{names[t]}{i}"] = float(report.writes[i][t])
            out[f"reads_{names[t]}{i}"] = float(report.reads[i][t])
            if t == O:
                out[f"updates_{names[t]}{i}"] = float(report.updates[i][t])
    return out


@dataclass
class Correlation:
    rel_errors: dict[str, float]
    mae: float

    @property
    def worst(self) -> tuple[str, float]:
        return max(self.rel_errors.items(), key=lambda kv: kv[1])


def rel_error(model: float, ref: float) -> float:
    if model == ref:
        return 0.0
    return abs(model - ref) / max(abs(ref), 1e-300)


def correlate(model_report, oracle_report) -> Correlation:
    """Field-wise relative differences between two traffic reports (or dicts)."""
    a = model_report if isinstance(model_report, dict) else report_fields(model_report)
    b = oracle_report if isinstance(oracle_report, dict) else report_fields(oracle_report)
    if a.keys() != b.keys():
        raise OracleError(f"reports cover different fields: {sorted(a.keys() ^ b.keys())}")
    errs = {k: rel_error(float(a[k]), float(b[k])) for k in a}
    mae = sum(errs.values()) / len(errs) if errs else 0.0
    return Correlation(errs, mae)

