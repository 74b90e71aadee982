"""Closed-form traffic, latency, energy and EDP.

Everything here is ordinary arithmetic over grid entries, so passing Var
grids (see :mod:`diffdse.gradient`) yields gradients with respect to every
tiling factor, including through the inferred hardware.
"""
from __future__ import annotations

from dataclasses import dataclass

from .arch import (ArchConfig, ArchParams, bandwidth, capacity_requirements, epa,
                   infer_min_hw)
from .gradient import maximum, relu, softmax, value, vprod, vsum
from .mapping import (DRAM, LEVELS, LOOP_ORDER, SPATIAL, SPATIAL_SLOTS, TEMPORAL,
                      LayerMapping)
from .workload import O, RELEVANT, LayerShape, Network


@dataclass
class TrafficReport:
    writes: list   # [level][tensor]
    reads: list    # [level][tensor]
    updates: list  # [level][tensor]; only outputs are ever updated
    macs: object
    bypass: tuple

    def accesses(self, level: int):
        row = self.bypass[level]
        return vsum(row[t] * (self.reads[level][t] + self.updates[level][t] + self.writes[level][t])
                    for t in range(3) if row[t])

    def total_writes(self, level: int):
        return vsum(self.writes[level][t] for t in range(3) if self.bypass[level][t])


@dataclass
class PerfEstimate:
    latency: object
    energy: object
    compute_latency: object
    mem_latency: list
    level_energy: list
    traffic: TrafficReport


def loop_sequence(grid, ordering, above: int) -> list[tuple[int, object]]:
    """Temporal loops at levels above ``above``, outermost first."""
    seq = []
    for j in range(DRAM, above, -1):
        if j == 0:
            break
        for d in LOOP_ORDER[ordering[j - 1]]:
            seq.append((d, grid[TEMPORAL][j][d]))
    return seq


def _spatial_above(grid, level: int):
    return vprod(grid[SPATIAL][i][d] for i, d in SPATIAL_SLOTS if i > level)


def _spatial_irrelevant(grid, level: int, t: int):
    rel = RELEVANT[t]
    return vprod(grid[SPATIAL][i][d] for i, d in SPATIAL_SLOTS if i == level and d not in rel)


def refetch_factor(grid, ordering, level: int, t: int):
    """How many times tensor ``t``'s tile at ``level`` is (re)loaded.

    Every loop over a dimension indexing ``t`` counts, plus loops over other
    dimensions that sit outside the innermost such loop doing real work
    (factor > 1).  Irrelevant loops inside it reuse the resident tile.
    """
    rel = RELEVANT[t]
    seq = loop_sequence(grid, ordering, level)
    cut = -1
    for pos in range(len(seq) - 1, -1, -1):
        d, f = seq[pos]
        if d in rel and f > 1:
            cut = pos
            break
    return vprod(f for pos, (d, f) in enumerate(seq) if d in rel or pos < cut)


def traffic(grid, layer: LayerShape, ordering, bypass=None) -> TrafficReport:
    bypass = bypass or ArchParams().bypass
    cap = capacity_requirements(grid, layer, bypass)
    macs = vprod(grid[k][i][d] for k in range(2) for i in range(LEVELS) for d in range(7))
    writes = [[0.0] * 3 for _ in range(LEVELS)]
    reads = [[0.0] * 3 for _ in range(LEVELS)]
    updates = [[0.0] * 3 for _ in range(LEVELS)]
    for t in range(3):
        levels = [i for i in range(LEVELS) if bypass[i][t]]
        for i in levels:
            writes[i][t] = (cap.per_tensor[i][t] * refetch_factor(grid, ordering, i, t)
                            * _spatial_above(grid, i))
        prev = None
        for i in levels:
            fs = _spatial_irrelevant(grid, i, t)
            # Innermost copy serves every MAC; outer copies refill the next
            # inner level holding the tensor, shared across a broadcast.
            source = macs if prev is None else writes[prev][t]
            reads[i][t] = source / fs
            if t == O:
                updates[i][t] = source / fs
            prev = i
    return TrafficReport(writes, reads, updates, macs, tuple(map(tuple, bypass)))


def latency(report: TrafficReport, arch: ArchConfig, grid):
    """Roofline latency: the slowest of compute and each memory level."""
    compute = report.macs / vprod(grid[SPATIAL][i][d] for i, d in SPATIAL_SLOTS)
    mem = [report.accesses(i) / bandwidth(arch, i) for i in range(LEVELS)]
    return maximum([compute] + mem), compute, mem


def energy(report: TrafficReport, arch: ArchConfig):
    per_level = [report.accesses(i) * epa(arch, i) for i in range(LEVELS)]
    return report.macs * epa(arch, "PE") + vsum(per_level), per_level


def evaluate_layer(grid, layer: LayerShape, ordering, arch: ArchConfig) -> PerfEstimate:
    rep = traffic(grid, layer, ordering, arch.params.bypass)
    lat, compute, mem = latency(rep, arch, grid)
    en, per_level = energy(rep, arch)
    return PerfEstimate(lat, en, compute, mem, per_level, rep)


def network_edp(energies, latencies, repeats):
    total_e = vsum(r * e for r, e in zip(repeats, energies))
    total_l = vsum(r * lt for r, lt in zip(repeats, latencies))
    return total_e * total_l


def softmax_weights(energies, latencies) -> list:
    return softmax([1.0 / (e * lt) for e, lt in zip(energies, latencies)])


def softmax_ordering_loss(per_layer, repeats):
    """Ordering-weighted EDP.

    ``per_layer`` holds, for each layer, the (energy, latency) pairs under the
    WS, IS and OS orderings.
    """
    total_e = 0.0
    total_l = 0.0
    for pairs, r in zip(per_layer, repeats):
        es = [e for e, _ in pairs]
        ls = [lt for _, lt in pairs]
        w = softmax_weights(es, ls)
        total_e = total_e + r * vsum(wj * e for wj, e in zip(w, es))
        total_l = total_l + r * vsum(wj * lt for wj, lt in zip(w, ls))
    return total_e * total_l


def penalty(grids) -> object:
    """Hinge on every factor below 1, derived DRAM factors included."""
    return vsum(relu(1.0 - f) for grid in grids for plane in grid for row in plane for f in row)


UNIFORM_ORDERINGS = (("WS",) * 3, ("IS",) * 3, ("OS",) * 3)


@dataclass
class NetworkEval:
    objective: object
    estimates: list
    arch: ArchConfig

    @property
    def edp(self) -> float:
        return value(self.objective)


def evaluate_network(grids, network: Network, orderings=None, arch: ArchConfig | None = None,
                     mode: str = "fixed", params: ArchParams | None = None) -> NetworkEval:
    """Network EDP for one grid per unique layer.

    With ``arch=None`` the minimal hardware is inferred from the grids
    themselves, keeping the hardware a differentiable function of the
    mapping.  ``mode="softmax"`` returns the ordering-weighted loss instead;
    its estimates are then per-layer lists of three.
    """
    layers = network.shapes
    if isinstance(grids[0], LayerMapping):
        orderings = orderings or [m.ordering for m in grids]
        grids = [m.grid() for m in grids]
    if arch is None:
        arch = infer_min_hw(list(zip(grids, layers)), params)
    if mode == "softmax":
        ests = [[evaluate_layer(g, layer, o, arch) for o in UNIFORM_ORDERINGS]
                for g, layer in zip(grids, layers)]
        pairs = [[(e.energy, e.latency) for e in row] for row in ests]
        return NetworkEval(softmax_ordering_loss(pairs, network.repeats), ests, arch)
    if mode != "fixed":
        raise ValueError(f"unknown mode {mode!r}")
    orderings = orderings or [("WS",) * 3] * len(grids)
    ests = [evaluate_layer(g, layer, o, arch) for g, layer, o in zip(grids, layers, orderings)]
    edp = network_edp([e.energy for e in ests], [e.latency for e in ests], network.repeats)
    return NetworkEval(edp, ests, arch)
