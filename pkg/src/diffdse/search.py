"""Mapping-first co-search of mappings and hardware by gradient descent.

Every layer's free tiling factors are optimized jointly against the network
EDP, with the hardware inferred from the mappings at each step.  Mappings are
periodically projected to valid integer mappings; each projection is one
"model evaluation" and is recorded in the trace.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .arch import (ArchConfig, ArchParams, capacity_requirements, finalize_arch, fit_problems,
                   format_arch, infer_min_hw, make_arch, parse_arch, round_up_kb)
from .gradient import Adam, Var, relu, value
from .mapping import (DRAM, EPS, FREE_SLOTS, N_FREE, ORDERINGS, SPATIAL, TEMPORAL,
                      LayerMapping, assemble, divisors, format_mapping, mapping_from_free,
                      parse_mappings, prime_factors, round_mapping, uniform_mapping)
from .perfmodel import UNIFORM_ORDERINGS, evaluate_layer, evaluate_network, penalty
from .workload import C, K, LayerShape, Network

TRACE_SCHEMA = "diffdse.search_trace.v1"
REJECT_RATIO = 10.0


class SearchError(ValueError):
    pass


@dataclass
class SearchConfig:
    n_start_points: int = 7
    steps_per_start: int = 1490
    rounding_period: int = 500
    ordering_strategy: str = "iterative"
    learning_rate: float = 0.05
    # Descend on log(factor) so each step is a relative change of a factor.
    log_space: bool = True
    beta1: float = 0.9
    beta2: float = 0.999
    seed: int = 0
    budget: int | None = None
    max_start_attempts: int = 50
    # Buffer sizes for random start hardware, log-uniform in bytes.
    min_buffer_bytes: int = 1024
    max_buffer_bytes: int = 1024 * 1024
    oracle_check: bool = False

    def __post_init__(self):
        if self.ordering_strategy not in ("none", "iterative", "softmax"):
            raise SearchError(f"unknown ordering strategy {self.ordering_strategy!r}")
        for name in ("n_start_points", "steps_per_start", "rounding_period"):
            if getattr(self, name) < 1:
                raise SearchError(f"{name} must be positive")
        if self.rounding_period > self.steps_per_start:
            raise SearchError("rounding_period cannot exceed steps_per_start")
        if self.budget is not None and self.budget < 1:
            raise SearchError("budget must be positive")


PRESETS = {
    "default": dict(steps_per_start=1490, rounding_period=500),
    "ordering": dict(steps_per_start=890, rounding_period=300),
}


@dataclass
class TraceEntry:
    index: int
    kind: str            # "start", "rejected", "round", "random"
    start: int
    step: int
    model_edp: float
    best_edp: float
    arch: ArchConfig
    mappings: list
    oracle_edp: float | None = None


@dataclass
class SearchTrace:
    network: Network
    entries: list = field(default_factory=list)
    start_edps: list = field(default_factory=list)

    def record(self, kind, start, step, edp, arch, mappings, oracle_edp=None) -> TraceEntry:
        best = min(edp, self.entries[-1].best_edp) if self.entries else edp
        entry = TraceEntry(len(self.entries), kind, start, step, edp, best, arch,
                           [m.copy() for m in mappings], oracle_edp)
        self.entries.append(entry)
        return entry

    @property
    def evaluations(self) -> int:
        return len(self.entries)

    @property
    def best(self) -> TraceEntry | None:
        if not self.entries:
            return None
        return min(self.entries, key=lambda e: (e.model_edp, e.index))

    @property
    def best_edp(self) -> float:
        return self.entries[-1].best_edp if self.entries else math.inf

    def best_curve(self) -> list[float]:
        return [e.best_edp for e in self.entries]

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# schema: {TRACE_SCHEMA}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["evaluation_index", "kind", "start", "step", "model_edp", "best_edp",
                    "oracle_edp", "pe_side", "accumulator_bytes", "scratchpad_bytes"])
        for e in self.entries:
            w.writerow([e.index, e.kind, e.start, e.step, repr(e.model_edp), repr(e.best_edp),
                        "" if e.oracle_edp is None else repr(e.oracle_edp),
                        int(round(value(e.arch.pe_side))), int(round(e.arch.accumulator_bytes)),
                        int(round(e.arch.scratchpad_bytes))])
        return buf.getvalue()


# -- hardware and mapping samplers ------------------------------------------------

def random_arch(rng: np.random.Generator, params: ArchParams | None = None,
                min_bytes: int = 1024, max_bytes: int = 1024 * 1024) -> ArchConfig:
    params = params or ArchParams()
    side = 2 ** int(rng.integers(0, int(math.log2(params.max_pe_side)) + 1))
    lo, hi = math.log(min_bytes), math.log(max_bytes)
    acc = min(round_up_kb(math.exp(rng.uniform(lo, hi))), max_bytes)
    spad = min(round_up_kb(math.exp(rng.uniform(lo, hi))), max_bytes)
    return make_arch(side, acc, spad, params)


def _largest_divisor_at_most(n: int, cap: int) -> int:
    return max(q for q in divisors(n) if q <= cap)


def _pe_side(arch: ArchConfig) -> int:
    return math.isqrt(int(round(value(arch.c_pe))))


def heuristic_mapping(layer: LayerShape, arch: ArchConfig, rng=None) -> LayerMapping:
    """Greedy mapping that fills the PE array then grows on-chip tiles.

    C and K are spread over the array as far as their divisors allow; then
    temporal factors move from DRAM into the accumulator level, then into
    the scratchpad level, one prime at a time, while the tiles still fit.
    """
    side = _pe_side(arch)
    m = uniform_mapping(layer)
    f = m.factors
    sc = _largest_divisor_at_most(layer.C, side)
    sk = _largest_divisor_at_most(layer.K, side)
    while True:
        f[:] = uniform_mapping(layer).factors
        f[SPATIAL, 1, C], f[SPATIAL, 2, K] = sc, sk
        f[TEMPORAL, DRAM, C] = layer.C // sc
        f[TEMPORAL, DRAM, K] = layer.K // sk
        if not fit_problems(m, arch):
            break
        if sc == 1 and sk == 1:
            return uniform_mapping(layer)
        if sc >= sk:
            sc = _largest_divisor_at_most(layer.C, sc - 1) if sc > 1 else 1
        else:
            sk = _largest_divisor_at_most(layer.K, sk - 1) if sk > 1 else 1
    dims = list(range(7))
    for level in (1, 2):
        grew = True
        while grew:
            grew = False
            if rng is not None:
                rng.shuffle(dims)
            for d in dims:
                rest = int(f[TEMPORAL, DRAM, d])
                if rest == 1:
                    continue
                p = prime_factors(rest)[0]
                f[TEMPORAL, level, d] *= p
                f[TEMPORAL, DRAM, d] = rest // p
                if fit_problems(m, arch):
                    f[TEMPORAL, level, d] /= p
                    f[TEMPORAL, DRAM, d] = rest
                else:
                    grew = True
    return m


def heuristic_start_mappings(network: Network, arch_seed: ArchConfig, rng=None) -> list:
    return [heuristic_mapping(layer, arch_seed, rng) for layer in network.shapes]


def random_mapping(layer: LayerShape, arch: ArchConfig, rng: np.random.Generator,
                   tries: int = 50) -> LayerMapping:
    """Random valid mapping (factors and orderings) that fits ``arch``."""
    side = _pe_side(arch)
    for _ in range(tries):
        f = np.ones((2, 4, 7))
        for d, extent in enumerate(layer.extents):
            slots = [(TEMPORAL, 1), (TEMPORAL, 2), (TEMPORAL, DRAM)]
            if d == C:
                slots.append((SPATIAL, 1))
            if d == K:
                slots.append((SPATIAL, 2))
            for p in prime_factors(extent):
                k, i = slots[int(rng.integers(len(slots)))]
                if k == SPATIAL and f[k, i, d] * p > side:
                    k, i = TEMPORAL, DRAM
                f[k, i, d] *= p
        ordering = ORDERINGS[int(rng.integers(len(ORDERINGS)))]
        m = LayerMapping(f, layer, ordering)
        if not fit_problems(m, arch):
            return m
    return heuristic_mapping(layer, arch)


def shrink_to_fit(mapping: LayerMapping, arch: ArchConfig) -> LayerMapping:
    """Move temporal factors out to DRAM until the mapping fits ``arch``."""
    m = mapping.copy()
    f = m.factors
    side = _pe_side(arch)
    for slot, d in ((1, C), (2, K)):
        while f[SPATIAL, slot, d] > side:
            p = prime_factors(int(f[SPATIAL, slot, d]))[0]
            f[SPATIAL, slot, d] /= p
            f[TEMPORAL, DRAM, d] *= p
    while fit_problems(m, arch):
        level, d = max(((i, d) for i in (2, 1) for d in range(7) if f[TEMPORAL, i, d] > 1),
                       key=lambda s: (f[TEMPORAL, s[0], s[1]], s[0]), default=(None, None))
        if level is None:
            break
        p = prime_factors(int(f[TEMPORAL, level, d]))[0]
        f[TEMPORAL, level, d] /= p
        f[TEMPORAL, DRAM, d] *= p
    return m


def reject_start_point(candidate_edp: float, best_edp: float | None) -> bool:
    return best_edp is not None and candidate_edp > REJECT_RATIO * best_edp


# -- evaluation helpers -----------------------------------------------------------

def design_arch(mappings, params: ArchParams | None = None) -> ArchConfig:
    return finalize_arch(infer_min_hw(mappings, params))


def evaluate_design(network: Network, mappings, arch: ArchConfig) -> float:
    return evaluate_network(mappings, network, arch=arch).edp


def select_orderings(network: Network, mappings: list, arch: ArchConfig) -> list:
    """Per layer, try all 27 per-level ordering combinations and keep the one
    that lowers network EDP; an ordering is only replaced on strict gain."""
    reps = network.repeats
    table = []
    for m in mappings:
        grid = m.grid()
        table.append({o: evaluate_layer(grid, m.layer, o, arch) for o in ORDERINGS})
    chosen = [m.ordering for m in mappings]
    e_tot = sum(r * table[j][o].energy for j, (r, o) in enumerate(zip(reps, chosen)))
    l_tot = sum(r * table[j][o].latency for j, (r, o) in enumerate(zip(reps, chosen)))
    for j, r in enumerate(reps):
        cur = table[j][chosen[j]]
        best_o, best_edp = chosen[j], e_tot * l_tot
        for o in ORDERINGS:
            est = table[j][o]
            e = e_tot + r * (est.energy - cur.energy)
            lt = l_tot + r * (est.latency - cur.latency)
            if e * lt < best_edp * (1 - 1e-12):
                best_o, best_edp = o, e * lt
        if best_o != chosen[j]:
            new = table[j][best_o]
            e_tot += r * (new.energy - cur.energy)
            l_tot += r * (new.latency - cur.latency)
            chosen[j] = best_o
    out = []
    for m, o in zip(mappings, chosen):
        m = m.copy()
        m.ordering = o
        out.append(m)
    return out


def _softmax_orderings(network, mappings, arch) -> list:
    out = []
    for m in mappings:
        grid = m.grid()
        ests = [evaluate_layer(grid, m.layer, o, arch) for o in UNIFORM_ORDERINGS]
        j = min(range(3), key=lambda q: ests[q].energy * ests[q].latency)
        m = m.copy()
        m.ordering = UNIFORM_ORDERINGS[j]
        out.append(m)
    return out


def _oracle_edp(network, mappings, arch):
    from .oracle import MAX_ITERATIONS, oracle_network_edp
    if any(math.prod(layer.extents) > MAX_ITERATIONS for layer in network.shapes):
        return None
    return oracle_network_edp(mappings, network.repeats, arch)


# -- gradient descent -------------------------------------------------------------

def _pack(mappings) -> np.ndarray:
    return np.concatenate([m.free_vector() for m in mappings])


def _unpack(x: np.ndarray, network: Network, orderings) -> list:
    return [mapping_from_free(x[j * N_FREE:(j + 1) * N_FREE], layer, o)
            for j, (layer, o) in enumerate(zip(network.shapes, orderings))]


def _objective(x_vars, network, orderings, mode, scale, params):
    grids = [assemble(x_vars[j * N_FREE:(j + 1) * N_FREE], layer)
             for j, layer in enumerate(network.shapes)]
    ev = evaluate_network(grids, network, orderings, mode=mode, params=params)
    return ev.objective / scale + penalty(grids)


def loss_and_grad(x: np.ndarray, network: Network, orderings, mode="fixed", scale=1.0,
                  params=None):
    xs = [Var(v) for v in x]
    out = _objective(xs, network, orderings, mode, scale, params)
    out.backward()
    return out.value, np.array([v.grad for v in xs])


def _spatial_mask(n_layers: int) -> np.ndarray:
    per = np.array([k == SPATIAL for k, _, _ in FREE_SLOTS])
    return np.tile(per, n_layers)


def _update(opt: Adam, x: np.ndarray, g: np.ndarray, log_space: bool) -> np.ndarray:
    if log_space:
        # d/du f(exp(u)) = x * df/dx
        return np.maximum(np.exp(opt.step(np.log(x), g * x)), EPS)
    return np.maximum(opt.step(x, g), EPS)


def run_gd(network: Network, config: SearchConfig, params: ArchParams | None = None,
           trace: SearchTrace | None = None) -> SearchTrace:
    if len(network) == 0:
        raise SearchError("network has no layers")
    params = params or ArchParams()
    rng = np.random.default_rng(config.seed)
    trace = trace or SearchTrace(network)
    mode = "softmax" if config.ordering_strategy == "softmax" else "fixed"
    spatial = _spatial_mask(len(network))
    best_start = None
    accepted = 0
    attempts = 0

    def out_of_budget():
        return config.budget is not None and trace.evaluations >= config.budget

    while accepted < config.n_start_points and attempts < config.max_start_attempts:
        if out_of_budget():
            break
        attempts += 1
        seed_arch = random_arch(rng, params, config.min_buffer_bytes, config.max_buffer_bytes)
        mappings = heuristic_start_mappings(network, seed_arch, rng)
        arch = design_arch(mappings, params)
        edp = evaluate_design(network, mappings, arch)
        if reject_start_point(edp, best_start):
            trace.record("rejected", accepted, 0, edp, arch, mappings)
            continue
        trace.record("start", accepted, 0, edp, arch, mappings,
                     _oracle_edp(network, mappings, arch) if config.oracle_check else None)
        trace.start_edps.append(edp)
        best_start = edp if best_start is None else min(best_start, edp)
        _descend(network, mappings, edp, config, params, trace, accepted, mode, spatial,
                 out_of_budget)
        accepted += 1
    return trace


def _descend(network, mappings, start_edp, config, params, trace, start, mode, spatial,
             out_of_budget):
    orderings = [m.ordering for m in mappings]
    x = _pack(mappings)
    opt = Adam(config.learning_rate, config.beta1, config.beta2)
    cap = float(params.max_pe_side)
    for step in range(1, config.steps_per_start + 1):
        _, g = loss_and_grad(x, network, orderings, mode, start_edp, params)
        x = _update(opt, x, g, config.log_space)
        x[spatial] = np.minimum(x[spatial], cap)
        if step % config.rounding_period == 0 or step == config.steps_per_start:
            if out_of_budget():
                return
            current = _unpack(x, network, orderings)
            rounded = [round_mapping(m, params.max_pe_side) for m in current]
            arch = design_arch(rounded, params)
            if config.ordering_strategy == "iterative":
                rounded = select_orderings(network, rounded, arch)
            elif config.ordering_strategy == "softmax":
                rounded = _softmax_orderings(network, rounded, arch)
            orderings = [m.ordering for m in rounded]
            edp = evaluate_design(network, rounded, arch)
            trace.record("round", start, step, edp, arch, rounded,
                         _oracle_edp(network, rounded, arch) if config.oracle_check else None)
            x = _pack(rounded)


# -- baselines and fixed-hardware refinement ---------------------------------------

def random_search(network: Network, budget: int, rng=None, n_hw: int = 10,
                  params: ArchParams | None = None, trace: SearchTrace | None = None,
                  min_bytes: int = 1024, max_bytes: int = 1024 * 1024) -> SearchTrace:
    """Random hardware designs, each paired with random mappings per layer."""
    if budget < 1:
        raise SearchError("budget must be positive")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    params = params or ArchParams()
    trace = trace or SearchTrace(network)
    n_hw = min(n_hw, budget)
    per_hw = [budget // n_hw + (1 if h < budget % n_hw else 0) for h in range(n_hw)]
    for h, count in enumerate(per_hw):
        arch = random_arch(rng, params, min_bytes, max_bytes)
        for _ in range(count):
            mappings = [random_mapping(layer, arch, rng) for layer in network.shapes]
            trace.record("random", h, 0, evaluate_design(network, mappings, arch), arch,
                         mappings)
    return trace


def refine_mappings_fixed_hw(network: Network, arch: ArchConfig, config: SearchConfig,
                             start: list | None = None, capacity_weight: float = 10.0):
    """Descend on temporal factors only, against a fixed PE array and buffers.

    Buffer limits enter the loss as hinge penalties; rounded mappings that
    still overflow are shrunk until they fit.  Returns ``(mappings, trace)``
    with the best fitting mappings seen (the start point included).
    """
    params = arch.params
    trace = SearchTrace(network)
    mappings = start or heuristic_start_mappings(network, arch)
    mappings = [shrink_to_fit(round_mapping(m, params.max_pe_side), arch) for m in mappings]
    edp0 = evaluate_design(network, mappings, arch)
    trace.record("start", 0, 0, edp0, arch, mappings)
    best = (edp0, mappings)
    orderings = [m.ordering for m in mappings]
    spatial = _spatial_mask(len(network))
    frozen = _pack(mappings)[spatial]
    x = _pack(mappings)
    opt = Adam(config.learning_rate, config.beta1, config.beta2)
    c1, c2 = float(value(arch.c1)), float(value(arch.c2))

    def objective(xs):
        grids = [assemble(xs[j * N_FREE:(j + 1) * N_FREE], layer)
                 for j, layer in enumerate(network.shapes)]
        ev = evaluate_network(grids, network, orderings, arch=arch)
        over = 0.0
        for g, layer in zip(grids, network.shapes):
            cap = capacity_requirements(g, layer, params.bypass)
            over = over + relu(cap.total[1] / c1 - 1.0) + relu(cap.total[2] / c2 - 1.0)
        return ev.objective / edp0 + penalty(grids) + capacity_weight * over

    for step in range(1, config.steps_per_start + 1):
        xs = [Var(v) for v in x]
        out = objective(xs)
        out.backward()
        g = np.array([v.grad for v in xs])
        g[spatial] = 0.0
        x = _update(opt, x, g, config.log_space)
        x[spatial] = frozen
        if step % config.rounding_period == 0 or step == config.steps_per_start:
            current = _unpack(x, network, orderings)
            rounded = [shrink_to_fit(round_mapping(m, params.max_pe_side), arch)
                       for m in current]
            if config.ordering_strategy == "iterative":
                rounded = select_orderings(network, rounded, arch)
            orderings = [m.ordering for m in rounded]
            edp = evaluate_design(network, rounded, arch)
            trace.record("round", 0, step, edp, arch, rounded)
            if edp < best[0]:
                best = (edp, rounded)
            x = _pack(rounded)
    return [m.copy() for m in best[1]], trace


# -- design bundles ----------------------------------------------------------------

def format_design(network: Network, mappings, arch: ArchConfig) -> str:
    parts = [f"# design for {network.name}", format_arch(arch)]
    parts += [format_mapping(m, j) for j, m in enumerate(mappings)]
    return "\n".join(parts) + "\n"


def parse_design(text: str, network: Network, params: ArchParams | None = None):
    arch = parse_arch(text, params)
    mappings = parse_mappings(text, network.shapes)
    return arch, mappings


def summarize(trace: SearchTrace) -> dict:
    best = trace.best
    start = min(trace.start_edps) if trace.start_edps else None
    return {
        "evaluations": trace.evaluations,
        "final_edp": best.model_edp if best else None,
        "start_edp": start,
        "improvement_over_start": (start / best.model_edp) if best and start else None,
    }

