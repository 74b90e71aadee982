"""Accelerator template, capacity requirements and minimal-hardware inference.

The template is a Gemmini-like weight-stationary accelerator: a square PE
array with per-PE weight registers (level 0), an output accumulator (1), a
scratchpad for weights and inputs (2) and DRAM (3).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace

from .gradient import maximum, sqrt, value, vprod
from .mapping import LEVELS, SPATIAL, TEMPORAL, LayerMapping
from .workload import C, K, N, P, Q, R, S, LayerShape

KB = 1024

# Rows are memory levels 0..3, columns are tensors W, I, O.
DEFAULT_BYPASS = (
    (1, 0, 0),
    (0, 0, 1),
    (1, 1, 0),
    (1, 1, 1),
)

LEVEL_NAMES = ("registers", "accumulator", "scratchpad", "DRAM")


class ArchError(ValueError):
    pass


def check_bypass(bypass) -> None:
    if len(bypass) != LEVELS or any(len(row) != 3 for row in bypass):
        raise ArchError("bypass matrix must be 4 x 3")
    if tuple(bypass[-1]) != (1, 1, 1):
        raise ArchError("every tensor must be stored in DRAM")


@dataclass(frozen=True)
class ArchParams:
    """Technology constants; defaults follow a 40nm-class table."""
    epa_pe: float = 0.561
    epa_registers: float = 0.487
    epa_acc_base: float = 1.94
    epa_acc_slope: float = 0.1005
    epa_spad_base: float = 0.49
    epa_spad_slope: float = 0.025
    epa_dram: float = 100.0
    dram_bandwidth: float = 8.0
    max_pe_side: int = 128
    register_word_bytes: int = 1
    accumulator_word_bytes: int = 4
    scratchpad_word_bytes: int = 1
    dram_word_bytes: int = 1
    bypass: tuple = DEFAULT_BYPASS

    def __post_init__(self):
        check_bypass(self.bypass)

    @property
    def word_bytes(self) -> tuple[int, int, int, int]:
        return (self.register_word_bytes, self.accumulator_word_bytes,
                self.scratchpad_word_bytes, self.dram_word_bytes)


def parse_arch_template(text: str) -> ArchParams:
    """``key = value`` lines overriding :class:`ArchParams` defaults."""
    known = {f.name: f.type for f in fields(ArchParams) if f.name != "bypass"}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if not sep or key not in known:
            raise ArchError(f"line {lineno}: unknown arch template entry {line!r}")
        try:
            values[key] = int(val) if known[key] == "int" else float(val)
        except ValueError:
            raise ArchError(f"line {lineno}: bad value for {key}: {val!r}") from None
    return ArchParams(**values)


def format_arch_template(params: ArchParams) -> str:
    return "\n".join(f"{f.name} = {getattr(params, f.name)}"
                     for f in fields(ArchParams) if f.name != "bypass") + "\n"


@dataclass
class ArchConfig:
    """One hardware design point.

    ``c_pe``, ``c1`` and ``c2`` are the PE count and the accumulator and
    scratchpad capacities in words.  During descent they may be real-valued
    (or Vars); ``finalize_arch`` snaps buffers to whole KB.
    """
    c_pe: float
    c1: float
    c2: float
    params: ArchParams = field(default_factory=ArchParams)
    pe_capped: bool = False
    # Raw per-parameter requirements before KB rounding, when inferred.
    requirements: dict | None = None

    @property
    def pe_side(self):
        return sqrt(self.c_pe)

    @property
    def accumulator_bytes(self) -> float:
        return value(self.c1) * self.params.accumulator_word_bytes

    @property
    def scratchpad_bytes(self) -> float:
        return value(self.c2) * self.params.scratchpad_word_bytes


def epa(arch: ArchConfig, level):
    """Energy per access for ``level`` in 0..3, or ``"PE"`` for one MAC."""
    p = arch.params
    if level == "PE":
        return p.epa_pe
    if level == 0:
        return p.epa_registers
    if level == 1:
        return p.epa_acc_base + p.epa_acc_slope * arch.c1 / sqrt(arch.c_pe)
    if level == 2:
        return p.epa_spad_base + p.epa_spad_slope * arch.c2
    if level == 3:
        return p.epa_dram
    raise ArchError(f"unknown level {level!r}")


def bandwidth(arch: ArchConfig, level):
    """Words per cycle."""
    if level == 0:
        return 2 * arch.c_pe
    if level in (1, 2):
        return 2 * sqrt(arch.c_pe)
    if level == 3:
        return arch.params.dram_bandwidth
    raise ArchError(f"unknown level {level!r}")


def pe_requirement(grid):
    """Square array large enough for both spatial factors."""
    side = maximum([grid[SPATIAL][1][C], grid[SPATIAL][2][K]])
    return side * side


@dataclass
class CapacityReport:
    per_tensor: list  # [level][tensor] words
    total: list       # [level] words, masked by the bypass matrix


def inner_factor(grid, level: int, d: int):
    """Product of spatial and temporal factors of ``d`` at levels 0..level."""
    return vprod(grid[k][j][d] for j in range(level + 1) for k in (SPATIAL, TEMPORAL))


def capacity_requirements(grid, layer: LayerShape, bypass=DEFAULT_BYPASS) -> CapacityReport:
    """Words of each tensor a level must hold for the tile it serves.

    A level's tile spans its own loops and everything inside it, so the DRAM
    entry is the whole tensor.
    """
    per_tensor, total = [], []
    for i in range(LEVELS):
        inner = [inner_factor(grid, i, d) for d in range(7)]
        cw = inner[R] * inner[S] * inner[C] * inner[K]
        height = layer.Pstride * (inner[P] - 1) + inner[R]
        width = layer.Qstride * (inner[Q] - 1) + inner[S]
        ci = inner[C] * inner[N] * height * width
        co = inner[P] * inner[Q] * inner[K] * inner[N]
        row = [cw, ci, co]
        per_tensor.append(row)
        total.append(sum(row[t] for t in range(3) if bypass[i][t]))
    return CapacityReport(per_tensor, total)


def infer_min_hw(mappings, params: ArchParams | None = None) -> ArchConfig:
    """Smallest design supporting every mapping: parameter-wise max.

    ``mappings`` holds LayerMappings or raw grids paired with their layers as
    ``(grid, layer)`` tuples.  Capacities stay in words and unrounded; see
    :func:`finalize_arch`.
    """
    if not mappings:
        raise ArchError("need at least one mapping")
    params = params or ArchParams()
    pes, c1s, c2s = [], [], []
    for m in mappings:
        if isinstance(m, LayerMapping):
            grid, layer = m.grid(), m.layer
        else:
            grid, layer = m
        cap = capacity_requirements(grid, layer, params.bypass)
        pes.append(pe_requirement(grid))
        c1s.append(cap.total[1])
        c2s.append(cap.total[2])
    c_pe = maximum(pes)
    c1 = maximum(c1s)
    c2 = maximum(c2s)
    capped = value(c_pe) > params.max_pe_side ** 2
    if capped:
        c_pe = float(params.max_pe_side ** 2)
    req = {
        "c_pe": value(maximum(pes)), "c1": value(c1), "c2": value(c2),
        "c_pe_argmax": _argmax(pes), "c1_argmax": _argmax(c1s), "c2_argmax": _argmax(c2s),
    }
    return ArchConfig(c_pe, c1, c2, params, pe_capped=capped, requirements=req)


def _argmax(xs) -> int:
    vals = [value(x) for x in xs]
    return vals.index(max(vals))


def round_up_kb(nbytes: float) -> int:
    return max(1, math.ceil(nbytes / KB - 1e-9)) * KB


def finalize_arch(arch: ArchConfig) -> ArchConfig:
    """Integer PE side and whole-KB buffers (capacities reported in words)."""
    p = arch.params
    side = min(math.ceil(value(arch.pe_side) - 1e-9), p.max_pe_side)
    acc = round_up_kb(value(arch.c1) * p.accumulator_word_bytes)
    spad = round_up_kb(value(arch.c2) * p.scratchpad_word_bytes)
    return replace(arch, c_pe=side * side, c1=acc / p.accumulator_word_bytes,
                   c2=spad / p.scratchpad_word_bytes)


def make_arch(pe_side: int, acc_bytes: int, spad_bytes: int,
              params: ArchParams | None = None) -> ArchConfig:
    params = params or ArchParams()
    if not 1 <= pe_side <= params.max_pe_side:
        raise ArchError(f"PE side {pe_side} outside [1, {params.max_pe_side}]")
    return ArchConfig(pe_side * pe_side, acc_bytes / params.accumulator_word_bytes,
                      spad_bytes / params.scratchpad_word_bytes, params)


def fit_problems(mapping: LayerMapping, arch: ArchConfig, tol: float = 1e-9) -> list[str]:
    """Capacity/PE violations of ``mapping`` on ``arch`` (empty list if it fits)."""
    grid = mapping.grid()
    cap = capacity_requirements(grid, mapping.layer, arch.params.bypass)
    problems = []
    side = math.isqrt(int(round(value(arch.c_pe))))
    if mapping.spatial_c > side or mapping.spatial_k > side:
        problems.append(f"spatial factors {mapping.spatial_c:g}x{mapping.spatial_k:g} "
                        f"exceed the {side}x{side} PE array")
    if cap.total[1] > value(arch.c1) * (1 + tol):
        problems.append(f"accumulator needs {cap.total[1]:g} words, has {value(arch.c1):g}")
    if cap.total[2] > value(arch.c2) * (1 + tol):
        problems.append(f"scratchpad needs {cap.total[2]:g} words, has {value(arch.c2):g}")
    return problems


def format_arch(arch: ArchConfig) -> str:
    a = finalize_arch(arch) if not _is_final(arch) else arch
    return "\n".join([
        "arch",
        f"  pe_side = {math.isqrt(int(round(value(a.c_pe))))}",
        f"  accumulator_bytes = {int(round(a.accumulator_bytes))}",
        f"  scratchpad_bytes = {int(round(a.scratchpad_bytes))}",
    ])


def _is_final(arch: ArchConfig) -> bool:
    side = math.isqrt(int(round(value(arch.c_pe))))
    return (side * side == value(arch.c_pe)
            and arch.accumulator_bytes % KB == 0 and arch.scratchpad_bytes % KB == 0)


def parse_arch(text: str, params: ArchParams | None = None) -> ArchConfig:
    """Read the ``arch`` block of a design bundle."""
    vals = {}
    inside = False
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if line == "arch":
            inside = True
            continue
        if inside:
            key, sep, val = line.partition("=")
            if not sep:
                inside = False
                continue
            vals[key.strip()] = int(val)
    missing = {"pe_side", "accumulator_bytes", "scratchpad_bytes"} - set(vals)
    if missing:
        raise ArchError(f"arch block missing {', '.join(sorted(missing))}")
    return make_arch(vals["pe_side"], vals["accumulator_bytes"], vals["scratchpad_bytes"], params)

