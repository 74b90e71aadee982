"""Per-layer mappings: tiling-factor grids, loop orderings, rounding, validity.

A factor grid is indexed ``grid[k][i][d]`` with ``k`` in (SPATIAL, TEMPORAL),
memory level ``i`` in 0..3 (registers, accumulator, scratchpad, DRAM) and
problem dimension ``d`` in R,S,P,Q,C,K,N.  Grids are nested lists so the cost
model can run on floats or on :class:`~diffdse.gradient.Var` entries.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from itertools import product as iproduct

import numpy as np

from .gradient import vprod
from .workload import DIMS, RELEVANT, C, K, W, I, O, LayerShape

SPATIAL, TEMPORAL = 0, 1
LEVELS = 4
DRAM = 3
EPS = 1e-3

# Only C fans out below the accumulator and K below the scratchpad.
SPATIAL_SLOTS = ((1, C), (2, K))

# Free optimization variables per layer; DRAM temporal factors are derived.
FREE_SLOTS = (
    [(TEMPORAL, 1, d) for d in range(7)]
    + [(TEMPORAL, 2, d) for d in range(7)]
    + [(SPATIAL, i, d) for i, d in SPATIAL_SLOTS]
)
N_FREE = len(FREE_SLOTS)

ORDER_CHOICES = ("WS", "IS", "OS")
_STATIONARY = {"WS": W, "IS": I, "OS": O}
ORDERINGS = list(iproduct(ORDER_CHOICES, repeat=3))


def loop_order(choice: str) -> tuple[int, ...]:
    """Temporal loop order (outer to inner) at one level.

    The stationary tensor's dimensions are iterated outermost so its tile is
    reused across every inner loop that does not index it.
    """
    rel = RELEVANT[_STATIONARY[choice]]
    return tuple(d for d in range(7) if d in rel) + tuple(d for d in range(7) if d not in rel)


LOOP_ORDER = {c: loop_order(c) for c in ORDER_CHOICES}


class MappingError(ValueError):
    pass


@dataclass
class LayerMapping:
    factors: np.ndarray  # (2, 4, 7)
    layer: LayerShape
    ordering: tuple[str, str, str] = ("WS", "WS", "WS")

    def __post_init__(self):
        self.factors = np.asarray(self.factors, dtype=float)
        if self.factors.shape != (2, LEVELS, 7):
            raise MappingError(f"factor grid must have shape (2, 4, 7), got {self.factors.shape}")
        self.ordering = tuple(self.ordering)
        if len(self.ordering) != 3 or any(o not in ORDER_CHOICES for o in self.ordering):
            raise MappingError(f"bad ordering {self.ordering!r}")

    def grid(self) -> list:
        return self.factors.tolist()

    def free_vector(self) -> np.ndarray:
        return np.array([self.factors[k, i, d] for k, i, d in FREE_SLOTS])

    def copy(self) -> "LayerMapping":
        return LayerMapping(self.factors.copy(), self.layer, self.ordering)

    @property
    def spatial_c(self) -> float:
        return float(self.factors[SPATIAL, 1, C])

    @property
    def spatial_k(self) -> float:
        return float(self.factors[SPATIAL, 2, K])


def empty_grid() -> list:
    return [[[1.0] * 7 for _ in range(LEVELS)] for _ in range(2)]


def derive_dram_factors(grid: list, layer: LayerShape) -> list:
    """Fill the DRAM temporal factors so each dimension's product is exact.

    Values below 1 are left in place; the validity penalty pushes them back.
    """
    for d, extent in enumerate(layer.extents):
        inner = vprod(grid[k][i][d] for k in range(2) for i in range(LEVELS)
                      if (k, i) != (TEMPORAL, DRAM))
        grid[TEMPORAL][DRAM][d] = extent / inner
    return grid


def assemble(free, layer: LayerShape) -> list:
    """Build a full grid from a free-variable vector (floats or Vars)."""
    grid = empty_grid()
    for (k, i, d), x in zip(FREE_SLOTS, free):
        grid[k][i][d] = x
    return derive_dram_factors(grid, layer)


def uniform_mapping(layer: LayerShape) -> LayerMapping:
    grid = derive_dram_factors(empty_grid(), layer)
    return LayerMapping(np.array(grid), layer, ("WS", "WS", "WS"))


def mapping_from_free(free, layer: LayerShape, ordering=("WS", "WS", "WS")) -> LayerMapping:
    grid = assemble([float(x) for x in free], layer)
    return LayerMapping(np.array(grid), layer, ordering)


def divisors(n: int) -> list[int]:
    small, large = [], []
    j = 1
    while j * j <= n:
        if n % j == 0:
            small.append(j)
            if j * j != n:
                large.append(n // j)
        j += 1
    return small + large[::-1]


def nearest_divisor(x: float, n: int, cap: int | None = None) -> int:
    """Divisor of ``n`` closest to ``x``; exact ties go to the smaller one."""
    best = 1
    best_gap = abs(x - 1)
    for q in divisors(n):
        if cap is not None and q > cap:
            break
        gap = abs(x - q)
        if gap < best_gap:
            best, best_gap = q, gap
    return best


def round_mapping(mapping: LayerMapping, max_spatial: int = 128) -> LayerMapping:
    """Project real-valued factors onto a valid integer mapping.

    Dimensions are handled in R,S,P,Q,C,K,N order; within a dimension the free
    factors are rounded from the innermost level outwards (spatial before
    temporal at a level).  Each factor snaps to the nearest divisor of what is
    left of the extent, so the running product always divides the extent and
    the DRAM factor comes out as an exact integer.
    """
    f = mapping.factors
    out = np.ones_like(f)
    for d, extent in enumerate(mapping.layer.extents):
        remaining = extent
        for i in range(DRAM):
            for k in (SPATIAL, TEMPORAL):
                if (k, i, d) not in _FREE_SET:
                    continue
                cap = max_spatial if k == SPATIAL else None
                q = nearest_divisor(float(f[k, i, d]), remaining, cap)
                out[k, i, d] = q
                remaining //= q
        out[TEMPORAL, DRAM, d] = remaining
    return LayerMapping(out, mapping.layer, mapping.ordering)


_FREE_SET = frozenset(FREE_SLOTS)


@dataclass
class Validation:
    ok: bool
    problems: list[str] = field(default_factory=list)

    def __bool__(self):
        return self.ok


def validate(mapping: LayerMapping, layer: LayerShape | None = None) -> Validation:
    layer = layer or mapping.layer
    f = mapping.factors
    problems = []
    for k, i, d in iproduct(range(2), range(LEVELS), range(7)):
        x = f[k, i, d]
        tag = f"f[{'ST'[k]},{i},{DIMS[d]}]={x:g}"
        if not (x >= 1 and float(x).is_integer()):
            problems.append(f"{tag} is not a positive integer")
        elif k == SPATIAL and (i, d) not in SPATIAL_SLOTS and x != 1:
            problems.append(f"{tag}: spatial factor outside the C/K dataflow")
        elif k == TEMPORAL and i == 0 and x != 1:
            problems.append(f"{tag}: register-level temporal factors must be 1")
    for d, extent in enumerate(layer.extents):
        total = float(np.prod(f[:, :, d]))
        if total != extent:
            problems.append(f"dimension {DIMS[d]}: factor product {total:g} != extent {extent}")
    return Validation(not problems, problems)


def format_mapping(mapping: LayerMapping, index: int) -> str:
    lines = [f"mapping {index}", "  order " + " ".join(
        f"L{i + 1}={o}" for i, o in enumerate(mapping.ordering))]
    for k in range(2):
        for i in range(LEVELS):
            row = " ".join(f"{mapping.factors[k, i, d]:.17g}" for d in range(7))
            lines.append(f"  {'ST'[k]}{i}: {row}")
    return "\n".join(lines)


def parse_mappings(text: str, layers: list[LayerShape]) -> list[LayerMapping]:
    """Read every ``mapping`` block; block ``j`` belongs to ``layers[j]``."""
    blocks: dict[int, dict] = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("mapping "):
            try:
                current = int(line.split()[1])
            except (IndexError, ValueError):
                raise MappingError(f"line {lineno}: bad mapping header {line!r}") from None
            blocks[current] = {"rows": {}, "order": None}
            continue
        if current is None:
            continue
        if line.startswith("order "):
            vals = dict(tok.split("=", 1) for tok in line.split()[1:])
            blocks[current]["order"] = tuple(vals.get(f"L{i}", "") for i in (1, 2, 3))
            continue
        head, sep, rest = line.partition(":")
        if sep and len(head) == 2 and head[0] in "ST" and head[1] in "0123":
            try:
                row = [float(v) for v in rest.split()]
            except ValueError:
                raise MappingError(f"line {lineno}: non-numeric factor") from None
            if len(row) != 7:
                raise MappingError(f"line {lineno}: expected 7 factors, got {len(row)}")
            blocks[current]["rows"][head] = row
        else:
            # Anything else ends the mapping block (e.g. an arch section).
            current = None
    out = []
    for j, layer in enumerate(layers):
        if j not in blocks:
            raise MappingError(f"no mapping for layer {j}")
        b = blocks[j]
        grid = np.ones((2, LEVELS, 7))
        for key, row in b["rows"].items():
            grid["ST".index(key[0]), int(key[1])] = row
        if len(b["rows"]) != 8:
            raise MappingError(f"mapping {j}: expected 8 factor rows, got {len(b['rows'])}")
        out.append(LayerMapping(grid, layer, b["order"] or ("WS", "WS", "WS")))
    return out


def prime_factors(n: int) -> list[int]:
    out = []
    p = 2
    while p * p <= n:
        while n % p == 0:
            out.append(p)
            n //= p
        p += 1
    if n > 1:
        out.append(n)
    return out

