"""Shared builders for tests."""
import numpy as np

from diffdse.mapping import DRAM, ORDERINGS, SPATIAL, TEMPORAL, LayerMapping
from diffdse.mapping import prime_factors
from diffdse.workload import C, K, LayerShape

L0 = LayerShape(R=1, S=1, P=2, Q=2, C=2, K=2, N=1)

SMALL_LAYERS = [
    L0,
    LayerShape(R=3, S=3, P=4, Q=4, C=2, K=2, N=1),
    LayerShape(R=2, S=1, P=4, Q=2, C=4, K=4, N=2, Pstride=2, Qstride=1),
    LayerShape(R=1, S=3, P=2, Q=4, C=8, K=2, N=1, Pstride=1, Qstride=2),
    LayerShape(R=1, S=1, P=8, Q=1, C=4, K=8, N=1),
    LayerShape(R=3, S=2, P=3, Q=2, C=3, K=6, N=2, Pstride=2, Qstride=2),
]


def random_valid_mapping(layer, rng, ordering=None):
    """Scatter each prime factor of every extent over the legal slots."""
    f = np.ones((2, 4, 7))
    for d, extent in enumerate(layer.extents):
        slots = [(TEMPORAL, 1), (TEMPORAL, 2), (TEMPORAL, DRAM)]
        if d == C:
            slots.append((SPATIAL, 1))
        if d == K:
            slots.append((SPATIAL, 2))
        for p in prime_factors(extent):
            k, i = slots[int(rng.integers(len(slots)))]
            f[k, i, d] *= p
    if ordering is None:
        ordering = ORDERINGS[int(rng.integers(len(ORDERINGS)))]
    return LayerMapping(f, layer, ordering)
