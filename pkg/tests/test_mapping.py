import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from diffdse.mapping import (DRAM, EPS, FREE_SLOTS, LOOP_ORDER, N_FREE, ORDERINGS, SPATIAL,
                             TEMPORAL, LayerMapping, MappingError, assemble, derive_dram_factors,
                             empty_grid, format_mapping, nearest_divisor, parse_mappings,
                             round_mapping, uniform_mapping, validate)
from diffdse.workload import C, K, P, Q, R, S, N, LayerShape

L0 = LayerShape(R=1, S=1, P=2, Q=2, C=2, K=2, N=1)


def test_free_variable_count():
    assert N_FREE == 16
    assert len(ORDERINGS) == 27


def test_uniform_all_ones_layer():
    m = uniform_mapping(LayerShape(1, 1, 1, 1, 1, 1, 1))
    assert np.all(m.factors == 1)
    assert validate(m)


def test_uniform_puts_extent_at_dram():
    m = uniform_mapping(LayerShape(1, 1, 4, 1, 1, 1, 1))
    assert m.factors[TEMPORAL, DRAM, P] == 4
    others = [m.factors[k, i, P] for k in range(2) for i in range(4) if (k, i) != (TEMPORAL, DRAM)]
    assert all(x == 1 for x in others)
    assert m.ordering == ("WS", "WS", "WS")


def test_uniform_product_constraint():
    layer = LayerShape(3, 3, 8, 8, 16, 32, 2, 2, 2)
    m = uniform_mapping(layer)
    assert np.allclose(np.prod(m.factors, axis=(0, 1)), layer.extents)


def test_derive_dram_division():
    layer = LayerShape(1, 1, 12, 1, 1, 1, 1)
    g = empty_grid()
    g[TEMPORAL][1][P] = 4
    assert derive_dram_factors(g, layer)[TEMPORAL][DRAM][P] == 3
    g[TEMPORAL][2][P] = 6
    assert derive_dram_factors(g, layer)[TEMPORAL][DRAM][P] == 0.5
    assert derive_dram_factors(empty_grid(), layer)[TEMPORAL][DRAM][P] == 12


@pytest.mark.parametrize("x,want", [(2.6, 3), (2.5, 2), (1.0, 1), (11.9, 12), (EPS, 1)])
def test_nearest_divisor_of_12(x, want):
    assert nearest_divisor(x, 12) == want


def test_round_single_factor():
    layer = LayerShape(1, 1, 12, 1, 1, 1, 1)
    f = uniform_mapping(layer).factors
    f[TEMPORAL, 1, P] = 2.6
    m = round_mapping(LayerMapping(f, layer))
    assert m.factors[TEMPORAL, 1, P] == 3
    assert m.factors[TEMPORAL, DRAM, P] == 4


def test_round_respects_remaining_quotient():
    layer = LayerShape(1, 1, 12, 1, 1, 1, 1)
    f = uniform_mapping(layer).factors
    f[TEMPORAL, 1, P] = 4
    f[TEMPORAL, 2, P] = 4
    m = round_mapping(LayerMapping(f, layer))
    assert m.factors[TEMPORAL, 1, P] == 4
    assert m.factors[TEMPORAL, 2, P] == 3
    assert m.factors[TEMPORAL, DRAM, P] == 1


def test_round_caps_spatial():
    layer = LayerShape(1, 1, 1, 1, 256, 1, 1)
    f = uniform_mapping(layer).factors
    f[SPATIAL, 1, C] = 250.0
    m = round_mapping(LayerMapping(f, layer), max_spatial=128)
    assert m.factors[SPATIAL, 1, C] == 128


def _random_layer(draw):
    ext = st.sampled_from([1, 2, 3, 4, 6, 8, 12])
    return LayerShape(*(draw(ext) for _ in range(7)))


@st.composite
def continuous_mappings(draw):
    layer = _random_layer(draw)
    free = [draw(st.floats(EPS, 20.0)) for _ in range(N_FREE)]
    grid = assemble(free, layer)
    return LayerMapping(np.array(grid), layer, draw(st.sampled_from(ORDERINGS)))


@settings(max_examples=80, deadline=None)
@given(continuous_mappings())
def test_rounding_yields_valid_and_is_idempotent(m):
    r = round_mapping(m)
    assert validate(r), validate(r).problems
    assert np.array_equal(np.prod(r.factors, axis=(0, 1)), np.array(m.layer.extents, float))
    again = round_mapping(r)
    assert np.array_equal(again.factors, r.factors)
    assert again.ordering == m.ordering


def test_validate_flags_fraction():
    m = uniform_mapping(L0)
    m.factors[TEMPORAL, 1, P] = 1.5
    v = validate(m)
    assert not v
    assert any("f[T,1,P]=1.5" in p for p in v.problems)


def test_validate_flags_zero_even_if_product_matches():
    m = uniform_mapping(LayerShape(1, 1, 1, 1, 1, 1, 1))
    m.factors[TEMPORAL, 1, P] = 0
    m.factors[TEMPORAL, 2, P] = 0
    assert not validate(m)


def test_validate_spatial_mask():
    layer = LayerShape(1, 1, 4, 1, 1, 1, 1)
    m = uniform_mapping(layer)
    m.factors[SPATIAL, 1, P] = 2
    m.factors[TEMPORAL, DRAM, P] = 2
    v = validate(m)
    assert not v and any("spatial" in p for p in v.problems)


def test_validate_register_temporal_fixed():
    layer = LayerShape(1, 1, 4, 1, 1, 1, 1)
    m = uniform_mapping(layer)
    m.factors[TEMPORAL, 0, P] = 2
    m.factors[TEMPORAL, DRAM, P] = 2
    assert not validate(m)


def test_loop_orders_are_permutations():
    for order in LOOP_ORDER.values():
        assert sorted(order) == list(range(7))
    # stationary tensor's dimensions come first
    assert set(LOOP_ORDER["WS"][:4]) == {R, S, C, K}
    assert set(LOOP_ORDER["OS"][:4]) == {P, Q, K, N}
    assert set(LOOP_ORDER["IS"][:6]) == {R, S, P, Q, C, N}


def test_format_parse_roundtrip():
    layer = LayerShape(3, 3, 4, 4, 8, 8, 1, 2, 1)
    m = uniform_mapping(layer)
    m.factors[SPATIAL, 1, C] = 4
    m.factors[TEMPORAL, DRAM, C] = 2
    m.ordering = ("IS", "OS", "WS")
    text = format_mapping(m, 0)
    back = parse_mappings(text, [layer])[0]
    assert np.array_equal(back.factors, m.factors)
    assert back.ordering == m.ordering


def test_parse_rejects_short_row():
    with pytest.raises(MappingError, match="7 factors"):
        parse_mappings("mapping 0\n  S0: 1 1 1\n", [L0])


def test_bad_ordering_rejected():
    with pytest.raises(MappingError):
        LayerMapping(np.ones((2, 4, 7)), L0, ("WS", "XX", "WS"))


def test_free_slots_exclude_dram_and_registers():
    assert all(i in (1, 2) for _, i, _ in FREE_SLOTS)
    assert (SPATIAL, 1, C) in FREE_SLOTS and (SPATIAL, 2, K) in FREE_SLOTS
