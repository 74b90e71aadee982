import numpy as np
import pytest

from diffdse.arch import ArchConfig, DEFAULT_BYPASS
from diffdse.gradient import Var
from diffdse.mapping import (DRAM, SPATIAL, TEMPORAL, LayerMapping, N_FREE, assemble,
                             uniform_mapping)
from diffdse.oracle import oracle_network_edp, simulate_traffic
from diffdse.perfmodel import (TrafficReport, energy, evaluate_layer, evaluate_network,
                               latency, network_edp, penalty, refetch_factor,
                               softmax_ordering_loss, softmax_weights, traffic)
from diffdse.search import design_arch
from diffdse.workload import RELEVANT, C, K, O, P, W, LayerShape, Network, layer_macs

from helpers import L0, SMALL_LAYERS, random_valid_mapping


@pytest.mark.parametrize("dram,want", [("IS", 16), ("OS", 16), ("WS", 4)])
def test_l0_weight_refills_depend_on_dram_order(dram, want):
    # With P,Q looped outside C,K the weight tile is refetched for every output
    # position; with C,K outermost the P,Q loops reuse it.
    m = uniform_mapping(L0)
    rep = traffic(m.grid(), L0, ("WS", "WS", dram))
    assert rep.writes[2][W] == want
    assert simulate_traffic(LayerMapping(m.factors, L0, ("WS", "WS", dram))).writes[2][W] == want


def test_spatial_accumulation_updates():
    m = uniform_mapping(L0)
    m.factors[SPATIAL, 1, C] = 2
    m.factors[TEMPORAL, DRAM, C] = 1
    rep = traffic(m.grid(), L0, m.ordering)
    assert rep.macs == 16
    assert rep.updates[1][O] == 8


def test_unit_refetch_when_no_outer_loops():
    m = uniform_mapping(L0)
    assert refetch_factor(m.grid(), m.ordering, DRAM, W) == 1


def _report(level_accesses, macs):
    writes = [[0.0] * 3 for _ in range(4)]
    for i, a in enumerate(level_accesses):
        t = next(t for t in range(3) if DEFAULT_BYPASS[i][t])
        writes[i][t] = float(a)
    zeros = [[0.0] * 3 for _ in range(4)]
    return TrafficReport(writes, zeros, [row[:] for row in zeros], float(macs), DEFAULT_BYPASS)


def _grid_with_pes(sc, sk):
    g = uniform_mapping(LayerShape(1, 1, 1, 1, 8, 8, 1)).grid()
    g[SPATIAL][1][C], g[SPATIAL][2][K] = sc, sk
    return g


def test_compute_latency():
    arch = ArchConfig(4, 1, 1)
    lat, compute, _ = latency(_report([0, 0, 0, 0], 16), arch, _grid_with_pes(2, 2))
    assert compute == 4 and lat == 4


def test_dram_latency_and_roofline_max():
    arch = ArchConfig(4, 1, 1)     # bandwidths 8, 4, 4, 8
    lat, compute, mem = latency(_report([8, 8, 12, 80], 16), arch, _grid_with_pes(2, 2))
    assert mem == [1, 2, 3, 10]
    assert compute == 4
    assert lat == 10


def test_energy_examples():
    arch = ArchConfig(4, 1, 1)
    assert energy(_report([0, 0, 0, 0], 10), arch)[0] == pytest.approx(5.61)
    assert energy(_report([0, 0, 0, 100], 0), arch)[0] == 10000


def test_network_edp_examples():
    assert network_edp([2, 3], [5, 7], [1, 1]) == 60
    assert network_edp([2, 3], [5, 7], [2, 2]) == 240
    assert network_edp([3], [4], [1]) == 12


def test_softmax_weights():
    w = softmax_weights([1, 1, 1], [2, 2, 2])
    assert w == pytest.approx([1 / 3] * 3)
    w = softmax_weights([1e-3, 1, 1], [1e-3, 1, 1])
    assert w[0] == pytest.approx(1.0)
    w = softmax_weights([1, 2, 3], [3, 1, 2])
    assert sum(w) == pytest.approx(1.0) and all(0 < x < 1 for x in w)


def test_softmax_loss_reduces_to_edp_for_equal_pairs():
    pairs = [[(2.0, 5.0)] * 3, [(3.0, 7.0)] * 3]
    assert softmax_ordering_loss(pairs, [1, 1]) == pytest.approx(60)


def test_penalty_examples():
    assert penalty([[[[0.5, 1.2, 0.9]]]]) == pytest.approx(0.6)
    assert penalty([uniform_mapping(L0).grid()]) == 0
    layer = LayerShape(1, 1, 12, 1, 1, 1, 1)
    free = [1.0] * N_FREE
    free[P] = 24.0          # T1,P over-tiles the extent
    grid = assemble(free, layer)
    assert grid[TEMPORAL][DRAM][P] == 0.5
    assert penalty([grid]) == pytest.approx(0.5)


def test_single_layer_network_edp():
    net = Network("one", [(SMALL_LAYERS[1], 1)])
    m = uniform_mapping(SMALL_LAYERS[1])
    ev = evaluate_network([m], net)
    est = ev.estimates[0]
    assert ev.edp == pytest.approx(est.energy * est.latency)
    net2 = Network("two", [(SMALL_LAYERS[1], 2)])
    assert evaluate_network([m], net2, arch=ev.arch).edp == pytest.approx(4 * ev.edp)


def test_network_value_matches_oracle_recomputation():
    rng = np.random.default_rng(11)
    layers = SMALL_LAYERS[:4]
    net = Network("n", [(layer, j + 1) for j, layer in enumerate(layers)])
    ms = [random_valid_mapping(layer, rng) for layer in layers]
    arch = design_arch(ms)
    model = evaluate_network(ms, net, arch=arch).edp
    oracle = oracle_network_edp(ms, net.repeats, arch)
    assert model == pytest.approx(oracle, rel=1e-12)


def test_estimate_bounds():
    rng = np.random.default_rng(2)
    for layer in SMALL_LAYERS:
        m = random_valid_mapping(layer, rng)
        arch = design_arch([m])
        est = evaluate_layer(m.grid(), layer, m.ordering, arch)
        assert est.latency >= est.compute_latency
        assert all(est.latency >= x for x in est.mem_latency)
        assert est.energy >= layer_macs(layer) * 0.561
        # every PE busy: latency at least MACs / PE count
        pes = m.factors[SPATIAL, 1, C] * m.factors[SPATIAL, 2, K]
        assert est.latency >= layer_macs(layer) / pes


def test_bypassed_entries_are_zero_and_accesses_add_up():
    rng = np.random.default_rng(4)
    m = random_valid_mapping(SMALL_LAYERS[2], rng)
    rep = traffic(m.grid(), m.layer, m.ordering)
    for i in range(4):
        total = 0.0
        for t in range(3):
            if not DEFAULT_BYPASS[i][t]:
                assert rep.writes[i][t] == rep.reads[i][t] == rep.updates[i][t] == 0
            else:
                total += rep.writes[i][t] + rep.reads[i][t] + rep.updates[i][t]
        assert rep.accesses(i) == total


def test_read_conservation_cascade():
    rng = np.random.default_rng(8)
    for layer in SMALL_LAYERS:
        m = random_valid_mapping(layer, rng)
        g = m.grid()
        rep = traffic(g, layer, m.ordering)
        for t in range(3):
            held = [i for i in range(4) if DEFAULT_BYPASS[i][t]]
            for inner, outer in zip(held, held[1:]):
                fs = 1.0
                irrelevant = {1: C, 2: K}
                if outer in irrelevant and irrelevant[outer] not in RELEVANT[t]:
                    fs = g[SPATIAL][outer][irrelevant[outer]]
                assert rep.reads[outer][t] == pytest.approx(rep.writes[inner][t] / fs)


def test_dram_factor_monotone_in_inner_writes():
    layer = SMALL_LAYERS[1]
    rng = np.random.default_rng(9)
    for _ in range(20):
        # factors >= 1 everywhere, as for any mapping the penalty leaves alone
        base = assemble(list(rng.uniform(1.0, 3.0, size=N_FREE)), layer)
        for d in range(7):
            base[TEMPORAL][DRAM][d] = float(rng.uniform(1.0, 3.0))
        d = int(rng.integers(7))
        bumped = [[row[:] for row in plane] for plane in base]
        bumped[TEMPORAL][DRAM][d] *= 1.7
        for o in (("WS",) * 3, ("IS", "OS", "WS"), ("OS",) * 3):
            a = traffic(base, layer, o)
            b = traffic(bumped, layer, o)
            for i in range(3):
                for t in range(3):
                    assert b.writes[i][t] >= a.writes[i][t] * (1 - 1e-12)


def test_vars_and_floats_agree():
    layer = SMALL_LAYERS[2]
    net = Network("v", [(layer, 1)])
    free = list(np.random.default_rng(0).uniform(0.5, 3.0, size=N_FREE))
    f = evaluate_network([assemble(free, layer)], net).edp
    v = evaluate_network([assemble([Var(x) for x in free], layer)], net).edp
    assert f == v


def test_softmax_mode_estimates():
    net = Network("s", [(SMALL_LAYERS[0], 1), (SMALL_LAYERS[1], 1)])
    ms = [uniform_mapping(layer) for layer in net.shapes]
    ev = evaluate_network(ms, net, mode="softmax")
    assert len(ev.estimates) == 2 and all(len(row) == 3 for row in ev.estimates)
    with pytest.raises(ValueError):
        evaluate_network(ms, net, mode="bogus")
