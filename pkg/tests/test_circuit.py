import numpy as np
import pytest

from flexsim.circuit import (DEFAULT_R_OFF, DEFAULT_R_ON, Element, Netlist, TopologyCache,
                             compile_topology, topology)
from flexsim.errors import CompileError


def rc_netlist(driver="vsource"):
    if driver == "vsource":
        src = Element("vsource", "V1", ("in", "0"), ref="Vin")
        names, n_out = ("Vin",), 0
    else:
        src = Element("port", "P1", ("in", "0"), mode="voltage", ref=0)
        names, n_out = (), 1
    return Netlist([
        src,
        Element("resistor", "R1", ("in", "out"), value=1e3),
        Element("capacitor", "C1", ("out", "0"), value=1e-6),
        Element("sensor", "S1", ("out", "0"), mode="voltage", ref=0),
    ], names, n_out, 1)


L, C, R, RON, ROFF = 1e-3, 1e-4, 2.0, 1e-3, 1e6


def buck_netlist():
    return Netlist([
        Element("vsource", "V1", ("in", "0"), ref="Vin"),
        Element("switch", "S1", ("in", "sw"), r_on=RON, r_off=ROFF),
        Element("switch", "S2", ("sw", "0"), r_on=RON, r_off=ROFF),
        Element("capacitor", "Cout", ("out", "0"), value=C),
        Element("inductor", "L1", ("sw", "out"), value=L),
        Element("resistor", "Rload", ("out", "0"), value=R),
    ], ("Vin",))


def buck_by_hand(r_high, r_low):
    """Node sw sees r_high to the input and r_low to ground; x = (v_C, i_L)."""
    rp = 1.0 / (1.0 / r_high + 1.0 / r_low)
    A = np.array([[-1.0 / (R * C), 1.0 / C],
                  [-1.0 / L, -rp / L]])
    B = np.array([[0.0], [rp / (r_high * L)]])
    return A, B


def test_rc_example():
    m = compile_topology(rc_netlist(), 0)
    assert m.A == pytest.approx(np.array([[-1000.0]]))
    assert m.B1 == pytest.approx(np.array([[1000.0]]))
    assert m.C == pytest.approx(np.array([[1.0]]))
    assert m.D1 == pytest.approx(np.array([[0.0]]), abs=1e-15)


def test_port_source_symmetry():
    src = compile_topology(rc_netlist("vsource"), 0)
    port = compile_topology(rc_netlist("port"), 0)
    assert np.array_equal(src.A, port.A)
    assert port.B2 == pytest.approx(src.B1)
    assert port.B1.shape == (1, 0)
    assert port.D2 == pytest.approx(src.D1, abs=1e-15)


@pytest.mark.parametrize("mask,r_high,r_low", [
    (0b01, RON, ROFF), (0b10, ROFF, RON), (0b00, ROFF, ROFF), (0b11, RON, RON)])
def test_buck_matches_hand_elimination(mask, r_high, r_low):
    net = buck_netlist()
    assert net.state_names == ("Cout", "L1")
    m = compile_topology(net, mask)
    A, B = buck_by_hand(r_high, r_low)
    np.testing.assert_allclose(m.A, A, rtol=1e-9, atol=0)
    np.testing.assert_allclose(m.B1, B, rtol=1e-9, atol=1e-9 * np.max(np.abs(B)))


def test_distinct_masks_give_distinct_matrices():
    cache = TopologyCache(buck_netlist())
    a, b, c = cache(0b01), cache(0b10), cache(0b00)
    assert not np.array_equal(a.B1, b.B1)
    assert a.A[1, 1] != c.A[1, 1]


def test_cache_is_deterministic():
    net = buck_netlist()
    cache = TopologyCache(net)
    first = topology(cache, net, 0b01)
    again = topology(cache, net, 0b01)
    assert first is again and len(cache) == 1
    fresh = compile_topology(net, 0b01)
    assert np.array_equal(first.A, fresh.A) and np.array_equal(first.B1, fresh.B1)


def test_bitmask_wider_than_switch_count():
    with pytest.raises(CompileError):
        compile_topology(buck_netlist(), 0b100)
    with pytest.raises(CompileError):
        compile_topology(buck_netlist(), -1)


def test_constant_state_dimension_and_passivity():
    net = buck_netlist()
    for mask in range(4):
        m = compile_topology(net, mask)
        assert m.A.shape == (2, 2)
        eig = np.linalg.eigvals(m.A)
        assert np.all(eig.real <= 1e-9 * np.max(np.abs(eig)))


def test_rlc_ladder_passivity():
    rng = np.random.default_rng(3)
    for _ in range(10):
        net = Netlist([
            Element("resistor", "R1", ("a", "0"), value=rng.uniform(0.1, 10)),
            Element("inductor", "L1", ("a", "b"), value=rng.uniform(1e-4, 1e-2)),
            Element("capacitor", "C1", ("b", "0"), value=rng.uniform(1e-6, 1e-3)),
            Element("switch", "S1", ("b", "c")),
            Element("resistor", "R2", ("c", "0"), value=rng.uniform(0.1, 10)),
            Element("capacitor", "C2", ("c", "0"), value=rng.uniform(1e-6, 1e-3)),
        ])
        for mask in (0, 1):
            eig = np.linalg.eigvals(compile_topology(net, mask).A)
            assert np.all(eig.real <= 1e-9 * np.max(np.abs(eig)))


def test_current_sensors():
    net = Netlist([
        Element("vsource", "V1", ("in", "0"), ref="Vin"),
        Element("resistor", "R1", ("in", "a"), value=2.0),
        Element("inductor", "L1", ("a", "0"), value=1e-3),
        Element("sensor", "IR", mode="current", target="R1", ref=0),
        Element("sensor", "IL", mode="current", target="L1", ref=1, gain=-1.0),
    ], ("Vin",), 0, 2)
    m = compile_topology(net, 0)
    x, u = np.array([0.5]), np.array([3.0])
    sensed = m.C @ x + m.D1 @ u
    # R1 is in series with L1, so it carries the inductor current
    assert sensed == pytest.approx([0.5, -0.5])
    # and the inductor sees v_a = 3 - 2 * 0.5 = 2 V
    assert (m.A @ x + m.B1 @ u) == pytest.approx([2.0 / 1e-3])


def test_floating_subcircuit_names_the_node():
    net = Netlist([
        Element("capacitor", "C1", ("a", "0"), value=1e-6),
        Element("resistor", "R1", ("x", "y"), value=1.0),
    ])
    with pytest.raises(CompileError, match="'x'|'y'"):
        compile_topology(net, 0)


def test_invalid_values_and_names():
    with pytest.raises(CompileError):
        compile_topology(Netlist([Element("capacitor", "C1", ("a", "0"), value=0.0),
                                  Element("resistor", "R1", ("a", "0"), value=1.0)]), 0)
    with pytest.raises(CompileError):
        Netlist([Element("resistor", "R1", ("a", "0"), value=1.0),
                 Element("resistor", "R1", ("a", "0"), value=2.0)])
    with pytest.raises(CompileError):
        Element("diode", "D1", ("a", "0"))


def test_switch_defaults():
    e = Element("switch", "S")
    assert (e.r_on, e.r_off) == (DEFAULT_R_ON, DEFAULT_R_OFF) == (1e-3, 1e6)
