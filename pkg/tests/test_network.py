import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pfcharge.network import (Branch, Bus, NetworkError, NetworkFileError, admittance, build_network,
                              format_network, line_network, load_network, parse_network, random_tree,
                              save_network, star_network, voltage_limits)


def test_admittance_examples():
    g, b = admittance(0.1, 0.6)
    # 1/(0.1+0.6j) by complex arithmetic
    y = 1 / complex(0.1, 0.6)
    assert g == pytest.approx(y.real, rel=1e-15)
    assert b == pytest.approx(-y.imag, rel=1e-15)
    assert g == pytest.approx(0.2702702702702703, rel=1e-12)
    assert b == pytest.approx(1.6216216216216217, rel=1e-12)
    assert admittance(1.0, 0.0) == (1.0, 0.0)
    assert admittance(0.0, 1.0) == (0.0, 1.0)


@pytest.mark.parametrize("r,x", [(0.0, 0.0), (-0.1, 0.2), (0.1, -0.2)])
def test_admittance_rejects_bad_impedance(r, x):
    with pytest.raises(NetworkError):
        admittance(r, x)


@given(st.floats(0, 10), st.floats(0, 10))
def test_admittance_is_reciprocal(r, x):
    if r + x < 1e-6:
        return
    br = Branch(0, 1, r, x)
    prod = complex(br.g, -br.b) * complex(r, x)
    assert abs(prod - 1) <= 1e-12


def test_star_network_shape():
    net = star_network(10, 0.1, 0.6, (0.9, 1.1))
    assert len(net.buses) == 12 and len(net.branches) == 11
    assert net.root == 0
    assert net.chargeable_buses == tuple(range(2, 12))
    assert all(net.parent[k][0] == 1 for k in range(2, 12))
    small = star_network(1)
    assert len(small.buses) == 3 and small.chargeable_buses == (2,)
    with pytest.raises(NetworkError):
        star_network(0)


def test_minimal_and_invalid_networks():
    net = build_network([Bus(0, is_root=True), Bus(1)], [Branch(0, 1, 0.1, 0.6)])
    assert net.chargeable_buses == (1,)
    with pytest.raises(NetworkError, match="cycle"):
        build_network([Bus(0, is_root=True), Bus(1), Bus(2)],
                      [Branch(0, 1, 0.1, 0.1), Branch(1, 2, 0.1, 0.1), Branch(2, 0, 0.1, 0.1)])
    with pytest.raises(NetworkError, match="disconnected"):
        build_network([Bus(0, is_root=True), Bus(1), Bus(2)], [Branch(0, 1, 0.1, 0.1)])
    with pytest.raises(NetworkError, match="duplicate"):
        build_network([Bus(0, is_root=True), Bus(0)], [Branch(0, 1, 0.1, 0.1)])
    with pytest.raises(NetworkError, match="root"):
        build_network([Bus(0), Bus(1)], [Branch(0, 1, 0.1, 0.1)])
    with pytest.raises(NetworkError, match="root"):
        build_network([Bus(0, is_root=True), Bus(1, is_root=True)], [Branch(0, 1, 0.1, 0.1)])
    with pytest.raises(NetworkError, match="unknown bus"):
        build_network([Bus(0, is_root=True), Bus(1)], [Branch(0, 5, 0.1, 0.1)])
    with pytest.raises(NetworkError):
        Bus(3, v_min=1.2, v_max=1.1)


def test_voltage_limits():
    assert voltage_limits(1.0, 0.1) == pytest.approx((0.9, 1.1))


def test_file_round_trip(tmp_path):
    net = star_network(10, 0.1, 0.6)
    path = tmp_path / "star.txt"
    save_network(net, path)
    again = load_network(path)
    assert again == net
    assert format_network(again) == format_network(net)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 31))
def test_random_tree_round_trip_and_tree_property(seed, n):
    net = random_tree(np.random.default_rng(seed), n)
    assert len(net.branches) == len(net.buses) - 1
    assert len(net.bfs_order) == len(net.buses)
    assert parse_network(format_network(net)) == net


def test_line_network():
    net = line_network(4)
    assert [net.parent[k][0] for k in (1, 2, 3)] == [0, 1, 2]


@pytest.mark.parametrize("text,needle", [
    ("", "empty"),
    ("hello 1\n", "header"),
    ("pfcharge-network 2\n", "version"),
    ("pfcharge-network 1\n[buses]\n0 0.9 1.1 1\n", "expected 5 fields"),
    ("pfcharge-network 1\n[buses]\n0 abc 1.1 1 0\n", "v_min"),
    ("pfcharge-network 1\n[buses]\n0 0.9 1.1 1 0\n1 0.9 1.1 0 1\n[branches]\n0 7 0.1 0.6\n", "unknown bus"),
    ("pfcharge-network 1\n[stuff]\n", "unknown section"),
    ("pfcharge-network 1\n0 0.9 1.1 1 0\n", "outside"),
])
def test_parse_errors(text, needle):
    with pytest.raises(NetworkError, match=needle):
        parse_network(text)


def test_parse_error_reports_line():
    with pytest.raises(NetworkFileError) as info:
        parse_network("pfcharge-network 1\n[buses]\n0 0.9 1.1 1 0\n1 0.9 x 0 1\n", path="f.txt")
    assert info.value.line == 4 and info.value.column == "v_max"
    assert "f.txt:line 4" in str(info.value)
