import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sgdlab import jsonio, snapshot
from sgdlab.domain import Ball, Box, probe_points


def test_ball_crossing_and_projection():
    b = Ball([0.0, 0.0], 2.0)
    s = b.crossing_fraction(np.array([[0.0, 0.0]]), np.array([[4.0, 0.0]]))
    np.testing.assert_allclose(s, [0.5])
    np.testing.assert_allclose(b.project(np.array([[0.0, 1.0]])), [[0.0, 2.0]])
    np.testing.assert_allclose(b.distance_to_boundary(np.array([0.5, 0.0])), 1.5)


def test_box_crossing_normal_and_projection():
    b = Box([-1.0, 0.0], [1.0, 3.0])
    s = b.crossing_fraction(np.array([[0.0, 1.0]]), np.array([[2.0, 1.0]]))
    np.testing.assert_allclose(s, [0.5])
    X = np.array([[0.9, 1.5], [0.0, 0.2]])
    np.testing.assert_allclose(b.outward_normal(X), [[1.0, 0.0], [0.0, -1.0]])
    np.testing.assert_allclose(b.project(X), [[1.0, 1.5], [0.0, 0.0]])
    assert b.contains(np.array([1.0, 3.0]))
    with pytest.raises(ValueError):
        Box([0.0], [0.0])


def test_probe_points_are_deterministic_and_inside():
    for dom in (Ball([1.0, -1.0], 0.5), Box([0.0, 0.0, 0.0], [1.0, 2.0, 3.0])):
        P = probe_points(dom, 100)
        np.testing.assert_array_equal(P, probe_points(dom, 100))
        assert np.all(dom.distance_to_boundary(P) > -1e-12)
    P = probe_points(Ball([0.0], 1.0), 20)
    assert {-1.0, 1.0} <= set(P[:, 0].round(12))


@settings(max_examples=40, deadline=None)
@given(T=st.integers(1, 4), M=st.integers(1, 5), d=st.integers(1, 3), scale=st.floats(-1e3, 1e3))
def test_ensemble_binary_round_trip(tmp_path_factory, T, M, d, scale):
    p = tmp_path_factory.mktemp("e") / "e.bin"
    rng = np.random.default_rng(T * 100 + M * 10 + d)
    times = np.sort(rng.random(T))
    pos = scale * rng.normal(size=(T, M, d))
    snapshot.write_ensemble(p, times, pos)
    t2, p2 = snapshot.read_ensemble(p)
    np.testing.assert_array_equal(t2, times)
    np.testing.assert_array_equal(p2, pos)


def test_grid_binary_round_trip_and_kind_check(tmp_path):
    axes = [np.linspace(0, 1, 3), np.linspace(-1, 1, 4)]
    vals = np.arange(12.0).reshape(3, 4) / 7
    snapshot.write_grid(tmp_path / "g.bin", axes, vals, 0.25)
    a2, v2, t = snapshot.read_grid(tmp_path / "g.bin")
    assert t == 0.25
    np.testing.assert_array_equal(v2, vals)
    for x, y in zip(a2, axes):
        np.testing.assert_array_equal(x, y)
    with pytest.raises(snapshot.SnapshotFormatError):
        snapshot.read_ensemble(tmp_path / "g.bin")
    (tmp_path / "bad.bin").write_bytes(b"XXXX\x01\x00")
    with pytest.raises(snapshot.SnapshotFormatError):
        snapshot.read_grid(tmp_path / "bad.bin")


def test_csv_keeps_full_precision(tmp_path):
    x = np.array([[0.1 + 0.2, np.pi, 1e-300]])
    snapshot.write_csv(tmp_path / "a.csv", ["a", "b", "c"], x)
    header, data = snapshot.read_csv(tmp_path / "a.csv")
    assert header == ["a", "b", "c"]
    np.testing.assert_array_equal(data, x)


def test_json_is_deterministic_and_exact():
    obj = {"b": [1, 2.5, np.float64(0.1)], "a": {"z": True, "y": None}, "c": float("nan"),
           "d": np.arange(2)}
    text = jsonio.dumps(obj)
    assert text == jsonio.dumps(dict(reversed(list(obj.items()))))
    back = json.loads(text)
    assert back["b"][2] == 0.1 and back["c"] == "nan"
    assert list(back) == ["a", "b", "c", "d"]
    assert jsonio.dumps(3.0) == "3.0"
    with pytest.raises(TypeError):
        jsonio.dumps({"x": object()})
