import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dynomap.diffcore import check_vjp
from dynomap.exceptions import ShapeMismatch
from dynomap.gating import gate_forward, gate_vjp

finite = st.floats(-50, 50)


def test_zero_input():
    b = np.array([1.0, -2.0, 0.3])
    out = gate_forward(np.zeros(3), np.ones((3, 3)), b)
    np.testing.assert_array_equal(out.values, 0)
    np.testing.assert_allclose(out.gates, 1 / (1 + np.exp(-b)))


def test_neutral_gate_halves(rng):
    x = rng.normal(size=5)
    out = gate_forward(x, np.zeros((5, 5)), np.zeros(5))
    np.testing.assert_array_equal(out.gates, 0.5)
    np.testing.assert_array_equal(out.values, x / 2)


def test_log_three():
    x = np.array([np.log(3.0), 0.0])
    out = gate_forward(x, np.eye(2), np.zeros(2))
    np.testing.assert_allclose(out.gates, [0.75, 0.5], rtol=1e-15)
    np.testing.assert_allclose(out.values, [0.75 * np.log(3.0), 0.0], rtol=1e-15)


def test_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        gate_forward(np.zeros(3), np.zeros((2, 2)), np.zeros(3))


@given(arrays(np.float64, 4, elements=finite), arrays(np.float64, (4, 4), elements=st.floats(-5, 5)),
       arrays(np.float64, 4, elements=st.floats(-5, 5)))
def test_magnitude_bound_and_exact_product(x, W, b):
    out = gate_forward(x, W, b)
    assert np.all(out.gates >= 0) and np.all(out.gates <= 1)
    assert np.all(np.abs(out.values) <= np.abs(x))
    np.testing.assert_array_equal(out.values, x * out.gates)


@pytest.mark.parametrize("diagonal", [False, True])
@pytest.mark.parametrize("batched", [False, True])
def test_vjp_matches_finite_differences(diagonal, batched):
    for trial in range(20):
        r = np.random.default_rng([trial, diagonal, batched])
        G = int(r.integers(1, 6))
        shape = (3, G) if batched else (G,)
        x = r.normal(size=shape)
        W = r.normal(size=G if diagonal else (G, G))
        b = r.normal(size=G)
        up = r.normal(size=shape)
        gated = gate_forward(x, W, b)
        dx, dW, db = gate_vjp(up, x, W, gated)
        err = check_vjp(lambda x, W, b: gate_forward(x, W, b).values, {"x": x, "W": W, "b": b}, up,
                        {"x": dx, "W": dW, "b": db}, floor=1e-6)
        assert err <= 1e-4
