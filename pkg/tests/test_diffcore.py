import numpy as np
import pytest

from dynomap.diffcore import (
    AdamState,
    ParamSet,
    adam_step,
    check_vjp,
    finite_diff_check,
    load_params,
    save_params,
)
from dynomap.exceptions import NumericalError, ShapeMismatch


def _with_grads(values, grads):
    p = ParamSet(values)
    p.set_grads(grads)
    return p


class TestFiniteDiff:
    def test_square(self):
        p = _with_grads({"t": np.array([3.0])}, {"t": np.array([6.0])})
        assert finite_diff_check(lambda q: float(q["t"][0] ** 2), p) < 1e-9

    def test_linear_exact(self, rng):
        w = rng.normal(size=5)
        p = _with_grads({"t": rng.normal(size=5)}, {"t": w})
        assert finite_diff_check(lambda q: float(w @ q["t"]), p) < 1e-9

    def test_sin_sum(self, rng):
        theta = rng.uniform(-3, 3, size=8)
        p = _with_grads({"t": theta}, {"t": np.cos(theta)})
        assert finite_diff_check(lambda q: float(np.sin(q["t"]).sum()), p, h=1e-5) < 1e-7

    def test_detects_corruption(self, rng):
        theta = rng.uniform(-3, 3, size=8)
        g = np.cos(theta)
        g[3] += 0.1
        p = _with_grads({"t": theta}, {"t": g})
        assert finite_diff_check(lambda q: float(np.sin(q["t"]).sum()), p) >= 0.05

    def test_non_finite_raises(self):
        p = _with_grads({"t": np.array([0.0])}, {"t": np.array([0.0])})
        with pytest.raises(NumericalError):
            finite_diff_check(lambda q: float(np.log(q["t"][0])), p)

    def test_independent_param_has_zero_grad(self, rng):
        p = _with_grads({"a": rng.normal(size=3), "b": rng.normal(size=2)}, {"a": np.ones(3)})
        np.testing.assert_array_equal(p.grads["b"], 0)
        assert finite_diff_check(lambda q: float(q["a"].sum()), p) < 1e-9

    def test_check_vjp(self, rng):
        A = rng.normal(size=(3, 4))
        up = rng.normal(size=3)
        err = check_vjp(lambda x: A @ x, {"x": rng.normal(size=4)}, up, {"x": A.T @ up}, floor=1e-8)
        assert err < 1e-8


class TestParamSet:
    def test_shape_congruence(self):
        p = ParamSet({"w": np.zeros((2, 3))})
        assert p.grads["w"].shape == (2, 3)
        with pytest.raises(ShapeMismatch):
            p.set_grads({"w": np.zeros(6)})
        with pytest.raises(ShapeMismatch):
            p["w"] = np.zeros(3)

    def test_accumulation_linear(self, rng):
        ga, gb = rng.normal(size=4), rng.normal(size=4)
        p = ParamSet({"w": np.zeros(4)})
        p.accumulate({"w": ga}, 2.5)
        p.accumulate({"w": gb}, -0.5)
        np.testing.assert_allclose(p.grads["w"], 2.5 * ga - 0.5 * gb, atol=1e-12)

    def test_check_finite(self):
        p = ParamSet({"w": np.array([1.0, np.nan])})
        with pytest.raises(NumericalError):
            p.check_finite()


class TestAdam:
    def test_zero_gradient_leaves_params(self, rng):
        theta = rng.normal(size=5)
        p = ParamSet({"t": theta})
        s = AdamState.for_params(p)
        adam_step(p, s)
        np.testing.assert_array_equal(p["t"], theta)
        assert s.t == 1

    def test_first_step_magnitude(self):
        p = _with_grads({"t": np.array([0.0])}, {"t": np.array([1.0])})
        s = AdamState.for_params(p, lr=1e-3)
        adam_step(p, s)
        assert p["t"][0] == pytest.approx(-1e-3, rel=1e-6)

    def test_first_step_sign_preserving(self, rng):
        g = rng.normal(size=6)
        p = _with_grads({"t": np.zeros(6)}, {"t": g})
        adam_step(p, AdamState.for_params(p))
        np.testing.assert_allclose(p["t"], -1e-3 * g / (np.abs(g) + 1e-8), rtol=1e-6)

    def test_frozen_untouched(self, rng):
        c = rng.normal(size=(4, 2))
        p = _with_grads({"coords": c, "w": np.zeros(2)}, {"coords": np.ones((4, 2)), "w": np.ones(2)})
        p.frozen.add("coords")
        s = AdamState.for_params(p)
        for _ in range(3):
            adam_step(p, s)
        assert p["coords"].tobytes() == c.tobytes()
        assert np.all(p["w"] < 0)

    def test_bit_deterministic(self, rng):
        vals = {"a": rng.normal(size=(3, 3)), "b": rng.normal(size=2)}
        grads = {"a": rng.normal(size=(3, 3)), "b": rng.normal(size=2)}
        outs = []
        for _ in range(2):
            p = _with_grads(vals, grads)
            s = AdamState.for_params(p)
            for _ in range(4):
                adam_step(p, s)
            outs.append(p["a"].tobytes() + p["b"].tobytes())
        assert outs[0] == outs[1]

    def test_non_finite_update(self):
        p = _with_grads({"t": np.array([0.0])}, {"t": np.array([np.inf])})
        with pytest.raises(NumericalError):
            adam_step(p, AdamState.for_params(p))


def test_checkpoint_roundtrip(tmp_path, rng):
    p = ParamSet({"w": rng.normal(size=(3, 2)).astype(np.float32), "b": rng.normal(size=4)})
    p.frozen.add("w")
    save_params(p, tmp_path, extra={"note": "x"})
    manifest = (tmp_path / "manifest.json").read_text()
    assert '"offset"' in manifest and '"little"' in manifest
    q, meta = load_params(tmp_path)
    assert meta == {"note": "x"}
    assert q.frozen == {"w"}
    for name in p:
        assert q[name].dtype == p[name].dtype
        assert q[name].tobytes() == p[name].tobytes()
