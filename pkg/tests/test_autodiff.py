import numpy as np
import pytest
from _gradcheck import TOL, check, encoder_case, op_cases
from hypothesis import given, settings
from hypothesis import strategies as st

from rotcloud import autodiff as ad


@pytest.mark.parametrize("seed", range(3))
def test_every_op_matches_finite_differences(seed):
    for name, build, inputs in op_cases(np.random.default_rng(seed)):
        assert check(build, inputs) < TOL, name


@pytest.mark.parametrize("head", ["classify", "axisangle", "sixd", "keypoints"])
def test_encoder_loss_gradients(head):
    build, inputs, _ = encoder_case(np.random.default_rng(11), head)
    assert check(build, inputs) < TOL


def test_uniform_logits_cross_entropy():
    t = ad.Tape()
    loss = ad.softmax_cross_entropy(t.leaf(np.zeros((3, 6))), [0, 4, 5])
    assert float(loss.value) == pytest.approx(np.log(6), abs=1e-15)
    assert float(loss.value) == pytest.approx(1.791759, abs=1e-6)


def test_max_single_point():
    t = ad.Tape()
    x = t.leaf(np.array([[[1.0, -2.0, 3.0]]]))
    y = ad.max_over_points(x)
    np.testing.assert_array_equal(y.value, [[1.0, -2.0, 3.0]])
    t.backward(ad.vsum(y * np.array([2.0, 3.0, 4.0])))
    np.testing.assert_array_equal(x.grad, [[[2.0, 3.0, 4.0]]])


def test_max_ties_route_to_lowest_index():
    t = ad.Tape()
    x = t.leaf(np.array([[1.0, 5.0], [1.0, 5.0], [0.0, 5.0]]))
    t.backward(ad.vsum(ad.max_over_points(x)))
    np.testing.assert_array_equal(x.grad, [[1, 1], [0, 0], [0, 0]])


@given(st.integers(0, 2**32 - 1))
def test_max_subgradient_mass(seed):
    rng = np.random.default_rng(seed)
    t = ad.Tape()
    x = t.leaf(rng.normal(size=(2, 9, 4)))
    g = rng.normal(size=(2, 4))
    t.backward(ad.vsum(ad.max_over_points(x) * g))
    nonzero = (x.grad != 0).sum(axis=1)
    assert np.all(nonzero <= 1)
    np.testing.assert_allclose(np.abs(x.grad).sum(axis=1), np.abs(g))


def test_mse_self_is_zero():
    t = ad.Tape()
    x = t.leaf(np.arange(6.0).reshape(2, 3))
    loss = ad.mse(x, x.value)
    t.backward(loss)
    assert float(loss.value) == 0.0
    np.testing.assert_array_equal(x.grad, 0.0)


def test_sum_of_squares_gradient():
    t = ad.Tape()
    v = t.leaf(np.array([1.0, -2.0, 0.5]))
    ad.backward(ad.vsum(v * v))
    np.testing.assert_array_equal(v.grad, 2 * v.value)


def test_root_grad_is_one_and_shapes_match():
    t = ad.Tape()
    a = t.leaf(np.ones((2, 3)))
    root = ad.mean(a * 2.0)
    t.backward(root)
    assert root.grad == 1.0
    for node in t.nodes:
        assert node.grad.shape == node.value.shape


def test_repeat_backward_is_deterministic():
    build, inputs, _ = encoder_case(np.random.default_rng(2))
    t = ad.Tape()
    root, leaves = build(t, inputs)
    t.backward(root)
    first = [leaf.grad.copy() for leaf in leaves]
    t.backward(root)
    for a, b in zip(first, leaves):
        np.testing.assert_array_equal(a, b.grad)


def test_tape_is_topological():
    build, inputs, _ = encoder_case(np.random.default_rng(3))
    t = ad.Tape()
    build(t, inputs)
    for node in t.nodes:
        for p in node.parents:
            if isinstance(p, ad.Var):
                assert p.id < node.id


class TestErrors:
    def test_non_scalar_root(self):
        t = ad.Tape()
        with pytest.raises(ValueError, match="scalar"):
            t.backward(t.leaf(np.ones(3)))

    def test_shape_mismatch_names_shapes(self):
        t = ad.Tape()
        with pytest.raises(ValueError, match=r"\(2, 3\).*\(4,\)"):
            ad.add(t.leaf(np.ones((2, 3))), t.leaf(np.ones(4)))
        with pytest.raises(ValueError, match="matmul"):
            t.leaf(np.ones((2, 3))) @ t.leaf(np.ones((2, 3)))
        with pytest.raises(ValueError, match="mse"):
            ad.mse(t.leaf(np.ones(3)), np.ones(4))

    def test_label_range(self):
        t = ad.Tape()
        with pytest.raises(ValueError, match="label"):
            ad.softmax_cross_entropy(t.leaf(np.zeros((1, 3))), [3])


class TestOptimizers:
    def test_sgd_single_step(self):
        p = {"w": np.array(1.0)}
        ad.sgd_step(p, {"w": 2 * p["w"]}, 0.1)
        assert float(p["w"]) == pytest.approx(0.8)

    def test_adam_converges(self):
        p = {"w": np.array([1.0])}
        opt = ad.Adam(lr=0.05)
        for _ in range(500):
            opt.step(p, {"w": 2 * p["w"]})
        assert abs(p["w"][0]) < 1e-2

    @pytest.mark.parametrize("name", ["sgd", "adam"])
    def test_zero_gradient(self, name):
        p = {"w": np.array([0.3, -1.0])}
        opt = ad.make_optimizer(name, 0.1)
        opt.step(p, {"w": np.zeros(2)})
        np.testing.assert_array_equal(p["w"], [0.3, -1.0])

    def test_non_finite_gradient_names_parameter(self):
        with pytest.raises(FloatingPointError, match="head.0.bias"):
            ad.SGD(0.1).step({"head.0.bias": np.zeros(2)}, {"head.0.bias": np.array([np.nan, 0])})

    def test_unknown_optimizer(self):
        with pytest.raises(ValueError):
            ad.make_optimizer("lbfgs", 0.1)


class TestWeightsFile:
    def test_round_trip(self, tmp_path):
        params = {"a": np.arange(6.0).reshape(2, 3), "b": np.array([np.pi])}
        ad.save_weights(tmp_path / "w.bin", params, {"head": "x"})
        back, meta = ad.load_weights(tmp_path / "w.bin")
        assert meta == {"head": "x"}
        for k in params:
            np.testing.assert_array_equal(back[k], params[k])

    def test_layout(self, tmp_path):
        import json
        import struct

        ad.save_weights(tmp_path / "w.bin", {"a": np.array([1.5, -2.0])})
        raw = (tmp_path / "w.bin").read_bytes()
        (n,) = struct.unpack("<Q", raw[:8])
        header = json.loads(raw[8:8 + n])
        assert header["tensors"] == [{"name": "a", "shape": [2], "offset": 0}]
        assert raw[8 + n:] == np.array([1.5, -2.0], dtype="<f8").tobytes()

    def test_truncated(self, tmp_path):
        ad.save_weights(tmp_path / "w.bin", {"a": np.ones(4)})
        data = (tmp_path / "w.bin").read_bytes()
        (tmp_path / "t.bin").write_bytes(data[:-8])
        with pytest.raises(ValueError, match="'a'"):
            ad.load_weights(tmp_path / "t.bin")


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_random_op_configurations(seed):
    for name, build, inputs in op_cases(np.random.default_rng(seed)):
        assert check(build, inputs) < TOL, name
