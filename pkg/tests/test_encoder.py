import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rotcloud import autodiff as ad
from rotcloud import encoder as enc
from rotcloud.pcdata import generate_shape
from rotcloud.so3 import AxisAngle, apply_rotation, axis_angle_to_rotation


@pytest.fixture(scope="module")
def cloud():
    return generate_shape("cube", 200, np.random.default_rng(0)).points


@pytest.fixture(scope="module")
def model():
    return enc.init_model("classify", 18, np.random.default_rng(1))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_permutation_invariance(model, cloud, seed):
    perm = np.random.default_rng(seed).permutation(len(cloud))
    np.testing.assert_array_equal(enc.extract_feature(model, cloud[perm]), enc.extract_feature(model, cloud))


def test_duplicates_do_not_change_feature(model, cloud):
    doubled = np.concatenate([cloud, cloud[:50]])
    np.testing.assert_array_equal(enc.extract_feature(model, doubled), enc.extract_feature(model, cloud))


def test_extract_is_repeatable(model, cloud):
    a = enc.extract_feature(model, cloud)
    assert a.shape == (256,)
    np.testing.assert_array_equal(a, enc.extract_feature(model, cloud))


def test_extract_matches_forward(model, cloud):
    g, _, _ = enc.forward(model, cloud)
    np.testing.assert_array_equal(g.value[0], enc.extract_feature(model, cloud))


def test_per_point_layers_are_shared(model, cloud):
    # a one-point cloud's pooled feature is its per-point feature, so each
    # row of a batch of single points must match the row computed alone
    single = np.stack([cloud[i:i + 1] for i in range(5)])
    batch = enc.extract_feature(model, single)
    for i in range(5):
        np.testing.assert_allclose(batch[i], enc.extract_feature(model, cloud[i:i + 1]), rtol=1e-12, atol=1e-15)


def test_rotation_changes_logits(model, cloud):
    out = enc.predict(model, cloud)
    assert np.all(np.isfinite(out))
    r = axis_angle_to_rotation(AxisAngle((1.0, 0.0, 0.0), np.pi / 2))
    assert not np.allclose(enc.predict(model, apply_rotation(r, cloud)), out)


@pytest.mark.parametrize("head,k,size", [("classify", 18, 18), ("classify", 6, 6), ("axisangle", None, 4),
                                         ("sixd", None, 6), ("keypoints", 10, 30)])
def test_output_dims(cloud, head, k, size):
    m = enc.init_model(head, k, np.random.default_rng(2))
    assert m.out_dim == size
    assert enc.predict(m, cloud).shape == (size,)
    assert enc.predict(m, np.stack([cloud, cloud])).shape == (2, size)
    assert enc.extract_feature(m, cloud).shape == (256,)


def test_unknown_head():
    with pytest.raises(ValueError, match="unknown head"):
        enc.init_model("quaternion", None, np.random.default_rng(0))
    with pytest.raises(ValueError):
        enc.init_model("classify", 1, np.random.default_rng(0))


def test_rejects_unnormalized(model, cloud):
    with pytest.raises(ValueError, match="not normalized"):
        enc.extract_feature(model, cloud * 1.01)
    # inside the tolerance is fine
    enc.extract_feature(model, cloud * (1 + 5e-7))
    with pytest.raises(ValueError, match="shape"):
        enc.predict(model, np.zeros((4, 2)))


def test_configurable_width(cloud):
    m = enc.init_model("sixd", None, np.random.default_rng(3), widths=(16, 32), head_hidden=8)
    assert enc.extract_feature(m, cloud).shape == (32,)
    assert m.params["head.0.weight"].shape == (32, 8)


def test_save_load_round_trip(tmp_path, model, cloud):
    model.save(tmp_path / "m.bin")
    back = enc.EncoderModel.load(tmp_path / "m.bin")
    assert (back.head, back.k, back.widths) == ("classify", 18, (64, 128, 256))
    np.testing.assert_array_equal(enc.predict(back, cloud), enc.predict(model, cloud))


def test_load_names_bad_tensor(tmp_path):
    m = enc.init_model("axisangle", None, np.random.default_rng(4), widths=(8, 16), head_hidden=4)
    params = dict(m.params)
    params["point.1.scale"] = np.ones(3)
    ad.save_weights(tmp_path / "bad.bin", params, m.meta)
    with pytest.raises(ValueError, match=r"'point\.1\.scale'.*\(3,\)"):
        enc.EncoderModel.load(tmp_path / "bad.bin")
    del params["head.1.bias"]
    params["point.1.scale"] = np.ones(16)
    ad.save_weights(tmp_path / "missing.bin", params, m.meta)
    with pytest.raises(ValueError, match="missing tensor 'head.1.bias'"):
        enc.EncoderModel.load(tmp_path / "missing.bin")


def test_replace_head_keeps_backbone(model):
    new = enc.replace_head(model, "keypoints", 10, np.random.default_rng(5))
    assert new.out_dim == 30
    for n in model.backbone_names():
        np.testing.assert_array_equal(new.params[n], model.params[n])
        assert new.params[n] is not model.params[n]


@pytest.mark.parametrize("head", ["classify", "axisangle", "sixd"])
def test_gradient_reaches_every_layer(cloud, head):
    rng = np.random.default_rng(6)
    k = 6 if head == "classify" else None
    m = enc.init_model(head, k, rng, out_scale=1.0)
    before = m.copy()
    tape = ad.Tape()
    _, out, leaves = enc.forward(m, cloud, tape)
    if head == "classify":
        loss = ad.softmax_cross_entropy(out, [3])
    else:
        loss = ad.mse(out, rng.normal(size=(1, m.out_dim)))
    tape.backward(loss)
    ad.make_optimizer("sgd", 0.1).step(m.params, {n: leaves[n].grad for n in m.params})
    layers = {n.rsplit(".", 1)[0] for n in m.params}
    for layer in layers:
        changed = [not np.array_equal(m.params[n], before.params[n]) for n in m.params if n.startswith(layer + ".")]
        assert any(changed), layer
