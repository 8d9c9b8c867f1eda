import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crossdepict.autodiff import ParamSet
from crossdepict.model import (ClassifierHead, FeatureNetSpec, Model, ModelError, build_model,
                               classify, forward, head_angle_stats, init_head_random,
                               load_checkpoint, orthogonalize_head, save_checkpoint)


def test_random_head_bound_and_zero_bias():
    h = init_head_random(4096, 7, seed=0)
    assert h.W.shape == (4096, 7) and h.mode == "fixed-random" and h.frozen
    assert np.abs(h.W).max() <= 1 / 64
    np.testing.assert_array_equal(h.bias, np.zeros(7))


def test_random_head_is_deterministic():
    assert init_head_random(64, 7, 5).tobytes() == init_head_random(64, 7, 5).tobytes()
    assert init_head_random(64, 7, 5).tobytes() != init_head_random(64, 7, 6).tobytes()


def test_random_head_rejects_narrow_input():
    with pytest.raises(ModelError):
        init_head_random(5, 7, 0)


def test_random_head_is_roughly_uniform():
    W = init_head_random(4096, 7, 1).W
    # uniform on [-b, b] has variance b^2 / 3
    assert W.var() == pytest.approx((1 / 64) ** 2 / 3, rel=0.03)
    assert abs(W.mean()) < 1e-4


def test_orthogonalize_keeps_orthonormal_input_span():
    rng = np.random.default_rng(0)
    Q, _ = np.linalg.qr(rng.normal(size=(20, 4)))
    Wo = orthogonalize_head(ClassifierHead(Q, np.zeros(4), "fixed-random", 0)).W
    np.testing.assert_allclose(Wo.T @ Wo, np.eye(4), atol=1e-12)
    np.testing.assert_allclose(Wo @ Wo.T @ Q, Q, atol=1e-12)


def test_orthogonalize_axis_aligned():
    W = np.array([[2.0, 0], [0, 3], [0, 0]])
    Wo = orthogonalize_head(ClassifierHead(W, np.zeros(2), "fixed-random", 0)).W
    cols = {tuple(np.abs(c)) for c in Wo.T}
    assert cols == {(1.0, 0.0, 0.0), (0.0, 1.0, 0.0)}


def test_orthogonalize_random_64x7():
    W = init_head_random(64, 7, 3).W
    h = orthogonalize_head(ClassifierHead(W, np.zeros(7), "fixed-random", 3))
    assert h.mode == "fixed-orthogonal" and h.frozen
    assert np.abs(h.W.T @ h.W - np.eye(7)).max() < 1e-10
    assert np.abs(h.W @ (h.W.T @ W) - W).max() < 1e-8


def test_orthogonalize_is_idempotent_up_to_sign():
    h = orthogonalize_head(init_head_random(32, 5, 9))
    h2 = orthogonalize_head(h)
    np.testing.assert_allclose(np.abs(h2.W), np.abs(h.W), atol=1e-12)


def test_orthogonalize_rejects_rank_deficiency():
    W = np.ones((10, 3))
    with pytest.raises(ModelError, match="rank"):
        orthogonalize_head(ClassifierHead(W, np.zeros(3), "fixed-random", 0))


def _identity_model(M, head):
    spec = FeatureNetSpec((M, M), "relu", 0)
    feats = ParamSet({"layer0.W": np.eye(M), "layer0.b": np.zeros(M)})
    return Model(spec, feats, head)


def test_forward_zero_weights_gives_zero_logits():
    spec = FeatureNetSpec((5, 6), "relu", 0)
    m = build_model(spec, 3)
    zeros = m.params().map(np.zeros_like)
    logits = forward(m, np.random.default_rng(0).normal(size=(4, 5)), zeros).numpy()
    np.testing.assert_array_equal(logits, np.zeros((4, 3)))


def test_forward_orthonormal_head_reads_out_basis_vector():
    # relu identity layer passes the nonnegative basis columns through unchanged
    Wo = orthogonalize_head(ClassifierHead(np.eye(16)[:, :4] * 3.0, np.zeros(4), "fixed-random", 0)).W
    m = _identity_model(16, ClassifierHead(Wo, np.zeros(4), "fixed-orthogonal", 0))
    for k in range(4):
        logits = forward(m, Wo[:, k][None, :]).numpy()[0]
        np.testing.assert_allclose(logits, np.eye(4)[k], atol=1e-15)


def test_forward_matches_matrix_oracle():
    rng = np.random.default_rng(4)
    m = build_model(FeatureNetSpec((6, 9, 8), "tanh", 11), 5)
    x = rng.normal(size=(7, 6))
    p = m.params()
    h = np.tanh(x @ p["layer0.W"] + p["layer0.b"])
    h = np.tanh(h @ p["layer1.W"] + p["layer1.b"])
    np.testing.assert_allclose(forward(m, x).numpy(), h @ p["head.W"] + p["head.b"], rtol=0, atol=1e-12)


def test_forward_width_mismatch():
    m = build_model(FeatureNetSpec((6, 8), "relu", 0), 3)
    with pytest.raises(ModelError, match="width"):
        forward(m, np.zeros((2, 5)))


def test_classify_examples():
    assert classify(np.array([[0.1, 0.9, 0.3]]))[0] == 1
    assert classify(np.array([[5.0, 5.0, 1.0]]))[0] == 0


def test_classify_scale_invariant():
    y = np.random.default_rng(8).normal(size=(100, 7))
    np.testing.assert_array_equal(classify(y), classify(7.3 * y))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_classify_invariant_under_increasing_transform(seed):
    y = np.random.default_rng(seed).normal(size=(10, 5))
    np.testing.assert_array_equal(classify(y), classify(np.exp(y) * 3 + 1))
    np.testing.assert_array_equal(classify(y), classify(np.tanh(y)))


def test_relu_net_with_fixed_head_is_scale_invariant():
    spec = FeatureNetSpec((10, 12, 9), "relu", 3)
    m = build_model(spec, 4, "fixed-random")
    p = m.params().replace(**{"layer0.b": np.zeros(12), "layer1.b": np.zeros(9)})
    m = m.with_params(p)
    x = np.random.default_rng(1).normal(size=(50, 10))
    np.testing.assert_array_equal(classify(forward(m, x)), classify(forward(m, 4.5 * x)))


def test_head_angle_stats():
    s = head_angle_stats(np.eye(5)[:, :3])
    assert s["mean_abs_cos"] == 0 and s["min_norm"] == s["max_norm"] == 1
    W = np.array([[1.0, 1.0, 0.0], [2.0, 2.0, 1.0]])
    assert head_angle_stats(W)["max_abs_cos"] == pytest.approx(1.0)
    with pytest.raises(ModelError, match="zero-norm"):
        head_angle_stats(np.array([[1.0, 0.0], [0.0, 0.0]]))


def test_head_exclusion_from_trainable():
    spec = FeatureNetSpec((6, 8), "relu", 0)
    assert "head.W" in build_model(spec, 3).trainable_names()
    for mode in ("fixed-random", "fixed-orthogonal"):
        names = build_model(spec, 3, mode).trainable_names()
        assert "head.W" not in names and "head.b" not in names


def test_feature_init_bounds():
    m = build_model(FeatureNetSpec((100, 25, 30), "relu", 0), 7)
    assert np.abs(m.features["layer0.W"]).max() <= 0.1
    assert np.abs(m.features["layer1.W"]).max() <= 0.2


def test_spec_validation():
    with pytest.raises(ModelError):
        FeatureNetSpec((5,), "relu")
    with pytest.raises(ModelError):
        FeatureNetSpec((5, 4), "sigmoid")
    with pytest.raises(ModelError):
        build_model(FeatureNetSpec((5, 2), "relu"), 3)


@pytest.mark.parametrize("mode", ["trainable", "fixed-random", "fixed-orthogonal"])
def test_checkpoint_round_trip(tmp_path, mode):
    m = build_model(FeatureNetSpec((6, 9, 8), "tanh", 21), 5, mode)
    path = save_checkpoint(m, tmp_path / "m.ckpt", {"step": 3})
    back = load_checkpoint(path)
    assert back.digest() == m.digest()
    assert back.head.mode == mode and back.spec == m.spec
    assert path.read_bytes().startswith(b"crossdepict-checkpoint")


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "bad.ckpt"
    p.write_bytes(b"not a checkpoint\n")
    with pytest.raises(ModelError):
        load_checkpoint(p)
