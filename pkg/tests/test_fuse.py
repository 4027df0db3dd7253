import numpy as np
import pytest

from unorm import normcore
from unorm.fuse import FusedAffinePair, LinearLayer, fuse_into_linear, verify_fusion
from unorm.numkernel import make_rng
from unorm.state import NormLayerState, NormMethodSpec


def test_identity_normalization():
    eps = 1e-5
    f = fuse_into_linear(np.ones(3), np.zeros(3), np.zeros(3), np.full(3, 1 - eps), eps,
                         LinearLayer(np.eye(3), np.zeros(3)))
    np.testing.assert_allclose(f.weight_prime, np.eye(3), atol=1e-15)
    np.testing.assert_allclose(f.bias_prime, 0, atol=1e-15)


def test_hand_example():
    f = fuse_into_linear([2.0], [1.0], [0.5], [4.0], 0.0, LinearLayer(np.array([[1.0]]), np.zeros(1)))
    assert f.weight_prime.tolist() == [[1.0]]
    assert f.bias_prime.tolist() == [0.5]


def _norm_then_linear(gamma, beta, mu, sigma2, eps, layer):
    # scalar-loop oracle, independent of the vectorized fusion code
    def run(x):
        x = np.asarray(x, dtype=np.float64)
        y = np.empty((x.shape[0], layer.weight.shape[0]))
        for r in range(x.shape[0]):
            n = [gamma[j] * (x[r, j] - mu[j]) / (sigma2[j] + eps) ** 0.5 + beta[j]
                 for j in range(x.shape[1])]
            for o in range(layer.weight.shape[0]):
                y[r, o] = sum(layer.weight[o, j] * n[j] for j in range(len(n))) + layer.bias[o]
        return y
    return run


def test_random_equivalence():
    rng = make_rng(0)
    g, b, mu = rng.uniform(0.5, 2, 4), rng.normal(size=4), rng.normal(size=4)
    s2 = rng.uniform(0.1, 3, 4)
    layer = LinearLayer(rng.normal(size=(3, 4)), rng.normal(size=3))
    fused = fuse_into_linear(g, b, mu, s2, 1e-5, layer)
    xs = [rng.normal(size=(1, 4)) for _ in range(100)]
    diff, ok = verify_fusion(_norm_then_linear(g, b, mu, s2, 1e-5, layer), fused, xs, 1e-9)
    assert ok and diff < 1e-9


@pytest.mark.parametrize("method", ["bn", "mabn", "pnstar", "un"])
def test_trained_state_fuses_exactly(method):
    spec = NormMethodSpec(method, warmup_steps=3, window_m=3, filtration=method == "un")
    rng = make_rng(1)
    st = NormLayerState.init(4)
    for _ in range(10):
        _, cache = normcore.train_forward(rng.normal(size=(8, 4)) * 2 + 0.5, st, spec)
        normcore.train_backward(rng.normal(size=(8, 4)), cache, st, spec)
    layer = LinearLayer(rng.normal(size=(5, 4)), rng.normal(size=5))
    mu, s2 = normcore.freeze_statistics(st)
    fused = fuse_into_linear(st.gamma, st.beta, mu, s2, spec.epsilon, layer)
    xs = [rng.uniform(-10, 10, (16, 4)) for _ in range(20)]
    diff, ok = verify_fusion(lambda x: layer(normcore.inference_forward(x, st, spec)), fused, xs)
    assert ok, diff


def test_corrupted_bias_detected():
    rng = make_rng(2)
    layer = LinearLayer(rng.normal(size=(3, 4)), rng.normal(size=3))
    f = fuse_into_linear(np.ones(4), np.zeros(4), np.zeros(4), np.ones(4), 1e-5, layer)
    bad = FusedAffinePair(f.weight_prime, f.bias_prime + np.array([1.0, 0, 0]))
    diff, ok = verify_fusion(f, bad, [rng.normal(size=(2, 4))])
    assert diff >= 1.0 - 1e-12 and not ok


def test_zero_input_gives_bias_difference():
    rng = make_rng(3)
    layer = LinearLayer(rng.normal(size=(3, 4)), rng.normal(size=3))
    g, b, mu, s2 = rng.uniform(0.5, 2, 4), rng.normal(size=4), rng.normal(size=4), rng.uniform(1, 2, 4)
    f = fuse_into_linear(g, b, mu, s2, 1e-5, layer)
    ref = layer.weight @ (g * (0 - mu) / np.sqrt(s2 + 1e-5) + b) + layer.bias
    diff, _ = verify_fusion(lambda x: np.broadcast_to(ref, (1, 3)), f, [np.zeros((1, 4))])
    assert diff == pytest.approx(np.max(np.abs(f.bias_prime - ref)), abs=1e-15)
    assert diff < 1e-12


def test_fusion_errors():
    layer = LinearLayer(np.ones((2, 3)), np.zeros(2))
    with pytest.raises(ValueError, match="positive"):
        fuse_into_linear(np.ones(3), np.zeros(3), np.zeros(3), [1.0, 0.0, 1.0], 1e-5, layer)
    with pytest.raises(ValueError, match="consume"):
        fuse_into_linear(np.ones(2), np.zeros(2), np.zeros(2), np.ones(2), 1e-5, layer)
    with pytest.raises(ValueError, match="channel count"):
        fuse_into_linear(np.ones(3), np.zeros(2), np.zeros(3), np.ones(3), 1e-5, layer)
    with pytest.raises(ValueError, match="shape"):
        verify_fusion(lambda x: np.zeros((1, 2)), lambda x: np.zeros((1, 3)), [0])


def test_fused_path_has_no_normalization_ops():
    rng = make_rng(4)
    layer = LinearLayer(rng.normal(size=(3, 4)), rng.normal(size=3))
    f = fuse_into_linear(np.ones(4), np.zeros(4), np.zeros(4), np.ones(4), 1e-5, layer)
    normcore.OP_COUNTS.clear()
    f(rng.normal(size=(10, 4)))
    assert normcore.OP_COUNTS["div"] == 0 and normcore.OP_COUNTS["sqrt"] == 0
    normcore.inference_forward(rng.normal(size=(10, 4)), NormLayerState.init(4), NormMethodSpec("bn"))
    assert normcore.OP_COUNTS["div"] == 40 and normcore.OP_COUNTS["sqrt"] == 4
