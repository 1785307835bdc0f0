import numpy as np
import pytest

from fedsurrogate.data import Dataset, generate_synthetic
from fedsurrogate.model import (
    MlpArchitecture,
    TrainConfig,
    backward,
    cross_entropy,
    evaluate,
    forward,
    init_model,
    local_train,
    predict,
)
from fedsurrogate.params import ParameterVector


def grad_finite_difference(arch, params, features, labels, eps=1e-6):
    base = params.values
    out = np.empty_like(base)
    for i in range(len(base)):
        plus = base.copy()
        plus[i] += eps
        minus = base.copy()
        minus[i] -= eps
        lp, _ = forward(arch, ParameterVector(plus, params.schema), features)
        lm, _ = forward(arch, ParameterVector(minus, params.schema), features)
        out[i] = (cross_entropy(lp, labels) - cross_entropy(lm, labels)) / (2 * eps)
    return out


class TestInit:
    def test_deterministic(self):
        arch = MlpArchitecture((4, 3, 2))
        assert np.array_equal(init_model(arch, 7).values, init_model(arch, 7).values)

    def test_seed_sensitivity(self):
        arch = MlpArchitecture((4, 3, 2))
        assert not np.array_equal(init_model(arch, 7).values, init_model(arch, 8).values)

    def test_zero_biases(self):
        arch = MlpArchitecture((4, 3, 2))
        params = init_model(arch, 0)
        for _, b in arch.unpack(params):
            assert np.all(b == 0.0)


class TestForward:
    def test_zero_weights_zero_logits(self):
        arch = MlpArchitecture((4, 3, 2))
        params = ParameterVector(np.zeros(arch.schema().total_length), arch.schema())
        logits, _ = forward(arch, params, np.ones((5, 4)))
        assert np.all(logits == 0.0)

    def test_hand_computed_two_neuron(self):
        # identity-ish single hidden pair: W1 = I (2x2), W2 = [[1,0],[0,2]]
        arch = MlpArchitecture((2, 2, 2))
        schema = arch.schema()
        values = np.zeros(schema.total_length)
        values[0:4] = np.eye(2).ravel()
        lo, _ = schema.bounds("fc2")
        values[lo:lo + 4] = np.array([[1.0, 0.0], [0.0, 2.0]]).ravel()
        logits, _ = forward(arch, ParameterVector(values, schema), np.array([[1.0, 1.0]]))
        assert np.allclose(logits, [[1.0, 2.0]])

    def test_dim_mismatch(self):
        arch = MlpArchitecture((4, 3, 2))
        params = init_model(arch, 0)
        with pytest.raises(ValueError):
            forward(arch, params, np.ones((2, 5)))


class TestBackward:
    @pytest.mark.parametrize("seed", range(3))
    def test_matches_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        arch = MlpArchitecture((5, 4, 3))
        params = init_model(arch, seed)
        feats = rng.uniform(0, 1, size=(6, 5))
        labels = rng.integers(0, 3, size=6)
        _, cache = forward(arch, params, feats)
        grad = backward(arch, params, cache, labels).values
        num = grad_finite_difference(arch, params, feats, labels)
        scale = np.maximum(np.abs(num), 1e-3)
        assert np.max(np.abs(grad - num) / scale) < 1e-5

    def test_duplicated_batch_same_mean_gradient(self):
        arch = MlpArchitecture((4, 3, 2))
        params = init_model(arch, 1)
        rng = np.random.default_rng(1)
        feats = rng.uniform(0, 1, size=(3, 4))
        labels = np.array([0, 1, 1])
        _, c1 = forward(arch, params, feats)
        g1 = backward(arch, params, c1, labels).values
        feats2 = np.vstack([feats, feats])
        labels2 = np.concatenate([labels, labels])
        _, c2 = forward(arch, params, feats2)
        g2 = backward(arch, params, c2, labels2).values
        assert np.allclose(g1, g2, atol=1e-12)

    def test_label_out_of_range(self):
        arch = MlpArchitecture((4, 3, 2))
        params = init_model(arch, 1)
        _, cache = forward(arch, params, np.ones((1, 4)))
        with pytest.raises(ValueError):
            backward(arch, params, cache, np.array([5]))


class TestLocalTrain:
    def setup_method(self):
        self.ds = generate_synthetic(3, 16, 30, 0.1, seed=0)
        self.arch = MlpArchitecture((16, 8, 3))
        self.start = init_model(self.arch, 0)

    def test_lr_zero_identity(self):
        cfg = TrainConfig(epochs=1, learning_rate=0.0, batch_size=8, seed=0)
        out = local_train(self.arch, self.start, self.ds, cfg)
        assert np.array_equal(out.values, self.start.values)

    def test_loss_decreases(self):
        cfg = TrainConfig(epochs=2, learning_rate=0.05, batch_size=16, seed=0)
        out = local_train(self.arch, self.start, self.ds, cfg)
        l0, _ = forward(self.arch, self.start, self.ds.features)
        l1, _ = forward(self.arch, out, self.ds.features)
        assert cross_entropy(l1, self.ds.labels) <= cross_entropy(l0, self.ds.labels)

    def test_seeded_reproducible(self):
        cfg = TrainConfig(epochs=2, learning_rate=0.05, batch_size=8, seed=4)
        a = local_train(self.arch, self.start, self.ds, cfg)
        b = local_train(self.arch, self.start, self.ds, cfg)
        assert np.array_equal(a.values, b.values)

    def test_empty_data_rejected(self):
        empty = Dataset(np.zeros((0, 16)), np.zeros(0, dtype=np.int64), 3)
        cfg = TrainConfig(epochs=1, learning_rate=0.1, batch_size=8, seed=0)
        with pytest.raises(ValueError):
            local_train(self.arch, self.start, empty, cfg)


class TestEvaluate:
    def test_constant_class_perfect(self):
        arch = MlpArchitecture((4, 3, 2))
        schema = arch.schema()
        values = np.zeros(schema.total_length)
        lo, hi = schema.bounds("fc2")
        values[hi - 1] = 1.0  # bias pushes class 1
        params = ParameterVector(values, schema)
        ds = Dataset(np.random.default_rng(0).uniform(0, 1, (10, 4)),
                     np.ones(10, dtype=np.int64), 2)
        assert evaluate(arch, params, ds) == 1.0
        assert np.all(predict(arch, params, ds.features) == 1)

    def test_empty_rejected(self):
        arch = MlpArchitecture((4, 3, 2))
        with pytest.raises(ValueError):
            evaluate(arch, init_model(arch, 0), Dataset(np.zeros((0, 4)), np.zeros(0, dtype=np.int64), 2))
