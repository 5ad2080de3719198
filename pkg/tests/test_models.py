"""Model stack checks: forward/gradient correctness, training, data, FMDL."""

import math

import numpy as np
import pytest

from farbench import fp16, models
from farbench.formats import BlobError

RNG = np.random.default_rng(7)


def random_net(dims, acts=None, seed=0):
    return models.init_network(list(dims), acts, seed=seed)


def test_identity_layer_passthrough():
    eye = fp16.encode_array(np.eye(4))
    net = models.ToyNetwork([models.LinearLayer(eye, np.zeros(4, np.uint16))], 4)
    x = RNG.normal(size=(8, 4))
    out = models.forward(net, x).logits
    # weights decode exactly to 1.0/0.0, so output equals the input verbatim
    np.testing.assert_array_equal(out, x)


def test_zero_weights_zero_logits():
    net = models.ToyNetwork(
        [models.LinearLayer(np.zeros((3, 5), np.uint16), np.zeros(3, np.uint16))], 3)
    out = models.forward(net, RNG.normal(size=(6, 5))).logits
    assert np.all(out == 0.0)


def test_forward_matches_brute_force_oracle():
    net = random_net([16, 12, 4], seed=3)
    x = RNG.normal(size=(32, 16))
    got = models.forward(net, x).logits
    # independent brute-force evaluation of the same decoded weights
    h = x
    for layer in net.layers:
        w = np.vectorize(fp16.decode)(layer.weights)
        b = np.vectorize(fp16.decode)(layer.bias)
        z = np.array([[sum(w[r, l] * h[i, l] for l in range(layer.fan_in)) + b[r]
                       for r in range(layer.fan_out)] for i in range(len(h))])
        h = models.activation_apply(layer.activation, z)
    np.testing.assert_allclose(got, h, rtol=1e-12, atol=1e-12)


def test_fp16_forward_within_accumulation_bound():
    net = random_net([32, 8], [models.ACT_IDENTITY], seed=5)
    x = RNG.normal(size=(16, 32))
    wide = models.forward(net, x).logits
    narrow = models.forward(net, x, fp16_activations=True).logits
    # binary16 tree accumulation error grows with fan_in
    assert np.max(np.abs(narrow - wide)) < 32 * 2.0 ** -9


def test_shape_mismatch_rejected():
    net = random_net([8, 3])
    with pytest.raises(ValueError):
        models.forward(net, np.zeros((4, 9)))


def test_uniform_logits_loss_is_log_c():
    net = models.ToyNetwork(
        [models.LinearLayer(np.zeros((5, 7), np.uint16), np.zeros(5, np.uint16))], 5)
    batch = models.Batch(RNG.normal(size=(20, 7)), RNG.integers(0, 5, 20))
    report = models.loss_and_gradients(net, batch)
    assert abs(report.loss - math.log(5)) < 1e-12


def test_gradients_match_central_differences():
    net = random_net([4, 4], [models.ACT_IDENTITY], seed=11)
    batch = models.Batch(RNG.normal(size=(12, 4)), RNG.integers(0, 4, 12))
    report = models.loss_and_gradients(net, batch)

    def loss_with(wmat):
        z = batch.inputs @ wmat.T + fp16.decode_array(net.layers[0].bias)
        return models.cross_entropy(z, batch.labels)

    w0 = fp16.decode_array(net.layers[0].weights)
    h = 1e-6
    for r in range(4):
        for l in range(4):
            up, dn = w0.copy(), w0.copy()
            up[r, l] += h
            dn[r, l] -= h
            fd = (loss_with(up) - loss_with(dn)) / (2 * h)
            assert abs(fd - report.layers[0].grad[r, l]) <= 1e-3 * max(abs(fd), 1e-6)


@pytest.mark.parametrize("act", [models.ACT_RELU, models.ACT_GELU])
def test_hidden_layer_gradients_match_finite_differences(act):
    net = random_net([6, 5, 3], [act, models.ACT_IDENTITY], seed=7)
    batch = models.Batch(RNG.normal(size=(16, 6)), RNG.integers(0, 3, 16))
    report = models.loss_and_gradients(net, batch)

    def loss_with(layer_idx, wmat):
        x = batch.inputs
        for i, layer in enumerate(net.layers):
            w = wmat if i == layer_idx else fp16.decode_array(layer.weights)
            z = x @ w.T + fp16.decode_array(layer.bias)
            x = models.activation_apply(layer.activation, z)
        return models.cross_entropy(x, batch.labels)

    h = 1e-6
    for li, layer in enumerate(net.layers):
        w = fp16.decode_array(layer.weights)
        for r in range(layer.fan_out):
            for l in range(layer.fan_in):
                up, dn = w.copy(), w.copy()
                up[r, l] += h
                dn[r, l] -= h
                fd = (loss_with(li, up) - loss_with(li, dn)) / (2 * h)
                got = report.layers[li].grad[r, l]
                assert abs(fd - got) <= 1e-3 * max(abs(fd), 1e-5), (li, r, l)


def test_dead_input_lane_gets_zero_gradient():
    net = random_net([6, 3], seed=2)
    x = RNG.normal(size=(10, 6))
    x[:, 4] = 0.0
    batch = models.Batch(x, RNG.integers(0, 3, 10))
    report = models.loss_and_gradients(net, batch)
    assert np.all(report.layers[0].grad[:, 4] == 0.0)
    assert report.layers[0].input_abs_mean[4] == 0.0


def test_empty_batch_rejected():
    net = random_net([4, 2])
    with pytest.raises(ValueError):
        models.loss_and_gradients(net, models.Batch(np.zeros((0, 4)), np.zeros(0, np.int64)))


def test_train_zero_epochs_is_identity():
    net = random_net([8, 4], seed=9)
    data = models.synth_dataset(models.TaskSpec(classes=4, dim=8, dead_dims=2))
    out = models.train_toy(net, data.train, 0, 0.1)
    for a, b in zip(net.layers, out.layers):
        np.testing.assert_array_equal(a.weights, b.weights)
        np.testing.assert_array_equal(a.bias, b.bias)


def test_train_deterministic_given_seed():
    data = models.synth_dataset(models.TaskSpec(classes=3, dim=10, dead_dims=3))
    a = models.train_toy(random_net([10, 8, 3], seed=1), data.train, 20, 0.3, minibatch=64, seed=5)
    b = models.train_toy(random_net([10, 8, 3], seed=1), data.train, 20, 0.3, minibatch=64, seed=5)
    for la, lb in zip(a.layers, b.layers):
        np.testing.assert_array_equal(la.weights, lb.weights)


def test_train_separable_two_class_single_layer():
    spec = models.BUNDLED_TASKS["clusters2"]
    data = models.synth_dataset(spec)
    # the task itself is solvable at 99%+: logistic-regression oracle
    from sklearn.linear_model import LogisticRegression
    oracle = LogisticRegression(max_iter=1000).fit(data.train.inputs, data.train.labels)
    assert oracle.score(data.train.inputs, data.train.labels) >= 0.99
    net = random_net([spec.dim, spec.classes], [models.ACT_IDENTITY], seed=0)
    trained = models.train_toy(net, data.train, 200, 0.5)
    assert models.accuracy(trained, data.train) >= 0.99


def test_bundled_model_reaches_90_percent():
    net, data = models.bundled_model("clusters3")
    assert models.accuracy(net, data.train) >= 0.90
    assert models.accuracy(net, data.attack) >= 0.90


def test_training_divergence_reported():
    data = models.synth_dataset(models.TaskSpec(classes=2, dim=6, dead_dims=0))
    with pytest.raises(models.TrainingDiverged):
        models.train_toy(random_net([6, 2]), data.train, 200, 1e6)


def test_synth_dataset_deterministic_bytes():
    spec = models.TaskSpec(seed=42)
    a, b = models.synth_dataset(spec), models.synth_dataset(spec)
    assert a.train.inputs.tobytes() == b.train.inputs.tobytes()
    assert a.attack.labels.tobytes() == b.attack.labels.tobytes()


def test_synth_dataset_nearest_mean_oracle():
    spec = models.TaskSpec(classes=4, dim=12, dead_dims=0, separation=8.0,
                           train_per_class=500, seed=3)
    data = models.synth_dataset(spec)
    d = np.linalg.norm(data.train.inputs[:, None] - data.means[None], axis=2)
    assert np.mean(d.argmin(axis=1) == data.train.labels) >= 0.999


def test_synth_dataset_zero_samples():
    data = models.synth_dataset(models.TaskSpec(train_per_class=0, attack_per_class=0))
    assert len(data.train) == 0 and len(data.attack) == 0


def test_model_blob_roundtrip():
    net = random_net([10, 6, 3], seed=4)
    blob = models.save_model(net)
    back = models.load_model(blob)
    assert back.class_count == 3
    for a, b in zip(net.layers, back.layers):
        np.testing.assert_array_equal(a.weights, b.weights)
        np.testing.assert_array_equal(a.bias, b.bias)
        assert a.activation == b.activation
    # byte-identical re-serialization (idempotent outputs)
    assert models.save_model(back) == blob


def test_model_blob_corruption_detected():
    blob = bytearray(models.save_model(random_net([4, 2])))
    blob[10] ^= 0x40
    with pytest.raises(BlobError) as err:
        models.load_model(bytes(blob))
    assert err.value.reason == "crc"
