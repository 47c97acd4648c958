import json

import numpy as np
import pytest

from saferetract import network as nw
from saferetract.network import Layer, Network, NetworkFormatError, argmax_action, forward, random_network


@pytest.fixture
def abs_net():
    return Network.from_arrays([[[1.0], [-1.0]], [[1.0, 1.0]]], [[0.0, 0.0], [0.0]])


def test_forward_single_layer():
    net = Network.from_arrays([[[2.0]]], [[1.0]])
    assert forward(net, [3.0]).tolist() == [7.0]


def test_forward_relu(abs_net):
    assert forward(abs_net, [-2.0]).tolist() == [2.0]


def test_forward_zero_weights_gives_bias():
    net = Network.from_arrays([np.zeros((4, 3)), np.zeros((2, 4))], [np.ones(4), np.array([0.25, -3.0])])
    assert forward(net, [5.0, -1.0, 2.0]).tolist() == [0.25, -3.0]


def test_forward_batch_matches_rows():
    rng = np.random.default_rng(0)
    net = random_network([3, 8, 2], rng)
    X = rng.normal(size=(10, 3))
    batch = forward(net, X)
    for x, y in zip(X, batch):
        np.testing.assert_array_equal(forward(net, x), y)


def test_forward_rows_do_not_depend_on_batch():
    rng = np.random.default_rng(11)
    for _ in range(40):
        sizes = [int(rng.integers(1, 40)) for _ in range(int(rng.integers(2, 5)))]
        net = random_network(sizes, rng)
        X = rng.normal(size=(int(rng.integers(1, 700)), sizes[0])) * rng.choice([1e-3, 1.0, 1e3])
        full = forward(net, X)
        for i in rng.integers(0, len(X), 4):
            np.testing.assert_array_equal(forward(net, X[i]), full[i])
            start = int(rng.integers(0, i + 1))
            np.testing.assert_array_equal(forward(net, X[start:i + 1])[-1], full[i])


def test_forward_dimension_mismatch(abs_net):
    with pytest.raises(ValueError):
        forward(abs_net, [1.0, 2.0])


def test_argmax_ties_go_to_lowest_index():
    net = Network.from_arrays([np.zeros((3, 1))], [np.array([0.1, 0.9, 0.3])])
    assert argmax_action(net, [0.0]) == 1
    tie = Network.from_arrays([np.zeros((2, 1))], [np.array([0.5, 0.5])])
    assert argmax_action(tie, [0.0]) == 0


def test_argmax_from_forward_example():
    # |x| network with a second output pinned at 0: outputs [2, 0] at x = -2.
    net = Network.from_arrays([[[1.0], [-1.0]], [[1.0, 1.0], [0.0, 0.0]]], [[0.0, 0.0], [0.0, 0.0]])
    assert forward(net, [-2.0]).tolist() == [2.0, 0.0]
    assert argmax_action(net, [-2.0]) == 0


def test_argmax_shift_invariant():
    rng = np.random.default_rng(1)
    net = random_network([4, 16, 5], rng)
    last = net.layers[-1]
    shifted = Network(net.layers[:-1] + (Layer(last.weights, last.biases + 3.25, "identity"),))
    X = rng.normal(size=(200, 4))
    np.testing.assert_array_equal(argmax_action(net, X), argmax_action(shifted, X))


def test_invariants_enforced():
    with pytest.raises(ValueError):
        Layer(np.zeros((2, 2)), np.zeros(3))
    with pytest.raises(ValueError):
        Network((Layer(np.zeros((2, 2)), np.zeros(2), "relu"),))
    with pytest.raises(ValueError):
        Network((Layer(np.zeros((2, 3)), np.zeros(2)), Layer(np.zeros((1, 3)), np.zeros(1), "identity")))
    with pytest.raises(ValueError):
        Layer(np.array([[np.nan]]), np.zeros(1))


def test_round_trip_8_64_64_27(tmp_path):
    rng = np.random.default_rng(7)
    net = random_network([8, 64, 64, 27], rng)
    path = tmp_path / "p.net.json"
    nw.save(net, path)
    back = nw.load(path)
    assert back.equals(net)
    X = rng.uniform(0, 1, size=(100, 8))
    np.testing.assert_array_equal(forward(back, X), forward(net, X))


def _doc(net):
    return json.loads(json.dumps(nw.to_dict(net)))


def test_load_bias_mismatch_names_layer(tmp_path):
    doc = _doc(random_network([2, 3, 2], np.random.default_rng(0)))
    doc["layers"][1]["biases"].append(0.0)
    (tmp_path / "bad.json").write_text(json.dumps(doc))
    with pytest.raises(NetworkFormatError, match=r"layers\[1\]\.biases"):
        nw.load(tmp_path / "bad.json")


def test_load_unknown_activation(tmp_path):
    doc = _doc(random_network([2, 3, 2], np.random.default_rng(0)))
    doc["layers"][0]["activation"] = "tanh"
    (tmp_path / "bad.json").write_text(json.dumps(doc))
    with pytest.raises(NetworkFormatError, match="activation.*tanh"):
        nw.load(tmp_path / "bad.json")


@pytest.mark.parametrize(
    "mutate, field",
    [
        (lambda d: d.update(format_version=99), "format_version"),
        (lambda d: d.update(output_dim=5), "output_dim"),
        (lambda d: d.pop("layers"), "layers"),
        (lambda d: d["layers"][1].update(weights=[[1.0, 2.0], [3.0, 4.0]]), r"layers\[1\]\.weights"),
    ],
)
def test_load_validation(tmp_path, mutate, field):
    doc = _doc(random_network([2, 3, 2], np.random.default_rng(0)))
    mutate(doc)
    (tmp_path / "bad.json").write_text(json.dumps(doc))
    with pytest.raises(NetworkFormatError, match=field):
        nw.load(tmp_path / "bad.json")


def test_load_invalid_json(tmp_path):
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(NetworkFormatError, match="document"):
        nw.load(tmp_path / "bad.json")
