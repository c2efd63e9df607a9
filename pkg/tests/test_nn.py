import numpy as np
import pytest

from edgepro import nn

from conftest import tiny_cnn


def test_mlp_shapes_and_lockable_layers():
    net = nn.mlp((1, 28, 28), [256, 128], 10, seed=0)
    assert net.lockable_layers() == [1, 3]
    assert [net.width(p) for p in net.lockable_layers()] == [256, 128]
    assert net.lock_point(1) == 2
    out = nn.forward(net, np.zeros((3, 1, 28, 28)))
    assert out.shape == (3, 10)


def test_lenet1_structure():
    net = nn.lenet1(seed=0)
    kinds = [l.kind for l in net.layers]
    assert kinds == ["conv2d", "relu", "maxpool2d", "conv2d", "relu", "maxpool2d", "flatten",
                     "dense"]
    assert net.lockable_layers() == [0, 3]
    wide = nn.lenet1(seed=0, hidden=(64,))
    assert wide.lockable_layers() == [0, 3, 7]
    assert wide.width(7) == 64


def test_glorot_init_bounds_and_zero_bias():
    net = nn.mlp((20,), [30], 5, seed=4)
    w = net.layers[1].weight
    assert np.abs(w).max() <= np.sqrt(6 / 50)
    assert not net.layers[1].bias.any()


def test_bad_input_shape_names_layer():
    net = nn.mlp((8,), [4], 3)
    with pytest.raises(nn.ShapeError, match="layer 0"):
        nn.forward(net, np.zeros((2, 9)))


def test_inconsistent_network_rejected():
    rng = np.random.default_rng(0)
    with pytest.raises(nn.ShapeError, match=r"layer 1 \(dense\)"):
        nn.Network([nn.dense(rng, 4, 5), nn.dense(rng, 6, 2)], (4,), 2)
    with pytest.raises(nn.ShapeError, match="expected"):
        nn.Network([nn.dense(rng, 4, 5)], (4,), 3)


def test_softmax_cross_entropy_values():
    logits = np.array([[0.0, 0.0], [10.0, -10.0]])
    loss, grad = nn.softmax_cross_entropy(logits, np.array([0, 0]))
    assert np.isclose(loss, (np.log(2) + np.log1p(np.exp(-20))) / 2)
    assert np.allclose(grad.sum(axis=1), 0)
    with pytest.raises(ValueError):
        nn.softmax_cross_entropy(logits, np.array([0, 2]))


def test_cross_entropy_is_stable_for_huge_logits():
    loss, grad = nn.softmax_cross_entropy(np.array([[1e6, -1e6, 0.0]]), np.array([1]))
    assert np.isfinite(loss) and np.isfinite(grad).all()


def test_sgd_zero_lr_is_noop_and_shapes_checked(small_mlp):
    before = [p.copy() for p in small_mlp.parameters()]
    _, grads = nn.loss_and_grad(small_mlp, np.ones((2, 8)), np.array([0, 1]))
    nn.sgd_step(small_mlp, grads, 0.0)
    for a, b in zip(before, small_mlp.parameters()):
        np.testing.assert_array_equal(a, b)
    with pytest.raises(nn.ShapeError):
        nn.sgd_step(small_mlp, grads[:-1], 0.1)
    with pytest.raises(nn.ShapeError):
        nn.sgd_step(small_mlp, [g[..., :1] for g in grads], 0.1)


def test_sgd_step_decreases_loss(blobs):
    net = nn.mlp((8,), [16], 4, seed=0)
    x, y = blobs.x[:64], blobs.y[:64]
    loss0, grads = nn.loss_and_grad(net, x, y)
    nn.sgd_step(net, grads, 0.05)
    loss1, _ = nn.loss_and_grad(net, x, y)
    assert loss1 < loss0


def test_predict_batches_match_forward():
    net = tiny_cnn(1)
    x = np.random.default_rng(0).normal(size=(11, 1, 8, 8))
    assert (nn.predict(net, x, batch_size=3) == nn.forward(net, x).argmax(1)).all()


def test_partial_propagation_composes():
    net = nn.mlp((6,), [5, 4], 3, seed=2)
    x = np.random.default_rng(1).normal(size=(4, 6))
    mid = nn.propagate(net, x, stop=3)[0]
    np.testing.assert_allclose(nn.propagate(net, mid, start=3)[0], nn.forward(net, x))


@pytest.mark.parametrize("make", [lambda: nn.mlp((5,), [4, 3], 2, seed=3), lambda: tiny_cnn(2)])
def test_checkpoint_roundtrip(tmp_path, make):
    net = make()
    path = tmp_path / "m.epnn"
    nn.save(net, path)
    back = nn.load(path)
    assert nn.to_bytes(back) == nn.to_bytes(net)
    x = np.random.default_rng(0).normal(size=(3,) + net.input_shape)
    np.testing.assert_array_equal(nn.forward(back, x), nn.forward(net, x))


def test_checkpoint_corruption_detected():
    blob = bytearray(nn.to_bytes(nn.mlp((5,), [4], 2, seed=3)))
    for i in (0, 5, 20, len(blob) // 2, len(blob) - 1):
        bad = bytearray(blob)
        bad[i] ^= 0x10
        with pytest.raises(nn.CheckpointError):
            nn.from_bytes(bytes(bad))
    with pytest.raises(nn.CheckpointError):
        nn.from_bytes(bytes(blob[:-7]))
    with pytest.raises(nn.CheckpointError):
        nn.from_bytes(b"EPNN")


def test_copy_is_deep(small_mlp):
    twin = small_mlp.copy()
    twin.layers[1].weight[0, 0] += 1
    assert twin.layers[1].weight[0, 0] != small_mlp.layers[1].weight[0, 0]
