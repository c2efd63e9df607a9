import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from edgepro import nn
from edgepro.lock import (
    AuthorizationKey,
    KeyMismatchError,
    LayerLock,
    accuracy,
    evaluate,
    generate_key,
    lock_plan,
    locked_forward,
    neuron_count,
)

from conftest import random_key, tiny_cnn
from oracles import locked_forward_reference


@pytest.mark.parametrize("rho,width,expect", [(5, 256, 13), (5, 128, 6), (5, 10, 1), (5, 4, 0),
                                              (50, 3, 2), (100, 7, 7), (2.5, 20, 1)])
def test_neuron_count_rounds_half_up(rho, width, expect):
    assert neuron_count(rho, width) == expect


def test_generate_key_defaults_and_determinism():
    net = nn.mlp((1, 28, 28), [256, 128], 10)
    k1 = generate_key(net, seed=7)
    k2 = generate_key(net, seed=7)
    assert k1 == k2
    assert [len(ll.indices) for ll in k1.layers] == [13, 6]
    for ll in k1.layers:
        assert list(ll.indices) == sorted(set(ll.indices))
        assert all(0 <= v < 1 for v in ll.values)
        assert 0.2 <= ll.scale < 1
    assert generate_key(net, seed=8) != k1


@given(st.floats(0.5, 100), st.integers(0, 2**31 - 1))
@settings(max_examples=40, deadline=None)
def test_generate_key_properties(rho, seed):
    net = nn.mlp((6,), [20, 9], 3, seed=0)
    key = generate_key(net, rho, (1.0, 2.0), (0.5, 0.6), seed=seed)
    for ll in key.layers:
        assert len(ll.indices) == neuron_count(rho, net.width(ll.layer))
        assert len(set(ll.indices)) == len(ll.indices)
        assert all(1.0 <= v < 2.0 for v in ll.values)
        assert 0.5 <= ll.scale < 0.6


def test_gamma_strictly_positive_when_range_starts_at_zero():
    net = nn.mlp((4,), [5, 5, 5], 2)
    for seed in range(50):
        assert all(s > 0 for s in generate_key(net, 20, gamma_range=(0.0, 1e-3), seed=seed).scales.values())


@pytest.mark.parametrize("kwargs", [{"rho_percent": 0}, {"rho_percent": 101},
                                    {"value_range": (1, 1)}, {"gamma_range": (2, 1)},
                                    {"gamma_range": (-1, 1)}])
def test_generate_key_rejects_bad_parameters(kwargs):
    with pytest.raises(ValueError):
        generate_key(nn.mlp((4,), [5], 2), **kwargs)


def test_key_invariants_enforced():
    with pytest.raises(ValueError, match="twice"):
        AuthorizationKey((LayerLock(1, (), (), 1.0), LayerLock(1, (), (), 1.0)))
    with pytest.raises(ValueError, match="duplicate"):
        AuthorizationKey((LayerLock(1, (2, 2), (0.1, 0.2), 1.0),))
    with pytest.raises(ValueError, match="scale"):
        AuthorizationKey((LayerLock(1, (), (), 0.0),))
    with pytest.raises(ValueError, match="locking values"):
        AuthorizationKey((LayerLock(1, (2,), (), 1.0),))


def test_key_mismatch_errors():
    net = nn.mlp((4,), [5, 3], 2)
    with pytest.raises(KeyMismatchError, match="not a lockable"):
        lock_plan(net, AuthorizationKey((LayerLock(5, (), (), 1.0),)))
    with pytest.raises(KeyMismatchError, match="out of range"):
        lock_plan(net, AuthorizationKey((LayerLock(3, (3,), (0.5,), 1.0),)))


def test_notation():
    key = AuthorizationKey((LayerLock(5, (76,), (0.2,), 0.5), LayerLock(4, (29,), (0.7,), 0.3)))
    assert key.notation() == "4:29:0.7+5:76:0.2"
    assert key.neuron_count() == 2


def test_identity_key_equals_unlocked(small_mlp):
    x = np.random.default_rng(0).normal(size=(5, 8))
    ident = AuthorizationKey.identity(small_mlp)
    np.testing.assert_array_equal(locked_forward(small_mlp, x, ident), nn.forward(small_mlp, x))


def test_authorized_outputs_are_input_independent():
    net = nn.mlp((6,), [7, 5], 3, seed=1)
    key = AuthorizationKey((LayerLock(1, (0, 4), (0.3, 0.9), 0.5), LayerLock(3, (2,), (0.1,), 2.0)))
    x = np.random.default_rng(2).normal(size=(9, 6))
    _, _, outs = nn.propagate(net, x, lock=lock_plan(net, key), record=True)
    np.testing.assert_allclose(outs[2][:, [0, 4]], [[0.15, 0.45]] * 9)
    np.testing.assert_allclose(outs[4][:, 2], 0.2)


def test_conv_lock_replaces_whole_channel():
    net = tiny_cnn(0)
    key = AuthorizationKey((LayerLock(0, (1,), (0.25,), 2.0),))
    x = np.random.default_rng(3).normal(size=(2, 1, 8, 8))
    _, _, outs = nn.propagate(net, x, lock=lock_plan(net, key), record=True)
    assert np.all(outs[1][:, 1] == 0.5)


@pytest.mark.parametrize("seed", range(40))
def test_locked_forward_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    if seed % 2:
        net = tiny_cnn(seed, hidden=tuple(rng.integers(1, 5, size=seed % 3)))
    else:
        widths = list(rng.integers(1, 6, size=int(rng.integers(1, 4))))
        net = nn.mlp((int(rng.integers(1, 5)),), widths, int(rng.integers(2, 4)), seed=seed)
    key = random_key(net, rng)
    x = rng.normal(size=(3,) + net.input_shape)
    got = locked_forward(net, x, key)
    want = np.stack([locked_forward_reference(net, xi, key) for xi in x])
    np.testing.assert_allclose(got, want, rtol=1e-9, atol=1e-9)


def test_accuracy_and_evaluate(blobs, small_mlp):
    key = generate_key(small_mlp, 20, seed=1)
    res = evaluate(small_mlp, blobs, key)
    assert res.acc_nl == accuracy(small_mlp, blobs.x, blobs.y, key)
    assert res.acc_nu == accuracy(small_mlp, blobs.x, blobs.y)
    assert set(res.as_dict()) == {"acc_nl", "acc_nu", "n"}
    assert set(evaluate(small_mlp, blobs).as_dict()) == {"acc_nu", "n"}
