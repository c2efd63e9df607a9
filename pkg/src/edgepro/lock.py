"""Authorization keys, the locked forward pass and accuracy evaluation.

A key fixes, for every hidden Dense/Conv2D layer, a few secret neurons, the
constant each of them is forced to, and one positive scale factor for the
whole layer. In authorized mode the layer's post-activation output has those
neurons overwritten and is then multiplied by the scale. Unauthorized
inference is the plain network.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from edgepro import nn


class KeyMismatchError(ValueError):
    """The key refers to layers or neurons the network does not have."""


@dataclass(frozen=True)
class LayerLock:
    layer: int
    indices: tuple[int, ...]
    values: tuple[float, ...]
    scale: float

    @property
    def locking_values(self) -> dict[int, float]:
        return dict(zip(self.indices, self.values))

    def triples(self) -> list[str]:
        return [f"{self.layer}:{j}:{v:g}" for j, v in zip(self.indices, self.values)]


@dataclass(frozen=True)
class AuthorizationKey:
    layers: tuple[LayerLock, ...]
    rho_percent: float = 0.0
    value_range: tuple[float, float] = (0.0, 1.0)
    gamma_range: tuple[float, float] = (1.0, 1.0)
    seed: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(sorted(self.layers, key=lambda l: l.layer)))
        seen = set()
        for ll in self.layers:
            if ll.layer in seen:
                raise ValueError(f"layer {ll.layer} appears twice in key")
            seen.add(ll.layer)
            if len(set(ll.indices)) != len(ll.indices):
                raise ValueError(f"duplicate authorization neuron in layer {ll.layer}")
            if len(ll.indices) != len(ll.values):
                raise ValueError(f"layer {ll.layer}: {len(ll.indices)} neurons, "
                                 f"{len(ll.values)} locking values")
            if not ll.scale > 0:
                raise ValueError(f"layer {ll.layer}: scale factor must be > 0")

    @property
    def scales(self) -> dict[int, float]:
        return {ll.layer: ll.scale for ll in self.layers}

    def layer(self, position: int) -> LayerLock:
        for ll in self.layers:
            if ll.layer == position:
                return ll
        raise KeyError(position)

    def neuron_count(self) -> int:
        return sum(len(ll.indices) for ll in self.layers)

    def notation(self) -> str:
        """Triples ``layer:neuron:value`` joined by ``+``."""
        return "+".join(t for ll in self.layers for t in ll.triples())

    @classmethod
    def identity(cls, net: nn.Network) -> "AuthorizationKey":
        """No authorization neurons and unit scales: locking changes nothing."""
        return cls(tuple(LayerLock(i, (), (), 1.0) for i in net.lockable_layers()))


@dataclass
class EvalResult:
    acc_nu: float
    n_examples: int
    acc_nl: float | None = None

    def as_dict(self) -> dict:
        out = {"acc_nu": self.acc_nu, "n": self.n_examples}
        if self.acc_nl is not None:
            out = {"acc_nl": self.acc_nl, **out}
        return out


def neuron_count(rho_percent: float, width: int) -> int:
    """``round(rho% * width)`` with halves rounded away from zero."""
    return int(math.floor(rho_percent * width / 100.0 + 0.5))


def _check_range(name, rng_):
    lo, hi = (float(v) for v in rng_)
    if not (0 <= lo < hi) or not (math.isfinite(lo) and math.isfinite(hi)):
        raise ValueError(f"{name} must satisfy 0 <= lo < hi, got ({lo}, {hi})")
    return lo, hi


def _draw_open(rng, lo, hi, size):
    vals = rng.uniform(lo, hi, size=size)
    while np.any(vals <= 0):  # keeps scales strictly positive when lo == 0
        bad = vals <= 0
        vals[bad] = rng.uniform(lo, hi, size=int(bad.sum()))
    return vals


def generate_key(
    net: nn.Network,
    rho_percent: float = 5.0,
    value_range=(0.0, 1.0),
    gamma_range=(0.2, 1.0),
    seed: int | None = 0,
    importance_scores=None,
) -> AuthorizationKey:
    """Draw the secret neurons, locking values and per-layer scale factors.

    Neurons are sampled uniformly, or via :func:`edgepro.select.weighted_sample`
    when ``importance_scores`` are given (low-importance neurons favoured).
    """
    if not 0 < rho_percent <= 100:
        raise ValueError(f"rho_percent must lie in (0, 100], got {rho_percent}")
    vlo, vhi = _check_range("value_range", value_range)
    glo, ghi = _check_range("gamma_range", gamma_range)
    rng = np.random.default_rng(seed)
    positions = net.lockable_layers()
    if importance_scores is not None:
        from edgepro.select import weighted_sample

        chosen = weighted_sample(importance_scores, rho_percent, rng)
        missing = set(positions) - set(chosen)
        if missing:
            raise KeyMismatchError(f"no importance scores for layers {sorted(missing)}")
    else:
        chosen = {}
        for pos in positions:
            n = neuron_count(rho_percent, net.width(pos))
            chosen[pos] = np.sort(rng.choice(net.width(pos), size=n, replace=False))
    layers = []
    for pos in positions:
        idx = sorted(int(i) for i in chosen[pos])
        vals = rng.uniform(vlo, vhi, size=len(idx))
        scale = float(_draw_open(rng, glo, ghi, 1)[0])
        layers.append(LayerLock(pos, tuple(idx), tuple(float(v) for v in vals), scale))
    return AuthorizationKey(
        tuple(layers), float(rho_percent), (vlo, vhi), (glo, ghi),
        None if seed is None or not isinstance(seed, (int, np.integer)) else int(seed),
    )


def check_key(net: nn.Network, key: AuthorizationKey) -> None:
    lockable = set(net.lockable_layers())
    for ll in key.layers:
        if ll.layer not in lockable:
            raise KeyMismatchError(f"key layer {ll.layer} is not a lockable hidden layer "
                                   f"(lockable: {sorted(lockable)})")
        width = net.width(ll.layer)
        for j in ll.indices:
            if not 0 <= j < width:
                raise KeyMismatchError(
                    f"key layer {ll.layer}: neuron index {j} out of range for width {width}"
                )


def lock_plan(net: nn.Network, key: AuthorizationKey) -> dict:
    """Translate a key into the engine's ``{position: (idx, values, scale)}`` map."""
    check_key(net, key)
    return {
        net.lock_point(ll.layer): (
            np.asarray(ll.indices, dtype=np.int64),
            np.asarray(ll.values, dtype=np.float64),
            float(ll.scale),
        )
        for ll in key.layers
    }


def locked_forward(net: nn.Network, batch, key: AuthorizationKey) -> np.ndarray:
    """Authorized-mode logits: replace authorized outputs, then scale each layer."""
    return nn.forward(net, batch, lock=lock_plan(net, key))


def locked_loss_and_grad(net: nn.Network, batch, labels, key: AuthorizationKey):
    return nn.loss_and_grad(net, batch, labels, lock=lock_plan(net, key))


def accuracy(net: nn.Network, X, y, key: AuthorizationKey | None = None) -> float:
    lock = lock_plan(net, key) if key is not None else None
    return float(np.mean(nn.predict(net, X, lock=lock) == np.asarray(y)))


def evaluate(net: nn.Network, dataset, key: AuthorizationKey | None = None) -> EvalResult:
    """``acc_nu`` always; ``acc_nl`` too when a key is supplied."""
    X, y = dataset.x, dataset.y
    if len(y) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    result = EvalResult(acc_nu=accuracy(net, X, y), n_examples=len(y))
    if key is not None:
        result.acc_nl = accuracy(net, X, y, key)
    return result
