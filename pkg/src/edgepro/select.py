"""Neuron importance ranking and importance-weighted sampling.

Scores describe how much each neuron of every lockable layer contributes to
the network's output. Key generation favours low-importance neurons; the
pruning attack removes them.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from edgepro import nn

STRATEGIES = ("RNR", "AVR", "AFR", "WVR", "GCR", "LRPR")
DEFAULT_PROBE_SIZE = 256
LRP_EPSILON = 1e-6


@dataclass
class ImportanceScores:
    strategy: str
    scores: dict[int, np.ndarray]  # layer position -> one score per neuron

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        clean = {}
        for pos, s in self.scores.items():
            s = np.asarray(s, dtype=np.float64)
            if s.ndim != 1:
                raise ValueError(f"layer {pos}: scores must be a vector")
            if not np.all(np.isfinite(s)) or np.any(s < 0):
                raise ValueError(f"layer {pos}: scores must be finite and non-negative")
            clean[int(pos)] = s
        self.scores = dict(sorted(clean.items()))

    def to_dict(self) -> dict:
        return {"strategy": self.strategy,
                "scores": {str(k): v.tolist() for k, v in self.scores.items()}}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "ImportanceScores":
        doc = json.loads(text)
        return cls(doc["strategy"], {int(k): np.asarray(v) for k, v in doc["scores"].items()})


def _normalise_strategy(strategy: str) -> str:
    tag = str(strategy).upper()
    if tag not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    return tag


def _per_neuron(a: np.ndarray) -> np.ndarray:
    """Sum over the batch and, for feature maps, the spatial axes."""
    return a.sum(axis=(0,) + tuple(range(2, a.ndim)))


def _random(net, positions, rng):
    return {p: rng.uniform(size=net.width(p)) for p in positions}


def lrp_relevances(net: nn.Network, X, epsilon=LRP_EPSILON) -> dict[int, np.ndarray]:
    """Epsilon-rule relevance at every layer output reachable from the logits.

    Relevance starts as the predicted-class logit and flows backwards through
    Dense, ReLU and Flatten layers; it stops at the first layer of any other
    kind. Returns ``{layer position: signed relevance of its output}``, keyed
    by the layer whose output is described (the input itself is ``-1``).
    """
    X = np.asarray(X, dtype=np.float64)
    logits, _, outputs = nn.propagate(net, X, record=True)
    pred = logits.argmax(axis=1)
    R = np.zeros_like(logits)
    rows = np.arange(len(X))
    R[rows, pred] = logits[rows, pred]
    last = len(net.layers) - 1
    rel = {last: R}
    for i in range(last, -1, -1):
        layer = net.layers[i]
        a = outputs[i - 1] if i > 0 else X
        if isinstance(layer, nn.Dense):
            z = a @ layer.weight.T + layer.bias
            s = R / (z + epsilon * np.where(z >= 0, 1.0, -1.0))
            R = a * (s @ layer.weight)
        elif isinstance(layer, nn.ReLU):
            pass
        elif isinstance(layer, nn.Flatten):
            R = R.reshape(a.shape)
        else:
            break
        rel[i - 1] = R
    return rel


def rank_neurons(net: nn.Network, probe, strategy: str, seed=0) -> ImportanceScores:
    """Score every neuron (conv channel) of each lockable layer.

    ``probe`` is a batch of inputs or a :class:`~edgepro.data.Dataset`.
    """
    tag = _normalise_strategy(strategy)
    X = np.asarray(getattr(probe, "x", probe), dtype=np.float64)
    if X.ndim == 0 or len(X) == 0:
        raise ValueError("probe batch is empty")
    nn._check_batch(net, X)
    positions = net.lockable_layers()
    rng = np.random.default_rng(seed)

    if tag == "RNR":
        return ImportanceScores(tag, _random(net, positions, rng))

    if tag == "WVR":
        out = {}
        for p in positions:
            w = np.abs(net.layers[p].weight)
            out[p] = w.reshape(w.shape[0], -1).sum(axis=1)
        return ImportanceScores(tag, out)

    logits, tape, outputs = nn.propagate(net, X, record=True)
    acts = {p: outputs[net.lock_point(p)] for p in positions}

    if tag == "AVR":
        # post-ReLU values are non-negative; abs only matters without an activation
        return ImportanceScores(tag, {p: np.abs(_per_neuron(a)) for p, a in acts.items()})

    if tag == "AFR":
        return ImportanceScores(tag, {p: _per_neuron(a > 0).astype(np.float64)
                                      for p, a in acts.items()})

    if tag == "GCR":
        out = _random(net, positions, rng)
        convs = [p for p in positions if isinstance(net.layers[p], nn.Conv2D)]
        if convs:
            g = np.zeros_like(logits)
            g[np.arange(len(X)), logits.argmax(axis=1)] = 1.0
            seen: dict[int, np.ndarray] = {}
            nn.backprop(net, tape, g, observe=seen)
            for p in convs:
                a = acts[p]
                alpha = seen[net.lock_point(p)].mean(axis=(2, 3))
                out[p] = np.abs((alpha * a.mean(axis=(2, 3))).mean(axis=0))
        return ImportanceScores(tag, out)

    # LRPR
    out = _random(net, positions, rng)
    rel = lrp_relevances(net, X)
    for p in positions:
        lp = net.lock_point(p)
        if isinstance(net.layers[p], nn.Dense) and lp in rel:
            out[p] = np.abs(rel[lp]).sum(axis=0)
    return ImportanceScores(tag, out)


def rank_weights(scores: np.ndarray) -> np.ndarray:
    """Sampling weight ``r_max - r + 1`` for each neuron's ascending rank ``r``.

    Tied scores share the lowest rank of their group, so equal scores get equal
    weight.
    """
    s = np.asarray(scores, dtype=np.float64)
    order = np.argsort(s, kind="stable")
    ranks = np.empty(len(s), dtype=np.int64)
    sorted_s = s[order]
    first = np.r_[True, sorted_s[1:] != sorted_s[:-1]]
    group_start = np.maximum.accumulate(np.where(first, np.arange(len(s)), 0))
    ranks[order] = group_start
    return (ranks.max() - ranks + 1).astype(np.float64)


def weighted_sample(scores: ImportanceScores, rho_percent: float, seed=0) -> dict[int, np.ndarray]:
    """Draw ``round(rho% * width)`` neurons per layer, favouring low scores.

    ``seed`` may also be a ``numpy.random.Generator``.
    """
    from edgepro.lock import neuron_count

    if not 0 < rho_percent <= 100:
        raise ValueError(f"rho_percent must lie in (0, 100], got {rho_percent}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    chosen = {}
    for pos, s in scores.scores.items():
        n = neuron_count(rho_percent, len(s))
        w = rank_weights(s)
        idx = rng.choice(len(s), size=n, replace=False, p=w / w.sum())
        chosen[pos] = np.sort(idx)
    return chosen
