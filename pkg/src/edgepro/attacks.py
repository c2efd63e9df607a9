"""Adaptive attacks on a locked model: fine-tuning, pruning, reverse engineering.

Every attack works on a copy of the network and runs in unauthorized mode
unless it is explicitly searching for a lock configuration.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from edgepro import nn
from edgepro.data import Dataset
from edgepro.select import rank_neurons

PRUNE_METRICS = {"avgact": "AVR", "gradcam": "GCR", "lrp": "LRPR"}
DEFAULT_GRID = tuple(round(0.1 * k, 1) for k in range(1, 11))

CRACKED = "Cracked"
TIMEOUT = "Timeout"
EXHAUSTED = "Exhausted"


@dataclass
class AttackReport:
    kind: str
    acc_nu_before: float
    acc_nu_after: float
    resources: dict = field(default_factory=dict)
    recovered: list | None = None  # [(layer, neuron, value), ...]
    status: str = "done"

    def __post_init__(self):
        for name in ("acc_nu_before", "acc_nu_after"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")

    def notation(self) -> str | None:
        if self.recovered is None:
            return None
        return "+".join(f"{l}:{j}:{v:g}" for l, j, v in self.recovered)

    def to_dict(self) -> dict:
        out = {
            "kind": self.kind,
            "status": self.status,
            "acc_nu_before": self.acc_nu_before,
            "acc_nu_after": self.acc_nu_after,
            "resources": self.resources,
        }
        if self.recovered is not None:
            out["recovered"] = [list(t) for t in self.recovered]
            out["recovered_notation"] = self.notation()
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _acc(net, data: Dataset) -> float:
    return float(np.mean(nn.predict(net, data.x) == data.y))


# -- fine-tuning ------------------------------------------------------------

def finetune_attack(net: nn.Network, holdout: Dataset, eval_set: Dataset, epochs=10,
                    lr=0.01, batch_size=64, seed=0) -> AttackReport:
    """Retrain all parameters on a small labelled holdout, without the key."""
    if holdout is None or len(holdout) == 0:
        raise ValueError("fine-tuning needs a non-empty holdout")
    if epochs < 0 or lr < 0 or batch_size < 1:
        raise ValueError("epochs and lr must be >= 0, batch_size >= 1")
    started = time.perf_counter()
    model = net.copy()
    before = _acc(model, eval_set)
    rng = np.random.default_rng(seed)
    for _ in range(int(epochs)):
        order = rng.permutation(len(holdout))
        for i in range(0, len(order), batch_size):
            b = order[i:i + batch_size]
            _, grads = nn.loss_and_grad(model, holdout.x[b], holdout.y[b])
            nn.sgd_step(model, grads, lr)
    after = _acc(model, eval_set) if epochs else before
    return AttackReport(
        "finetune", before, after,
        {"candidate_evaluations": 0, "elapsed_seconds": time.perf_counter() - started,
         "finetune_epochs": int(epochs), "holdout_size": len(holdout)},
    )


# -- pruning ----------------------------------------------------------------

def prune_count(rate: float, width: int) -> int:
    """``ceil(rate * width)`` neurons, always leaving at least one alive."""
    n = math.ceil(round(rate * width, 9))
    return max(0, min(n, width - 1))


def prune_order(scores: np.ndarray) -> np.ndarray:
    """Neuron indices by ascending score, ties broken by lower index."""
    s = np.asarray(scores)
    return np.lexsort((np.arange(len(s)), s))


def prune(net: nn.Network, neurons: dict[int, np.ndarray]) -> nn.Network:
    """Copy of ``net`` whose listed neurons always output zero.

    Zeroing a neuron's incoming weights and bias makes its pre-activation, and
    so its post-ReLU output, identically zero.
    """
    model = net.copy()
    for pos, idx in neurons.items():
        layer = model.layers[pos]
        idx = np.asarray(idx, dtype=np.int64)
        layer.weight[idx] = 0.0
        layer.bias[idx] = 0.0
    return model


def prune_attack(net: nn.Network, metric: str, rate: float, probe: Dataset,
                 eval_set: Dataset, seed=0) -> AttackReport:
    """Remove the ``ceil(rate * width)`` least important neurons of every lockable layer."""
    key = str(metric).lower()
    if key not in PRUNE_METRICS:
        raise ValueError(f"unknown pruning metric {metric!r}; expected AvgAct, GradCAM or LRP")
    if not 0 < rate < 1:
        raise ValueError(f"prune rate must lie in (0, 1), got {rate}")
    started = time.perf_counter()
    before = _acc(net, eval_set)
    scores = rank_neurons(net, probe, PRUNE_METRICS[key], seed=seed)
    chosen = {
        pos: np.sort(prune_order(s)[:prune_count(rate, len(s))])
        for pos, s in scores.scores.items()
    }
    model = prune(net, chosen)
    return AttackReport(
        "prune", before, _acc(model, eval_set),
        {"candidate_evaluations": 0, "elapsed_seconds": time.perf_counter() - started,
         "pruned_fraction": rate, "metric": key,
         "pruned": {str(p): idx.tolist() for p, idx in chosen.items()}},
    )


# -- reverse engineering ----------------------------------------------------

def _set_unit(h, j, col):
    """Overwrite unit ``j`` (column or channel) of each row with ``col[row]``."""
    if h.ndim == 2:
        h[:, j] = col
    else:
        h[:, j] = col.reshape((-1,) + (1,) * (h.ndim - 2))


class _Searcher:
    """Scores batches of candidate lock configurations on a fixed probe."""

    def __init__(self, net, scales, probe: Dataset, max_rows):
        self.net = net
        self.probe = probe
        self.base = {net.lock_point(p): (np.zeros(0, np.int64), np.zeros(0), float(g))
                     for p, g in scales.items()}
        self.scales = {int(p): float(g) for p, g in scales.items()}
        _, _, outputs = nn.propagate(net, probe.x, lock=self.base, record=True)
        self.acts = outputs
        self.max_rows = max_rows

    def accuracy(self, assign, m) -> np.ndarray:
        """``assign`` is ``[(layer, neuron, values[m]), ...]`` sorted by layer."""
        B = len(self.probe)
        step = max(1, self.max_rows // B)
        out = []
        for lo in range(0, m, step):
            hi = min(m, lo + step)
            out.append(self._run([(l, j, v[lo:hi]) for l, j, v in assign], hi - lo))
        return np.concatenate(out)

    def _run(self, assign, m):
        net, B = self.net, len(self.probe)
        cur = net.lock_point(assign[0][0])
        h = self.acts[cur]
        H = np.broadcast_to(h, (m,) + h.shape).reshape((m * B,) + h.shape[1:]).copy()
        for layer, j, vals in assign:
            p = net.lock_point(layer)
            if p != cur:
                H = nn.propagate(net, H, start=cur + 1, lock=self.base, stop=p + 1)[0]
                cur = p
            _set_unit(H, j, np.repeat(self.scales[layer] * np.asarray(vals), B))
        logits = nn.propagate(net, H, start=cur + 1, lock=self.base)[0]
        return (logits.argmax(axis=1).reshape(m, B) == self.probe.y).mean(axis=1)


def reverse_engineer(
    net: nn.Network,
    gamma_known: dict[int, float],
    knowledge: str,
    probe: Dataset,
    reference_accuracy: float,
    value_grid=DEFAULT_GRID,
    success_threshold=0.9,
    budget=100_000,
    max_pair_order=2,
    hint_layers=None,
    max_rows=100_000,
) -> AttackReport:
    """Search (layer, neuron, value) settings that make the model work again.

    The attacker knows the per-layer scale factors (layers missing from
    ``gamma_known`` are taken as unscaled). Candidates are visited in a
    fixed order: every single neuron with every grid value, then every
    unordered neuron pair (pairs ordered lexicographically by neuron position)
    with every combination of values. ``knowledge="All"`` restricts the search
    to ``hint_layers`` (the layers holding the key), ``"Half"`` searches every
    lockable layer. The search stops at the first candidate whose probe
    accuracy reaches ``success_threshold * reference_accuracy`` or when
    ``budget`` candidates have been evaluated.
    """
    grid = np.asarray(list(value_grid), dtype=np.float64)
    if grid.size == 0:
        raise ValueError("value grid is empty")
    if budget < 0:
        raise ValueError("budget must be >= 0")
    mode = str(knowledge).lower()
    if mode not in ("all", "half"):
        raise ValueError(f"knowledge must be 'All' or 'Half', got {knowledge!r}")
    lockable = net.lockable_layers()
    unknown = set(gamma_known) - set(lockable)
    if unknown:
        raise ValueError(f"scale factors given for non-lockable layers {sorted(unknown)}")
    if mode == "all":
        if not hint_layers:
            raise ValueError("knowledge='All' needs hint_layers")
        layers = sorted(set(int(l) for l in hint_layers))
        if not set(layers) <= set(lockable):
            raise ValueError(f"hint layers {layers} are not all lockable ({lockable})")
    else:
        layers = list(lockable)

    started = time.perf_counter()
    model = net.copy()
    # a layer the key does not mention is left unscaled
    search = _Searcher(model, {p: gamma_known.get(p, 1.0) for p in lockable}, probe, max_rows)
    target = success_threshold * reference_accuracy
    before = _acc(model, probe)
    neurons = [(l, j) for l in layers for j in range(model.width(l))]
    nv = len(grid)
    used = {"singleton": 0, "pair": 0}
    best = (-1.0, None)

    def scan(phase, assign, m, triples):
        """Evaluate up to ``m`` candidates; returns a recovered config or None."""
        nonlocal best
        room = budget - used["singleton"] - used["pair"]
        m_eval = min(m, room)
        if m_eval <= 0:
            return None
        accs = search.accuracy([(l, j, v[:m_eval]) for l, j, v in assign], m_eval)
        hit = np.flatnonzero(accs >= target)
        if hit.size:
            k = int(hit[0])
            used[phase] += k + 1
            return triples(k), float(accs[k])
        used[phase] += m_eval
        k = int(np.argmax(accs))
        if accs[k] > best[0]:
            best = (float(accs[k]), triples(k))
        return None

    found = None
    for l, j in neurons:
        found = scan("singleton", [(l, j, grid)], nv,
                     lambda k, l=l, j=j: [(l, j, float(grid[k]))])
        if found or used["singleton"] >= budget:
            break
    if not found and max_pair_order >= 2:
        v1, v2 = np.repeat(grid, nv), np.tile(grid, nv)
        for (la, ja), (lb, jb) in combinations(neurons, 2):
            if used["singleton"] + used["pair"] >= budget:
                break
            found = scan(
                "pair", [(la, ja, v1), (lb, jb, v2)], nv * nv,
                lambda k, a=(la, ja), b=(lb, jb): [(a[0], a[1], float(v1[k])),
                                                   (b[0], b[1], float(v2[k]))],
            )
            if found:
                break

    total = used["singleton"] + used["pair"]
    n_single = len(neurons) * nv
    n_pair = len(neurons) * (len(neurons) - 1) // 2 * nv * nv if max_pair_order >= 2 else 0
    if found:
        status, (recovered, after) = CRACKED, found
    else:
        status = TIMEOUT if total >= budget and total < n_single + n_pair else EXHAUSTED
        recovered, after = None, max(best[0], 0.0) if best[1] is not None else before
    resources = {
        "candidate_evaluations": total,
        "singleton_evaluations": used["singleton"],
        "pair_evaluations": used["pair"],
        "search_space": n_single + n_pair,
        "budget": int(budget),
        "elapsed_seconds": time.perf_counter() - started,
        "recovered_candidates": 0 if recovered is None else len(recovered),
        "target_accuracy": target,
        "knowledge": "All" if mode == "all" else "Half",
    }
    if not found and best[1] is not None:
        resources["best_candidate"] = "+".join(f"{l}:{j}:{v:g}" for l, j, v in best[1])
    return AttackReport("reverse", before, after, resources, recovered, status)
