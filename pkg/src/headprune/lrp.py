"""Layer-wise relevance propagation with weight ratios.

Two engines share the same redistribution rule
``r_u = sum_{z in OUT(u)} w_{u->z} r_z``:

* :class:`NeuronGraph` / :func:`propagate_graph` work on explicit scalar
  neurons and are meant for small graphs and for checking;
* :func:`propagate` walks a recorded :mod:`autodiff` graph, using the
  per-op rules attached at forward time, and handles the Transformer.

Nonlinearities (ReLU, layer norm) pass relevance through unchanged.
Attention weights act as fixed coefficients of a weighted sum over values, so
the query/key path receives nothing.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .model import ATTENTION_TYPES, HeadId, Transformer
from .training import batch_arrays, make_batches

STABILIZER = ad.STABILIZER


def _stabilize(den: float) -> float:
    return den + np.sign(den) * STABILIZER


def weight_ratio_matmul(u, weights) -> tuple[np.ndarray, bool]:
    """Ratios W_u u / sum_u' W_u' u' for one output neuron.

    ``weights`` holds the column of W feeding the output.  Returns
    ``(ratios, degenerate)``; a zero denominator gives uniform ratios.
    """
    u = np.atleast_1d(np.asarray(u, dtype=np.float64))
    contrib = np.asarray(weights, dtype=np.float64).reshape(u.shape) * u
    den = contrib.sum()
    if den == 0:
        return np.full(u.shape, 1.0 / u.size), True
    return contrib / _stabilize(den), abs(den) < 1e-6


def weight_ratio_elementwise(u) -> tuple[np.ndarray, bool]:
    """Ratios u / sum u' for a product node v = prod u'."""
    u = np.atleast_1d(np.asarray(u, dtype=np.float64))
    den = u.sum()
    if den == 0:
        return np.full(u.shape, 1.0 / u.size), True
    return u / _stabilize(den), abs(den) < 1e-6


# ---------------------------------------------------------------------------
# explicit neuron graphs


@dataclass
class NeuronGraph:
    """Scalar neurons added in topological order.

    ``kind`` is "input", "linear" (v = sum W u), "product" (v = prod u),
    "residual" (v = sum u, split by |u|) or "relu" (v = max(0, u), relevance
    passed through).
    """

    kinds: list[str] = field(default_factory=list)
    inputs: list[list[int]] = field(default_factory=list)
    weights: list[list[float]] = field(default_factory=list)
    values: list[float] = field(default_factory=list)

    def add_input(self, value: float) -> int:
        return self._add("input", [], [], float(value))

    def add_linear(self, inputs: Sequence[int], weights: Sequence[float]) -> int:
        v = float(sum(w * self.values[u] for u, w in zip(inputs, weights)))
        return self._add("linear", inputs, weights, v)

    def add_product(self, inputs: Sequence[int]) -> int:
        return self._add("product", inputs, [1.0] * len(inputs), float(np.prod([self.values[u] for u in inputs])))

    def add_residual(self, inputs: Sequence[int]) -> int:
        return self._add("residual", inputs, [1.0] * len(inputs), float(sum(self.values[u] for u in inputs)))

    def add_relu(self, u: int) -> int:
        return self._add("relu", [u], [1.0], max(0.0, self.values[u]))

    def _add(self, kind, inputs, weights, value) -> int:
        if any(u >= len(self.values) for u in inputs):
            raise ValueError("inputs must be added before their consumers")
        self.kinds.append(kind)
        self.inputs.append(list(inputs))
        self.weights.append(list(weights))
        self.values.append(value)
        return len(self.values) - 1

    def __len__(self):
        return len(self.values)

    def ratios(self, v: int) -> tuple[np.ndarray, bool]:
        """Weight ratios w_{u->v} over IN(v)."""
        u = np.array([self.values[i] for i in self.inputs[v]])
        kind = self.kinds[v]
        if kind == "linear":
            return weight_ratio_matmul(u, self.weights[v])
        if kind == "product":
            return weight_ratio_elementwise(u)
        if kind == "relu":
            return np.ones(1), False
        if kind == "residual":
            a = np.abs(u)
            if a.sum() == 0:
                return np.full(u.shape, 1.0 / u.size), True
            return a / a.sum(), False
        raise ValueError(f"neuron {v} has no inputs")


@dataclass
class GraphRelevance:
    relevance: dict[int, float]
    at_stop: dict[int, float]
    degenerate: list[int]


def propagate_graph(graph: NeuronGraph, target: int, initial: float = 1.0,
                    stop: Iterable[int] = ()) -> GraphRelevance:
    """Relevance of every neuron for ``target`` via reverse-topological sweeps.

    Neurons in ``stop`` keep what they receive and pass nothing further.
    """
    if not 0 <= target < len(graph):
        raise ValueError(f"target {target} is not a neuron of the graph")
    stop = set(stop)
    rel = {target: float(initial)}
    degenerate = []
    for v in range(target, -1, -1):
        r = rel.get(v)
        if r is None or v in stop or graph.kinds[v] == "input":
            continue
        w, flagged = graph.ratios(v)
        if flagged:
            degenerate.append(v)
        for u, wu in zip(graph.inputs[v], w):
            rel[u] = rel.get(u, 0.0) + wu * r
    return GraphRelevance(rel, {s: rel.get(s, 0.0) for s in stop}, degenerate)


# ---------------------------------------------------------------------------
# tensor graphs


@dataclass
class Propagation:
    stopped: list[np.ndarray]
    recorded: list[np.ndarray]
    absorbed: np.ndarray  # relevance that reached activation sources
    degenerate: np.ndarray  # mass held back by stabilized denominators
    initial: np.ndarray


def _order(root: ad.Tensor, stop_ids: set[int]) -> list[ad.Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        if id(node) in stop_ids:
            continue
        for p in node._parents:
            if p.carries and id(p) not in seen:
                stack.append((p, False))
    return order


def _per_probe(x: np.ndarray, batched: bool = False) -> np.ndarray:
    if batched:
        return x.reshape(x.shape[0], x.shape[1], -1).sum(axis=2)
    return x.reshape(x.shape[0], -1).sum(axis=1)


def propagate(root: ad.Tensor, relevance: np.ndarray, stop: Sequence[ad.Tensor] = (),
              record: Sequence[ad.Tensor] = (), batched: bool = False) -> Propagation:
    """Push ``relevance`` (shape ``(P,) + root.shape``) down the graph.

    Relevance arriving at a ``stop`` node is kept there.  ``record`` nodes
    are tapped without stopping.  Anything reaching a node with no
    relevance-carrying parents (an embedding) counts as absorbed.  With
    ``batched`` every carrying node must have the batch on its first axis,
    and the absorbed/degenerate/initial totals are kept per (probe, sentence).
    """
    relevance = np.asarray(relevance, dtype=np.float64)
    if relevance.shape[1:] != root.shape:
        raise ad.ShapeError(f"relevance shape {relevance.shape[1:]} does not match root {root.shape}")
    if not root.carries:
        raise ValueError("root is not on an activation path")
    P = relevance.shape[0]
    stop_ids = {id(t): i for i, t in enumerate(stop)}
    rec_ids = {id(t): i for i, t in enumerate(record)}
    stopped = [np.zeros((P,) + t.shape) for t in stop]
    recorded = [np.zeros((P,) + t.shape) for t in record]
    totals_shape = (P, root.shape[0]) if batched else (P,)
    absorbed = np.zeros(totals_shape)
    degenerate = np.zeros(totals_shape)
    pending = {id(root): relevance}
    for node in reversed(_order(root, set(stop_ids))):
        R = pending.pop(id(node), None)
        if R is None:
            continue
        if id(node) in rec_ids:
            recorded[rec_ids[id(node)]] = R.copy()
        if id(node) in stop_ids:
            stopped[stop_ids[id(node)]] = R
            continue
        carrying = [p for p in node._parents if p.carries]
        if node._lrp is None or not carrying:
            absorbed += _per_probe(R, batched)
            continue
        parts = node._lrp(R)
        lost = getattr(parts, "lost", None)
        if lost is not None:
            degenerate += _per_probe(lost, batched)
        for p, part in zip(node._parents, parts):
            if part is None or not p.carries:
                continue
            key = id(p)
            pending[key] = pending[key] + part if key in pending else part
    return Propagation(stopped, recorded, absorbed, degenerate, _per_probe(relevance, batched))


# ---------------------------------------------------------------------------
# head relevance for a Transformer


@dataclass
class RelevanceMap:
    """Per-head relevance normalized within each (attention type, layer)."""

    values: dict[HeadId, float]
    steps: int
    clamped_mass: float = 0.0
    empty_steps: int = 0

    def layer(self, attention_type: str, layer: int) -> list[float]:
        heads = sorted(h for h in self.values if h.attention_type == attention_type and h.layer == layer)
        return [self.values[h] for h in heads]

    def ranking(self, attention_type: str, layer: int) -> list[int]:
        """Head indices of a layer, most relevant first."""
        vals = self.layer(attention_type, layer)
        return sorted(range(len(vals)), key=lambda i: (-vals[i], i))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["attention_type", "layer", "head", "relevance"])
            for h in sorted(self.values, key=lambda h: (ATTENTION_TYPES.index(h.attention_type), h.layer, h.head)):
                w.writerow([h.attention_type, h.layer, h.head, f"{self.values[h]:.10f}"])


def top1_relevance(logits: np.ndarray, initial: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """One probe per generation step t: ``initial`` on argmax logit at t.

    Returns (relevance of shape (T, B, T, V), predictions of shape (B, T)).
    """
    B, T, V = logits.shape
    pred = logits.argmax(-1)
    R = np.zeros((T, B, T, V))
    b = np.arange(B)
    for t in range(T):
        R[t, b, t, pred[:, t]] = initial
    return R, pred


def _sentence_batches(model: Transformer, corpus, gates, batch_tokens: int):
    """Yield (src, greedy-decoded target-input) arrays per length bucket."""
    bos = model.config.bos_id
    for idx in make_batches(corpus, batch_tokens):
        src, _, tgt = batch_arrays(corpus, idx, bos)
        pred = model.greedy_decode(src, tgt.shape[1], gates)
        tgt_in = np.concatenate([np.full((len(idx), 1), bos), pred[:, :-1]], axis=1)
        yield idx, src, tgt_in


def head_relevance(model: Transformer, corpus, attention_types: Sequence[str] = ("encoder-self",),
                   gates: Mapping | None = None, batch_tokens: int = 256,
                   initial: float = 1.0) -> RelevanceMap:
    """Average normalized head relevance for the top-1 logit over all greedy
    generation steps of all sentences in ``corpus``."""
    if len(corpus) == 0:
        raise ValueError("head relevance needs at least one sentence")
    c = model.config
    keys = [(t, l) for t in attention_types for l in range(c.num_layers)]
    sums = {k: np.zeros(c.num_heads) for k in keys}
    steps = 0
    clamped = 0.0
    empty = 0
    for _, src, tgt_in in _sentence_batches(model, corpus, gates, batch_tokens):
        res = model.forward(src, tgt_in, gates)
        R, _ = top1_relevance(res.logits.data, initial)
        taps = [res.taps[k + ("heads",)] for k in keys]
        prop = propagate(res.logits, R, record=taps)
        for k, r in zip(keys, prop.recorded):
            per_head = r.sum(axis=(3, 4))  # (T, B, h)
            clamped += float(-per_head[per_head < 0].sum())
            per_head = np.maximum(per_head, 0.0)
            tot = per_head.sum(-1, keepdims=True)
            zero = (tot[..., 0] == 0)
            empty += int(zero.sum())
            norm = np.where(tot > 0, per_head / np.where(tot > 0, tot, 1.0), 1.0 / c.num_heads)
            sums[k] += norm.sum(axis=(0, 1))
        steps += R.shape[0] * R.shape[1]
    values = {HeadId(t, l, h): float(sums[(t, l)][h] / steps) for t, l in keys for h in range(c.num_heads)}
    return RelevanceMap(values, steps, clamped, empty)


@dataclass
class ConservationReport:
    attention_type: str
    layer: int
    max_rel_error: float
    max_degenerate: float  # stabilizer mass, relative to the initial relevance
    heads_share: float  # mean fraction of relevance at the heads
    residual_share: float
    absorbed_share: float


def conservation_check(model: Transformer, src, tgt_in, gates: Mapping | None = None,
                       initial: float = 1.0) -> list[ConservationReport]:
    """For each encoder layer, stop propagation at the self-attention cut
    (head outputs plus the residual branch) and compare the mass found there,
    plus what was absorbed on the target side and what stabilized
    denominators held back, with the initial relevance.  Errors are per
    (generation step, sentence)."""
    res = model.forward(src, tgt_in, gates)
    R, _ = top1_relevance(res.logits.data, initial)
    reports = []
    for l in range(model.config.num_layers):
        key = ("encoder-self", l)
        cut = [res.taps[key + ("heads",)], res.taps[key + ("residual",)]]
        prop = propagate(res.logits, R, stop=cut, batched=True)
        heads = _per_probe(prop.stopped[0], True)
        resid = _per_probe(prop.stopped[1], True)
        total = heads + resid + prop.absorbed + prop.degenerate
        init = prop.initial
        live = init != 0
        err = np.abs(init - total)[live] / np.abs(init[live])
        reports.append(ConservationReport(
            "encoder-self", l, float(err.max()), float((np.abs(prop.degenerate)[live] / np.abs(init[live])).max()),
            float(np.mean(heads[live] / init[live])), float(np.mean(resid[live] / init[live])),
            float(np.mean(prop.absorbed[live] / init[live]))))
    return reports
