"""Cross-entropy training, Adam with warmup schedule, and head pruning runs."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .data import AnnotatedCorpus
from .gates import GateSet
from .model import ATTENTION_TYPES, ModelConfig, Transformer

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 0.0
    batch_tokens: int = 1024
    warmup_steps: int = 400
    scale: float = 0.5
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    max_steps: int = 10000
    freeze_decoder: bool = False
    gate_types: tuple[str, ...] = ("encoder-self",)
    gate_lr_mult: float = 10.0
    seed: int = 0
    eval_every: int = 0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        if self.warmup_steps < 1:
            raise ValueError("warmup_steps must be >= 1")
        if self.batch_tokens < 1 or self.max_steps < 0:
            raise ValueError("batch_tokens must be positive and max_steps nonnegative")
        for t in self.gate_types:
            if t not in ATTENTION_TYPES:
                raise ValueError(f"unknown attention type {t!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["gate_types"] = list(self.gate_types)
        return d


def cross_entropy(logits: ad.Tensor, targets) -> ad.Tensor:
    """Mean negative log-likelihood of ``targets`` under ``logits``."""
    targets = np.asarray(targets)
    V = logits.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= V):
        raise IndexError(f"target id outside vocabulary of size {V}")
    return ad.scale(ad.mean_all(ad.pick(ad.log_softmax(logits), targets)), -1.0)


def lr_schedule(step: int, warmup_steps: int, scale: float) -> float:
    """scale * min(step^-0.5, step * warmup^-1.5)."""
    if step < 1:
        raise ValueError("step numbers start at 1")
    return scale * min(step ** -0.5, step * warmup_steps ** -1.5)


class Adam:
    def __init__(self, params: Sequence[ad.Tensor], beta1=0.9, beta2=0.98, eps=1e-9,
                 lr_mult: Mapping[int, float] | None = None):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0
        self.lr_mult = lr_mult or {}

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * g * g
            step = lr * self.lr_mult.get(id(p), 1.0) * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)
            p.data -= step

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


# ---------------------------------------------------------------------------
# batching


def _bucketed(corpus: AnnotatedCorpus):
    buckets: dict[tuple[int, int], list[int]] = {}
    for i, p in enumerate(corpus.pairs):
        buckets.setdefault((len(p.source), len(p.target)), []).append(i)
    return buckets


def make_batches(corpus: AnnotatedCorpus, batch_tokens: int, rng: np.random.Generator | None = None):
    """Group sentences of identical (source, target) length into batches of
    roughly ``batch_tokens`` source tokens.  Shuffled when ``rng`` is given."""
    out = []
    for (ls, _), idx in sorted(_bucketed(corpus).items()):
        idx = list(idx)
        if rng is not None:
            rng.shuffle(idx)
        per = max(1, batch_tokens // ls)
        out += [idx[i:i + per] for i in range(0, len(idx), per)]
    if rng is not None:
        order = rng.permutation(len(out))
        out = [out[i] for i in order]
    return out


def batch_arrays(corpus: AnnotatedCorpus, idx: Sequence[int], bos: int):
    src = np.array([corpus.pairs[i].source for i in idx], dtype=np.int64)
    tgt = np.array([corpus.pairs[i].target for i in idx], dtype=np.int64)
    tgt_in = np.concatenate([np.full((len(idx), 1), bos, dtype=np.int64), tgt[:, :-1]], axis=1)
    return src, tgt_in, tgt


def batch_stream(corpus: AnnotatedCorpus, batch_tokens: int, rng: np.random.Generator):
    while True:
        for b in make_batches(corpus, batch_tokens, rng):
            yield b


# ---------------------------------------------------------------------------
# evaluation


def token_accuracy(model: Transformer, corpus: AnnotatedCorpus, gates: Mapping | None = None,
                   batch_tokens: int = 2048) -> float:
    """Greedy-decoding accuracy over all target tokens (EOS included)."""
    correct = total = 0
    for idx in make_batches(corpus, batch_tokens):
        src, _, tgt = batch_arrays(corpus, idx, model.config.bos_id)
        pred = model.greedy_decode(src, tgt.shape[1], gates)
        correct += int((pred == tgt).sum())
        total += tgt.size
    return correct / total if total else float("nan")


def mean_loss(model: Transformer, corpus: AnnotatedCorpus, gates: Mapping | None = None,
              batch_tokens: int = 2048) -> float:
    tot = n = 0.0
    with ad.no_grad():
        for idx in make_batches(corpus, batch_tokens):
            src, tgt_in, tgt = batch_arrays(corpus, idx, model.config.bos_id)
            loss = cross_entropy(model.forward(src, tgt_in, gates).logits, tgt)
            tot += float(loss.data) * tgt.size
            n += tgt.size
    return tot / n


def constant_gates(values: Mapping[tuple[str, int], np.ndarray]) -> dict[tuple[str, int], ad.Tensor]:
    return {k: ad.Tensor(np.asarray(v, dtype=np.float64)) for k, v in values.items()}


# ---------------------------------------------------------------------------
# training loops


@dataclass
class TrainResult:
    model: Transformer
    losses: list[float]
    steps: int
    gates: GateSet | None = None


def model_for(corpus: AnnotatedCorpus, seed: int = 0, **arch) -> Transformer:
    """A fresh model sized to ``corpus``'s vocabularies."""
    cfg = ModelConfig(src_vocab=len(corpus.src_vocab), tgt_vocab=len(corpus.tgt_vocab),
                      bos_id=corpus.tgt_vocab.bos, eos_id=corpus.src_vocab.eos, **arch)
    return Transformer(cfg, seed=seed)


def _run(model: Transformer, corpus: AnnotatedCorpus, config: TrainConfig, params: list[ad.Tensor],
         gate_set: GateSet | None, fixed_gates: Mapping | None, lr_mult: dict[int, float]):
    rng = np.random.default_rng(config.seed)
    stream = batch_stream(corpus, config.batch_tokens, rng)
    gate_rng = np.random.default_rng([config.seed, 1])
    opt = Adam(params, config.beta1, config.beta2, config.eps, lr_mult)
    losses: list[float] = []
    for step in range(1, config.max_steps + 1):
        idx = next(stream)
        src, tgt_in, tgt = batch_arrays(corpus, idx, model.config.bos_id)
        if gate_set is not None:
            gates = gate_set.sample(gate_rng)
        else:
            gates = fixed_gates
        try:
            loss = cross_entropy(model.forward(src, tgt_in, gates).logits, tgt)
            xent = float(loss.data)
            if gate_set is not None:
                loss = ad.add(loss, ad.scale(gate_set.l_c(), config.lam))
            opt.zero_grad()
            ad.backward(loss)
        except ad.NonFiniteError as exc:
            raise TrainingDiverged(f"step {step}: {exc}") from exc
        if not math.isfinite(float(loss.data)):
            raise TrainingDiverged(f"step {step}: loss is not finite")
        opt.step(lr_schedule(step, config.warmup_steps, config.scale))
        losses.append(xent)
        if config.eval_every and step % config.eval_every == 0:
            log.info("step %d loss %.4f", step, xent)
    return losses


def train(model: Transformer, corpus: AnnotatedCorpus, config: TrainConfig,
          fixed_gates: Mapping | None = None) -> TrainResult:
    """Plain cross-entropy training (no gate penalty).

    ``fixed_gates`` freezes a head configuration, e.g. a 0/1 mask taken from a
    pruned model, to train the same architecture from scratch.
    """
    if fixed_gates is not None:
        fixed_gates = constant_gates({k: ad.as_tensor(v).data for k, v in fixed_gates.items()})
    losses = _run(model, corpus, config, list(model.params.values()), None, fixed_gates, {})
    return TrainResult(model, losses, config.max_steps)


OPEN_LOG_ALPHA = 30.0  # P(g=1) within 1e-12 of 1


@dataclass
class PruningRun:
    lam: float
    retained: dict[str, int]
    metric: float
    loss: float
    binarized: float
    total_heads: int
    gates: GateSet | None = field(default=None, repr=False)
    model: Transformer | None = field(default=None, repr=False)
    losses: list[float] = field(default_factory=list, repr=False)

    def counts_str(self) -> str:
        """Retained heads as "e/d/d-e"."""
        r = self.retained
        return f"{r['encoder-self']}/{r['decoder-self']}/{r['decoder-encoder']}"


def prune_finetune(base: Transformer, corpus: AnnotatedCorpus, config: TrainConfig,
                   heldout: AnnotatedCorpus | None = None) -> PruningRun:
    """Fine-tune ``base`` with gates on ``config.gate_types`` under
    L_xent + lam * L_C, then discretize the gates.  ``base`` is not modified.

    lam == 0 is plain fine-tuning with no gates in the graph; the returned
    gate set is saturated open so it describes the ungated model.
    """
    model = base.copy()
    c = model.config
    gate_set = GateSet.create(c.num_layers, c.num_heads, config.gate_types)
    trainable = model.encoder_params() if config.freeze_decoder else model.params
    if config.lam > 0:
        params = list(trainable.values()) + gate_set.params()
        lr_mult = {id(p): config.gate_lr_mult for p in gate_set.params()}
        losses = _run(model, corpus, config, params, gate_set, None, lr_mult)
    else:
        losses = _run(model, corpus, config, list(trainable.values()), None, None, {})
        for la in gate_set.params():
            la.data[...] = OPEN_LOG_ALPHA
    disc = constant_gates(gate_set.discretize())
    counts = gate_set.retained_counts()
    for t in ATTENTION_TYPES:
        if t not in config.gate_types:
            counts[t] = c.num_layers * c.num_heads
    evalset = heldout if heldout is not None else corpus
    metric = token_accuracy(model, evalset, disc)
    return PruningRun(config.lam, counts, metric, mean_loss(model, evalset, disc),
                      gate_set.binarized_fraction(), c.num_layers * c.num_heads,
                      gate_set, model, losses)


def default_lambdas(low: float = 0.005, high: float = 0.5, n: int = 8) -> list[float]:
    """Geometric grid."""
    return [float(x) for x in np.geomspace(low, high, n)]


@dataclass
class SweepReport:
    runs: list[PruningRun]
    violations: list[tuple[float, float]]

    def rows(self) -> list[dict]:
        return [{
            "lambda": r.lam,
            "retained": r.counts_str(),
            "encoder_self": r.retained["encoder-self"],
            "decoder_self": r.retained["decoder-self"],
            "decoder_encoder": r.retained["decoder-encoder"],
            "metric": r.metric,
            "loss": r.loss,
            "binarized": r.binarized,
        } for r in self.runs]


def lambda_sweep(base: Transformer, corpus: AnnotatedCorpus, lambdas: Sequence[float],
                 config: TrainConfig, heldout: AnnotatedCorpus | None = None) -> SweepReport:
    """One pruning run per lambda.  Non-monotone retained counts are recorded
    as (lambda_prev, lambda) pairs rather than raised."""
    lambdas = list(lambdas)
    if lambdas != sorted(lambdas):
        raise ValueError("lambda list must be sorted ascending")
    runs = []
    for lam in lambdas:
        run = prune_finetune(base, corpus, replace(config, lam=lam), heldout)
        log.info("lambda %.4g retained %s metric %.4f", lam, run.counts_str(), run.metric)
        runs.append(run)
    violations = []
    for a, b in zip(runs, runs[1:]):
        if sum(b.retained.values()) > sum(a.retained.values()):
            violations.append((a.lam, b.lam))
    return SweepReport(runs, violations)
