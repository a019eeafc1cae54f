"""What encoder self-attention heads do: confidence, positional, syntactic
and rare-word scores, and the labels derived from them.

All scores work on :class:`~headprune.model.AttentionRecord` objects, one
(query x key) weight matrix per sentence.  Argmax ties go to the lowest key
index; EOS keys are never candidates.
"""

from __future__ import annotations

import csv
import json
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .data import RELATIONS, AnnotatedCorpus, Arc, DataError
from .model import AttentionRecord, HeadId, Transformer, attention_records
from .training import batch_arrays, make_batches

DIRECTIONS = ("head->dep", "dep->head")
OFFSETS = tuple(range(-3, 4))
RARE_CUTOFF = 500


class AnalysisError(ValueError):
    pass


@dataclass(frozen=True)
class DependencyRelationSpec:
    relation: str
    direction: str  # which side of the arc asks the query

    def __post_init__(self):
        if self.relation not in RELATIONS:
            raise ValueError(f"unknown relation {self.relation!r}; expected one of {RELATIONS}")
        if self.direction not in DIRECTIONS:
            raise ValueError(f"unknown direction {self.direction!r}; expected one of {DIRECTIONS}")

    def label(self) -> str:
        return f"syntactic({self.relation},{self.direction})"


ALL_SPECS = tuple(DependencyRelationSpec(r, d) for r in RELATIONS for d in DIRECTIONS)


@dataclass(frozen=True)
class Thresholds:
    positional: float = 0.9
    syntactic_margin: float = 0.10
    syntactic_relative: bool = False
    rare_rank1: float = 0.5


def _argmax_keys(w: np.ndarray, key_is_eos: np.ndarray) -> np.ndarray:
    """Per-query argmax over non-EOS keys (first index on ties)."""
    if key_is_eos.all():
        raise AnalysisError("sentence has only EOS keys")
    masked = np.where(key_is_eos[None, :], -np.inf, w)
    return masked.argmax(axis=1)


def _queries(rec: AttentionRecord, i: int) -> np.ndarray:
    return np.flatnonzero(~rec.query_is_eos[i])


def _check(rec: AttentionRecord):
    if not rec.weights:
        raise AnalysisError(f"no attention recorded for {rec.head.label()}")


def confidence(rec: AttentionRecord) -> float:
    """Mean over non-EOS query tokens of the largest weight on a non-EOS key."""
    _check(rec)
    vals = []
    for i, w in enumerate(rec.weights):
        keys = ~rec.key_is_eos[i]
        if not keys.any():
            raise AnalysisError("sentence has only EOS keys")
        vals.append(w[_queries(rec, i)][:, keys].max(axis=1))
    vals = np.concatenate(vals)
    if vals.size == 0:
        raise AnalysisError("no query tokens")
    # exactly rounded sum, independent of summation order
    return math.fsum(vals.tolist()) / vals.size


def positional_scores(rec: AttentionRecord, offsets: Iterable[int] = OFFSETS) -> dict[int, float]:
    """Fraction of query tokens whose argmax key sits at query + offset."""
    _check(rec)
    hits: Counter = Counter()
    total = 0
    for i, w in enumerate(rec.weights):
        q = _queries(rec, i)
        am = _argmax_keys(w, rec.key_is_eos[i])[q]
        hits.update((am - q).tolist())
        total += len(q)
    if total == 0:
        raise AnalysisError("no query tokens")
    return {int(o): hits[o] / total for o in offsets}


def positional_score(rec: AttentionRecord, offset: int) -> float:
    return positional_scores(rec, [offset])[offset]


def _partners(arcs: Sequence[Arc], spec: DependencyRelationSpec) -> dict[int, set[int]]:
    """0-based query position -> 0-based partner positions for one sentence."""
    out: dict[int, set[int]] = {}
    for a in arcs:
        if a.relation != spec.relation or a.head == 0:
            continue
        h, d = a.head - 1, a.dependent - 1
        q, p = (h, d) if spec.direction == "head->dep" else (d, h)
        out.setdefault(q, set()).add(p)
    return out


def _aligned(arcs, n_words: int) -> bool:
    return arcs is not None and all(a.dependent <= n_words and a.head <= n_words for a in arcs)


@dataclass
class DependencyCounts:
    hits: int
    total: int
    skipped: int  # sentences without usable annotations

    @property
    def accuracy(self) -> float:
        if self.total == 0:
            raise AnalysisError("relation does not occur in the annotated sentences")
        return self.hits / self.total


def dependency_counts(rec: AttentionRecord, annotations: Sequence[Sequence[Arc] | None],
                      spec: DependencyRelationSpec) -> DependencyCounts:
    """Hits are query tokens whose argmax key is one of their relation partners."""
    _check(rec)
    if len(annotations) != len(rec.weights):
        raise DataError(f"{len(annotations)} annotations for {len(rec.weights)} sentences")
    hits = total = skipped = 0
    for i, w in enumerate(rec.weights):
        n_words = int((~rec.key_is_eos[i]).sum())
        if not _aligned(annotations[i], n_words):
            skipped += 1
            continue
        partners = _partners(annotations[i], spec)
        if not partners:
            continue
        am = _argmax_keys(w, rec.key_is_eos[i])
        for q, ps in partners.items():
            total += 1
            hits += int(am[q] in ps)
    return DependencyCounts(hits, total, skipped)


def dependency_accuracy(rec: AttentionRecord, annotations, spec: DependencyRelationSpec) -> float:
    return dependency_counts(rec, annotations, spec).accuracy


def relation_offsets(annotations: Iterable[Sequence[Arc] | None], spec: DependencyRelationSpec) -> Counter:
    """Signed partner - query offsets over all (query, partner) pairs."""
    c: Counter = Counter()
    for arcs in annotations:
        if arcs is None:
            continue
        for q, ps in _partners(arcs, spec).items():
            c.update(p - q for p in ps)
    return c


def positional_baseline(annotations: Sequence[Sequence[Arc] | None], spec: DependencyRelationSpec) -> float:
    """Accuracy of always attending at the relation's most frequent offset
    (ties: the smallest offset)."""
    offs = relation_offsets(annotations, spec)
    if not offs:
        raise AnalysisError(f"relation {spec.relation} does not occur in the annotations")
    best = max(offs.values())
    mode = min(o for o, n in offs.items() if n == best)
    hits = total = 0
    for arcs in annotations:
        if arcs is None:
            continue
        for q, ps in _partners(arcs, spec).items():
            total += 1
            hits += int(q + mode in ps)
    return hits / total


def classify_syntactic(accuracy: float, baseline: float, margin: float = 0.10, relative: bool = False) -> bool:
    """True when accuracy beats the baseline by ``margin`` (absolute points by
    default, or as a fraction of the baseline with ``relative``)."""
    for v in (accuracy, baseline):
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"scores must lie in [0, 1], got {v}")
    need = baseline * (1 + margin) if relative else baseline + margin
    return accuracy >= need - 1e-12


def rare_word_score(rec: AttentionRecord, ranks: Mapping[int, int], cutoff: int = RARE_CUTOFF) -> tuple[float, float]:
    """(rank-1 rate, top-2 rate) over sentences whose rarest token ranks
    beyond ``cutoff``.  The head's target is the non-EOS key with the most
    attention mass summed over queries."""
    _check(rec)
    r1 = r2 = n = 0
    for i, w in enumerate(rec.weights):
        keys = ~rec.key_is_eos[i]
        if not keys.any():
            raise AnalysisError("sentence has only EOS keys")
        toks = np.asarray(rec.key_tokens[i])
        distinct = sorted({int(t) for t in toks[keys]}, key=lambda t: (-ranks[t], t))
        if ranks[distinct[0]] <= cutoff:
            continue
        mass = np.where(keys, w.sum(axis=0), -np.inf)
        target = int(toks[int(mass.argmax())])
        n += 1
        r1 += target == distinct[0]
        r2 += target in distinct[:2]
    if n == 0:
        raise AnalysisError(f"no sentence has its rarest token beyond rank {cutoff}")
    return r1 / n, r2 / n


# ---------------------------------------------------------------------------
# profiles


@dataclass
class HeadProfile:
    head: HeadId
    confidence: float
    positional_scores: dict[int, float]
    syntactic_accuracies: dict[tuple[str, str], float] = field(default_factory=dict)
    baselines: dict[tuple[str, str], float] = field(default_factory=dict)
    rare_word_hit_rates: tuple[float, float] | None = None
    relevance: float | None = None
    labels: list[str] = field(default_factory=list)

    def relabel(self, thresholds: Thresholds = Thresholds()) -> list[str]:
        self.labels = assign_labels(self, thresholds)
        return self.labels

    def to_dict(self) -> dict:
        return {
            "attention_type": self.head.attention_type,
            "layer": self.head.layer,
            "head": self.head.head,
            "relevance": self.relevance,
            "confidence": self.confidence,
            "positional_scores": {str(k): v for k, v in sorted(self.positional_scores.items())},
            "syntactic_accuracies": {f"{r},{d}": v for (r, d), v in sorted(self.syntactic_accuracies.items())},
            "baselines": {f"{r},{d}": v for (r, d), v in sorted(self.baselines.items())},
            "rare_word_hit_rates": list(self.rare_word_hit_rates) if self.rare_word_hit_rates else None,
            "labels": list(self.labels),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "HeadProfile":
        def pairs(m):
            return {tuple(k.split(",")): float(v) for k, v in m.items()}

        rare = d.get("rare_word_hit_rates")
        return cls(HeadId(d["attention_type"], int(d["layer"]), int(d["head"])), float(d["confidence"]),
                   {int(k): float(v) for k, v in d["positional_scores"].items()},
                   pairs(d["syntactic_accuracies"]), pairs(d["baselines"]),
                   tuple(rare) if rare else None, d.get("relevance"), list(d["labels"]))


def assign_labels(p: HeadProfile, t: Thresholds = Thresholds()) -> list[str]:
    """Labels as a pure function of the stored scores."""
    labels = [f"positional({o:+d})" for o, s in sorted(p.positional_scores.items())
              if o != 0 and s >= t.positional]
    for key in sorted(p.syntactic_accuracies):
        if key in p.baselines and classify_syntactic(p.syntactic_accuracies[key], p.baselines[key],
                                                     t.syntactic_margin, t.syntactic_relative):
            labels.append(DependencyRelationSpec(*key).label())
    if p.rare_word_hit_rates is not None and p.rare_word_hit_rates[0] > t.rare_rank1:
        labels.append("rare-words")
    return labels


def label_kind(label: str) -> str:
    """'positional', 'syntactic' or 'rare-words'."""
    return re.match(r"[a-z-]+", label).group(0)


def collect_records(model: Transformer, corpus: AnnotatedCorpus, gates: Mapping | None = None,
                    batch_tokens: int = 512) -> dict[HeadId, AttentionRecord]:
    """Encoder self-attention records, one entry per sentence in corpus order."""
    from . import autodiff as ad

    c = model.config
    n = len(corpus)
    slots: dict[HeadId, list] = {}
    with ad.no_grad():
        for idx in make_batches(corpus, batch_tokens):
            src, tgt_in, _ = batch_arrays(corpus, idx, c.bos_id)
            res = model.forward(src, tgt_in, gates, record=True)
            res.attention = {k: v for k, v in res.attention.items() if k[0] == "encoder-self"}
            part = attention_records(res, src, tgt_in, c)
            for hid, rec in part.items():
                s = slots.setdefault(hid, [None] * n)
                for j, i in enumerate(idx):
                    s[i] = (rec.weights[j], rec.key_is_eos[j], rec.query_is_eos[j], rec.key_tokens[j])
    out = {}
    for hid in sorted(slots):
        rec = AttentionRecord(hid)
        for w, ke, qe, kt in slots[hid]:
            rec.weights.append(w)
            rec.key_is_eos.append(ke)
            rec.query_is_eos.append(qe)
            rec.key_tokens.append(kt)
        out[hid] = rec
    return out


def profile_head(rec: AttentionRecord, annotations: Sequence | None = None, ranks: Mapping[int, int] | None = None,
                 rarity_cutoff: int = RARE_CUTOFF, relevance: float | None = None,
                 thresholds: Thresholds = Thresholds()) -> HeadProfile:
    p = HeadProfile(rec.head, confidence(rec), positional_scores(rec), relevance=relevance)
    if annotations is not None and any(a for a in annotations):
        for spec in ALL_SPECS:
            counts = dependency_counts(rec, annotations, spec)
            if counts.total == 0:
                continue
            key = (spec.relation, spec.direction)
            p.syntactic_accuracies[key] = counts.accuracy
            p.baselines[key] = positional_baseline(annotations, spec)
    if ranks:
        try:
            p.rare_word_hit_rates = rare_word_score(rec, ranks, rarity_cutoff)
        except AnalysisError:
            p.rare_word_hit_rates = None
    p.relabel(thresholds)
    return p


def build_profiles(model: Transformer, corpus: AnnotatedCorpus, relevance=None, gates: Mapping | None = None,
                   rarity_cutoff: int = RARE_CUTOFF, thresholds: Thresholds = Thresholds(),
                   records: Mapping[HeadId, AttentionRecord] | None = None) -> list[HeadProfile]:
    """One profile per encoder self-attention head, sorted within each layer
    by relevance (most relevant first) when a relevance map is given."""
    records = records if records is not None else collect_records(model, corpus, gates)
    annotations = [p.arcs for p in corpus.pairs]
    ranks = corpus.ranks
    profiles = []
    for hid, rec in records.items():
        rel = relevance.values.get(hid) if relevance is not None else None
        profiles.append(profile_head(rec, annotations, ranks, rarity_cutoff, rel, thresholds))
    return sort_profiles(profiles)


def sort_profiles(profiles: Iterable[HeadProfile]) -> list[HeadProfile]:
    return sorted(profiles, key=lambda p: (p.head.attention_type, p.head.layer,
                                           -(p.relevance or 0.0), p.head.head))


# ---------------------------------------------------------------------------
# output


PROFILE_COLUMNS_HEAD = ["attention_type", "layer", "head", "relevance", "confidence"]


def _fmt(v) -> str:
    return "" if v is None else f"{v:.6f}"


def profile_rows(profiles: Sequence[HeadProfile]) -> tuple[list[str], list[list[str]]]:
    keys = sorted({k for p in profiles for k in p.syntactic_accuracies})
    header = list(PROFILE_COLUMNS_HEAD)
    header += [f"pos{o:+d}" for o in OFFSETS]
    for r, d in keys:
        header += [f"acc:{r}:{d}", f"base:{r}:{d}"]
    header += ["rare_rank1", "rare_top2", "labels"]
    rows = []
    for p in profiles:
        row = [p.head.attention_type, str(p.head.layer), str(p.head.head), _fmt(p.relevance), _fmt(p.confidence)]
        row += [_fmt(p.positional_scores.get(o)) for o in OFFSETS]
        for k in keys:
            row += [_fmt(p.syntactic_accuracies.get(k)), _fmt(p.baselines.get(k))]
        rr = p.rare_word_hit_rates or (None, None)
        row += [_fmt(rr[0]), _fmt(rr[1]), ";".join(p.labels)]
        rows.append(row)
    return header, rows


def write_profiles_csv(profiles: Sequence[HeadProfile], path) -> None:
    header, rows = profile_rows(profiles)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def write_profiles_json(profiles: Sequence[HeadProfile], path) -> None:
    doc = {"profiles": [p.to_dict() for p in profiles]}
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def read_profiles_json(path) -> list[HeadProfile]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    return [HeadProfile.from_dict(d) for d in doc["profiles"]]


def profile_schema() -> dict:
    text = resources.files("headprune").joinpath("schemas/head_profiles.schema.json").read_text(encoding="utf-8")
    return json.loads(text)


def write_grid(profiles: Sequence[HeadProfile], path) -> None:
    """Layer x slot grid for heatmaps; slot 0 is the layer's most relevant head."""
    by_layer: dict[tuple[str, int], list[HeadProfile]] = {}
    for p in profiles:
        by_layer.setdefault((p.head.attention_type, p.head.layer), []).append(p)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["attention_type", "layer", "slot", "head", "relevance", "confidence", "labels"])
        for (t, l) in sorted(by_layer):
            for slot, p in enumerate(sort_profiles(by_layer[(t, l)])):
                w.writerow([t, l, slot, p.head.head, _fmt(p.relevance), _fmt(p.confidence), ";".join(p.labels)])


FUNCTION_KINDS = ("positional", "syntactic", "rare-words", "other")


def retained_functions(profiles: Sequence[HeadProfile], retained: Iterable[HeadId]) -> dict[str, int]:
    """Count retained heads per function; a head with several kinds counts
    once for each, a head with none counts as 'other'."""
    retained = set(retained)
    counts = {k: 0 for k in FUNCTION_KINDS}
    for p in profiles:
        if p.head not in retained:
            continue
        kinds = {label_kind(l) for l in p.labels}
        for k in kinds or {"other"}:
            counts[k] += 1
    return counts


def write_retained_table(profiles: Sequence[HeadProfile], points: Sequence[tuple[str, Iterable[HeadId]]], path) -> None:
    """One row per sparsity point: label, number of retained heads, and
    retained heads per function."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["point", "retained"] + list(FUNCTION_KINDS))
        for name, heads in points:
            heads = set(heads)
            counts = retained_functions(profiles, heads)
            w.writerow([name, len(heads)] + [counts[k] for k in FUNCTION_KINDS])
