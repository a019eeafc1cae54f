"""Toy corpora, vocabularies, frequency ranks and CoNLL-U annotations."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

BOS = "<bos>"
EOS = "<eos>"
SPECIALS = (BOS, EOS)
RELATIONS = ("nsubj", "dobj", "amod", "advmod")
TASKS = ("copy", "reverse", "sort", "dep-grammar")
MAX_LEN = 32


class DataError(ValueError):
    pass


class Vocabulary:
    def __init__(self, tokens: Iterable[str]):
        toks = list(SPECIALS) + [t for t in tokens if t not in SPECIALS]
        if len(set(toks)) != len(toks):
            raise DataError("duplicate tokens in vocabulary")
        self.tokens = toks
        self.index = {t: i for i, t in enumerate(toks)}

    def __len__(self):
        return len(self.tokens)

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    @property
    def bos(self) -> int:
        return self.index[BOS]

    @property
    def eos(self) -> int:
        return self.index[EOS]

    def encode(self, words: Sequence[str]) -> list[int]:
        try:
            return [self.index[w] for w in words]
        except KeyError as exc:
            raise DataError(f"unknown token {exc.args[0]!r}") from None

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.tokens[i] for i in ids]


@dataclass(frozen=True)
class Arc:
    """Dependency arc with 1-based positions, as in CoNLL-U."""

    head: int
    dependent: int
    relation: str


@dataclass
class SentencePair:
    source: list[int]  # ends with EOS
    target: list[int]  # ends with EOS
    arcs: list[Arc] | None = None

    def __post_init__(self):
        if not self.source or not self.target:
            raise DataError("empty sentence")


@dataclass
class AnnotatedCorpus:
    pairs: list[SentencePair]
    src_vocab: Vocabulary
    tgt_vocab: Vocabulary
    kind: str = "custom"
    ranks: dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        for p in self.pairs:
            for ids, vocab in ((p.source, self.src_vocab), (p.target, self.tgt_vocab)):
                if max(ids) >= len(vocab) or min(ids) < 0:
                    raise DataError("token id outside vocabulary")
                if len(ids) > MAX_LEN:
                    raise DataError(f"sentence longer than {MAX_LEN} tokens")
            if p.arcs:
                n = len(p.source) - 1
                for a in p.arcs:
                    if not (1 <= a.dependent <= n and 0 <= a.head <= n):
                        raise DataError(f"arc {a} outside sentence of length {n}")
        if not self.ranks and self.pairs:
            self.ranks = frequency_ranks([p.source for p in self.pairs], len(self.src_vocab))

    def __len__(self):
        return len(self.pairs)

    def split(self, n_first: int) -> tuple["AnnotatedCorpus", "AnnotatedCorpus"]:
        a = AnnotatedCorpus(self.pairs[:n_first], self.src_vocab, self.tgt_vocab, self.kind, dict(self.ranks))
        b = AnnotatedCorpus(self.pairs[n_first:], self.src_vocab, self.tgt_vocab, self.kind, dict(self.ranks))
        return a, b

    def words(self, i: int) -> list[str]:
        """Source words of sentence ``i`` without EOS."""
        return self.src_vocab.decode(self.pairs[i].source[:-1])


def frequency_ranks(sentences: Iterable[Sequence[int]], vocab_size: int | None = None) -> dict[int, int]:
    """Rank 1 = most frequent token; ties broken by lower id.

    With ``vocab_size`` the ranks cover every id (unseen ids rank last), so
    they form a permutation of 1..vocab_size.
    """
    counts = Counter()
    for s in sentences:
        counts.update(int(t) for t in s)
    ids = range(vocab_size) if vocab_size is not None else counts.keys()
    order = sorted(ids, key=lambda t: (-counts.get(t, 0), t))
    return {t: r for r, t in enumerate(order, start=1)}


# ---------------------------------------------------------------------------
# task generation


def _simple_task(kind: str, size: int, rng: np.random.Generator, n_symbols: int, min_len: int, max_len: int):
    symbols = [f"s{i}" for i in range(n_symbols)]
    vocab = Vocabulary(symbols)
    pairs = []
    for _ in range(size):
        n = int(rng.integers(min_len, max_len + 1))
        words = [symbols[i] for i in rng.integers(0, n_symbols, size=n)]
        if kind == "copy":
            out = list(words)
        elif kind == "reverse":
            out = words[::-1]
        else:
            out = sorted(words, key=lambda w: int(w[1:]))
        pairs.append(SentencePair(vocab.encode(words) + [vocab.eos], vocab.encode(out) + [vocab.eos]))
    return AnnotatedCorpus(pairs, vocab, vocab, kind)


# word classes for the synthetic grammar
NOUNS = [f"n{i}" for i in range(16)]
ADJS = [f"a{i}" for i in range(8)]
VERBS = [f"v{i}" for i in range(8)]
ADVS = [f"r{i}" for i in range(6)]
DETS = [f"d{i}" for i in range(3)]
CONJS = ["c0", "c1"]
INFLECTIONS = 3
CLAUSE_CONTINUE = 0.7


def _zipf_choice(rng: np.random.Generator, words: Sequence[str], exponent: float = 1.1) -> str:
    w = 1.0 / np.arange(1, len(words) + 1) ** exponent
    return words[int(rng.choice(len(words), p=w / w.sum()))]


def _noun_phrase(rng, start: int):
    """Returns (words, noun_position, arcs) with 1-based positions."""
    words, arcs = [], []
    if rng.random() < 0.5:
        words.append(str(rng.choice(DETS)))
    n_adj = int(rng.choice([0, 1, 1, 2]))
    adj_pos = []
    for _ in range(n_adj):
        words.append(str(rng.choice(ADJS)))
        adj_pos.append(start + len(words) - 1)
    words.append(_zipf_choice(rng, NOUNS))
    noun = start + len(words) - 1
    arcs += [Arc(noun, a, "amod") for a in adj_pos]
    return words, noun, arcs


def grammar_clause(rng: np.random.Generator) -> tuple[list[str], list[Arc]]:
    """NP [ADV] V [NP] [ADV] with ground-truth arcs; determiners and optional
    adverbs shift the distances between relation partners."""
    words: list[str] = []
    arcs: list[Arc] = []
    np_words, subj, np_arcs = _noun_phrase(rng, 1)
    words += np_words
    arcs += np_arcs
    adv_pre = None
    if rng.random() < 0.3:
        words.append(str(rng.choice(ADVS)))
        adv_pre = len(words)
    words.append(str(rng.choice(VERBS)))
    verb = len(words)
    arcs.append(Arc(verb, subj, "nsubj"))
    if adv_pre is not None:
        arcs.append(Arc(verb, adv_pre, "advmod"))
    if rng.random() < 0.75:
        np_words, obj, np_arcs = _noun_phrase(rng, len(words) + 1)
        words += np_words
        arcs += np_arcs
        arcs.append(Arc(verb, obj, "dobj"))
    if rng.random() < 0.3:
        words.append(str(rng.choice(ADVS)))
        arcs.append(Arc(verb, len(words), "advmod"))
    arcs.append(Arc(0, verb, "root"))
    return words, sorted(arcs, key=lambda a: a.dependent)


def grammar_sentence(rng: np.random.Generator) -> tuple[list[str], list[Arc]]:
    """One or more clauses joined by conjunctions.  Later clause verbs attach
    to the first verb (conj); each conjunction attaches to the verb of the
    clause it opens (cc)."""
    words, arcs = grammar_clause(rng)
    root = next(a.dependent for a in arcs if a.head == 0)
    while rng.random() < CLAUSE_CONTINUE:
        more, more_arcs = grammar_clause(rng)
        if len(words) + 1 + len(more) > MAX_LEN - 1:
            break
        off = len(words) + 1
        conj = str(rng.choice(CONJS))
        for a in more_arcs:
            if a.head == 0:
                arcs.append(Arc(root, a.dependent + off, "conj"))
                arcs.append(Arc(a.dependent + off, off, "cc"))
            else:
                arcs.append(Arc(a.head + off, a.dependent + off, a.relation))
        words = words + [conj] + more
    return words, sorted(arcs, key=lambda a: a.dependent)


def inflection_class(word: str | None) -> int:
    """Class of the preceding word that selects the target inflection."""
    if word is None:
        return 0
    return (sum(map(ord, word)) % INFLECTIONS)


def inflect(words: Sequence[str]) -> list[str]:
    """Target side of the grammar task.  Each word carries the class of the
    source word before it, and clauses come out in reverse order, so the
    decoder cannot read the class off its own previous output at clause
    boundaries and the encoder has to carry source position i-1 into i."""
    clauses: list[list[str]] = [[]]
    for i, w in enumerate(words):
        if w in CONJS:
            clauses.append([])
        clauses[-1].append(f"{w}_{inflection_class(words[i - 1] if i else None)}")
    return [t for c in reversed(clauses) for t in c]


def _grammar_task(size: int, rng: np.random.Generator):
    src_vocab = Vocabulary(DETS + ADJS + NOUNS + VERBS + ADVS + CONJS)
    tgt_words = [f"{w}_{c}" for w in src_vocab.tokens[len(SPECIALS):] for c in range(INFLECTIONS)]
    tgt_vocab = Vocabulary(tgt_words)
    pairs = []
    for _ in range(size):
        words, arcs = grammar_sentence(rng)
        pairs.append(SentencePair(src_vocab.encode(words) + [src_vocab.eos],
                                  tgt_vocab.encode(inflect(words)) + [tgt_vocab.eos], arcs))
    return AnnotatedCorpus(pairs, src_vocab, tgt_vocab, "dep-grammar")


def generate_task(kind: str, size: int, seed: int = 0, n_symbols: int = 12,
                  min_len: int = 3, max_len: int = 10) -> AnnotatedCorpus:
    """Deterministic toy corpus of ``size`` sentence pairs."""
    if kind not in TASKS:
        raise DataError(f"unknown task kind {kind!r}; expected one of {TASKS}")
    rng = np.random.default_rng(seed)
    if kind == "dep-grammar":
        return _grammar_task(size, rng)
    if max_len + 1 > MAX_LEN:
        raise DataError(f"max_len must leave room for EOS within {MAX_LEN}")
    return _simple_task(kind, size, rng, n_symbols, min_len, max_len)


# ---------------------------------------------------------------------------
# CoNLL-U


@dataclass
class ConlluSentence:
    words: list[str]
    arcs: list[Arc]


@dataclass
class ConlluFile:
    sentences: list[ConlluSentence]
    rejected: int = 0


def _has_cycle(heads: dict[int, int]) -> bool:
    for start in heads:
        seen = set()
        node = start
        while node != 0:
            if node in seen:
                return True
            seen.add(node)
            node = heads.get(node, 0)
    return False


def read_conllu(path) -> ConlluFile:
    """Parse 10-column CoNLL-U.  Comments are ignored, multiword ranges and
    empty nodes skipped; sentences with cyclic arcs are rejected and counted."""
    sentences: list[ConlluSentence] = []
    rejected = 0
    words: list[str] = []
    heads: dict[int, int] = {}
    rels: dict[int, str] = {}

    def flush():
        nonlocal words, heads, rels, rejected
        if words:
            if _has_cycle(heads):
                rejected += 1
            else:
                arcs = [Arc(heads[d], d, rels[d]) for d in sorted(heads)]
                sentences.append(ConlluSentence(words, arcs))
        words, heads, rels = [], {}, {}

    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.rstrip("\n")
        if not line.strip():
            flush()
            continue
        if line.startswith("#"):
            continue
        cols = line.split("\t")
        if len(cols) != 10:
            raise DataError(f"{path}:{lineno}: expected 10 columns, found {len(cols)}")
        idx = cols[0]
        if "-" in idx or "." in idx:
            continue
        try:
            i = int(idx)
            head = int(cols[6])
        except ValueError:
            raise DataError(f"{path}:{lineno}: non-integer ID or HEAD") from None
        if i != len(words) + 1:
            raise DataError(f"{path}:{lineno}: token ids must be consecutive")
        words.append(cols[1])
        heads[i] = head
        rels[i] = cols[7].split(":")[0]
    flush()
    for s in sentences:
        n = len(s.words)
        for a in s.arcs:
            if not 0 <= a.head <= n:
                raise DataError(f"{path}: HEAD {a.head} outside sentence of length {n}")
    return ConlluFile(sentences, rejected)


def write_conllu(path, sentences: Iterable[ConlluSentence]) -> None:
    lines = []
    for s in sentences:
        by_dep = {a.dependent: a for a in s.arcs}
        for i, w in enumerate(s.words, start=1):
            a = by_dep.get(i)
            head, rel = (a.head, a.relation) if a else (0, "dep")
            lines.append(f"{i}\t{w}\t_\t_\t_\t_\t{head}\t{rel}\t_\t_")
        lines.append("")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def corpus_annotations(corpus: AnnotatedCorpus) -> list[ConlluSentence]:
    return [ConlluSentence(corpus.words(i), list(p.arcs or [])) for i, p in enumerate(corpus.pairs)]


def attach_annotations(corpus: AnnotatedCorpus, annotations: ConlluFile) -> int:
    """Copy arcs onto corpus sentences whose words match.  Returns the number
    of mismatched sentences; raises if the sentence counts differ."""
    if len(annotations.sentences) != len(corpus.pairs):
        raise DataError(f"{len(annotations.sentences)} annotated sentences for "
                        f"{len(corpus.pairs)} corpus sentences")
    mismatched = 0
    for i, (pair, ann) in enumerate(zip(corpus.pairs, annotations.sentences)):
        if ann.words != corpus.words(i):
            pair.arcs = None
            mismatched += 1
        else:
            pair.arcs = list(ann.arcs)
    return mismatched


# ---------------------------------------------------------------------------
# corpus files


def save_corpus(path, corpus: AnnotatedCorpus) -> None:
    """Line per sentence: source ids, a tab, target ids.  Vocabularies go to
    a JSON sidecar next to it."""
    path = Path(path)
    lines = [" ".join(map(str, p.source)) + "\t" + " ".join(map(str, p.target)) for p in corpus.pairs]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    sidecar = {"kind": corpus.kind, "source": corpus.src_vocab.tokens, "target": corpus.tgt_vocab.tokens}
    _sidecar(path).write_text(json.dumps(sidecar, indent=1), encoding="utf-8")


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".vocab.json")


def load_corpus(path) -> AnnotatedCorpus:
    path = Path(path)
    try:
        meta = json.loads(_sidecar(path).read_text(encoding="utf-8"))
        text = path.read_text(encoding="utf-8")
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read corpus {path}: {exc}") from exc
    src_vocab = Vocabulary(meta["source"])
    tgt_vocab = Vocabulary(meta["target"])
    pairs = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            s, t = line.split("\t")
            pairs.append(SentencePair([int(x) for x in s.split()], [int(x) for x in t.split()]))
        except ValueError:
            raise DataError(f"{path}:{lineno}: malformed corpus line") from None
    return AnnotatedCorpus(pairs, src_vocab, tgt_vocab, meta.get("kind", "custom"))
