"""Corpora for the two tasks: BIO-tagged NER and pairwise relation classification.

Synthetic corpora are built from disjoint word pools (entity lexicons,
relation triggers, context words) so that a noise-free corpus is perfectly
learnable. Real data enters through the two text formats below.

CoNLL BIO
    one ``token<TAB>tag`` pair per line, blank line between sentences.
    Tags are ``O``, ``B``/``I`` (single untyped entity class) or
    ``B-X``/``I-X``.

Relation file
    one instance per line, tab separated:
    ``tokens  subj_start  subj_end  obj_start  obj_end  label`` where tokens
    are space joined and span ends are inclusive.
"""

from __future__ import annotations

import re
from dataclasses import asdict, dataclass, field
from itertools import combinations, permutations
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

PAD, UNK = "<pad>", "<unk>"
SUBJ_START, SUBJ_END, OBJ_START, OBJ_END = "<s>", "</s>", "<o>", "</o>"
SPECIAL_TOKENS = (PAD, UNK, SUBJ_START, SUBJ_END, OBJ_START, OBJ_END)
NO_RELATION = "none"
OUTSIDE = "O"

_TAG_RE = re.compile(r"^(O|[BI](-\S+)?)$")


class DataFormatError(ValueError):
    pass


class InfeasibleSpecError(ValueError):
    pass


class Span(NamedTuple):
    entity_type: str
    start: int
    end: int  # inclusive


@dataclass(frozen=True)
class RelationInstance:
    tokens: tuple[str, ...]
    subject: Span
    object: Span
    label: str

    def __post_init__(self):
        n = len(self.tokens)
        for s in (self.subject, self.object):
            if not 0 <= s.start <= s.end < n:
                raise ValueError(f"span {s} out of range for {n} tokens")
        if not (self.subject.end < self.object.start or self.object.end < self.subject.start):
            raise ValueError("subject and object spans overlap")


# a tagged sentence: (tokens, tags)
Sentence = tuple[list[str], list[str]]


# ---------------------------------------------------------------------------
# vocabularies
# ---------------------------------------------------------------------------


class Vocab:
    """Token <-> id map. Id 0 is padding, id 1 the unknown token."""

    def __init__(self, tokens: Iterable[str]):
        self.itos: list[str] = list(SPECIAL_TOKENS)
        for t in tokens:
            if t not in SPECIAL_TOKENS:
                self.itos.append(t)
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def id(self, token: str) -> int:
        return self.stoi.get(token, 1)

    def encode(self, tokens: Sequence[str]) -> np.ndarray:
        return np.array([self.stoi.get(t, 1) for t in tokens], dtype=np.int64)

    @classmethod
    def from_corpus(cls, sentences: Iterable[Sequence[str]]) -> "Vocab":
        seen: dict[str, None] = {}
        for toks in sentences:
            for t in toks:
                seen.setdefault(t, None)
        return cls(seen)


class LabelSet:
    """Ordered label list; index 0 is the negative/outside label."""

    def __init__(self, labels: Sequence[str]):
        self.labels = list(labels)
        self.index = {l: i for i, l in enumerate(self.labels)}

    def __len__(self) -> int:
        return len(self.labels)

    def encode(self, labels: Sequence[str]) -> np.ndarray:
        try:
            return np.array([self.index[l] for l in labels], dtype=np.int64)
        except KeyError as e:
            raise DataFormatError(f"label {e.args[0]!r} not in label set {self.labels}") from None

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.labels[int(i)] for i in ids]

    @classmethod
    def bio(cls, entity_types: Sequence[str]) -> "LabelSet":
        """``O`` plus ``B-X``/``I-X`` per type; an untyped set is ``O, B, I``."""
        if list(entity_types) in ([], [""]):
            return cls([OUTSIDE, "B", "I"])
        labels = [OUTSIDE]
        for t in entity_types:
            labels += [f"B-{t}", f"I-{t}"]
        return cls(labels)

    @classmethod
    def relations(cls, relations: Sequence[str]) -> "LabelSet":
        return cls([NO_RELATION] + [r for r in relations if r != NO_RELATION])


# ---------------------------------------------------------------------------
# BIO decoding and encoding
# ---------------------------------------------------------------------------


def _split_tag(tag: str) -> tuple[str, str]:
    if tag == OUTSIDE:
        return OUTSIDE, ""
    prefix, _, etype = tag.partition("-")
    return prefix, etype


def decode_bio(tags: Sequence[str], strict: bool = False) -> list[Span]:
    """Maximal ``B-X I-X*`` runs as spans.

    An ``I-X`` that does not continue a span of type X opens a new span
    (the usual lenient convention); with ``strict=True`` it is dropped.
    """
    spans: list[Span] = []
    cur_type, cur_start = None, -1
    for i, tag in enumerate(tags):
        prefix, etype = _split_tag(tag)
        if prefix == "I" and cur_type == etype:
            continue
        if cur_type is not None:
            spans.append(Span(cur_type, cur_start, i - 1))
            cur_type = None
        if prefix == "B" or (prefix == "I" and not strict):
            cur_type, cur_start = etype, i
    if cur_type is not None:
        spans.append(Span(cur_type, cur_start, len(tags) - 1))
    return spans


def encode_bio(spans: Iterable[Span], length: int) -> list[str]:
    tags = [OUTSIDE] * length
    for s in sorted(spans, key=lambda s: s.start):
        if not 0 <= s.start <= s.end < length:
            raise ValueError(f"span {s} out of range for length {length}")
        if any(t != OUTSIDE for t in tags[s.start : s.end + 1]):
            raise ValueError(f"span {s} overlaps another span")
        suffix = f"-{s.entity_type}" if s.entity_type else ""
        tags[s.start] = "B" + suffix
        for i in range(s.start + 1, s.end + 1):
            tags[i] = "I" + suffix
    return tags


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


class Prf(NamedTuple):
    precision: float
    recall: float
    f1: float


def _prf(tp: int, fp: int, fn: int) -> Prf:
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return Prf(p, r, f)


def micro_counts(pred, gold, level: str = "entity", negative: str | None = None) -> tuple[int, int, int]:
    """(tp, fp, fn) for ``micro_f1``."""
    if len(pred) != len(gold):
        raise ValueError(f"length mismatch: {len(pred)} predictions vs {len(gold)} gold")
    if level == "sentence":
        neg = NO_RELATION if negative is None else negative
        tp = fp = fn = 0
        for p, g in zip(pred, gold):
            if p == g:
                tp += g != neg
            else:
                fp += p != neg
                fn += g != neg
        return tp, fp, fn
    for i, (p, g) in enumerate(zip(pred, gold)):
        if len(p) != len(g):
            raise ValueError(f"sequence {i}: length mismatch {len(p)} vs {len(g)}")
    neg = OUTSIDE if negative is None else negative
    if level == "token":
        tp = fp = fn = 0
        for ps, gs in zip(pred, gold):
            for p, g in zip(ps, gs):
                if p == g:
                    tp += g != neg
                else:
                    fp += p != neg
                    fn += g != neg
        return tp, fp, fn
    if level == "entity":
        P = {(i, s) for i, ps in enumerate(pred) for s in decode_bio(ps)}
        G = {(i, s) for i, gs in enumerate(gold) for s in decode_bio(gs)}
        tp = len(P & G)
        return tp, len(P) - tp, len(G) - tp
    raise ValueError(f"unknown level {level!r}")


def micro_f1(pred, gold, level: str = "entity", negative: str | None = None) -> Prf:
    """Micro-averaged precision/recall/F1.

    ``token`` and ``entity`` take lists of tag sequences; ``sentence`` takes
    flat label lists and leaves the negative (no-relation) class out of the
    positive set.
    """
    return _prf(*micro_counts(pred, gold, level, negative))


# ---------------------------------------------------------------------------
# synthetic corpora
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    vocab_size: int = 200
    entity_types: tuple[str, ...] = ("Chemical", "Disease")
    lexicon_size: int = 30
    relations: tuple[str, ...] = ("treats", "causes", "interacts")
    triggers_per_relation: int = 3
    min_len: int = 8
    max_len: int = 20
    entity_density: float = 0.1
    max_entity_len: int = 3
    entities_per_sentence: tuple[int, int] = (2, 3)
    relation_rate: float = 0.6
    ordered_pairs: bool = False
    noise: float = 0.0
    n_train: int = 2000
    n_dev: int = 200
    n_test: int = 400
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "entity_types", tuple(self.entity_types))
        object.__setattr__(self, "relations", tuple(self.relations))
        object.__setattr__(self, "entities_per_sentence", tuple(self.entities_per_sentence))
        if not 0 <= self.noise < 0.5:
            raise ValueError(f"noise must lie in [0, 0.5), got {self.noise}")
        if not 0 <= self.entity_density <= 1 or not 0 <= self.relation_rate <= 1:
            raise ValueError("entity_density and relation_rate must lie in [0, 1]")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError("need 1 <= min_len <= max_len")
        if self.max_entity_len < 1 or self.lexicon_size < 1 or self.triggers_per_relation < 1:
            raise ValueError("max_entity_len, lexicon_size and triggers_per_relation must be >= 1")
        if NO_RELATION in self.relations:
            raise ValueError(f"{NO_RELATION!r} is reserved for the negative relation class")
        if self.n_context < 1:
            raise ValueError(
                f"vocab_size {self.vocab_size} leaves no room for context words "
                f"({len(SPECIAL_TOKENS)} special, {self.n_entity_words} entity, "
                f"{self.n_trigger_words} trigger)"
            )

    @property
    def n_entity_words(self) -> int:
        return len(self.entity_types) * self.lexicon_size

    @property
    def n_trigger_words(self) -> int:
        return len(self.relations) * self.triggers_per_relation

    @property
    def n_context(self) -> int:
        return self.vocab_size - len(SPECIAL_TOKENS) - self.n_entity_words - self.n_trigger_words

    def lexicon(self, etype: str) -> list[str]:
        return [f"{etype.lower()}{i}" for i in range(self.lexicon_size)]

    def triggers(self, rel: str) -> list[str]:
        return [f"{rel}{i}" for i in range(self.triggers_per_relation)]

    def context_words(self) -> list[str]:
        return [f"w{i}" for i in range(self.n_context)]

    def vocab(self) -> Vocab:
        words: list[str] = []
        for t in self.entity_types:
            words += self.lexicon(t)
        for r in self.relations:
            words += self.triggers(r)
        words += self.context_words()
        return Vocab(words)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["entity_types"] = list(self.entity_types)
        d["relations"] = list(self.relations)
        d["entities_per_sentence"] = list(self.entities_per_sentence)
        return d


def _composition(rng: np.random.Generator, total: int, bins: int) -> np.ndarray:
    """Uniform random split of ``total`` items into ``bins`` non-negative parts."""
    if bins == 1:
        return np.array([total])
    cuts = np.sort(rng.choice(total + bins - 1, size=bins - 1, replace=False))
    bounds = np.concatenate([[-1], cuts, [total + bins - 1]])
    return np.diff(bounds) - 1


def _layout(rng, length: int, ent_lens: Sequence[int]) -> list[int]:
    """Random start positions for entities of the given lengths, at least
    one token apart."""
    k = len(ent_lens)
    free = length - sum(ent_lens) - (k - 1)
    parts = _composition(rng, free, k + 1)
    starts, pos = [], int(parts[0])
    for j, n in enumerate(ent_lens):
        starts.append(pos)
        pos += n + int(parts[j + 1]) + 1
    return starts


def _sentence_stream(spec: SyntheticSpec, make_one, rng) -> tuple[list, list, list]:
    total = spec.n_train + spec.n_dev + spec.n_test
    seen: set = set()
    out = []
    attempts = 0
    while len(out) < total:
        attempts += 1
        if attempts > 50 * total + 1000:
            raise InfeasibleSpecError("could not generate enough distinct sentences")
        item = make_one(rng)
        key = tuple(item[0])
        if key in seen:
            continue
        seen.add(key)
        out.append(item)
    a, b = spec.n_train, spec.n_train + spec.n_dev
    return out[:a], out[a:b], out[b:]


def gen_ner_corpus(spec: SyntheticSpec) -> tuple[list[Sentence], list[Sentence], list[Sentence]]:
    """(train, dev, test) lists of ``(tokens, tags)``.

    Each position independently starts an entity with probability
    ``entity_density`` (entities that no longer fit are dropped). Entities
    are 1..max_entity_len lexicon words of one type, separated by at least
    one context word. With probability ``noise`` an entity's tags are
    corrupted: relabelled to another type, or erased to ``O`` when there is
    only one type.
    """
    if spec.entity_density * (spec.max_entity_len + 1) > 1:
        raise InfeasibleSpecError(
            f"entity_density {spec.entity_density} is too high for entities of up to "
            f"{spec.max_entity_len} tokens plus a separator"
        )
    rng = np.random.default_rng(spec.seed)
    lex = {t: spec.lexicon(t) for t in spec.entity_types}
    ctx = spec.context_words()
    types = list(spec.entity_types)

    def make_one(rng):
        L = int(rng.integers(spec.min_len, spec.max_len + 1))
        k = int(rng.binomial(L, spec.entity_density))
        lens = [int(n) for n in rng.integers(1, spec.max_entity_len + 1, size=k)]
        while lens and sum(lens) + len(lens) - 1 > L:
            lens.pop()
        tokens = [ctx[i] for i in rng.integers(0, len(ctx), size=L)]
        spans = []
        for s, n in zip(_layout(rng, L, lens), lens):
            etype = types[int(rng.integers(len(types)))]
            words = lex[etype]
            for i in range(s, s + n):
                tokens[i] = words[int(rng.integers(len(words)))]
            label = etype
            if spec.noise and rng.random() < spec.noise:
                others = [t for t in types if t != etype]
                label = others[int(rng.integers(len(others)))] if others else None
            if label is not None:
                spans.append(Span(label, s, s + n - 1))
        return tokens, encode_bio(spans, L)

    return _sentence_stream(spec, make_one, rng)


def gen_re_sentences(spec: SyntheticSpec, rng: np.random.Generator):
    """One synthetic relation sentence: (tokens, entity spans, trigger relation per entity).

    ``triggers[j]`` is the relation whose trigger word sits immediately
    before entity j, or None.
    """
    lo, hi = spec.entities_per_sentence
    lex = {t: spec.lexicon(t) for t in spec.entity_types}
    trig = {r: spec.triggers(r) for r in spec.relations}
    ctx = spec.context_words()
    types = list(spec.entity_types)
    k = int(rng.integers(lo, hi + 1))
    L = int(rng.integers(spec.min_len, spec.max_len + 1))
    lens = [int(n) for n in rng.integers(1, spec.max_entity_len + 1, size=k)]
    L = max(L, sum(lens) + k - 1)
    tokens = [ctx[i] for i in rng.integers(0, len(ctx), size=L)]
    spans, rels = [], []
    for j, (s, n) in enumerate(zip(_layout(rng, L, lens), lens)):
        etype = types[int(rng.integers(len(types)))]
        for i in range(s, s + n):
            tokens[i] = lex[etype][int(rng.integers(spec.lexicon_size))]
        spans.append(Span(etype, s, s + n - 1))
        rel = None
        if j > 0 and rng.random() < spec.relation_rate:
            rel = spec.relations[int(rng.integers(len(spec.relations)))]
            tokens[s - 1] = trig[rel][int(rng.integers(spec.triggers_per_relation))]
        rels.append(rel)
    return tokens, spans, rels


def relation_instances(tokens, spans, rels, ordered: bool = False) -> list[RelationInstance]:
    """All entity pairs of a sentence. The label of a pair is the relation
    whose trigger immediately precedes the later of its two entities."""
    pairs = permutations(range(len(spans)), 2) if ordered else combinations(range(len(spans)), 2)
    out = []
    for i, j in pairs:
        later = max(i, j)
        label = rels[later] or NO_RELATION
        out.append(RelationInstance(tuple(tokens), spans[i], spans[j], label))
    return out


def gen_re_corpus(spec: SyntheticSpec) -> tuple[list[RelationInstance], list[RelationInstance], list[RelationInstance]]:
    """(train, dev, test) relation instances, split at sentence level.

    ``n_train`` etc. count sentences; each sentence yields one instance per
    entity pair. With probability ``noise`` an instance's label is replaced
    by a different label drawn uniformly.
    """
    lo, hi = spec.entities_per_sentence
    if not 2 <= lo <= hi:
        raise InfeasibleSpecError("entities_per_sentence must satisfy 2 <= lo <= hi")
    if not spec.relations:
        raise InfeasibleSpecError("relation corpus needs at least one relation")
    rng = np.random.default_rng(spec.seed)
    labels = [NO_RELATION, *spec.relations]

    def make_one(rng):
        tokens, spans, rels = gen_re_sentences(spec, rng)
        insts = relation_instances(tokens, spans, rels, spec.ordered_pairs)
        if spec.noise:
            noisy = []
            for inst in insts:
                if rng.random() < spec.noise:
                    others = [l for l in labels if l != inst.label]
                    inst = RelationInstance(inst.tokens, inst.subject, inst.object, others[int(rng.integers(len(others)))])
                noisy.append(inst)
            insts = noisy
        return tokens, insts

    splits = _sentence_stream(spec, make_one, rng)
    return tuple([inst for _, insts in split for inst in insts] for split in splits)


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------


def check_tag(tag: str, lineno: int | None = None) -> None:
    if not _TAG_RE.match(tag):
        where = f" on line {lineno}" if lineno is not None else ""
        raise DataFormatError(f"unknown tag scheme{where}: {tag!r} (expected O, B[-X] or I[-X])")


def load_conll_bio(path) -> list[Sentence]:
    sentences: list[Sentence] = []
    toks: list[str] = []
    tags: list[str] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.rstrip("\n").rstrip("\r")
            if not line.strip():
                if toks:
                    sentences.append((toks, tags))
                    toks, tags = [], []
                continue
            parts = line.split("\t")
            if len(parts) != 2 or not parts[0] or not parts[1]:
                raise DataFormatError(f"{path}:{lineno}: expected 'token<TAB>tag', got {line!r}")
            check_tag(parts[1], lineno)
            toks.append(parts[0])
            tags.append(parts[1])
    if toks:
        sentences.append((toks, tags))
    return sentences


def write_conll_bio(sentences: Iterable[Sentence], path) -> int:
    n = 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for toks, tags in sentences:
            for t, g in zip(toks, tags):
                fh.write(f"{t}\t{g}\n")
            fh.write("\n")
            n += 1
    return n


def write_relations(instances: Iterable[RelationInstance], path) -> int:
    n = 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in instances:
            s, o = r.subject, r.object
            fh.write(f"{' '.join(r.tokens)}\t{s.start}\t{s.end}\t{o.start}\t{o.end}\t{r.label}\n")
            n += 1
    return n


def load_relations(path) -> list[RelationInstance]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 6:
                raise DataFormatError(f"{path}:{lineno}: expected 6 tab-separated fields, got {len(parts)}")
            try:
                s0, s1, o0, o1 = (int(x) for x in parts[1:5])
                out.append(RelationInstance(tuple(parts[0].split(" ")), Span("", s0, s1), Span("", o0, o1), parts[5]))
            except ValueError as e:
                raise DataFormatError(f"{path}:{lineno}: {e}") from None
    return out


# ---------------------------------------------------------------------------
# model-ready encodings
# ---------------------------------------------------------------------------


def mark_entities(inst: RelationInstance) -> list[str]:
    """Tokens with marker tokens around subject and object."""
    out = []
    s, o = inst.subject, inst.object
    for i, tok in enumerate(inst.tokens):
        if i == s.start:
            out.append(SUBJ_START)
        if i == o.start:
            out.append(OBJ_START)
        out.append(tok)
        if i == s.end:
            out.append(SUBJ_END)
        if i == o.end:
            out.append(OBJ_END)
    return out


@dataclass
class Example:
    ids: np.ndarray
    labels: np.ndarray  # [L] tag ids (ner) or shape () relation id (re)


@dataclass
class TaskData:
    """Encoded splits plus the maps needed to read predictions back."""

    task: str
    vocab: Vocab
    labels: LabelSet
    train: list[Example] = field(default_factory=list)
    dev: list[Example] = field(default_factory=list)
    test: list[Example] = field(default_factory=list)


def encode_ner(sentences: Iterable[Sentence], vocab: Vocab, labels: LabelSet) -> list[Example]:
    return [Example(vocab.encode(t), labels.encode(g)) for t, g in sentences]


def encode_re(instances: Iterable[RelationInstance], vocab: Vocab, labels: LabelSet) -> list[Example]:
    return [Example(vocab.encode(mark_entities(r)), labels.encode([r.label])[0]) for r in instances]


def entity_types_of(sentences: Iterable[Sentence]) -> list[str]:
    found: dict[str, None] = {}
    for _, tags in sentences:
        for tag in tags:
            prefix, etype = _split_tag(tag)
            if prefix != OUTSIDE:
                found.setdefault(etype, None)
    return sorted(found)


def synthetic_task(task: str, spec: SyntheticSpec) -> TaskData:
    vocab = spec.vocab()
    if task == "ner":
        labels = LabelSet.bio(spec.entity_types)
        splits = gen_ner_corpus(spec)
        enc = [encode_ner(s, vocab, labels) for s in splits]
    elif task == "re":
        labels = LabelSet.relations(spec.relations)
        splits = gen_re_corpus(spec)
        enc = [encode_re(s, vocab, labels) for s in splits]
    else:
        raise ValueError(f"unknown task {task!r}")
    return TaskData(task, vocab, labels, *enc)


def file_task(task: str, train_path, dev_path=None, test_path=None) -> TaskData:
    """Build vocabulary and labels from the training file; unseen tokens map to ``<unk>``."""
    paths = [Path(p) if p else None for p in (train_path, dev_path, test_path)]
    if task == "ner":
        raw = [load_conll_bio(p) if p else [] for p in paths]
        vocab = Vocab.from_corpus(t for t, _ in raw[0])
        labels = LabelSet.bio(entity_types_of(raw[0] + raw[1] + raw[2]))
        enc = [encode_ner(s, vocab, labels) for s in raw]
    elif task == "re":
        raw = [load_relations(p) if p else [] for p in paths]
        vocab = Vocab.from_corpus(r.tokens for r in raw[0])
        rels = sorted({r.label for split in raw for r in split} - {NO_RELATION})
        labels = LabelSet.relations(rels)
        enc = [encode_re(s, vocab, labels) for s in raw]
    else:
        raise ValueError(f"unknown task {task!r}")
    return TaskData(task, vocab, labels, *enc)
