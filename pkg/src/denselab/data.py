"""Data model and ingestion for desk-scale retrieval experiments.

Corpora follow the BEIR JSONL convention (``_id``, ``title``, ``text``),
relevance judgments are tab-separated ``query-id<TAB>doc-id<TAB>grade``
lines, training triples and scored sentence pairs are JSONL. All files are
UTF-8. Everything returned here is immutable after construction and safe to
share across threads.

The seeded generators (:func:`synth_retrieval_dataset` and friends) produce
topic-structured synthetic datasets small enough to train and evaluate in
seconds while still being non-trivial for an untrained encoder: each topic
owns a disjoint keyword vocabulary, but documents and queries bury those
keywords in a much larger pool of filler words shared across all topics, so
surface overlap between a query and its relevant documents stays close to
chance until a model learns to up-weight the topical features.
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Mapping, NamedTuple, Sequence


class ParseError(ValueError):
    """An input file violates its expected format."""


@dataclass(frozen=True)
class Document:
    id: str
    title: str
    text: str

    def __post_init__(self) -> None:
        if not self.id:
            raise ValueError("document id must be non-empty")


@dataclass(frozen=True)
class Query:
    id: str
    text: str

    def __post_init__(self) -> None:
        if not self.id:
            raise ValueError("query id must be non-empty")


@dataclass(frozen=True)
class Triplet:
    """An (anchor, positive, optional hard negative) training example.

    The same shape serves NLI-style triples, where the contradiction
    sentence fills the ``negative`` slot.
    """

    anchor: str
    positive: str
    negative: str | None = None

    def __post_init__(self) -> None:
        if not self.anchor:
            raise ValueError("triplet anchor must be non-empty")
        if not self.positive:
            raise ValueError("triplet positive must be non-empty")
        if self.negative is not None and not self.negative:
            raise ValueError("triplet negative, when present, must be non-empty")


@dataclass(frozen=True)
class ScoredPair:
    """Sentence pair with a gold similarity already rescaled to [0, 1]."""

    sentence_a: str
    sentence_b: str
    gold_score: float

    def __post_init__(self) -> None:
        if not math.isfinite(self.gold_score):
            raise ValueError("gold score must be finite")


class Corpus:
    """Ordered document collection with an id -> position index."""

    __slots__ = ("_docs", "_pos")

    def __init__(self, documents: Iterable[Document]):
        docs = tuple(documents)
        pos: dict[str, int] = {}
        for i, doc in enumerate(docs):
            if doc.id in pos:
                raise ValueError(f"duplicate id {doc.id}")
            pos[doc.id] = i
        self._docs = docs
        self._pos = pos

    def __len__(self) -> int:
        return len(self._docs)

    def __iter__(self) -> Iterator[Document]:
        return iter(self._docs)

    def __contains__(self, doc_id: str) -> bool:
        return doc_id in self._pos

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Corpus):
            return NotImplemented
        return self._docs == other._docs

    def get(self, doc_id: str) -> Document:
        return self._docs[self._pos[doc_id]]

    def position(self, doc_id: str) -> int:
        return self._pos[doc_id]

    @property
    def ids(self) -> tuple[str, ...]:
        return tuple(d.id for d in self._docs)

    def to_jsonl(self) -> str:
        return "".join(
            json.dumps({"_id": d.id, "title": d.title, "text": d.text}, ensure_ascii=False) + "\n"
            for d in self._docs
        )


@dataclass(frozen=True)
class TripletSet:
    triplets: tuple[Triplet, ...]

    def __len__(self) -> int:
        return len(self.triplets)

    def __iter__(self) -> Iterator[Triplet]:
        return iter(self.triplets)

    def __getitem__(self, i: int) -> Triplet:
        return self.triplets[i]

    def to_jsonl(self) -> str:
        lines = []
        for t in self.triplets:
            row: dict[str, str] = {"query": t.anchor, "positive": t.positive}
            if t.negative is not None:
                row["negative"] = t.negative
            lines.append(json.dumps(row, ensure_ascii=False) + "\n")
        return "".join(lines)


@dataclass(frozen=True)
class ScoredPairSet:
    """STS-style pair collection; ``score_divisor`` records the linear rescale
    applied at ingestion (raw scores were divided by it)."""

    pairs: tuple[ScoredPair, ...]
    score_divisor: float = 5.0

    def __len__(self) -> int:
        return len(self.pairs)

    def __iter__(self) -> Iterator[ScoredPair]:
        return iter(self.pairs)

    def __getitem__(self, i: int) -> ScoredPair:
        return self.pairs[i]

    def to_jsonl(self) -> str:
        return "".join(
            json.dumps(
                {
                    "sentence1": p.sentence_a,
                    "sentence2": p.sentence_b,
                    "score": p.gold_score * self.score_divisor,
                },
                ensure_ascii=False,
            )
            + "\n"
            for p in self.pairs
        )


class Qrels:
    """Relevance judgments: query id -> doc id -> non-negative integer grade."""

    __slots__ = ("_judgments",)

    def __init__(self, judgments: Mapping[str, Mapping[str, int]]):
        clean: dict[str, dict[str, int]] = {}
        for qid, docs in judgments.items():
            row: dict[str, int] = {}
            for did, grade in docs.items():
                if not isinstance(grade, int) or isinstance(grade, bool):
                    raise ValueError(f"grade for ({qid}, {did}) must be an integer")
                if grade < 0:
                    raise ValueError(f"grade for ({qid}, {did}) must be >= 0")
                row[did] = grade
            clean[qid] = row
        self._judgments = clean

    def __len__(self) -> int:
        return len(self._judgments)

    def __contains__(self, qid: str) -> bool:
        return qid in self._judgments

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Qrels):
            return NotImplemented
        return self._judgments == other._judgments

    def query_ids(self) -> tuple[str, ...]:
        return tuple(self._judgments)

    def grades(self, qid: str) -> Mapping[str, int]:
        return dict(self._judgments[qid])

    def relevant(self, qid: str) -> dict[str, int]:
        """Docs with grade > 0 for this query."""
        return {d: g for d, g in self._judgments[qid].items() if g > 0}

    def all_zero_queries(self) -> tuple[str, ...]:
        """Queries whose judgments exist but carry no positive grade."""
        return tuple(q for q, docs in self._judgments.items() if docs and not any(g > 0 for g in docs.values()))

    def to_tsv(self) -> str:
        lines = ["query-id\tdoc-id\tgrade"]
        for qid, docs in self._judgments.items():
            for did, grade in docs.items():
                lines.append(f"{qid}\t{did}\t{grade}")
        return "\n".join(lines) + "\n"


def parse_corpus(path: str | Path, format: str = "jsonl") -> Corpus:
    """Read a BEIR-style corpus: one JSON object per line with ``_id``,
    ``title`` and ``text``. Order is preserved; duplicate ids are rejected."""
    if format != "jsonl":
        raise ValueError(f"unsupported corpus format {format!r}")
    docs: list[Document] = []
    seen: dict[str, int] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as err:
                raise ParseError(f"line {lineno}: invalid JSON: {err.msg}") from err
            for key in ("_id", "title", "text"):
                if key not in obj:
                    raise ParseError(f"line {lineno}: missing field {key}")
            doc_id = str(obj["_id"])
            if doc_id in seen:
                raise ParseError(f"duplicate id {doc_id} at line {lineno}")
            seen[doc_id] = lineno
            docs.append(
                Document(
                    id=doc_id,
                    title=str(obj["title"]).rstrip("\n"),
                    text=str(obj["text"]).rstrip("\n"),
                )
            )
    return Corpus(docs)


def parse_queries(path: str | Path) -> tuple[Query, ...]:
    """Read a BEIR-style query file: one JSON object per line with ``_id`` and ``text``."""
    queries: list[Query] = []
    seen: set[str] = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as err:
                raise ParseError(f"line {lineno}: invalid JSON: {err.msg}") from err
            for key in ("_id", "text"):
                if key not in obj:
                    raise ParseError(f"line {lineno}: missing field {key}")
            qid = str(obj["_id"])
            if qid in seen:
                raise ParseError(f"duplicate id {qid} at line {lineno}")
            seen.add(qid)
            queries.append(Query(id=qid, text=str(obj["text"]).rstrip("\n")))
    return tuple(queries)


def parse_qrels(path: str | Path) -> Qrels:
    """Read tab-separated judgments. An optional single header line starting
    with "query" is skipped; repeated (query, doc) pairs take the last grade."""
    judgments: dict[str, dict[str, int]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\r\n")
            if lineno == 1 and line.startswith("query"):
                continue
            fields = line.split("\t")
            if len(fields) < 3:
                raise ParseError(f"line {lineno}: expected 3 tab-separated fields, got {len(fields)}")
            qid, did, grade_text = fields[0], fields[1], fields[2]
            try:
                grade = int(grade_text)
            except ValueError as err:
                raise ParseError(f"line {lineno}: non-integer grade {grade_text!r}") from err
            if grade < 0:
                raise ParseError(f"line {lineno}: negative grade {grade}")
            judgments.setdefault(qid, {})[did] = grade
    return Qrels(judgments)


def parse_triplets(path: str | Path) -> TripletSet:
    """Read JSONL triples with keys ``query``, ``positive`` and optional ``negative``."""
    triplets: list[Triplet] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as err:
                raise ParseError(f"line {lineno}: invalid JSON: {err.msg}") from err
            for key in ("query", "positive"):
                if key not in obj:
                    raise ParseError(f"line {lineno}: missing field {key}")
            negative = obj.get("negative")
            try:
                triplets.append(
                    Triplet(
                        anchor=str(obj["query"]),
                        positive=str(obj["positive"]),
                        negative=None if negative is None else str(negative),
                    )
                )
            except ValueError as err:
                raise ParseError(f"line {lineno}: {err}") from err
    return TripletSet(tuple(triplets))


def parse_sts_pairs(path: str | Path, score_divisor: float = 5.0) -> ScoredPairSet:
    """Read JSONL pairs with keys ``sentence1``, ``sentence2``, ``score``.

    Raw scores must lie in [0, score_divisor]; they are divided by
    ``score_divisor`` at ingestion (the default matches the usual 0..5
    annotation scale)."""
    pairs: list[ScoredPair] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as err:
                raise ParseError(f"line {lineno}: invalid JSON: {err.msg}") from err
            for key in ("sentence1", "sentence2", "score"):
                if key not in obj:
                    raise ParseError(f"line {lineno}: missing field {key}")
            score = float(obj["score"])
            if not math.isfinite(score):
                raise ParseError(f"line {lineno}: non-finite score")
            if not 0.0 <= score <= score_divisor:
                raise ParseError(f"line {lineno}: score {score} out of range [0, {score_divisor}]")
            pairs.append(
                ScoredPair(
                    sentence_a=str(obj["sentence1"]),
                    sentence_b=str(obj["sentence2"]),
                    gold_score=score / score_divisor,
                )
            )
    return ScoredPairSet(tuple(pairs), score_divisor=score_divisor)


def write_text(path: str | Path, content: str) -> None:
    Path(path).write_text(content, encoding="utf-8")


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------

_CONSONANTS = "bcdfgklmnprstvyz"
_VOWELS = "aeıioöuü"

WORDS_PER_TOPIC = 12
FILLER_WORDS = 40

# per-document / per-query composition (counts of topic keywords vs filler)
_DOC_TOPIC_EXTRA = 3
_DOC_FILLER = 24
_QUERY_TOPIC_EXTRA = 2
_QUERY_FILLER = 3
_SENT_FILLER = 6


class RetrievalDataset(NamedTuple):
    corpus: Corpus
    queries: tuple[Query, ...]
    qrels: Qrels
    triplets: TripletSet


def _word(rng: random.Random) -> str:
    return "".join(rng.choice(_CONSONANTS) + rng.choice(_VOWELS) for _ in range(rng.randint(2, 4)))


def _fresh_words(rng: random.Random, count: int, seen: set[str]) -> list[str]:
    words: list[str] = []
    while len(words) < count:
        w = _word(rng)
        if w not in seen:
            seen.add(w)
            words.append(w)
    return words


class _World(NamedTuple):
    topics: list[list[str]]  # topics[t][0] is the anchor keyword of topic t
    filler: list[str]


def _build_world(rng: random.Random, n_topics: int) -> _World:
    seen: set[str] = set()
    filler = _fresh_words(rng, FILLER_WORDS, seen)
    topics = [_fresh_words(rng, WORDS_PER_TOPIC, seen) for _ in range(n_topics)]
    return _World(topics, filler)


def synth_topic_vocab(seed: int, n_topics: int) -> list[list[str]]:
    """The per-topic keyword vocabularies used by all generators at this seed.

    Kept in lockstep with the generators: vocabularies are drawn first from
    the seeded stream, so they match what e.g. :func:`synth_retrieval_dataset`
    used internally."""
    return _build_world(random.Random(seed), n_topics).topics


def _doc(rng: random.Random, world: _World, topic: int, doc_id: str) -> Document:
    vocab = world.topics[topic]
    title = " ".join(rng.sample(vocab, 2))
    words = [vocab[0]] + rng.sample(vocab[1:], _DOC_TOPIC_EXTRA)
    words += [rng.choice(world.filler) for _ in range(_DOC_FILLER)]
    rng.shuffle(words)
    return Document(id=doc_id, title=title, text=" ".join(words))


def _query_text(rng: random.Random, world: _World, topic: int) -> str:
    vocab = world.topics[topic]
    words = [vocab[0]] + rng.sample(vocab[1:], _QUERY_TOPIC_EXTRA)
    words += [rng.choice(world.filler) for _ in range(_QUERY_FILLER)]
    rng.shuffle(words)
    return " ".join(words)


def _sentence(rng: random.Random, world: _World, topic: int) -> str:
    vocab = world.topics[topic]
    words = [vocab[0]] + rng.sample(vocab[1:], rng.randint(2, 4))
    words += [rng.choice(world.filler) for _ in range(_SENT_FILLER)]
    rng.shuffle(words)
    return " ".join(words)


def _doc_surface(doc: Document) -> str:
    return doc.title + " " + doc.text


def synth_retrieval_dataset(
    seed: int,
    n_topics: int,
    docs_per_topic: int,
    queries_per_topic: int,
    triplets_per_query: int = 4,
) -> RetrievalDataset:
    """Deterministic topic-structured corpus, queries, judgments and triples.

    Every query shares its topic's anchor keyword with every document of the
    topic; documents of other topics share no topic-vocabulary word with it.
    Each triplet pairs a query with an in-topic positive and, when more than
    one topic exists, an out-of-topic negative.
    """
    if n_topics < 1 or docs_per_topic < 1 or queries_per_topic < 1:
        raise ValueError("all counts must be >= 1")
    if triplets_per_query < 1:
        raise ValueError("triplets_per_query must be >= 1")

    rng = random.Random(seed)
    world = _build_world(rng, n_topics)

    docs_by_topic: list[list[Document]] = []
    for t in range(n_topics):
        docs_by_topic.append(
            [_doc(rng, world, t, f"t{t:02d}-d{i:03d}") for i in range(docs_per_topic)]
        )
    corpus = Corpus(d for topic_docs in docs_by_topic for d in topic_docs)

    queries: list[Query] = []
    judgments: dict[str, dict[str, int]] = {}
    for t in range(n_topics):
        for j in range(queries_per_topic):
            q = Query(id=f"t{t:02d}-q{j:03d}", text=_query_text(rng, world, t))
            queries.append(q)
            judgments[q.id] = {d.id: 1 for d in docs_by_topic[t]}

    triplets: list[Triplet] = []
    for t in range(n_topics):
        for j in range(queries_per_topic):
            q = queries[t * queries_per_topic + j]
            m = min(triplets_per_query, docs_per_topic)
            positives = rng.sample(docs_by_topic[t], m)
            for pos in positives:
                negative = None
                if n_topics > 1:
                    other = rng.randrange(n_topics - 1)
                    if other >= t:
                        other += 1
                    negative = _doc_surface(rng.choice(docs_by_topic[other]))
                triplets.append(
                    Triplet(anchor=q.text, positive=_doc_surface(pos), negative=negative)
                )

    return RetrievalDataset(corpus, tuple(queries), Qrels(judgments), TripletSet(tuple(triplets)))


def _topic_keywords(text: str, all_topic_words: set[str]) -> set[str]:
    return set(text.split()) & all_topic_words


def synth_sts_pairs(seed: int, n_topics: int, pairs_per_topic: int) -> ScoredPairSet:
    """Scored sentence pairs over the same topic worlds.

    Gold similarity is the Jaccard overlap of the two sentences' topic
    keywords (filler ignored), so same-topic pairs score > 0 and cross-topic
    pairs score exactly 0.
    """
    if n_topics < 1 or pairs_per_topic < 1:
        raise ValueError("all counts must be >= 1")
    rng = random.Random(seed)
    world = _build_world(rng, n_topics)
    all_topic_words = {w for vocab in world.topics for w in vocab}

    def gold(a: str, b: str) -> float:
        ka = _topic_keywords(a, all_topic_words)
        kb = _topic_keywords(b, all_topic_words)
        union = ka | kb
        return len(ka & kb) / len(union) if union else 0.0

    pairs: list[ScoredPair] = []
    for t in range(n_topics):
        for _ in range(pairs_per_topic):
            a = _sentence(rng, world, t)
            b = _sentence(rng, world, t)
            pairs.append(ScoredPair(a, b, gold(a, b)))
        if n_topics > 1:
            for _ in range(pairs_per_topic):
                other = rng.randrange(n_topics - 1)
                if other >= t:
                    other += 1
                a = _sentence(rng, world, t)
                b = _sentence(rng, world, other)
                pairs.append(ScoredPair(a, b, gold(a, b)))
    return ScoredPairSet(tuple(pairs))


def synth_nli_triplets(seed: int, n_topics: int, examples_per_topic: int) -> TripletSet:
    """Sentence-level triples: anchor and entailment-like positive from one
    topic, contradiction-like negative from another."""
    if n_topics < 1 or examples_per_topic < 1:
        raise ValueError("all counts must be >= 1")
    rng = random.Random(seed)
    world = _build_world(rng, n_topics)
    triplets: list[Triplet] = []
    for t in range(n_topics):
        for _ in range(examples_per_topic):
            anchor = _sentence(rng, world, t)
            positive = _sentence(rng, world, t)
            negative = None
            if n_topics > 1:
                other = rng.randrange(n_topics - 1)
                if other >= t:
                    other += 1
                negative = _sentence(rng, world, other)
            triplets.append(Triplet(anchor=anchor, positive=positive, negative=negative))
    return TripletSet(tuple(triplets))
