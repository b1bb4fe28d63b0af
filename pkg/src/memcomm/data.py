"""bAbI ingestion: parsing, tokenization, vocabulary, splitting.

Also ships a generator for single-supporting-fact stories written in the
release text format, for machines without a copy of the dataset.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, TextIO

import numpy as np

PAD, UNK = 0, 1
_PUNCT = re.compile(r"([.?!,])$")


class FormatError(ValueError):
    def __init__(self, lineno: int, msg: str):
        super().__init__(f"line {lineno}: {msg}")
        self.lineno = lineno


@dataclass
class Episode:
    context: list[list[str]]
    question: list[str]
    answer: str
    supporting: list[int] = field(default_factory=list)


def tokenize(sentence: str) -> list[str]:
    tokens = []
    for word in sentence.lower().split():
        m = _PUNCT.search(word)
        if m and len(word) > 1:
            tokens.extend([word[:-1], word[-1]])
        else:
            tokens.append(word)
    return tokens


def parse_babi(lines: Iterable[str] | TextIO) -> list[Episode]:
    """One Episode per question line; its context is every earlier statement of the story."""
    episodes: list[Episode] = []
    story: list[list[str]] = []
    line_to_ctx: dict[int, int] = {}
    prev = 0
    for lineno, raw in enumerate(lines, start=1):
        raw = raw.rstrip("\r\n")
        if not raw.strip():
            continue
        head, _, rest = raw.lstrip().partition(" ")
        if not head.isdigit() or not rest:
            raise FormatError(lineno, f"expected '<n> <text>', got {raw!r}")
        n = int(head)
        if n == 1 or n <= prev:
            story, line_to_ctx = [], {}
        prev = n
        if "\t" in rest:
            fields = rest.split("\t")
            if len(fields) < 2 or not fields[1].strip():
                raise FormatError(lineno, "question line needs an answer field")
            question, answer = fields[0].strip(), fields[1].strip()
            ids = fields[2].split() if len(fields) > 2 else []
            try:
                supporting = [line_to_ctx[int(i)] for i in ids]
            except (ValueError, KeyError):
                raise FormatError(lineno, f"bad supporting fact ids {ids}") from None
            episodes.append(Episode([list(s) for s in story], tokenize(question),
                                    answer.lower(), supporting))
        else:
            line_to_ctx[n] = len(story)
            story.append(tokenize(rest))
    return episodes


def load_babi(path: str | Path) -> list[Episode]:
    with open(path, encoding="utf-8") as fh:
        return parse_babi(fh)


@dataclass
class Vocabulary:
    tokens: dict[str, int]
    answers: dict[str, int]

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def n_answers(self) -> int:
        return len(self.answers)

    def encode(self, tokens: list[str]) -> list[int]:
        return [self.tokens.get(t, UNK) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        inverse = {i: t for t, i in self.tokens.items()}
        return [inverse[i] for i in ids if i != PAD]

    def answer_id(self, answer: str) -> int:
        return self.answers.get(answer, -1)


def build_vocab(train: list[Episode]) -> Vocabulary:
    if not train:
        raise ValueError("vocabulary needs a non-empty training split")
    tokens = {"<pad>": PAD, "<unk>": UNK}
    answers: dict[str, int] = {}
    for ep in train:
        for sent in ep.context + [ep.question]:
            for t in sent:
                tokens.setdefault(t, len(tokens))
        answers.setdefault(ep.answer, len(answers))
    return Vocabulary(tokens, answers)


def split(episodes: list, seed: int, fractions=(0.8, 0.1, 0.1)):
    """Seeded disjoint train/validation/test partition (8k/1k/1k on a 10k set)."""
    n = len(episodes)
    n_val = int(round(n * fractions[1]))
    n_test = int(round(n * fractions[2]))
    n_train = n - n_val - n_test
    if min(n_train, n_val, n_test) < 1:
        raise ValueError(f"too few episodes to split: {n}")
    order = np.random.default_rng(seed).permutation(n)
    pick = lambda idx: [episodes[i] for i in idx]  # noqa: E731
    return pick(order[:n_train]), pick(order[n_train:n_train + n_val]), pick(order[n_train + n_val:])


@dataclass
class EncodedSet:
    """Episodes as integer arrays over a table of distinct sentences.

    ``context`` is ``[E, T]`` indices into ``sentences`` (-1 = empty slot),
    right-aligned so the newest sentence sits in the last column, which is
    exactly how a length-T queue looks after pushing the sentences in order.
    ``n_total`` counts all context sentences, including any the queue dropped.
    """

    sentences: np.ndarray
    context: np.ndarray
    question: np.ndarray
    answer: np.ndarray
    n_context: np.ndarray
    n_total: np.ndarray

    def __len__(self) -> int:
        return len(self.answer)

    def subset(self, idx) -> "EncodedSet":
        return EncodedSet(self.sentences, self.context[idx], self.question[idx],
                          self.answer[idx], self.n_context[idx], self.n_total[idx])


def encode_episodes(episodes: list[Episode], vocab: Vocabulary, memory: int,
                    max_len: int | None = None) -> EncodedSet:
    table: dict[tuple, int] = {}

    def sid(tokens):
        key = tuple(vocab.encode(tokens))
        return table.setdefault(key, len(table))

    ctx = np.full((len(episodes), memory), -1, dtype=np.int64)
    q = np.zeros(len(episodes), dtype=np.int64)
    a = np.zeros(len(episodes), dtype=np.int64)
    n_ctx = np.zeros(len(episodes), dtype=np.int64)
    n_total = np.array([len(ep.context) for ep in episodes], dtype=np.int64)
    for e, ep in enumerate(episodes):
        kept = ep.context[-memory:]
        for j, sent in enumerate(kept):
            ctx[e, memory - len(kept) + j] = sid(sent)
        n_ctx[e] = len(kept)
        q[e] = sid(ep.question)
        a[e] = vocab.answer_id(ep.answer)
    width = max_len or max(len(k) for k in table)
    sentences = np.zeros((len(table), width), dtype=np.int64)
    for key, i in table.items():
        sentences[i, :len(key)] = key[:width]
    return EncodedSet(sentences, ctx, q, a, n_ctx, n_total)


ACTORS = ("Mary", "John", "Sandra", "Daniel")
PLACES = ("bathroom", "hallway", "garden", "office", "bedroom", "kitchen")
MOVES = ("moved to", "went to", "journeyed to", "travelled to", "went back to")


def generate_task1(n_stories: int, seed: int, blocks: int = 5) -> list[str]:
    """Single-supporting-fact stories in release format (two facts then one question, repeated)."""
    rng = np.random.default_rng(seed)
    lines = []
    for _ in range(n_stories):
        where: dict[str, tuple[str, int]] = {}
        n = 0
        for _ in range(blocks):
            for _ in range(2):
                n += 1
                actor = ACTORS[rng.integers(len(ACTORS))]
                place = PLACES[rng.integers(len(PLACES))]
                verb = MOVES[rng.integers(len(MOVES))]
                lines.append(f"{n} {actor} {verb} the {place}.")
                where[actor] = (place, n)
            n += 1
            seen = sorted(where)
            actor = seen[rng.integers(len(seen))]
            place, line = where[actor]
            lines.append(f"{n} Where is {actor}? \t{place}\t{line}")
    return lines


def write_task1(path: str | Path, n_stories: int, seed: int) -> Path:
    path = Path(path)
    path.write_text("\n".join(generate_task1(n_stories, seed)) + "\n", encoding="utf-8")
    return path
