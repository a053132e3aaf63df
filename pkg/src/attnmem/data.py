"""Experiment datasets: memorization windows over books, and counterfactual fact pairs."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import InputError
from .metrics import continue_and_score
from .model import Transformer
from .tokenizer import BOS, EOS, Vocab, words_of

# Shared narrative vocabulary. Slots: C/C2 = characters, P = place, O = object.
# Sentences without slots are scenery shared by every book.
SENTENCE_TEMPLATES = (
    "{C} walked slowly to {P} with the {O}.",
    "At {P}, {C} found the {O} under an old wooden bench.",
    "{C} and {C2} argued about the {O} for most of the night.",
    "The {O} was hidden somewhere in {P}.",
    "{C} said nothing for a long time.",
    "It was cold, and the wind came down from the hills.",
    "{C} looked at {C2} and smiled.",
    "Nobody had seen the {O} since the winter.",
    "{C2} asked where the {O} had gone.",
    "They stayed in {P} until the rain stopped.",
    "The lamps were lit and the streets grew quiet.",
    "{C} remembered the first time they came to {P}.",
    "A dog barked somewhere behind the old houses.",
    "{C2} was tired, but {C} wanted to keep going.",
    "The market was busy with traders and children.",
    "{C} held the {O} close and listened.",
    "Far away a bell rang three times.",
    "{C2} laughed and told a story about {P}.",
    "In the morning they left {P} before dawn.",
    "The river was high after the storms.",
)

FACT_TEMPLATES = (
    "The capital of {S} is {T}.",
    "The river of {S} is {T}.",
    "The ruler of {S} is {T}.",
    "The festival of {S} is {T}.",
)

_ONSETS = ("b", "br", "d", "dr", "f", "g", "gr", "k", "kl", "l", "m", "n", "p", "qu", "r", "s", "sk",
           "t", "tr", "v", "w", "z", "th", "sh")
_VOWELS = ("a", "e", "i", "o", "u", "ai", "ea", "ou", "y")
_CODAS = ("", "", "n", "r", "l", "s", "th", "x", "m", "nd", "sk")

_FILLER = set(words_of(" ".join(SENTENCE_TEMPLATES + FACT_TEMPLATES)))


class NameSource:
    """Draws invented proper nouns that never repeat and never clash with filler words."""

    def __init__(self, rng: np.random.Generator, taken: Iterable[str] = ()):
        self.rng = rng
        self.taken = {t.lower() for t in taken} | _FILLER

    def draw(self, max_tries: int = 1000) -> str:
        for _ in range(max_tries):
            n_syl = int(self.rng.integers(2, 4))
            parts = []
            for _ in range(n_syl):
                parts.append(_ONSETS[self.rng.integers(len(_ONSETS))])
                parts.append(_VOWELS[self.rng.integers(len(_VOWELS))])
            parts.append(_CODAS[self.rng.integers(len(_CODAS))])
            name = "".join(parts).capitalize()
            if name.lower() not in self.taken and 4 <= len(name) <= 12:
                self.taken.add(name.lower())
                return name
        raise InputError("name pool exhausted")


@dataclass
class SyntheticBook:
    book_id: str
    text: str
    planted_keywords: list[str]
    counts: dict[str, int]
    seed: int

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / f"{self.book_id}.txt").write_text(self.text, encoding="utf-8")
        (d / f"{self.book_id}.keywords.txt").write_text("\n".join(self.planted_keywords) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, directory, book_id: str) -> SyntheticBook:
        d = Path(directory)
        text = (d / f"{book_id}.txt").read_text(encoding="utf-8")
        kw_path = d / f"{book_id}.keywords.txt"
        keywords = kw_path.read_text(encoding="utf-8").split() if kw_path.exists() else []
        counts = Counter(w for w in words_of(text) if w in set(keywords))
        return cls(book_id, text, keywords, dict(counts), seed=-1)


def _cycle(rng: np.random.Generator, items: Sequence[str]):
    while True:
        order = list(items)
        rng.shuffle(order)
        yield from order


def _write_book(rng: np.random.Generator, chars, places, objects, length: int, per_scene: int,
                min_occurrences: int) -> str:
    """Scenes of ``per_scene`` sentences, each scene fixing two characters, a place and an object.

    Writing stops at ``length`` words, or later once every name has
    appeared ``min_occurrences`` times.
    """
    pick_c, pick_p, pick_o = _cycle(rng, chars), _cycle(rng, places), _cycle(rng, objects)
    counts = Counter({n.lower(): 0 for n in [*chars, *places, *objects]})
    sentences: list[str] = []
    n_words = 0
    while n_words < length or min(counts.values()) < min_occurrences:
        if n_words > 50 * max(length, 100):
            raise InputError("could not place every keyword often enough")
        c = next(pick_c)
        c2 = next(pick_c)
        while c2 == c:
            c2 = next(pick_c)
        p, o = next(pick_p), next(pick_o)
        for _ in range(per_scene):
            tpl = SENTENCE_TEMPLATES[rng.integers(len(SENTENCE_TEMPLATES))]
            s = tpl.format(C=c, C2=c2, P=p, O=o)
            sentences.append(s)
            n_words += len(s.split())
            counts.update(w for w in words_of(s) if w in counts)
    return " ".join(sentences)


def synth_books(
    n_books: int,
    keywords_per_book: int = 20,
    length: int = 450,
    seed: int = 0,
    min_occurrences: int = 3,
    taken: Iterable[str] = (),
    sentences_per_scene: int = 5,
) -> list[SyntheticBook]:
    """Templated narratives whose distinguishing content is a planted set of invented names.

    ``length`` is the approximate word count. Keywords are split across
    characters, places and objects; each book draws from a disjoint pool.
    """
    if n_books < 1 or keywords_per_book < 6 or length < 1 or sentences_per_scene < 1:
        raise InputError("n_books, length and sentences_per_scene must be positive; keywords_per_book at least 6")
    rng = np.random.default_rng(seed)
    names = NameSource(rng, taken)
    books = []
    for b in range(n_books):
        n_c = keywords_per_book - 2 * (keywords_per_book // 3)
        n_p = n_o = keywords_per_book // 3
        chars = [names.draw() for _ in range(n_c)]
        places = [names.draw() for _ in range(n_p)]
        objects = [names.draw().lower() for _ in range(n_o)]
        text = _write_book(rng, chars, places, objects, length, sentences_per_scene, min_occurrences)
        planted = [k.lower() for k in chars + places + objects]
        counts = Counter(w for w in words_of(text) if w in set(planted))
        short = [k for k in planted if counts[k] < min_occurrences]
        if short:
            raise InputError(f"book too short: {short[0]!r} occurs {counts[short[0]]} < {min_occurrences} times")
        books.append(SyntheticBook(f"book{b:02d}", text, planted, dict(sorted(counts.items())), seed))
    return books


@dataclass
class WindowExample:
    input_ids: list[int]
    label_ids: list[int]
    book_id: str
    token_offset: int
    char_start: int
    char_end: int

    def to_json(self) -> dict:
        return asdict(self)


def sliding_windows(
    ids: Sequence[int], input_len: int, label_len: int, step: int, book_id: str = "", vocab: Vocab | None = None
) -> list[WindowExample]:
    """Fixed-size (input, label) windows at token offsets 0, step, 2*step, ...

    A trailing window that would run past the end is dropped. When ``vocab``
    is given, char offsets locate each window in the decoded source.
    """
    if step < 1 or input_len < 1 or label_len < 1:
        raise InputError("input_len, label_len and step must be positive")
    ids = list(ids)
    width = input_len + label_len
    if len(ids) < width:
        raise InputError(f"text of {len(ids)} tokens is shorter than one window ({width})")
    char_at = None
    if vocab is not None:
        char_at = [0]
        for t in ids:
            char_at.append(char_at[-1] + len(vocab.decode([t])))
    out = []
    for off in range(0, len(ids) - width + 1, step):
        c0 = char_at[off] if char_at else off
        c1 = char_at[off + width] if char_at else off + width
        out.append(WindowExample(ids[off : off + input_len], ids[off + input_len : off + width], book_id, off, c0, c1))
    return out


def verbatim_filter(model: Transformer, vocab: Vocab, windows: Sequence[WindowExample]) -> list[WindowExample]:
    """Keep exactly the windows whose greedy continuation has ROUGE-L recall 1."""
    return [w for w in windows if continue_and_score(model, vocab, w.input_ids, w.label_ids).recall == 1.0]


@dataclass(frozen=True)
class Fact:
    subject: str
    template: int
    target: str

    @property
    def prompt(self) -> str:
        return FACT_TEMPLATES[self.template].split("{T}")[0].format(S=self.subject).rstrip()

    @property
    def sentence(self) -> str:
        return FACT_TEMPLATES[self.template].format(S=self.subject, T=self.target)


@dataclass
class FactPair:
    factual_ids: list[int]
    counterfactual_ids: list[int]
    factual_target: str
    counterfactual_target: str
    factual_subject: str = ""
    counterfactual_subject: str = ""
    template: int = 0

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class FactGrid:
    facts: list[Fact]
    pairs: list[FactPair] = field(default_factory=list)

    @property
    def text(self) -> str:
        return "\n".join(f.sentence for f in self.facts) + "\n"

    def prompt_ids(self, vocab: Vocab, fact: Fact) -> list[int]:
        return [BOS] + vocab.encode(fact.prompt)

    def training_sequences(self, vocab: Vocab) -> list[list[int]]:
        return [[BOS] + vocab.encode(f.sentence) + [EOS] for f in self.facts]


def fact_grid(
    n_subjects: int,
    templates: Sequence[int] | None = None,
    seed: int = 0,
    vocab: Vocab | None = None,
    taken: Iterable[str] = (),
) -> FactGrid:
    """Every subject gets one invented target per template.

    Targets are unique across the grid. Pairs are built only once a
    vocabulary is available (see :func:`make_pairs`).
    """
    if n_subjects < 2:
        raise InputError("need at least two subjects")
    templates = list(range(len(FACT_TEMPLATES))) if templates is None else list(templates)
    rng = np.random.default_rng(seed + 7919)
    names = NameSource(rng, taken)
    subjects = [names.draw() for _ in range(n_subjects)]
    facts = [Fact(s, t, names.draw()) for t in templates for s in subjects]
    grid = FactGrid(facts)
    if vocab is not None:
        grid.pairs = make_pairs(grid, vocab)
    return grid


def make_pairs(grid: FactGrid, vocab: Vocab) -> list[FactPair]:
    """All ordered (factual, counterfactual) pairs sharing a template and token length."""
    pairs = []
    by_template: dict[int, list[Fact]] = {}
    for f in grid.facts:
        by_template.setdefault(f.template, []).append(f)
    for t in sorted(by_template):
        group = by_template[t]
        ids = {f.subject: grid.prompt_ids(vocab, f) for f in group}
        for a in group:
            for b in group:
                if a.subject == b.subject or len(ids[a.subject]) != len(ids[b.subject]):
                    continue
                if a.target.lower() == b.target.lower():
                    continue
                pairs.append(FactPair(ids[a.subject], ids[b.subject], a.target, b.target, a.subject, b.subject, t))
    if not pairs:
        raise InputError("no equal-length subject pairs; subject pool exhausted")
    return pairs


def write_jsonl(path, rows: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def read_jsonl(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
