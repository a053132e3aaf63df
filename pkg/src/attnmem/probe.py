"""Memory coefficients, MRR neuron ranking, and keyword extraction from key projections."""

from __future__ import annotations

import csv
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Literal, Mapping, Sequence

import numpy as np

from .errors import ContractError, InputError
from .model import NeuronId, Transformer
from .tokenizer import Vocab, WordSpan

log = logging.getLogger(__name__)

Source = Literal["contextual", "static"]


def key_activations(model: Transformer, ids: Sequence[int], source: Source = "contextual") -> np.ndarray:
    """Key projections [layer, kv_head, T, d_head] for ``ids``.

    ``contextual`` is what each layer actually projects (its normed residual
    input); ``static`` projects the raw token embeddings through every
    layer's key weights.
    """
    cfg = model.cfg
    if source == "contextual":
        return model.forward(ids).capture.k_native.astype(np.float64)
    if source == "static":
        emb = model.params["tok_emb"].data[np.asarray(ids, dtype=np.int64)].astype(np.float64)
        out = []
        for layer in range(cfg.n_layers):
            k = emb @ model.params[f"layers.{layer}.wk"].data.astype(np.float64)
            out.append(k.reshape(len(ids), cfg.n_kv_heads, cfg.d_head).transpose(1, 0, 2))
        return np.stack(out)
    raise ContractError(f"unknown activation source {source!r}")


def _analysis_copy(model: Transformer) -> Transformer:
    # activations are summed over many occurrences; float64 keeps that sum exact to ~1e-12
    if model.params["tok_emb"].data.dtype == np.float64:
        return model
    return model.copy(np.float64)


def window_words(vocab: Vocab, ids: Sequence[int]) -> list[WordSpan]:
    return vocab.word_spans(vocab.decode(ids), ids)


@dataclass
class CoefTable:
    """Mean key activation per neuron over anchored-term occurrences in one dataset."""

    dataset: str
    mean: np.ndarray  # [L, Hkv, dh], signed
    count: int
    missing_terms: list[str] = field(default_factory=list)

    @property
    def stat(self) -> np.ndarray:
        return np.abs(self.mean)

    def ranked(self) -> list[NeuronId]:
        """Neurons by |mean| descending; ties by (layer, head, dim)."""
        flat = self.stat.ravel()
        order = np.lexsort((np.arange(flat.size), -flat))
        return [NeuronId(*map(int, np.unravel_index(i, self.mean.shape))) for i in order]

    def head_stat(self) -> np.ndarray:
        """Per (layer, kv_head): mean |coefficient| over that head's dimensions."""
        return self.stat.mean(axis=-1)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["layer", "head", "dim", "abs_mean", "signed_mean", "count", "dataset"])
            for n in self.ranked():
                m = float(self.mean[n])
                w.writerow([n.layer, n.head, n.dim, f"{abs(m):.8g}", f"{m:.8g}", self.count, self.dataset])


def memory_coefficient(
    model: Transformer,
    vocab: Vocab,
    inputs: Iterable[Sequence[int]],
    anchored_terms: Iterable[str],
    source: Source = "contextual",
    dataset: str = "",
) -> CoefTable:
    """Average each neuron's key activation over every anchored-term occurrence.

    An occurrence's vector is the sum of its sub-word tokens' key
    projections. Terms that never occur are reported in ``missing_terms``.
    """
    terms = {t.lower() for t in anchored_terms}
    if not terms:
        raise InputError("anchored term list is empty")
    model = _analysis_copy(model)
    cfg = model.cfg
    total = np.zeros((cfg.n_layers, cfg.n_kv_heads, cfg.d_head), dtype=np.float64)
    count = 0
    seen: set[str] = set()
    n_inputs = 0
    for ids in inputs:
        n_inputs += 1
        spans = [s for s in window_words(vocab, ids) if s.word in terms]
        if not spans:
            continue
        acts = key_activations(model, ids, source)
        for s in spans:
            a, b = s.token_range
            total += acts[:, :, a:b, :].sum(axis=2, dtype=np.float64)
            count += 1
            seen.add(s.word)
    if n_inputs == 0:
        raise InputError("dataset is empty")
    missing = sorted(terms - seen)
    if missing:
        log.warning("%d anchored terms never occur in %s: %s", len(missing), dataset or "dataset", ", ".join(missing[:5]))
    if count == 0:
        raise InputError("no anchored term occurs in the dataset")
    return CoefTable(dataset, total / count, count, missing)


def _mrr(rankings: Sequence[Sequence]) -> list[tuple]:
    scores: dict = defaultdict(float)
    for ranking in rankings:
        for r, unit in enumerate(ranking, start=1):
            scores[unit] += 1.0 / r
    n = len(rankings)
    return sorted(((u, s / n) for u, s in scores.items()), key=lambda us: (-us[1], us[0]))


def rank_neurons_mrr(tables: Sequence[CoefTable]) -> list[tuple[NeuronId, float]]:
    """Mean over datasets of 1/rank, highest first."""
    if not tables:
        raise InputError("need at least one coefficient table")
    return _mrr([t.ranked() for t in tables])


def rank_heads_mrr(tables: Sequence[CoefTable]) -> list[tuple[tuple[int, int], float]]:
    """The same 1/rank aggregation at (layer, kv_head) granularity."""
    if not tables:
        raise InputError("need at least one coefficient table")
    rankings = []
    for t in tables:
        hs = t.head_stat()
        units = [(int(layer), int(head)) for layer, head in np.ndindex(hs.shape)]
        rankings.append(sorted(units, key=lambda u: (-hs[u], u)))
    return _mrr(rankings)


def select_heads(
    ranked: Sequence[tuple[tuple[int, int], float]], budget: int, exclude_first: bool = True
) -> list[tuple[int, int]]:
    """Top ``budget`` heads by MRR.

    With ``exclude_first``, a top-ranked head that is head 0 of its layer is
    dropped in favour of the next-ranked one.
    """
    if budget < 1:
        raise ContractError("head budget must be at least 1")
    heads = [h for h, _ in ranked]
    if exclude_first and heads and heads[0][1] == 0:
        heads = heads[1:]
    return heads[:budget]


def neuron_signs(tables: Sequence[CoefTable], neurons: Iterable[NeuronId]) -> dict[NeuronId, float]:
    """Sign of each neuron's mean coefficient, averaged over datasets."""
    mean = np.mean([t.mean for t in tables], axis=0)
    return {n: (1.0 if mean[n] >= 0 else -1.0) for n in neurons}


@dataclass
class KeywordScoreTable:
    dataset: str
    scores: dict[str, float]
    inputs_with_word: dict[str, int]
    occurrences: dict[str, int]

    def ranked(self) -> list[tuple[str, float]]:
        """Words by score descending, ties lexicographic."""
        return sorted(self.scores.items(), key=lambda ws: (-ws[1], ws[0]))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["word", "score", "inputs", "occurrences", "dataset"])
            for word, s in self.ranked():
                w.writerow([word, f"{s:.8g}", self.inputs_with_word[word], self.occurrences[word], self.dataset])


def keyword_scores(
    model: Transformer,
    vocab: Vocab,
    inputs: Iterable[Sequence[int]],
    scope: Sequence[NeuronId],
    source: Source = "contextual",
    signs: Mapping[NeuronId, float] | None = None,
    dataset: str = "",
) -> KeywordScoreTable:
    """Aggregate word scores from the scoped key neurons.

    One occurrence scores the sum, over its sub-word tokens and the scoped
    neurons, of the key activation (times the neuron's sign when ``signs``
    is given). Per input a word contributes the mean over its occurrences;
    the dataset score sums those contributions over inputs.
    """
    if not scope:
        raise ContractError("keyword scope is empty")
    model = _analysis_copy(model)
    scope = list(scope)
    layers = np.array([n.layer for n in scope])
    heads = np.array([n.head for n in scope])
    dims = np.array([n.dim for n in scope])
    weights = np.array([1.0 if signs is None else signs[n] for n in scope])
    scores: dict[str, float] = defaultdict(float)
    inputs_with: dict[str, int] = defaultdict(int)
    occ: dict[str, int] = defaultdict(int)
    for ids in inputs:
        spans = window_words(vocab, ids)
        if not spans:
            continue
        acts = key_activations(model, ids, source)
        per_token = (acts[layers, heads, :, dims].astype(np.float64) * weights[:, None]).sum(axis=0)  # [T]
        sums: dict[str, float] = defaultdict(float)
        counts: dict[str, int] = defaultdict(int)
        for s in spans:
            a, b = s.token_range
            sums[s.word] += float(per_token[a:b].sum())
            counts[s.word] += 1
        for word in sums:
            scores[word] += sums[word] / counts[word]
            inputs_with[word] += 1
            occ[word] += counts[word]
    return KeywordScoreTable(dataset, dict(scores), dict(inputs_with), dict(occ))


def extract_top_keywords(table: KeywordScoreTable, budget: int = 20) -> tuple[list[str], bool]:
    """The ``budget`` best words; the flag is set when fewer were available."""
    if not table.scores:
        raise InputError("keyword score table is empty")
    words = [w for w, _ in table.ranked()[:budget]]
    return words, len(words) < budget


def keyword_precision(extracted: Sequence[str], planted: Iterable[str]) -> float:
    if not extracted:
        return 0.0
    truth = {p.lower() for p in planted}
    return sum(w in truth for w in extracted) / len(extracted)
