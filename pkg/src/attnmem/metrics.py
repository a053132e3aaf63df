"""Quantitative measures for both experiments."""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Hashable, Literal, Sequence

import numpy as np

from .errors import InputError
from .model import Override, Transformer
from .numeric import log_softmax
from .tokenizer import Vocab, words_of

MEMORIZATION_METRICS = ("rouge_l_recall",)


def lcs_length(a: Sequence[Hashable], b: Sequence[Hashable]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l_recall(reference: Sequence[Hashable], candidate: Sequence[Hashable]) -> float:
    """LCS(reference, candidate) / len(reference)."""
    if len(reference) == 0:
        raise InputError("ROUGE-L recall needs a non-empty reference")
    return lcs_length(reference, candidate) / len(reference)


def rouge_l_recall_text(reference: str, candidate: str) -> float:
    """Word-level ROUGE-L recall over lowercased words."""
    return rouge_l_recall(words_of(reference), words_of(candidate))


def repetition_rate(tokens: Sequence[Hashable], n: int = 3) -> float:
    """1 - unique n-grams / total n-grams; 0 when fewer than ``n`` tokens."""
    if n < 1:
        raise InputError("n must be at least 1")
    if len(tokens) < n:
        return 0.0
    grams = [tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1)]
    return 1.0 - len(set(grams)) / len(grams)


FirstWord = Literal["factual", "counterfactual", "neither"]
_STRIP = re.compile(r"^[^\w]+|[^\w]+$")


def first_word(text: str) -> str:
    parts = text.split()
    return _STRIP.sub("", parts[0]).lower() if parts else ""


def first_word_match(generated: str, factual: str, counterfactual: str) -> FirstWord:
    if factual.lower() == counterfactual.lower():
        raise InputError("factual and counterfactual targets must differ")
    w = first_word(generated)
    if w and w == factual.lower():
        return "factual"
    if w and w == counterfactual.lower():
        return "counterfactual"
    return "neither"


def label_nll(
    model: Transformer, input_ids: Sequence[int], label_ids: Sequence[int], overrides: Sequence[Override] = ()
) -> np.ndarray:
    """Per-token negative log-likelihood of ``label_ids``, teacher-forced after ``input_ids``."""
    if len(label_ids) == 0:
        raise InputError("perplexity needs a non-empty label")
    if len(input_ids) == 0:
        raise InputError("perplexity needs a non-empty input")
    seq = list(input_ids) + list(label_ids)[:-1]
    logits = model.next_logits(seq, overrides).astype(np.float64)
    start = len(input_ids) - 1
    lsm = log_softmax(logits[start:])
    return -lsm[np.arange(len(label_ids)), np.asarray(label_ids)]


def perplexity(
    model: Transformer, input_ids: Sequence[int], label_ids: Sequence[int], overrides: Sequence[Override] = ()
) -> float:
    return float(math.exp(label_nll(model, input_ids, label_ids, overrides).mean()))


def perplexity_overhead(
    model: Transformer, input_ids: Sequence[int], label_ids: Sequence[int], overrides: Sequence[Override]
) -> float:
    return perplexity(model, input_ids, label_ids, overrides) - perplexity(model, input_ids, label_ids)


@dataclass
class Continuation:
    ids: list[int]
    text: str
    recall: float


def continue_and_score(
    model: Transformer,
    vocab: Vocab,
    input_ids: Sequence[int],
    label_ids: Sequence[int],
    overrides: Sequence[Override] = (),
) -> Continuation:
    """Greedy label-length continuation scored by word-level ROUGE-L recall.

    The memorization filter, training evaluation and perturbation runs all
    go through here, so their baselines cannot drift apart.
    """
    gen = model.generate(input_ids, len(label_ids), overrides, draft=label_ids)
    text = vocab.decode(gen)
    return Continuation(gen, text, rouge_l_recall_text(vocab.decode(label_ids), text))


@dataclass
class MetricsReport:
    """Per-item metric rows plus their means.

    ``aggregate`` is the plain mean of each numeric column over items, in
    item order; ``normalized`` divides by a baseline report's aggregate.
    """

    items: list[dict] = field(default_factory=list)
    normalization: str = "raw"

    def add(self, **row) -> None:
        self.items.append(row)

    def aggregate(self, keys: Sequence[str] | None = None) -> dict[str, float]:
        if not self.items:
            return {}
        keys = keys or [k for k, v in self.items[0].items() if isinstance(v, (int, float)) and not isinstance(v, bool)]
        return {k: float(np.mean([row[k] for row in self.items])) for k in keys}

    def normalized(self, baseline: dict[str, float]) -> dict[str, float]:
        return normalize_to_baseline(self.aggregate(list(baseline)), baseline)


def normalize_to_baseline(values: dict[str, float], baseline: dict[str, float]) -> dict[str, float]:
    """Ratio of each metric to its unperturbed baseline (baseline itself maps to 1.0)."""
    out = {}
    for k, v in values.items():
        b = baseline[k]
        out[k] = 1.0 if v == b else (v / b if b != 0 else math.inf)
    return out


def higher_is_better(normalized: dict[str, float]) -> dict[str, float]:
    """Unlearning view for radar plots: memorization ratios are inverted.

    Only the report layer calls this; raw outputs stay untouched.
    """
    out = {}
    for k, v in normalized.items():
        if k in MEMORIZATION_METRICS or k in ("perplexity", "repetition_rate"):
            out[k] = 1.0 / v if v not in (0, math.inf) else (math.inf if v == 0 else 0.0)
        else:
            out[k] = v
    return out
