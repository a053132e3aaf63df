"""Q/K/V swapping between counterfactual prompt pairs, and keyword key-zeroing."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Literal, Sequence

import numpy as np

from .data import FactPair, WindowExample
from .errors import ContractError
from .metrics import Continuation, continue_and_score, first_word_match, perplexity, repetition_rate
from .model import Override, Scope, Transformer, replace_override, zero_keys
from .probe import window_words
from .tokenizer import EOS, Vocab, words_of

SWAP_TARGETS = {"K": ("K",), "V": ("V",), "KV": ("K", "V")}


@dataclass(frozen=True)
class SwapSpec:
    pair: FactPair
    targets: tuple[str, ...] = ("K", "V")
    scope: Scope | None = None  # None = every layer and head

    def __post_init__(self):
        if not self.targets or any(t not in ("K", "V") for t in self.targets):
            raise ContractError(f"swap targets must be a non-empty subset of K, V; got {self.targets}")
        if len(self.pair.factual_ids) != len(self.pair.counterfactual_ids):
            raise ContractError("swap pairs must have the same token length")


@dataclass
class SwapOutcome:
    baseline_gen: list[int]
    swapped_gen: list[int]
    baseline_text: str
    swapped_text: str
    baseline_logits: np.ndarray  # first generated position
    swapped_logits: np.ndarray
    baseline_match: str
    swapped_match: str
    delta_logit: float
    perplexity_baseline: float
    perplexity_swapped: float

    @property
    def perplexity_overhead(self) -> float:
        return self.perplexity_swapped - self.perplexity_baseline


def swap_overrides(model: Transformer, spec: SwapSpec, suffix: Sequence[int] = ()) -> list[Override]:
    """Overrides that impose the counterfactual prompt's native K and/or V.

    With a ``suffix`` the counterfactual prompt is run at the length of the
    patched sequence; causality leaves its prompt projections unchanged, and
    matching lengths keep the floating-point path identical.
    """
    P = len(spec.pair.counterfactual_ids)
    if P + len(suffix) > model.cfg.max_seq:
        raise ContractError("prompt longer than max_seq")
    scope = spec.scope or Scope.everything(model.cfg)
    cf = model.forward(list(spec.pair.counterfactual_ids) + list(suffix)).capture
    cf.k_native, cf.v_native = cf.k_native[:, :, :P], cf.v_native[:, :, :P]
    return [replace_override(f"replace_{t}", cf, scope) for t in sorted(spec.targets)]


def target_budget(vocab: Vocab, *targets: str) -> int:
    """Tokens needed to generate the longest target as a whole word, plus its delimiter."""
    return max(len(vocab.encode(" " + t)) for t in targets) + 1


def run_swap(model: Transformer, vocab: Vocab, spec: SwapSpec, n_new: int | None = None) -> SwapOutcome:
    """Generate from the factual prompt with and without the counterfactual projections.

    Overrides cover the prompt positions only; every generated position uses
    its own projections. Perplexity is that of each run's own continuation
    under its own condition. ``delta_logit`` is the swapped-minus-baseline
    logit of the counterfactual target's first token at the first generated
    position. ``n_new=None`` generates just enough tokens to spell out
    either target; generation also stops at end-of-sequence.
    """
    pair = spec.pair
    if n_new is None:
        n_new = target_budget(vocab, pair.factual_target, pair.counterfactual_target)
    overrides = swap_overrides(model, spec)
    f_ids = list(pair.factual_ids)
    base_logits = model.next_logits(f_ids)[-1]
    swap_logits = model.next_logits(f_ids, overrides)[-1]
    base = model.generate(f_ids, n_new, stop_id=EOS)
    swapped = model.generate(f_ids, n_new, overrides, stop_id=EOS)
    base_text, swap_text = vocab.decode(base), vocab.decode(swapped)
    cf_tok = vocab.encode(" " + pair.counterfactual_target)[0]
    return SwapOutcome(
        baseline_gen=base,
        swapped_gen=swapped,
        baseline_text=base_text,
        swapped_text=swap_text,
        baseline_logits=base_logits,
        swapped_logits=swap_logits,
        baseline_match=first_word_match(base_text, pair.factual_target, pair.counterfactual_target),
        swapped_match=first_word_match(swap_text, pair.factual_target, pair.counterfactual_target),
        delta_logit=float(swap_logits[cf_tok]) - float(base_logits[cf_tok]),
        perplexity_baseline=perplexity(model, f_ids, base),
        perplexity_swapped=perplexity(model, f_ids, swapped, swap_overrides(model, spec, swapped)),
    )


PerturbMode = Literal["keywords", "random_control"]


@dataclass(frozen=True)
class PerturbSpec:
    keywords: frozenset[str]
    scope: Scope
    mode: PerturbMode = "keywords"

    @classmethod
    def of(cls, keywords: Iterable[str], scope: Scope, mode: PerturbMode = "keywords") -> PerturbSpec:
        return cls(frozenset(k.lower() for k in keywords), scope, mode)


@dataclass
class PerturbOutcome:
    baseline: Continuation
    perturbed: Continuation
    perturbed_words: list[str]
    positions: list[int]
    untouched: bool
    perplexity_baseline: float
    perplexity_perturbed: float
    repetition_baseline: float
    repetition_perturbed: float
    short_generation: bool = False
    extra: dict = field(default_factory=dict)


def keyword_positions(vocab: Vocab, ids: Sequence[int], keywords: Iterable[str]) -> tuple[list[int], list[str]]:
    """Token positions of every whole-word occurrence of ``keywords``, and the words found."""
    kw = set(keywords)
    positions, found = [], set()
    for s in window_words(vocab, ids):
        if s.word in kw:
            positions.extend(range(*s.token_range))
            found.add(s.word)
    return positions, sorted(found)


def run_perturb(
    model: Transformer,
    vocab: Vocab,
    window: WindowExample,
    spec: PerturbSpec,
    baseline: Continuation | None = None,
    rep_n: int = 3,
) -> PerturbOutcome:
    """Zero the keys of keyword tokens in the window input at ``spec.scope``.

    The zeroing covers the prompt's keyword positions for the whole greedy
    continuation. Windows without any keyword come back ``untouched``.
    """
    if baseline is None:
        baseline = continue_and_score(model, vocab, window.input_ids, window.label_ids)
    positions, found = keyword_positions(vocab, window.input_ids, spec.keywords)
    ppl_base = perplexity(model, window.input_ids, window.label_ids)
    base_words = words_of(baseline.text)
    rep_base = repetition_rate(base_words, rep_n)
    if not positions:
        return PerturbOutcome(baseline, baseline, [], [], True, ppl_base, ppl_base, rep_base, rep_base,
                              len(base_words) < rep_n)
    overrides = [zero_keys(positions, spec.scope)]
    perturbed = continue_and_score(model, vocab, window.input_ids, window.label_ids, overrides)
    pert_words = words_of(perturbed.text)
    return PerturbOutcome(
        baseline,
        perturbed,
        found,
        positions,
        False,
        ppl_base,
        perplexity(model, window.input_ids, window.label_ids, overrides),
        rep_base,
        repetition_rate(pert_words, rep_n),
        len(pert_words) < rep_n or len(base_words) < rep_n,
    )


def item_seed(master_seed: int, index: int) -> int:
    """Independent per-item RNG seed, stable under any execution order."""
    return int(np.random.SeedSequence([master_seed, index]).generate_state(1)[0])


def random_control(
    vocab: Vocab, window: WindowExample, keywords: Iterable[str], keyword_count: int, seed: int
) -> tuple[set[str], bool]:
    """Sample ``keyword_count`` distinct non-keyword words from the window input.

    Returns the sample and a flag that is set when fewer candidates existed
    than requested (all candidates are then returned).
    """
    if keyword_count <= 0:
        return set(), False
    kw = {k.lower() for k in keywords}
    candidates = sorted({s.word for s in window_words(vocab, window.input_ids)} - kw)
    if len(candidates) <= keyword_count:
        return set(candidates), len(candidates) < keyword_count
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(candidates), size=keyword_count, replace=False)
    return {candidates[i] for i in picks}, False
