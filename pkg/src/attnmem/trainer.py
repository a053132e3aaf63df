"""Memorization training: overfit the toy model until it recalls its corpus verbatim."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import numeric as nc
from .errors import InputError, TrainingError
from .metrics import continue_and_score
from .model import Transformer
from .tokenizer import PAD, Vocab

log = logging.getLogger(__name__)

IGNORE = -1


@dataclass(frozen=True)
class TrainRecipe:
    epochs: int = 400
    batch_size: int = 16
    lr: float = 3e-3
    warmup_steps: int = 50
    min_lr_frac: float = 0.1
    seed: int = 0
    target_loss: float = 0.0
    memorize_threshold: float = 1.0
    eval_every: int = 25

    def lr_at(self, step: int, total: int) -> float:
        """Linear warmup, then cosine decay to ``min_lr_frac * lr``."""
        if step < self.warmup_steps:
            return self.lr * (step + 1) / self.warmup_steps
        span = max(1, total - self.warmup_steps)
        t = min(1.0, (step - self.warmup_steps) / span)
        return self.lr * (self.min_lr_frac + (1 - self.min_lr_frac) * 0.5 * (1 + math.cos(math.pi * t)))


@dataclass
class CurvePoint:
    epoch: int
    loss: float
    memorized_fraction: float | None


def _batch(seqs: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    width = max(len(s) for s in seqs) - 1
    ids = np.full((len(seqs), width), PAD, dtype=np.int64)
    targets = np.full((len(seqs), width), IGNORE, dtype=np.int64)
    for i, s in enumerate(seqs):
        ids[i, : len(s) - 1] = s[:-1]
        targets[i, : len(s) - 1] = s[1:]
    return ids, targets


def train_memorize(
    model: Transformer,
    sequences: Sequence[Sequence[int]],
    recipe: TrainRecipe,
    check: Callable[[Transformer], float] | None = None,
) -> tuple[Transformer, list[CurvePoint]]:
    """Train on full sequences (next-token loss) until memorized or out of epochs.

    ``check`` returns the memorized fraction; training stops early once it
    reaches ``recipe.memorize_threshold``, or once the epoch loss drops to
    ``recipe.target_loss``. The model is updated in place and returned.
    """
    if not sequences:
        raise InputError("empty training set")
    if any(len(s) < 2 for s in sequences):
        raise InputError("every training sequence needs at least two tokens")
    if any(len(s) - 1 > model.cfg.max_seq for s in sequences):
        raise InputError(f"training sequence longer than max_seq {model.cfg.max_seq}")
    rng = np.random.default_rng(recipe.seed)
    params = model.parameters()
    state = nc.AdamState.for_params(params, lr=recipe.lr, beta2=0.98)
    n_batches = math.ceil(len(sequences) / recipe.batch_size)
    total_steps = recipe.epochs * n_batches
    curve: list[CurvePoint] = []
    step = 0
    for epoch in range(1, recipe.epochs + 1):
        order = rng.permutation(len(sequences))
        losses = []
        for b in range(n_batches):
            idx = order[b * recipe.batch_size : (b + 1) * recipe.batch_size]
            ids, targets = _batch([sequences[i] for i in sorted(idx)])
            for p in params:
                p.zero_grad()
            logits = model.logits(ids)
            loss = nc.cross_entropy(logits.reshape(-1, model.cfg.vocab_size), targets.reshape(-1), ignore_index=IGNORE)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingError("loss diverged", epoch)
            loss.backward()
            nc.adam_step(state, params, [p.grad for p in params], lr=recipe.lr_at(step, total_steps))
            step += 1
            losses.append(value)
        epoch_loss = float(np.mean(losses))
        frac = None
        last = epoch == recipe.epochs
        if check is not None and (epoch % recipe.eval_every == 0 or last or epoch_loss <= recipe.target_loss):
            frac = check(model)
        curve.append(CurvePoint(epoch, epoch_loss, frac))
        log.info("epoch %d loss %.5f memorized %s", epoch, epoch_loss, frac)
        if frac is not None and frac >= recipe.memorize_threshold:
            break
        if check is None and epoch_loss <= recipe.target_loss:
            break
    for p in params:
        p.zero_grad()
    return model, curve


def eval_memorization(model: Transformer, vocab: Vocab, windows) -> float:
    """Fraction of windows whose greedy continuation has ROUGE-L recall exactly 1."""
    if not windows:
        return 0.0
    hits = sum(continue_and_score(model, vocab, w.input_ids, w.label_ids).recall == 1.0 for w in windows)
    return hits / len(windows)


def write_curve(path, curve: Sequence[CurvePoint]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss", "memorized_fraction"])
        for pt in curve:
            w.writerow([pt.epoch, f"{pt.loss:.6f}", "" if pt.memorized_fraction is None else f"{pt.memorized_fraction:.4f}"])
