"""End-to-end pipelines: data, tokenizer, training, both experiments, and report merging.

Every stage writes one directory under ``output_dir`` named after the
config sections it depends on plus the seed. A finished stage directory is
never rewritten; rerunning a stage with the same config reuses it.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import shutil
import time
from dataclasses import asdict
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import data as D
from .config import ExperimentConfig
from .errors import ConfigError, DataError, FormatError
from .interventions import (
    PerturbSpec,
    SwapSpec,
    item_seed,
    keyword_positions,
    random_control,
    run_perturb,
    run_swap,
    target_budget,
)
from .metrics import continue_and_score, higher_is_better, normalize_to_baseline, perplexity, repetition_rate
from .model import ModelConfig, Scope, Transformer
from .probe import (
    extract_top_keywords,
    keyword_precision,
    keyword_scores,
    memory_coefficient,
    neuron_signs,
    rank_heads_mrr,
    rank_neurons_mrr,
    select_heads,
)
from .tokenizer import EOS, Vocab, fit, words_of
from .trainer import TrainRecipe, eval_memorization, train_memorize, write_curve

log = logging.getLogger(__name__)

DONE = "DONE"
TIMING = "timing.json"

# Which config sections each stage depends on, upstream included.
STAGE_SECTIONS = {
    "data": ("data",),
    "tokenizer": ("data", "tokenizer"),
    "train": ("data", "tokenizer", "model", "train"),
    "exp1": ("data", "tokenizer", "model", "train", "exp1"),
    "exp2": ("data", "tokenizer", "model", "train", "exp2"),
}

EXP1_COLUMNS = ["target", "n_pairs", "baseline_factual_acc", "factual_acc", "counterfactual_acc",
                "neither_acc", "mean_delta_logit", "mean_perplexity_overhead"]
EXP2_METRICS = ["rouge_l_recall", "perplexity", "repetition_rate"]
EXP2_COLUMNS = ["book", "method", "scope", "n_items", *EXP2_METRICS, *[f"norm_{m}" for m in EXP2_METRICS]]


def stage_dir(cfg: ExperimentConfig, stage: str) -> Path:
    return Path(cfg.output_dir) / f"{stage}-{cfg.section_hash(*STAGE_SECTIONS[stage])}-s{cfg.seed}"


def _fmt(x: float) -> str:
    return repr(float(x)) if math.isfinite(x) else str(x)


def _write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) if isinstance(v, float) else v for v in row])


class _Stage:
    """Builds a stage in a scratch directory and renames it into place when complete."""

    def __init__(self, cfg: ExperimentConfig, stage: str):
        self.final = stage_dir(cfg, stage)
        self.tmp = self.final.with_name(self.final.name + ".partial")
        self.cfg = cfg
        self.timing: dict[str, float] = {}
        self.start = time.perf_counter()

    @property
    def done(self) -> bool:
        return (self.final / DONE).exists()

    def __enter__(self) -> Path:
        if self.tmp.exists():
            shutil.rmtree(self.tmp)
        self.tmp.mkdir(parents=True)
        (self.tmp / "config.yaml").write_text(self.cfg.dump(), encoding="utf-8")
        return self.tmp

    def lap(self, name: str, since: float) -> float:
        now = time.perf_counter()
        self.timing[name] = now - since
        return now

    def __exit__(self, exc_type, exc, tb) -> None:
        if exc_type is not None:
            return
        # wall-clock seconds; kept out of the CSV/JSONL results so those stay reproducible
        self.timing["total_seconds"] = time.perf_counter() - self.start
        (self.tmp / TIMING).write_text(json.dumps(self.timing, sort_keys=True, indent=1) + "\n", encoding="utf-8")
        (self.tmp / DONE).write_text("", encoding="utf-8")
        if self.final.exists():
            shutil.rmtree(self.final)
        self.tmp.rename(self.final)


def _require(cfg: ExperimentConfig, stage: str, command: str) -> Path:
    d = stage_dir(cfg, stage)
    if not (d / DONE).exists():
        raise ConfigError(f"missing {stage} output {d}; run `attnmem {command}` with this config first")
    return d


# data


def cmd_synth_data(cfg: ExperimentConfig) -> Path:
    st = _Stage(cfg, "data")
    if st.done:
        log.info("data stage already complete: %s", st.final)
        return st.final
    b = cfg.data.books
    with st as out:
        books = D.synth_books(b.n_books, b.keywords_per_book, b.length, cfg.seed, b.min_occurrences,
                              sentences_per_scene=b.sentences_per_scene)
        for book in books:
            book.save(out / "books")
        planted = [k for book in books for k in book.planted_keywords]
        grid = D.fact_grid(cfg.data.facts.n_subjects, cfg.data.facts.templates, cfg.seed, taken=planted)
        D.write_jsonl(out / "facts.jsonl", (asdict(f) for f in grid.facts))
        (out / "books.txt").write_text("\n".join(book.book_id for book in books) + "\n", encoding="utf-8")
    return st.final


def load_books(data_dir: Path) -> list[D.SyntheticBook]:
    ids = (data_dir / "books.txt").read_text(encoding="utf-8").split()
    return [D.SyntheticBook.load(data_dir / "books", i) for i in ids]


def load_grid(data_dir: Path) -> D.FactGrid:
    return D.FactGrid([D.Fact(**row) for row in D.read_jsonl(data_dir / "facts.jsonl")])


# tokenizer


def cmd_tokenizer_fit(cfg: ExperimentConfig) -> Path:
    st = _Stage(cfg, "tokenizer")
    if st.done:
        return st.final
    data_dir = _require(cfg, "data", "synth-data")
    corpus = "\n".join(b.text for b in load_books(data_dir)) + "\n" + load_grid(data_dir).text
    with st as out:
        fit(corpus, cfg.tokenizer.vocab_size).save(out / "vocab.txt")
    return st.final


def load_vocab(cfg: ExperimentConfig) -> Vocab:
    return Vocab.load(_require(cfg, "tokenizer", "tokenizer-fit") / "vocab.txt")


# training


def book_windows(cfg: ExperimentConfig, vocab: Vocab, books: Sequence[D.SyntheticBook]) -> dict[str, list[D.WindowExample]]:
    b = cfg.data.books
    return {book.book_id: D.sliding_windows(vocab.encode(book.text), b.input_len, b.label_len, b.step, book.book_id, vocab)
            for book in books}


def fact_accuracy(model: Transformer, vocab: Vocab, grid: D.FactGrid) -> float:
    """Fraction of facts whose greedy continuation starts with the memorized target."""
    hits = 0
    for f in grid.facts:
        text = vocab.decode(model.generate(grid.prompt_ids(vocab, f), target_budget(vocab, f.target), stop_id=EOS))
        hits += words_of(text)[:1] == [f.target.lower()]
    return hits / len(grid.facts)


def model_config(cfg: ExperimentConfig, vocab: Vocab) -> ModelConfig:
    m = cfg.model
    return ModelConfig(m.n_layers, m.n_heads, m.n_kv_heads, m.d_model, len(vocab), m.max_seq, m.d_mlp, m.ln_eps)


def _recipe(section, seed: int) -> TrainRecipe:
    return TrainRecipe(section.epochs, section.batch_size, section.lr, section.warmup_steps, section.min_lr_frac, seed,
                       section.target_loss, section.memorize_threshold, section.eval_every)


def cmd_train(cfg: ExperimentConfig) -> Path:
    st = _Stage(cfg, "train")
    if st.done:
        return st.final
    data_dir = _require(cfg, "data", "synth-data")
    vocab = load_vocab(cfg)
    books = load_books(data_dir)
    grid = load_grid(data_dir)
    mcfg = model_config(cfg, vocab)
    summary = {}
    with st as out:
        t = time.perf_counter()
        windows = [w for ws in book_windows(cfg, vocab, books).values() for w in ws]
        model = Transformer.init(mcfg, cfg.model.init_seed)
        model, curve = train_memorize(model, [w.input_ids + w.label_ids for w in windows],
                                      _recipe(cfg.train.books, cfg.seed),
                                      lambda m: eval_memorization(m, vocab, windows))
        model.save(out / "books.ckpt")
        write_curve(out / "curve_books.csv", curve)
        summary["books_memorized_fraction"] = eval_memorization(model, vocab, windows)
        summary["books_epochs"] = len(curve)
        t = st.lap("books_seconds", t)

        model = Transformer.init(mcfg, cfg.model.init_seed + 1)
        model, curve = train_memorize(model, grid.training_sequences(vocab), _recipe(cfg.train.facts, cfg.seed),
                                      lambda m: fact_accuracy(m, vocab, grid))
        model.save(out / "facts.ckpt")
        write_curve(out / "curve_facts.csv", curve)
        summary["facts_accuracy"] = fact_accuracy(model, vocab, grid)
        summary["facts_epochs"] = len(curve)
        st.lap("facts_seconds", t)
        (out / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    log.info("training summary %s", summary)
    return st.final


def _checkpoint(cfg: ExperimentConfig, override: str, name: str) -> Transformer:
    path = Path(override) if override else _require(cfg, "train", "train") / name
    if not path.exists():
        raise ConfigError(f"checkpoint not found: {path}")
    return Transformer.load(path)


# experiment 1


def cmd_exp1(cfg: ExperimentConfig) -> Path:
    st = _Stage(cfg, "exp1")
    if st.done:
        return st.final
    data_dir = _require(cfg, "data", "synth-data")
    vocab = load_vocab(cfg)
    model = _checkpoint(cfg, cfg.exp1.checkpoint, "facts.ckpt")
    pairs = D.make_pairs(load_grid(data_dir), vocab)
    if 0 < cfg.exp1.max_pairs < len(pairs):
        keep = np.sort(np.random.default_rng(cfg.seed).choice(len(pairs), cfg.exp1.max_pairs, replace=False))
        pairs = [pairs[i] for i in keep]
    rows = []
    for target in cfg.exp1.targets:
        for i, pair in enumerate(pairs):
            o = run_swap(model, vocab, SwapSpec(pair, tuple(target)), cfg.exp1.n_new or None)
            rows.append({
                "target": target,
                "pair": i,
                "template": pair.template,
                "factual_subject": pair.factual_subject,
                "counterfactual_subject": pair.counterfactual_subject,
                "factual_target": pair.factual_target,
                "counterfactual_target": pair.counterfactual_target,
                "baseline_text": o.baseline_text,
                "swapped_text": o.swapped_text,
                "baseline_match": o.baseline_match,
                "swapped_match": o.swapped_match,
                "delta_logit": o.delta_logit,
                "perplexity_baseline": o.perplexity_baseline,
                "perplexity_swapped": o.perplexity_swapped,
                "perplexity_overhead": o.perplexity_overhead,
            })
    with st as out:
        D.write_jsonl(out / "exp1_pairs.jsonl", rows)
        _write_csv(out / "exp1_summary.csv", EXP1_COLUMNS, exp1_summary(rows))
    return st.final


def exp1_summary(rows: Sequence[dict]) -> list[list]:
    out = []
    for target in dict.fromkeys(r["target"] for r in rows):
        rs = [r for r in rows if r["target"] == target]

        def frac(key, value):
            return float(np.mean([r[key] == value for r in rs]))

        out.append([target, len(rs), frac("baseline_match", "factual"), frac("swapped_match", "factual"),
                    frac("swapped_match", "counterfactual"), frac("swapped_match", "neither"),
                    float(np.mean([r["delta_logit"] for r in rs])),
                    float(np.mean([r["perplexity_overhead"] for r in rs]))])
    return out


# experiment 2


def cmd_exp2(cfg: ExperimentConfig) -> Path:
    st = _Stage(cfg, "exp2")
    if st.done:
        return st.final
    e = cfg.exp2
    data_dir = _require(cfg, "data", "synth-data")
    vocab = load_vocab(cfg)
    model = _checkpoint(cfg, e.checkpoint, "books.ckpt")
    books = load_books(data_dir)
    windows = book_windows(cfg, vocab, books)

    memory = {}
    for book in books:
        kept = D.verbatim_filter(model, vocab, windows[book.book_id])
        if not kept:
            log.warning("no verbatim windows for %s; skipping it", book.book_id)
            continue
        memory[book.book_id] = kept
    books = [b for b in books if b.book_id in memory]
    if not books:
        raise DataError("no book has any verbatim-memorized window")

    with st as out:
        D.write_jsonl(out / "verbatim.jsonl", ({"book_id": w.book_id, "token_offset": w.token_offset,
                                                 "char_start": w.char_start, "char_end": w.char_end}
                                                for b in books for w in memory[b.book_id]))
        tables = []
        for book in books:
            t = memory_coefficient(model, vocab, [w.input_ids for w in memory[book.book_id]], book.planted_keywords,
                                   e.source, book.book_id)
            t.write_csv(out / f"coefficients_{book.book_id}.csv")
            tables.append(t)
        neurons = rank_neurons_mrr(tables)
        _write_csv(out / "mrr_neurons.csv", ["rank", "layer", "head", "dim", "mrr"],
                   ([r, *n, s] for r, (n, s) in enumerate(neurons, start=1)))
        heads_ranked = rank_heads_mrr(tables)
        _write_csv(out / "mrr_heads.csv", ["rank", "layer", "head", "mrr"],
                   ([r, *h, s] for r, (h, s) in enumerate(heads_ranked, start=1)))
        heads = select_heads(heads_ranked, e.head_budget, e.exclude_first_head)

        top = [n for n, _ in neurons[: e.n_neurons]]
        signs = neuron_signs(tables, top) if e.orient_signs else None
        extracted, precision_rows = {}, []
        for book in books:
            table = keyword_scores(model, vocab, [w.input_ids for w in memory[book.book_id]], top, e.source, signs,
                                   book.book_id)
            table.write_csv(out / f"keywords_{book.book_id}.csv")
            words, short = extract_top_keywords(table, e.keyword_budget)
            extracted[book.book_id] = words
            precision_rows.append([book.book_id, keyword_precision(words, book.planted_keywords), len(words), short])
        precision_rows.append(["all", float(np.mean([r[1] for r in precision_rows])),
                               sum(r[2] for r in precision_rows), any(r[3] for r in precision_rows)])
        _write_csv(out / "precision.csv", ["book", "precision", "n_extracted", "short"], precision_rows)
        _write_csv(out / "extracted.csv", ["book", "rank", "word", "planted"],
                   ([b.book_id, r, w, w in set(b.planted_keywords)]
                    for b in books for r, w in enumerate(extracted[b.book_id], start=1)))

        scopes = {"heads": Scope.heads(model.cfg, heads), "all": Scope.everything(model.cfg)}
        items = perturbation_items(cfg, model, vocab, books, memory, extracted, {s: scopes[s] for s in e.scopes})
        D.write_jsonl(out / "exp2_items.jsonl", items)
        _write_csv(out / "exp2_summary.csv", EXP2_COLUMNS, exp2_summary(items))
        meta = {"selected_heads": [list(h) for h in heads], "top_neurons": [list(n) for n in top],
                "signs": [signs[n] for n in top] if signs else None, "books": [b.book_id for b in books]}
        (out / "exp2_meta.json").write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    return st.final


def perturbation_items(cfg, model, vocab, books, memory, extracted, scopes) -> list[dict]:
    """One row per (window, method, scope), plus each window's unperturbed baseline."""
    e = cfg.exp2
    rows = []
    index = 0
    for book in books:
        planted = book.planted_keywords
        for w in memory[book.book_id]:
            base = continue_and_score(model, vocab, w.input_ids, w.label_ids)
            common = {"book": book.book_id, "token_offset": w.token_offset}
            rows.append(_item_row(common, "baseline", "none", None, base, model, w, e.repetition_n))
            # the random control matches the number of planted keywords present in this window
            rnd = None
            for method in e.methods:
                for scope_name, scope in scopes.items():
                    if method == "random":
                        if rnd is None:
                            found = keyword_positions(vocab, w.input_ids, planted)[1]
                            rnd, short = random_control(vocab, w, planted, len(found), item_seed(cfg.seed, index))
                        words = rnd
                    else:
                        words = planted if method == "planted" else extracted[book.book_id]
                    o = run_perturb(model, vocab, w, PerturbSpec.of(words, scope, "random_control" if method == "random"
                                                                   else "keywords"), base, e.repetition_n)
                    row = _item_row(common, method, scope_name, o, o.perturbed, model, w, e.repetition_n)
                    if method == "random":
                        row["control_short"] = short
                    rows.append(row)
            index += 1
    return rows


def _item_row(common, method, scope, outcome, cont, model, window, rep_n) -> dict:
    gen_words = words_of(cont.text)
    row = {**common, "method": method, "scope": scope, "rouge_l_recall": cont.recall, "text": cont.text}
    if outcome is None:
        row["perplexity"] = perplexity(model, window.input_ids, window.label_ids)
        row["perturbed_words"] = []
        row["n_positions"] = 0
    else:
        row["perplexity"] = outcome.perplexity_perturbed
        row["perturbed_words"] = outcome.perturbed_words
        row["n_positions"] = len(outcome.positions)
    row["repetition_rate"] = repetition_rate(gen_words, rep_n)
    for n in range(1, 5):
        row[f"repetition_{n}"] = repetition_rate(gen_words, n)
    return row


def exp2_summary(items: Sequence[dict]) -> list[list]:
    """Mean metrics per (book, method, scope), with ``book == "all"`` pooling every window."""
    out = []
    book_ids = sorted({r["book"] for r in items})
    for book in [*book_ids, "all"]:
        rs = [r for r in items if book == "all" or r["book"] == book]
        base = {m: float(np.mean([r[m] for r in rs if r["method"] == "baseline"])) for m in EXP2_METRICS}
        for key in dict.fromkeys((r["method"], r["scope"]) for r in rs):
            group = [r for r in rs if (r["method"], r["scope"]) == key]
            means = {m: float(np.mean([r[m] for r in group])) for m in EXP2_METRICS}
            norm = normalize_to_baseline(means, base)
            out.append([book, *key, len(group), *[means[m] for m in EXP2_METRICS], *[norm[m] for m in EXP2_METRICS]])
    return out


# report


def _read_csv(path: Path, required: Sequence[str]) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for col in required:
            if col not in header:
                raise FormatError(f"column missing from {path}", col)
        rows = list(reader)
    for row in rows:
        for col in required:
            if row[col] in ("", None):
                raise FormatError(f"empty value in {path}", col)
    return rows


def _num(v: str):
    try:
        return int(v)
    except ValueError:
        try:
            return float(v)
        except ValueError:
            return v


def cmd_report(run_dirs: Sequence[str | Path], output: str | Path) -> Path:
    """Merge finished exp1/exp2 run directories into CSV tables plus one plot-data JSON."""
    dirs = [Path(d) for d in run_dirs]
    if not dirs:
        raise ConfigError("report needs at least one run directory")
    exp1, exp2, plot = [], [], {"exp1": {}, "exp2": {}, "mrr": {}, "per_book": {}}
    for d in dirs:
        if not (d / DONE).exists():
            raise ConfigError(f"{d} is not a completed run directory")
        found = False
        if (d / "exp1_summary.csv").exists():
            found = True
            rows = [{k: _num(v) for k, v in r.items()} for r in _read_csv(d / "exp1_summary.csv", EXP1_COLUMNS)]
            exp1 += [{"run": d.name, **r} for r in rows]
            plot["exp1"][d.name] = {r["target"]: {c: r[c] for c in EXP1_COLUMNS[1:]} for r in rows}
        if (d / "exp2_summary.csv").exists():
            found = True
            rows = [{k: _num(v) for k, v in r.items()} for r in _read_csv(d / "exp2_summary.csv", EXP2_COLUMNS)]
            exp2 += [{"run": d.name, **r} for r in rows]
            series: dict = {}
            per_book: dict = {}
            for r in rows:
                norm = {m: r[f"norm_{m}"] for m in EXP2_METRICS}
                entry = {"normalized": norm, "higher_is_better": higher_is_better(norm)}
                target = series if r["book"] == "all" else per_book.setdefault(r["book"], {})
                target[f"{r['method']}/{r['scope']}"] = entry
            plot["exp2"][d.name] = series
            plot["per_book"][d.name] = per_book
            mrr = _read_csv(d / "mrr_neurons.csv", ["rank", "layer", "head", "dim", "mrr"])[:10]
            plot["mrr"][d.name] = [{"neuron": f"L{r['layer']}H{r['head']}D{r['dim']}", "mrr": float(r["mrr"])}
                                   for r in mrr]
        if not found:
            raise FormatError(f"{d} holds neither exp1 nor exp2 results", "exp1_summary.csv")
    out = Path(output)
    out.mkdir(parents=True, exist_ok=True)
    if exp1:
        _write_csv(out / "exp1_merged.csv", ["run", *EXP1_COLUMNS], ([r["run"], *[r[c] for c in EXP1_COLUMNS]] for r in exp1))
        _write_csv(out / "exp1_aggregate.csv", EXP1_COLUMNS, _aggregate(exp1, ["target"], EXP1_COLUMNS))
    if exp2:
        _write_csv(out / "exp2_merged.csv", ["run", *EXP2_COLUMNS], ([r["run"], *[r[c] for c in EXP2_COLUMNS]] for r in exp2))
        _write_csv(out / "exp2_aggregate.csv", EXP2_COLUMNS, _aggregate(exp2, ["book", "method", "scope"], EXP2_COLUMNS))
    (out / "plot_data.json").write_text(json.dumps(plot, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    return out


def _aggregate(rows: Sequence[dict], keys: Sequence[str], columns: Sequence[str]) -> list[list]:
    """Mean of every non-key column across runs, grouped by ``keys`` in first-seen order."""
    out = []
    for k in dict.fromkeys(tuple(r[c] for c in keys) for r in rows):
        group = [r for r in rows if tuple(r[c] for c in keys) == k]
        vals = []
        for c in columns[len(keys):]:
            mean = float(np.mean([float(r[c]) for r in group]))
            vals.append(int(mean) if all(isinstance(r[c], int) for r in group) and mean.is_integer() else mean)
        out.append([*k, *vals])
    return out

