"""A configuration small enough to run every pipeline stage in seconds."""

from __future__ import annotations

from attnmem import config as C
from attnmem import runner

TINY = {
    "tokenizer": {"vocab_size": 300},
    "model": {"n_layers": 2, "n_heads": 2, "n_kv_heads": 2, "d_model": 32, "max_seq": 48, "d_mlp": 64},
    "data": {
        "books": {"n_books": 2, "keywords_per_book": 6, "length": 60, "input_len": 24, "label_len": 8, "step": 16},
        "facts": {"n_subjects": 8, "templates": [0, 1]},
    },
    "train": {
        "books": {"epochs": 40, "batch_size": 8, "warmup_steps": 5, "eval_every": 40},
        "facts": {"epochs": 40, "batch_size": 8, "warmup_steps": 5, "eval_every": 40},
    },
    "exp1": {},
    "exp2": {"keyword_budget": 6, "head_budget": 1},
}

STAGES = [runner.cmd_synth_data, runner.cmd_tokenizer_fit, runner.cmd_train, runner.cmd_exp1, runner.cmd_exp2]


def tiny_config(output_dir, **top) -> C.ExperimentConfig:
    return C.from_dict({**TINY, "output_dir": str(output_dir), **top})


def run_all(cfg: C.ExperimentConfig) -> dict:
    return {fn.__name__: fn(cfg) for fn in STAGES}
