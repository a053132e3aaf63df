import csv

import numpy as np
import pytest

from attnmem.data import WindowExample
from attnmem.errors import InputError, TrainingError
from attnmem.model import ModelConfig, Transformer
from attnmem.trainer import CurvePoint, TrainRecipe, eval_memorization, train_memorize, write_curve
from attnmem.tokenizer import BOS, EOS, fit

TEXT = "the quick brown fox jumps over the lazy dog while the cat sleeps by the warm fire"


@pytest.fixture(scope="module")
def vocab():
    return fit(TEXT, 280)


def _model(vocab, seed=0):
    cfg = ModelConfig(n_layers=2, n_heads=2, n_kv_heads=2, d_model=32, vocab_size=len(vocab), max_seq=48, d_mlp=64)
    return Transformer.init(cfg, seed)


def _window(vocab, split=6):
    ids = vocab.encode(TEXT)
    return WindowExample(ids[:split], ids[split:], "b", 0, 0, len(TEXT))


def _weights(model):
    return {n: p.data.copy() for n, p in model.params.items()}


def test_single_sequence_reaches_low_loss(vocab):
    seq = [BOS] + vocab.encode(TEXT) + [EOS]
    recipe = TrainRecipe(epochs=600, batch_size=1, lr=3e-3, warmup_steps=10, target_loss=0.005)
    _, curve = train_memorize(_model(vocab), [seq], recipe)
    assert curve[-1].loss < 0.01


def test_zero_epochs_returns_initial_weights(vocab):
    model = _model(vocab)
    before = _weights(model)
    _, curve = train_memorize(model, [[BOS] + vocab.encode(TEXT)], TrainRecipe(epochs=0))
    assert curve == []
    assert all(np.array_equal(before[n], p.data) for n, p in model.params.items())


def test_same_seed_identical_weights(vocab):
    seqs = [[BOS] + vocab.encode(s) for s in TEXT.split(" the ")]
    recipe = TrainRecipe(epochs=5, batch_size=2, seed=4)
    a, ca = train_memorize(_model(vocab), seqs, recipe)
    b, cb = train_memorize(_model(vocab), seqs, recipe)
    assert [p.loss for p in ca] == [p.loss for p in cb]
    assert all(np.array_equal(a.params[n].data, b.params[n].data) for n in a.params)


def test_shuffle_seed_matters(vocab):
    seqs = [[BOS] + vocab.encode(s) for s in TEXT.split(" the ")]
    a, _ = train_memorize(_model(vocab), seqs, TrainRecipe(epochs=3, batch_size=1, seed=0))
    b, _ = train_memorize(_model(vocab), seqs, TrainRecipe(epochs=3, batch_size=1, seed=1))
    assert not np.array_equal(a.params["layers.0.wq"].data, b.params["layers.0.wq"].data)


def test_early_stop_on_memorization(vocab):
    w = _window(vocab)
    seq = w.input_ids + w.label_ids
    recipe = TrainRecipe(epochs=400, batch_size=1, warmup_steps=10, eval_every=10)
    model, curve = train_memorize(_model(vocab), [seq], recipe, check=lambda m: eval_memorization(m, vocab, [w]))
    assert curve[-1].memorized_fraction == 1.0
    assert len(curve) < 400
    fracs = [p.memorized_fraction for p in curve if p.memorized_fraction is not None]
    assert fracs[-1] >= fracs[0]


def test_divergence_reports_epoch(vocab):
    model = _model(vocab)
    model.params["unembed"].data[:] = np.nan
    with pytest.raises(TrainingError) as err:
        train_memorize(model, [[BOS] + vocab.encode(TEXT)], TrainRecipe(epochs=2))
    assert err.value.epoch == 1


@pytest.mark.parametrize("seqs", [[], [[BOS]], [list(range(3, 60))]])
def test_bad_datasets(vocab, seqs):
    with pytest.raises(InputError):
        train_memorize(_model(vocab), seqs, TrainRecipe(epochs=1))


def test_untrained_memorizes_nothing(vocab):
    rng = np.random.default_rng(0)
    windows = [WindowExample(rng.integers(3, len(vocab), 10).tolist(), rng.integers(3, len(vocab), 8).tolist(),
                             "r", 0, 0, 0) for _ in range(10)]
    assert eval_memorization(_model(vocab), vocab, windows) == 0.0
    assert eval_memorization(_model(vocab), vocab, []) == 0.0


def test_lr_schedule():
    r = TrainRecipe(lr=1.0, warmup_steps=4, min_lr_frac=0.1)
    assert [r.lr_at(s, 100) for s in range(4)] == [0.25, 0.5, 0.75, 1.0]
    assert r.lr_at(100, 100) == pytest.approx(0.1)
    lrs = [r.lr_at(s, 100) for s in range(4, 101)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_curve_csv(tmp_path):
    write_curve(tmp_path / "c.csv", [CurvePoint(1, 2.5, None), CurvePoint(2, 1.25, 0.5)])
    rows = list(csv.DictReader(open(tmp_path / "c.csv")))
    assert list(rows[0]) == ["epoch", "loss", "memorized_fraction"]
    assert rows[1] == {"epoch": "2", "loss": "1.250000", "memorized_fraction": "0.5000"}
    assert rows[0]["memorized_fraction"] == ""
