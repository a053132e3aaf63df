import time

import numpy as np
import pytest

from attnmem.data import FactPair, WindowExample
from attnmem.errors import ContractError
from attnmem.interventions import (
    PerturbSpec,
    SwapSpec,
    item_seed,
    keyword_positions,
    random_control,
    run_perturb,
    run_swap,
    swap_overrides,
    target_budget,
)
from attnmem.model import ModelConfig, Scope, Transformer, zero_keys
from attnmem.tokenizer import BOS, fit

from reference import reference_forward

TEXT = "The capital of Doria is Mira. The capital of Velno is Tusk. Alice met the Rabbit near Doria at noon. Bob saw Velno at dusk."


@pytest.fixture(scope="module")
def vocab():
    return fit(TEXT * 3, 300)


def _model(vocab, n_layers, seed=0, n_kv_heads=2):
    cfg = ModelConfig(n_layers=n_layers, n_heads=2, n_kv_heads=n_kv_heads, d_model=16, vocab_size=len(vocab),
                      max_seq=48, d_mlp=32)
    m = Transformer.init(cfg, seed)
    rng = np.random.default_rng(seed)
    for name, p in m.params.items():
        if not name.endswith((".g", ".b")):
            p.data = (rng.normal(size=p.data.shape) * 0.4).astype(np.float32)
    return m


def _pair(vocab, f="Doria", cf="Velno", ft="Mira", ct="Tusk"):
    a = [BOS] + vocab.encode(f"The capital of {f} is")
    b = [BOS] + vocab.encode(f"The capital of {cf} is")
    assert len(a) == len(b)
    return FactPair(a, b, ft, ct, f, cf, 0)


class TestSwapOracle:
    @pytest.mark.parametrize("targets", [("K",), ("V",), ("K", "V")])
    def test_one_layer_matches_brute_force(self, vocab, targets):
        model = _model(vocab, 1)
        pair = _pair(vocab)
        start = time.perf_counter()
        overrides = swap_overrides(model, SwapSpec(pair, targets))
        outcome = run_swap(model, vocab, SwapSpec(pair, targets), n_new=2)
        cap = model.forward(pair.factual_ids, overrides).capture
        elapsed = time.perf_counter() - start

        _, cf_layers = reference_forward(model, pair.counterfactual_ids)
        k_cf, v_cf = cf_layers[0]["k"], cf_layers[0]["v"]
        ref_logits, ref_layers = reference_forward(
            model, pair.factual_ids,
            k_repl={0: k_cf} if "K" in targets else None,
            v_repl={0: v_cf} if "V" in targets else None,
        )
        # attention output per head, rebuilt from the captured weights and values
        G = model.cfg.group_size
        dh = model.cfg.d_head
        ours = np.concatenate([cap.attn[0, h] @ cap.v[0, h // G] for h in range(model.cfg.n_heads)], axis=-1)
        assert np.abs(ours - ref_layers[0]["attn_out"]).max() < 1e-5
        assert np.abs(outcome.swapped_logits - ref_logits[-1]).max() < 1e-5
        # the brute-force routine itself equals softmax(Q_f K_cf^T / sqrt(d)) V for the last query
        q = ref_layers[0]["q"][0, -1]
        kk = k_cf[0] if "K" in targets else ref_layers[0]["k"][0]
        vv = v_cf[0] if "V" in targets else ref_layers[0]["v"][0]
        s = kk @ q / np.sqrt(dh)
        w = np.exp(s - s.max())
        direct = (w / w.sum()) @ vv
        assert np.abs(direct - ref_layers[0]["attn_out"][-1, :dh]).max() < 1e-10
        assert elapsed < 1.0

    @pytest.mark.parametrize("targets", [("K",), ("V",), ("K", "V")])
    def test_self_swap_bit_exact(self, vocab, targets):
        model = _model(vocab, 2, seed=3)
        ids = [BOS] + vocab.encode("The capital of Doria is")
        pair = FactPair(ids, ids, "Mira", "Tusk")
        o = run_swap(model, vocab, SwapSpec(pair, targets), n_new=5)
        assert o.swapped_gen == o.baseline_gen
        assert np.array_equal(o.swapped_logits, o.baseline_logits)
        assert o.delta_logit == 0.0
        assert o.perplexity_overhead == 0.0

    def test_kv_swap_reproduces_counterfactual_first_token(self, vocab):
        """Replacing every layer's K and V makes the last prompt position identical to the cf run."""
        model = _model(vocab, 2, seed=5)
        pair = _pair(vocab)
        o = run_swap(model, vocab, SwapSpec(pair, ("K", "V")), n_new=1)
        cf_logits = model.forward(pair.counterfactual_ids).logits[-1]
        np.testing.assert_allclose(o.swapped_logits, cf_logits, atol=1e-5)
        assert o.swapped_gen == model.generate(pair.counterfactual_ids, 1)

    def test_revert_after_prompt(self, vocab):
        model = _model(vocab, 1, seed=6)
        pair = _pair(vocab)
        ov = swap_overrides(model, SwapSpec(pair, ("K",)))
        longer = pair.factual_ids + [5, 6]
        cap = model.forward(longer, ov).capture
        P = len(pair.factual_ids)
        assert np.array_equal(cap.k[:, :, P:], cap.k_native[:, :, P:])
        assert not np.array_equal(cap.k[:, :, :P], cap.k_native[:, :, :P])

    def test_delta_logit_convention(self, vocab):
        model = _model(vocab, 1, seed=7)
        pair = _pair(vocab)
        o = run_swap(model, vocab, SwapSpec(pair, ("V",)))
        tok = vocab.encode(" Tusk")[0]
        assert o.delta_logit == pytest.approx(float(o.swapped_logits[tok] - o.baseline_logits[tok]))

    def test_default_length_spells_out_targets(self, vocab):
        model = _model(vocab, 1, seed=8)
        pair = _pair(vocab)
        o = run_swap(model, vocab, SwapSpec(pair, ("V",)))
        want = max(len(vocab.encode(" Mira")), len(vocab.encode(" Tusk"))) + 1
        assert target_budget(vocab, "Mira", "Tusk") == want
        assert len(o.baseline_gen) == len(o.swapped_gen) == want

    def test_length_mismatch(self, vocab):
        pair = FactPair([BOS, 5, 6], [BOS, 5], "Mira", "Tusk")
        with pytest.raises(ContractError):
            SwapSpec(pair)

    def test_targets_validated(self, vocab):
        with pytest.raises(ContractError):
            SwapSpec(_pair(vocab), ("Q",))
        with pytest.raises(ContractError):
            SwapSpec(_pair(vocab), ())


def _window(vocab, text, label=" at noon."):
    return WindowExample(vocab.encode(text), vocab.encode(label), "b", 0, 0, len(text))


class TestPerturb:
    def test_empty_keywords_untouched(self, vocab):
        model = _model(vocab, 2)
        w = _window(vocab, "Alice met the Rabbit near Doria")
        o = run_perturb(model, vocab, w, PerturbSpec.of([], Scope.everything(model.cfg)))
        assert o.untouched and o.perturbed.ids == o.baseline.ids

    def test_keyword_positions_cover_subwords(self, vocab):
        ids = vocab.encode("Alice met the Rabbit near Doria")
        pos, found = keyword_positions(vocab, ids, {"rabbit", "doria", "absent"})
        assert found == ["doria", "rabbit"]
        spans = {s.word: s.token_range for s in vocab.word_spans(vocab.decode(ids), ids)}
        expect = sorted(list(range(*spans["rabbit"])) + list(range(*spans["doria"])))
        assert sorted(pos) == expect

    def test_scoped_logits_to_keyword_are_zero(self, vocab):
        model = _model(vocab, 2)
        w = _window(vocab, "Alice met the Rabbit near Doria")
        scope = Scope.heads(model.cfg, [(1, 1)])
        pos, _ = keyword_positions(vocab, w.input_ids, {"rabbit"})
        cap = model.forward(w.input_ids, [zero_keys(pos, scope)]).capture
        G = model.cfg.group_size
        for h in range(model.cfg.n_heads):
            col = cap.scores[1, h][:, pos]
            assert np.all(col == 0) == (h // G == 1)

    def test_perturbation_persists_into_decoding(self, vocab):
        model = _model(vocab, 2, seed=2)
        w = _window(vocab, "Alice met the Rabbit near Doria")
        o = run_perturb(model, vocab, w, PerturbSpec.of(["rabbit"], Scope.everything(model.cfg)))
        pos, _ = keyword_positions(vocab, w.input_ids, {"rabbit"})
        ov = [zero_keys(pos, Scope.everything(model.cfg))]
        expect = model.generate(w.input_ids, len(w.label_ids), ov)
        assert o.perturbed.ids == expect

    def test_matches_reference_zeroing(self, vocab):
        model = _model(vocab, 2, seed=4)
        w = _window(vocab, "Alice met the Rabbit near Doria")
        pos, _ = keyword_positions(vocab, w.input_ids, {"doria"})
        ours = model.forward(w.input_ids, [zero_keys(pos, Scope.heads(model.cfg, [(0, 0)]))]).logits
        ref, _ = reference_forward(model, w.input_ids, k_zero={0: [(0, p) for p in pos]})
        assert np.abs(ours - ref).max() < 1e-4


class TestRandomControl:
    def test_zero_count(self, vocab):
        w = _window(vocab, "Alice met the Rabbit near Doria")
        assert random_control(vocab, w, ["doria"], 0, 1) == (set(), False)

    def test_disjoint_and_sized(self, vocab):
        w = _window(vocab, "Alice met the Rabbit near Doria")
        for seed in range(20):
            words, short = random_control(vocab, w, ["doria", "rabbit"], 2, seed)
            assert len(words) == 2 and not short
            assert not words & {"doria", "rabbit"}

    def test_same_seed_same_sample(self, vocab):
        w = _window(vocab, "Alice met the Rabbit near Doria")
        assert random_control(vocab, w, [], 3, 9) == random_control(vocab, w, [], 3, 9)

    def test_too_few_candidates_flagged(self, vocab):
        w = _window(vocab, "Alice met Doria")
        words, short = random_control(vocab, w, ["doria"], 5, 0)
        assert words == {"alice", "met"} and short

    def test_item_seed_stable(self):
        assert item_seed(0, 3) == item_seed(0, 3)
        assert item_seed(0, 3) != item_seed(0, 4)
        assert item_seed(0, 3) != item_seed(1, 3)
