import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pmdkg.text import (
    CLS_ID,
    MASK_ID,
    PAD_ID,
    SEP_ID,
    SPECIALS,
    SequenceBatch,
    SequenceCache,
    Vocabulary,
    apply_mask,
    build_hr_sequence,
    build_tail_sequence,
    build_vocab,
    build_vocab_from_texts,
    mask_sequences,
    tokenize,
)

from conftest import load


def binomial_interval(n: int, p: float, mass: float = 0.01) -> tuple[int, int]:
    """Widest [lo, hi] with at most mass/2 probability in each excluded tail (exact pmf sums)."""
    log_c = math.lgamma(n + 1)
    pmf = [
        math.exp(log_c - math.lgamma(k + 1) - math.lgamma(n - k + 1) + k * math.log(p) + (n - k) * math.log1p(-p))
        for k in range(n + 1)
    ]
    lower_tail, lo = 0.0, 0
    while lower_tail + pmf[lo] <= mass / 2:
        lower_tail += pmf[lo]
        lo += 1
    upper_tail, hi = 0.0, n
    while upper_tail + pmf[hi] <= mass / 2:
        upper_tail += pmf[hi]
        hi -= 1
    return lo, hi


class TestVocabulary:
    def test_min_freq(self):
        v = build_vocab_from_texts(["cat cat dog"], min_freq=2)
        assert "cat" in v and "dog" not in v

    def test_specials_reserved(self, synthetic_graph):
        v = build_vocab(synthetic_graph)
        assert v.itos[:5] == list(SPECIALS)
        assert (CLS_ID, SEP_ID, PAD_ID, MASK_ID) == (0, 1, 2, 3)

    def test_cap_keeps_most_frequent(self):
        words = [f"w{i:03d}" for i in range(100)]
        texts = [" ".join(w for w in words[: i + 1]) for i in range(100)]  # w000 most frequent
        v = build_vocab_from_texts(texts, min_freq=1, max_size=55)
        assert len(v) == 55
        assert v.itos[5:] == words[:50]

    def test_empty_corpus(self):
        with pytest.raises(ValueError):
            build_vocab_from_texts(["", "   "])

    def test_unknown_token_maps_to_unk(self):
        v = build_vocab_from_texts(["alpha beta"])
        assert v.encode("alpha gamma") == [v.stoi["alpha"], 4]

    def test_save_load(self, tmp_path, synthetic_graph):
        v = build_vocab(synthetic_graph)
        v.save(tmp_path / "vocab.txt")
        lines = (tmp_path / "vocab.txt").read_text(encoding="utf-8").splitlines()
        assert lines[0] == v.itos[5]
        assert Vocabulary.load(tmp_path / "vocab.txt").itos == v.itos

    def test_tokenizer_lowercases_and_splits(self):
        assert tokenize("Hello, World_wide!") == ["hello", ",", "world", "wide", "!"]


class TestSequences:
    @pytest.fixture
    def toy(self, toy_paths):
        g = load(toy_paths)
        return g, build_vocab(g)

    def test_hr_layout_empty_description(self, toy):
        g, v = toy
        fish = g.entity_index()["fish"]
        seq = build_hr_sequence(g, fish, 0, v, 12)
        expected = [CLS_ID, v.stoi["fish"], SEP_ID, v.stoi["is"], v.stoi["a"], SEP_ID]
        assert seq.ids[:6].tolist() == expected
        assert (seq.ids[6:] == PAD_ID).all()
        assert seq.attention.tolist() == [1] * 6 + [0] * 6

    def test_tail_layout_empty_description(self, toy):
        g, v = toy
        seq = build_tail_sequence(g, g.entity_index()["fish"], v, 8)
        assert seq.ids.tolist() == [CLS_ID, v.stoi["fish"], SEP_ID] + [PAD_ID] * 5

    def test_truncation_keeps_name_and_relation(self, toy):
        g, v = toy
        dog = g.entity_index()["dog"]
        seq = build_hr_sequence(g, dog, 0, v, 8)
        ids = seq.ids.tolist()
        assert ids[:2] == [CLS_ID, v.stoi["dog"]]
        assert ids[-3:] == [v.stoi["is"], v.stoi["a"], SEP_ID]
        assert ids.count(SEP_ID) == 2
        tail = build_tail_sequence(g, dog, v, 8)
        assert tail.ids[1] == v.stoi["dog"]
        assert tail.ids.tolist().count(SEP_ID) == 1

    def test_max_len_too_small(self, toy):
        g, v = toy
        with pytest.raises(ValueError):
            build_hr_sequence(g, 0, 0, v, 7)

    def test_invariants_on_every_synthetic_sequence(self, synthetic_graph, synthetic_vocab):
        cache = SequenceCache(synthetic_graph, synthetic_vocab, 24)
        for h, r, _ in synthetic_graph.splits["train"]:
            s = cache.hr(h, r)
            assert len(s) == 24 and s.ids[0] == CLS_ID
            assert s.ids.tolist().count(SEP_ID) == 2
            assert ((s.attention == 0) <= (s.ids == PAD_ID)).all()
            assert ((s.maskable == 1) <= (s.attention == 1)).all()
        for e in range(synthetic_graph.num_entities):
            s = cache.tail(e)
            assert s.ids.tolist().count(SEP_ID) == 1


def _batch(rng, b=16, t=20):
    ids = rng.integers(5, 50, size=(b, t))
    lengths = rng.integers(3, t + 1, size=b)
    att = (np.arange(t)[None, :] < lengths[:, None]).astype(np.int8)
    ids[:, 0] = CLS_ID
    ids[np.arange(b), lengths - 1] = SEP_ID
    ids[att == 0] = PAD_ID
    maskable = (att.astype(bool) & (ids != CLS_ID) & (ids != SEP_ID)).astype(np.int8)
    return SequenceBatch(ids, att, maskable)


class TestMasking:
    def test_rate_zero_is_identity(self, rng):
        b = _batch(rng)
        m = apply_mask(b, b, 0.0, rng)
        assert np.array_equal(m.hr.ids, b.ids) and m.num_masked == 0
        assert all(not p for p in m.masked_positions("hr"))

    def test_rate_one_masks_every_eligible_token(self, rng):
        b = _batch(rng)
        m = apply_mask(b, b, 1.0, rng)
        assert (m.hr.ids[b.maskable == 1] == MASK_ID).all()
        assert np.array_equal(m.hr_masked, b.maskable.astype(bool))

    def test_out_of_range(self, rng):
        b = _batch(rng)
        for bad in (-0.1, 1.5):
            with pytest.raises(ValueError):
                apply_mask(b, b, bad, rng)

    def test_interval_oracle(self):
        from scipy.stats import binom

        exact = binomial_interval(1000, 0.2)
        assert exact == tuple(int(x) for x in binom.interval(0.99, 1000, 0.2))
        # the normal approximation rounded outward gives [167, 233]; the exact interval sits inside it
        assert 167 <= exact[0] and exact[1] <= 233

    def test_count_over_1000_eligible_tokens(self):
        lo, hi = binomial_interval(1000, 0.2)
        ids = np.full((1, 1002), 10)
        ids[0, 0], ids[0, -1] = CLS_ID, SEP_ID
        att = np.ones((1, 1002), dtype=np.int8)
        maskable = att.copy()
        maskable[0, [0, -1]] = 0
        b = SequenceBatch(ids, att, maskable)
        _, chosen = mask_sequences(b, 0.2, np.random.default_rng(0))
        assert lo <= chosen.sum() <= hi

    @pytest.mark.parametrize("rate", [0.05, 0.1, 0.2, 0.5])
    def test_empirical_fraction_over_many_tokens(self, rate):
        rng = np.random.default_rng(int(rate * 100))
        batches = [_batch(rng, 64, 32) for _ in range(12)]
        eligible = sum(int(b.maskable.sum()) for b in batches)
        assert eligible >= 10_000
        masked = sum(int(mask_sequences(b, rate, rng)[1].sum()) for b in batches)
        lo, hi = binomial_interval(eligible, rate)
        assert lo <= masked <= hi

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(0.0, 1.0))
    def test_only_maskable_positions_touched(self, seed, rate):
        rng = np.random.default_rng(seed)
        b = _batch(rng)
        m = apply_mask(b, b, rate, rng)
        for batch, chosen in ((m.hr, m.hr_masked), (m.tail, m.tail_masked)):
            assert not (chosen & (b.maskable == 0)).any()
            assert np.array_equal(batch.ids[~chosen], b.ids[~chosen])
            assert (batch.ids[chosen] == MASK_ID).all()

    def test_seed_reproducible(self):
        b = _batch(np.random.default_rng(3))
        one = apply_mask(b, b, 0.3, np.random.default_rng(11))
        two = apply_mask(b, b, 0.3, np.random.default_rng(11))
        assert np.array_equal(one.hr.ids, two.hr.ids) and np.array_equal(one.tail_masked, two.tail_masked)

    def test_tail_masking_switch(self, rng):
        b = _batch(rng)
        m = apply_mask(b, b, 0.5, rng, mask_tail=False)
        assert not m.tail_masked.any() and np.array_equal(m.tail.ids, b.ids)

