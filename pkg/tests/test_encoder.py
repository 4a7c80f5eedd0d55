import math

import numpy as np
import pytest

from pmdkg.encoder import (
    BiEncoder,
    EncoderConfig,
    as_leaves,
    count_bi_encoder_params,
    count_params,
    encode,
    forward,
    init_bi_encoder,
    init_params,
    layer_map,
    param_shapes,
    select_bi_encoder_layers,
    select_layers,
)
from pmdkg.text import PAD_ID, SequenceBatch

from gradcheck import full_loss_gradcheck, random_batch


def reference_forward(w, ids, attention, heads):
    """Loop-based single-layer encoder written independently of the tensor engine."""
    from scipy.special import erf

    def ln(v, g, b):
        mu = v.mean()
        var = ((v - mu) ** 2).mean()
        return (v - mu) / math.sqrt(var + 1e-12) * g + b

    b, t = ids.shape
    d = w["tok_emb"].shape[1]
    dh = d // heads
    out = np.zeros((b, t, d))
    for n in range(b):
        x = np.array([ln(w["tok_emb"][ids[n, i]] + w["pos_emb"][i], w["emb_norm.gain"], w["emb_norm.shift"])
                      for i in range(t)])
        p = "layers.0."
        q = x @ w[p + "attn.q.weight"] + w[p + "attn.q.bias"]
        k = x @ w[p + "attn.k.weight"] + w[p + "attn.k.bias"]
        v = x @ w[p + "attn.v.weight"] + w[p + "attn.v.bias"]
        ctx = np.zeros((t, d))
        for h in range(heads):
            sl = slice(h * dh, (h + 1) * dh)
            for i in range(t):
                logits = [q[i, sl] @ k[j, sl] / math.sqrt(dh) for j in range(t) if attention[n, j]]
                keys = [j for j in range(t) if attention[n, j]]
                m = max(logits)
                ws = [math.exp(s - m) for s in logits]
                z = sum(ws)
                ctx[i, sl] = sum(wj / z * v[j, sl] for wj, j in zip(ws, keys))
        a = ctx @ w[p + "attn.o.weight"] + w[p + "attn.o.bias"]
        x = np.array([ln(x[i] + a[i], w[p + "attn_norm.gain"], w[p + "attn_norm.shift"]) for i in range(t)])
        hdn = x @ w[p + "ffn.in.weight"] + w[p + "ffn.in.bias"]
        hdn = hdn * 0.5 * (1 + erf(hdn / math.sqrt(2)))
        f = hdn @ w[p + "ffn.out.weight"] + w[p + "ffn.out.bias"]
        out[n] = np.array([ln(x[i] + f[i], w[p + "ffn_norm.gain"], w[p + "ffn_norm.shift"]) for i in range(t)])
    return out


def hand_count(V, P, d, f, L):
    # embeddings + embedding norm, then per layer: q,k,v,o (+bias), two norms, two ffn projections
    emb = V * d + P * d + d + d
    per_layer = (d * d + d) * 4 + (d + d) * 2 + (d * f + f) + (f * d + d)
    return emb + L * per_layer


class TestForward:
    def test_matches_reference_one_layer(self, rng):
        config = EncoderConfig(layers=1, hidden=8, heads=2, ff=16, vocab_size=20, max_len=6, dropout=0.0)
        params = init_params(config, 3, dtype=np.float64)
        for name, value in params.tensors.items():
            value += rng.normal(scale=0.3, size=value.shape)
        batch = random_batch(rng, 3, 6, 20)
        out = encode(params, batch)
        ref = reference_forward(params.tensors, batch.ids, batch.attention, 2)
        np.testing.assert_allclose(out.features.data, ref, rtol=1e-10, atol=1e-10)
        att = batch.attention.astype(float)
        pooled = (ref * att[:, :, None]).sum(1) / att.sum(1, keepdims=True)
        np.testing.assert_allclose(out.pooled.data, pooled, rtol=1e-10, atol=1e-12)

    def test_padding_does_not_change_real_positions(self, rng):
        config = EncoderConfig(layers=2, hidden=16, heads=4, ff=32, vocab_size=30, max_len=12, dropout=0.0)
        params = init_params(config, 0, dtype=np.float64)
        short = random_batch(rng, 2, 6, 30)
        ids = np.full((2, 12), PAD_ID)
        ids[:, :6] = short.ids
        att = np.zeros((2, 12), dtype=np.int8)
        att[:, :6] = short.attention
        longer = SequenceBatch(ids, att, np.zeros_like(att))
        a, b = encode(params, short), encode(params, longer)
        real = short.attention.astype(bool)
        np.testing.assert_allclose(a.features.data[real], b.features.data[:, :6][real], atol=1e-12)
        np.testing.assert_allclose(a.pooled.data, b.pooled.data, atol=1e-12)

    def test_cls_pooling(self, rng):
        config = EncoderConfig(layers=1, hidden=8, heads=2, ff=16, vocab_size=20, max_len=6, pooling="cls")
        out = encode(init_params(config, 1), random_batch(rng, 2, 6, 20))
        np.testing.assert_array_equal(out.pooled.data, out.features.data[:, 0])

    def test_dropout_only_with_rng(self, rng):
        config = EncoderConfig(layers=1, hidden=8, heads=2, ff=16, vocab_size=20, max_len=6, dropout=0.5)
        params = init_params(config, 1)
        batch = random_batch(rng, 2, 6, 20)
        leaves = as_leaves(params)
        plain = forward(config, leaves, batch).features.data
        np.testing.assert_array_equal(plain, encode(params, batch).features.data)
        noisy = forward(config, leaves, batch, np.random.default_rng(0)).features.data
        assert not np.array_equal(plain, noisy)

    def test_rejects_out_of_range_ids(self):
        config = EncoderConfig(layers=1, hidden=8, heads=2, ff=16, vocab_size=20, max_len=6)
        bad = SequenceBatch(np.array([[0, 25, 1]]), np.ones((1, 3), np.int8), np.zeros((1, 3), np.int8))
        with pytest.raises(ValueError):
            encode(init_params(config, 0), bad)


class TestGradient:
    def test_full_loss_finite_differences(self):
        errors, analytic, _ = full_loss_gradcheck(n_coords=40, seed=5)
        assert (np.abs(analytic) > 1e-6).sum() >= 20
        assert errors.max() < 1e-3


class TestParameterCount:
    @pytest.mark.parametrize(
        "V,P,d,h,f,L",
        [(10, 8, 4, 1, 8, 1), (50, 16, 8, 2, 16, 2), (100, 32, 16, 4, 64, 3), (7, 9, 6, 3, 5, 4), (1000, 64, 32, 8, 37, 6)],
    )
    def test_closed_form_matches_hand_expansion_and_shapes(self, V, P, d, h, f, L):
        config = EncoderConfig(layers=L, hidden=d, heads=h, ff=f, vocab_size=V, max_len=P)
        assert count_params(config) == hand_count(V, P, d, f, L)
        assert count_params(config) == sum(math.prod(s) for s in param_shapes(config).values())
        assert count_bi_encoder_params(config) == init_bi_encoder(config, 0).num_params()

    def test_strictly_decreasing_with_depth(self):
        base = EncoderConfig(layers=12, hidden=32, heads=4, ff=64, vocab_size=100, max_len=16)
        counts = [count_bi_encoder_params(base.with_layers(n)) for n in (12, 9, 6, 3)]
        assert all(a > b for a, b in zip(counts, counts[1:]))

    def test_shared_token_embeddings(self):
        c = EncoderConfig(layers=2, hidden=8, heads=2, ff=16, vocab_size=50, max_len=8)
        assert count_bi_encoder_params(c) - count_bi_encoder_params(c, share_token_embeddings=True) == 400


class TestInit:
    def test_deterministic_and_bounded(self):
        c = EncoderConfig(layers=2, hidden=16, heads=2, ff=32, vocab_size=40, max_len=8)
        a, b = init_params(c, 9), init_params(c, 9)
        for name in a.tensors:
            np.testing.assert_array_equal(a.tensors[name], b.tensors[name])
        w = a.tensors["layers.0.ffn.in.weight"]
        assert np.abs(w).max() <= 0.04 and 0.012 < w.std() < 0.02
        assert (a.tensors["layers.1.attn.q.bias"] == 0).all()
        assert (a.tensors["emb_norm.gain"] == 1).all()
        assert not np.array_equal(init_params(c, 10).tensors["tok_emb"], a.tensors["tok_emb"])

    def test_towers_are_not_tied(self):
        m = init_bi_encoder(EncoderConfig(layers=1, hidden=8, heads=2, ff=8, vocab_size=20, max_len=8), 0)
        assert not np.array_equal(m.hr.tensors["tok_emb"], m.tail.tensors["tok_emb"])


class TestLayerSelection:
    def test_maps_for_twelve_layers(self):
        assert layer_map(12, 3) == [3, 7, 11]
        assert layer_map(12, 6) == [1, 3, 5, 7, 9, 11]
        assert layer_map(12, 9) == [1, 2, 3, 5, 6, 7, 9, 10, 11]
        assert layer_map(4, 4) == [0, 1, 2, 3]
        assert layer_map(4, 1) == [3]

    def test_rejects_growth(self):
        with pytest.raises(ValueError):
            layer_map(3, 4)

    def test_copies_selected_layers_verbatim(self):
        t = EncoderConfig(layers=12, hidden=8, heads=2, ff=8, vocab_size=20, max_len=8)
        teacher = init_bi_encoder(t, 0)
        student = select_bi_encoder_layers(teacher, t.with_layers(3))
        for j, src in enumerate([3, 7, 11]):
            for tower in ("hr", "tail"):
                s, te = student.tower(tower).tensors, teacher.tower(tower).tensors
                np.testing.assert_array_equal(s[f"layers.{j}.ffn.in.weight"], te[f"layers.{src}.ffn.in.weight"])
        np.testing.assert_array_equal(student.hr.tensors["tok_emb"], teacher.hr.tensors["tok_emb"])
        student.hr.tensors["tok_emb"][0, 0] += 1.0
        assert student.hr.tensors["tok_emb"][0, 0] != teacher.hr.tensors["tok_emb"][0, 0]

    def test_width_change_refused(self):
        t = EncoderConfig(layers=4, hidden=8, heads=2, ff=8, vocab_size=20, max_len=8)
        with pytest.raises(ValueError):
            select_layers(init_params(t, 0), EncoderConfig(layers=2, hidden=16, heads=2, ff=8, vocab_size=20, max_len=8))


class TestBiEncoder:
    def test_named_round_trip(self):
        m = init_bi_encoder(EncoderConfig(layers=1, hidden=8, heads=2, ff=8, vocab_size=20, max_len=8), 0)
        again = BiEncoder.from_named(m.config, m.named_tensors())
        assert again.named_tensors().keys() == m.named_tensors().keys()

    def test_bad_config_values(self):
        with pytest.raises(ValueError):
            EncoderConfig(hidden=10, heads=3)
        with pytest.raises(ValueError):
            EncoderConfig(pooling="max")
