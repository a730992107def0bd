import math

import numpy as np
import pytest

from peftner import autodiff as ad
from peftner.autodiff import Tensor, backward, grad_check, make_rng
from peftner.encoder import (
    ClassifierHead,
    Encoder,
    EncoderConfig,
    MlmHead,
    SequenceTooLong,
    classify_tokens,
    head_logits,
    load_backbone,
    make_classifier_head,
    mlm_logits,
    relative_buckets,
    save_backbone,
)


def small_config(**kw):
    defaults = dict(vocab_size=40, d_model=16, n_layers=2, n_heads=2, d_ff=32,
                    max_positions=256, dropout=0.1)
    defaults.update(kw)
    return EncoderConfig(**defaults)


class TestConfig:
    def test_head_divisibility(self):
        with pytest.raises(ValueError):
            EncoderConfig(vocab_size=10, d_model=10, n_heads=3)

    def test_max_positions_floor(self):
        with pytest.raises(ValueError):
            small_config(max_positions=128)

    def test_mode_validated(self):
        with pytest.raises(ValueError):
            small_config(attention_mode="rotary")

    def test_dict_roundtrip(self):
        cfg = small_config(attention_mode="disentangled")
        assert EncoderConfig.from_dict(cfg.to_dict()) == cfg


class TestForward:
    def test_output_shape(self):
        model = Encoder(small_config(), make_rng(0))
        hidden = model.encode(np.array([1, 5, 7, 20]))
        assert hidden.shape == (4, 16)

    def test_attention_rows_sum_to_one(self):
        for mode in ("standard", "disentangled"):
            model = Encoder(small_config(attention_mode=mode), make_rng(0))
            trace = {}
            model.encode(np.array([1, 5, 7, 20, 3]), trace=trace)
            for probs in trace["attn_probs"].values():
                np.testing.assert_allclose(probs.sum(axis=-1), np.ones((2, 5)), atol=1e-10)

    def test_deterministic_given_seed(self):
        a = Encoder(small_config(), make_rng(3)).encode(np.array([1, 2, 3])).data
        b = Encoder(small_config(), make_rng(3)).encode(np.array([1, 2, 3])).data
        np.testing.assert_array_equal(a, b)

    def test_dropout_train_deterministic_given_rng(self):
        model = Encoder(small_config(), make_rng(3))
        a = model.encode(np.array([1, 2, 3]), train=True, rng=make_rng(9)).data
        b = model.encode(np.array([1, 2, 3]), train=True, rng=make_rng(9)).data
        np.testing.assert_array_equal(a, b)

    def test_sequence_too_long(self):
        model = Encoder(small_config(), make_rng(0))
        with pytest.raises(SequenceTooLong):
            model.encode(np.zeros(257, dtype=int))

    def test_permutation_equivariance_with_positions_zeroed(self):
        model = Encoder(small_config(), make_rng(4))
        model.pos_embed.data[...] = 0.0
        ids = np.array([3, 9, 14, 22, 8, 30])
        perm = np.array([4, 2, 0, 5, 1, 3])
        base = model.encode(ids).data
        permuted = model.encode(ids[perm]).data
        np.testing.assert_allclose(permuted, base[perm], atol=1e-10)

    def test_positions_break_equivariance(self):
        model = Encoder(small_config(), make_rng(4))
        ids = np.array([3, 9, 14, 22])
        perm = np.array([1, 0, 3, 2])
        base = model.encode(ids).data
        permuted = model.encode(ids[perm]).data
        assert not np.allclose(permuted, base[perm], atol=1e-6)

    def test_batch_matches_single(self):
        model = Encoder(small_config(), make_rng(5))
        a = np.array([1, 2, 3, 4])
        b = np.array([7, 8])
        hidden, offsets = model.encode_batch([a, b])
        np.testing.assert_allclose(hidden.data[0:4], model.encode(a).data, atol=1e-12)
        np.testing.assert_allclose(hidden.data[4:6], model.encode(b).data, atol=1e-12)
        assert offsets == [0, 4]


class TestDisentangled:
    def test_zeroed_relative_tables_give_scaled_content_attention(self):
        cfg = small_config(attention_mode="disentangled", dropout=0.0)
        model = Encoder(cfg, make_rng(6))
        for layer in model.layers:
            layer.rel_embed.data[...] = 0.0
        ids = np.array([1, 5, 9, 13])
        trace = {}
        model.encode(ids, trace=trace)
        # recompute content-only scores for layer 0 by hand
        x = ad.embedding_lookup(model.tok_embed, ids)
        x = ad.layer_norm(x, model.emb_ln_gamma, model.emb_ln_beta).data
        layer = model.layers[0]
        q = x @ layer.query.weight.data.T + layer.query.bias.data
        k = x @ layer.key.weight.data.T + layer.key.bias.data
        d_head = cfg.d_head
        qh = q.reshape(4, 2, d_head).transpose(1, 0, 2)
        kh = k.reshape(4, 2, d_head).transpose(1, 0, 2)
        content = qh @ kh.transpose(0, 2, 1) / math.sqrt(d_head)
        expected = content * (math.sqrt(d_head) / math.sqrt(3 * d_head))
        np.testing.assert_allclose(trace["attn_scores"][(0, 0)], expected, atol=1e-12)

    def test_no_absolute_position_table(self):
        model = Encoder(small_config(attention_mode="disentangled"), make_rng(0))
        assert model.pos_embed is None
        assert any("rel_embed" in name for name, _ in model.base_parameters())

    def test_bucket_properties(self):
        k, max_pos = 8, 256
        delta = np.arange(-(max_pos - 1), max_pos)
        buckets = relative_buckets(delta, k, max_pos)
        assert buckets.min() >= 0 and buckets.max() <= 2 * k
        assert buckets[delta == 0][0] == k
        # symmetric around the center bucket
        np.testing.assert_array_equal(buckets[::-1], 2 * k - buckets)
        # monotone nondecreasing in the positive half
        pos_half = buckets[delta >= 0]
        assert (np.diff(pos_half) >= 0).all()
        # exact buckets in the linear region
        lin = k // 2
        np.testing.assert_array_equal(buckets[(delta >= 0) & (delta <= lin)], k + np.arange(lin + 1))


class TestHeads:
    def test_uniform_head_probabilities(self):
        head = ClassifierHead(Tensor(np.zeros((8, 3))), Tensor(np.zeros(3)), ["O", "B-X", "I-X"])
        probs = classify_tokens(Tensor(np.random.default_rng(0).normal(size=(5, 8))), head)
        np.testing.assert_allclose(probs.data, np.full((5, 3), 1 / 3), atol=1e-12)

    def test_bias_dominates_argmax(self):
        head = ClassifierHead(Tensor(np.zeros((8, 3))), Tensor(np.array([10.0, 0.0, 0.0])),
                              ["O", "B-X", "I-X"])
        probs = classify_tokens(Tensor(np.ones((4, 8))), head)
        assert (probs.data.argmax(axis=1) == 0).all()

    def test_rows_sum_to_one(self):
        rng = make_rng(7)
        head = make_classifier_head(8, ["O", "B-X", "I-X"], rng)
        probs = classify_tokens(Tensor(rng.standard_normal((6, 8))), head)
        np.testing.assert_allclose(probs.data.sum(axis=1), np.ones(6), atol=1e-12)

    def test_width_mismatch(self):
        head = make_classifier_head(8, ["O"], make_rng(0))
        with pytest.raises(ad.ShapeMismatch):
            classify_tokens(Tensor(np.zeros((2, 9))), head)

    def test_classifier_gradient_against_finite_differences(self):
        rng = make_rng(8)
        head = make_classifier_head(6, ["O", "B-X", "I-X"], rng)
        hidden = Tensor(rng.standard_normal((5, 6)))
        targets = np.array([0, 1, 2, 0, 1])

        def loss():
            logp = ad.log_softmax(head_logits(hidden, head))
            picked = ad.take_per_row(logp, targets[:, None])
            return ad.scale(ad.tsum(picked), -1.0 / 5)

        assert grad_check(loss, [head.W_cls, head.b_cls]) <= 1e-4

    def test_mlm_shape_and_tied_storage(self):
        model = Encoder(small_config(), make_rng(9))
        head = MlmHead.tied(model)
        hidden = model.encode(np.array([1, 2, 3]))
        logits = mlm_logits(hidden, head)
        assert logits.shape == (3, 40)
        # mutating the embedding row mutates the head column: same storage
        head.embedding.data[7, 0] = 123.0
        assert model.tok_embed.data[7, 0] == 123.0
        assert head.embedding is model.tok_embed


class TestEndToEndGradients:
    @pytest.mark.parametrize("mode", ["standard", "disentangled"])
    def test_encoder_grad_check(self, mode):
        cfg = EncoderConfig(vocab_size=12, d_model=8, n_layers=2, n_heads=2, d_ff=16,
                            max_positions=256, dropout=0.0, attention_mode=mode,
                            relative_position_buckets=4)
        model = Encoder(cfg, make_rng(10))
        for _, t in model.base_parameters():
            t.requires_grad = True
        ids = np.array([1, 5, 7, 9, 11])
        coeff = Tensor(make_rng(11).standard_normal((5, 8)))

        def loss():
            return ad.tsum(ad.mul(model.encode(ids), coeff))

        params = [t for _, t in model.base_parameters()]
        err = grad_check(loss, params, sample=6, rng=make_rng(12))
        assert err <= 1e-4, f"{mode}: {err}"


class TestCheckpoint:
    def test_roundtrip_bitwise(self, tmp_path):
        model = Encoder(small_config(), make_rng(13))
        path = tmp_path / "backbone.ckpt"
        save_backbone(model, path, provenance={"seed": 1, "stage": "test"})
        loaded, header = load_backbone(path)
        assert header["provenance"]["stage"] == "test"
        assert loaded.config == model.config
        for (na, a), (nb, b) in zip(model.base_parameters(), loaded.base_parameters()):
            assert na == nb
            np.testing.assert_array_equal(a.data, b.data)
        # saved bytes are reproducible
        save_backbone(loaded, tmp_path / "again.ckpt", provenance={"seed": 1, "stage": "test"})
        assert (tmp_path / "backbone.ckpt").read_bytes() == (tmp_path / "again.ckpt").read_bytes()

    def test_bad_magic_rejected(self, tmp_path):
        p = tmp_path / "junk.ckpt"
        p.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(ValueError):
            load_backbone(p)

    def test_forward_identical_after_reload(self, tmp_path):
        model = Encoder(small_config(), make_rng(14))
        save_backbone(model, tmp_path / "m.ckpt")
        loaded, _ = load_backbone(tmp_path / "m.ckpt")
        ids = np.array([2, 4, 6])
        np.testing.assert_array_equal(model.encode(ids).data, loaded.encode(ids).data)
