"""
Tests for the attention variants: softmax/mask invariants, RoPE properties,
variant equivalences, entropy and the hand-written backward pass.
"""
import math
import unittest

import numpy as np

from attention import (
    weight_shapes,
    init_weights,
    apply_rope,
    rope_rotate,
    attention_forward,
    attention_forward_batch,
    attention_backward,
    attention_entropy,
    uniform_entropy_bits,
)
from errors import NonFiniteError, ShapeMismatchError, InvalidConfigError
from models import Variant, AttentionConfig
from training_engine import gradient_check

SMALL = dict(d_model=32, n_heads=4, d_k=8, d_latent=16, seq_len=12)


def _config(variant, **overrides):
    values = dict(SMALL, rope_frac=0.5)
    values.update(overrides)
    return AttentionConfig(variant=variant, **values)


class TestSoftmaxInvariants(unittest.TestCase):
    """Row sums, causal zeros and entropy range for every variant"""

    def setUp(self):
        self.inputs = np.random.default_rng(5).standard_normal((12, 32))

    def test_rows_and_mask(self):
        """Rows sum to one and future keys get exactly zero weight"""
        for variant in Variant:
            config = _config(variant)
            out, probs = attention_forward(init_weights(config, 9), self.inputs, config)
            self.assertEqual(out.shape, (12, 32))
            self.assertEqual(probs.shape, (4, 12, 12))
            np.testing.assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-9)
            future = np.triu(np.ones((12, 12), dtype=bool), k=1)
            self.assertTrue(np.all(probs[:, future] == 0.0), variant)

    def test_entropy_range(self):
        """0 <= entropy <= log2(seq_len)"""
        for variant in Variant:
            config = _config(variant)
            _, probs = attention_forward(init_weights(config, 9, scale=3.0), self.inputs, config)
            entropy = attention_entropy(probs)
            self.assertGreaterEqual(entropy, 0.0)
            self.assertLessEqual(entropy, math.log2(12))

    def test_non_causal(self):
        """Without the mask every key can receive weight"""
        config = _config(Variant.MHA, causal=False)
        _, probs = attention_forward(init_weights(config, 9), self.inputs, config)
        self.assertTrue(np.all(probs > 0))

    def test_sequence_too_long(self):
        """Inputs longer than seq_len are refused"""
        config = _config(Variant.MHA)
        with self.assertRaises(ShapeMismatchError):
            attention_forward(init_weights(config, 9), np.zeros((13, 32)), config)

    def test_non_finite_logits_report_head(self):
        """Overflowing logits name the head"""
        config = _config(Variant.MHA)
        weights = init_weights(config, 9)
        weights["wq"][8:16] = 1e300
        weights["wk"][8:16] = 1e300
        with np.errstate(all="ignore"):
            with self.assertRaises(NonFiniteError) as ctx:
                attention_forward_batch(weights, self.inputs[None], config)
        self.assertEqual(ctx.exception.head, 1)
        self.assertEqual(ctx.exception.exit_code, 4)


class TestRope(unittest.TestCase):
    """Rotary embedding properties"""

    def setUp(self):
        rng = np.random.default_rng(21)
        self.q = rng.standard_normal(16)
        self.k = rng.standard_normal(16)

    def test_position_zero_identity(self):
        """Position 0 is the identity rotation"""
        np.testing.assert_array_equal(rope_rotate(self.q, 0), self.q)

    def test_norm_preserved(self):
        """Rotation preserves the vector norm"""
        for position in (1, 7, 500, 10 ** 6):
            rotated = rope_rotate(self.q, position)
            self.assertLessEqual(abs(np.linalg.norm(rotated) - np.linalg.norm(self.q)),
                                 1e-12 * np.linalg.norm(self.q))

    def test_relative_shift_invariance(self):
        """q.k depends only on the position offset"""
        base = np.dot(rope_rotate(self.q, 3), rope_rotate(self.k, 10))
        for shift in (1, 17, 250):
            shifted = np.dot(rope_rotate(self.q, 3 + shift), rope_rotate(self.k, 10 + shift))
            self.assertLessEqual(abs(shifted - base), 1e-9)

    def test_inverse_rotation(self):
        """inverse=True undoes the forward rotation"""
        x = np.random.default_rng(4).standard_normal((2, 3, 9, 8))
        positions = np.arange(9)
        back = apply_rope(apply_rope(x, positions, 10000.0), positions, 10000.0, inverse=True)
        np.testing.assert_allclose(back, x, atol=1e-12)

    def test_interleaved_pairs(self):
        """Pair j rotates coordinates (2j, 2j+1) by position * base^(-2j/d)"""
        x = np.array([1.0, 0.0, 1.0, 0.0])
        rotated = rope_rotate(x, 1, base=100.0)
        np.testing.assert_allclose(rotated, [math.cos(1), math.sin(1), math.cos(0.1), math.sin(0.1)], atol=1e-15)

    def test_odd_dimension(self):
        """Odd lengths cannot be paired"""
        with self.assertRaises(ShapeMismatchError):
            rope_rotate(np.ones(3), 1)


class TestVariants(unittest.TestCase):
    """Weight layouts and variant equivalences"""

    def test_decoupled_zero_budget_equals_nope(self):
        """Decoupled RoPE with rope_frac 0 is bit-identical to NoPE"""
        dec = _config(Variant.MLA_DEC, rope_frac=0.0)
        nope = _config(Variant.MLA_NOPE)
        dec_weights = init_weights(dec, 1234)
        nope_weights = init_weights(nope, 1234)
        self.assertEqual(sorted(dec_weights), sorted(nope_weights))
        for name in dec_weights:
            np.testing.assert_array_equal(dec_weights[name], nope_weights[name])

        inputs = np.random.default_rng(8).standard_normal((12, 32))
        dec_out, dec_probs = attention_forward(dec_weights, inputs, dec)
        nope_out, nope_probs = attention_forward(nope_weights, inputs, nope)
        np.testing.assert_array_equal(dec_out, nope_out)
        np.testing.assert_array_equal(dec_probs, nope_probs)

    def test_weight_shapes(self):
        """Per-variant tensor inventory"""
        self.assertEqual(set(weight_shapes(_config(Variant.MHA))), {"wq", "wk", "wv", "wo"})
        self.assertEqual(set(weight_shapes(_config(Variant.MLA_PRE))), {"w_down", "wq_up", "wk_up", "wv", "wo"})
        dec = weight_shapes(_config(Variant.MLA_DEC))
        self.assertEqual(dec["wq_up"], (16, 16))
        self.assertEqual(dec["wq_rope"], (16, 16))
        self.assertEqual(dec["wk_rope"], (4, 16))

    def test_init_deterministic(self):
        """Same (config, seed, layer) gives the same weights; layers differ"""
        config = _config(Variant.MHA)
        first = init_weights(config, 5, layer=1)
        np.testing.assert_array_equal(first["wq"], init_weights(config, 5, layer=1)["wq"])
        self.assertFalse(np.array_equal(first["wq"], init_weights(config, 5, layer=0)["wq"]))

    def test_init_scale(self):
        """std is scale / sqrt(fan_in)"""
        config = AttentionConfig(variant=Variant.MHA, d_model=256, n_heads=8, d_k=32)
        wq = init_weights(config, 0, scale=2.0)["wq"]
        self.assertAlmostEqual(float(wq.std()), 2.0 / 16.0, delta=0.005)

    def test_missing_weight(self):
        """attention_forward validates the weight dict"""
        config = _config(Variant.MHA)
        weights = init_weights(config, 0)
        del weights["wk"]
        with self.assertRaises(InvalidConfigError):
            attention_forward(weights, np.zeros((4, 32)), config)

    def test_prerope_rotates_latent(self):
        """PreRoPE and NoPE agree at position 0 and differ afterwards"""
        pre = _config(Variant.MLA_PRE)
        nope = _config(Variant.MLA_NOPE)
        weights = init_weights(pre, 3)
        inputs = np.random.default_rng(0).standard_normal((12, 32))
        pre_out, _ = attention_forward(weights, inputs, pre)
        nope_out, _ = attention_forward(weights, inputs, nope)
        np.testing.assert_allclose(pre_out[0], nope_out[0], atol=1e-12)
        self.assertFalse(np.allclose(pre_out[5:], nope_out[5:]))


class TestEntropy(unittest.TestCase):
    """Attention entropy diagnostic"""

    def test_uniform_rows(self):
        """Uniform rows over 4 keys carry 2 bits"""
        self.assertAlmostEqual(attention_entropy(np.full((3, 4, 4), 0.25)), 2.0, places=12)

    def test_one_hot_rows(self):
        """Deterministic rows carry 0 bits"""
        self.assertEqual(attention_entropy(np.eye(5)[None]), 0.0)

    def test_rows_must_sum_to_one(self):
        """Rows off by more than 1e-6 are refused"""
        with self.assertRaises(InvalidConfigError):
            attention_entropy(np.full((1, 2, 2), 0.4))

    def test_uniform_reference(self):
        """Causal reference averages log2 of the visible keys"""
        self.assertEqual(uniform_entropy_bits(1), 0.0)
        self.assertAlmostEqual(uniform_entropy_bits(4), (0 + 1 + math.log2(3) + 2) / 4)
        self.assertEqual(uniform_entropy_bits(8, causal=False), 3.0)

    def test_small_init_is_near_uniform(self):
        """Random init at small scale stays within 10% of uniform entropy"""
        inputs = np.random.default_rng(12).standard_normal((4, 32, 64))
        reference = uniform_entropy_bits(32)
        for variant in Variant:
            config = AttentionConfig(variant=variant, d_model=64, seq_len=32)
            _, probs, _ = attention_forward_batch(init_weights(config, 77, scale=0.1), inputs, config)
            self.assertLessEqual(abs(attention_entropy(probs) - reference), 0.1 * reference, variant)


class TestBackward(unittest.TestCase):
    """Analytic gradients of a random linear readout of the attention output"""

    def test_gradients_match_finite_differences(self):
        """Weights and inputs, every variant"""
        rng = np.random.default_rng(31)
        for variant in Variant:
            config = _config(variant, seq_len=6)
            params = init_weights(config, 2)
            params["x"] = rng.standard_normal((2, 6, 32))
            readout = rng.standard_normal((2, 6, 32))

            def loss_fn(p):
                out, _, _ = attention_forward_batch(p, p["x"], config)
                return float(np.sum(out * readout))

            _, _, cache = attention_forward_batch(params, params["x"], config)
            d_x, grads = attention_backward(params, cache, readout, config)
            grads["x"] = d_x
            self.assertEqual(set(grads), set(params))
            error = gradient_check(loss_fn, params, grads, epsilon=1e-5, n_samples=120, seed=1)
            self.assertLessEqual(error, 1e-4, variant)


if __name__ == "__main__":
    unittest.main()
