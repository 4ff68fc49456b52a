# attention.py
"""
Desk-scale attention variants with a hand-written backward pass.

Variants:
    MHA       per-head q, k, v from full projections; RoPE over each head's d_k
    MLA_PRE   latent c = W_down x; RoPE on c *before* the up-projections
    MLA_DEC   content q/k from the unrotated latent ((1 - rope_frac) * d_k per head)
              plus per-head query rope vectors and one key rope vector shared by all heads
    MLA_NOPE  MLA_PRE pathway with no rotation anywhere

Weights follow the (out_features, in_features) convention: y = x @ W.T.
Logits are scaled by 1/sqrt(d_k) for every variant; no biases, no dropout.
"""

import logging
import math
import zlib

import numpy as np
from scipy.special import entr

from errors import NonFiniteError, ShapeMismatchError, InvalidConfigError
from models import Variant

logger = logging.getLogger(__name__)

LN2 = math.log(2.0)
ROW_SUM_TOLERANCE = 1e-6


def weight_shapes(config):
    """
    Shapes of every attention tensor for a config, keyed by short name.
    This is the single source of truth for AttentionWeights layouts.
    """
    h, d_k, d_model, d_latent = config.n_heads, config.d_k, config.d_model, config.d_latent
    shapes = {}
    if config.variant is Variant.MHA:
        shapes["wq"] = (h * d_k, d_model)
        shapes["wk"] = (h * d_k, d_model)
    else:
        d_c = config.content_dim
        shapes["w_down"] = (d_latent, d_model)
        shapes["wq_up"] = (h * d_c, d_latent)
        shapes["wk_up"] = (h * d_c, d_latent)
    shapes["wv"] = (h * d_k, d_model)
    shapes["wo"] = (d_model, h * d_k)
    if config.variant is Variant.MLA_DEC and config.rope_dim > 0:
        shapes["wq_rope"] = (config.rope_dim * h, d_latent)
        shapes["wk_rope"] = (config.rope_dim, d_latent)
    return shapes


def _tensor_rng(seed, layer, name):
    # A tensor's stream depends only on (seed, layer, name)
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, int(layer), zlib.crc32(name.encode())]))


def init_weights(config, seed, layer=0, scale=1.0):
    """
    Gaussian init, mean 0, std scale/sqrt(fan_in) with fan_in = column count.

    Deterministic in (config, seed, layer). Tensors sharing a name and shape
    across variants get identical values.
    """
    weights = {}
    for name, shape in weight_shapes(config).items():
        rng = _tensor_rng(seed, layer, name)
        weights[name] = rng.standard_normal(shape) * (scale / math.sqrt(shape[1]))
    return weights


def check_weights(weights, config):
    """Verify every expected tensor is present with the right shape and finite"""
    for name, shape in weight_shapes(config).items():
        if name not in weights:
            raise InvalidConfigError(f"Attention weights missing '{name}' for variant {config.variant.value}")
        if tuple(weights[name].shape) != shape:
            raise ShapeMismatchError(f"Attention weight '{name}' has shape {weights[name].shape}, expected {shape}")
        if not np.all(np.isfinite(weights[name])):
            raise NonFiniteError(f"Attention weight '{name}' has non-finite entries")


# --- Rotary embeddings ---

def rope_angles(positions, d, base):
    """Angle table (T, d/2): theta_j = position * base^(-2j/d)"""
    inv_freq = base ** (-np.arange(0, d, 2, dtype=np.float64) / d)
    return np.asarray(positions, dtype=np.float64)[:, None] * inv_freq[None, :]


def apply_rope(x, positions, base, inverse=False):
    """
    Rotate interleaved coordinate pairs (x[2j], x[2j+1]) of the last axis.

    Args:
        x: array (..., T, d) with d even
        positions: length-T integer positions
        base: frequency base
        inverse: rotate by the negative angle (the transpose of the forward map)
    """
    d = x.shape[-1]
    if d % 2:
        raise ShapeMismatchError(f"RoPE needs an even last dimension, got {d}")
    angles = rope_angles(positions, d, base)
    cos, sin = np.cos(angles), np.sin(angles)
    if inverse:
        sin = -sin
    even, odd = x[..., 0::2], x[..., 1::2]
    out = np.empty(x.shape, dtype=np.float64)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def rope_rotate(x, position, base=10000.0):
    """Rotate one vector of even length as if it sat at `position`"""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeMismatchError(f"rope_rotate expects a vector, got shape {x.shape}")
    if x.shape[0] % 2:
        raise ShapeMismatchError(f"rope_rotate needs an even length, got {x.shape[0]}")
    return apply_rope(x[None, :], [position], base)[0]


# --- Head reshaping ---

def _split_heads(flat, n_heads):
    b, t, width = flat.shape
    return flat.reshape(b, t, n_heads, width // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, t, d = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * d)


def _project_grad(d_out_flat, inputs):
    """Gradient of y = x @ W.T with respect to W, summed over batch and time"""
    return np.einsum("bto,bti->oi", d_out_flat, inputs)


# --- Scaled dot-product core ---

def _attend(q, k, v, scale, causal):
    scores = np.matmul(q, np.swapaxes(k, -1, -2)) * scale
    if not np.all(np.isfinite(scores)):
        bad = np.argwhere(~np.isfinite(scores))[0]
        raise NonFiniteError("Non-finite attention logits", head=int(bad[1]), position=int(bad[2]))
    t = scores.shape[-1]
    if causal:
        future = np.triu(np.ones((t, t), dtype=bool), k=1)
        scores = np.where(future, -np.inf, scores)
    scores = scores - scores.max(axis=-1, keepdims=True)
    weights = np.exp(scores)
    probs = weights / weights.sum(axis=-1, keepdims=True)
    return np.matmul(probs, v), probs


def _attend_backward(d_o, q, k, v, probs, scale):
    d_probs = np.matmul(d_o, np.swapaxes(v, -1, -2))
    d_v = np.matmul(np.swapaxes(probs, -1, -2), d_o)
    d_scores = probs * (d_probs - np.sum(d_probs * probs, axis=-1, keepdims=True))
    d_q = np.matmul(d_scores, k) * scale
    d_k = np.matmul(np.swapaxes(d_scores, -1, -2), q) * scale
    return d_q, d_k, d_v


# --- Forward / backward ---

def attention_forward_batch(weights, x, config):
    """
    Batched forward pass.

    Args:
        weights: AttentionWeights dict
        x: inputs (B, T, d_model) with T <= config.seq_len

    Returns:
        (outputs (B, T, d_model), probs (B, H, T, T), cache for attention_backward)
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[-1] != config.d_model:
        raise ShapeMismatchError(f"Inputs must be (B, T, {config.d_model}), got {x.shape}")
    t = x.shape[1]
    if t > config.seq_len:
        raise ShapeMismatchError(f"Sequence length {t} exceeds configured seq_len {config.seq_len}")

    h, d_k = config.n_heads, config.d_k
    positions = np.arange(t)
    variant = config.variant
    cache = {"x": x, "positions": positions}

    if variant is Variant.MHA:
        q = apply_rope(_split_heads(x @ weights["wq"].T, h), positions, config.rope_base)
        k = apply_rope(_split_heads(x @ weights["wk"].T, h), positions, config.rope_base)
    else:
        latent = x @ weights["w_down"].T
        cache["latent"] = latent
        if variant is Variant.MLA_DEC:
            q = _split_heads(latent @ weights["wq_up"].T, h)
            k = _split_heads(latent @ weights["wk_up"].T, h)
            if config.rope_dim > 0:
                q_rope = apply_rope(_split_heads(latent @ weights["wq_rope"].T, h), positions, config.rope_base)
                k_rope = apply_rope(latent @ weights["wk_rope"].T, positions, config.rope_base)
                k_shared = np.broadcast_to(k_rope[:, None], (x.shape[0], h) + k_rope.shape[1:])
                q = np.concatenate([q, q_rope], axis=-1)
                k = np.concatenate([k, k_shared], axis=-1)
        else:
            # PreRoPE rotates the latent before up-projection; NoPE never rotates
            rotated = apply_rope(latent, positions, config.rope_base) if variant is Variant.MLA_PRE else latent
            cache["rotated"] = rotated
            q = _split_heads(rotated @ weights["wq_up"].T, h)
            k = _split_heads(rotated @ weights["wk_up"].T, h)

    v = _split_heads(x @ weights["wv"].T, h)
    scale = 1.0 / math.sqrt(d_k)
    o, probs = _attend(q, k, v, scale, config.causal)
    merged = _merge_heads(o)
    out = merged @ weights["wo"].T

    cache.update(q=q, k=k, v=v, probs=probs, merged=merged, scale=scale)
    return out, probs, cache


def attention_backward(weights, cache, d_out, config):
    """
    Reverse-mode pass matching attention_forward_batch.

    Returns:
        (d_x (B, T, d_model), d_weights dict with one entry per tensor)
    """
    x, positions = cache["x"], cache["positions"]
    h = config.n_heads
    base = config.rope_base
    grads = {}

    grads["wo"] = _project_grad(d_out, cache["merged"])
    d_o = _split_heads(d_out @ weights["wo"], h)
    d_q, d_k, d_v = _attend_backward(d_o, cache["q"], cache["k"], cache["v"], cache["probs"], cache["scale"])

    d_v_flat = _merge_heads(d_v)
    grads["wv"] = _project_grad(d_v_flat, x)
    d_x = d_v_flat @ weights["wv"]

    variant = config.variant
    if variant is Variant.MHA:
        d_q_flat = _merge_heads(apply_rope(d_q, positions, base, inverse=True))
        d_k_flat = _merge_heads(apply_rope(d_k, positions, base, inverse=True))
        grads["wq"] = _project_grad(d_q_flat, x)
        grads["wk"] = _project_grad(d_k_flat, x)
        d_x = d_x + d_q_flat @ weights["wq"] + d_k_flat @ weights["wk"]
        return d_x, grads

    latent = cache["latent"]
    if variant is Variant.MLA_DEC:
        d_c = config.content_dim
        d_q_content = _merge_heads(d_q[..., :d_c])
        d_k_content = _merge_heads(d_k[..., :d_c])
        grads["wq_up"] = _project_grad(d_q_content, latent)
        grads["wk_up"] = _project_grad(d_k_content, latent)
        d_latent = d_q_content @ weights["wq_up"] + d_k_content @ weights["wk_up"]
        if config.rope_dim > 0:
            d_q_rope = _merge_heads(apply_rope(d_q[..., d_c:], positions, base, inverse=True))
            # Shared key rope vector: gradients from all heads accumulate
            d_k_rope = apply_rope(d_k[..., d_c:].sum(axis=1), positions, base, inverse=True)
            grads["wq_rope"] = _project_grad(d_q_rope, latent)
            grads["wk_rope"] = _project_grad(d_k_rope, latent)
            d_latent = d_latent + d_q_rope @ weights["wq_rope"] + d_k_rope @ weights["wk_rope"]
    else:
        rotated = cache["rotated"]
        d_q_flat = _merge_heads(d_q)
        d_k_flat = _merge_heads(d_k)
        grads["wq_up"] = _project_grad(d_q_flat, rotated)
        grads["wk_up"] = _project_grad(d_k_flat, rotated)
        d_rotated = d_q_flat @ weights["wq_up"] + d_k_flat @ weights["wk_up"]
        if variant is Variant.MLA_PRE:
            d_latent = apply_rope(d_rotated, positions, base, inverse=True)
        else:
            d_latent = d_rotated

    grads["w_down"] = _project_grad(d_latent, x)
    d_x = d_x + d_latent @ weights["w_down"]
    return d_x, grads


def attention_forward(weights, inputs, config):
    """
    Single-sequence forward pass.

    Args:
        weights: AttentionWeights dict
        inputs: (seq_len, d_model) matrix

    Returns:
        (outputs (seq_len, d_model), probs (H, seq_len, seq_len))
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim != 2:
        raise ShapeMismatchError(f"Inputs must be (seq_len, d_model), got {inputs.shape}")
    check_weights(weights, config)
    out, probs, _ = attention_forward_batch(weights, inputs[None], config)
    return out[0], probs[0]


# --- Entropy diagnostic ---

def attention_entropy(probs):
    """
    Mean Shannon entropy in bits of attention rows, over heads (and batch)
    and query positions; masked zeros contribute nothing (0 log 0 = 0).
    """
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim < 2 or probs.shape[-1] != probs.shape[-2]:
        raise ShapeMismatchError(f"Attention probabilities must end in (T, T), got {probs.shape}")
    if np.any(probs < 0) or not np.all(np.isfinite(probs)):
        raise InvalidConfigError("Attention probabilities must be finite and non-negative")
    row_sums = probs.sum(axis=-1)
    worst = float(np.max(np.abs(row_sums - 1.0)))
    if worst > ROW_SUM_TOLERANCE:
        raise InvalidConfigError(f"Attention rows must sum to 1 (worst deviation {worst:.3g})")
    row_entropy = entr(probs).sum(axis=-1) / LN2
    return float(row_entropy.mean())


def uniform_entropy_bits(seq_len, causal=True):
    """Entropy of uniform attention over the valid keys, averaged over query positions"""
    if causal:
        return float(np.mean(np.log2(np.arange(1, seq_len + 1))))
    return math.log2(seq_len)
