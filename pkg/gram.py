# gram.py
"""
Query/key weight selection per attention variant and the normalized
cross-Gram spectrum G = (1/d_in) * W_Q @ W_K^T.

Selection rules:
    MHA                full projections wq, wk              (H*d_k, d_model)
    MLA_PRE/MLA_NOPE   up-projections wq_up, wk_up          (H*d_k, d_latent); shared w_down excluded
    MLA_DEC            rotary branch only: wq_rope          (rope_dim*H, d_latent)
                       against wk_rope (rope_dim, d_latent) tiled H times row-wise
"""

import logging

import numpy as np

from errors import MissingTensorError, TensorShapeError, ShapeMismatchError, InvalidConfigError
from linalg import as_matrix, matmul, singular_values
from models import Variant, EigenMode, GramSpec, Spectrum

logger = logging.getLogger(__name__)


def tensor_name(layer, short_name):
    """Checkpoint name of an attention tensor, e.g. layers.3.attn.wq_up"""
    return f"layers.{layer}.attn.{short_name}"


def cross_gram(wq, wk, d_in):
    """
    G = (1/d_in) * wq @ wk^T.

    Args:
        wq, wk: matrices of identical shape (m, d_in)
        d_in: input dimension, must equal their column count
    """
    wq = as_matrix(wq, "wq")
    wk = as_matrix(wk, "wk")
    if wq.shape != wk.shape:
        raise ShapeMismatchError(f"wq {wq.shape} and wk {wk.shape} must have the same shape")
    if wq.shape[1] != d_in:
        raise ShapeMismatchError(f"d_in={d_in} does not match operand column count {wq.shape[1]}")
    return matmul(wq, wk.T) / d_in


def _fetch(store, name, expected_shape):
    if name not in store:
        raise MissingTensorError(name)
    arr = store.get(name)
    if tuple(arr.shape) != tuple(expected_shape):
        raise TensorShapeError(name, expected_shape, arr.shape)
    return as_matrix(arr, name)


def select_qk_weights(store, layer, config, eigen_mode=EigenMode.SINGULAR):
    """
    Pick the query/key blocks to analyze for one layer.

    Args:
        store: TensorStore (or any mapping with `in` and .get(name))
        layer: layer index
        config: AttentionConfig describing the checkpoint
        eigen_mode: recorded on the returned GramSpec

    Returns:
        (wq, wk, spec) with wq/wk float64 of shape (spec.m, spec.d_in)
    """
    h, d_k = config.n_heads, config.d_k
    variant = config.variant

    if variant is Variant.MHA:
        shape = (h * d_k, config.d_model)
        wq = _fetch(store, tensor_name(layer, "wq"), shape)
        wk = _fetch(store, tensor_name(layer, "wk"), shape)
        rope_dim = 0
    elif variant in (Variant.MLA_PRE, Variant.MLA_NOPE):
        shape = (h * d_k, config.d_latent)
        wq = _fetch(store, tensor_name(layer, "wq_up"), shape)
        wk = _fetch(store, tensor_name(layer, "wk_up"), shape)
        rope_dim = 0
    elif variant is Variant.MLA_DEC:
        rope_dim = config.rope_dim
        if rope_dim == 0:
            raise InvalidConfigError("Decoupled variant with rope_frac=0 has no rotary branch to analyze")
        wq = _fetch(store, tensor_name(layer, "wq_rope"), (rope_dim * h, config.d_latent))
        shared = _fetch(store, tensor_name(layer, "wk_rope"), (rope_dim, config.d_latent))
        # Shared key branch replicated so both operands have rope_dim*H rows
        wk = np.tile(shared, (h, 1))
    else:
        raise InvalidConfigError(f"Unsupported variant {variant!r}")

    spec = GramSpec(
        variant=variant,
        layer_index=layer,
        m=wq.shape[0],
        d_in=wq.shape[1],
        eigen_mode=eigen_mode,
        n_heads=h,
        rope_dim=rope_dim,
    )
    return wq, wk, spec


def gram_spectrum(wq, wk, spec):
    """
    Spectrum of the cross-Gram matrix.

    SINGULAR mode returns sigma_i(G); SQUARED returns sigma_i(G)^2. Either way
    the list has m entries sorted non-increasing, at most min(m, d_in) nonzero.
    """
    g = cross_gram(wq, wk, spec.d_in)
    label = f"G[layer {spec.layer_index}]" if spec.variant is not None else "G"
    values = singular_values(g, label)
    if spec.eigen_mode is EigenMode.SQUARED:
        values = values ** 2
    return Spectrum(values=values, m=spec.m, d_in=spec.d_in, spec=spec)


def head_spectra(wq, wk, spec):
    """
    Per-head cross-Gram spectra: the m rows are split into n_heads equal
    blocks, so head h analyzes a (m/H, d_in) pair with gamma = (m/H)/d_in.
    """
    wq = as_matrix(wq, "wq")
    wk = as_matrix(wk, "wk")
    if spec.m % spec.n_heads:
        raise ShapeMismatchError(f"m={spec.m} is not divisible by n_heads={spec.n_heads}")
    rows = spec.m // spec.n_heads
    spectra = []
    for head in range(spec.n_heads):
        block = slice(head * rows, (head + 1) * rows)
        head_spec = GramSpec(
            variant=spec.variant,
            layer_index=spec.layer_index,
            m=rows,
            d_in=spec.d_in,
            eigen_mode=spec.eigen_mode,
            n_heads=1,
            rope_dim=spec.rope_dim,
        )
        spectra.append(gram_spectrum(wq[block], wk[block], head_spec))
    logger.debug(f"Computed {len(spectra)} head spectra for layer {spec.layer_index}")
    return spectra
