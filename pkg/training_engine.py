"""
Training Engine for the toy attention language model
Produces weight-trajectory checkpoints for the spectral logger

Model:  h = E[tokens];  per layer  h += Attn(rmsnorm(h) * gain);  logits = h @ U
Loss:   mean next-token cross-entropy (nats)
Update: plain gradient descent  p <- p - lr * grad

Every log_every steps (and at step 0 and the final step) the engine:
1. Snapshots all parameters into a TensorStore in the storage dtype (ckpt_{step}.nt)
2. Analyzes that snapshot: cross-Gram spectrum + MP measures per layer
3. Measures per-layer attention entropy on a fixed held-out batch
4. Appends one metrics row per layer to metrics.csv
"""

import json
import logging
import math
import os
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp
from tqdm import tqdm

from attention import weight_shapes, init_weights, attention_forward_batch, attention_backward, attention_entropy
from errors import NonFiniteError, InvalidConfigError, MissingTensorError, TensorShapeError
from gram import tensor_name, select_qk_weights, gram_spectrum
from models import TrainConfig, EigenMode, MetricsRow
from mpstats import mp_edges, spectral_metrics
from persistence import TensorStore, write_tensors, append_metrics_row
from utils import get_worker_count

logger = logging.getLogger(__name__)

RMS_EPS = 1e-6

# Relative-error floor for gradient checks (near-zero gradients)
GRAD_CHECK_FLOOR = 1e-5
GRAD_CHECK_SAMPLES = 256
MIN_EPSILON, MAX_EPSILON = 1e-7, 1e-3

METRICS_FILE = "metrics.csv"
RUN_FILE = "run.json"


@dataclass
class ToyModel:
    config: TrainConfig
    params: dict


@dataclass
class TrainingResult:
    losses: list
    rows: list
    initial_loss: float
    final_loss: float
    perplexity: float
    checkpoints: list = field(default_factory=list)
    metrics_path: str = None
    run_path: str = None
    model: ToyModel = None

    def summary(self):
        return {
            "initial_loss": self.initial_loss,
            "final_loss": self.final_loss,
            "final_train_loss": self.losses[-1] if self.losses else None,
            "perplexity": self.perplexity,
            "logged_steps": sorted({r.step for r in self.rows}),
            "checkpoints": self.checkpoints,
        }


def checkpoint_name(step):
    return f"ckpt_{step}.nt"


# --- Corpus ---

def synth_corpus(seed, vocab_size, length, corpus_sharpness):
    """
    First-order Markov chain over vocab_size tokens.

    Each transition follows a fixed random permutation with probability
    corpus_sharpness and is uniform otherwise, so the transition matrix is
    sharpness * P_perm + (1 - sharpness) / V.
    """
    if length < 2:
        raise InvalidConfigError(f"Corpus length must be >= 2, got {length}")
    if vocab_size < 2:
        raise InvalidConfigError(f"vocab_size must be >= 2, got {vocab_size}")
    gen = np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, 0]))
    successor = gen.permutation(vocab_size)
    follow = gen.random(length) < corpus_sharpness
    noise = gen.integers(0, vocab_size, size=length)

    tokens = np.empty(length, dtype=np.int64)
    tokens[0] = noise[0]
    for i in range(1, length):
        tokens[i] = successor[tokens[i - 1]] if follow[i] else noise[i]
    return tokens


def split_corpus(tokens, heldout_fraction):
    """(train, heldout): the held-out slice is the tail of the corpus"""
    n_heldout = int(len(tokens) * heldout_fraction)
    return tokens[:len(tokens) - n_heldout], tokens[len(tokens) - n_heldout:]


def sample_windows(gen, tokens, batch_size, seq_len):
    """Uniformly placed windows of seq_len tokens, shape (batch_size, seq_len)"""
    starts = gen.integers(0, len(tokens) - seq_len + 1, size=batch_size)
    return np.stack([tokens[s:s + seq_len] for s in starts])


# --- Parameters ---

def param_shapes(attn_config, n_layers, vocab_size):
    """Ordered name -> shape map of every model parameter"""
    cfg = attn_config
    shapes = {"tok_embeddings": (vocab_size, cfg.d_model)}
    for layer in range(n_layers):
        shapes[f"layers.{layer}.attn_norm"] = (cfg.d_model,)
        for short, shape in weight_shapes(cfg).items():
            shapes[tensor_name(layer, short)] = shape
    shapes["output"] = (cfg.d_model, vocab_size)
    return shapes


def _shapes(config):
    return param_shapes(config.model, config.n_layers, config.vocab_size)


def _param_rng(seed, name):
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(name.encode())]))


def init_model(config, seed=None):
    """Random model; attention blocks use init_weights, gains start at one"""
    seed = config.seed if seed is None else seed
    cfg = config.model
    params = {
        "tok_embeddings": _param_rng(seed, "tok_embeddings").standard_normal((config.vocab_size, cfg.d_model))
        * config.embed_std,
    }
    for layer in range(config.n_layers):
        params[f"layers.{layer}.attn_norm"] = np.ones(cfg.d_model)
        weights = init_weights(cfg, seed, layer=layer, scale=config.init_scale)
        for short, values in weights.items():
            params[tensor_name(layer, short)] = values
    params["output"] = _param_rng(seed, "output").standard_normal((cfg.d_model, config.vocab_size)) * config.unembed_std
    return ToyModel(config=config, params=params)


def zero_model(config):
    """Model with every parameter zero (a uniform predictor)"""
    return ToyModel(config=config, params={name: np.zeros(shape) for name, shape in _shapes(config).items()})


def _layer_weights(params, layer, cfg):
    return {short: params[tensor_name(layer, short)] for short in weight_shapes(cfg)}


def model_to_store(model, step):
    """Snapshot parameters in the configured storage dtype"""
    config = model.config
    store = TensorStore(metadata={
        "model": config.model.to_dict(),
        "n_layers": config.n_layers,
        "vocab_size": config.vocab_size,
        "step": step,
    })
    for name in _shapes(config):
        store.add(name, model.params[name], config.storage_dtype)
    return store


def load_params(store, attn_config, n_layers, vocab_size):
    """Float64 parameter dict from a checkpoint; every parameter must be present"""
    params = {}
    for name, shape in param_shapes(attn_config, n_layers, vocab_size).items():
        if name not in store:
            raise MissingTensorError(name)
        values = store.get(name)
        if tuple(values.shape) != tuple(shape):
            raise TensorShapeError(name, shape, values.shape)
        params[name] = values
    return params


def model_from_store(store, config):
    return ToyModel(config=config, params=load_params(store, config.model, config.n_layers, config.vocab_size))


# --- Forward / backward ---

def _forward(params, cfg, n_layers, inputs):
    h = params["tok_embeddings"][inputs]
    layer_caches = []
    probs = []
    for layer in range(n_layers):
        gain = params[f"layers.{layer}.attn_norm"]
        rms = np.sqrt(np.mean(h * h, axis=-1, keepdims=True) + RMS_EPS)
        normed = h / rms
        out, layer_probs, cache = attention_forward_batch(_layer_weights(params, layer, cfg), normed * gain, cfg)
        h = h + out
        layer_caches.append((normed, rms, cache))
        probs.append(layer_probs)
    logits = h @ params["output"]
    return logits, h, layer_caches, probs


def _cross_entropy(logits, targets):
    log_norm = logsumexp(logits, axis=-1)
    picked = np.take_along_axis(logits, targets[..., None], axis=-1)[..., 0]
    return float(np.mean(log_norm - picked)), log_norm


def _split_batch(batch):
    batch = np.asarray(batch, dtype=np.int64)
    if batch.ndim == 1:
        batch = batch[None]
    if batch.shape[1] < 2:
        raise InvalidConfigError("Windows need at least two tokens")
    return batch[:, :-1], batch[:, 1:]


def batch_loss(params, config, batch):
    """Mean next-token cross-entropy of a params dict on token windows"""
    inputs, targets = _split_batch(batch)
    logits, _, _, _ = _forward(params, config.model, config.n_layers, inputs)
    loss, _ = _cross_entropy(logits, targets)
    return loss


def evaluate_loss(model, batch):
    return batch_loss(model.params, model.config, batch)


def loss_and_grads(model, batch):
    """
    Analytic forward/backward pass.

    Args:
        model: ToyModel
        batch: int array (B, L) of token windows, L <= seq_len + 1

    Returns:
        (loss, grads) with grads keyed like model.params
    """
    config = model.config
    cfg = config.model
    params = model.params
    inputs, targets = _split_batch(batch)
    logits, h, layer_caches, _ = _forward(params, config.model, config.n_layers, inputs)
    loss, log_norm = _cross_entropy(logits, targets)

    grads = {}
    d_logits = np.exp(logits - log_norm[..., None])
    np.put_along_axis(d_logits, targets[..., None],
                      np.take_along_axis(d_logits, targets[..., None], axis=-1) - 1.0, axis=-1)
    d_logits /= targets.size

    grads["output"] = np.einsum("btd,btv->dv", h, d_logits)
    d_h = d_logits @ params["output"].T

    for layer in reversed(range(config.n_layers)):
        normed, rms, cache = layer_caches[layer]
        gain = params[f"layers.{layer}.attn_norm"]
        d_y, d_weights = attention_backward(_layer_weights(params, layer, cfg), cache, d_h, cfg)
        for short, g in d_weights.items():
            grads[tensor_name(layer, short)] = g
        grads[f"layers.{layer}.attn_norm"] = np.sum(d_y * normed, axis=(0, 1))
        d_normed = d_y * gain
        d_h = d_h + (d_normed - normed * np.mean(d_normed * normed, axis=-1, keepdims=True)) / rms

    d_embed = np.zeros_like(params["tok_embeddings"])
    np.add.at(d_embed, inputs, d_h)
    grads["tok_embeddings"] = d_embed
    return loss, grads


def train_step(model, batch, lr):
    """
    One gradient-descent step, out of place.

    Returns:
        (updated ToyModel, loss before the update)
    """
    loss, grads = loss_and_grads(model, batch)
    if not math.isfinite(loss):
        raise NonFiniteError(f"Non-finite loss {loss}")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"Non-finite gradient for '{name}'")
    params = {name: value - lr * grads[name] for name, value in model.params.items()}
    return ToyModel(config=model.config, params=params), loss


# --- Gradient checking ---

def gradient_check(loss_fn, params, grads, epsilon=1e-5, n_samples=GRAD_CHECK_SAMPLES, seed=0,
                   floor=GRAD_CHECK_FLOOR):
    """
    Central-difference check of analytic gradients.

    Samples entries from every tensor in `params` (at least one each,
    about n_samples in total), perturbs them in place by +/- epsilon and
    restores the exact original value.

    Returns:
        max over samples of |analytic - numeric| / max(|analytic|, |numeric|, floor)
    """
    if not MIN_EPSILON <= epsilon <= MAX_EPSILON:
        raise InvalidConfigError(f"epsilon must lie in [{MIN_EPSILON:g}, {MAX_EPSILON:g}], got {epsilon}")
    gen = np.random.default_rng(seed)
    names = list(params)
    per_tensor = max(1, math.ceil(n_samples / len(names)))

    worst = 0.0
    for name in names:
        values = params[name]
        flat = values.reshape(-1)
        picks = gen.choice(flat.size, size=min(per_tensor, flat.size), replace=False)
        for index in picks:
            original = flat[index]
            flat[index] = original + epsilon
            plus = loss_fn(params)
            flat[index] = original - epsilon
            minus = loss_fn(params)
            flat[index] = original
            numeric = (plus - minus) / (2.0 * epsilon)
            analytic = float(np.asarray(grads[name]).reshape(-1)[index])
            error = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
            worst = max(worst, error)
    return worst


def finite_diff_check(model, batch, epsilon=1e-5, n_samples=GRAD_CHECK_SAMPLES, seed=0):
    """Max relative gradient error of the toy model over a sample spanning every parameter"""
    params = {name: np.array(value, dtype=np.float64) for name, value in model.params.items()}
    _, grads = loss_and_grads(ToyModel(model.config, params), batch)
    error = gradient_check(lambda p: batch_loss(p, model.config, batch), params, grads,
                           epsilon=epsilon, n_samples=n_samples, seed=seed)
    logger.debug(f"Gradient check on {model.config.model.variant.value}: max relative error {error:.3e}")
    return error


# --- Evaluation ---

def perplexity(model, tokens):
    """
    exp(mean next-token cross-entropy) over a token sequence.

    Long sequences are cut into seq_len windows overlapping by one token so
    every target is predicted exactly once.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 1 or tokens.size < 2:
        raise InvalidConfigError("perplexity needs a sequence of at least two tokens")
    seq_len = model.config.model.seq_len
    stride = seq_len - 1
    starts = range(0, tokens.size - 1, stride)
    windows = [tokens[s:s + seq_len] for s in starts]

    total, count = 0.0, 0
    full = [w for w in windows if w.size == seq_len]
    rest = [w for w in windows if w.size < seq_len]
    for group in ([np.stack(full)] if full else []) + [w[None] for w in rest]:
        n_targets = group.shape[0] * (group.shape[1] - 1)
        total += evaluate_loss(model, group) * n_targets
        count += n_targets
    return math.exp(total / count)


def attention_entropies(params, attn_config, n_layers, inputs):
    """Mean attention entropy (bits) per layer for input tokens of shape (B, T)"""
    inputs = np.atleast_2d(np.asarray(inputs, dtype=np.int64))
    _, _, _, probs = _forward(params, attn_config, n_layers, inputs)
    return [attention_entropy(p) for p in probs]


# --- Spectral analysis ---

def analyze_layer(store, layer, attn_config, eigen_mode=EigenMode.SINGULAR):
    """(GramSpec, SpectralMetrics) for one layer of a checkpoint"""
    wq, wk, spec = select_qk_weights(store, layer, attn_config, eigen_mode)
    metrics = spectral_metrics(gram_spectrum(wq, wk, spec), mp_edges(spec.m, spec.d_in))
    return spec, metrics


def analyze_store(store, attn_config, layers, step, eigen_mode=EigenMode.SINGULAR, workers=None, entropies=None):
    """
    Metrics rows for the given layers of one checkpoint.

    Layers are analyzed in parallel (read-only on the store); rows come
    back in the order of `layers`.
    """
    layers = list(layers)
    workers = get_worker_count() if workers is None else workers
    with ThreadPoolExecutor(max_workers=max(1, min(workers, len(layers) or 1))) as pool:
        results = list(pool.map(lambda i: analyze_layer(store, i, attn_config, eigen_mode), layers))

    rows = []
    for position, (layer, (spec, metrics)) in enumerate(zip(layers, results)):
        entropy = entropies[position] if entropies is not None else None
        rows.append(MetricsRow.from_metrics(step, layer, attn_config.variant, spec, metrics, entropy))
    return rows


# --- Training loop ---

def _log_steps(steps, log_every):
    logged = set(range(0, steps + 1, log_every))
    logged.add(steps)
    return logged


def _write_run_file(path, payload):
    tmp_path = f"{path}.tmp"
    with open(tmp_path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
    os.replace(tmp_path, path)


def run_training(config, out_dir, spectral_logging=True, workers=None):
    """
    Train the toy model and log spectra along the way.

    Args:
        config: TrainConfig
        out_dir: directory for ckpt_{step}.nt, metrics.csv and run.json
        spectral_logging: when False nothing is logged (timing baseline)
        workers: layer fan-out; defaults to MPSCOPE_THREADS

    Returns:
        TrainingResult
    """
    os.makedirs(out_dir, exist_ok=True)
    run_path = os.path.join(out_dir, RUN_FILE)
    metrics_path = os.path.join(out_dir, METRICS_FILE)
    _write_run_file(run_path, {"config": config.to_dict()})
    if spectral_logging:
        open(metrics_path, "w").close()

    cfg = config.model
    batch_seed, eval_seed = np.random.SeedSequence(int(config.seed) & 0xFFFFFFFFFFFFFFFF).spawn(2)
    corpus = synth_corpus(config.seed, config.vocab_size, config.corpus_length, config.corpus_sharpness)
    train_tokens, heldout_tokens = split_corpus(corpus, config.heldout_fraction)
    batch_gen = np.random.default_rng(batch_seed)
    eval_batch = sample_windows(np.random.default_rng(eval_seed), heldout_tokens, config.batch_size, cfg.seq_len)

    model = init_model(config)
    initial_loss = evaluate_loss(model, eval_batch)
    logger.info(f"Training {cfg.variant.value}: {config.n_layers} layers, {config.steps} steps, "
                f"initial held-out loss {initial_loss:.4f}")

    logged = _log_steps(config.steps, config.log_every) if spectral_logging else set()
    layers = range(config.n_layers)
    losses, rows, checkpoints = [], [], []

    progress = tqdm(total=config.steps, desc=cfg.variant.value, disable=None if config.progress else True, leave=False)
    try:
        for step in range(config.steps + 1):
            if step in logged:
                store = model_to_store(model, step)
                ckpt_path = os.path.join(out_dir, checkpoint_name(step))
                write_tensors(store, ckpt_path)
                checkpoints.append(ckpt_path)
                snapshot = model_from_store(store, config)
                entropies = attention_entropies(snapshot.params, cfg, config.n_layers, eval_batch[:, :-1])
                step_rows = analyze_store(store, cfg, layers, step, config.eigen_mode, workers, entropies)
                for row in step_rows:
                    append_metrics_row(metrics_path, row)
                rows.extend(step_rows)
                logger.debug(f"Logged step {step}: mean mp_gap "
                             f"{np.mean([r.mp_gap for r in step_rows]):.4f}")

            if step == config.steps:
                break
            batch = sample_windows(batch_gen, train_tokens, config.batch_size, cfg.seq_len)
            try:
                model, loss = train_step(model, batch, config.learning_rate)
            except NonFiniteError as e:
                raise e.at_step(step) from e
            losses.append(loss)
            progress.update(1)
            progress.set_postfix(loss=f"{loss:.4f}")
    finally:
        progress.close()

    final_loss = evaluate_loss(model, eval_batch)
    ppl = perplexity(model, heldout_tokens)
    result = TrainingResult(
        losses=losses,
        rows=rows,
        initial_loss=initial_loss,
        final_loss=final_loss,
        perplexity=ppl,
        checkpoints=checkpoints,
        metrics_path=metrics_path if spectral_logging else None,
        run_path=run_path,
        model=model,
    )
    _write_run_file(run_path, {"config": config.to_dict(), "results": result.summary()})
    logger.info(f"Finished {cfg.variant.value}: held-out loss {initial_loss:.4f} -> {final_loss:.4f}, "
                f"perplexity {ppl:.3f}")
    return result
