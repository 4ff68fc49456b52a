# application.py
"""
mpscope command-line entry point.

    python application.py analyze   --ckpt ckpt_100.nt [--variant ...] [--out metrics.csv]
    python application.py train     --out runs/mha [--variant ...] [--steps 1000]
    python application.py null-sim  [--m 256 --d-in 256 --trials 20]
    python application.py spike-sim [--theta 0 2 10 --rank 1 --trials 20]
    python application.py entropy   --ckpt ckpt_0.nt [--seed 1234]
    python application.py report    --metrics runs/mha/metrics.csv --out reports/mha
    python application.py overhead  [train flags]

Exit codes: 0 success, 2 input format, 3 config mismatch, 4 numeric failure.
"""

import argparse
import logging
import os
import sys
import tempfile
import time

import numpy as np
import pandas as pd
from dotenv import load_dotenv
from rich.table import Table

from attention import uniform_entropy_bits
from errors import InvalidConfigError, EXIT_CONFIG_MISMATCH
from gram import select_qk_weights, head_spectra, cross_gram
from linalg import singular_values
from models import (
    Variant,
    EigenMode,
    AttentionConfig,
    TrainConfig,
    METRICS_COLUMNS,
    HEATMAP_METRICS,
    AGGREGATED_METRICS,
    DEFAULT_D_MODEL,
    DEFAULT_N_HEADS,
    DEFAULT_D_HEAD,
    DEFAULT_D_LATENT,
    DEFAULT_SEQ_LEN,
    DEFAULT_ROPE_FRAC,
    DEFAULT_ROPE_BASE,
    DEFAULT_SEED,
    DEFAULT_STEPS,
    DEFAULT_LOG_EVERY,
    DEFAULT_BATCH_SIZE,
    DEFAULT_LEARNING_RATE,
    DEFAULT_N_LAYERS,
    DEFAULT_VOCAB_SIZE,
    DEFAULT_SHARPNESS,
    DEFAULT_CORPUS_LENGTH,
)
from mpstats import mp_edges, spectral_metrics, summarize
from persistence import (
    read_tensors,
    read_metrics,
    append_metrics_row,
    export_heatmap,
    write_aggregate,
    write_distribution,
)
from synth import null_trials, spike_trials, gaussian_matrix, rng, ENSEMBLES
from training_engine import run_training, analyze_store, load_params, attention_entropies
from utils import configure_logging, exit_on_error, echo_config, get_worker_count, console

load_dotenv()

logger = logging.getLogger(__name__)

# Null/spike simulation defaults
DEFAULT_SIM_DIM = 256
DEFAULT_TRIALS = 20
DEFAULT_THETAS = (0.0, 2.0, 10.0)
DEFAULT_SPIKE_RANK = 1
DEFAULT_ENTROPY_BATCH = 8

# One analysis at GPT-2-small head width (H=12, d_k=64)
OVERHEAD_SVD_DIM = 768


# --- Flag helpers ---

def _add_model_flags(parser, defaults=True):
    """Shared model flags; analyze/entropy leave them unset so checkpoint metadata wins"""
    def d(value):
        return value if defaults else None

    parser.add_argument("--variant", choices=[v.value for v in Variant], default=d(Variant.MHA.value))
    parser.add_argument("--rope-frac", type=float, default=d(DEFAULT_ROPE_FRAC))
    parser.add_argument("--d-model", type=int, default=d(DEFAULT_D_MODEL))
    parser.add_argument("--n-heads", type=int, default=d(DEFAULT_N_HEADS))
    parser.add_argument("--d-head", type=int, default=d(DEFAULT_D_HEAD))
    parser.add_argument("--d-latent", type=int, default=d(DEFAULT_D_LATENT))
    parser.add_argument("--seq-len", type=int, default=d(DEFAULT_SEQ_LEN))
    parser.add_argument("--rope-base", type=float, default=d(DEFAULT_ROPE_BASE))
    parser.add_argument("--n-layers", type=int, default=d(DEFAULT_N_LAYERS))
    parser.add_argument("--vocab-size", type=int, default=d(DEFAULT_VOCAB_SIZE))


def _add_eigen_mode(parser):
    parser.add_argument("--eigen-mode", choices=[m.value for m in EigenMode], default=EigenMode.SINGULAR.value)


def _add_train_flags(parser):
    _add_model_flags(parser)
    _add_eigen_mode(parser)
    parser.add_argument("--steps", type=int, default=DEFAULT_STEPS)
    parser.add_argument("--log-every", type=int, default=DEFAULT_LOG_EVERY)
    parser.add_argument("--seed", type=int, default=DEFAULT_SEED)
    parser.add_argument("--batch-size", type=int, default=DEFAULT_BATCH_SIZE)
    parser.add_argument("--lr", type=float, default=DEFAULT_LEARNING_RATE)
    parser.add_argument("--sharpness", type=float, default=DEFAULT_SHARPNESS)
    parser.add_argument("--corpus-length", type=int, default=DEFAULT_CORPUS_LENGTH)
    parser.add_argument("--init-scale", type=float, default=1.0)
    parser.add_argument("--f64", action="store_true", help="store checkpoints as 64-bit floats")
    parser.add_argument("--no-progress", action="store_true")


_MODEL_FLAG_FIELDS = {
    "d_model": "d_model",
    "n_heads": "n_heads",
    "d_head": "d_k",
    "d_latent": "d_latent",
    "seq_len": "seq_len",
    "rope_frac": "rope_frac",
    "rope_base": "rope_base",
}


def attention_config_from_args(args, base=None):
    """
    AttentionConfig from flags; unset flags (None) fall back to `base`
    (usually checkpoint metadata) and then to the defaults.
    """
    values = dict(base or {})
    if getattr(args, "variant", None) is not None:
        values["variant"] = args.variant
    for flag, name in _MODEL_FLAG_FIELDS.items():
        value = getattr(args, flag, None)
        if value is not None:
            values[name] = value
    values.setdefault("variant", Variant.MHA.value)
    return AttentionConfig.from_dict(values)


def train_config_from_args(args):
    return TrainConfig(
        model=attention_config_from_args(args),
        n_layers=args.n_layers,
        vocab_size=args.vocab_size,
        steps=args.steps,
        batch_size=args.batch_size,
        learning_rate=args.lr,
        seed=args.seed,
        log_every=args.log_every,
        corpus_sharpness=args.sharpness,
        corpus_length=args.corpus_length,
        init_scale=args.init_scale,
        store_f64=args.f64,
        eigen_mode=EigenMode(args.eigen_mode),
        progress=not args.no_progress,
    )


def _parse_layers(text, n_layers):
    if text is None:
        return list(range(n_layers))
    try:
        layers = [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise InvalidConfigError(f"--layers must be a comma-separated list of integers, got '{text}'")
    bad = [i for i in layers if not 0 <= i < n_layers]
    if bad:
        raise InvalidConfigError(f"Layers {bad} out of range for a {n_layers}-layer checkpoint")
    return layers


def _resolve_checkpoint(args):
    """Read a checkpoint and resolve (store, AttentionConfig, n_layers) from metadata plus flags"""
    store = read_tensors(args.ckpt)
    meta = store.metadata
    attn_config = attention_config_from_args(args, meta.get("model"))
    n_layers = args.n_layers if args.n_layers is not None else meta.get("n_layers", store.layer_count())
    if n_layers < 1:
        raise InvalidConfigError(f"{args.ckpt}: no layers found; pass --n-layers")
    return store, attn_config, n_layers


def _metrics_table(title, rows, columns):
    table = Table(title=title)
    for col in columns:
        table.add_column(col, justify="right")
    for row in rows:
        table.add_row(*[f"{v:.6g}" if isinstance(v, float) else str(v) for v in row])
    return table


def _summary_table(title, summary):
    table = Table(title=title)
    table.add_column("metric")
    table.add_column("mean", justify="right")
    table.add_column("std", justify="right")
    for name, (mean, std) in summary.items():
        table.add_row(name, f"{mean:.6g}", f"{std:.6g}")
    return table


def _write_trials(path, records):
    pd.DataFrame(records).to_csv(path, index=False, float_format="%.17g")


# --- Commands ---

@exit_on_error
def cmd_analyze(args):
    store, attn_config, n_layers = _resolve_checkpoint(args)
    eigen_mode = EigenMode(args.eigen_mode)
    step = args.step if args.step is not None else int(store.metadata.get("step", 0))
    layers = _parse_layers(args.layers, n_layers)
    echo_config({
        "command": "analyze",
        "ckpt": args.ckpt,
        "model": attn_config.to_dict(),
        "n_layers": n_layers,
        "layers": layers,
        "eigen_mode": eigen_mode.value,
        "step": step,
        "out": args.out,
        "per_head": args.per_head,
    })

    rows = analyze_store(store, attn_config, layers, step, eigen_mode, get_worker_count())
    if args.out:
        for row in rows:
            append_metrics_row(args.out, row)
        logger.info(f"Appended {len(rows)} rows to {args.out}")

    if args.per_head:
        head_records = []
        for layer in layers:
            wq, wk, spec = select_qk_weights(store, layer, attn_config, eigen_mode)
            for head, spectrum in enumerate(head_spectra(wq, wk, spec)):
                metrics = spectral_metrics(spectrum, mp_edges(spectrum.m, spectrum.d_in))
                head_records.append({
                    "step": step, "layer": layer, "head": head, "variant": attn_config.variant.value,
                    "m": spectrum.m, "d_in": spectrum.d_in, "gamma": metrics.gamma, "lambda1": metrics.lambda1,
                    "mp_gap": metrics.mp_gap, "outlier_count": metrics.outlier_count,
                    "outlier_energy": metrics.outlier_energy, "mp_soft_rank": metrics.mp_soft_rank,
                    "stable_rank": metrics.stable_rank,
                })
        if args.out and head_records:
            _write_trials(f"{args.out}.heads.csv", head_records)
        if head_records:
            console.print(_metrics_table("Per-head metrics", [list(r.values()) for r in head_records],
                                         list(head_records[0].keys())))

    columns = [c for c in METRICS_COLUMNS if c != "attention_entropy_bits"]
    console.print(_metrics_table(f"{args.ckpt} (step {step})",
                                 [[getattr(r, c) for c in columns] for r in rows], columns))


@exit_on_error
def cmd_train(args):
    config = train_config_from_args(args)
    echo_config({"command": "train", "out": args.out, **config.to_dict()})
    result = run_training(config, args.out, workers=get_worker_count())
    console.print(f"final loss (held-out): {result.final_loss:.6f}  (initial {result.initial_loss:.6f})")
    console.print(f"perplexity (held-out): {result.perplexity:.6f}")
    console.print(f"metrics: {result.metrics_path}")
    console.print(f"run: {result.run_path}")
    console.print(f"checkpoints: {len(result.checkpoints)} in {args.out}")


@exit_on_error
def cmd_null_sim(args):
    eigen_mode = EigenMode(args.eigen_mode)
    echo_config({
        "command": "null-sim", "m": args.m, "d_in": args.d_in, "trials": args.trials, "seed": args.seed,
        "ensemble": args.ensemble, "eigen_mode": eigen_mode.value, "out": args.out,
    })
    results = null_trials(args.m, args.d_in, args.trials, args.seed, args.ensemble, eigen_mode,
                          workers=get_worker_count())
    records = [{"trial": t, "seed": args.seed + t, **_metrics_record(m)} for t, m in enumerate(results)]
    if args.out:
        _write_trials(args.out, records)

    edges = mp_edges(args.m, args.d_in)
    console.print(_summary_table(
        f"{args.ensemble} null, m={args.m}, d_in={args.d_in}, lambda_+={edges.lambda_plus:.6g}",
        summarize(results),
    ))


def _metrics_record(metrics):
    return {name: getattr(metrics, name) for name in ("gamma",) + AGGREGATED_METRICS}


@exit_on_error
def cmd_spike_sim(args):
    eigen_mode = EigenMode(args.eigen_mode)
    echo_config({
        "command": "spike-sim", "m": args.m, "d_in": args.d_in, "theta": args.theta, "rank": args.rank,
        "trials": args.trials, "seed": args.seed, "eigen_mode": eigen_mode.value, "out": args.out,
    })
    results = spike_trials(args.m, args.d_in, args.theta, args.rank, args.trials, args.seed, eigen_mode,
                           workers=get_worker_count())
    records = []
    table = Table(title=f"Spike detection, m={args.m}, d_in={args.d_in}, rank={args.rank}")
    for col in ("theta", "detection_rate", "median_outlier_count", "mean_mp_gap", "mean_outlier_energy"):
        table.add_column(col, justify="right")
    for theta, trials in results.items():
        detection = sum(1 for m in trials if m.outlier_count >= 1) / len(trials)
        summary = summarize(trials)
        table.add_row(
            f"{theta:g}",
            f"{detection:.3f}",
            f"{float(np.median([m.outlier_count for m in trials])):g}",
            f"{summary['mp_gap'][0]:.6g}",
            f"{summary['outlier_energy'][0]:.6g}",
        )
        records += [{"theta": theta, "trial": t, "seed": args.seed + t, **_metrics_record(m)}
                    for t, m in enumerate(trials)]
    if args.out:
        _write_trials(args.out, records)
    console.print(table)


@exit_on_error
def cmd_entropy(args):
    store, attn_config, n_layers = _resolve_checkpoint(args)
    vocab_size = args.vocab_size or store.metadata.get("vocab_size") or store.get("tok_embeddings").shape[0]
    step = int(store.metadata.get("step", 0))
    echo_config({
        "command": "entropy", "ckpt": args.ckpt, "model": attn_config.to_dict(), "n_layers": n_layers,
        "vocab_size": vocab_size, "seed": args.seed, "batch_size": args.batch_size, "out": args.out,
    })

    params = load_params(store, attn_config, n_layers, vocab_size)
    tokens = random_token_batch(args.seed, args.batch_size, attn_config.seq_len, vocab_size)
    entropies = attention_entropies(params, attn_config, n_layers, tokens)

    reference = uniform_entropy_bits(attn_config.seq_len, attn_config.causal)
    table = Table(title=f"Attention entropy (uniform reference {reference:.4f} bits)")
    table.add_column("layer", justify="right")
    table.add_column("entropy_bits", justify="right")
    for layer, value in enumerate(entropies):
        table.add_row(str(layer), f"{value:.6f}")
    console.print(table)

    if args.out:
        rows = analyze_store(store, attn_config, range(n_layers), step, EigenMode(args.eigen_mode),
                             get_worker_count(), entropies)
        for row in rows:
            append_metrics_row(args.out, row)
        logger.info(f"Appended {len(rows)} rows to {args.out}")


def random_token_batch(seed, batch_size, seq_len, vocab_size):
    """Seeded uniform-random token ids, shape (batch_size, seq_len)"""
    return rng(seed).integers(0, vocab_size, size=(batch_size, seq_len))


@exit_on_error
def cmd_report(args):
    echo_config({"command": "report", "metrics": args.metrics, "out": args.out})
    rows = read_metrics(args.metrics)
    os.makedirs(args.out, exist_ok=True)

    metrics = list(HEATMAP_METRICS)
    if rows and all(r.attention_entropy_bits is not None for r in rows):
        metrics.append("attention_entropy_bits")
    for name in metrics:
        export_heatmap(rows, name, os.path.join(args.out, f"heatmap_{name}.csv"))
    n_steps = write_aggregate(rows, os.path.join(args.out, "aggregate.csv"))
    final_step = write_distribution(rows, os.path.join(args.out, "distribution_final.csv"))
    console.print(f"{len(metrics)} heatmaps, aggregate over {n_steps} steps, "
                  f"distribution at step {final_step} -> {args.out}")


@exit_on_error
def cmd_overhead(args):
    config = train_config_from_args(args)
    echo_config({"command": "overhead", **config.to_dict()})
    workers = get_worker_count()

    with tempfile.TemporaryDirectory() as tmp:
        start = time.perf_counter()
        run_training(config, os.path.join(tmp, "baseline"), spectral_logging=False, workers=workers)
        baseline = time.perf_counter() - start

        start = time.perf_counter()
        run_training(config, os.path.join(tmp, "logged"), spectral_logging=True, workers=workers)
        logged = time.perf_counter() - start

    overhead = 100.0 * (logged - baseline) / baseline if baseline > 0 else 0.0

    wq = gaussian_matrix(OVERHEAD_SVD_DIM, OVERHEAD_SVD_DIM, config.seed)
    wk = gaussian_matrix(OVERHEAD_SVD_DIM, OVERHEAD_SVD_DIM, config.seed + 1)
    start = time.perf_counter()
    singular_values(cross_gram(wq, wk, OVERHEAD_SVD_DIM), "G")
    svd_seconds = time.perf_counter() - start

    table = Table(title="Spectral logging overhead")
    table.add_column("measure")
    table.add_column("value", justify="right")
    table.add_row("baseline wall time (s)", f"{baseline:.4f}")
    table.add_row("logged wall time (s)", f"{logged:.4f}")
    table.add_row("overhead (%)", f"{overhead:.2f}")
    table.add_row(f"{OVERHEAD_SVD_DIM}x{OVERHEAD_SVD_DIM} cross-Gram spectrum (s)", f"{svd_seconds:.4f}")
    console.print(table)


# --- Parser ---

def build_parser():
    parser = argparse.ArgumentParser(prog="mpscope", description="Marchenko-Pastur diagnostics for attention weights")
    parser.add_argument("--log-level", default=None, help="overrides MPSCOPE_LOG_LEVEL")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", help="spectral metrics of every layer in a checkpoint")
    p.add_argument("--ckpt", required=True)
    _add_model_flags(p, defaults=False)
    _add_eigen_mode(p)
    p.add_argument("--out", default=None, help="metrics CSV to append to")
    p.add_argument("--layers", default=None, help="comma-separated layer indices")
    p.add_argument("--per-head", action="store_true")
    p.add_argument("--step", type=int, default=None)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("train", help="train the toy model with spectral logging")
    _add_train_flags(p)
    p.add_argument("--out", required=True, help="run directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("null-sim", help="metrics of random null spectra")
    p.add_argument("--m", type=int, default=DEFAULT_SIM_DIM)
    p.add_argument("--d-in", type=int, default=DEFAULT_SIM_DIM)
    p.add_argument("--trials", type=int, default=DEFAULT_TRIALS)
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--ensemble", choices=ENSEMBLES, default="wishart")
    _add_eigen_mode(p)
    p.add_argument("--out", default=None, help="per-trial CSV")
    p.set_defaults(func=cmd_null_sim)

    p = sub.add_parser("spike-sim", help="planted-spike detection experiment")
    p.add_argument("--m", type=int, default=DEFAULT_SIM_DIM)
    p.add_argument("--d-in", type=int, default=DEFAULT_SIM_DIM)
    p.add_argument("--theta", type=float, nargs="+", default=list(DEFAULT_THETAS))
    p.add_argument("--rank", type=int, default=DEFAULT_SPIKE_RANK)
    p.add_argument("--trials", type=int, default=DEFAULT_TRIALS)
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    _add_eigen_mode(p)
    p.add_argument("--out", default=None, help="per-trial CSV")
    p.set_defaults(func=cmd_spike_sim)

    p = sub.add_parser("entropy", help="per-layer attention entropy on a seeded batch")
    p.add_argument("--ckpt", required=True)
    _add_model_flags(p, defaults=False)
    _add_eigen_mode(p)
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--batch-size", type=int, default=DEFAULT_ENTROPY_BATCH)
    p.add_argument("--out", default=None, help="metrics CSV to append to")
    p.set_defaults(func=cmd_entropy)

    p = sub.add_parser("report", help="heatmap and aggregate CSVs from a metrics file")
    p.add_argument("--metrics", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("overhead", help="wall-time cost of spectral logging (step 0 and the final step are always logged)")
    _add_train_flags(p)
    p.set_defaults(func=cmd_overhead)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        configure_logging(args.log_level)
    except InvalidConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG_MISMATCH
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
