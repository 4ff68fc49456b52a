# mpstats.py
"""
Marchenko-Pastur bulk edges and the spectral measures derived from them.

Measures (lambda_1 is the largest eigenvalue, lambda_+ the MP upper edge):
    MP-Gap          max(0, lambda_1 - lambda_+)            spike strength
    Outlier Count   #{lambda_i > lambda_+}                 spike population
    Outlier Energy  sum_{lambda_i > lambda_+} / sum_i      spectral mass lost to spikes
    MP Soft Rank    lambda_1 / lambda_+                    normalized spike distance
    Stable Rank     sum_i lambda_i / lambda_1              residual capacity

Degenerate all-zero spectra yield zeros everywhere so step-0 checkpoints
of zero-initialized weights are still loggable.
"""

import math

import numpy as np
import pandas as pd

from errors import InvalidConfigError
from models import MpEdges, SpectralMetrics, AGGREGATED_METRICS


def mp_edges(m, d_in):
    """
    MP bulk edges for aspect ratio gamma = m / d_in.

    Returns:
        MpEdges with lambda_minus = (1 - sqrt(gamma))^2 and lambda_plus = (1 + sqrt(gamma))^2
    """
    if m < 1 or d_in < 1:
        raise InvalidConfigError(f"m and d_in must be >= 1, got m={m}, d_in={d_in}")
    gamma = m / d_in
    root = math.sqrt(gamma)
    return MpEdges(gamma=gamma, lambda_minus=(1.0 - root) ** 2, lambda_plus=(1.0 + root) ** 2)


def spectral_metrics(spectrum, edges):
    """
    Compute all spectral measures of one spectrum against fixed MP edges.

    Args:
        spectrum: Spectrum (or any object with a `values` sequence), sorted non-increasing
        edges: MpEdges from mp_edges()

    Returns:
        SpectralMetrics
    """
    values = np.asarray(getattr(spectrum, "values", spectrum), dtype=np.float64)
    if values.ndim != 1 or values.size == 0:
        raise InvalidConfigError("Cannot compute metrics of an empty spectrum")
    if np.any(values < 0) or not np.all(np.isfinite(values)):
        raise InvalidConfigError("Spectrum values must be finite and non-negative")
    if np.any(np.diff(values) > 0):
        raise InvalidConfigError("Spectrum values must be sorted non-increasing")

    lambda_plus = edges.lambda_plus
    lambda1 = float(values[0])
    total = float(values.sum())

    # Strict inequality: a value exactly on the edge is bulk
    outliers = values[values > lambda_plus]
    outlier_count = int(outliers.size)
    outlier_energy = float(outliers.sum()) / total if total > 0 else 0.0

    return SpectralMetrics(
        mp_gap=max(0.0, lambda1 - lambda_plus),
        outlier_count=outlier_count,
        outlier_energy=outlier_energy,
        mp_soft_rank=lambda1 / lambda_plus,
        stable_rank=total / lambda1 if lambda1 > 0 else 0.0,
        lambda1=lambda1,
        gamma=edges.gamma,
        n_eigs=int(values.size),
    )


def _mean_std(values):
    arr = np.asarray(values, dtype=np.float64)
    return float(np.mean(arr)), float(np.std(arr))  # population std


def summarize(metrics_list, names=AGGREGATED_METRICS):
    """
    Per-metric mean and population standard deviation over a list of SpectralMetrics.

    Returns:
        dict: metric name -> (mean, std)
    """
    if not metrics_list:
        raise InvalidConfigError("Nothing to summarize")
    return {name: _mean_std([getattr(m, name) for m in metrics_list]) for name in names}


def aggregate_layers(points, step):
    """
    Layer-wise mean and +/-1 std of every metric at one logged step.

    Args:
        points: list of LayerSeriesPoint
        step: training step to aggregate

    Returns:
        dict: metric name -> (mean, std); includes 'attention_entropy_bits'
        when every point at the step carries it
    """
    at_step = sorted((p for p in points if p.step == step), key=lambda p: p.layer)
    if not at_step:
        raise InvalidConfigError(f"No points logged at step {step}")

    summary = summarize([p.metrics for p in at_step])
    entropies = [p.attention_entropy_bits for p in at_step]
    if all(e is not None for e in entropies):
        summary["attention_entropy_bits"] = _mean_std(entropies)
    return summary


def distribution_summary(values):
    """
    Quantile summary of one metric across layers (what a violin plot shows).

    Returns:
        dict with min, q25, median, q75, max
    """
    series = pd.Series(np.asarray(values, dtype=np.float64))
    if series.empty:
        raise InvalidConfigError("Cannot summarize an empty distribution")
    return {
        "min": float(series.min()),
        "q25": float(series.quantile(0.25)),
        "median": float(series.quantile(0.5)),
        "q75": float(series.quantile(0.75)),
        "max": float(series.max()),
    }
