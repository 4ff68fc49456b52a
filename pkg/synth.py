# synth.py
"""
Random-matrix oracles for the spectral pipeline.

Null ensembles whose spectra obey the Marchenko-Pastur law, planted-spike
query/key pairs whose outliers must be detected, and the MP density itself.
Gaussians come from numpy's PCG64 generator (ziggurat transform), seeded
through SeedSequence; streams are stable within one numpy build.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from scipy import integrate
from tqdm import tqdm

from errors import InvalidConfigError
from gram import gram_spectrum
from linalg import singular_values
from models import EigenMode, GramSpec, Spectrum
from mpstats import mp_edges, spectral_metrics

logger = logging.getLogger(__name__)

# Finite-size regime guard for the Wishart oracle
MIN_NULL_DIM = 16

ENSEMBLES = ("wishart", "cross")


def rng(seed):
    """Seeded PCG64 generator"""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF)))


def gaussian_matrix(m, n, seed):
    """m x n matrix of i.i.d. standard normal entries, deterministic per seed"""
    if m < 1 or n < 1:
        raise InvalidConfigError(f"Matrix dimensions must be >= 1, got {m}x{n}")
    return rng(seed).standard_normal((m, n))


def wishart_null_spectrum(m, d_in, seed):
    """
    Eigenvalues of (1/d_in) X X^T for X = gaussian_matrix(m, d_in, seed).

    Computed as sigma(X)^2 / d_in; when m > d_in the m - d_in structural
    zeros are appended so the spectrum always has m entries.
    """
    if m < MIN_NULL_DIM or d_in < MIN_NULL_DIM:
        raise InvalidConfigError(f"Null spectra need m, d_in >= {MIN_NULL_DIM}, got m={m}, d_in={d_in}")
    x = gaussian_matrix(m, d_in, seed)
    values = singular_values(x, "X") ** 2 / d_in
    if values.size < m:
        values = np.concatenate([values, np.zeros(m - values.size)])
    return Spectrum(values=values, m=m, d_in=d_in, spec=GramSpec.synthetic(m, d_in, EigenMode.SQUARED))


def cross_null_spectrum(m, d_in, seed, eigen_mode=EigenMode.SINGULAR):
    """Cross-Gram spectrum of two independent Gaussian blocks (no planted structure)"""
    if m < MIN_NULL_DIM or d_in < MIN_NULL_DIM:
        raise InvalidConfigError(f"Null spectra need m, d_in >= {MIN_NULL_DIM}, got m={m}, d_in={d_in}")
    gen = rng(seed)
    wq = gen.standard_normal((m, d_in))
    wk = gen.standard_normal((m, d_in))
    return gram_spectrum(wq, wk, GramSpec.synthetic(m, d_in, eigen_mode))


def _orthonormal_columns(gen, rows, cols):
    q, r = np.linalg.qr(gen.standard_normal((rows, cols)))
    # Sign-fix so the basis is a deterministic function of the draw
    return q * np.sign(np.where(np.diag(r) == 0, 1.0, np.diag(r)))


def spiked_pair(m, d_in, theta, rank, seed):
    """
    Gaussian query/key blocks sharing a planted low-rank component.

    wq = X_q + theta * U @ V.T
    wk = X_k + theta * U @ V'.T

    U (m x rank) has orthonormal columns and is shared; V and V' are
    independent orthonormal bases scaled by sqrt(d_in), so theta is measured
    against the background's per-row norm.
    """
    if theta < 0 or not math.isfinite(theta):
        raise InvalidConfigError(f"theta must be finite and >= 0, got {theta}")
    if rank < 1 or rank > min(m, d_in):
        raise InvalidConfigError(f"rank must lie in [1, {min(m, d_in)}], got {rank}")

    gen = rng(seed)
    wq = gen.standard_normal((m, d_in))
    wk = gen.standard_normal((m, d_in))
    if theta == 0:
        return wq, wk

    u = _orthonormal_columns(gen, m, rank)
    v = _orthonormal_columns(gen, d_in, rank) * math.sqrt(d_in)
    v_prime = _orthonormal_columns(gen, d_in, rank) * math.sqrt(d_in)
    wq += theta * (u @ v.T)
    wk += theta * (u @ v_prime.T)
    return wq, wk


def mp_density(x, gamma):
    """
    Continuous part of the MP law at x.

    sqrt((lambda_+ - x)(x - lambda_-)) / (2 pi gamma x) inside the bulk, 0 elsewhere.
    For gamma > 1 it carries mass 1/gamma; the rest is mp_point_mass(gamma) at 0.
    """
    if not gamma > 0:
        raise InvalidConfigError(f"gamma must be positive, got {gamma}")
    root = math.sqrt(gamma)
    lo, hi = (1.0 - root) ** 2, (1.0 + root) ** 2
    if not lo < x < hi:
        return 0.0
    return math.sqrt((hi - x) * (x - lo)) / (2.0 * math.pi * gamma * x)


def mp_point_mass(gamma):
    """Mass of the atom at zero: max(0, 1 - 1/gamma)"""
    if not gamma > 0:
        raise InvalidConfigError(f"gamma must be positive, got {gamma}")
    return max(0.0, 1.0 - 1.0 / gamma)


def mp_bulk_mass(gamma):
    """
    Integral of mp_density over the bulk by adaptive quadrature.

    Integrates over theta in [0, pi] with x = c - r cos(theta), where c and r
    are the bulk center and half-width. The Jacobian r sin(theta) cancels the
    square-root edges, and the gamma = 1 pole at zero becomes bounded.

    Returns:
        (mass, abserr)
    """
    if not gamma > 0:
        raise InvalidConfigError(f"gamma must be positive, got {gamma}")
    center, half_width = 1.0 + gamma, 2.0 * math.sqrt(gamma)

    def integrand(theta):
        return mp_density(center - half_width * math.cos(theta), gamma) * half_width * math.sin(theta)

    mass, err = integrate.quad(integrand, 0.0, math.pi)
    return mass, err


# --- Monte Carlo drivers ---

def _run_trials(fn, seeds, workers, desc, progress):
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        results = pool.map(fn, seeds)
        return list(tqdm(results, total=len(seeds), desc=desc, disable=not progress, leave=False))


def null_trials(m, d_in, n_trials, seed, ensemble="wishart", eigen_mode=EigenMode.SINGULAR,
                workers=1, progress=False):
    """
    Metrics of n_trials null spectra, trial t seeded with seed + t.

    Args:
        ensemble: 'wishart' (X X^T / d_in, the exact MP ensemble) or
            'cross' (independent W_Q W_K^T / d_in, recorded for reference)

    Returns:
        list of SpectralMetrics in trial order
    """
    if ensemble not in ENSEMBLES:
        raise InvalidConfigError(f"Unknown ensemble '{ensemble}'; choose from {', '.join(ENSEMBLES)}")
    if n_trials < 1:
        raise InvalidConfigError(f"n_trials must be >= 1, got {n_trials}")
    edges = mp_edges(m, d_in)

    def trial(trial_seed):
        if ensemble == "wishart":
            spectrum = wishart_null_spectrum(m, d_in, trial_seed)
        else:
            spectrum = cross_null_spectrum(m, d_in, trial_seed, eigen_mode)
        return spectral_metrics(spectrum, edges)

    seeds = [seed + t for t in range(n_trials)]
    metrics = _run_trials(trial, seeds, workers, f"{ensemble} null", progress)
    logger.info(f"Ran {n_trials} {ensemble} null trials at m={m}, d_in={d_in}")
    return metrics


def spike_trials(m, d_in, thetas, rank, n_trials, seed, eigen_mode=EigenMode.SINGULAR,
                 workers=1, progress=False):
    """
    Planted-spike detection experiment.

    Returns:
        dict: theta -> list of SpectralMetrics (trial t seeded with seed + t)
    """
    if n_trials < 1:
        raise InvalidConfigError(f"n_trials must be >= 1, got {n_trials}")
    edges = mp_edges(m, d_in)
    spec = GramSpec.synthetic(m, d_in, eigen_mode)
    results = {}
    for theta in thetas:
        def trial(trial_seed, theta=theta):
            wq, wk = spiked_pair(m, d_in, theta, rank, trial_seed)
            return spectral_metrics(gram_spectrum(wq, wk, spec), edges)

        seeds = [seed + t for t in range(n_trials)]
        results[theta] = _run_trials(trial, seeds, workers, f"theta={theta:g}", progress)
        detected = sum(1 for r in results[theta] if r.outlier_count >= 1)
        logger.info(f"theta={theta:g}: outliers detected in {detected}/{n_trials} trials")
    return results
