"""Batch learners: likelihood EM, posterior-mode EM, and variational updates.

All three recompute one responsibility per unique (word, doc) entry against
the frozen counts of the previous sweep, then rebuild the counts in a single
reduction. The per-entry functions are the reference forms; `batch_sweep`
runs the identical arithmetic vectorized over all entries.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .corpus import Corpus
from .model_state import (
    CountMatrices,
    Hyperparams,
    Responsibilities,
    TopicEstimates,
    counts_from_entry_gamma,
    digamma,
    estimate_collapsed,
    estimate_map,
)

__all__ = [
    "BatchConfig",
    "SweepStats",
    "BATCH_ALGORITHMS",
    "ml_update",
    "map_update",
    "vb_update",
    "vb_approx_update",
    "batch_sweep",
    "log_likelihood",
    "map_log_joint",
]

logger = logging.getLogger(__name__)

BATCH_ALGORITHMS = ("ml", "map", "vb")

_FACTOR_FLOOR = 1e-12


@dataclass
class BatchConfig:
    algorithm: str
    max_iterations: int = 500
    eval_every: int = 2
    early_stop_patience: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.algorithm not in BATCH_ALGORITHMS:
            raise ValueError(f"unknown batch algorithm {self.algorithm!r}")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")


@dataclass
class SweepStats:
    objective: float
    max_gamma_change: float


def _safe_inverse(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0, 1.0 / np.where(x > 0, x, 1.0), 0.0)


def _factors(algorithm: str, cm: CountMatrices, h: Hyperparams | None):
    """Per-topic numerator/denominator factors shared by every entry.

    Returns (word_factor WxK, doc_factor KxD, inv_topic_denominator K).
    """
    W = cm.W
    if algorithm == "ml":
        dead = cm.n_k <= 0.0
        if np.any(dead):
            logger.warning("ml update: %d topic(s) have zero mass and stay dead", int(dead.sum()))
        return cm.n_wk, cm.n_kj, _safe_inverse(cm.n_k)
    if algorithm == "map":
        h.require_map_valid()
        return (
            cm.n_wk + h.eta - 1.0,
            cm.n_kj + h.alpha - 1.0,
            1.0 / (cm.n_k + W * h.eta - W),
        )
    if algorithm == "vb":
        return (
            np.exp(digamma(cm.n_wk + h.eta)),
            np.exp(digamma(cm.n_kj + h.alpha)),
            np.exp(-digamma(cm.n_k + W * h.eta)),
        )
    if algorithm == "vb_approx":
        return (
            np.maximum(cm.n_wk + h.eta - 0.5, _FACTOR_FLOOR),
            np.maximum(cm.n_kj + h.alpha - 0.5, _FACTOR_FLOOR),
            1.0 / np.maximum(cm.n_k + W * h.eta - 0.5, _FACTOR_FLOOR),
        )
    raise ValueError(f"unknown batch algorithm {algorithm!r}")


def _normalize_rows(u: np.ndarray) -> np.ndarray:
    total = u.sum(axis=-1, keepdims=True)
    bad = total <= 0.0
    if np.any(bad):
        logger.warning("normalization fallback to uniform for %d entries", int(bad.sum()))
        u = np.where(bad, 1.0, u)
        total = u.sum(axis=-1, keepdims=True)
    return u / total


def _entry_update(algorithm: str, entry, cm: CountMatrices, h: Hyperparams | None) -> np.ndarray:
    w, j, _ = entry
    wf, jf, inv_k = _factors(algorithm, cm, h)
    return _normalize_rows(wf[w, :] * jf[:, j] * inv_k)


def ml_update(entry, cm: CountMatrices) -> np.ndarray:
    """Responsibility for one entry: counts product over the topic total."""
    return _entry_update("ml", entry, cm, None)


def map_update(entry, cm: CountMatrices, h: Hyperparams) -> np.ndarray:
    """Responsibility with the -1 prior offsets; needs alpha, eta > 1."""
    return _entry_update("map", entry, cm, h)


def vb_update(entry, cm: CountMatrices, h: Hyperparams) -> np.ndarray:
    """Variational responsibility built from exp(digamma) of smoothed counts."""
    return _entry_update("vb", entry, cm, h)


def vb_approx_update(entry, cm: CountMatrices, h: Hyperparams) -> np.ndarray:
    """The -0.5 offset approximation of the variational update.

    Diagnostic form; negative factors are clamped to a tiny positive floor so
    the result stays a distribution.
    """
    return _entry_update("vb_approx", entry, cm, h)


def _ml_parameters(cm: CountMatrices) -> tuple[np.ndarray, np.ndarray]:
    phi = cm.n_wk * _safe_inverse(cm.n_k)[None, :]
    theta = cm.n_kj * _safe_inverse(cm.n_j)[None, :]
    return phi, theta


def _entry_log_likelihood(corpus: Corpus, phi: np.ndarray, theta: np.ndarray) -> float:
    p = np.einsum("ek,ek->e", phi[corpus.word_ids, :], theta[:, corpus.doc_ids].T)
    return float(np.dot(corpus.counts, np.log(p)))


def log_likelihood(corpus: Corpus, estimates: TopicEstimates) -> float:
    """Sum over entries of count * log(sum_k phi_wk theta_kj); always <= 0."""
    return _entry_log_likelihood(corpus, estimates.phi_hat, estimates.theta_hat)


def map_log_joint(corpus: Corpus, cm: CountMatrices, h: Hyperparams) -> float:
    """Data log-likelihood plus the Dirichlet log-prior terms, at the mode."""
    est = estimate_map(cm, h)
    prior = (h.eta - 1.0) * float(np.log(est.phi_hat).sum()) + (h.alpha - 1.0) * float(
        np.log(est.theta_hat).sum()
    )
    return log_likelihood(corpus, est) + prior


def _objective(algorithm: str, corpus: Corpus, cm: CountMatrices, h: Hyperparams | None) -> float:
    if algorithm == "ml":
        phi, theta = _ml_parameters(cm)
        return _entry_log_likelihood(corpus, phi, theta)
    if algorithm == "map":
        return map_log_joint(corpus, cm, h)
    # For VB the exact free energy is not tracked; report the data
    # log-likelihood under the standard estimates as a progress proxy.
    return log_likelihood(corpus, estimate_collapsed(cm, h))


def batch_sweep(
    algorithm: str,
    corpus: Corpus,
    resp: Responsibilities,
    cm: CountMatrices,
    h: Hyperparams | None = None,
) -> tuple[CountMatrices, SweepStats]:
    """One synchronous sweep: recompute all entry responsibilities against the
    frozen counts, then rebuild the counts from the new responsibilities.

    Mutates `resp.gamma` in place and returns the rebuilt counts with
    (objective, max responsibility change). The objective is the data
    log-likelihood for ml, the log joint for map, and a likelihood proxy
    for vb.
    """
    if resp.layout != "entry":
        raise ValueError("batch algorithms require entry-layout responsibilities")
    wf, jf, inv_k = _factors(algorithm, cm, h)
    unnorm = wf[corpus.word_ids, :] * jf[:, corpus.doc_ids].T * inv_k[None, :]
    gamma_new = _normalize_rows(unnorm)
    max_change = float(np.max(np.abs(gamma_new - resp.gamma))) if gamma_new.size else 0.0
    resp.gamma[...] = gamma_new
    cm_new = counts_from_entry_gamma(corpus, gamma_new, cm.K)
    stats = SweepStats(
        objective=_objective(algorithm, corpus, cm_new, h),
        max_gamma_change=max_change,
    )
    return cm_new, stats
