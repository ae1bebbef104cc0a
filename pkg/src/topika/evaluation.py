"""Held-out evaluation: fold-in inference, perplexity, classification, timing.

Fold-in learns document mixtures for test documents on the observed half of
each document while the word-topic estimates stay frozen, using the same
update family as training. Perplexity is scored on the heldout half, with
optional averaging over estimates from multiple runs.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from statistics import median

import numpy as np

from . import _kernels
from .corpus import Corpus, FoldInSplit, SplitCorpus, fold_in_split
from .model_state import Hyperparams, digamma

__all__ = [
    "PerplexityReport",
    "ClassificationReport",
    "BenchResult",
    "fold_in",
    "perplexity",
    "classify_and_score",
    "timing_benchmark",
    "sweep_timing",
    "load_labels",
]

logger = logging.getLogger(__name__)

FOLD_IN_MAX_SWEEPS = 50
FOLD_IN_TOL = 1e-5

_BATCH_FOLDIN = ("ml", "map", "vb")
_COLLAPSED_FOLDIN = ("cgs", "cvb", "cvb0", "pcvb0")


@dataclass
class PerplexityReport:
    perplexity: float
    log_likelihood: float
    heldout_tokens: int
    estimator_tag: str
    samples_averaged: int


@dataclass
class ClassificationReport:
    mean_auc: float
    mean_average_precision: float
    per_class_auc: list[tuple[int, float]]


def _theta_estimate(estimator: str, n_kj: np.ndarray, n_j: np.ndarray, h: Hyperparams) -> np.ndarray:
    K = n_kj.shape[0]
    if estimator == "collapsed":
        return (n_kj + h.alpha) / (n_j + K * h.alpha)
    if estimator == "map":
        return (n_kj + h.alpha - 1.0) / (n_j + K * h.alpha - K)
    if estimator == "vb_alternative":
        theta = np.exp(digamma(n_kj + h.alpha) - digamma(n_j + K * h.alpha)[None, :])
        return theta / theta.sum(axis=0, keepdims=True)
    raise ValueError(f"unknown estimator {estimator!r}")


def default_estimator(algorithm: str) -> str:
    return "map" if algorithm == "map" else "collapsed"


def _batch_theta_factor(algorithm: str, n_kj: np.ndarray, h: Hyperparams) -> np.ndarray:
    if algorithm == "ml":
        return n_kj
    if algorithm == "map":
        return n_kj + h.alpha - 1.0
    return np.exp(digamma(n_kj + h.alpha))  # vb


def _scatter_doc_counts(doc_ids, weights, D, K) -> np.ndarray:
    n_kj = np.empty((K, D))
    for k in range(K):
        n_kj[k, :] = np.bincount(doc_ids, weights=weights[:, k], minlength=D)
    return n_kj


def fold_in(
    test_fold: FoldInSplit,
    phi_hat: np.ndarray,
    algorithm: str,
    h: Hyperparams,
    *,
    estimator: str | None = None,
    max_sweeps: int = FOLD_IN_MAX_SWEEPS,
    tol: float = FOLD_IN_TOL,
    seed: int = 0,
) -> np.ndarray:
    """Learn theta for every test document on its observed half, phi frozen.

    Runs the document-side factor of the named training algorithm until the
    estimate moves less than `tol` or `max_sweeps` passes complete, then
    applies the document-side point estimate. Returns a K x D_test
    column-stochastic array; `phi_hat` is never written.
    """
    observed = test_fold.observed_half
    K = phi_hat.shape[1]
    D = observed.num_docs
    est_tag = estimator or default_estimator(algorithm)
    if algorithm == "map":
        h.require_map_valid()
    rng = np.random.default_rng(seed)
    n_j = observed.doc_lengths().astype(np.float64)

    if algorithm in _BATCH_FOLDIN:
        gamma = (
            rng.dirichlet(np.ones(K), size=observed.num_entries)
            if K > 1
            else np.ones((observed.num_entries, 1))
        )
        weights = observed.counts[:, None] * gamma
        n_kj = _scatter_doc_counts(observed.doc_ids, weights, D, K)
        theta = _theta_estimate(est_tag, n_kj, np.maximum(n_j, 1.0), h)
        for _ in range(max_sweeps):
            factor = _batch_theta_factor(algorithm, n_kj, h)
            unnorm = phi_hat[observed.word_ids, :] * factor[:, observed.doc_ids].T
            totals = unnorm.sum(axis=1, keepdims=True)
            totals[totals <= 0.0] = 1.0
            gamma = unnorm / totals
            n_kj = _scatter_doc_counts(observed.doc_ids, observed.counts[:, None] * gamma, D, K)
            theta_new = _theta_estimate(est_tag, n_kj, np.maximum(n_j, 1.0), h)
            change = float(np.max(np.abs(theta_new - theta))) if theta.size else 0.0
            theta = theta_new
            if change < tol:
                break
        return theta

    if algorithm not in _COLLAPSED_FOLDIN:
        raise ValueError(f"unknown algorithm {algorithm!r}")
    token_doc, token_word = observed.tokens()
    num_tokens = len(token_doc)
    if algorithm == "cgs":
        z = rng.integers(0, K, size=num_tokens)
        n_kj = np.zeros((K, D))
        np.add.at(n_kj, (z, token_doc), 1.0)
        for _ in range(max_sweeps):
            _kernels.foldin_cgs_sweep(phi_hat, token_word, token_doc, z, n_kj, h.alpha, rng.random(num_tokens))
        return _theta_estimate(est_tag, n_kj, np.maximum(n_j, 1.0), h)

    gamma = rng.dirichlet(np.ones(K), size=num_tokens) if K > 1 else np.ones((num_tokens, 1))
    n_kj = _scatter_doc_counts(token_doc, gamma, D, K)
    if algorithm == "cvb":
        v_kj = _scatter_doc_counts(token_doc, gamma * (1.0 - gamma), D, K)
        for _ in range(max_sweeps):
            change, _ = _kernels.foldin_cvb_sweep(
                phi_hat, token_word, token_doc, gamma, n_kj, v_kj, h.alpha, True, 50.0
            )
            if change < tol:
                break
    else:  # cvb0 and its parallel twin share the sequential fold-in
        remove = algorithm != "pcvb0"
        for _ in range(max_sweeps):
            change = _kernels.foldin_cvb0_sweep(
                phi_hat, token_word, token_doc, gamma, n_kj, h.alpha, remove
            )
            if change < tol:
                break
    return _theta_estimate(est_tag, n_kj, np.maximum(n_j, 1.0), h)


def perplexity(
    heldout: Corpus,
    estimates: list[tuple[np.ndarray, np.ndarray]],
    estimator_tag: str = "collapsed",
) -> PerplexityReport:
    """Heldout perplexity, averaging entry probabilities over S estimate pairs."""
    if not estimates:
        raise ValueError("need at least one (phi, theta) pair")
    if heldout.total_tokens <= 0:
        raise ValueError("heldout corpus has no tokens")
    mean_p = np.zeros(heldout.num_entries)
    for phi, theta in estimates:
        mean_p += np.einsum("ek,ek->e", phi[heldout.word_ids, :], theta[:, heldout.doc_ids].T)
    mean_p /= len(estimates)
    if np.any(mean_p <= 0.0):
        raise ValueError("zero probability for a heldout entry; estimates must be positive")
    ll = float(np.dot(heldout.counts, np.log(mean_p)))
    return PerplexityReport(
        perplexity=float(np.exp(-ll / heldout.total_tokens)),
        log_likelihood=ll,
        heldout_tokens=heldout.total_tokens,
        estimator_tag=estimator_tag,
        samples_averaged=len(estimates),
    )


# --- classification -------------------------------------------------------------


def _midranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(len(x))
    sorted_x = x[order]
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and sorted_x[j + 1] == sorted_x[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def _auc(scores: np.ndarray, positive: np.ndarray) -> float:
    n_pos = int(positive.sum())
    n_neg = len(scores) - n_pos
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    ranks = _midranks(scores)
    return float((ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def _average_precision(scores: np.ndarray, positive: np.ndarray) -> float:
    n_pos = int(positive.sum())
    if n_pos == 0:
        return float("nan")
    order = np.argsort(-scores, kind="mergesort")
    hits = positive[order]
    cum_hits = np.cumsum(hits)
    precision_at = cum_hits / np.arange(1, len(scores) + 1)
    return float(precision_at[hits].sum() / n_pos)


def classify_and_score(
    train_thetas: np.ndarray,
    train_labels: np.ndarray,
    test_thetas: np.ndarray,
    test_labels: np.ndarray,
) -> ClassificationReport:
    """Centroid scorer: cosine similarity of a test mixture to each class mean.

    One-vs-rest AUC per class via the midrank statistic, mean average
    precision over the same rankings; classes without training documents are
    excluded with a warning.
    """
    train_labels = np.asarray(train_labels)
    test_labels = np.asarray(test_labels)
    if train_thetas.shape[1] != len(train_labels):
        raise ValueError("one label per training document required")
    if test_thetas.shape[1] != len(test_labels):
        raise ValueError("one label per test document required")
    classes = np.unique(np.concatenate([train_labels, test_labels]))
    test_cols = test_thetas / np.maximum(np.linalg.norm(test_thetas, axis=0, keepdims=True), 1e-300)

    per_class_auc = []
    aps = []
    for c in classes:
        members = train_labels == c
        if not members.any():
            logger.warning("class %s has no training documents; excluded", c)
            continue
        centroid = train_thetas[:, members].mean(axis=1)
        centroid /= max(float(np.linalg.norm(centroid)), 1e-300)
        scores = centroid @ test_cols
        positive = test_labels == c
        auc = _auc(scores, positive)
        ap = _average_precision(scores, positive)
        if np.isnan(auc):
            logger.warning("class %s has no positives or no negatives in the test set", c)
            continue
        per_class_auc.append((int(c), auc))
        aps.append(ap)
    if not per_class_auc:
        raise ValueError("no scorable classes")
    return ClassificationReport(
        mean_auc=float(np.mean([a for _, a in per_class_auc])),
        mean_average_precision=float(np.mean(aps)),
        per_class_auc=per_class_auc,
    )


def load_labels(stream_or_path, num_docs: int) -> np.ndarray:
    """Read one integer class per line; line i labels document i."""
    if hasattr(stream_or_path, "read"):
        lines = stream_or_path.read().splitlines()
    else:
        with open(stream_or_path) as f:
            lines = f.read().splitlines()
    labels = [int(line) for line in lines if line.strip()]
    if len(labels) != num_docs:
        raise ValueError(f"labels file has {len(labels)} entries, corpus has {num_docs} documents")
    return np.asarray(labels, dtype=np.int64)


# --- timing ----------------------------------------------------------------------


@dataclass
class BenchResult:
    algorithm: str
    seconds_to_threshold: float | None
    sweeps_to_threshold: int | None
    per_sweep_seconds: float
    timed_out: bool


def sweep_timing(algorithms, corpus: Corpus, K: int, h: Hyperparams, *, sweeps: int = 5, seed: int = 0):
    """Median wall-clock seconds per full training sweep, after a JIT warm-up."""
    from .training import make_sweeper  # local import: training builds on this module

    out = {}
    for algorithm in algorithms:
        sweeper = make_sweeper(algorithm, corpus, K, h, seed=seed)
        sweeper()  # warm-up: numba compilation and cache effects
        times = []
        for _ in range(sweeps):
            t0 = time.perf_counter()
            sweeper()
            times.append(time.perf_counter() - t0)
        out[algorithm] = median(times)
    return out


def timing_benchmark(
    algorithms,
    split: SplitCorpus,
    K: int,
    h: Hyperparams,
    threshold: float,
    *,
    max_iterations: int = 500,
    eval_every: int = 2,
    seed: int = 0,
    repeats: int = 3,
    workers: int = 1,
):
    """Wall-clock seconds for each algorithm to first dip below the validation
    perplexity threshold (median over `repeats` runs), plus per-sweep cost.

    Algorithms that never pass within `max_iterations` are reported as timed
    out rather than raising.
    """
    from .training import make_config, train_model

    per_sweep = sweep_timing(algorithms, split.train, K, h, seed=seed)
    results = {}
    for algorithm in algorithms:
        seconds_runs, sweeps_runs = [], []
        timed_out = False
        for _ in range(repeats):
            config = make_config(
                algorithm,
                max_iterations=max_iterations,
                eval_every=eval_every,
                seed=seed,
                workers=workers,
                early_stop_patience=10**9,  # only the threshold stops the run
            )
            result = train_model(
                split.train, K, h, config, validation=split.validation, stop_below_perplexity=threshold
            )
            if result.threshold_seconds is None:
                timed_out = True
                break
            seconds_runs.append(result.threshold_seconds)
            sweeps_runs.append(result.threshold_iteration)
        results[algorithm] = BenchResult(
            algorithm=algorithm,
            seconds_to_threshold=None if timed_out else median(seconds_runs),
            sweeps_to_threshold=None if timed_out else int(median(sweeps_runs)),
            per_sweep_seconds=per_sweep[algorithm],
            timed_out=timed_out,
        )
    return results


def heldout_perplexity(
    test: Corpus,
    phi_hat: np.ndarray,
    algorithm: str,
    h: Hyperparams,
    *,
    estimator: str | None = None,
    foldin_seed: int = 0,
    split_seed: int = 0,
) -> PerplexityReport:
    """Convenience: fold-in split of `test`, theta inference, heldout scoring."""
    fold = fold_in_split(test, seed=split_seed)
    theta = fold_in(fold, phi_hat, algorithm, h, estimator=estimator, seed=foldin_seed)
    return perplexity(
        fold.heldout_half, [(phi_hat, theta)], estimator_tag=estimator or default_estimator(algorithm)
    )
