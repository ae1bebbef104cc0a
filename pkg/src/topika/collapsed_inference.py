"""Collapsed learners: Gibbs sampling and the collapsed variational pair.

All three update one token at a time with counts maintained in place. The
variational pair keeps a full distribution per token (the second-order
variant additionally tracks variance counts); the sampler keeps hard
assignments. A thread-parallel variant of the zeroth-order update shards
tokens by document and reconciles word-side counts through periodic delta
merges.
"""

from __future__ import annotations

import logging
import math
import threading
from dataclasses import dataclass, field
from itertools import product

import numpy as np

from . import _kernels
from .corpus import Corpus
from .model_state import (
    CountMatrices,
    Hyperparams,
    TopicAssignments,
    VarianceCounts,
    counts_from_assignments,
    counts_from_token_gamma,
    init_assignments,
    init_random,
    variances_from_token_gamma,
)

__all__ = [
    "CollapsedConfig",
    "CollapsedState",
    "COLLAPSED_ALGORITHMS",
    "CallenResult",
    "init_collapsed_state",
    "collapsed_conditional",
    "cvb_conditional",
    "cgs_step",
    "cvb0_step",
    "cvb_step",
    "collapsed_sweep",
    "parallel_cvb0_sweep",
    "partition_documents",
    "callen_oracle",
]

logger = logging.getLogger(__name__)

COLLAPSED_ALGORITHMS = ("cgs", "cvb", "cvb0", "pcvb0")

EXPONENT_CAP = 50.0


@dataclass
class CollapsedConfig:
    algorithm: str
    max_iterations: int = 500
    eval_every: int = 2
    early_stop_patience: int = 5
    seed: int = 0
    workers: int = 1
    sync_every: int = 4096
    remove_current_token: bool | None = None  # None = per-algorithm default

    def __post_init__(self):
        if self.algorithm not in COLLAPSED_ALGORITHMS:
            raise ValueError(f"unknown collapsed algorithm {self.algorithm!r}")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if self.sync_every < 1:
            raise ValueError("sync_every must be >= 1")
        if self.remove_current_token is None:
            # Parallel updates keep the current token in: removing it kills
            # the convergence guarantee once counts are stale.
            self.remove_current_token = self.algorithm != "pcvb0"


@dataclass(eq=False)
class CollapsedState:
    """Token stream plus whatever bookkeeping the algorithm maintains."""

    token_word: np.ndarray
    token_doc: np.ndarray
    cm: CountMatrices
    gamma: np.ndarray | None = None  # token-level responsibilities (cvb/cvb0)
    variance: VarianceCounts | None = None  # cvb only
    z: np.ndarray | None = None  # cgs only
    overflow_events: int = field(default=0)

    @property
    def num_tokens(self) -> int:
        return len(self.token_word)


def init_collapsed_state(corpus: Corpus, K: int, algorithm: str, seed: int) -> CollapsedState:
    token_doc, token_word = corpus.tokens()
    if algorithm == "cgs":
        assignments, cm = init_assignments(corpus, K, seed)
        return CollapsedState(token_word=token_word, token_doc=token_doc, cm=cm, z=assignments.z)
    resp, cm = init_random(corpus, K, "token", seed)
    state = CollapsedState(token_word=token_word, token_doc=token_doc, cm=cm, gamma=resp.gamma)
    if algorithm == "cvb":
        state.variance = variances_from_token_gamma(
            token_word, token_doc, resp.gamma, corpus.vocab_size, corpus.num_docs, K
        )
    return state


def collapsed_conditional(cm: CountMatrices, w: int, j: int, h: Hyperparams) -> np.ndarray:
    """Normalized topic conditional from the counts as given.

    This single formula drives both the sampler and the zeroth-order
    variational update; callers are responsible for any current-token
    removal before calling.
    """
    a = np.maximum(cm.n_wk[w, :], 0.0)
    b = np.maximum(cm.n_kj[:, j], 0.0)
    c = np.maximum(cm.n_k, 0.0)
    u = (a + h.eta) / (c + cm.W * h.eta) * (b + h.alpha)
    total = u.sum()
    if total <= 0.0:
        return np.full(cm.K, 1.0 / cm.K)
    return u / total


def cvb_conditional(
    cm: CountMatrices, vc: VarianceCounts, w: int, j: int, h: Hyperparams, cap: float = EXPONENT_CAP
) -> tuple[np.ndarray, int]:
    """Second-order conditional: zeroth-order factor times the variance correction."""
    a = np.maximum(cm.n_wk[w, :], 0.0)
    b = np.maximum(cm.n_kj[:, j], 0.0)
    c = np.maximum(cm.n_k, 0.0)
    va = np.maximum(vc.v_wk[w, :], 0.0)
    vb = np.maximum(vc.v_kj[:, j], 0.0)
    vk = np.maximum(vc.v_k, 0.0)
    an = a + h.eta
    bn = b + h.alpha
    cn = c + cm.W * h.eta
    expo = -vb / (2.0 * bn**2) - va / (2.0 * an**2) + vk / (2.0 * cn**2)
    overflow = int(np.sum(np.abs(expo) > cap))
    expo = np.clip(expo, -cap, cap)
    u = an / cn * bn * np.exp(expo)
    total = u.sum()
    if total <= 0.0:
        return np.full(cm.K, 1.0 / cm.K), overflow
    return u / total, overflow


def _remove_unit(cm: CountMatrices, w: int, j: int, k: int, amount: float = 1.0):
    cm.n_wk[w, k] -= amount
    cm.n_kj[k, j] -= amount
    cm.n_k[k] -= amount
    cm.n_j[j] -= amount


def _remove_gamma(cm: CountMatrices, w: int, j: int, g: np.ndarray):
    cm.n_wk[w, :] -= g
    cm.n_kj[:, j] -= g
    cm.n_k -= g
    cm.n_j[j] -= g.sum()


def _add_gamma(cm: CountMatrices, w: int, j: int, g: np.ndarray):
    cm.n_wk[w, :] += g
    cm.n_kj[:, j] += g
    cm.n_k += g
    cm.n_j[j] += g.sum()


def cgs_step(state: CollapsedState, i: int, h: Hyperparams, rng: np.random.Generator) -> int:
    """Resample token i: remove its unit count, draw from the conditional, re-add."""
    w = int(state.token_word[i])
    j = int(state.token_doc[i])
    old = int(state.z[i])
    _remove_unit(state.cm, w, j, old)
    p = collapsed_conditional(state.cm, w, j, h)
    new = int(np.searchsorted(np.cumsum(p), rng.random(), side="right"))
    new = min(new, state.cm.K - 1)
    state.z[i] = new
    _remove_unit(state.cm, w, j, new, amount=-1.0)
    return new


def cvb0_step(state: CollapsedState, i: int, h: Hyperparams, remove_current: bool = True) -> np.ndarray:
    """Deterministic token update: swap the old responsibility for the conditional."""
    w = int(state.token_word[i])
    j = int(state.token_doc[i])
    old = state.gamma[i].copy()
    if remove_current:
        _remove_gamma(state.cm, w, j, old)
        p = collapsed_conditional(state.cm, w, j, h)
    else:
        p = collapsed_conditional(state.cm, w, j, h)
        _remove_gamma(state.cm, w, j, old)
    state.gamma[i] = p
    _add_gamma(state.cm, w, j, p)
    return p


def cvb_step(state: CollapsedState, i: int, h: Hyperparams, remove_current: bool = True) -> np.ndarray:
    """Second-order token update maintaining mean and variance counts."""
    w = int(state.token_word[i])
    j = int(state.token_doc[i])
    vc = state.variance
    old = state.gamma[i].copy()
    old_var = old * (1.0 - old)

    def remove():
        _remove_gamma(state.cm, w, j, old)
        vc.v_wk[w, :] -= old_var
        vc.v_kj[:, j] -= old_var
        vc.v_k -= old_var

    if remove_current:
        remove()
        p, overflow = cvb_conditional(state.cm, vc, w, j, h)
    else:
        p, overflow = cvb_conditional(state.cm, vc, w, j, h)
        remove()
    state.overflow_events += overflow
    state.gamma[i] = p
    new_var = p * (1.0 - p)
    _add_gamma(state.cm, w, j, p)
    vc.v_wk[w, :] += new_var
    vc.v_kj[:, j] += new_var
    vc.v_k += new_var
    return p


@dataclass
class CollapsedSweepStats:
    max_gamma_change: float = 0.0
    tokens_changed: int = 0
    overflow_events: int = 0
    merges: int = 0


def collapsed_sweep(
    algorithm: str,
    state: CollapsedState,
    h: Hyperparams,
    rng: np.random.Generator | None = None,
    remove_current_token: bool = True,
) -> CollapsedSweepStats:
    """One in-place pass over all tokens in document-major order.

    The sampler consumes one uniform draw per token from `rng`, which makes a
    fixed-seed run bit-for-bit reproducible. Deterministic algorithms report
    the largest single responsibility change instead.
    """
    cm = state.cm
    stats = CollapsedSweepStats()
    if algorithm == "cgs":
        if rng is None:
            raise ValueError("cgs sweep needs an rng")
        uniforms = rng.random(state.num_tokens)
        stats.tokens_changed = int(
            _kernels.cgs_sweep(
                state.token_word, state.token_doc, state.z, cm.n_wk, cm.n_kj, cm.n_k, h.alpha, h.eta, uniforms
            )
        )
    elif algorithm == "cvb0":
        stats.max_gamma_change = float(
            _kernels.cvb0_sweep(
                state.token_word,
                state.token_doc,
                state.gamma,
                cm.n_wk,
                cm.n_kj,
                cm.n_k,
                h.alpha,
                h.eta,
                remove_current_token,
            )
        )
    elif algorithm == "cvb":
        vc = state.variance
        change, overflow = _kernels.cvb_sweep(
            state.token_word,
            state.token_doc,
            state.gamma,
            cm.n_wk,
            cm.n_kj,
            cm.n_k,
            vc.v_wk,
            vc.v_kj,
            vc.v_k,
            h.alpha,
            h.eta,
            remove_current_token,
            EXPONENT_CAP,
        )
        stats.max_gamma_change = float(change)
        stats.overflow_events = int(overflow)
        if overflow:
            state.overflow_events += int(overflow)
            logger.warning("cvb sweep capped %d exponent(s) at +/-%g", overflow, EXPONENT_CAP)
    else:
        raise ValueError(f"unknown sequential collapsed algorithm {algorithm!r}")
    # Per-token moves preserve each document's total, so only n_j is exact;
    # refresh it cheaply and leave the heavy marginals to the kernels.
    cm.n_j = cm.n_kj.sum(axis=0)
    return stats


def partition_documents(token_doc: np.ndarray, num_docs: int, workers: int) -> list[tuple[int, int]]:
    """Split the token range into per-worker spans aligned on document boundaries."""
    num_tokens = len(token_doc)
    workers = max(1, min(workers, num_docs))
    doc_starts = np.searchsorted(token_doc, np.arange(num_docs))
    bounds = [0]
    for w in range(1, workers):
        target = round(w * num_tokens / workers)
        # snap to the nearest following document boundary
        idx = int(np.searchsorted(doc_starts, target))
        cut = int(doc_starts[idx]) if idx < num_docs else num_tokens
        bounds.append(max(cut, bounds[-1]))
    bounds.append(num_tokens)
    return [(bounds[i], bounds[i + 1]) for i in range(workers)]


def parallel_cvb0_sweep(
    state: CollapsedState,
    h: Hyperparams,
    workers: int,
    sync_every: int = 4096,
    on_sync=None,
) -> CollapsedSweepStats:
    """Token-parallel zeroth-order sweep over document shards.

    Each worker walks its shard against a private copy of the word-side
    counts, folding `(new - old)` responsibility deltas in as it goes;
    document-side counts need no coordination because shards own disjoint
    documents. Every `sync_every` tokens the worker folds its accumulated
    word-side delta into the shared counts under a lock and re-snapshots.
    After the sweep the shared counts equal the rebuild from all
    responsibilities (up to float rounding). `on_sync(cm)` is called under
    the lock after every merge.
    """
    if state.gamma is None:
        raise ValueError("parallel sweep requires token responsibilities")
    cm = state.cm
    spans = partition_documents(state.token_doc, cm.D, workers)
    lock = threading.Lock()
    stats = CollapsedSweepStats()

    def run_shard(span):
        start, end = span
        local_nwk = None
        with lock:
            local_nwk = cm.n_wk.copy()
            local_nk = cm.n_k.copy()
        snap_nwk = local_nwk.copy()
        snap_nk = local_nk.copy()
        pos = start
        shard_change = 0.0
        merges = 0
        while pos < end:
            stop = min(pos + sync_every, end)
            change = _kernels.pcvb0_chunk(
                state.token_word,
                state.token_doc,
                state.gamma,
                pos,
                stop,
                local_nwk,
                local_nk,
                cm.n_kj,
                h.alpha,
                h.eta,
            )
            shard_change = max(shard_change, float(change))
            pos = stop
            with lock:
                cm.n_wk += local_nwk - snap_nwk
                cm.n_k += local_nk - snap_nk
                merges += 1
                np.copyto(snap_nwk, cm.n_wk)
                np.copyto(snap_nk, cm.n_k)
                if on_sync is not None:
                    on_sync(cm)
            np.copyto(local_nwk, snap_nwk)
            np.copyto(local_nk, snap_nk)
        return shard_change, merges

    if len(spans) == 1:
        change, merges = run_shard(spans[0])
        stats.max_gamma_change = change
        stats.merges = merges
    else:
        results = [None] * len(spans)

        def target(idx):
            results[idx] = run_shard(spans[idx])

        threads = [threading.Thread(target=target, args=(i,)) for i in range(len(spans))]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        stats.max_gamma_change = max(r[0] for r in results)
        stats.merges = sum(r[1] for r in results)
    cm.n_j = cm.n_kj.sum(axis=0)
    return stats


# --- exact posterior oracle ----------------------------------------------------


@dataclass
class CallenResult:
    marginals: np.ndarray  # num_tokens x K, exact P(z_i = k | x)
    callen_residual: float  # max |marginal - E[conditional]| over tokens/topics


def callen_oracle(corpus: Corpus, K: int, h: Hyperparams, max_configs: int = 10**7) -> CallenResult:
    """Exact per-token topic marginals by enumerating every assignment.

    Weights each configuration by the collapsed joint of counts under the
    symmetric Dirichlet priors, and simultaneously checks the self-consistency
    identity: the posterior expectation of the normalized single-token
    conditional must reproduce the marginal.
    """
    token_doc, token_word = corpus.tokens()
    N = len(token_doc)
    if K**N > max_configs:
        raise ValueError(f"enumeration infeasible: K^N = {K}^{N} exceeds {max_configs}")
    W = corpus.vocab_size
    D = corpus.num_docs

    configs = list(product(range(K), repeat=N))
    log_weights = np.empty(len(configs))
    for idx, zs in enumerate(configs):
        n_wk = np.zeros((W, K))
        n_kj = np.zeros((K, D))
        for i, k in enumerate(zs):
            n_wk[token_word[i], k] += 1
            n_kj[k, token_doc[i]] += 1
        n_k = n_wk.sum(axis=0)
        lw = 0.0
        for k in range(K):
            for w in range(W):
                lw += math.lgamma(n_wk[w, k] + h.eta)
            lw -= math.lgamma(n_k[k] + W * h.eta)
            for j in range(D):
                lw += math.lgamma(n_kj[k, j] + h.alpha)
        log_weights[idx] = lw
    log_weights -= log_weights.max()
    probs = np.exp(log_weights)
    probs /= probs.sum()

    marginals = np.zeros((N, K))
    expected_conditional = np.zeros((N, K))
    for idx, zs in enumerate(configs):
        p = probs[idx]
        n_wk = np.zeros((W, K))
        n_kj = np.zeros((K, D))
        for i, k in enumerate(zs):
            n_wk[token_word[i], k] += 1
            n_kj[k, token_doc[i]] += 1
        n_k = n_wk.sum(axis=0)
        for i, k in enumerate(zs):
            marginals[i, k] += p
            w = token_word[i]
            j = token_doc[i]
            a = n_wk[w, :].copy()
            b = n_kj[:, j].copy()
            c = n_k.copy()
            a[k] -= 1
            b[k] -= 1
            c[k] -= 1
            u = (a + h.eta) / (c + W * h.eta) * (b + h.alpha)
            expected_conditional[i, :] += p * (u / u.sum())
    residual = float(np.max(np.abs(marginals - expected_conditional)))
    return CallenResult(marginals=marginals, callen_residual=residual)
