"""Training loop shared by every learner: sweeps, hyperparameter updates,
validation-perplexity early stopping, and trace records.

One root seed per run is split deterministically into independent streams for
initialization, the sampler, and the validation fold-in, so identical configs
reproduce identical runs.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .batch_inference import BATCH_ALGORITHMS, BatchConfig, batch_sweep
from .collapsed_inference import (
    COLLAPSED_ALGORITHMS,
    CollapsedConfig,
    collapsed_sweep,
    init_collapsed_state,
    parallel_cvb0_sweep,
)
from .corpus import Corpus, fold_in_split
from .evaluation import fold_in, perplexity
from .hyperopt import MinkaConfig, minka_update_alpha, minka_update_eta
from .model_state import (
    Hyperparams,
    TopicEstimates,
    estimate_collapsed,
    estimate_map,
    estimate_vb_alternative,
    init_random,
)

__all__ = [
    "ALGORITHMS",
    "ESTIMATORS",
    "TraceRecord",
    "TrainResult",
    "make_config",
    "make_estimates",
    "make_sweeper",
    "train_model",
]

logger = logging.getLogger(__name__)

ALGORITHMS = BATCH_ALGORITHMS + COLLAPSED_ALGORITHMS
ESTIMATORS = ("collapsed", "map", "vb_alternative")

DEFAULT_ESTIMATOR = {
    "ml": "collapsed",
    "map": "map",
    "vb": "collapsed",
    "cgs": "collapsed",
    "cvb": "collapsed",
    "cvb0": "collapsed",
    "pcvb0": "collapsed",
}

# Deterministic sweeps stop once no responsibility moves more than this.
GAMMA_CONVERGENCE_TOL = 1e-4


@dataclass
class TraceRecord:
    iteration: int
    objective: float
    validation_perplexity: float  # nan on iterations without an evaluation
    alpha: float
    eta: float
    seconds: float  # cumulative wall clock since training started


@dataclass(eq=False)
class TrainResult:
    algorithm: str
    K: int
    seed: int
    hyperparams: Hyperparams
    estimates: TopicEstimates
    counts: object
    state: object
    trace: list[TraceRecord]
    iterations_run: int
    seconds: float
    estimator_tag: str
    best_validation_perplexity: float = float("nan")
    best_iteration: int = 0
    threshold_seconds: float | None = None
    threshold_iteration: int | None = None


def make_config(algorithm: str, **kwargs) -> BatchConfig | CollapsedConfig:
    """Build the right config dataclass for `algorithm`, dropping foreign keys."""
    if algorithm in BATCH_ALGORITHMS:
        kwargs.pop("workers", None)
        kwargs.pop("sync_every", None)
        kwargs.pop("remove_current_token", None)
        return BatchConfig(algorithm=algorithm, **kwargs)
    if algorithm in COLLAPSED_ALGORITHMS:
        return CollapsedConfig(algorithm=algorithm, **kwargs)
    raise ValueError(f"unknown algorithm {algorithm!r}")


def make_estimates(algorithm: str, cm, h: Hyperparams, estimator: str | None = None) -> TopicEstimates:
    tag = estimator or DEFAULT_ESTIMATOR[algorithm]
    if tag == "collapsed":
        return estimate_collapsed(cm, h)
    if tag == "map":
        return estimate_map(cm, h)
    if tag == "vb_alternative":
        return estimate_vb_alternative(cm, h)
    raise ValueError(f"unknown estimator {tag!r}")


def _spawn_seeds(seed: int, n: int) -> list[int]:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


def make_sweeper(algorithm: str, corpus: Corpus, K: int, h: Hyperparams, *, seed: int = 0, workers: int = 2, sync_every: int = 4096):
    """Closure running one raw training sweep; used for per-sweep timing."""
    init_seed, gibbs_seed, _, _ = _spawn_seeds(seed, 4)
    if algorithm in BATCH_ALGORITHMS:
        resp, cm = init_random(corpus, K, "entry", init_seed)
        box = {"cm": cm}

        def sweep():
            box["cm"], stats = batch_sweep(algorithm, corpus, resp, box["cm"], h)
            return stats

        return sweep
    state = init_collapsed_state(corpus, K, algorithm, init_seed)
    rng = np.random.default_rng(gibbs_seed)
    if algorithm == "pcvb0":
        return lambda: parallel_cvb0_sweep(state, h, workers=workers, sync_every=sync_every)
    return lambda: collapsed_sweep(algorithm, state, h, rng=rng)


def train_model(
    corpus: Corpus,
    K: int,
    h: Hyperparams,
    config: BatchConfig | CollapsedConfig,
    *,
    validation: Corpus | None = None,
    minka: MinkaConfig | None = None,
    estimator: str | None = None,
    stop_below_perplexity: float | None = None,
) -> TrainResult:
    """Train one model, optionally early-stopping on validation perplexity.

    The validation set is scored by fold-in every `eval_every` sweeps; the
    returned estimates are the snapshot from the best validation evaluation
    (the final state when no validation set is given). Fixed-point
    hyperparameter updates, when enabled, run once per sweep from
    `minka.start_iteration` on.
    """
    algorithm = config.algorithm
    if algorithm == "map":
        h.require_map_valid()
    if minka is not None and algorithm in ("ml", "map"):
        raise ValueError(f"fixed-point hyperparameter updates do not apply to {algorithm}")
    estimator_tag = estimator or DEFAULT_ESTIMATOR[algorithm]

    init_seed, gibbs_seed, valsplit_seed, valfold_seed = _spawn_seeds(config.seed, 4)
    batch = algorithm in BATCH_ALGORITHMS
    if batch:
        resp, cm = init_random(corpus, K, "entry", init_seed)
        state = resp
    else:
        state = init_collapsed_state(corpus, K, algorithm, init_seed)
        cm = state.cm
    rng = np.random.default_rng(gibbs_seed)

    val_fold = fold_in_split(validation, seed=valsplit_seed) if validation is not None else None

    def validation_score(current_cm, current_h):
        est = make_estimates(algorithm, current_cm, current_h, estimator)
        theta = fold_in(
            val_fold, est.phi_hat, algorithm, current_h, estimator=estimator, seed=valfold_seed
        )
        report = perplexity(val_fold.heldout_half, [(est.phi_hat, theta)], estimator_tag=est.estimator_tag)
        return report.perplexity, est

    trace: list[TraceRecord] = []
    best_val = float("inf")
    best_estimates = None
    best_iteration = 0
    stale_evals = 0
    threshold_seconds = None
    threshold_iteration = None
    start = time.perf_counter()
    iteration = 0

    for iteration in range(1, config.max_iterations + 1):
        if batch:
            cm, stats = batch_sweep(algorithm, corpus, state, cm, h)
            objective = stats.objective
            gamma_change = stats.max_gamma_change
        elif algorithm == "pcvb0":
            stats = parallel_cvb0_sweep(state, h, workers=config.workers, sync_every=config.sync_every)
            objective = stats.max_gamma_change
            gamma_change = stats.max_gamma_change
            cm = state.cm
        else:
            stats = collapsed_sweep(
                algorithm, state, h, rng=rng, remove_current_token=config.remove_current_token
            )
            cm = state.cm
            if algorithm == "cgs":
                objective = stats.tokens_changed / max(state.num_tokens, 1)
                gamma_change = float("inf")
            else:
                objective = stats.max_gamma_change
                gamma_change = stats.max_gamma_change

        if minka is not None and iteration >= minka.start_iteration:
            new_alpha = minka_update_alpha(cm, h, minka.gamma_prior[2:4])
            new_eta = minka_update_eta(cm, h, minka.gamma_prior[0:2])
            h = h.with_values(alpha=new_alpha, eta=new_eta)

        val_p = float("nan")
        stop = False
        if val_fold is not None and iteration % config.eval_every == 0:
            val_p, est = validation_score(cm, h)
            if val_p < best_val:
                best_val = val_p
                best_estimates = est
                best_iteration = iteration
                stale_evals = 0
            else:
                stale_evals += 1
            if stop_below_perplexity is not None and val_p < stop_below_perplexity:
                threshold_seconds = time.perf_counter() - start
                threshold_iteration = iteration
                stop = True
            if stale_evals >= config.early_stop_patience:
                stop = True

        trace.append(
            TraceRecord(
                iteration=iteration,
                objective=float(objective),
                validation_perplexity=val_p,
                alpha=h.alpha,
                eta=h.eta,
                seconds=time.perf_counter() - start,
            )
        )
        if stop:
            break
        if algorithm != "cgs" and gamma_change < GAMMA_CONVERGENCE_TOL:
            break

    estimates = best_estimates if best_estimates is not None else make_estimates(algorithm, cm, h, estimator)
    return TrainResult(
        algorithm=algorithm,
        K=K,
        seed=config.seed,
        hyperparams=h,
        estimates=estimates,
        counts=cm,
        state=state,
        trace=trace,
        iterations_run=iteration,
        seconds=time.perf_counter() - start,
        estimator_tag=estimator_tag,
        best_validation_perplexity=best_val if best_estimates is not None else float("nan"),
        best_iteration=best_iteration,
        threshold_seconds=threshold_seconds,
        threshold_iteration=threshold_iteration,
    )
