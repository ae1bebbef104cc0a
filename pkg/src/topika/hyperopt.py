"""Hyperparameter learning: fixed-point updates and validation grid search.

The fixed-point step re-estimates one symmetric Dirichlet strength from the
current counts under an optional Gamma prior; with the default flat prior it
is the pure maximum-likelihood iteration. Grid search trains one model per
(alpha, eta) cell and ranks cells by validation perplexity.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from itertools import product

import numpy as np

from .corpus import SplitCorpus
from .model_state import CountMatrices, Hyperparams, digamma

__all__ = [
    "GridSpec",
    "MinkaConfig",
    "GridCell",
    "GridSearchResult",
    "PAPER_GRID",
    "minka_update_alpha",
    "minka_update_eta",
    "iterate_minka",
    "grid_search",
]

logger = logging.getLogger(__name__)

# Validation grid used throughout the experiments; MAP shifts it right by one.
PAPER_GRID = (0.01, 0.1, 0.25, 0.5, 0.75, 1.0)

_CLAMP_LO = 1e-6
_CLAMP_HI = 1e3


@dataclass
class GridSpec:
    alpha_values: tuple[float, ...] = PAPER_GRID
    eta_values: tuple[float, ...] = PAPER_GRID
    map_shift: float = 1.0

    def __post_init__(self):
        self.alpha_values = tuple(float(v) for v in self.alpha_values)
        self.eta_values = tuple(float(v) for v in self.eta_values)
        if not self.alpha_values or not self.eta_values:
            raise ValueError("grid value lists must be non-empty")
        if min(self.alpha_values) <= 0 or min(self.eta_values) <= 0:
            raise ValueError("grid values must be positive")

    def effective_values(self, algorithm: str) -> tuple[tuple[float, ...], tuple[float, ...]]:
        if algorithm == "map":
            alphas = tuple(v + self.map_shift for v in self.alpha_values)
            etas = tuple(v + self.map_shift for v in self.eta_values)
            if min(alphas) <= 1 or min(etas) <= 1:
                raise ValueError("shifted MAP grid must be strictly greater than 1")
            return alphas, etas
        return self.alpha_values, self.eta_values


@dataclass
class MinkaConfig:
    start_iteration: int = 15
    gamma_prior: tuple[float, float, float, float] = (1.0, 0.0, 1.0, 0.0)
    max_inner_iterations: int = 200
    tolerance: float = 1e-8

    def __post_init__(self):
        if self.start_iteration < 1:
            raise ValueError("start_iteration must be >= 1")


def _fixed_point(value: float, shape_minus_one: float, rate: float, stat_sum: float, denom_sum: float, what: str) -> float:
    numerator = shape_minus_one + value * stat_sum
    denominator = rate + denom_sum
    with np.errstate(invalid="ignore", divide="ignore"):
        new = numerator / denominator if denominator != 0.0 else float("nan")
    if not np.isfinite(new) or new <= 0.0:
        logger.warning("%s fixed-point step produced %r; retaining %g", what, new, value)
        return value
    return float(min(max(new, _CLAMP_LO), _CLAMP_HI))


def minka_update_alpha(cm: CountMatrices, h: Hyperparams, prior: tuple[float, float] | None = None) -> float:
    """One fixed-point step for the document-topic strength.

    Uses the Gamma[c, d] prior (defaulting to the one carried by `h`); a
    non-finite or non-positive step retains the previous value with a warning,
    and results are clamped to [1e-6, 1e3].
    """
    c, d = prior if prior is not None else h.gamma_prior[2:4]
    a = h.alpha
    K, D = cm.n_kj.shape
    stat = float(digamma(cm.n_kj + a).sum()) - K * D * float(digamma(a))
    denom = K * (float(digamma(cm.n_j + K * a).sum()) - D * float(digamma(K * a)))
    return _fixed_point(a, c - 1.0, d, stat, denom, "alpha")


def minka_update_eta(cm: CountMatrices, h: Hyperparams, prior: tuple[float, float] | None = None) -> float:
    """Word-side mirror of the alpha step: roles W<->K, N_wk<->N_kj, N_k<->N_j."""
    a_prior, b_prior = prior if prior is not None else h.gamma_prior[0:2]
    e = h.eta
    W, K = cm.n_wk.shape
    stat = float(digamma(cm.n_wk + e).sum()) - W * K * float(digamma(e))
    denom = W * (float(digamma(cm.n_k + W * e).sum()) - K * float(digamma(W * e)))
    return _fixed_point(e, a_prior - 1.0, b_prior, stat, denom, "eta")


def iterate_minka(
    cm: CountMatrices,
    h: Hyperparams,
    config: MinkaConfig | None = None,
    update_alpha: bool = True,
    update_eta: bool = True,
) -> Hyperparams:
    """Iterate both fixed points on frozen counts until they stop moving."""
    config = config or MinkaConfig()
    for _ in range(config.max_inner_iterations):
        new_alpha = minka_update_alpha(cm, h, config.gamma_prior[2:4]) if update_alpha else h.alpha
        new_eta = minka_update_eta(cm, h, config.gamma_prior[0:2]) if update_eta else h.eta
        delta = max(abs(new_alpha - h.alpha), abs(new_eta - h.eta))
        h = h.with_values(alpha=new_alpha, eta=new_eta)
        if delta < config.tolerance:
            break
    return h


# --- grid search ------------------------------------------------------------------


@dataclass
class GridCell:
    algorithm: str
    alpha: float
    eta: float
    K: int
    seed: int
    validation_perplexity: float = float("nan")
    test_perplexity: float = float("nan")
    iterations_run: int = 0
    seconds: float = 0.0
    valid: bool = False
    error: str | None = None

    def key(self) -> tuple:
        return (self.algorithm, round(self.alpha, 12), round(self.eta, 12), self.K, self.seed)


@dataclass
class GridSearchResult:
    algorithm: str
    best_alpha: float
    best_eta: float
    cells: list[GridCell] = field(default_factory=list)

    @property
    def best_cell(self) -> GridCell:
        return _argmin_cell(self.cells)


def _argmin_cell(cells: list[GridCell]) -> GridCell:
    best = None
    for cell in cells:
        if not cell.valid:
            continue
        if best is None or cell.validation_perplexity < best.validation_perplexity:
            best = cell
        elif cell.validation_perplexity == best.validation_perplexity:
            # deterministic tie-break: prefer more smoothing
            if (cell.eta, cell.alpha) > (best.eta, best.alpha):
                best = cell
    if best is None:
        raise ValueError("no grid cell trained successfully")
    return best


def grid_search(
    algorithm: str,
    split: SplitCorpus,
    grid: GridSpec,
    K: int,
    *,
    max_iterations: int = 500,
    eval_every: int = 2,
    early_stop_patience: int = 5,
    seed: int = 0,
    estimator: str | None = None,
    workers: int = 1,
    skip_cells: dict[tuple, GridCell] | None = None,
    progress=None,
) -> GridSearchResult:
    """Train one model per grid cell and rank by validation perplexity.

    Returns the full table (every cell present, invalid ones flagged) and the
    argmin cell, ties broken toward larger eta then larger alpha. Cells whose
    key appears in `skip_cells` are reused, which makes reruns resumable.
    Deterministic for a fixed seed.
    """
    import time as _time

    from .evaluation import fold_in, fold_in_split, perplexity
    from .training import make_config, train_model

    alphas, etas = grid.effective_values(algorithm)
    test_fold = fold_in_split(split.test, seed=seed)
    cells = []
    for alpha, eta in product(alphas, etas):
        cell = GridCell(algorithm=algorithm, alpha=alpha, eta=eta, K=K, seed=seed)
        if skip_cells and cell.key() in skip_cells:
            cells.append(skip_cells[cell.key()])
            continue
        t0 = _time.perf_counter()
        try:
            h = Hyperparams(alpha=alpha, eta=eta)
            config = make_config(
                algorithm,
                max_iterations=max_iterations,
                eval_every=eval_every,
                early_stop_patience=early_stop_patience,
                seed=seed,
                workers=workers,
            )
            result = train_model(
                split.train, K, h, config, validation=split.validation, estimator=estimator
            )
            theta_test = fold_in(
                test_fold, result.estimates.phi_hat, algorithm, h, estimator=estimator, seed=seed
            )
            test_rep = perplexity(test_fold.heldout_half, [(result.estimates.phi_hat, theta_test)])
            cell.validation_perplexity = result.best_validation_perplexity
            cell.test_perplexity = test_rep.perplexity
            cell.iterations_run = result.iterations_run
            cell.valid = True
        except Exception as exc:  # noqa: BLE001 - a failed cell must not kill the sweep
            cell.error = f"{type(exc).__name__}: {exc}"
            logger.warning("grid cell alpha=%g eta=%g failed: %s", alpha, eta, cell.error)
        cell.seconds = _time.perf_counter() - t0
        cells.append(cell)
        if progress is not None:
            progress(cell)
    best = _argmin_cell(cells)
    return GridSearchResult(algorithm=algorithm, best_alpha=best.alpha, best_eta=best.eta, cells=cells)
