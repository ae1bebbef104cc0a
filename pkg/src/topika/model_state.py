"""Sufficient statistics, responsibilities, and point-estimate formulas.

Count matrices are dense float64 arrays shared by every learner:
n_wk (W x K), n_kj (K x D), and their marginals n_k, n_j. Responsibilities
come in two layouts behind one type: one distribution per unique (word, doc)
entry for the batch learners, one per token for the collapsed ones.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import Corpus

__all__ = [
    "Hyperparams",
    "CountMatrices",
    "Responsibilities",
    "VarianceCounts",
    "TopicAssignments",
    "TopicEstimates",
    "digamma",
    "init_random",
    "init_assignments",
    "counts_from_entry_gamma",
    "counts_from_token_gamma",
    "counts_from_assignments",
    "variances_from_token_gamma",
    "check_count_consistency",
    "estimate_collapsed",
    "estimate_map",
    "estimate_vb_alternative",
    "save_model",
    "load_model",
    "export_top_words",
]

ENTRY_LAYOUT = "entry"
TOKEN_LAYOUT = "token"


@dataclass(frozen=True)
class Hyperparams:
    """Symmetric Dirichlet strengths plus Gamma-prior constants.

    `gamma_prior` is (a, b, c, d) for eta ~ Gamma[a, b] and alpha ~ Gamma[c, d];
    the default (1, 0, 1, 0) reduces the fixed-point hyperparameter updates to
    pure maximum likelihood.
    """

    alpha: float
    eta: float
    gamma_prior: tuple[float, float, float, float] = (1.0, 0.0, 1.0, 0.0)

    def __post_init__(self):
        if not (self.alpha > 0 and self.eta > 0):
            raise ValueError(f"alpha and eta must be positive, got alpha={self.alpha}, eta={self.eta}")
        if any(v < 0 for v in self.gamma_prior):
            raise ValueError("gamma prior constants must be non-negative")

    def require_map_valid(self):
        if self.alpha <= 1 or self.eta <= 1:
            raise ValueError(
                f"MAP requires alpha > 1 and eta > 1 (got alpha={self.alpha}, eta={self.eta}); "
                "values <= 1 produce negative probabilities"
            )

    def with_values(self, alpha: float | None = None, eta: float | None = None) -> "Hyperparams":
        return Hyperparams(
            alpha=self.alpha if alpha is None else alpha,
            eta=self.eta if eta is None else eta,
            gamma_prior=self.gamma_prior,
        )


@dataclass(eq=False)
class CountMatrices:
    n_wk: np.ndarray  # W x K
    n_kj: np.ndarray  # K x D
    n_k: np.ndarray  # K
    n_j: np.ndarray  # D
    K: int

    @property
    def W(self) -> int:
        return self.n_wk.shape[0]

    @property
    def D(self) -> int:
        return self.n_kj.shape[1]

    def copy(self) -> "CountMatrices":
        return CountMatrices(
            n_wk=self.n_wk.copy(),
            n_kj=self.n_kj.copy(),
            n_k=self.n_k.copy(),
            n_j=self.n_j.copy(),
            K=self.K,
        )

    def total_mass(self) -> float:
        return float(self.n_k.sum())


@dataclass(eq=False)
class Responsibilities:
    """Topic distributions, one row per unique entry or per token."""

    gamma: np.ndarray  # (num_entries or num_tokens) x K
    layout: str

    def __post_init__(self):
        if self.layout not in (ENTRY_LAYOUT, TOKEN_LAYOUT):
            raise ValueError(f"unknown layout {self.layout!r}")


@dataclass(eq=False)
class VarianceCounts:
    v_wk: np.ndarray  # W x K
    v_kj: np.ndarray  # K x D
    v_k: np.ndarray  # K

    def copy(self) -> "VarianceCounts":
        return VarianceCounts(self.v_wk.copy(), self.v_kj.copy(), self.v_k.copy())


@dataclass(eq=False)
class TopicAssignments:
    z: np.ndarray  # (num_tokens,) int64


@dataclass(eq=False)
class TopicEstimates:
    """Point estimates for prediction; columns of both matrices sum to one."""

    phi_hat: np.ndarray  # W x K, column-stochastic
    theta_hat: np.ndarray  # K x D, column-stochastic
    estimator_tag: str


# --- digamma -----------------------------------------------------------------

# Stirling-series coefficients for psi(x) ~ log x - 1/(2x) - sum c_m / x^(2m),
# applied after recurring the argument up to >= 6; truncation there is ~2e-13.
_DIGAMMA_SHIFT = 6.0
_DIGAMMA_COEFFS = (
    1.0 / 12.0,
    -1.0 / 120.0,
    1.0 / 252.0,
    -1.0 / 240.0,
    1.0 / 132.0,
    -691.0 / 32760.0,
    1.0 / 12.0,
)


def digamma(x):
    """Digamma psi(x) for positive arguments, elementwise on arrays.

    Upward recurrence psi(x) = psi(x + 1) - 1/x lifts arguments to >= 6,
    then the asymptotic series finishes; absolute error is below 1e-12.
    """
    x = np.asarray(x, dtype=np.float64)
    scalar = x.ndim == 0
    x = np.atleast_1d(x).copy()
    if np.any(x <= 0):
        raise ValueError("digamma requires positive arguments")
    acc = np.zeros_like(x)
    small = x < _DIGAMMA_SHIFT
    while np.any(small):
        acc[small] -= 1.0 / x[small]
        x[small] += 1.0
        small = x < _DIGAMMA_SHIFT
    inv = 1.0 / x
    inv2 = inv * inv
    series = np.zeros_like(x)
    for c in reversed(_DIGAMMA_COEFFS):
        series = inv2 * (c + series)
    result = acc + np.log(x) - 0.5 * inv - series
    return float(result[0]) if scalar else result


# --- count construction -------------------------------------------------------


def counts_from_entry_gamma(corpus: Corpus, gamma: np.ndarray, K: int) -> CountMatrices:
    """Accumulate N_wk, N_kj from entry-level gamma weighted by entry counts."""
    weights = corpus.counts[:, None] * gamma
    return _scatter_counts(corpus.word_ids, corpus.doc_ids, weights, corpus.vocab_size, corpus.num_docs, K)


def counts_from_token_gamma(
    token_word: np.ndarray, token_doc: np.ndarray, gamma: np.ndarray, W: int, D: int, K: int
) -> CountMatrices:
    return _scatter_counts(token_word, token_doc, gamma, W, D, K)


def _scatter_counts(word_idx, doc_idx, weights, W, D, K) -> CountMatrices:
    n_wk = np.empty((W, K))
    n_kj = np.empty((K, D))
    for k in range(K):
        n_wk[:, k] = np.bincount(word_idx, weights=weights[:, k], minlength=W)
        n_kj[k, :] = np.bincount(doc_idx, weights=weights[:, k], minlength=D)
    return CountMatrices(n_wk=n_wk, n_kj=n_kj, n_k=n_wk.sum(axis=0), n_j=n_kj.sum(axis=0), K=K)


def counts_from_assignments(
    token_word: np.ndarray, token_doc: np.ndarray, z: np.ndarray, W: int, D: int, K: int
) -> CountMatrices:
    """Integer count matrices rebuilt from hard topic assignments."""
    n_wk = np.zeros((W, K))
    n_kj = np.zeros((K, D))
    np.add.at(n_wk, (token_word, z), 1.0)
    np.add.at(n_kj, (z, token_doc), 1.0)
    return CountMatrices(n_wk=n_wk, n_kj=n_kj, n_k=n_wk.sum(axis=0), n_j=n_kj.sum(axis=0), K=K)


def variances_from_token_gamma(
    token_word: np.ndarray, token_doc: np.ndarray, gamma: np.ndarray, W: int, D: int, K: int
) -> VarianceCounts:
    """Bernoulli variances gamma * (1 - gamma) aggregated like the mean counts."""
    var = gamma * (1.0 - gamma)
    v_wk = np.empty((W, K))
    v_kj = np.empty((K, D))
    for k in range(K):
        v_wk[:, k] = np.bincount(token_word, weights=var[:, k], minlength=W)
        v_kj[k, :] = np.bincount(token_doc, weights=var[:, k], minlength=D)
    return VarianceCounts(v_wk=v_wk, v_kj=v_kj, v_k=v_wk.sum(axis=0))


def init_random(corpus: Corpus, K: int, layout: str, seed: int) -> tuple[Responsibilities, CountMatrices]:
    """Draw every responsibility from a flat Dirichlet and accumulate counts.

    Entry layout weights each distribution by the entry count; token layout
    gives every token its own distribution (ordering per Corpus.tokens).
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    rng = np.random.default_rng(seed)
    if layout == ENTRY_LAYOUT:
        rows = corpus.num_entries
    elif layout == TOKEN_LAYOUT:
        rows = corpus.total_tokens
    else:
        raise ValueError(f"unknown layout {layout!r}")
    gamma = rng.dirichlet(np.ones(K), size=rows) if K > 1 else np.ones((rows, 1))
    resp = Responsibilities(gamma=gamma, layout=layout)
    if layout == ENTRY_LAYOUT:
        cm = counts_from_entry_gamma(corpus, gamma, K)
    else:
        token_doc, token_word = corpus.tokens()
        cm = counts_from_token_gamma(token_word, token_doc, gamma, corpus.vocab_size, corpus.num_docs, K)
    return resp, cm


def init_assignments(corpus: Corpus, K: int, seed: int) -> tuple[TopicAssignments, CountMatrices]:
    """Uniform random hard assignments for the Gibbs sampler."""
    if K < 1:
        raise ValueError("K must be >= 1")
    rng = np.random.default_rng(seed)
    token_doc, token_word = corpus.tokens()
    z = rng.integers(0, K, size=corpus.total_tokens)
    cm = counts_from_assignments(token_word, token_doc, z, corpus.vocab_size, corpus.num_docs, K)
    return TopicAssignments(z=z), cm


def check_count_consistency(cm: CountMatrices, rtol: float = 1e-8) -> None:
    """Assert the marginals match their matrices and each other."""
    scale = max(cm.total_mass(), 1.0)
    if not np.allclose(cm.n_k, cm.n_wk.sum(axis=0), rtol=rtol, atol=rtol * scale):
        raise AssertionError("n_k inconsistent with column sums of n_wk")
    if not np.allclose(cm.n_j, cm.n_kj.sum(axis=0), rtol=rtol, atol=rtol * scale):
        raise AssertionError("n_j inconsistent with column sums of n_kj")
    if not np.isclose(cm.n_k.sum(), cm.n_j.sum(), rtol=rtol):
        raise AssertionError("total mass differs between topic and document marginals")


# --- point estimates ----------------------------------------------------------


def estimate_collapsed(cm: CountMatrices, h: Hyperparams) -> TopicEstimates:
    """Rao-Blackwellized estimates: counts plus prior mass, normalized."""
    phi = (cm.n_wk + h.eta) / (cm.n_k + cm.W * h.eta)
    theta = (cm.n_kj + h.alpha) / (cm.n_j + cm.K * h.alpha)
    return TopicEstimates(phi_hat=phi, theta_hat=theta, estimator_tag="collapsed")


def estimate_map(cm: CountMatrices, h: Hyperparams) -> TopicEstimates:
    """Posterior-mode estimates; requires alpha > 1 and eta > 1."""
    h.require_map_valid()
    phi = (cm.n_wk + h.eta - 1.0) / (cm.n_k + cm.W * h.eta - cm.W)
    theta = (cm.n_kj + h.alpha - 1.0) / (cm.n_j + cm.K * h.alpha - cm.K)
    return TopicEstimates(phi_hat=phi, theta_hat=theta, estimator_tag="map")


def estimate_vb_alternative(cm: CountMatrices, h: Hyperparams) -> TopicEstimates:
    """Geometric-mean style estimates exp(psi(count + prior)), column-normalized.

    Mirrors the factor the variational update actually applies, which carries
    an effective offset of up to -0.5 relative to the standard estimates.
    """
    phi = np.exp(digamma(cm.n_wk + h.eta) - digamma(cm.n_k + cm.W * h.eta)[None, :])
    phi /= phi.sum(axis=0, keepdims=True)
    theta = np.exp(digamma(cm.n_kj + h.alpha) - digamma(cm.n_j + cm.K * h.alpha)[None, :])
    theta /= theta.sum(axis=0, keepdims=True)
    return TopicEstimates(phi_hat=phi, theta_hat=theta, estimator_tag="vb_alternative")


# --- model dump ---------------------------------------------------------------

_MODEL_MAGIC = b"TOPIKA-MODEL-1\n"


def save_model(
    path,
    estimates: TopicEstimates,
    *,
    alpha: float,
    eta: float,
    algorithm: str,
    iterations: int,
    seed: int,
    extra: dict | None = None,
) -> None:
    """Write phi/theta with a self-describing JSON header.

    Layout: magic line, one JSON header line, then the two arrays in .npy
    format. Byte-for-byte deterministic for identical inputs.
    """
    W, K = estimates.phi_hat.shape
    D = estimates.theta_hat.shape[1]
    header = {
        "W": W,
        "K": K,
        "D": D,
        "alpha": alpha,
        "eta": eta,
        "estimator_tag": estimates.estimator_tag,
        "algorithm": algorithm,
        "iterations": iterations,
        "seed": seed,
    }
    if extra:
        header.update(extra)
    with open(path, "wb") as f:
        f.write(_MODEL_MAGIC)
        f.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        np.lib.format.write_array(f, estimates.phi_hat, allow_pickle=False)
        np.lib.format.write_array(f, estimates.theta_hat, allow_pickle=False)


def load_model(path) -> tuple[TopicEstimates, dict]:
    with open(path, "rb") as f:
        magic = f.readline()
        if magic != _MODEL_MAGIC:
            raise ValueError(f"{path}: not a model dump (bad magic)")
        header = json.loads(f.readline().decode())
        phi = np.lib.format.read_array(f, allow_pickle=False)
        theta = np.lib.format.read_array(f, allow_pickle=False)
    if phi.shape != (header["W"], header["K"]) or theta.shape != (header["K"], header["D"]):
        raise ValueError(f"{path}: array shapes disagree with header")
    return TopicEstimates(phi_hat=phi, theta_hat=theta, estimator_tag=header["estimator_tag"]), header


def export_top_words(estimates: TopicEstimates, vocab: list[str] | None, top_m: int, stream_or_path) -> None:
    """CSV of the top-M words per topic for human inspection."""
    phi = estimates.phi_hat
    W, K = phi.shape
    names = vocab if vocab is not None else [f"word_{w}" for w in range(W)]
    own = isinstance(stream_or_path, (str, Path))
    stream = open(stream_or_path, "w", newline="") if own else stream_or_path
    try:
        writer = csv.writer(stream)
        writer.writerow(["topic", "rank", "word", "probability"])
        for k in range(K):
            order = np.argsort(phi[:, k])[::-1][:top_m]
            for rank, w in enumerate(order):
                writer.writerow([k, rank, names[w], f"{phi[w, k]:.8g}"])
    finally:
        if own:
            stream.close()
