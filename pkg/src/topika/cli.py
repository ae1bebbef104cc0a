"""Command-line entry points: train, evaluate, grid, bench, oracle-check.

Every run writes a JSON manifest (full effective config plus content hashes
of the input files) sufficient to reproduce it; pass a manifest back through
--config to do so. Precedence: built-in defaults < config file < explicit
flags. The environment variable TOPIKA_THREADS caps worker counts.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .collapsed_inference import callen_oracle
from .corpus import Corpus, SplitCorpus, load_uci_bow, split_corpus, synthetic_corpus
from .evaluation import (
    classify_and_score,
    fold_in,
    fold_in_split,
    load_labels,
    perplexity,
    timing_benchmark,
)
from .hyperopt import PAPER_GRID, GridCell, GridSpec, MinkaConfig, grid_search
from .model_state import Hyperparams, export_top_words, load_model, save_model
from .training import ALGORITHMS, make_config, train_model

__all__ = ["main", "RunConfig"]


@dataclass
class RunConfig:
    command: str
    docword: str | None = None
    vocab: str | None = None
    labels: str | None = None
    model: list[str] = field(default_factory=list)
    out: str = "runs"
    algo: str = "cvb0"
    topics: int = 10
    alpha: float = 0.5
    eta: float = 0.5
    iters: int = 500
    seed: list[int] = field(default_factory=lambda: [0])
    minka: bool = False
    minka_start: int = 15
    workers: int = 2
    sync_every: int = 4096
    samples: int | None = None
    grid_alpha: list[float] = field(default_factory=lambda: list(PAPER_GRID))
    grid_eta: list[float] = field(default_factory=lambda: list(PAPER_GRID))
    threshold: float | None = None
    estimator: str | None = None
    test_docs: int = 0
    val_docs: int = 0
    instances: int = 20

    def __post_init__(self):
        if self.topics < 1:
            raise ValueError("--topics must be >= 1")
        env_cap = os.environ.get("TOPIKA_THREADS")
        if env_cap:
            self.workers = max(1, min(self.workers, int(env_cap)))


_DEFAULTS = RunConfig(command="train")


def _sha256(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="topika", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, bench=False):
        p.add_argument("--config", help="JSON config or manifest; flags override its keys")
        p.add_argument("--docword", help="UCI bag-of-words docword file")
        p.add_argument("--vocab", help="vocabulary file, one token per line")
        p.add_argument("--labels", help="class labels, one integer per line")
        if bench:
            p.add_argument("--algo", nargs="+", choices=ALGORITHMS, default=None)
        else:
            p.add_argument("--algo", choices=ALGORITHMS, default=None)
        p.add_argument("--topics", type=int, default=None)
        p.add_argument("--alpha", type=float, default=None)
        p.add_argument("--eta", type=float, default=None)
        p.add_argument("--iters", type=int, default=None)
        p.add_argument("--seed", type=int, nargs="+", default=None)
        p.add_argument("--minka", action="store_true", default=None)
        p.add_argument("--minka-start", type=int, default=None)
        p.add_argument("--workers", type=int, default=None)
        p.add_argument("--sync-every", type=int, default=None)
        p.add_argument("--samples", type=int, default=None)
        p.add_argument("--grid-alpha", type=float, nargs="+", default=None)
        p.add_argument("--grid-eta", type=float, nargs="+", default=None)
        p.add_argument("--threshold", type=float, default=None)
        p.add_argument("--estimator", choices=("collapsed", "map", "vb_alternative"), default=None)
        p.add_argument("--test-docs", type=int, default=None)
        p.add_argument("--val-docs", type=int, default=None)
        p.add_argument("--out", default=None)

    add_common(sub.add_parser("train", help="train one model per seed"))
    ev = sub.add_parser("evaluate", help="fold-in perplexity (and classification) for model dumps")
    add_common(ev)
    ev.add_argument("--model", nargs="+", default=None, help="model dump path(s); S-sample averaging")
    add_common(sub.add_parser("grid", help="validation grid search over alpha x eta"))
    add_common(sub.add_parser("bench", help="time-to-threshold benchmark"), bench=True)
    oc = sub.add_parser("oracle-check", help="exact-posterior self-consistency checks")
    add_common(oc)
    oc.add_argument("--instances", type=int, default=None)
    return parser


def _merge_config(args: argparse.Namespace) -> RunConfig:
    merged = {k: v for k, v in asdict(_DEFAULTS).items()}
    merged["command"] = args.command
    if getattr(args, "config", None):
        with open(args.config) as f:
            loaded = json.load(f)
        if "config" in loaded and isinstance(loaded["config"], dict):
            loaded = loaded["config"]  # accept a manifest directly
        for key, value in loaded.items():
            key = key.replace("-", "_")
            if key in merged and key != "command":
                merged[key] = value
    for key, value in vars(args).items():
        if key in ("command", "config") or value is None:
            continue
        merged[key] = value
    return RunConfig(**merged)


def _load_corpus(cfg: RunConfig) -> Corpus:
    if not cfg.docword:
        raise ValueError("--docword is required")
    if not Path(cfg.docword).exists():
        raise FileNotFoundError(cfg.docword)
    if cfg.vocab and not Path(cfg.vocab).exists():
        raise FileNotFoundError(cfg.vocab)
    return load_uci_bow(cfg.docword, cfg.vocab)


def _write_manifest(cfg: RunConfig, out_dir: Path, extra: dict | None = None) -> dict:
    inputs = {}
    for path in [cfg.docword, cfg.vocab, cfg.labels, *cfg.model]:
        if path and Path(path).exists():
            inputs[str(path)] = _sha256(path)
    manifest = {"config": asdict(cfg), "inputs": inputs}
    if extra:
        manifest.update(extra)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    return manifest


def _hyperparams(cfg: RunConfig) -> Hyperparams:
    return Hyperparams(alpha=cfg.alpha, eta=cfg.eta)


def _maybe_validation(cfg: RunConfig, corpus: Corpus):
    """Split off a validation (and test) part when sizes were requested."""
    if cfg.val_docs <= 0 and cfg.test_docs <= 0:
        return corpus, None, None
    split = split_corpus(corpus, cfg.test_docs, cfg.val_docs, seed=cfg.seed[0])
    validation = split.validation if cfg.val_docs > 0 else None
    test = split.test if cfg.test_docs > 0 else None
    return split.train, validation, test


def _trace_to_csv(trace, path: Path, extra_fields: dict | None = None):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        header = ["iteration", "objective", "validation_perplexity", "alpha", "eta", "seconds"]
        extras = list((extra_fields or {}).items())
        writer.writerow(header + [k for k, _ in extras])
        for rec in trace:
            writer.writerow(
                [
                    rec.iteration,
                    f"{rec.objective:.10g}",
                    "" if math.isnan(rec.validation_perplexity) else f"{rec.validation_perplexity:.10g}",
                    f"{rec.alpha:.10g}",
                    f"{rec.eta:.10g}",
                    f"{rec.seconds:.6f}",
                ]
                + [v for _, v in extras]
            )


def cmd_train(cfg: RunConfig) -> int:
    corpus = _load_corpus(cfg)
    labels = load_labels(cfg.labels, corpus.num_docs) if cfg.labels else None
    train, validation, _ = _maybe_validation(cfg, corpus)
    h = _hyperparams(cfg)
    if cfg.algo == "map":
        h.require_map_valid()
    minka = MinkaConfig(start_iteration=cfg.minka_start) if cfg.minka else None
    out_dir = Path(cfg.out)
    _write_manifest(cfg, out_dir)
    for seed in cfg.seed:
        config = make_config(
            cfg.algo,
            max_iterations=cfg.iters,
            seed=seed,
            workers=cfg.workers,
            sync_every=cfg.sync_every,
        )
        result = train_model(train, cfg.topics, h, config, validation=validation, minka=minka, estimator=cfg.estimator)
        extra = {"iterations_run": result.iterations_run}
        if labels is not None:
            extra["train_labels"] = [int(labels[d]) for d in train.source_doc_ids]
        save_model(
            out_dir / f"model-{cfg.algo}-seed{seed}.topika",
            result.estimates,
            alpha=result.hyperparams.alpha,
            eta=result.hyperparams.eta,
            algorithm=cfg.algo,
            iterations=result.iterations_run,
            seed=seed,
            extra=extra,
        )
        trace_extra = (
            {"workers": cfg.workers, "sync_every": cfg.sync_every, "merges": ""}
            if cfg.algo == "pcvb0"
            else None
        )
        _trace_to_csv(result.trace, out_dir / f"trace-{cfg.algo}-seed{seed}.csv", trace_extra)
        if corpus.vocab is not None:
            export_top_words(result.estimates, corpus.vocab, 20, out_dir / f"topwords-{cfg.algo}-seed{seed}.csv")
        print(f"trained {cfg.algo} seed={seed}: {result.iterations_run} iterations, {result.seconds:.2f}s")
    return 0


def _append_results_csv(out_dir: Path, metrics: dict):
    path = out_dir / "results.csv"
    fresh = not path.exists()
    with open(path, "a", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(metrics.keys()))
        if fresh:
            writer.writeheader()
        writer.writerow(metrics)


def cmd_evaluate(cfg: RunConfig) -> int:
    if not cfg.model:
        raise ValueError("--model is required for evaluate")
    test = _load_corpus(cfg)
    models = []
    for path in cfg.model:
        estimates, header = load_model(path)
        if header["W"] != test.vocab_size:
            raise ValueError(
                f"vocabulary-size mismatch: model has W={header['W']}, corpus has W={test.vocab_size}"
            )
        if cfg.estimator and cfg.estimator != estimates.estimator_tag:
            raise ValueError(
                f"estimator/model mismatch: dump carries {estimates.estimator_tag!r}, "
                f"requested {cfg.estimator!r}"
            )
        models.append((estimates, header))
    if cfg.samples is not None and cfg.samples != len(models):
        raise ValueError(f"--samples {cfg.samples} but {len(models)} model dump(s) given")

    t0 = time.perf_counter()
    header0 = models[0][1]
    h = Hyperparams(alpha=header0["alpha"], eta=header0["eta"])
    algorithm = header0["algorithm"]
    fold = fold_in_split(test, seed=cfg.seed[0])
    foldin_seeds = np.random.SeedSequence(cfg.seed[0]).spawn(len(models))
    pairs = []
    for (estimates, header), seed_seq in zip(models, foldin_seeds):
        h_model = Hyperparams(alpha=header["alpha"], eta=header["eta"])
        theta = fold_in(
            fold,
            estimates.phi_hat,
            header["algorithm"],
            h_model,
            estimator=estimates.estimator_tag,
            seed=int(seed_seq.generate_state(1)[0]),
        )
        pairs.append((estimates.phi_hat, theta))
    report = perplexity(fold.heldout_half, pairs, estimator_tag=models[0][0].estimator_tag)

    auc = mean_ap = None
    if cfg.labels:
        test_labels = load_labels(cfg.labels, test.num_docs)
        train_labels = header0.get("train_labels")
        if train_labels is None:
            raise ValueError("model dump carries no train_labels; retrain with --labels")
        cls = classify_and_score(
            models[0][0].theta_hat, np.asarray(train_labels), pairs[0][1], test_labels
        )
        auc, mean_ap = cls.mean_auc, cls.mean_average_precision

    metrics = {
        "algorithm": algorithm,
        "K": header0["K"],
        "alpha": header0["alpha"],
        "eta": header0["eta"],
        "seed": cfg.seed[0],
        "perplexity": report.perplexity,
        "log_likelihood": report.log_likelihood,
        "heldout_tokens": report.heldout_tokens,
        "samples_averaged": report.samples_averaged,
        "auc": auc,
        "map": mean_ap,
        "seconds": time.perf_counter() - t0,
    }
    out_dir = Path(cfg.out)
    _write_manifest(cfg, out_dir)
    with open(out_dir / "metrics.json", "w") as f:
        json.dump(metrics, f, indent=2, sort_keys=True)
    _append_results_csv(out_dir, metrics)
    print(json.dumps(metrics, sort_keys=True))
    return 0


_GRID_FIELDS = [
    "algorithm",
    "alpha",
    "eta",
    "K",
    "seed",
    "validation_perplexity",
    "test_perplexity",
    "iterations_run",
    "seconds",
    "valid",
    "error",
]


def _grid_csv_path(out_dir: Path, algo: str) -> Path:
    return out_dir / f"grid-{algo}.csv"


def _load_grid_cells(path: Path) -> dict:
    cells = {}
    if not path.exists():
        return cells
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            cell = GridCell(
                algorithm=row["algorithm"],
                alpha=float(row["alpha"]),
                eta=float(row["eta"]),
                K=int(row["K"]),
                seed=int(row["seed"]),
                validation_perplexity=float(row["validation_perplexity"]),
                test_perplexity=float(row["test_perplexity"]),
                iterations_run=int(row["iterations_run"]),
                seconds=float(row["seconds"]),
                valid=row["valid"] == "True",
                error=row["error"] or None,
            )
            if cell.valid:
                cells[cell.key()] = cell
    return cells


def _write_grid_csv(path: Path, cells):
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=_GRID_FIELDS)
        writer.writeheader()
        for cell in cells:
            row = {k: getattr(cell, k) for k in _GRID_FIELDS}
            row["error"] = cell.error or ""
            writer.writerow(row)


def cmd_grid(cfg: RunConfig) -> int:
    corpus = _load_corpus(cfg)
    if cfg.test_docs < 1 or cfg.val_docs < 1:
        raise ValueError("grid search needs --test-docs and --val-docs")
    split = split_corpus(corpus, cfg.test_docs, cfg.val_docs, seed=cfg.seed[0])
    grid = GridSpec(alpha_values=tuple(cfg.grid_alpha), eta_values=tuple(cfg.grid_eta))
    out_dir = Path(cfg.out)
    manifest = _write_manifest(cfg, out_dir)

    # resume: reuse completed cells when the inputs and config hash match
    skip = {}
    csv_path = _grid_csv_path(out_dir, cfg.algo)
    stamp_path = out_dir / f"grid-{cfg.algo}.stamp"
    stamp = hashlib.sha256(
        json.dumps({k: v for k, v in manifest.items() if k != "config"} | {"algo": cfg.algo, "topics": cfg.topics, "grid_alpha": cfg.grid_alpha, "grid_eta": cfg.grid_eta, "seed": cfg.seed}, sort_keys=True).encode()
    ).hexdigest()
    if stamp_path.exists() and stamp_path.read_text().strip() == stamp:
        skip = _load_grid_cells(csv_path)
        if skip:
            print(f"resuming: {len(skip)} completed cell(s) reused")

    def progress(cell):
        status = f"val={cell.validation_perplexity:.2f}" if cell.valid else f"FAILED ({cell.error})"
        print(f"  cell alpha={cell.alpha:g} eta={cell.eta:g}: {status}")

    result = grid_search(
        cfg.algo,
        split,
        grid,
        cfg.topics,
        max_iterations=cfg.iters,
        seed=cfg.seed[0],
        estimator=cfg.estimator,
        workers=cfg.workers,
        skip_cells=skip,
        progress=progress,
    )
    _write_grid_csv(csv_path, result.cells)
    stamp_path.write_text(stamp + "\n")
    best = result.best_cell
    with open(out_dir / f"grid-{cfg.algo}-best.json", "w") as f:
        json.dump(
            {
                "algorithm": cfg.algo,
                "K": cfg.topics,
                "alpha": best.alpha,
                "eta": best.eta,
                "validation_perplexity": best.validation_perplexity,
                "test_perplexity": best.test_perplexity,
            },
            f,
            indent=2,
            sort_keys=True,
        )
    print(
        f"best cell: alpha={best.alpha:g} eta={best.eta:g} "
        f"val={best.validation_perplexity:.2f} test={best.test_perplexity:.2f}"
    )
    return 0


def cmd_bench(cfg: RunConfig) -> int:
    corpus = _load_corpus(cfg)
    if cfg.test_docs < 1 or cfg.val_docs < 1:
        raise ValueError("bench needs --test-docs and --val-docs")
    if cfg.threshold is None:
        raise ValueError("--threshold is required for bench")
    split = split_corpus(corpus, cfg.test_docs, cfg.val_docs, seed=cfg.seed[0])
    algorithms = cfg.algo if isinstance(cfg.algo, list) else [cfg.algo]
    results = timing_benchmark(
        algorithms,
        split,
        cfg.topics,
        _hyperparams(cfg),
        cfg.threshold,
        max_iterations=cfg.iters,
        seed=cfg.seed[0],
        workers=cfg.workers,
    )
    out_dir = Path(cfg.out)
    _write_manifest(cfg, out_dir)
    with open(out_dir / "bench.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["algorithm", "seconds_to_threshold", "sweeps_to_threshold", "per_sweep_seconds", "timed_out"])
        for algo, res in results.items():
            writer.writerow(
                [
                    algo,
                    "" if res.seconds_to_threshold is None else f"{res.seconds_to_threshold:.4f}",
                    "" if res.sweeps_to_threshold is None else res.sweeps_to_threshold,
                    f"{res.per_sweep_seconds:.6f}",
                    res.timed_out,
                ]
            )
    for algo, res in results.items():
        if res.timed_out:
            print(f"{algo}: TIMEOUT (per sweep {res.per_sweep_seconds:.4f}s)")
        else:
            print(
                f"{algo}: {res.seconds_to_threshold:.3f}s to threshold in {res.sweeps_to_threshold} sweeps "
                f"(per sweep {res.per_sweep_seconds:.4f}s)"
            )
    return 0


def cmd_oracle_check(cfg: RunConfig) -> int:
    from .collapsed_inference import collapsed_sweep, init_collapsed_state
    from .model_state import counts_from_assignments

    rng = np.random.default_rng(cfg.seed[0])
    h = _hyperparams(cfg)
    K = cfg.topics
    failures = 0
    rows = []
    for instance in range(cfg.instances):
        num_docs = int(rng.integers(1, 3))
        vocab_size = int(rng.integers(2, 5))
        corpus = synthetic_corpus(
            num_docs,
            vocab_size,
            K,
            alpha=1.0,
            eta=1.0,
            doc_length=int(rng.integers(2, 1 + 10 // num_docs)),
            seed=int(rng.integers(0, 2**31)),
            poisson_lengths=False,
        )
        oracle = callen_oracle(corpus, K, h)
        ok = oracle.callen_residual < 1e-10
        failures += not ok
        rows.append(
            {
                "instance": instance,
                "tokens": corpus.total_tokens,
                "docs": corpus.num_docs,
                "vocab": corpus.vocab_size,
                "callen_residual": oracle.callen_residual,
                "ok": bool(ok),
            }
        )
        print(
            f"instance {instance}: N={corpus.total_tokens} D={corpus.num_docs} W={corpus.vocab_size} "
            f"residual={oracle.callen_residual:.2e} {'ok' if ok else 'FAIL'}"
        )
    out_dir = Path(cfg.out)
    _write_manifest(cfg, out_dir)
    with open(out_dir / "oracle-check.json", "w") as f:
        json.dump({"instances": rows, "failures": failures}, f, indent=2)
    return 0 if failures == 0 else 1


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = _merge_config(args)
        handler = {
            "train": cmd_train,
            "evaluate": cmd_evaluate,
            "grid": cmd_grid,
            "bench": cmd_bench,
            "oracle-check": cmd_oracle_check,
        }[cfg.command]
        return handler(cfg)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
