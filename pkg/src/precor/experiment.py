"""Experiment commands behind the ``precor`` CLI.

Every command takes an :class:`ExperimentConfig` and an output directory and
is deterministic given the config: worker processes only change where the
work runs, never the order in which results are aggregated.
"""
from __future__ import annotations

import csv
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .errors import ConfigError
from .graphnet import flatten_params, forward, load_checkpoint, save_checkpoint, unflatten_params
from .icfactor import CholeskyFactor, FactorizationConfig, factorize, save_factor
from .pcg import PcgConfig, pcg_solve
from .pdegen import LinearSystem, make_system, sample_seeds
from .spectrum import (dense_spectrum, eigenvalue_histogram, extremal_eigs_lanczos, frobenius_loss,
                       precond_operator, write_histogram_csv)
from .store import load_dataset, write_dataset
from .training import train

log = logging.getLogger(__name__)

# rough peak memory per unknown while evaluating a learned preconditioner
BYTES_PER_UNKNOWN = 20_000
TIMING_NOTE = "wall-clock seconds on this machine; not comparable to published hardware"


# -- helpers ----------------------------------------------------------------------

def default_workers() -> int:
    return os.cpu_count() or 1


def run_map(fn, tasks: list, workers: int = 1) -> list:
    """``map`` that keeps task order whatever the worker count."""
    if workers <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, tasks))


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def write_csv(path, rows: list[dict], fieldnames: list[str] | None = None) -> None:
    fieldnames = fieldnames or list(rows[0])
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fieldnames)
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r.get(k, "")) for k in fieldnames})


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def dataset_root(cfg: ExperimentConfig, out) -> Path:
    return Path(cfg.dataset_dir) if cfg.dataset_dir else Path(out) / "dataset"


def _load_checked(cfg: ExperimentConfig, out) -> dict[str, list[LinearSystem]]:
    root = dataset_root(cfg, out)
    data, manifest = load_dataset(root)
    stored = {k: manifest.get(k) for k in cfg.dataset_keys()}
    if stored != cfg.dataset_keys():
        raise ConfigError(f"{root}: dataset was generated with {stored}, config asks for {cfg.dataset_keys()}")
    return data


def _tol_key(t: float) -> str:
    return f"{t:.0e}"


# -- generate ---------------------------------------------------------------------

def _generate_one(task):
    equation, grid_n, variance, seed, corr_len, with_kappa = task
    s = make_system(equation, grid_n, variance, seed, corr_len)
    kappa = None
    if with_kappa:
        kappa = extremal_eigs_lanczos(precond_operator(None, s.A), s.n, 200, seed=0).kappa
    return s, kappa


def cmd_generate(cfg: ExperimentConfig, out, workers: int = 1) -> Path:
    root = dataset_root(cfg, out)
    seeds = sample_seeds(cfg.seed, cfg.n_train + cfg.n_test)
    tasks = [(cfg.equation, cfg.grid_n, cfg.variance, s, cfg.corr_len, cfg.manifest_kappa) for s in seeds]
    results = run_map(_generate_one, tasks, workers)
    systems = [r[0] for r in results]
    kappas = [r[1] for r in results]
    data = {"train": systems[:cfg.n_train], "test": systems[cfg.n_train:]}
    kap = {"train": kappas[:cfg.n_train], "test": kappas[cfg.n_train:]} if cfg.manifest_kappa else None
    header = {"format_version": 1, **cfg.dataset_keys(), "seeds": seeds,
              "contrast_mean": float(np.mean([s.meta["contrast"] for s in systems]))}
    path = write_dataset(root, data, header, kap)
    log.info("wrote %d samples to %s", len(systems), root)
    return path


# -- factorize --------------------------------------------------------------------

def cmd_factorize(cfg: ExperimentConfig, out) -> Path:
    data = _load_checked(cfg, out)
    root = Path(out) / "factors"
    rows = []
    for fcfg in cfg.factorizations:
        for split in ("train", "test"):
            d = root / fcfg.label / split
            d.mkdir(parents=True, exist_ok=True)
            for i, s in enumerate(data[split]):
                F = factorize(s.A, fcfg)
                save_factor(F, d / f"{i:04d}")
                rows.append({"factorization": fcfg.label, "split": split, "index": i, "nnz": F.L.nnz,
                             "density_pct": 100.0 * F.L.nnz / s.n**2, "shift": F.source_shift})
    write_csv(root / "summary.csv", rows)
    return root


# -- train ------------------------------------------------------------------------

TRAIN_KEYS = ("equation", "grid_n", "variance", "corr_len", "n_train", "n_test", "seed",
              "learn_on", "gnn", "loss", "train")


def _train_outputs(d: Path, report) -> None:
    write_csv(d / "loss_curve.csv", [{"epoch": e, "train_loss": a, "test_loss": b}
                                     for e, (a, b) in enumerate(zip(report.train_loss, report.test_loss))])
    write_csv(d / "alpha.csv", [{"epoch": e, "alpha": a} for e, a in enumerate(report.alpha)])
    summary = {"status": report.status, "best_epoch": report.best_epoch, "steps": report.steps,
               "epochs_run": len(report.test_loss) - 1, "best_test_loss": min(report.test_loss)}
    (d / "report.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    write_csv(d / "timings_noncomparable.csv", [{"phase": "train", "seconds": report.seconds, "note": TIMING_NOTE}])


def cmd_train(cfg: ExperimentConfig, out, checkpoint=None) -> Path:
    """Train on the configured dataset; an existing checkpoint is resumed.

    Resuming is refused when the checkpoint came from a different
    training configuration.
    """
    d = Path(out) / "train"
    d.mkdir(parents=True, exist_ok=True)
    ckpt = Path(checkpoint) if checkpoint else d / "checkpoint.bin"
    digest = cfg.digest(*TRAIN_KEYS)
    params = None
    if ckpt.exists():
        params, gcfg, extra = load_checkpoint(ckpt)
        if extra.get("config_digest") != digest or gcfg != cfg.gnn:
            raise ConfigError(f"{ckpt}: refusing to resume, checkpoint was trained with a different configuration")
        log.info("resuming from %s", ckpt)
    data = _load_checked(cfg, out)
    report = train(data, cfg.learn_on, cfg.gnn, cfg.loss, cfg.train, params=params)
    extra = {"config_digest": digest, "learn_on": asdict(cfg.learn_on), "best_epoch": report.best_epoch,
             "status": report.status}
    save_checkpoint(ckpt, report.params, cfg.gnn, extra)
    _train_outputs(d, report)
    log.info("training %s after %d epochs, best epoch %d", report.status, len(report.test_loss) - 1,
             report.best_epoch)
    return ckpt


def _learned_method(checkpoint):
    params, gcfg, extra = load_checkpoint(checkpoint)
    fcfg = FactorizationConfig(**extra["learn_on"]) if "learn_on" in extra else FactorizationConfig()
    return ("learned", fcfg, flatten_params(params), gcfg)


# -- evaluate ---------------------------------------------------------------------

def method_label(method) -> str:
    if method is None:
        return "none"
    if isinstance(method, FactorizationConfig):
        return method.label
    return f"learned-on-{method[1].label}"


def build_preconditioner(A, method) -> CholeskyFactor | None:
    if method is None:
        return None
    if isinstance(method, FactorizationConfig):
        return factorize(A, method)
    _, fcfg, vec, gcfg = method
    base = factorize(A, fcfg)
    return forward(unflatten_params(vec, gcfg), gcfg, base.L)


def _evaluate_one(task):
    system, method, tolerances, max_iters = task
    t0 = time.perf_counter()
    F = build_preconditioner(system.A, method)
    t1 = time.perf_counter()
    _, rep = pcg_solve(system.A, system.b, F, PcgConfig(tolerances, max_iters))
    t2 = time.perf_counter()
    nnz = F.L.nnz if F is not None else None
    return [rep.iters_at_tol[t] for t in tolerances], nnz, t1 - t0, t2 - t1


def aggregate(method: str, results: list, tolerances, grid_n: int, variance: float) -> tuple[dict, dict]:
    """ResultsTable row plus a timing row for one method over a test set."""
    n = grid_n * grid_n
    row = {"method": method, "grid": grid_n, "variance": variance}
    for j, t in enumerate(tolerances):
        vals = [r[0][j] for r in results]
        if any(v is None for v in vals):
            # at least one system did not reach this tolerance
            row[f"mean_{_tol_key(t)}"] = row[f"std_{_tol_key(t)}"] = float("nan")
        else:
            row[f"mean_{_tol_key(t)}"] = float(np.mean(vals))
            row[f"std_{_tol_key(t)}"] = float(np.std(vals))
    nnz = [r[1] for r in results]
    row["density_pct"] = float("nan") if nnz[0] is None else float(100.0 * np.mean(nnz) / n**2)
    row["n_systems"] = len(results)
    timing = {"method": method, "precond_seconds_mean": float(np.mean([r[2] for r in results])),
              "solve_seconds_mean": float(np.mean([r[3] for r in results])), "note": TIMING_NOTE}
    return row, timing


def evaluate_methods(systems: list[LinearSystem], methods: list, tolerances, max_iters=None,
                     workers: int = 1, grid_n: int | None = None, variance: float | None = None):
    grid_n = grid_n if grid_n is not None else systems[0].meta["grid_n"]
    variance = variance if variance is not None else systems[0].meta["variance"]
    rows, timings = [], []
    for m in methods:
        res = run_map(_evaluate_one, [(s, m, tuple(tolerances), max_iters) for s in systems], workers)
        r, t = aggregate(method_label(m), res, tolerances, grid_n, variance)
        rows.append(r)
        timings.append(t)
    return rows, timings


def cmd_evaluate(cfg: ExperimentConfig, out, checkpoint=None, workers: int = 1) -> Path:
    data = _load_checked(cfg, out)
    methods = [None, *cfg.factorizations]
    if checkpoint is not None:
        methods.append(_learned_method(checkpoint))
    rows, timings = evaluate_methods(data["test"], methods, cfg.tolerances, cfg.max_iters, workers,
                                     cfg.grid_n, cfg.variance)
    d = Path(out) / "evaluate"
    d.mkdir(parents=True, exist_ok=True)
    write_csv(d / "results.csv", rows)
    write_csv(d / "timings_noncomparable.csv", timings)
    return d / "results.csv"


# -- spectrum ---------------------------------------------------------------------

def cmd_spectrum(cfg: ExperimentConfig, out, checkpoint=None) -> Path:
    data = _load_checked(cfg, out)
    d = Path(out) / "spectrum"
    d.mkdir(parents=True, exist_ok=True)
    methods = [None, *cfg.factorizations]
    if checkpoint is not None:
        methods.append(_learned_method(checkpoint))
    sc = cfg.spectrum
    rows = []
    for i, s in enumerate(data["test"][:sc.samples]):
        for m in methods:
            label = "A" if m is None else method_label(m)
            F = build_preconditioner(s.A, m)
            op = precond_operator(F, s.A)
            err = 0.0
            if s.n <= sc.dense_limit:
                eigs = dense_spectrum(op)
                lo, hi, method = float(eigs[0]), float(eigs[-1]), "dense"
                edges, counts = eigenvalue_histogram(eigs)
                write_histogram_csv(d / f"histogram_{i:04d}_{label}.csv", edges, counts)
            else:
                rep = extremal_eigs_lanczos(op, s.n, sc.lanczos_iters, seed=0)
                lo, hi, method, err = rep.lambda_min, rep.lambda_max, "lanczos", max(rep.err_min, rep.err_max)
            loss = frobenius_loss(s.A, F) if F is not None and s.n <= 4096 else float("nan")
            rows.append({"sample": i, "matrix": label, "operator": op.label, "method": method, "kappa": hi / lo,
                         "lambda_min": lo, "lambda_max": hi, "ritz_residual": err, "loss": loss})
    write_csv(d / "spectrum.csv", rows)
    return d / "spectrum.csv"


# -- generalize -------------------------------------------------------------------

def _test_systems(cfg: ExperimentConfig, grid_n: int, variance: float, workers: int) -> list[LinearSystem]:
    # same per-sample seeds as the configured test split
    seeds = sample_seeds(cfg.seed, cfg.n_train + cfg.n_test)[cfg.n_train:]
    tasks = [(cfg.equation, grid_n, variance, s, cfg.corr_len, False) for s in seeds]
    return [r[0] for r in run_map(_generate_one, tasks, workers)]


def cmd_generalize(cfg: ExperimentConfig, out, checkpoint, workers: int = 1) -> Path:
    if checkpoint is None:
        raise ConfigError("generalize needs --checkpoint")
    learned = _learned_method(checkpoint)
    base = learned[1]
    gc = cfg.generalize
    tk = _tol_key(cfg.tolerances[0])
    rows = []
    for g in gc.grids:
        for v in gc.variances:
            row = {"grid": g, "variance": v, f"{base.label}_mean_{tk}": float("nan"),
                   f"learned_mean_{tk}": float("nan"), f"same_dataset_mean_{tk}": float("nan"), "note": ""}
            need_mb = g * g * BYTES_PER_UNKNOWN * max(workers, 1) / 1e6
            if need_mb > gc.memory_budget_mb:
                row["note"] = f"skipped: needs about {need_mb:.0f} MB, budget {gc.memory_budget_mb:.0f} MB"
                log.warning("grid %d variance %g %s", g, v, row["note"])
                rows.append(row)
                continue
            systems = _test_systems(cfg, g, v, workers)
            methods = [base, learned]
            res, _ = evaluate_methods(systems, methods, cfg.tolerances, cfg.max_iters, workers, g, v)
            row[f"{base.label}_mean_{tk}"] = res[0][f"mean_{tk}"]
            row[f"learned_mean_{tk}"] = res[1][f"mean_{tk}"]
            if gc.same_dataset_baseline:
                local = replace(cfg, grid_n=g, variance=v)
                seeds = sample_seeds(cfg.seed, cfg.n_train + cfg.n_test)[:cfg.n_train]
                train_sys = [make_system(cfg.equation, g, v, s, cfg.corr_len) for s in seeds]
                rep = train({"train": train_sys, "test": systems}, base, local.gnn, local.loss, local.train)
                own = ("learned", base, flatten_params(rep.params), local.gnn)
                res2, _ = evaluate_methods(systems, [own], cfg.tolerances, cfg.max_iters, workers, g, v)
                row[f"same_dataset_mean_{tk}"] = res2[0][f"mean_{tk}"]
            rows.append(row)
    d = Path(out) / "generalize"
    d.mkdir(parents=True, exist_ok=True)
    write_csv(d / "matrix.csv", rows)
    return d / "matrix.csv"


# -- ablate -----------------------------------------------------------------------

ABLATION = [(p, k) for p in ("message_passing", "mlp_only") for k in ("weighted", "unweighted")]


def cmd_ablate(cfg: ExperimentConfig, out, workers: int = 1) -> Path:
    """Processor x loss grid under one training budget."""
    data = _load_checked(cfg, out)
    factors = {k: [factorize(s.A, cfg.learn_on) for s in v] for k, v in data.items()}
    rows = []
    for processor, kind in ABLATION:
        gcfg = replace(cfg.gnn, processor=processor)
        rep = train(data, cfg.learn_on, gcfg, replace(cfg.loss, kind=kind), cfg.train, factors=factors)
        method = ("learned", cfg.learn_on, flatten_params(rep.params), gcfg)
        res, _ = evaluate_methods(data["test"], [method], cfg.tolerances, cfg.max_iters, workers,
                                  cfg.grid_n, cfg.variance)
        row = {"processor": processor, "loss": kind, "input": cfg.learn_on.label}
        row.update({k: v for k, v in res[0].items() if k.startswith(("mean_", "std_"))})
        row.update({"best_epoch": rep.best_epoch, "status": rep.status, "best_test_loss": min(rep.test_loss)})
        rows.append(row)
        log.info("ablation %s/%s done", processor, kind)
    d = Path(out) / "ablate"
    d.mkdir(parents=True, exist_ok=True)
    write_csv(d / "ablation.csv", rows)
    return d / "ablation.csv"
