"""Losses, gradients and optimisation for the factor-correcting network.

Two objectives are supported:

* ``weighted``: mean of ``|L L^T x - b|^2`` over systems with ``x = A^{-1} b``,
  i.e. ``|(P A^{-1} - I) b|^2`` with the forcing as the probe vector;
* ``unweighted``: mean of ``|(L L^T - A) eps|^2`` over Gaussian probes, an
  unbiased estimate of ``|P - A|_F^2``.

Both are evaluated with two sparse products and never form ``L L^T``.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import NumericFailure
from .graphnet import (
    GnnConfig,
    GnnParams,
    flatten_params,
    forward_batch,
    graph_from_factor,
    backward,
    init_params,
    unflatten_params,
)
from .icfactor import CholeskyFactor, FactorizationConfig, factorize
from .pdegen import LinearSystem

log = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 1e12


@dataclass(frozen=True)
class LossSpec:
    kind: str = "weighted"
    n_probes: int = 8

    def __post_init__(self):
        if self.kind not in ("weighted", "unweighted"):
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if self.n_probes < 1:
            raise ValueError("n_probes must be >= 1")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 8
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    shuffle: bool = True
    patience: int | None = 20
    grad_clip: float | None = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")


@dataclass
class TrainReport:
    train_loss: list[float] = field(default_factory=list)  # entry e is epoch e (0 = before training)
    test_loss: list[float] = field(default_factory=list)
    alpha: list[float] = field(default_factory=list)
    steps: int = 0
    best_epoch: int = 0
    params: GnnParams | None = None  # parameters of best_epoch
    last_params: GnnParams | None = None
    status: str = "ok"
    seconds: float = 0.0


# -- factor-product residuals ---------------------------------------------------

def _lower(L, values):
    return sp.csr_matrix((values, L.col_idx, L.row_ptr), shape=L.shape)


def _residual_loss_and_grad(L, values, x, b, need_grad):
    """``|L L^T x - b|^2`` summed over columns of x, and its gradient w.r.t. values."""
    M = _lower(L, values)
    y = M.T @ x
    r = M @ y - b
    val = float(np.sum(r * r))
    if not need_grad:
        return val, None
    g = 2.0 * r
    z = M.T @ g
    rows, cols = L.row_indices(), L.col_idx
    if x.ndim == 1:
        dv = g[rows] * y[cols] + x[rows] * z[cols]
    else:
        dv = np.einsum("ek,ek->e", g[rows], y[cols]) + np.einsum("ek,ek->e", x[rows], z[cols])
    return val, dv


def _probes(n, n_probes, probe_seed, index):
    return np.random.default_rng([probe_seed, index]).standard_normal((n, n_probes))


class LossClosure:
    """A scalar loss over a fixed batch, callable on parameters.

    ``probe_seed`` fixes the Gaussian probes of the unweighted loss.
    """

    def __init__(self, cfg: GnnConfig, batch: list[LinearSystem], factors: list[CholeskyFactor],
                 spec: LossSpec = LossSpec(), probe_seed: int = 0, graphs=None):
        if len(batch) != len(factors):
            raise ValueError("each system needs exactly one factor")
        self.cfg = cfg
        self.batch = batch
        self.factors = [f.L for f in factors]
        self.spec = spec
        self.graphs = graphs if graphs is not None else [graph_from_factor(L) for L in self.factors]
        self.rhs = []
        for k, s in enumerate(batch):
            if spec.kind == "weighted":
                if s.x_ref is None:
                    raise ValueError("weighted loss needs reference solutions")
                self.rhs.append((s.x_ref, s.b))
            else:
                eps = _probes(s.n, spec.n_probes, probe_seed, k)
                self.rhs.append((eps, s.A.to_scipy() @ eps))

    def _evaluate(self, params: GnnParams, need_grad: bool):
        if not self.batch:
            return 0.0, (np.zeros_like(flatten_params(params)) if need_grad else None)
        values, tape = forward_batch(params, self.cfg, self.factors, self.graphs)
        norm = len(self.batch) * (self.spec.n_probes if self.spec.kind == "unweighted" else 1)
        total, dvals = 0.0, []
        for L, v, (x, b) in zip(self.factors, values, self.rhs):
            val, dv = _residual_loss_and_grad(L, v, x, b, need_grad)
            total += val
            if need_grad:
                dvals.append(dv / norm)
        loss = total / norm
        if not np.isfinite(loss):
            raise NumericFailure("loss")
        if not need_grad:
            return loss, None
        return loss, backward(params, self.cfg, tape, dvals)

    def __call__(self, params) -> float:
        if isinstance(params, np.ndarray):
            params = unflatten_params(params, self.cfg)
        return self._evaluate(params, False)[0]

    def value_and_grad(self, params) -> tuple[float, np.ndarray]:
        if isinstance(params, np.ndarray):
            params = unflatten_params(params, self.cfg)
        return self._evaluate(params, True)


def loss_weighted(params: GnnParams, cfg: GnnConfig, batch, factors) -> float:
    return LossClosure(cfg, batch, factors, LossSpec("weighted"))(params)


def loss_unweighted_hutchinson(params: GnnParams, cfg: GnnConfig, batch, factors,
                               probe_seed: int = 0, n_probes: int = 8) -> float:
    return LossClosure(cfg, batch, factors, LossSpec("unweighted", n_probes), probe_seed)(params)


def grad(params, loss_closure: LossClosure) -> np.ndarray:
    """Reverse-mode gradient of ``loss_closure`` w.r.t. ``flatten_params(params)``."""
    return loss_closure.value_and_grad(params)[1]


# -- optimisation ---------------------------------------------------------------

class Adam:
    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = self.v = None
        self.t = 0

    def step(self, theta: np.ndarray, g: np.ndarray) -> np.ndarray:
        if self.m is None:
            self.m = np.zeros_like(theta)
            self.v = np.zeros_like(theta)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * g
        self.v = self.beta2 * self.v + (1 - self.beta2) * g * g
        mhat = self.m / (1 - self.beta1**self.t)
        vhat = self.v / (1 - self.beta2**self.t)
        return theta - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def dataset_loss(params, cfg, systems, factors, spec, probe_seed=0, batch_size=8, graphs=None) -> float:
    """Mean loss over a whole dataset, evaluated in fixed-order chunks."""
    if not systems:
        return 0.0
    total = 0.0
    for lo in range(0, len(systems), batch_size):
        chunk = slice(lo, lo + batch_size)
        c = LossClosure(cfg, systems[chunk], factors[chunk], spec, probe_seed + lo,
                        graphs[chunk] if graphs is not None else None)
        total += c(params) * len(c.batch)
    return total / len(systems)


def train(datasets: dict, factor_cfg: FactorizationConfig, gnn_cfg: GnnConfig,
          loss_spec: LossSpec = LossSpec(), train_cfg: TrainConfig = TrainConfig(),
          factors: dict | None = None, params: GnnParams | None = None,
          init_seed: int | None = None, on_epoch=None) -> TrainReport:
    """Adam over shuffled minibatches with per-epoch held-out loss.

    ``factors`` may hold precomputed ``{"train": [...], "test": [...]}``.
    Training stops early once the test loss has not improved for
    ``train_cfg.patience`` epochs; ``report.params`` are the best ones.
    Divergence (NaN or loss above 1e12) ends the run with ``status="diverged"``.
    """
    t0 = time.perf_counter()
    train_set, test_set = datasets["train"], datasets.get("test", [])
    if not train_set:
        raise ValueError("training set is empty")
    if factors is None:
        factors = {k: [factorize(s.A, factor_cfg) for s in v] for k, v in (("train", train_set), ("test", test_set))}
    if params is None:
        params = init_params(gnn_cfg, train_cfg.seed if init_seed is None else init_seed)
    g_train = [graph_from_factor(f.L) for f in factors["train"]]
    g_test = [graph_from_factor(f.L) for f in factors["test"]]
    test_seed = 2**31 - 1  # fixed probes for held-out evaluation

    def test_loss(p):
        return dataset_loss(p, gnn_cfg, test_set, factors["test"], loss_spec, test_seed, train_cfg.batch_size, g_test)

    rng = np.random.default_rng(train_cfg.seed)
    opt = Adam(train_cfg.learning_rate, train_cfg.adam_beta1, train_cfg.adam_beta2, train_cfg.adam_eps)
    theta = flatten_params(params)
    report = TrainReport()
    best = test_loss(params)
    report.test_loss.append(best)
    report.train_loss.append(dataset_loss(params, gnn_cfg, train_set, factors["train"], loss_spec, 0,
                                          train_cfg.batch_size, g_train))
    report.alpha.append(params.alpha)
    best_theta, stale = theta.copy(), 0
    for epoch in range(1, train_cfg.epochs + 1):
        order = rng.permutation(len(train_set)) if train_cfg.shuffle else np.arange(len(train_set))
        batch_losses = []
        for lo in range(0, len(order), train_cfg.batch_size):
            idx = order[lo:lo + train_cfg.batch_size]
            closure = LossClosure(gnn_cfg, [train_set[i] for i in idx], [factors["train"][i] for i in idx],
                                  loss_spec, probe_seed=train_cfg.seed * 1_000_003 + report.steps,
                                  graphs=[g_train[i] for i in idx])
            try:
                val, g = closure.value_and_grad(unflatten_params(theta, gnn_cfg))
            except NumericFailure as exc:
                log.warning("numeric failure at epoch %d: %s", epoch, exc)
                val, g = float("nan"), None
            if g is None or not np.isfinite(val) or val > DIVERGENCE_LIMIT:
                report.status = "diverged"
                break
            if train_cfg.grad_clip is not None:
                gn = np.linalg.norm(g)
                if gn > train_cfg.grad_clip:
                    g = g * (train_cfg.grad_clip / gn)
            theta = opt.step(theta, g)
            report.steps += 1
            batch_losses.append(val)
        if report.status == "diverged":
            break
        current = unflatten_params(theta, gnn_cfg)
        try:
            tl = test_loss(current)
        except NumericFailure:
            report.status = "diverged"
            break
        report.train_loss.append(float(np.mean(batch_losses)))
        report.test_loss.append(tl)
        report.alpha.append(current.alpha)
        log.info("epoch %d train %.6g test %.6g alpha %.4g", epoch, report.train_loss[-1], tl, current.alpha)
        if on_epoch is not None:
            on_epoch(epoch, report, current)
        if tl < best:
            best, best_theta, stale = tl, theta.copy(), 0
            report.best_epoch = epoch
        else:
            stale += 1
            if train_cfg.patience is not None and stale >= train_cfg.patience:
                report.status = "early-stopped"
                break
    report.params = unflatten_params(best_theta, gnn_cfg)
    report.last_params = unflatten_params(theta, gnn_cfg)
    report.seconds = time.perf_counter() - t0
    return report


def factor_loss(system: LinearSystem, factor: CholeskyFactor) -> float:
    """Weighted loss of a single fixed factor."""
    return _residual_loss_and_grad(factor.L, factor.L.values, system.x_ref, system.b, False)[0]


def inplace_ic_update(system: LinearSystem, factor: CholeskyFactor, steps: int, lr: float = 1e-3,
                      history: list | None = None) -> CholeskyFactor:
    """Gradient descent on the factor entries themselves, pattern fixed.

    A step that would raise the loss is retried with half the step size, so
    the recorded losses never increase. ``history`` (if given) receives the
    loss before every step and after the last one.
    """
    L = factor.L
    v = L.values.copy()
    val, g = _residual_loss_and_grad(L, v, system.x_ref, system.b, True)
    if history is not None:
        history.append(val)
    for _ in range(steps):
        step = lr
        for _ in range(60):
            cand = v - step * g
            new_val, new_g = _residual_loss_and_grad(L, cand, system.x_ref, system.b, True)
            if np.isfinite(new_val) and new_val <= val and np.all(np.isfinite(new_g)):
                break
            step *= 0.5
        else:
            break
        if not np.isfinite(new_val):
            break
        v, val, g = cand, new_val, new_g
        lr = step
        if history is not None:
            history.append(val)
    if steps == 0:
        return factor
    return CholeskyFactor(L.with_values(v), "inplace-updated", factor.source_shift)


__all__ = [
    "Adam", "LossClosure", "LossSpec", "TrainConfig", "TrainReport", "dataset_loss", "factor_loss",
    "grad", "inplace_ic_update", "loss_unweighted_hutchinson", "loss_weighted", "train",
]
