"""Unlearning loops: retraining, fine-tuning baselines and the accelerated objective.

The accelerated objective for a step is::

    (mean CE on the retain batch)^2
      + lam * MMD(gaussianize(log1p CE_F), gaussianize(log1p CE_T))
      + gamma_l1 * ||theta||_1

Squaring the batch loss scales its gradient by ``2 * mean CE``, so steps
are larger while the retain loss is high. The MMD term pulls the forget
losses toward the loss distribution of unseen same-class samples.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .data import build_splits
from .errors import InputError
from .evaluation import evaluate
from .gaussianize import DEFAULT_K, gaussianize_losses, mmd
from .nn import cross_entropy, forward, init_model, iterate_batches, l1_norm, sgd_step, value_and_grad

METHODS = ("retrain", "cf", "a_cf", "l1_sparse", "a_l1")
RETAIN_SOURCES = ("full", "full_condensed", "free_raw", "free_condensed",
                  "residual_raw", "residual_condensed", "reduced")
ACCELERATED = ("a_cf", "a_l1")
SPARSE = ("l1_sparse", "a_l1")

MIN_BATCH_F = 32
DEFAULT_LAM = 1.0
DEFAULT_GAMMA_L1 = 1e-4
DEFAULT_EPOCHS = {"retrain": 10, "cf": 10, "l1_sparse": 10, "a_cf": 2, "a_l1": 2}


@dataclass
class UnlearnConfig:
    """Hyperparameters of one unlearning run.

    ``epochs``, ``lam`` and ``gamma_l1`` left as ``None`` resolve per
    method: the MMD weight applies only to accelerated methods and the L1
    weight only to the sparse ones.
    """

    method: str = "a_cf"
    epochs: int | None = None
    lr: float = 0.05
    batch_retain: int = 32
    batch_f: int = 32
    lam: float | None = None
    K: float = DEFAULT_K
    gamma_l1: float | None = None
    retain_source: str = "full"
    seed: int = 0
    track_metrics: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise InputError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.retain_source not in RETAIN_SOURCES:
            raise InputError(f"unknown retain_source {self.retain_source!r}")
        if self.epochs is None:
            self.epochs = DEFAULT_EPOCHS[self.method]
        if self.lam is None:
            self.lam = DEFAULT_LAM if self.method in ACCELERATED else 0.0
        if self.gamma_l1 is None:
            self.gamma_l1 = DEFAULT_GAMMA_L1 if self.method in SPARSE else 0.0
        if self.epochs < 0 or self.lr <= 0 or self.batch_retain < 1 or self.K <= 0:
            raise InputError("need epochs >= 0, lr > 0, batch_retain >= 1, K > 0")
        if self.batch_f < MIN_BATCH_F:
            raise InputError(f"batch_f must be >= {MIN_BATCH_F}")
        if self.lam < 0 or self.gamma_l1 < 0:
            raise InputError("lam and gamma_l1 must be nonnegative")
        if self.method not in ACCELERATED and self.lam != 0:
            raise InputError(f"method {self.method!r} takes no MMD term (lam must be 0)")
        if self.method not in SPARSE and self.gamma_l1 != 0:
            raise InputError(f"method {self.method!r} takes no L1 term (gamma_l1 must be 0)")


@dataclass
class UnlearnResult:
    model: object
    trail: list
    preprocessing_seconds: float
    unlearning_seconds: float
    method: str = ""
    retain_source: str = "full"

    @property
    def total_seconds(self):
        return self.preprocessing_seconds + self.unlearning_seconds


def _batch_ce(model, x, y):
    return cross_entropy(forward(model, x), y)


def a_amu_objective(model, retain_batch, forget_batch, t_batch, lam=DEFAULT_LAM, K=DEFAULT_K,
                    gamma_l1=0.0):
    """Squared retain loss plus the MMD membership term and an L1 penalty.

    Batches are ``(x, y)`` pairs. The MMD term is skipped when ``lam`` is 0,
    in which case the forget and T batches are never read.
    """
    xr, yr = retain_batch
    if len(yr) == 0:
        raise InputError("retain batch is empty")
    main = ad.square(ad.mean(_batch_ce(model, xr, yr)))
    out = main
    if lam:
        (xf, yf), (xt, yt) = forget_batch, t_batch
        if len(yf) < 2 or len(yt) < 2:
            raise InputError("forget and T batches need at least two samples each")
        zf = gaussianize_losses(ad.log1p(_batch_ce(model, xf, yf)), K)
        zt = gaussianize_losses(ad.log1p(_batch_ce(model, xt, yt)), K)
        out = ad.add(out, ad.mul(mmd(zf, zt), lam))
    if gamma_l1:
        out = ad.add(out, ad.mul(l1_norm(model), gamma_l1))
    return out


def _ce_objective(model, xb, yb, gamma_l1):
    out = ad.mean(_batch_ce(model, xb, yb))
    if gamma_l1:
        out = ad.add(out, ad.mul(l1_norm(model), gamma_l1))
    return out


def _draw(split, size, rng):
    """Uniform batch; with replacement only when the split is too small."""
    n = len(split)
    idx = rng.choice(n, size=size, replace=n < size)
    return split.x[idx], split.y[idx]


def run_unlearning(pretrained, splits, cfg, preprocessing_seconds=0.0):
    """Run ``cfg.epochs`` epochs of the configured method.

    Only the optimisation loop is timed; per-epoch metrics (when
    ``cfg.track_metrics``) are computed outside the timer.
    """
    retain = splits.retain_for(cfg.retain_source)
    if len(retain) == 0:
        raise InputError(f"retain source {cfg.retain_source!r} is empty")
    accelerated = cfg.method in ACCELERATED
    if accelerated and (splits.forget is None or splits.t is None
                        or len(splits.forget) < 2 or len(splits.t) < 2):
        raise InputError("accelerated methods need forget and T splits with >= 2 samples")

    rng = np.random.default_rng(cfg.seed)
    if cfg.method == "retrain":
        model = init_model(pretrained.dims, int(rng.integers(2**31)), pretrained.activations[0])
    else:
        model = pretrained
    trail, elapsed = [], 0.0
    for epoch in range(cfg.epochs):
        losses = []
        start = time.perf_counter()
        for idx in iterate_batches(len(retain), cfg.batch_retain, rng):
            xb, yb = retain.x[idx], retain.y[idx]
            if accelerated:
                fb = _draw(splits.forget, cfg.batch_f, rng)
                tb = _draw(splits.t, cfg.batch_f, rng)

                def objective(m, xb=xb, yb=yb, fb=fb, tb=tb):
                    return a_amu_objective(m, (xb, yb), fb, tb, cfg.lam, cfg.K, cfg.gamma_l1)
            else:
                def objective(m, xb=xb, yb=yb):
                    return _ce_objective(m, xb, yb, cfg.gamma_l1)
            loss, g = value_and_grad(objective, model)
            model = sgd_step(model, g, cfg.lr)
            losses.append(loss)
        seconds = time.perf_counter() - start
        elapsed += seconds
        entry = {"epoch": epoch + 1, "loss": float(np.mean(losses)), "seconds": seconds}
        if cfg.track_metrics:
            entry.update(evaluate(model, splits, cfg.K))
        trail.append(entry)
    return UnlearnResult(model, trail, float(preprocessing_seconds), elapsed,
                         cfg.method, cfg.retain_source)


@dataclass
class RoundOutcome:
    result: UnlearnResult
    splits: object
    pool_ids: np.ndarray = field(repr=False)


def run_rounds(pretrained, dataset, round_forget_ids, cfg, prepare=None):
    """Sequential unlearning: round r starts from round r-1's model.

    ``round_forget_ids`` lists each round's forget ids; they must be
    disjoint. The training pool shrinks by each round's forget set.
    ``prepare(splits, pool_ids, forget_ids)`` may attach extra retain
    sources (recomputed on the current pool) and returns its seconds.
    """
    rounds = [np.unique(np.asarray(r, dtype=np.int64)) for r in round_forget_ids]
    seen = np.zeros(0, dtype=np.int64)
    for r in rounds:
        if np.intersect1d(seen, r).size:
            raise InputError("forget sets of different rounds overlap")
        seen = np.union1d(seen, r)
    pool = dataset.train_ids
    model = pretrained
    outcomes = []
    for r, forget in enumerate(rounds):
        splits = build_splits(dataset, forget, pool)
        prep = prepare(splits, pool, forget) if prepare is not None else 0.0
        result = run_unlearning(model, splits, replace(cfg, seed=cfg.seed + r), prep)
        outcomes.append(RoundOutcome(result, splits, pool))
        pool = np.setdiff1d(pool, forget)
        model = result.model
    return outcomes
