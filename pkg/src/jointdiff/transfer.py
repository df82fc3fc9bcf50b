"""Pretrain on domain A, adapt on a shifted domain B with a small label budget.

Four pretraining regimes share one architecture and one init seed, so the
pretext task is the only variable:

* hybrid: joint denoising loss, mask term weighted by lambda;
* unsupervised: the same loss with lambda = 0 (mask head never trained);
* supervised: mask loss only, at the least-noise condition on clean inputs;
* none: the untouched initialization.

Adaptation is either full fine-tuning with cross-entropy at t = t_min on
clean inputs (mask head re-drawn when the class count changes) or a frozen
feature probe: a one-hidden-layer classifier on hidden activations collected
at a few noise levels. The reported number for both is the best validation
metric over epochs, with the pre-update model included as epoch zero, so
adapting on the evaluation distribution can never score below zero-shot.
"""
from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datasets import JointDataset, decode_labels
from .mlp import AdamW, HybridLossConfig, MlpDenoiser, TrainConfig, cross_entropy_grad, \
    silu, silu_grad, train_denoiser
from .schedules import Schedule

REGIMES = ("hybrid", "unsupervised", "supervised", "none")
METHODS = ("finetune", "probe")
REPORT_FORMAT = "jointdiff-transfer-report-v1"

_KEY_INIT, _KEY_PRETRAIN, _KEY_BUDGET, _KEY_FINETUNE, _KEY_PROBE = 10, 11, 12, 13, 14


def _derive(seed: int, *key: int) -> int:
    return int(np.random.SeedSequence(entropy=seed, spawn_key=key).generate_state(1)[0])


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=key))


def metric_name(ds: JointDataset) -> str:
    return "accuracy" if ds.P == 1 else "jaccard"


def predict_classes(model: MlpDenoiser, x: np.ndarray, schedule: Schedule,
                    K: int, P: int) -> np.ndarray:
    """Clean input, least-noise condition, argmax per mask block."""
    _, y_hat = model.forward(x, schedule.t_min)
    return decode_labels(y_hat, K, P)


def evaluate_classifier(model: MlpDenoiser, ds: JointDataset, schedule: Schedule) -> float:
    from .verify import accuracy, jaccard
    pred = predict_classes(model, ds.x, schedule, ds.K, ds.P)
    true = ds.labels()
    return accuracy(pred, true) if ds.P == 1 else jaccard(pred, true, ds.K)


# -- pretraining -----------------------------------------------------------------


def pretrain(regime: str, model: MlpDenoiser, dataset: JointDataset, schedule: Schedule,
             cfg: TrainConfig, lam: float = 1e-4):
    """Train (or skip) the given model under one regime. Returns a TrainResult.

    The supervised regime never draws a condition above t_min: the time is
    pinned there and inputs stay clean.
    """
    if regime not in REGIMES:
        raise ValueError(f"regime must be one of {REGIMES}")
    if regime == "none":
        from .mlp import TrainResult
        return TrainResult(model.copy(), {"epoch": [], "train_loss": [], "val_loss": [],
                                          "first_batch_loss": None, "best_epoch": 0,
                                          "best_val_loss": float("nan"),
                                          "stopped_early": False, "max_y_head_grad": 0.0,
                                          "t_max_seen": None})
    if regime == "hybrid":
        loss_cfg = HybridLossConfig(lam=lam)
    elif regime == "unsupervised":
        loss_cfg = HybridLossConfig(lam=0.0)
    else:  # supervised
        loss_cfg = HybridLossConfig(lam=1.0, image_weight=0.0)
        cfg = _replace_train(cfg, fixed_t=schedule.t_min, noisy=False)
    return train_denoiser(model, dataset, schedule, loss_cfg, cfg)


def _replace_train(cfg: TrainConfig, **kw) -> TrainConfig:
    fields = {k: getattr(cfg, k) for k in ("lr", "batch_size", "epochs", "patience",
                                           "warmup", "weight_decay", "beta1", "beta2",
                                           "eps", "seed", "val_fraction", "fixed_t",
                                           "noisy")}
    fields.update(kw)
    return TrainConfig(**fields)


# -- vanilla fine-tuning -----------------------------------------------------------


@dataclass(frozen=True)
class FinetuneConfig:
    budget: int = 20
    lr: float = 1e-3
    batch_size: int = 16
    epochs: int = 300
    patience: int = 20
    warmup: int = 0
    weight_decay: float = 1e-6

    def __post_init__(self) -> None:
        if self.budget < 1:
            raise ValueError("labeled budget must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")


@dataclass
class FinetuneResult:
    model: MlpDenoiser
    metric: float
    history: dict


def vanilla_finetune(model: MlpDenoiser, schedule: Schedule, train_ds: JointDataset,
                     val_ds: JointDataset, cfg: FinetuneConfig, seed: int) -> FinetuneResult:
    """Full fine-tune with cross-entropy at t_min on clean inputs.

    All weights update; only the mask head receives loss gradient, the rest
    follows through backprop. If the mask width differs from the target
    domain, the head is re-drawn from the seed; otherwise the starting
    weights are exactly the pretrained ones.
    """
    if train_ds.n < 1:
        raise ValueError("empty fine-tuning set")
    K, P = train_ds.K, train_ds.P
    if model.d_y != K * P:
        model = model.reinit_mask_head(K * P, _derive(seed, 0))
    else:
        model = model.copy()

    classes = train_ds.labels()
    opt = AdamW(model.params(), cfg.lr, weight_decay=cfg.weight_decay, warmup=cfg.warmup)
    rng = _rng(seed, 1)
    t0 = schedule.t_min

    best_metric = evaluate_classifier(model, val_ds, schedule)
    best = model.copy()
    hist = {"epoch": [0], "train_loss": [float("nan")], "val_metric": [best_metric]}
    since = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(train_ds.n)
        losses = []
        for lo in range(0, train_ds.n, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            xh, yh, cache = model.forward(train_ds.x[idx], t0, keep=True)
            loss, gy = cross_entropy_grad(yh, classes[idx], K)
            if not np.isfinite(loss):
                from .mlp import TrainingDiverged
                raise TrainingDiverged(f"non-finite fine-tune loss at epoch {epoch}")
            grads = model.backward(cache, np.zeros_like(xh), gy)
            opt.step(model.params(), grads)
            losses.append(loss)
        m = evaluate_classifier(model, val_ds, schedule)
        hist["epoch"].append(epoch)
        hist["train_loss"].append(float(np.mean(losses)))
        hist["val_metric"].append(m)
        if m > best_metric:
            best_metric, best, since = m, model.copy(), 0
        else:
            since += 1
            if since >= cfg.patience:
                break
    return FinetuneResult(best, best_metric, hist)


# -- frozen feature probe -----------------------------------------------------------


@dataclass(frozen=True)
class ProbeConfig:
    hidden: int = 64
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 300
    patience: int = 20
    t_set: tuple = ()  # empty: (t_min, 0.1, 0.25)


@dataclass
class ProbeResult:
    params: list
    metric: float
    backbone_unchanged: bool
    history: dict


def probe_features(model: MlpDenoiser, schedule: Schedule, x: np.ndarray,
                   t_set, gen: np.random.Generator) -> np.ndarray:
    """Concatenated hidden activations at each probe time, inputs noised per t."""
    cols = []
    for t in t_set:
        a, s = schedule.alpha_sigma(t)
        x_t = a * x + s * gen.standard_normal(x.shape)
        cols.extend(model.hidden_activations(x_t, t))
    return np.concatenate(cols, axis=1)


def feature_probe(model: MlpDenoiser, schedule: Schedule, train_ds: JointDataset,
                  val_ds: JointDataset, cfg: ProbeConfig, seed: int) -> ProbeResult:
    """Train a one-hidden-layer classifier on frozen backbone activations."""
    t_set = cfg.t_set or (schedule.t_min, 0.1, 0.25)
    checksum = model.checksum()
    K, P = train_ds.K, train_ds.P
    f_tr = probe_features(model, schedule, train_ds.x, t_set, _rng(seed, 0))
    f_va = probe_features(model, schedule, val_ds.x, t_set, _rng(seed, 1))
    classes_tr, classes_va = train_ds.labels(), val_ds.labels()

    F = f_tr.shape[1]
    gen = _rng(seed, 3)
    W1 = np.sqrt(2.0 / F) * gen.standard_normal((F, cfg.hidden))
    b1 = np.zeros(cfg.hidden)
    W2 = np.sqrt(1.0 / cfg.hidden) * gen.standard_normal((cfg.hidden, K * P))
    b2 = np.zeros(K * P)
    params = [W1, b1, W2, b2]
    opt = AdamW(params, cfg.lr)
    rng = _rng(seed, 2)

    def fwd(f):
        h = f @ params[0] + params[1]
        return h, silu(h) @ params[2] + params[3]

    def metric_of(logits, classes):
        from .verify import accuracy, jaccard
        pred = decode_labels(logits, K, P)
        return accuracy(pred, classes) if P == 1 else jaccard(pred, classes, K)

    best_metric = metric_of(fwd(f_va)[1], classes_va)
    best = [p.copy() for p in params]
    hist = {"epoch": [0], "val_metric": [best_metric]}
    since = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(f_tr))
        for lo in range(0, len(f_tr), cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            h, logits = fwd(f_tr[idx])
            _, gy = cross_entropy_grad(logits, classes_tr[idx], K)
            a1 = silu(h)
            g2 = a1.T @ gy
            gb2 = gy.sum(axis=0)
            dh = (gy @ params[2].T) * silu_grad(h)
            g1 = f_tr[idx].T @ dh
            gb1 = dh.sum(axis=0)
            opt.step(params, [g1, gb1, g2, gb2])
        m = metric_of(fwd(f_va)[1], classes_va)
        hist["epoch"].append(epoch)
        hist["val_metric"].append(m)
        if m > best_metric:
            best_metric, best, since = m, [p.copy() for p in params], 0
        else:
            since += 1
            if since >= cfg.patience:
                break
    return ProbeResult(best, best_metric, model.checksum() == checksum, hist)


# -- the comparison grid ------------------------------------------------------------


@dataclass(frozen=True)
class ModelConfig:
    hidden: tuple = (128, 128, 128)
    n_freqs: int = 16


@dataclass
class ExperimentReport:
    metric: str
    regimes: list
    methods: list
    budgets: list
    seeds: list
    rows: list = field(default_factory=list)  # dicts: regime, method, budget, seed, metric, error

    def summary(self) -> list[dict]:
        cells = []
        for regime in self.regimes:
            for method in self.methods:
                for budget in self.budgets:
                    sel = [r for r in self.rows
                           if r["regime"] == regime and r["method"] == method
                           and r["budget"] == budget]
                    vals = [r["metric"] for r in sel]
                    ok = [v for v in vals if np.isfinite(v)]
                    cells.append({
                        "regime": regime, "method": method, "budget": budget,
                        "mean": float(np.mean(ok)) if ok else float("nan"),
                        "std": float(np.std(ok)) if ok else float("nan"),
                        "n": len(ok),
                        "metrics": [float(v) for v in vals],
                        "errors": [r["error"] for r in sel if r["error"]],
                    })
        return cells

    def cell_mean(self, regime: str, method: str, budget: int) -> float:
        for c in self.summary():
            if (c["regime"], c["method"], c["budget"]) == (regime, method, budget):
                return c["mean"]
        raise KeyError((regime, method, budget))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["regime", "method", "budget", "seed", "metric"])
            for r in self.rows:
                writer.writerow([r["regime"], r["method"], r["budget"], r["seed"],
                                 f"{r['metric']:.17g}"])

    def to_json_dict(self) -> dict:
        # NaN is not valid JSON; failed cells carry null plus an error string
        def clean(v):
            if isinstance(v, float) and not np.isfinite(v):
                return None
            if isinstance(v, list):
                return [clean(x) for x in v]
            return v
        cells = [{k: clean(v) for k, v in c.items()} for c in self.summary()]
        return {"format": REPORT_FORMAT, "metric": self.metric,
                "regimes": list(self.regimes), "methods": list(self.methods),
                "budgets": [int(b) for b in self.budgets],
                "seeds": [int(s) for s in self.seeds], "cells": cells}

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json_dict(), indent=2, sort_keys=True)
                              + "\n")


def run_comparison(schedule: Schedule, domain_a: JointDataset, domain_b_pool: JointDataset,
                   domain_b_eval: JointDataset, *, regimes=REGIMES, methods=METHODS,
                   budgets=(20,), seeds=(0, 1, 2), model_cfg: ModelConfig = ModelConfig(),
                   pretrain_cfg: TrainConfig = TrainConfig(),
                   finetune_cfg: FinetuneConfig = FinetuneConfig(),
                   probe_cfg: ProbeConfig = ProbeConfig(), lam: float = 1e-4,
                   jobs: int = 1) -> ExperimentReport:
    """Every regime x method x budget cell, repeated over seeds.

    Per seed, all regimes share the same initialization and the same labeled
    subsets of domain B, so cells differ only in the pretext task. Units of
    work are (regime, seed) pairs; `jobs` maps them over threads without
    changing any result, since each unit is internally seeded and writes its
    own slots. Failures are recorded in the affected rows (metric NaN) and
    the grid keeps going.
    """
    for r in regimes:
        if r not in REGIMES:
            raise ValueError(f"unknown regime {r!r}")
    for m in methods:
        if m not in METHODS:
            raise ValueError(f"unknown method {m!r}")
    if max(budgets) > domain_b_pool.n:
        raise ValueError("labeled budget exceeds the domain B pool")

    def unit(regime: str, seed: int) -> list[dict]:
        rows = []
        try:
            init = MlpDenoiser.create(domain_a.d_x, domain_a.d_y,
                                      _derive(seed, _KEY_INIT), model_cfg.hidden,
                                      model_cfg.n_freqs)
            trained = pretrain(regime, init,
                               domain_a, schedule,
                               _replace_train(pretrain_cfg, seed=_derive(seed, _KEY_PRETRAIN)),
                               lam=lam).model
        except Exception as exc:  # pretrain failure poisons the whole unit
            for method in methods:
                for budget in budgets:
                    rows.append({"regime": regime, "method": method, "budget": int(budget),
                                 "seed": int(seed), "metric": float("nan"),
                                 "error": f"pretrain: {exc}"})
            return rows
        for budget in budgets:
            idx = _rng(seed, _KEY_BUDGET, int(budget)).choice(domain_b_pool.n,
                                                              size=int(budget),
                                                              replace=False)
            labeled = domain_b_pool.subset(np.sort(idx))
            for method in methods:
                try:
                    if method == "finetune":
                        res = vanilla_finetune(trained, schedule, labeled, domain_b_eval,
                                               _replace_finetune(finetune_cfg,
                                                                 budget=int(budget)),
                                               seed=_derive(seed, _KEY_FINETUNE))
                        metric, error = res.metric, ""
                    else:
                        res = feature_probe(trained, schedule, labeled, domain_b_eval,
                                            probe_cfg, seed=_derive(seed, _KEY_PROBE))
                        if not res.backbone_unchanged:
                            raise RuntimeError("probe modified the frozen backbone")
                        metric, error = res.metric, ""
                except Exception as exc:
                    metric, error = float("nan"), str(exc)
                rows.append({"regime": regime, "method": method, "budget": int(budget),
                             "seed": int(seed), "metric": float(metric), "error": error})
        return rows

    units = [(regime, seed) for regime in regimes for seed in seeds]
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(lambda u: unit(*u), units))
    else:
        results = [unit(*u) for u in units]

    report = ExperimentReport(metric_name(domain_b_eval), list(regimes), list(methods),
                              [int(b) for b in budgets], [int(s) for s in seeds])
    for rows in results:
        report.rows.extend(rows)
    return report


def _replace_finetune(cfg: FinetuneConfig, **kw) -> FinetuneConfig:
    fields = {k: getattr(cfg, k) for k in ("budget", "lr", "batch_size", "epochs",
                                           "patience", "warmup", "weight_decay")}
    fields.update(kw)
    return FinetuneConfig(**fields)
