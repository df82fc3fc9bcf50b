"""Config-driven command line: pretrain, sample, verify, finetune, report.

Experiment definitions live in JSON configs; flags only carry paths, seeds,
and small overrides, so a run is archivable. Every run writes a resolved
copy of its config next to its outputs, and reruns with the same config and
seed reproduce every data file byte for byte (no timestamps anywhere).

Exit codes: 0 success; 2 config or checkpoint-integrity error; 3 training
divergence; 4 more than 1% of sampling trajectories aborted; 5 a
verification check failed (the report is still written).

Tabular outputs are RFC-4180 CSV (UTF-8, '.' decimal separator). The report
subcommand also renders PNG figures next to the CSV/JSON it writes.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import datasets, transfer, verify as verify_mod
from .mlp import (CheckpointError, HybridLossConfig, MlpDenoiser, TrainConfig,
                  TrainingDiverged, load_checkpoint, save_checkpoint, train_denoiser)
from .oracle import OracleDenoiser
from .samplers import SamplerConfig, sample_joint, save_samples_csv, save_trajectories_csv
from .schedules import Schedule

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_ABORTED = 4
EXIT_VERIFY = 5

OUT_ROOT_ENV = "JOINTDIFF_OUT"


class ConfigError(ValueError):
    pass


# -- config plumbing --


def _load_config(path: str) -> dict:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        cfg = json.loads(p.read_text())
    except ValueError as exc:
        raise ConfigError(f"config {p} is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError(f"config {p} must be a JSON object")
    return cfg


def _check_keys(block: dict, allowed: set, context: str) -> None:
    unknown = set(block) - allowed
    if unknown:
        raise ConfigError(f"unknown {context} keys: {sorted(unknown)}")


def _build(cls, block: dict, context: str, **extra):
    try:
        return cls(**{**block, **extra})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad {context} block: {exc}") from exc


def _schedule(cfg: dict) -> Schedule:
    return _build(Schedule, cfg.get("schedule", {}), "schedule")


def _dataset(block, context: str = "dataset") -> datasets.JointDataset:
    if not isinstance(block, dict):
        raise ConfigError(f"{context} block must be an object")
    try:
        return datasets.make_dataset(block)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad {context} block: {exc}") from exc


def _out_dir(args, cfg: dict, default_name: str) -> Path:
    if args.out_dir:
        out = Path(args.out_dir)
    else:
        root = Path(os.environ.get(OUT_ROOT_ENV, "runs"))
        out = root / cfg.get("name", default_name)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_resolved(out: Path, cfg: dict) -> None:
    (out / "config.resolved.json").write_text(
        json.dumps(cfg, indent=2, sort_keys=True) + "\n")


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _derive_seed(seed: int, *key: int) -> int:
    return int(np.random.SeedSequence(entropy=seed, spawn_key=key).generate_state(1)[0])


# -- pretrain --

_PRETRAIN_KEYS = {"schedule", "dataset", "model", "train", "loss", "seed", "name"}


def cmd_pretrain(args) -> int:
    cfg = _load_config(args.config)
    _check_keys(cfg, _PRETRAIN_KEYS, "pretrain config")
    if args.seed is not None:
        cfg["seed"] = args.seed
    seed = int(cfg.get("seed", 0))
    out = _out_dir(args, cfg, "pretrain")
    _write_resolved(out, cfg)

    schedule = _schedule(cfg)
    ds = _dataset(cfg.get("dataset", {}))
    model_block = dict(cfg.get("model", {}))
    _check_keys(model_block, {"hidden", "n_freqs"}, "model")
    hidden = tuple(model_block.get("hidden", (128, 128, 128)))
    n_freqs = int(model_block.get("n_freqs", 16))
    loss_cfg = _build(HybridLossConfig, cfg.get("loss", {}), "loss")
    train_block = dict(cfg.get("train", {}))
    train_block.setdefault("seed", seed)
    train_cfg = _build(TrainConfig, train_block, "train")

    model = MlpDenoiser.create(ds.d_x, ds.d_y, seed, hidden, n_freqs)
    result = train_denoiser(model, ds, schedule, loss_cfg, train_cfg)

    if loss_cfg.image_weight == 0:
        regime = "supervised"
    elif loss_cfg.lam == 0:
        regime = "unsupervised"
    else:
        regime = "hybrid"
    save_checkpoint(out, "checkpoint", result.model, schedule, loss_cfg=loss_cfg,
                    train_cfg=train_cfg, seed=seed, regime=regime,
                    labels={"K": ds.K, "P": ds.P},
                    metrics={"best_val_loss": result.history["best_val_loss"],
                             "best_epoch": result.history["best_epoch"],
                             "epochs_run": len(result.history["epoch"])})
    with open(out / "loss_curve.csv", "w", newline="", encoding="utf-8") as fh:
        import csv
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_loss"])
        for epoch, tr, va in result.curve_rows():
            writer.writerow([epoch, f"{tr:.17g}", f"{va:.17g}"])
    print(f"pretrain: {len(result.history['epoch'])} epochs, "
          f"best val loss {result.history['best_val_loss']:.6g} "
          f"at epoch {result.history['best_epoch']}; wrote {out}/checkpoint.json")
    return EXIT_OK


# -- sample --

_SAMPLE_KEYS = {"schedule", "dataset", "checkpoint", "sampler", "n", "mode", "oracle",
                "trajectories", "seed", "name"}


def _load_denoiser(cfg: dict, need_oracle: bool):
    """Returns (denoiser, schedule, (K, P) or None)."""
    use_oracle = bool(cfg.get("oracle", False))
    if use_oracle or need_oracle:
        if "dataset" not in cfg:
            raise ConfigError("oracle mode needs a dataset block")
        schedule = _schedule(cfg)
        ds = _dataset(cfg["dataset"])
        return OracleDenoiser(ds, schedule), schedule, (ds.K, ds.P)
    if "checkpoint" in cfg:
        try:
            model, manifest = load_checkpoint(cfg["checkpoint"])
        except CheckpointError as exc:
            raise ConfigError(str(exc)) from exc
        if "schedule" in cfg:
            schedule = _schedule(cfg)
        else:
            schedule = _build(Schedule, manifest["schedule"], "checkpoint schedule")
        labels = manifest.get("labels") or {}
        kp = (labels["K"], labels["P"]) if {"K", "P"} <= set(labels) else None
        return model, schedule, kp
    raise ConfigError("need either a checkpoint path or oracle: true with a dataset")


def cmd_sample(args) -> int:
    cfg = _load_config(args.config)
    _check_keys(cfg, _SAMPLE_KEYS, "sample config")
    if args.oracle:
        cfg["oracle"] = True
    if args.n is not None:
        cfg["n"] = args.n
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.y_init is not None:
        cfg.setdefault("sampler", {})["y_init"] = args.y_init
    if args.trajectories:
        cfg["trajectories"] = True
    out = _out_dir(args, cfg, "sample")
    _write_resolved(out, cfg)

    denoiser, schedule, kp = _load_denoiser(cfg, need_oracle=False)
    sampler_block = dict(cfg.get("sampler", {}))
    sampler_block.setdefault("seed", int(cfg.get("seed", 0)))
    sampler_block["keep_trajectories"] = bool(cfg.get("trajectories", False))
    scfg = _build(SamplerConfig, sampler_block, "sampler")
    n = int(cfg.get("n", 2000))
    mode = cfg.get("mode", "hybrid")

    try:
        result = sample_joint(denoiser, schedule, scfg, n, mode=mode, jobs=args.jobs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    K, P = kp if kp else (None, None)
    save_samples_csv(result, out / "samples.csv", K, P)
    if result.trajectories is not None:
        save_trajectories_csv(result.trajectories, out / "trajectories.csv")
    n_aborted = int(result.aborted.sum())
    print(f"sample: wrote {n} rows to {out}/samples.csv ({n_aborted} aborted)")
    if n > 0 and n_aborted / n > 0.01:
        print(f"sample: {n_aborted}/{n} trajectories aborted", file=sys.stderr)
        return EXIT_ABORTED
    return EXIT_OK


# -- verify --

_VERIFY_KEYS = {"schedule", "dataset", "checkpoint", "checks", "seed", "name"}
_CHECK_DEFAULTS = {
    "schedule_identities": {"grid_points": 1000, "rel_tol": 1e-6, "vp_tol": 1e-12},
    "score_fd": {"probes": 100, "fd_step": 1e-5, "rel_tol": 1e-5},
    "yt_invariance": {"steps": 400, "grid": "log", "tol": 1e-3,
                      "prefactor_rel_tol": 0.02},
    "ode_identity": {"steps": 400, "grid": "log", "tol": 1e-3},
    "quad_variation": {"steps": 400, "grid": "log", "m_paths": 1000, "std_tol": 0.02,
                       "isometry_rel_tol": 0.1},
    "joint_fidelity": {"steps": 200, "grid": "log", "n_permutations": 100,
                       "label_agreement_min": 0.99},
    "solver_agreement": {"n": 16, "steps_exp": 100, "steps_ref": 2000, "grid": "log",
                         "tol": 1e-2},
}


def _check_schedule_identities(schedule, oracle, model, seed, p):
    h = 1e-6
    ts = np.linspace(schedule.t_min + h, 1.0 - h, p["grid_points"])
    alpha, sigma = schedule.alpha_sigma(ts)
    vp_err = float(np.max(np.abs(alpha ** 2 + sigma ** 2 - 1.0)))
    s2 = lambda t: schedule.alpha_sigma(t)[1] ** 2
    la = lambda t: np.log(schedule.alpha_sigma(t)[0])
    ds2 = (s2(ts + h) - s2(ts - h)) / (2 * h)
    f_fd = (la(ts + h) - la(ts - h)) / (2 * h)
    g2_fd = ds2 - 2.0 * f_fd * s2(ts)
    g2 = schedule.drift_diffusion(ts)[1]
    rel = float(np.max(np.abs(g2_fd - g2) / np.abs(g2)))
    return {"g2_fd_rel_err": rel, "vp_identity_err": vp_err}, \
        rel < p["rel_tol"] and vp_err < p["vp_tol"]


def _check_score_fd(schedule, oracle, model, seed, p):
    rng = np.random.default_rng(seed)
    h = p["fd_step"]
    worst = 0.0
    for _ in range(p["probes"]):
        i = rng.integers(oracle.dataset.n)
        t = rng.uniform(schedule.t_min, 1.0)
        a, s = schedule.alpha_sigma(t)
        x = a * oracle.dataset.x[i] + s * rng.standard_normal(oracle.d_x)
        an = oracle.score(x, t)
        fd = np.empty_like(an)
        for j in range(oracle.d_x):
            e = np.zeros(oracle.d_x)
            e[j] = h
            fd[j] = (oracle.log_density(x + e, t) - oracle.log_density(x - e, t)) / (2 * h)
        rel = np.max(np.abs(an - fd)) / max(np.max(np.abs(an)), 1e-8)
        worst = max(worst, float(rel))
    return {"max_rel_err": worst}, worst < p["rel_tol"]


def _check_yt_invariance(schedule, oracle, model, seed, p):
    den = model if model is not None else oracle
    res = verify_mod.verify_yT_invariance(den, schedule, steps=p["steps"],
                                          grid=p["grid"], seed=seed)
    ok = res.max_deviation < p["tol"] and res.prefactor_error < p["prefactor_rel_tol"]
    return {"max_deviation": res.max_deviation, "prefactor_rel_err": res.prefactor_error,
            "sigma_ratio": res.sigma_ratio, "alpha_residual": res.alpha_residual}, ok


def _check_ode_identity(schedule, oracle, model, seed, p):
    den = model if model is not None else oracle
    res = verify_mod.verify_ode_integral_identity(den, schedule, steps=p["steps"],
                                                  grid=p["grid"], seed=seed)
    return {"residual": res.residual}, res.residual < p["tol"]


def _check_quad_variation(schedule, oracle, model, seed, p):
    den = model if model is not None else oracle
    res = verify_mod.verify_quadratic_variation(den, schedule, steps=p["steps"],
                                                grid=p["grid"], m_paths=p["m_paths"],
                                                seed=seed)
    stats = {"std_final": res.std_final, "variance_min_at_end": res.monotone_to_minimum}
    ok = res.std_final < p["std_tol"] and res.monotone_to_minimum
    if oracle is not None and model is None and oracle.dataset.n == 1:
        ref = verify_mod.ito_isometry_reference(schedule, schedule.t_min)
        rel = abs(res.variance[-1] - ref) / ref
        stats["isometry_rel_err"] = rel
        ok = ok and rel < p["isometry_rel_tol"]
    return stats, ok


def _check_joint_fidelity(schedule, oracle, model, seed, p):
    ds = oracle.dataset
    half = ds.n // 2
    atoms, held = ds.split((half, ds.n - half), seed=_derive_seed(seed, 10))
    o = OracleDenoiser(atoms, schedule)
    base = SamplerConfig(method="heun-ode", steps=p["steps"], grid=p["grid"],
                         seed=_derive_seed(seed, 11))
    hyb = sample_joint(o, schedule, base, held.n, mode="hybrid")
    test = verify_mod.two_sample_test(
        np.hstack([hyb.x0, hyb.y0]), np.hstack([held.x, held.y]),
        n_permutations=p["n_permutations"], seed=_derive_seed(seed, 12))
    agree = float(np.mean(datasets.decode_labels(hyb.y0, ds.K, ds.P)
                          == datasets.decode_labels(o.dataset.mu(hyb.x0), ds.K, ds.P)))
    two = sample_joint(o, schedule,
                       SamplerConfig(method="heun-ode", steps=p["steps"], grid=p["grid"],
                                     seed=_derive_seed(seed, 13)),
                       held.n, mode="two-stage")
    cross = verify_mod.two_sample_test(
        np.hstack([hyb.x0, hyb.y0]), np.hstack([two.x0, two.y0]),
        n_permutations=p["n_permutations"], seed=_derive_seed(seed, 14))
    stats = {"energy_distance": test.statistic, "energy_threshold": test.threshold,
             "label_agreement": agree, "two_stage_energy": cross.statistic,
             "two_stage_threshold": cross.threshold}
    return stats, test.passed and cross.passed and agree >= p["label_agreement_min"]


def _check_solver_agreement(schedule, oracle, model, seed, p):
    # Compared before the terminal denoise: the final posterior-mean jump is
    # discontinuous across basin boundaries and would turn sub-tolerance
    # integration error into O(1) label flips.
    den = model if model is not None else oracle
    s = _derive_seed(seed, 15)
    exp = sample_joint(den, schedule,
                       SamplerConfig(method="exponential-ode", steps=p["steps_exp"],
                                     grid=p["grid"], seed=s, denoise_to_zero=False),
                       p["n"], mode="hybrid")
    ref = sample_joint(den, schedule,
                       SamplerConfig(method="heun-ode", steps=p["steps_ref"],
                                     grid=p["grid"], seed=s, denoise_to_zero=False),
                       p["n"], mode="hybrid")
    diff = float(np.max(np.abs(np.hstack([exp.x0, exp.y0]) - np.hstack([ref.x0, ref.y0]))))
    return {"max_diff": diff}, diff < p["tol"]


_CHECKS = {
    "schedule_identities": _check_schedule_identities,
    "score_fd": _check_score_fd,
    "yt_invariance": _check_yt_invariance,
    "ode_identity": _check_ode_identity,
    "quad_variation": _check_quad_variation,
    "joint_fidelity": _check_joint_fidelity,
    "solver_agreement": _check_solver_agreement,
}


def cmd_verify(args) -> int:
    cfg = _load_config(args.config)
    _check_keys(cfg, _VERIFY_KEYS, "verify config")
    if args.seed is not None:
        cfg["seed"] = args.seed
    seed = int(cfg.get("seed", 0))
    out = _out_dir(args, cfg, "verify")
    _write_resolved(out, cfg)

    schedule = _schedule(cfg)
    oracle = None
    if "dataset" in cfg:
        oracle = OracleDenoiser(_dataset(cfg["dataset"]), schedule)
    model = None
    if "checkpoint" in cfg:
        try:
            model, _ = load_checkpoint(cfg["checkpoint"])
        except CheckpointError as exc:
            raise ConfigError(str(exc)) from exc

    checks_cfg = cfg.get("checks", {})
    if not isinstance(checks_cfg, dict):
        raise ConfigError("checks must be an object mapping check name to params")
    records = []
    for name, params in checks_cfg.items():
        if name not in _CHECKS:
            raise ConfigError(f"unknown check {name!r}; known: {sorted(_CHECKS)}")
        if params is False:
            continue
        merged = dict(_CHECK_DEFAULTS[name])
        if isinstance(params, dict):
            _check_keys(params, set(merged), f"check {name}")
            merged.update(params)
        needs_oracle = name in ("score_fd", "joint_fidelity", "quad_variation",
                                "yt_invariance", "ode_identity", "solver_agreement")
        if needs_oracle and oracle is None and model is None:
            raise ConfigError(f"check {name} needs a dataset or checkpoint")
        if name in ("score_fd", "joint_fidelity") and oracle is None:
            raise ConfigError(f"check {name} needs a dataset block")
        stats, passed = _CHECKS[name](schedule, oracle, model, seed, merged)
        records.append({"name": name, "passed": bool(passed), "statistics": stats,
                        "thresholds": merged})
    all_passed = all(r["passed"] for r in records)
    _write_json(out / "verify_report.json",
                {"checks": records, "passed": all_passed, "seed": seed})
    for r in records:
        print(f"verify: {r['name']}: {'PASS' if r['passed'] else 'FAIL'}")
    print(f"verify: wrote {out}/verify_report.json")
    return EXIT_OK if all_passed else EXIT_VERIFY


# -- finetune --

_FINETUNE_KEYS = {"checkpoint", "schedule", "dataset", "eval_dataset", "budget",
                  "method", "finetune", "probe", "seed", "name"}


def cmd_finetune(args) -> int:
    cfg = _load_config(args.config)
    _check_keys(cfg, _FINETUNE_KEYS, "finetune config")
    if args.seed is not None:
        cfg["seed"] = args.seed
    seed = int(cfg.get("seed", 0))
    out = _out_dir(args, cfg, "finetune")
    _write_resolved(out, cfg)

    if "checkpoint" not in cfg:
        raise ConfigError("finetune needs a checkpoint path")
    try:
        model, manifest = load_checkpoint(cfg["checkpoint"])
    except CheckpointError as exc:
        raise ConfigError(str(exc)) from exc
    schedule = _schedule(cfg) if "schedule" in cfg else _build(
        Schedule, manifest["schedule"], "checkpoint schedule")
    pool = _dataset(cfg.get("dataset", {}), "dataset")
    eval_ds = _dataset(cfg.get("eval_dataset", {}), "eval_dataset")
    budget = int(cfg.get("budget", 20))
    method = cfg.get("method", "finetune")
    if method not in transfer.METHODS:
        raise ConfigError(f"method must be one of {transfer.METHODS}")
    if not 1 <= budget <= pool.n:
        raise ConfigError(f"budget must be in [1, {pool.n}], got {budget}")
    idx = np.sort(np.random.default_rng(
        np.random.SeedSequence(entropy=seed, spawn_key=(transfer._KEY_BUDGET, budget))
    ).choice(pool.n, size=budget, replace=False))
    labeled = pool.subset(idx)

    if method == "finetune":
        fcfg = _build(transfer.FinetuneConfig, cfg.get("finetune", {}), "finetune",
                      budget=budget)
        res = transfer.vanilla_finetune(model, schedule, labeled, eval_ds, fcfg,
                                        seed=_derive_seed(seed, transfer._KEY_FINETUNE))
        save_checkpoint(out, "finetuned", res.model, schedule, seed=seed,
                        regime=manifest.get("regime"),
                        labels={"K": eval_ds.K, "P": eval_ds.P},
                        metrics={"metric": res.metric, "budget": budget})
        curve = res.history
    else:
        pcfg = _build(transfer.ProbeConfig, cfg.get("probe", {}), "probe")
        res = transfer.feature_probe(model, schedule, labeled, eval_ds, pcfg,
                                     seed=_derive_seed(seed, transfer._KEY_PROBE))
        curve = res.history
    _write_json(out / "metrics.json",
                {"method": method, "metric": res.metric, "budget": budget, "seed": seed,
                 "metric_name": transfer.metric_name(eval_ds)})
    import csv
    with open(out / "curve.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "val_metric"])
        for epoch, metric in zip(curve["epoch"], curve["val_metric"]):
            writer.writerow([epoch, f"{metric:.17g}"])
    print(f"finetune: {method} metric {res.metric:.6g} on {eval_ds.name}; wrote {out}")
    return EXIT_OK


# -- report --

_REPORT_KEYS = {"schedule", "domain_a", "domain_b", "domain_b_eval", "budgets", "seeds",
                "regimes", "methods", "model", "pretrain", "finetune", "probe",
                "lambda", "name"}

# Default transfer pair: an 8-component, 8-class mixture and its rotated,
# shifted counterpart. Calibrated so that with a budget of 20 labels every
# pretrained regime beats the no-pretraining baseline on its mean metric.
_DEFAULT_DOMAIN_A = {"kind": "gaussian_mixture", "n_components": 8, "n_samples": 512,
                     "d_x": 2, "K": 8, "seed": 100, "scale": 0.08}
_DEFAULT_DOMAIN_B = {"kind": "gaussian_mixture", "n_components": 8, "n_samples": 200,
                     "d_x": 2, "K": 8, "seed": 200, "scale": 0.08,
                     "shift": 0.3, "rotation": 0.5235987755982988}
_DEFAULT_DOMAIN_B_EVAL = {"kind": "gaussian_mixture", "n_components": 8, "n_samples": 400,
                          "d_x": 2, "K": 8, "seed": 300, "scale": 0.08,
                          "shift": 0.3, "rotation": 0.5235987755982988}


def _render_report_figures(report: transfer.ExperimentReport, out: Path) -> list[Path]:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    written = []
    cells = report.summary()
    for budget in report.budgets:
        fig, ax = plt.subplots(figsize=(7, 4))
        width = 0.8 / len(report.methods)
        xs = np.arange(len(report.regimes))
        for mi, method in enumerate(report.methods):
            means = [next(c["mean"] for c in cells
                          if c["regime"] == r and c["method"] == method
                          and c["budget"] == budget) for r in report.regimes]
            stds = [next(c["std"] for c in cells
                         if c["regime"] == r and c["method"] == method
                         and c["budget"] == budget) for r in report.regimes]
            ax.bar(xs + mi * width, means, width, yerr=stds, capsize=3, label=method)
        ax.set_xticks(xs + width * (len(report.methods) - 1) / 2)
        ax.set_xticklabels(report.regimes)
        ax.set_ylabel(report.metric)
        ax.set_title(f"{report.metric} by pretraining regime, budget {budget}")
        ax.legend()
        fig.tight_layout()
        path = out / f"fig_budget{budget}.png"
        fig.savefig(path, dpi=110, metadata={"Software": "jointdiff"})
        plt.close(fig)
        written.append(path)
    return written


def cmd_report(args) -> int:
    cfg = _load_config(args.config)
    _check_keys(cfg, _REPORT_KEYS, "report config")
    if args.seed is not None:
        cfg["seeds"] = [args.seed]
    cfg.setdefault("domain_a", dict(_DEFAULT_DOMAIN_A))
    cfg.setdefault("domain_b", dict(_DEFAULT_DOMAIN_B))
    cfg.setdefault("domain_b_eval", dict(_DEFAULT_DOMAIN_B_EVAL))
    out = _out_dir(args, cfg, "report")
    _write_resolved(out, cfg)

    schedule = _schedule(cfg)
    domain_a = _dataset(cfg.get("domain_a", {}), "domain_a")
    domain_b = _dataset(cfg.get("domain_b", {}), "domain_b")
    domain_b_eval = _dataset(cfg.get("domain_b_eval", {}), "domain_b_eval")
    model_block = dict(cfg.get("model", {}))
    _check_keys(model_block, {"hidden", "n_freqs"}, "model")
    if "hidden" in model_block:
        model_block["hidden"] = tuple(model_block["hidden"])
    report = transfer.run_comparison(
        schedule, domain_a, domain_b, domain_b_eval,
        regimes=tuple(cfg.get("regimes", transfer.REGIMES)),
        methods=tuple(cfg.get("methods", transfer.METHODS)),
        budgets=tuple(cfg.get("budgets", (20,))),
        seeds=tuple(cfg.get("seeds", (0, 1, 2))),
        model_cfg=_build(transfer.ModelConfig, model_block, "model"),
        pretrain_cfg=_build(TrainConfig, cfg.get("pretrain", {}), "pretrain"),
        finetune_cfg=_build(transfer.FinetuneConfig, cfg.get("finetune", {}), "finetune"),
        probe_cfg=_build(transfer.ProbeConfig, cfg.get("probe", {}), "probe"),
        lam=float(cfg.get("lambda", 1e-4)),
        jobs=args.jobs)
    report.to_csv(out / "report.csv")
    report.to_json(out / "report.json")
    figures = _render_report_figures(report, out)
    n_failed = sum(1 for r in report.rows if not np.isfinite(r["metric"]))
    print(f"report: {len(report.rows)} cells ({n_failed} failed), "
          f"wrote {out}/report.csv, report.json, {len(figures)} figure(s)")
    return EXIT_OK


# -- entry point --


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="jointdiff",
        description="Joint image+mask diffusion lab: train, sample, verify, transfer.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="JSON config path")
        p.add_argument("--out-dir", default=None,
                       help=f"output directory (default: ${OUT_ROOT_ENV} or ./runs, "
                            "plus the config's name)")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--jobs", type=int, default=1,
                       help="worker cap for parallel parts; results are identical for any value")

    p = sub.add_parser("pretrain", help="train a denoiser, write a checkpoint")
    common(p)
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("sample", help="generate (x, y) samples to CSV")
    common(p)
    p.add_argument("--oracle", action="store_true", help="use the exact dataset denoiser")
    p.add_argument("--n", type=int, default=None, help="number of samples")
    p.add_argument("--y-init", default=None, help="zeros | normal | constant:<c>")
    p.add_argument("--trajectories", action="store_true", help="also write trajectories.csv")
    p.set_defaults(fn=cmd_sample)

    p = sub.add_parser("verify", help="run numerical checks, write a JSON report")
    common(p)
    p.set_defaults(fn=cmd_verify)

    p = sub.add_parser("finetune", help="adapt a checkpoint on a labeled budget")
    common(p)
    p.set_defaults(fn=cmd_finetune)

    p = sub.add_parser("report", help="full pretrain/adapt comparison grid with figures")
    common(p)
    p.set_defaults(fn=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
